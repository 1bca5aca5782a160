"""Mask-to-point transfer: top-view instance assignment and per-view
pixel back-projection with depth-consistent nearest-neighbor matching.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import CameraView, PointCloud
from .errors import NonPositiveDepth, ResolutionMismatch
from .renderer import RenderedView

# One semantic observation: a view claims a class for a 3D point.
OBSERVATION_DTYPE = np.dtype([
    ("point_id", np.int64),
    ("view_id", np.int64),
    ("class_id", np.int32),
    ("region_id", np.int32),
    ("q", np.float64),         # detector confidence of the source region
    ("source_pixel", np.int64),  # row * W + col of the matched pixel
])


@dataclass(frozen=True)
class Region:
    """One detected region of a mask set."""

    region_id: int
    class_id: int
    class_name: str
    confidence: float          # detector confidence in [0, 1]
    bbox: tuple[int, int, int, int]   # (x, y, w, h) in pixels
    pixel_count: int

    def __post_init__(self):
        if self.region_id < 1:
            raise ValueError("region ids start at 1 (0 is background)")
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError("region confidence must lie in [0, 1]")


@dataclass(frozen=True)
class MaskSet:
    """Label image plus per-region detection records for one view.

    Pixel value 0 is background; every nonzero pixel value must appear in
    ``regions`` exactly once, and each region's bbox must contain all of
    its pixels.
    """

    view_id: int
    label_image: np.ndarray           # (H, W) int32
    regions: tuple[Region, ...]

    def __post_init__(self):
        img = np.asarray(self.label_image)
        if img.ndim != 2:
            raise ValueError("label image must be 2-d")
        img = np.ascontiguousarray(img.astype(np.int32, copy=True))
        present = np.unique(img)
        present = set(int(p) for p in present if p != 0)
        declared = [r.region_id for r in self.regions]
        if len(set(declared)) != len(declared):
            raise ValueError("duplicate region ids")
        declared_set = set(declared)
        if present - declared_set:
            raise ValueError(f"pixels reference undeclared regions {sorted(present - declared_set)}")
        if declared_set - present:
            raise ValueError(f"regions without pixels {sorted(declared_set - present)}")
        for r in self.regions:
            ys, xs = np.nonzero(img == r.region_id)
            x0, y0, w, h = r.bbox
            if xs.min() < x0 or ys.min() < y0 or xs.max() >= x0 + w or ys.max() >= y0 + h:
                raise ValueError(f"region {r.region_id} has pixels outside its bbox")
            if r.pixel_count != xs.size:
                raise ValueError(f"region {r.region_id} pixel_count mismatch")
        img.flags.writeable = False
        object.__setattr__(self, "label_image", img)
        object.__setattr__(self, "regions", tuple(self.regions))

    def region_by_id(self, region_id: int) -> Region:
        for r in self.regions:
            if r.region_id == region_id:
                return r
        from .errors import UnknownRegion
        raise UnknownRegion(f"region {region_id} not in view {self.view_id}")


def regions_from_label_image(label_image: np.ndarray,
                             class_of: dict[int, tuple[int, str]],
                             confidence_of: dict[int, float]) -> tuple[Region, ...]:
    """Build Region records (bbox, pixel counts) from a label image."""
    regs = []
    for rid in np.unique(label_image):
        rid = int(rid)
        if rid == 0:
            continue
        ys, xs = np.nonzero(label_image == rid)
        cid, name = class_of[rid]
        regs.append(Region(
            region_id=rid, class_id=cid, class_name=name,
            confidence=confidence_of[rid],
            bbox=(int(xs.min()), int(ys.min()),
                  int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)),
            pixel_count=int(xs.size),
        ))
    return tuple(regs)


@dataclass(frozen=True)
class MatchConfig:
    """Back-projection matching tolerances, in world units."""

    match_radius: float       # max query-to-point distance for a match
    depth_tolerance: float    # max |rendered depth - matched point depth|

    def __post_init__(self):
        if self.match_radius <= 0 or self.depth_tolerance <= 0:
            raise ValueError("match radius and depth tolerance must be > 0")


def project_points(view: CameraView, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch pinhole projection.

    Returns (uv, depth, in_front) where uv is (n, 2) pixel coordinates
    (valid only where in_front), depth the camera-space z, and in_front
    marks points with z > 0.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = pts @ view.rotation.T + view.translation
    z = cam[:, 2]
    in_front = z > 0.0
    uv = np.empty((len(pts), 2), dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        uv[:, 0] = view.fx * cam[:, 0] / z + view.cx
        uv[:, 1] = view.fy * cam[:, 1] / z + view.cy
    return uv, z, in_front


def project(view: CameraView, point: np.ndarray) -> tuple[float, float, float] | None:
    """Pinhole projection of one point; None if it is behind the camera."""
    uv, z, in_front = project_points(view, np.asarray(point).reshape(1, 3))
    if not in_front[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1]), float(z[0])


def unproject_pixels(view: CameraView, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Batch inverse projection: pixel + depth -> world point."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(depth, dtype=np.float64).reshape(-1)
    if np.any(d <= 0.0):
        raise NonPositiveDepth("depth must be strictly positive")
    cam = np.empty((len(d), 3), dtype=np.float64)
    cam[:, 0] = d * (uv[:, 0] - view.cx) / view.fx
    cam[:, 1] = d * (uv[:, 1] - view.cy) / view.fy
    cam[:, 2] = d
    return (cam - view.translation) @ view.rotation


def unproject(view: CameraView, u: float, v: float, depth: float) -> np.ndarray:
    """Inverse projection of one pixel at the given depth."""
    return unproject_pixels(view, np.array([[u, v]]), np.array([depth]))[0]


def median_nn_spacing(positions: np.ndarray) -> float:
    """Median nearest-neighbor distance; the scale unit for matching radii."""
    pts = np.asarray(positions, dtype=np.float64)
    if len(pts) < 2:
        from .errors import TooFewPoints
        raise TooFewPoints("nearest-neighbor spacing needs >= 2 points")
    d, _ = cKDTree(pts).query(pts, k=2)
    return float(np.median(d[:, 1]))


def assign_instances(cloud: PointCloud, top_view: CameraView, masks: MaskSet) -> np.ndarray:
    """Stage-1 instance ids from top-view mask containment.

    A point whose projection lands on a pixel with region id i > 0 gets
    instance i; points behind the camera, outside the image, or over
    background get 0.  No visibility test is applied: the top view is
    assumed unoccluded, so hidden points inherit the instance of whatever
    covers their pixel.
    """
    H, W = masks.label_image.shape
    if (H, W) != (top_view.height, top_view.width):
        raise ResolutionMismatch(
            f"label image {(H, W)} vs view {(top_view.height, top_view.width)}"
        )
    uv, _, in_front = project_points(top_view, cloud.positions)
    iu = np.rint(uv[:, 0]).astype(np.int64)
    iv = np.rint(uv[:, 1]).astype(np.int64)
    ok = in_front & (iu >= 0) & (iu < W) & (iv >= 0) & (iv < H)
    inst = np.zeros(len(cloud), dtype=np.int64)
    inst[ok] = masks.label_image[iv[ok], iu[ok]]
    return inst


def backproject_view(instance_cloud: PointCloud, rendered: RenderedView,
                     masks: MaskSet, match: MatchConfig,
                     kd_tree: cKDTree | None = None) -> np.ndarray:
    """Back-project one view's mask pixels onto the instance cloud.

    Every masked pixel with a finite rendered depth is lifted to a 3D
    query point; its nearest neighbor in the instance cloud is matched
    when both the distance and the rendered-vs-point depth gap are within
    tolerance.  At most one observation survives per point: the one with
    the smallest match distance (ties to the lowest pixel index).

    Returns a structured array with OBSERVATION_DTYPE; point ids index
    ``instance_cloud``.
    """
    view = rendered.view
    H, W = masks.label_image.shape
    if (H, W) != (view.height, view.width):
        raise ResolutionMismatch(
            f"label image {(H, W)} vs view {(view.height, view.width)}"
        )
    if rendered.depth_image.shape != (H, W):
        raise ResolutionMismatch("rendered images do not match the mask resolution")

    hit = (masks.label_image > 0) & (rendered.index_image >= 0)
    rows, cols = np.nonzero(hit)
    if rows.size == 0:
        return np.empty(0, dtype=OBSERVATION_DTYPE)
    d = rendered.depth_image[rows, cols]
    queries = unproject_pixels(view, np.stack([cols, rows], axis=1).astype(np.float64), d)

    tree = kd_tree if kd_tree is not None else cKDTree(instance_cloud.positions)
    dist, nn = tree.query(queries)
    z_nn = instance_cloud.positions[nn] @ view.rotation[2] + view.translation[2]
    ok = (dist < match.match_radius) & (np.abs(z_nn - d) < match.depth_tolerance)
    if not np.any(ok):
        return np.empty(0, dtype=OBSERVATION_DTYPE)

    pid = nn[ok]
    dist = dist[ok]
    lin = rows[ok] * W + cols[ok]
    rid = masks.label_image[rows[ok], cols[ok]]

    # best match per point: smallest distance, then lowest pixel index
    order = np.lexsort((lin, dist, pid))
    pid, lin, rid = pid[order], lin[order], rid[order]
    keep = np.ones(pid.size, dtype=bool)
    keep[1:] = pid[1:] != pid[:-1]

    max_rid = int(masks.label_image.max())
    cls_of = np.zeros(max_rid + 1, dtype=np.int32)
    q_of = np.zeros(max_rid + 1, dtype=np.float64)
    for r in masks.regions:
        cls_of[r.region_id] = r.class_id
        q_of[r.region_id] = r.confidence

    out = np.empty(int(keep.sum()), dtype=OBSERVATION_DTYPE)
    out["point_id"] = pid[keep]
    out["view_id"] = view.view_id
    out["region_id"] = rid[keep]
    out["class_id"] = cls_of[rid[keep]]
    out["q"] = q_of[rid[keep]]
    out["source_pixel"] = lin[keep]
    return out
