"""Point cloud rendering into color / depth / point-index images.

Points are splatted as filled discs into a z-buffer; the index image keeps
the front-most point id per pixel, which later stages use both as the
depth source for back-projection and as the ground-truth oracle for masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import CameraView, PointCloud
from .errors import EmptyInstance, NonPositiveInput, TooFewPoints

DEFAULT_FOV_DEG = 60.0
RING_ELEVATION_DEG = 30.0
SPHERE_FIT_MARGIN = 1.2
TOP_FIT_MARGIN = 1.1


@dataclass(frozen=True)
class RenderConfig:
    """Rendering knobs shared by all views of a run."""

    point_px: int = 3             # desired splat size in pixels (1..16)
    image_size: int = 1024        # square image resolution (64..8192)
    near_clip: float = 1e-4       # camera-space z below which points are culled
    background_depth: float = math.inf
    background_index: int = -1

    def __post_init__(self):
        if not (1 <= self.point_px <= 16):
            raise ValueError(f"point_px must be in [1, 16], got {self.point_px}")
        if not (64 <= self.image_size <= 8192):
            raise ValueError(f"image_size must be in [64, 8192], got {self.image_size}")
        if self.near_clip <= 0:
            raise ValueError("near_clip must be positive")


@dataclass(frozen=True)
class RenderedView:
    """Output of one render: mutually consistent color/depth/index images."""

    view: CameraView
    color_image: np.ndarray   # (H, W, 3) float64 in [0, 1]
    depth_image: np.ndarray   # (H, W) float64, +inf where empty
    index_image: np.ndarray   # (H, W) int64, -1 where empty

    def __post_init__(self):
        occupied = self.index_image >= 0
        if not np.array_equal(occupied, np.isfinite(self.depth_image)):
            raise ValueError("depth finite exactly where index >= 0")


def adaptive_radius(point_px: float, image_size: float, extent: float,
                    density: float, min_radius: float = 1e-6) -> float:
    """Scale-adaptive world-space splat radius.

    radius = point_px * extent / (image_size * density), floored at
    min_radius.  ``extent`` is the maximum bounding-box edge of the cloud
    in scene units and ``density`` its point count per cubic centimeter.
    The formula treats its inputs as dimensionless; tune point_px and
    image_size jointly if the result is out of range for your scene scale.
    """
    if point_px <= 0 or image_size <= 0 or extent <= 0 or density <= 0:
        raise NonPositiveInput(
            f"all inputs must be > 0, got ({point_px}, {image_size}, {extent}, {density})"
        )
    return max(point_px * extent / (image_size * density), min_radius)


def estimate_density(cloud: PointCloud) -> float:
    """Points per cubic centimeter of the cloud's bounding box.

    Each box extent is floored at 1 cm so planar or degenerate clouds do
    not divide by zero.  Positions are assumed to be in meters.
    """
    if len(cloud) < 2:
        raise TooFewPoints(f"density needs >= 2 points, got {len(cloud)}")
    extents_cm = np.maximum(np.ptp(cloud.positions, axis=0) * 100.0, 1.0)
    return len(cloud) / float(np.prod(extents_cm))


def render(cloud: PointCloud, view: CameraView, radius: float,
           config: RenderConfig | None = None) -> RenderedView:
    """Z-buffered disc splatting of ``cloud`` through ``view``.

    Every point with camera-space z above the near clip becomes a filled
    disc of pixel radius max(1, round(radius * fx / z)).  Per pixel the
    strictly smallest z wins; exact z ties go to the lower point id, so
    output is deterministic regardless of evaluation order.
    """
    if config is None:
        config = RenderConfig()
    if radius <= 0:
        raise NonPositiveInput(f"radius must be > 0, got {radius}")
    H, W = view.height, view.width
    depth = np.full((H, W), config.background_depth, dtype=np.float64)
    index = np.full((H, W), config.background_index, dtype=np.int64)
    color = np.zeros((H, W, 3), dtype=np.float64)
    if len(cloud) == 0:
        return RenderedView(view, color, depth, index)

    cam = cloud.positions @ view.rotation.T + view.translation
    z_all = cam[:, 2]
    vis = z_all > config.near_clip
    ids = np.nonzero(vis)[0]
    if ids.size == 0:
        return RenderedView(view, color, depth, index)
    z = z_all[ids]
    u = view.fx * cam[ids, 0] / z + view.cx
    v = view.fy * cam[ids, 1] / z + view.cy
    pr = np.maximum(1, np.rint(radius * view.fx / z)).astype(np.int64)
    pr = np.minimum(pr, int(math.hypot(H, W)) + 1)

    # cheap reject: disc bounding box cannot touch the image
    keep = (u > -pr - 1.0) & (u < W + pr) & (v > -pr - 1.0) & (v < H + pr)
    ids, z, u, v, pr = ids[keep], z[keep], u[keep], v[keep], pr[keep]
    if ids.size == 0:
        return RenderedView(view, color, depth, index)

    iu = np.rint(u).astype(np.int64)
    iv = np.rint(v).astype(np.int64)

    lin_parts, z_parts, id_parts = [], [], []
    for r in np.unique(pr):
        sel = pr == r
        off = np.arange(-r, r + 1)
        ox, oy = np.meshgrid(off, off, indexing="xy")
        ox, oy = ox.ravel(), oy.ravel()
        # offsets farther than r + half-pixel diagonal can never be inside
        near = ox * ox + oy * oy <= (r + 0.71) ** 2
        ox, oy = ox[near], oy[near]
        px = iu[sel][:, None] + ox[None, :]
        py = iv[sel][:, None] + oy[None, :]
        du = px - u[sel][:, None]
        dv = py - v[sel][:, None]
        inside = (du * du + dv * dv <= float(r) ** 2) \
            & (px >= 0) & (px < W) & (py >= 0) & (py < H)
        rows = np.broadcast_to(np.arange(sel.sum())[:, None], inside.shape)[inside]
        lin_parts.append(py[inside] * W + px[inside])
        z_parts.append(z[sel][rows])
        id_parts.append(ids[sel][rows])

    lin = np.concatenate(lin_parts)
    if lin.size == 0:
        return RenderedView(view, color, depth, index)
    zc = np.concatenate(z_parts)
    pid = np.concatenate(id_parts)

    # front-most z per pixel, ties to the lower point id
    order = np.lexsort((pid, zc, lin))
    lin, zc, pid = lin[order], zc[order], pid[order]
    first = np.ones(lin.size, dtype=bool)
    first[1:] = lin[1:] != lin[:-1]
    win_lin, win_z, win_pid = lin[first], zc[first], pid[first]

    depth.ravel()[win_lin] = win_z
    index.ravel()[win_lin] = win_pid
    if cloud.colors is not None:
        color.reshape(-1, 3)[win_lin] = cloud.colors[win_pid]
    else:
        color.reshape(-1, 3)[win_lin] = 1.0
    return RenderedView(view, color, depth, index)


def _look_at(eye: np.ndarray, target: np.ndarray, up_hint: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World->camera rotation and translation for a camera at ``eye``
    looking at ``target``; camera x right, y down, z forward."""
    forward = target - eye
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise ValueError("eye and target coincide")
    z_cam = forward / norm
    x_cam = np.cross(z_cam, up_hint)
    nx = np.linalg.norm(x_cam)
    if nx < 1e-12:
        raise ValueError("up_hint parallel to the view direction")
    x_cam /= nx
    y_cam = np.cross(z_cam, x_cam)
    R = np.stack([x_cam, y_cam, z_cam])
    t = -R @ eye
    return R, t


def _fov_focal(image_size: int, fov_deg: float) -> float:
    return image_size / (2.0 * math.tan(math.radians(fov_deg) / 2.0))


def sample_part_views(instance_cloud: PointCloud, n_ring: int,
                      config: RenderConfig | None = None,
                      elevation_deg: float = RING_ELEVATION_DEG,
                      fov_deg: float = DEFAULT_FOV_DEG,
                      margin: float = SPHERE_FIT_MARGIN,
                      base_view_id: int = 0) -> list[CameraView]:
    """Ring of n_ring cameras plus one top-down camera around an instance.

    Ring cameras sit at azimuths 2*pi*k/n_ring, elevated above the
    horizontal plane through the centroid, all looking at the centroid at
    a distance where the instance bounding sphere fits the frustum with
    the given margin.  View ids are base_view_id+1 .. base_view_id+n_ring
    for the ring and base_view_id+n_ring+1 for the top-down camera.
    """
    if len(instance_cloud) == 0:
        raise EmptyInstance("cannot sample views around an empty cloud")
    if n_ring < 1:
        raise ValueError("n_ring must be >= 1")
    if config is None:
        config = RenderConfig()
    center = instance_cloud.positions.mean(axis=0)
    bound = float(np.linalg.norm(instance_cloud.positions - center, axis=1).max())
    bound = max(bound, 1e-6)
    fov = math.radians(fov_deg)
    dist = margin * bound / math.sin(fov / 2.0)
    f = _fov_focal(config.image_size, fov_deg)
    half = config.image_size / 2.0

    views = []
    el = math.radians(elevation_deg)
    for k in range(n_ring):
        az = 2.0 * math.pi * k / n_ring
        eye = center + dist * np.array(
            [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
        )
        R, t = _look_at(eye, center, np.array([0.0, 0.0, 1.0]))
        views.append(CameraView(base_view_id + 1 + k, config.image_size,
                                config.image_size, f, f, half, half, R, t))
    top_eye = center + dist * np.array([0.0, 0.0, 1.0])
    R, t = _look_at(top_eye, center, np.array([0.0, 1.0, 0.0]))
    views.append(CameraView(base_view_id + n_ring + 1, config.image_size,
                            config.image_size, f, f, half, half, R, t))
    return views


def make_top_view(scene_cloud: PointCloud, config: RenderConfig | None = None,
                  margin: float = TOP_FIT_MARGIN,
                  fov_deg: float = DEFAULT_FOV_DEG,
                  view_id: int = 0) -> CameraView:
    """Camera straight above the scene centroid looking down -z.

    The height is the smallest that keeps every point's projection inside
    the image once horizontal offsets are scaled by ``margin``.
    """
    if len(scene_cloud) == 0:
        raise EmptyInstance("cannot place a top view over an empty cloud")
    if config is None:
        config = RenderConfig()
    pts = scene_cloud.positions
    center = pts.mean(axis=0)
    f = _fov_focal(config.image_size, fov_deg)
    half = config.image_size / 2.0

    # fx * margin * |dx| / (h - z) <= half  =>  h >= z + fx * margin * |dx| / half
    dx = np.abs(pts[:, 0] - center[0])
    dy = np.abs(pts[:, 1] - center[1])
    need = pts[:, 2] + f * margin * np.maximum(dx, dy) / half
    height = float(max(need.max(), pts[:, 2].max() + 1.0))

    eye = np.array([center[0], center[1], height])
    R, t = _look_at(eye, eye + np.array([0.0, 0.0, -1.0]), np.array([0.0, 1.0, 0.0]))
    return CameraView(view_id, config.image_size, config.image_size,
                      f, f, half, half, R, t)
