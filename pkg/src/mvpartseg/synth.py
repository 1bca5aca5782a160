"""Procedural scenes with exact ground truth, oracle masks derived from
rendered index images, and deterministic mask corruption.

Scenes are stacks of labeled primitive surfaces (boxes, cylinders,
spheres) on a ground grid.  Parts share boundaries, so the hard cases of
real scans — touching components and self-occlusion — are present without
any external data.  Only scannable surface is sampled: faces pointing
nearly straight down are skipped, as a scanner never sees them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ClassCatalog, PointCloud, SegmentationResult
from .errors import EmptyInstance, PlacementFailure
from .io_formats import (
    resolve_mask_overlaps,
    write_cameras,
    write_catalog,
    write_gt_labels,
    write_masks,
    write_ply,
)
from .projection import MaskSet, Region, regions_from_label_image
from .renderer import RenderConfig, RenderedView, make_top_view, render, sample_part_views

DEFAULT_CATALOG = ClassCatalog((
    (1, "base"), (2, "column"), (3, "box"), (4, "drum"), (5, "ball"), (6, "cap"),
))

GRID_CELL = 3.0            # m between object grid centers
MAX_FOOTPRINT = 1.8        # m, keeps horizontal bboxes disjoint inside cells
DOWNWARD_NORMAL_Z = -0.77  # surface normals below this are never scanned
SURFACE_NOISE = 0.001      # m of isotropic jitter, scanner-like
MIN_REGION_PIXELS = 5

# view id convention: scene top view is 0; instance i uses i*1000 + k with
# k = 1..n_ring for the ring and k = n_ring + 1 for the instance top view.
VIEW_ID_STRIDE = 1000


@dataclass(frozen=True)
class PartLayout:
    kind: str                  # base | column | box | drum | ball | cap
    class_id: int
    center: tuple[float, float, float]
    dims: tuple[float, ...]    # boxes: (w, d, h); cylinders: (r, h); spheres: (r,)

    def footprint_contains(self, xy: np.ndarray) -> np.ndarray:
        cx, cy, _ = self.center
        if self.kind in ("column", "drum"):
            r = self.dims[0]
            return (xy[:, 0] - cx) ** 2 + (xy[:, 1] - cy) ** 2 <= r * r
        if self.kind == "ball":
            r = 0.5 * self.dims[0]
            return (xy[:, 0] - cx) ** 2 + (xy[:, 1] - cy) ** 2 <= r * r
        w, d = self.dims[0], self.dims[1]
        return (np.abs(xy[:, 0] - cx) <= w / 2) & (np.abs(xy[:, 1] - cy) <= d / 2)


@dataclass(frozen=True)
class ObjectLayout:
    instance_id: int
    parts: tuple[PartLayout, ...]


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    n_objects: int
    points_per_object: int
    parts_min: int = 2
    parts_max: int = 4


@dataclass(frozen=True)
class SyntheticScene:
    cloud: PointCloud
    gt: SegmentationResult
    catalog: ClassCatalog
    objects: tuple[ObjectLayout, ...]
    spec: SceneSpec = field(repr=False, default=None)


_CLASS_COLORS = np.array([
    [0.55, 0.55, 0.55],   # base
    [0.85, 0.35, 0.10],   # column
    [0.15, 0.45, 0.80],   # box
    [0.20, 0.65, 0.30],   # drum
    [0.80, 0.70, 0.15],   # ball
    [0.60, 0.25, 0.65],   # cap
])


def _sample_box(rng, n, center, dims):
    """Points on the five scannable faces of an axis-aligned box."""
    w, d, h = dims
    cx, cy, cz = center
    areas = np.array([d * h, d * h, w * h, w * h, w * d])  # +x -x +y -y +z
    counts = np.floor(n * areas / areas.sum()).astype(int)
    counts[np.argmax(areas)] += n - counts.sum()
    pts = []
    for face, cnt in enumerate(counts):
        if cnt == 0:
            continue
        a = rng.random(cnt) - 0.5
        b = rng.random(cnt) - 0.5
        if face == 0:
            p = np.stack([np.full(cnt, w / 2), a * d, b * h], axis=1)
        elif face == 1:
            p = np.stack([np.full(cnt, -w / 2), a * d, b * h], axis=1)
        elif face == 2:
            p = np.stack([a * w, np.full(cnt, d / 2), b * h], axis=1)
        elif face == 3:
            p = np.stack([a * w, np.full(cnt, -d / 2), b * h], axis=1)
        else:
            p = np.stack([a * w, b * d, np.full(cnt, h / 2)], axis=1)
        pts.append(p)
    pts = np.concatenate(pts) + np.array([cx, cy, cz])
    return pts


def _sample_cylinder(rng, n, center, dims):
    """Lateral wall plus top cap of a vertical cylinder."""
    r, h = dims
    cx, cy, cz = center
    lateral = 2 * math.pi * r * h
    top = math.pi * r * r
    n_lat = int(round(n * lateral / (lateral + top)))
    n_top = n - n_lat
    theta = rng.random(n_lat) * 2 * math.pi
    z = (rng.random(n_lat) - 0.5) * h
    wall = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    theta = rng.random(n_top) * 2 * math.pi
    rad = r * np.sqrt(rng.random(n_top))
    cap = np.stack([rad * np.cos(theta), rad * np.sin(theta), np.full(n_top, h / 2)], axis=1)
    return np.concatenate([wall, cap]) + np.array([cx, cy, cz])


def _sample_sphere(rng, n, center, dims):
    """Uniform sphere surface with the downward polar cap excluded."""
    r = dims[0]
    zu = rng.uniform(DOWNWARD_NORMAL_Z, 1.0, n)
    theta = rng.random(n) * 2 * math.pi
    s = np.sqrt(1.0 - zu * zu)
    return r * np.stack([s * np.cos(theta), s * np.sin(theta), zu], axis=1) + np.array(center)


_SAMPLERS = {"base": _sample_box, "box": _sample_box, "cap": _sample_box,
             "column": _sample_cylinder, "drum": _sample_cylinder,
             "ball": _sample_sphere}


def _part_area(kind, dims):
    if kind in ("base", "box", "cap"):
        w, d, h = dims
        return 2 * d * h + 2 * w * h + w * d
    if kind in ("column", "drum"):
        r, h = dims
        return 2 * math.pi * r * h + math.pi * r * r
    r = dims[0]
    return 4 * math.pi * r * r * (1.0 - DOWNWARD_NORMAL_Z) / 2.0


def _build_object(rng, instance_id, cell_center, n_parts) -> ObjectLayout:
    """Stack n_parts primitives with non-increasing footprints."""
    cx, cy = cell_center
    parts = []
    w = rng.uniform(0.9, min(1.6, MAX_FOOTPRINT))
    d = rng.uniform(0.9, min(1.6, MAX_FOOTPRINT))
    h = rng.uniform(0.15, 0.4)
    z = 0.0
    parts.append(PartLayout("base", 1, (cx, cy, z + h / 2), (w, d, h)))
    z += h
    footprint = min(w, d)
    middle_kinds = ["column", "box", "drum"]
    top_kinds = ["ball", "cap"]
    for k in range(1, n_parts):
        last = k == n_parts - 1
        kind = rng.choice(top_kinds if (last and rng.random() < 0.5 and k >= 2) else middle_kinds)
        shrink = rng.uniform(0.5, 0.8)
        size = footprint * shrink
        if kind == "column":
            r, ph = size / 2, rng.uniform(0.5, 1.1)
            parts.append(PartLayout(kind, 2, (cx, cy, z + ph / 2), (r, ph)))
            footprint = 2 * r
        elif kind == "box":
            ph = rng.uniform(0.3, 0.8)
            parts.append(PartLayout(kind, 3, (cx, cy, z + ph / 2), (size, size, ph)))
            footprint = size
        elif kind == "drum":
            r, ph = size / 2, rng.uniform(0.2, 0.45)
            parts.append(PartLayout(kind, 4, (cx, cy, z + ph / 2), (r, ph)))
            footprint = 2 * r
        elif kind == "ball":
            r = size / 2
            parts.append(PartLayout(kind, 5, (cx, cy, z + r), (r,)))
            footprint = 2 * r
        else:
            ph = rng.uniform(0.08, 0.18)
            parts.append(PartLayout("cap", 6, (cx, cy, z + ph / 2), (size, size, ph)))
            footprint = size
        z += parts[-1].dims[-1] if kind != "ball" else 2 * parts[-1].dims[0]
    return ObjectLayout(instance_id, tuple(parts))


def _sample_part_visible(rng, obj: ObjectLayout, k: int, count: int) -> np.ndarray:
    """Exactly ``count`` surface points of part k, excluding the top-face
    patch hidden under the part stacked above it."""
    part = obj.parts[k]
    upper = obj.parts[k + 1] if k + 1 < len(obj.parts) else None
    if part.kind == "ball":
        top_z = part.center[2] + part.dims[0]
    else:
        top_z = part.center[2] + part.dims[-1] / 2
    chunks, got = [], 0
    for _ in range(100):
        pts = _SAMPLERS[part.kind](rng, count, part.center, part.dims)
        if upper is not None:
            hidden = (pts[:, 2] > top_z - 1e-6) & upper.footprint_contains(pts[:, :2])
            pts = pts[~hidden]
        chunks.append(pts)
        got += len(pts)
        if got >= count:
            break
    else:
        raise PlacementFailure(f"part {k} of instance {obj.instance_id} is fully hidden")
    return np.concatenate(chunks)[:count]


def _horizontal_bbox(obj: ObjectLayout):
    lo = np.array([math.inf, math.inf])
    hi = -lo
    for p in obj.parts:
        cx, cy, _ = p.center
        if p.kind in ("column", "drum", "ball"):
            r = p.dims[0]
            plo, phi = np.array([cx - r, cy - r]), np.array([cx + r, cy + r])
        else:
            w, d = p.dims[0], p.dims[1]
            plo, phi = np.array([cx - w / 2, cy - d / 2]), np.array([cx + w / 2, cy + d / 2])
        lo, hi = np.minimum(lo, plo), np.maximum(hi, phi)
    return lo, hi


def generate_scene(seed: int, n_objects: int = 3, points_per_object: int = 20000,
                   parts_min: int = 2, parts_max: int = 4,
                   catalog: ClassCatalog = DEFAULT_CATALOG) -> SyntheticScene:
    """Deterministic multi-object scene with full per-point ground truth.

    Objects occupy a jittered ground grid with pairwise-disjoint
    horizontal bounding boxes.  Each object is a stack of parts_min..
    parts_max labeled primitives whose surfaces touch at the interfaces;
    interface patches hidden between two parts are not sampled.
    """
    if n_objects < 1:
        raise ValueError("n_objects must be >= 1")
    if not (1 <= parts_min <= parts_max):
        raise ValueError("need 1 <= parts_min <= parts_max")
    rng = np.random.default_rng(seed)
    side = math.ceil(math.sqrt(n_objects))

    objects = []
    for i in range(n_objects):
        gx, gy = i % side, i // side
        base = np.array([gx * GRID_CELL, gy * GRID_CELL])
        for attempt in range(100):
            jitter = rng.uniform(-0.4, 0.4, 2)
            n_parts = int(rng.integers(parts_min, parts_max + 1))
            obj = _build_object(rng, i + 1, tuple(base + jitter), n_parts)
            lo, hi = _horizontal_bbox(obj)
            if np.all(hi - lo <= GRID_CELL - 0.2):
                break
        else:
            raise PlacementFailure(f"object {i + 1} did not fit its grid cell")
        objects.append(obj)

    # allocate the point budget proportionally to surface area so sampling
    # density is uniform across the scene (total is exactly n * per-object)
    part_areas = [np.array([_part_area(p.kind, p.dims) for p in obj.parts])
                  for obj in objects]
    total_area = sum(float(a.sum()) for a in part_areas)
    total_points = n_objects * points_per_object
    counts = [np.maximum(np.floor(total_points * a / total_area).astype(int), 1)
              for a in part_areas]
    shortfall = total_points - sum(int(c.sum()) for c in counts)
    counts[0][np.argmax(part_areas[0])] += shortfall

    positions, instances, classes = [], [], []
    for obj, obj_counts in zip(objects, counts):
        for k, (part, cnt) in enumerate(zip(obj.parts, obj_counts)):
            pts = _sample_part_visible(rng, obj, k, int(cnt))
            positions.append(pts)
            instances.append(np.full(len(pts), obj.instance_id, dtype=np.int64))
            classes.append(np.full(len(pts), part.class_id, dtype=np.int64))

    positions = np.concatenate(positions)
    positions += rng.normal(0.0, SURFACE_NOISE, positions.shape)
    instances = np.concatenate(instances)
    classes = np.concatenate(classes)
    colors = _CLASS_COLORS[classes - 1]

    return SyntheticScene(
        cloud=PointCloud(positions, colors),
        gt=SegmentationResult(instances, classes, np.ones(len(positions))),
        catalog=catalog,
        objects=tuple(objects),
        spec=SceneSpec(seed, n_objects, points_per_object, parts_min, parts_max),
    )


def oracle_masks(scene: SyntheticScene, rendered: RenderedView, level: str = "part",
                 point_ids: np.ndarray | None = None,
                 min_pixels: int = MIN_REGION_PIXELS) -> MaskSet:
    """Ground-truth mask set for a rendered view.

    level="instance": one region per visible object, region id = instance
    id, class = the object's dominant part class.  level="part": one
    region per visible (instance, class) pair — under per-instance
    rendering that is one region per part class, with region id equal to
    the catalog position.  ``point_ids`` maps the rendered cloud's local
    indices to scene point ids when a sub-cloud was rendered.  Regions
    smaller than min_pixels are dropped to background.  All regions carry
    detector confidence 1.0.
    """
    if level not in ("instance", "part"):
        raise ValueError(f"unknown oracle level {level!r}")
    index = rendered.index_image
    occupied = index >= 0
    local = index[occupied]
    global_ids = local if point_ids is None else np.asarray(point_ids)[local]

    catalog = scene.catalog
    if level == "instance":
        keys = scene.gt.instance_id[global_ids]
    else:
        cls = scene.gt.class_id[global_ids]
        lut = np.zeros(int(catalog.class_ids.max()) + 1, dtype=np.int64)
        lut[catalog.class_ids] = np.arange(1, len(catalog) + 1)
        keys = lut[cls]

    label = np.zeros(index.shape, dtype=np.int32)
    label[occupied] = keys

    class_of, confidence_of = {}, {}
    for rid in np.unique(label):
        rid = int(rid)
        if rid == 0:
            continue
        count = int(np.sum(label == rid))
        if count < min_pixels:
            label[label == rid] = 0
            continue
        if level == "instance":
            inst_classes = scene.gt.class_id[scene.gt.instance_id == rid]
            dominant = int(np.bincount(inst_classes).argmax())
            class_of[rid] = (dominant, catalog.name_of(dominant))
        else:
            cid = int(catalog.class_ids[rid - 1])
            class_of[rid] = (cid, catalog.name_of(cid))
        confidence_of[rid] = 1.0

    regions = regions_from_label_image(label, class_of, confidence_of)
    return MaskSet(rendered.view.view_id, label, regions)


@dataclass(frozen=True)
class CorruptionSpec:
    """Deterministic mask degradation: occluding blobs, label flips, and
    boundary dilation."""

    occluder_views: float = 0.0    # fraction of views hit by a synthetic occluder
    label_flip_rate: float = 0.0   # per-region chance of a wrong class
    dilation_px: int = 0           # boundary dilation radius
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.occluder_views <= 1.0 and 0.0 <= self.label_flip_rate <= 1.0):
            raise ValueError("corruption rates must lie in [0, 1]")
        if self.dilation_px < 0:
            raise ValueError("dilation_px must be >= 0")

    @property
    def is_identity(self) -> bool:
        return self.occluder_views == 0.0 and self.label_flip_rate == 0.0 \
            and self.dilation_px == 0


# wrong detections come with eroded confidence, mimicking a detector that
# is less sure when it is wrong
FLIP_Q_RANGE = (0.45, 0.8)
BLOB_Q_RANGE = (0.5, 0.85)
BLOB_RADIUS_RANGE = (0.10, 0.22)   # fraction of min(H, W)


def corrupt_masks(masks: MaskSet, spec: CorruptionSpec, catalog: ClassCatalog) -> MaskSet:
    """Apply the corruption spec to one view's masks.

    Deterministic in (spec.seed, view_id).  Order: label flips, then the
    occluding blob overwrite, then boundary dilation with contested
    pixels resolved by confidence (ties to the smaller region).  The
    output satisfies all mask set invariants; regions fully erased by the
    blob are dropped.
    """
    if spec.is_identity:
        return masks
    rng = np.random.default_rng([spec.seed, masks.view_id])
    label = np.array(masks.label_image)
    H, W = label.shape

    info = {r.region_id: {"class_id": r.class_id, "class_name": r.class_name,
                          "confidence": r.confidence} for r in masks.regions}
    ids = catalog.class_ids

    for r in sorted(masks.regions, key=lambda r: r.region_id):
        if rng.random() < spec.label_flip_rate:
            others = ids[ids != r.class_id]
            new_cls = int(rng.choice(others))
            info[r.region_id]["class_id"] = new_cls
            info[r.region_id]["class_name"] = catalog.name_of(new_cls)
            info[r.region_id]["confidence"] = r.confidence * rng.uniform(*FLIP_Q_RANGE)

    if rng.random() < spec.occluder_views:
        cy = rng.uniform(0.2, 0.8) * H
        cx = rng.uniform(0.2, 0.8) * W
        base_r = rng.uniform(*BLOB_RADIUS_RANGE) * min(H, W)
        ry = base_r * rng.uniform(0.7, 1.3)
        rx = base_r * rng.uniform(0.7, 1.3)
        blob_cls = int(rng.choice(ids))
        blob_q = rng.uniform(*BLOB_Q_RANGE)
        yy, xx = np.mgrid[0:H, 0:W]
        blob = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        blob_id = max(info) + 1 if info else 1
        label[blob] = blob_id
        info[blob_id] = {"class_id": blob_cls, "class_name": catalog.name_of(blob_cls),
                         "confidence": blob_q}

    present = set(int(v) for v in np.unique(label) if v != 0)
    info = {rid: rec for rid, rec in info.items() if rid in present}

    if spec.dilation_px > 0 and info:
        from scipy import ndimage
        r = spec.dilation_px
        yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
        struct = xx * xx + yy * yy <= r * r
        layers = []
        for rid in sorted(info):
            footprint = ndimage.binary_dilation(label == rid, structure=struct)
            count = int(np.sum(label == rid))
            layers.append((footprint, Region(
                rid, info[rid]["class_id"], info[rid]["class_name"],
                info[rid]["confidence"], (0, 0, W, H), count)))
        label = resolve_mask_overlaps(layers, (H, W))
        present = set(int(v) for v in np.unique(label) if v != 0)
        info = {rid: rec for rid, rec in info.items() if rid in present}

    regions = regions_from_label_image(
        label,
        {rid: (rec["class_id"], rec["class_name"]) for rid, rec in info.items()},
        {rid: rec["confidence"] for rid, rec in info.items()},
    )
    return MaskSet(masks.view_id, label, regions)


def part_view_ids(instance_id: int, n_ring: int) -> list[int]:
    base = instance_id * VIEW_ID_STRIDE
    return [base + k for k in range(1, n_ring + 2)]


def write_scene_package(out_dir, scene: SyntheticScene, n_ring: int = 10,
                        render_config: RenderConfig | None = None,
                        splat_radius: float | None = None,
                        corruption: CorruptionSpec | None = None) -> Path:
    """Materialize a scene as a package: cloud, catalog, cameras, ground
    truth, and oracle masks for the top view and every instance's part
    views.  Corruption, when given, applies to part-view masks only so
    the instance stage stays stable.
    """
    from .projection import median_nn_spacing  # local to avoid cycle at import time

    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    if render_config is None:
        render_config = RenderConfig()
    if len(scene.cloud) == 0:
        raise EmptyInstance("cannot package an empty scene")
    if splat_radius is None:
        splat_radius = 1.5 * median_nn_spacing(scene.cloud.positions)

    write_ply(out / "cloud.ply", scene.cloud)
    write_catalog(out / "catalog.json", scene.catalog)
    write_gt_labels(out / "gt_labels.json", scene.gt)

    views = [make_top_view(scene.cloud, render_config, view_id=0)]
    top_rendered = render(scene.cloud, views[0], splat_radius, render_config)
    top_masks = oracle_masks(scene, top_rendered, level="instance")
    write_masks(out / "masks" / "view_0.png", out / "masks" / "view_0.json", top_masks)

    for inst in np.unique(scene.gt.instance_id):
        inst = int(inst)
        idx = np.nonzero(scene.gt.instance_id == inst)[0]
        sub = scene.cloud.subset(idx)
        radius = 1.5 * median_nn_spacing(sub.positions)
        part_views = sample_part_views(sub, n_ring, render_config,
                                       base_view_id=inst * VIEW_ID_STRIDE)
        for view in part_views:
            rendered = render(sub, view, radius, render_config)
            masks = oracle_masks(scene, rendered, level="part", point_ids=idx)
            if corruption is not None:
                masks = corrupt_masks(masks, corruption, scene.catalog)
            write_masks(out / "masks" / f"view_{view.view_id}.png",
                        out / "masks" / f"view_{view.view_id}.json", masks)
            views.append(view)

    write_cameras(out / "cameras.json", views)
    return out
