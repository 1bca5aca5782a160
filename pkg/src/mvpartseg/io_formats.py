"""File formats: PLY point clouds, camera JSON, mask PNG+JSON pairs,
class catalogs, and ground-truth labels.

All readers are fail-fast: malformed input raises instead of being
repaired.  Binary writes round-trip exactly; JSON floats use Python's
shortest repr, which preserves every double bit-for-bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import CameraView, ClassCatalog, PointCloud, SegmentationResult
from .errors import (
    MalformedHeader,
    PixelsWithoutRegion,
    RegionWithoutPixels,
    SchemaError,
    UnknownClass,
    UnsupportedProperty,
)
from .projection import MaskSet, Region

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _parse_ply_header(fh) -> tuple[str, list]:
    """Returns (fmt, elements) where elements is a list of
    (name, count, [(numpy_type, prop_name), ...])."""
    magic = fh.readline()
    if magic.strip() != b"ply":
        raise MalformedHeader("missing 'ply' magic")
    fmt = None
    elements: list = []
    while True:
        raw = fh.readline()
        if not raw:
            raise MalformedHeader("header ended before end_header")
        line = raw.decode("ascii", errors="replace").strip()
        if not line or line.startswith("comment") or line.startswith("obj_info"):
            continue
        if line == "end_header":
            break
        parts = line.split()
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] not in (
                "ascii", "binary_little_endian", "binary_big_endian"
            ):
                raise MalformedHeader(f"unknown format line {line!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3:
                raise MalformedHeader(f"bad element line {line!r}")
            try:
                count = int(parts[2])
            except ValueError:
                raise MalformedHeader(f"bad element count in {line!r}") from None
            elements.append([parts[1], count, []])
        elif parts[0] == "property":
            if not elements:
                raise MalformedHeader("property before any element")
            if parts[1] == "list":
                elements[-1][2].append(("list", parts[-1], parts[2:-1]))
            else:
                if len(parts) != 3:
                    raise MalformedHeader(f"bad property line {line!r}")
                if parts[1] not in _PLY_TYPES:
                    raise UnsupportedProperty(f"property type {parts[1]!r} ({parts[2]})")
                elements[-1][2].append((parts[1], parts[2]))
        else:
            raise MalformedHeader(f"unexpected header line {line!r}")
    if fmt is None:
        raise MalformedHeader("missing format line")
    return fmt, elements


def _element_dtype(props, endian: str) -> np.dtype:
    fields = []
    for prop in props:
        if prop[0] == "list":
            raise UnsupportedProperty(f"list property {prop[1]!r} in fixed element")
        ply_type, name = prop
        fields.append((name, endian + _PLY_TYPES[ply_type]))
    return np.dtype(fields)


def read_ply(path) -> tuple[PointCloud, SegmentationResult | None]:
    """Load a PLY point cloud; label properties come back as a
    SegmentationResult when present.

    Supports ascii and both binary endians.  Elements after the vertex
    element (faces etc.) are ignored; elements before it are skipped when
    fixed-size.  Vertex list properties are rejected.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        fmt, elements = _parse_ply_header(fh)
        names = [e[0] for e in elements]
        if "vertex" not in names:
            raise MalformedHeader("no vertex element")
        vertex_pos = names.index("vertex")
        endian = {"binary_little_endian": "<", "binary_big_endian": ">"}.get(fmt, "<")

        if fmt == "ascii":
            rows = []
            n_before = sum(e[1] for e in elements[:vertex_pos])
            for _ in range(n_before):
                fh.readline()
            count = elements[vertex_pos][1]
            dtype = _element_dtype(elements[vertex_pos][2], "<")
            for i in range(count):
                line = fh.readline()
                if not line:
                    raise MalformedHeader(f"vertex data ends early at row {i}")
                toks = line.split()
                if len(toks) != len(dtype.names):
                    raise MalformedHeader(f"vertex row {i} has {len(toks)} values, expected {len(dtype.names)}")
                rows.append(tuple(toks))
            data = np.array(rows, dtype=dtype) if rows else np.empty(0, dtype=dtype)
        else:
            for elem in elements[:vertex_pos]:
                skip_dtype = _element_dtype(elem[2], endian)
                fh.seek(elem[1] * skip_dtype.itemsize, 1)
            count = elements[vertex_pos][1]
            dtype = _element_dtype(elements[vertex_pos][2], endian)
            buf = fh.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise MalformedHeader(
                    f"vertex data truncated: {len(buf)} bytes for {count} vertices"
                )
            data = np.frombuffer(buf, dtype=dtype)

    for axis in ("x", "y", "z"):
        if axis not in data.dtype.names:
            raise MalformedHeader(f"vertex element lacks property {axis!r}")
    positions = np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64)

    colors = None
    if all(c in data.dtype.names for c in ("red", "green", "blue")):
        rgb = np.stack([data["red"], data["green"], data["blue"]], axis=1)
        colors = rgb.astype(np.float64)
        if rgb.dtype.kind in "ui":
            colors /= 255.0
    cloud = PointCloud(positions, colors)

    result = None
    if "instance_id" in data.dtype.names and "class_id" in data.dtype.names:
        cls = data["class_id"].astype(np.int64)
        if "confidence" in data.dtype.names:
            conf = data["confidence"].astype(np.float64)
        else:
            conf = np.where(cls > 0, 1.0, 0.0)
        result = SegmentationResult(data["instance_id"].astype(np.int64), cls, conf)
    return cloud, result


def write_ply(path, cloud: PointCloud, result: SegmentationResult | None = None,
              binary: bool = True) -> None:
    """Write a point cloud (and optional labels) as PLY.

    Positions and confidences are stored as doubles so binary round trips
    are bit-exact; colors are quantized to 8-bit RGB.
    """
    path = Path(path)
    if result is not None and len(result) != len(cloud):
        from .errors import SizeMismatch
        raise SizeMismatch("labels must cover every point")

    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    props = ["property double x", "property double y", "property double z"]
    if cloud.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        props += [f"property uchar {c}" for c in ("red", "green", "blue")]
    if result is not None:
        fields += [("instance_id", "<i4"), ("class_id", "<i4"), ("confidence", "<f8")]
        props += ["property int instance_id", "property int class_id",
                  "property double confidence"]

    data = np.empty(len(cloud), dtype=np.dtype(fields))
    data["x"], data["y"], data["z"] = cloud.positions.T
    if cloud.colors is not None:
        rgb = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(np.uint8)
        data["red"], data["green"], data["blue"] = rgb.T
    if result is not None:
        data["instance_id"] = result.instance_id.astype(np.int32)
        data["class_id"] = result.class_id.astype(np.int32)
        data["confidence"] = result.confidence

    header = ["ply",
              "format binary_little_endian 1.0" if binary else "format ascii 1.0",
              f"element vertex {len(cloud)}", *props, "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            data.tofile(fh)
        else:
            for row in data:
                fh.write((" ".join(repr(v) if isinstance(v, float) else str(v)
                                   for v in row.tolist()) + "\n").encode("ascii"))


# --- cameras --------------------------------------------------------------

def write_cameras(path, views: list[CameraView]) -> None:
    doc = {"views": [
        {
            "view_id": v.view_id, "width": v.width, "height": v.height,
            "fx": v.fx, "fy": v.fy, "cx": v.cx, "cy": v.cy,
            "R": [float(x) for x in v.rotation.ravel()],
            "t": [float(x) for x in v.translation],
        }
        for v in views
    ]}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_cameras(path) -> list[CameraView]:
    """Load camera views; rotations are validated, not repaired."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"cameras file is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("views"), list):
        raise SchemaError("cameras file must be an object with a 'views' list")
    views = []
    for i, rec in enumerate(doc["views"]):
        try:
            R = np.array(rec["R"], dtype=np.float64).reshape(3, 3)
            t = np.array(rec["t"], dtype=np.float64)
            view = CameraView(int(rec["view_id"]), int(rec["width"]), int(rec["height"]),
                              float(rec["fx"]), float(rec["fy"]),
                              float(rec["cx"]), float(rec["cy"]), R, t)
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"views[{i}]: missing or mistyped field ({exc})") from None
        except ValueError as exc:
            raise SchemaError(f"views[{i}]: {exc}") from None
        views.append(view)
    return views


# --- masks ----------------------------------------------------------------

def write_masks(png_path, json_path, masks: MaskSet) -> None:
    """Label image as 16-bit single-channel PNG plus a region JSON sidecar."""
    label = masks.label_image
    if label.max(initial=0) > 0xFFFF or label.min(initial=0) < 0:
        raise ValueError("region ids must fit in 16 bits")
    Image.fromarray(label.astype(np.uint16)).save(png_path)
    doc = {"view_id": masks.view_id, "regions": [
        {
            "region_id": r.region_id, "class_id": r.class_id,
            "class_name": r.class_name, "confidence": r.confidence,
            "bbox": list(r.bbox),
        }
        for r in masks.regions
    ]}
    with open(json_path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_masks(png_path, json_path, catalog: ClassCatalog) -> MaskSet:
    """Load a mask PNG/JSON pair, resolving classes by name in the catalog.

    Region class ids in the JSON are the producer's own indexing and are
    ignored; the pipeline id comes from the catalog lookup.
    """
    img = Image.open(png_path)
    if img.mode not in ("I;16", "I;16B", "I"):
        raise SchemaError(f"label image must be single-channel 16-bit, got mode {img.mode!r}")
    label = np.asarray(img).astype(np.int64)
    if label.max(initial=0) > 0xFFFF:
        raise SchemaError("label image values exceed 16 bits")

    with open(json_path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"mask JSON invalid: {exc}") from None
    if not isinstance(doc, dict) or "view_id" not in doc or not isinstance(doc.get("regions"), list):
        raise SchemaError("mask JSON must carry view_id and a regions list")

    present = set(int(v) for v in np.unique(label) if v != 0)
    regions = []
    declared = set()
    for rec in doc["regions"]:
        try:
            rid = int(rec["region_id"])
            name = rec["class_name"]
            conf = float(rec["confidence"])
            bbox = tuple(int(b) for b in rec["bbox"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad region record: {exc}") from None
        try:
            cid = catalog.id_for_name(name)
        except KeyError:
            raise UnknownClass(f"class {name!r} not in catalog") from None
        if rid not in present:
            raise RegionWithoutPixels(f"region {rid} has no pixels in the label image")
        declared.add(rid)
        count = int(np.sum(label == rid))
        regions.append(Region(rid, cid, name, conf, bbox, count))
    if present - declared:
        raise PixelsWithoutRegion(
            f"label image contains undeclared regions {sorted(present - declared)}"
        )
    try:
        return MaskSet(int(doc["view_id"]), label.astype(np.int32), tuple(regions))
    except ValueError as exc:
        raise SchemaError(str(exc)) from None


def resolve_mask_overlaps(layers: list[tuple[np.ndarray, Region]],
                          shape: tuple[int, int]) -> np.ndarray:
    """Flatten possibly-overlapping region footprints into one label image.

    A contested pixel goes to the higher-confidence region; confidence
    ties go to the smaller region, then the lower region id.
    """
    order = sorted(range(len(layers)),
                   key=lambda i: (-layers[i][1].confidence,
                                  int(layers[i][0].sum()),
                                  layers[i][1].region_id))
    label = np.zeros(shape, dtype=np.int32)
    for i in order:
        footprint, region = layers[i]
        label[footprint & (label == 0)] = region.region_id
    return label


# --- catalog and ground truth ----------------------------------------------

def write_catalog(path, catalog: ClassCatalog) -> None:
    doc = {"classes": [{"class_id": c, "name": n} for c, n in catalog.classes]}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_catalog(path) -> ClassCatalog:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"catalog invalid: {exc}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("classes"), list):
        raise SchemaError("catalog must be an object with a 'classes' list")
    try:
        classes = tuple((int(c["class_id"]), str(c["name"])) for c in doc["classes"])
        return ClassCatalog(classes)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad catalog entry: {exc}") from None


def write_gt_labels(path, gt: SegmentationResult) -> None:
    doc = {"instance_id": gt.instance_id.tolist(), "class_id": gt.class_id.tolist()}
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def read_gt_labels(path) -> SegmentationResult:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"gt labels invalid: {exc}") from None
    try:
        return SegmentationResult(
            np.array(doc["instance_id"], dtype=np.int64),
            np.array(doc["class_id"], dtype=np.int64),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad gt labels: {exc}") from None


# --- scene packages ---------------------------------------------------------

@dataclass(frozen=True)
class ScenePackage:
    """On-disk scene layout: cloud.ply, cameras.json, catalog.json,
    masks/view_<id>.{png,json}, optional gt_labels.json."""

    root: Path
    cloud: PointCloud
    catalog: ClassCatalog
    views: dict[int, CameraView]
    mask_view_ids: tuple[int, ...]
    gt: SegmentationResult | None

    def mask_paths(self, view_id: int) -> tuple[Path, Path]:
        base = self.root / "masks" / f"view_{view_id}"
        return base.with_suffix(".png"), base.with_suffix(".json")

    def has_masks(self, view_id: int) -> bool:
        return view_id in self.mask_view_ids

    def load_masks(self, view_id: int) -> MaskSet:
        png, js = self.mask_paths(view_id)
        return read_masks(png, js, self.catalog)


def load_scene_package(root) -> ScenePackage:
    """Open a scene directory and validate its internal consistency."""
    root = Path(root)
    if not root.is_dir():
        raise SchemaError(f"scene package {root} is not a directory")
    cloud, gt_from_ply = read_ply(root / "cloud.ply")
    catalog = read_catalog(root / "catalog.json")
    views = {v.view_id: v for v in read_cameras(root / "cameras.json")}

    mask_ids = []
    masks_dir = root / "masks"
    if masks_dir.is_dir():
        for png in sorted(masks_dir.glob("view_*.png")):
            sibling = png.with_suffix(".json")
            if not sibling.exists():
                raise SchemaError(f"mask {png.name} has no JSON sibling")
            vid = int(png.stem.removeprefix("view_"))
            if vid not in views:
                raise SchemaError(f"mask view {vid} missing from cameras.json")
            mask_ids.append(vid)

    gt = gt_from_ply
    gt_path = root / "gt_labels.json"
    if gt_path.exists():
        gt = read_gt_labels(gt_path)
    if gt is not None and len(gt) != len(cloud):
        raise SchemaError("ground-truth labels do not cover the cloud")
    return ScenePackage(root, cloud, catalog, views, tuple(mask_ids), gt)
