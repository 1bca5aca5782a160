"""Shared domain types and elementary probability operations.

Class distributions are plain float64 arrays aligned with the catalog's
class order; ``normalize`` and ``argmax_with_confidence`` are the two
primitives every fusion step is built from.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AllZeroWeights

DISTRIBUTION_TOL = 1e-9


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class PointCloud:
    """Immutable point set; point ids are the array indices 0..n-1."""

    positions: np.ndarray                 # (n, 3) float64, finite
    colors: np.ndarray | None = None      # (n, 3) float64 in [0, 1]

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must be (n, 3), got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions contain non-finite values")
        object.__setattr__(self, "positions", _readonly(pos))
        if self.colors is not None:
            col = np.asarray(self.colors, dtype=np.float64)
            if col.shape != pos.shape:
                raise ValueError("colors must match positions shape")
            if col.size and (col.min() < 0.0 or col.max() > 1.0):
                raise ValueError("colors must lie in [0, 1]")
            object.__setattr__(self, "colors", _readonly(col))

    def __len__(self) -> int:
        return self.positions.shape[0]

    def subset(self, indices: np.ndarray) -> "PointCloud":
        """New cloud holding positions[indices]; ids are renumbered 0..k-1."""
        idx = np.asarray(indices)
        return PointCloud(
            self.positions[idx],
            self.colors[idx] if self.colors is not None else None,
        )


@dataclass(frozen=True)
class ClassCatalog:
    """Ordered class set; id 0 is reserved for background/unlabeled."""

    classes: tuple[tuple[int, str], ...]  # (class_id >= 1, name)

    def __post_init__(self):
        ids = [c for c, _ in self.classes]
        names = [n for _, n in self.classes]
        if any(c <= 0 for c in ids):
            raise ValueError("class ids must be >= 1 (0 is reserved)")
        if len(set(ids)) != len(ids):
            raise ValueError("class ids must be unique")
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")

    def __len__(self) -> int:
        return len(self.classes)

    @property
    def class_ids(self) -> np.ndarray:
        return np.array([c for c, _ in self.classes], dtype=np.int64)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for _, n in self.classes)

    def index_of(self, class_id: int) -> int:
        for i, (c, _) in enumerate(self.classes):
            if c == class_id:
                return i
        raise KeyError(f"class id {class_id} not in catalog")

    def id_for_name(self, name: str) -> int:
        for c, n in self.classes:
            if n == name:
                return c
        raise KeyError(f"class name {name!r} not in catalog")

    def name_of(self, class_id: int) -> str:
        return self.classes[self.index_of(class_id)][1]

    def uniform(self) -> np.ndarray:
        return np.full(len(self.classes), 1.0 / len(self.classes))


@dataclass(frozen=True)
class CameraView:
    """Pinhole camera: world -> camera is X_cam = R @ X + t."""

    view_id: int
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray      # (3, 3)
    translation: np.ndarray   # (3,)

    ROTATION_TOL = 1e-9

    def __post_init__(self):
        from .errors import NonOrthonormalRotation

        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be (3,3) and translation (3,)")
        if np.max(np.abs(R.T @ R - np.eye(3))) > self.ROTATION_TOL:
            raise NonOrthonormalRotation(
                f"view {self.view_id}: R^T R deviates from identity by "
                f"{np.max(np.abs(R.T @ R - np.eye(3))):.3e}"
            )
        if abs(np.linalg.det(R) - 1.0) > self.ROTATION_TOL:
            raise NonOrthonormalRotation(
                f"view {self.view_id}: det(R) = {np.linalg.det(R):.12f}, expected +1"
            )
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        object.__setattr__(self, "rotation", _readonly(R))
        object.__setattr__(self, "translation", _readonly(t))


@dataclass(frozen=True)
class SegmentationResult:
    """Per-point labeling: instance id, class id, and label confidence.

    instance_id 0 means unassigned, class_id 0 means unlabeled; a labeled
    point always carries a positive confidence.
    """

    instance_id: np.ndarray   # (n,) int64, >= 0
    class_id: np.ndarray      # (n,) int64, >= 0
    confidence: np.ndarray = field(default=None)  # (n,) float64 in [0, 1]

    def __post_init__(self):
        inst = np.asarray(self.instance_id, dtype=np.int64)
        cls = np.asarray(self.class_id, dtype=np.int64)
        if self.confidence is None:
            conf = np.where(cls > 0, 1.0, 0.0)
        else:
            conf = np.asarray(self.confidence, dtype=np.float64)
        if not (inst.shape == cls.shape == conf.shape) or inst.ndim != 1:
            raise ValueError("instance_id, class_id, confidence must be equal-length 1-d")
        if inst.size and (inst.min() < 0 or cls.min() < 0):
            raise ValueError("ids must be >= 0")
        if conf.size and (conf.min() < 0.0 or conf.max() > 1.0):
            raise ValueError("confidence must lie in [0, 1]")
        if np.any((cls > 0) & (conf <= 0.0)):
            raise ValueError("labeled points must have positive confidence")
        object.__setattr__(self, "instance_id", _readonly(inst))
        object.__setattr__(self, "class_id", _readonly(cls))
        object.__setattr__(self, "confidence", _readonly(conf))

    def __len__(self) -> int:
        return self.instance_id.shape[0]


def normalize(weights: np.ndarray) -> np.ndarray:
    """Scale nonnegative weights so they sum to one.

    Raises AllZeroWeights when every weight is zero, which signals a
    degenerate observation the caller must skip.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise ValueError("empty weight vector")
    if not np.all(np.isfinite(w)) or np.any(w < 0.0):
        raise ValueError("weights must be finite and nonnegative")
    total = w.sum()
    if total == 0.0:
        raise AllZeroWeights("all weights are zero")
    return w / total


def argmax_with_confidence(dist: np.ndarray, catalog: ClassCatalog) -> tuple[int, float]:
    """Most probable class and its probability; ties go to the lowest class id."""
    p = np.asarray(dist, dtype=np.float64)
    if p.shape != (len(catalog),):
        raise ValueError("distribution length must match catalog size")
    top = p.max()
    ids = catalog.class_ids
    winner = ids[p == top].min()
    return int(winner), float(top)


def argmax_rows_lowest_id(probs: np.ndarray, catalog: ClassCatalog) -> np.ndarray:
    """Row-wise argmax over (n, C) probabilities returning class ids.

    Ties break to the lowest class id, matching argmax_with_confidence.
    """
    ids = catalog.class_ids
    order = np.argsort(ids, kind="stable")
    best = np.argmax(probs[:, order], axis=1)   # first max = lowest id
    return ids[order[best]]
