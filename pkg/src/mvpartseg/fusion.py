"""Multi-view label fusion.

Per-point class posteriors are built by folding confidence-weighted
Bayesian updates over the views that observed the point, then thresholded
into labels and cleaned with a density-based outlier pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .core import ClassCatalog, PointCloud, SegmentationResult, argmax_rows_lowest_id, normalize
from .errors import AllZeroWeights, SingleClassCatalog
from .projection import MaskSet

AREA_SCORE_MIN = 0.001
AREA_SCORE_MAX = 0.5
MAX_FRAGMENTS = 3          # connected components above this flag a noisy mask
MIN_COMPACTNESS = 0.02     # 4*pi*area/perimeter^2 below this flags a noisy mask

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.int32)


@dataclass(frozen=True)
class FusionConfig:
    """Fusion thresholds and refinement parameters."""

    label_threshold: float = 0.5   # posterior mass required to commit a label
    min_support_points: int = 100  # matched points above this earn full support score
    dbscan_eps: float = 0.05       # neighborhood radius, world units
    dbscan_min_pts: int = 10       # neighbors (incl. self) required for a core point

    def __post_init__(self):
        if not (0.0 < self.label_threshold < 1.0):
            raise ValueError("label_threshold must lie in (0, 1)")
        if self.min_support_points < 1:
            raise ValueError("min_support_points must be >= 1")
        if self.dbscan_eps <= 0:
            raise ValueError("dbscan_eps must be > 0")
        if self.dbscan_min_pts < 1:
            raise ValueError("dbscan_min_pts must be >= 1")


@dataclass(frozen=True)
class ViewConfidence:
    """Geometry-derived reliability of one region in one view.

    area_score is the normalized mask area clipped to [0.001, 0.5];
    point_support and boundary_score are binary {0.5, 1.0} flags for
    sufficient matched points and a clean (unfragmented, compact) mask
    boundary.  The overall weight is their mean.
    """

    area_score: float
    point_support: float
    boundary_score: float

    def __post_init__(self):
        if not (AREA_SCORE_MIN <= self.area_score <= AREA_SCORE_MAX):
            raise ValueError("area_score outside its clip range")
        if self.point_support not in (0.5, 1.0) or self.boundary_score not in (0.5, 1.0):
            raise ValueError("support and boundary scores are binary {0.5, 1.0}")

    @property
    def weight(self) -> float:
        return (self.area_score + self.point_support + self.boundary_score) / 3.0


def observation_likelihood(class_id: int, q: float, catalog: ClassCatalog) -> np.ndarray:
    """Soft class distribution for one detection.

    The detector's confidence q goes to the predicted class and the
    remaining mass is spread uniformly over the other classes.
    """
    C = len(catalog)
    if C < 2:
        raise SingleClassCatalog("cannot spread residual mass over zero other classes")
    if not (0.0 <= q <= 1.0):
        raise ValueError("q must lie in [0, 1]")
    dist = np.full(C, (1.0 - q) / (C - 1))
    dist[catalog.index_of(class_id)] = q
    return dist


def region_boundary_stats(label_image: np.ndarray, region_id: int) -> tuple[int, int, float]:
    """(connected components, perimeter, compactness) of one region.

    Components use 4-connectivity; the perimeter counts 4-neighbor
    boundary edges with the image border treated as outside.
    """
    mask = label_image == region_id
    area = int(mask.sum())
    n_comp = ndimage.label(mask, structure=_CROSS)[1]
    padded = np.pad(mask, 1)
    perim = int(
        np.sum(padded[1:-1, 1:-1] & ~padded[:-2, 1:-1])
        + np.sum(padded[1:-1, 1:-1] & ~padded[2:, 1:-1])
        + np.sum(padded[1:-1, 1:-1] & ~padded[1:-1, :-2])
        + np.sum(padded[1:-1, 1:-1] & ~padded[1:-1, 2:])
    )
    compactness = 4.0 * np.pi * area / float(perim) ** 2 if perim else 0.0
    return n_comp, perim, compactness


def view_confidence(masks: MaskSet, region_id: int, matched_point_count: int,
                    config: FusionConfig) -> ViewConfidence:
    """Reliability score of one region given its geometry and point support."""
    region = masks.region_by_id(region_id)
    H, W = masks.label_image.shape
    area_score = float(np.clip(region.pixel_count / (H * W), AREA_SCORE_MIN, AREA_SCORE_MAX))
    point_support = 1.0 if matched_point_count > config.min_support_points else 0.5
    n_comp, _, compactness = region_boundary_stats(masks.label_image, region_id)
    boundary_score = 1.0 if (n_comp <= MAX_FRAGMENTS and compactness >= MIN_COMPACTNESS) else 0.5
    return ViewConfidence(area_score, point_support, boundary_score)


def bayes_update(prior: np.ndarray, observation: np.ndarray, weight: float) -> np.ndarray:
    """One recursive posterior update with a view-reliability weight.

    The effective likelihood is weight * observation + (1 - weight) *
    uniform, so a zero-weight view leaves the prior untouched while a
    full-weight view applies the raw observation.  Raises AllZeroWeights
    when the update is degenerate (contradictory hard evidence); callers
    skip such views.
    """
    prior = np.asarray(prior, dtype=np.float64)
    obs = np.asarray(observation, dtype=np.float64)
    if prior.shape != obs.shape:
        raise ValueError("prior and observation must have the same length")
    if not (0.0 <= weight <= 1.0):
        raise ValueError("weight must lie in [0, 1]")
    C = prior.shape[0]
    likelihood = weight * obs + (1.0 - weight) / C
    return normalize(likelihood * prior)


def fuse_point(observations, catalog: ClassCatalog) -> np.ndarray:
    """Fold bayes_update over one point's observations.

    ``observations`` is a sequence of (distribution, weight) pairs in
    ascending view order.  Starts from the uniform prior; degenerate
    updates are skipped.  An empty sequence yields the uniform
    distribution.
    """
    posterior = catalog.uniform()
    for obs, weight in observations:
        try:
            posterior = bayes_update(posterior, obs, weight)
        except AllZeroWeights:
            continue
    return posterior


def fuse_observations(point_index: np.ndarray, class_index: np.ndarray,
                      q: np.ndarray, weight: np.ndarray,
                      n_points: int, catalog: ClassCatalog) -> np.ndarray:
    """Vectorized multi-point fusion; equals fuse_point per point.

    Arguments are parallel arrays over observations, ordered by
    (point, view).  class_index is the catalog position (not id) of each
    observed class.  Works in log space: the recursive update chain
    telescopes into a normalized product of per-view likelihoods.
    Observations with an exactly zero likelihood entry fall back to the
    sequential path so the skip-degenerate rule is preserved.
    """
    C = len(catalog)
    if C < 2:
        raise SingleClassCatalog("fusion needs at least two classes")
    point_index = np.asarray(point_index, dtype=np.int64)
    class_index = np.asarray(class_index, dtype=np.int64)
    q = np.asarray(q, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)

    rest = (1.0 - weight) / C + weight * (1.0 - q) / (C - 1)
    hit = (1.0 - weight) / C + weight * q
    like = np.repeat(rest[:, None], C, axis=1)
    like[np.arange(like.shape[0]), class_index] = hit

    degenerate = (rest == 0.0) | (hit == 0.0)
    acc = np.zeros((n_points, C), dtype=np.float64)
    clean = ~degenerate
    with np.errstate(divide="ignore"):
        np.add.at(acc, point_index[clean], np.log(like[clean]))

    acc -= acc.max(axis=1, keepdims=True)
    posteriors = np.exp(acc)
    posteriors /= posteriors.sum(axis=1, keepdims=True)

    if np.any(degenerate):
        # replay affected points sequentially to honor the skip rule
        for p in np.unique(point_index[degenerate]):
            sel = point_index == p
            obs = [(like[i], 1.0) for i in np.nonzero(sel)[0]]
            posteriors[p] = fuse_point(obs, catalog)
    return posteriors


def majority_vote(point_index: np.ndarray, class_index: np.ndarray,
                  n_points: int, catalog: ClassCatalog) -> tuple[np.ndarray, np.ndarray]:
    """Raw vote counting over observations, ignoring q and view weights.

    Returns (class_id, confidence) per point where confidence is the
    winning vote fraction; unobserved points stay unlabeled.  Ties break
    to the lowest class id.
    """
    C = len(catalog)
    counts = np.zeros((n_points, C), dtype=np.int64)
    np.add.at(counts, (np.asarray(point_index, dtype=np.int64),
                       np.asarray(class_index, dtype=np.int64)), 1)
    total = counts.sum(axis=1)
    winner = argmax_rows_lowest_id(counts.astype(np.float64), catalog)
    best = counts.max(axis=1)
    classes = np.where(total > 0, winner, 0)
    conf = np.divide(best, total, out=np.zeros(n_points, dtype=np.float64), where=total > 0)
    return classes.astype(np.int64), conf


def select_labels(posteriors: np.ndarray, threshold: float,
                  catalog: ClassCatalog) -> tuple[np.ndarray, np.ndarray]:
    """Commit the most probable class where its mass strictly exceeds the
    threshold; everything else stays unlabeled with zero confidence."""
    if not (0.0 < threshold < 1.0):
        raise ValueError("threshold must lie in (0, 1)")
    p = np.asarray(posteriors, dtype=np.float64)
    top = p.max(axis=1)
    winner = argmax_rows_lowest_id(p, catalog)
    labeled = top > threshold
    classes = np.where(labeled, winner, 0).astype(np.int64)
    conf = np.where(labeled, top, 0.0)
    return classes, conf


def dbscan_partition(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Density partition of a point set: 2 = core, 1 = border, 0 = noise.

    A core point has at least min_pts neighbors within eps (itself
    included); a border point is a non-core point with a core neighbor
    within eps; everything else is noise.  The partition is independent
    of point order.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    out = np.zeros(n, dtype=np.int8)
    if n == 0:
        return out
    tree = cKDTree(pts)
    counts = tree.query_ball_point(pts, eps, return_length=True)
    core = counts >= min_pts
    out[core] = 2
    if np.any(core) and not np.all(core):
        core_tree = cKDTree(pts[core])
        d, _ = core_tree.query(pts[~core], k=1)
        border = np.zeros(n, dtype=bool)
        border[np.nonzero(~core)[0][d <= eps]] = True
        out[border] = 1
    return out


def dbscan_refine(result: SegmentationResult, cloud: PointCloud,
                  config: FusionConfig) -> SegmentationResult:
    """Strip spatial outliers per class label.

    For each class, points flagged as density noise are relabeled to 0;
    core and border points keep their label.  Labels are never added and
    surviving points never change class.
    """
    classes = np.array(result.class_id)
    conf = np.array(result.confidence)
    for cid in np.unique(classes):
        if cid == 0:
            continue
        idx = np.nonzero(classes == cid)[0]
        part = dbscan_partition(cloud.positions[idx], config.dbscan_eps, config.dbscan_min_pts)
        noise = idx[part == 0]
        classes[noise] = 0
        conf[noise] = 0.0
    return SegmentationResult(result.instance_id, classes, conf)
