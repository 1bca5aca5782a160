"""End-to-end orchestration: instance stage, part stage, fusion, and the
three-strategy ablation.  The CLI is a thin wrapper over this module.

All stages are deterministic for a fixed config and seed; the thread
count only bounds worker parallelism over views and never changes any
output byte.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from . import __version__
from .core import ClassCatalog, PointCloud, SegmentationResult
from .errors import ConfigError, InputFormatError
from .evalkit import confusion, format_metrics_table, instance_accuracy, per_class_metrics
from .fusion import (
    FusionConfig,
    dbscan_refine,
    fuse_observations,
    majority_vote,
    select_labels,
    view_confidence,
)
from .io_formats import ScenePackage, load_scene_package, write_cameras, write_ply
from .projection import (
    OBSERVATION_DTYPE,
    MaskSet,
    MatchConfig,
    assign_instances,
    backproject_view,
    median_nn_spacing,
    project_points,
)
from .renderer import RenderConfig, RenderedView, make_top_view, render, sample_part_views
from .synth import VIEW_ID_STRIDE, CorruptionSpec, SyntheticScene, corrupt_masks, oracle_masks

logger = logging.getLogger("mvpartseg")


@dataclass(frozen=True)
class PipelineConfig:
    """One JSON-serializable bundle of every stage's knobs.

    Radii and matching tolerances are expressed as multiples of the
    median nearest-neighbor spacing of the cloud they apply to, so the
    same config transfers across scene scales.
    """

    point_px: int = 3
    image_size: int = 1024
    n_ring_views: int = 10
    splat_radius_scale: float = 1.5
    match_radius_scale: float = 2.0
    depth_tolerance_scale: float = 4.0
    label_threshold: float = 0.5
    min_support_points: int = 100
    # 6x the median spacing gives ~25 expected neighbors under Poisson
    # surface sampling; 4x (~11) sits right at dbscan_min_pts and strips
    # legitimate face-boundary points
    dbscan_eps_scale: float = 6.0
    dbscan_min_pts: int = 10
    seed: int = 0
    corruption: CorruptionSpec | None = None

    def __post_init__(self):
        try:
            self.render_config()
            FusionConfig(self.label_threshold, self.min_support_points,
                         1.0, self.dbscan_min_pts)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.n_ring_views < 1 or self.n_ring_views >= VIEW_ID_STRIDE - 1:
            raise ConfigError(f"n_ring_views out of range: {self.n_ring_views}")
        for name in ("splat_radius_scale", "match_radius_scale",
                     "depth_tolerance_scale", "dbscan_eps_scale"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")

    def render_config(self) -> RenderConfig:
        return RenderConfig(point_px=self.point_px, image_size=self.image_size)

    def fusion_config(self, dbscan_eps: float) -> FusionConfig:
        return FusionConfig(self.label_threshold, self.min_support_points,
                            dbscan_eps, self.dbscan_min_pts)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["corruption"] = asdict(self.corruption) if self.corruption else None
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        doc = dict(doc)
        corr = doc.pop("corruption", None)
        if corr is not None:
            corr_known = set(CorruptionSpec.__dataclass_fields__)
            corr_unknown = set(corr) - corr_known
            if corr_unknown:
                raise ConfigError(f"unknown corruption keys: {sorted(corr_unknown)}")
            try:
                corr = CorruptionSpec(**corr)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad corruption block: {exc}") from None
        try:
            return cls(corruption=corr, **doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(doc)


def _write_json(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_render(renders_dir: Path, rendered: RenderedView) -> None:
    """Inspection artifacts: 8-bit color PNG plus raw float32 depth and
    int32 index sidecars."""
    renders_dir.mkdir(parents=True, exist_ok=True)
    vid = rendered.view.view_id
    rgb = np.clip(np.rint(rendered.color_image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb).save(renders_dir / f"view_{vid}_color.png")
    np.save(renders_dir / f"view_{vid}_depth.npy",
            rendered.depth_image.astype(np.float32))
    np.save(renders_dir / f"view_{vid}_index.npy",
            rendered.index_image.astype(np.int32))


def _oracle_source(package: ScenePackage) -> SyntheticScene:
    if package.gt is None:
        raise ConfigError("oracle masks need ground-truth labels in the scene package")
    return SyntheticScene(package.cloud, package.gt, package.catalog, objects=())


def write_manifest(out_dir: Path, command: str, config: PipelineConfig) -> None:
    import PIL
    import scipy

    _write_json(out_dir / "manifest.json", {
        "command": command,
        "config": config.to_dict(),
        "seed": config.seed,
        "versions": {
            "mvpartseg": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pillow": PIL.__version__,
        },
    })


# --- stage 1: instances -----------------------------------------------------

def stage_instances(package: ScenePackage, config: PipelineConfig,
                    out_dir: Path | None = None, oracle: bool = False,
                    ) -> tuple[np.ndarray, RenderedView, MaskSet]:
    """Top-view render and mask containment; returns per-point instance ids."""
    rc = config.render_config()
    cloud = package.cloud
    spacing = median_nn_spacing(cloud.positions)
    radius = config.splat_radius_scale * spacing
    top_view = package.views.get(0) or make_top_view(cloud, rc, view_id=0)
    rendered = render(cloud, top_view, radius, rc)

    if oracle:
        masks = oracle_masks(_oracle_source(package), rendered, level="instance")
    elif package.has_masks(0):
        masks = package.load_masks(0)
    else:
        raise InputFormatError("no top-view masks (view 0) in the scene package")

    instances = assign_instances(cloud, top_view, masks)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_render(out_dir / "renders", rendered)
        np.save(out_dir / "instances.npy", instances)
    return instances, rendered, masks


# --- stage 2: part observations ----------------------------------------------

def _instance_part_views(package: ScenePackage, sub: PointCloud, inst: int,
                         config: PipelineConfig, rc: RenderConfig):
    """Package-provided cameras when the full ring exists, else a fresh ring."""
    base = inst * VIEW_ID_STRIDE
    wanted = [base + k for k in range(1, config.n_ring_views + 2)]
    if all(v in package.views for v in wanted):
        return [package.views[v] for v in wanted]
    return sample_part_views(sub, config.n_ring_views, rc, base_view_id=base)


def _region_projection_counts(sub: PointCloud, view, masks: MaskSet) -> np.ndarray:
    """How many instance points project inside each region's pixels."""
    H, W = masks.label_image.shape
    uv, _, front = project_points(view, sub.positions)
    iu = np.rint(uv[:, 0]).astype(np.int64)
    iv = np.rint(uv[:, 1]).astype(np.int64)
    ok = front & (iu >= 0) & (iu < W) & (iv >= 0) & (iv < H)
    rids = masks.label_image[iv[ok], iu[ok]]
    return np.bincount(rids, minlength=int(masks.label_image.max()) + 1)


def stage_parts(package: ScenePackage, instances: np.ndarray, config: PipelineConfig,
                out_dir: Path | None = None, oracle: bool = False,
                threads: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Render each instance from its ring of views, back-project masks, and
    attach a view-confidence weight to every observation.

    Returns (observations, weights): a structured OBSERVATION_DTYPE array
    with scene-level point ids, sorted by (point, view), and the parallel
    weight array.
    """
    rc = config.render_config()
    cloud = package.cloud
    fusion_cfg = config.fusion_config(1.0)  # dbscan_eps unused here
    oracle_src = _oracle_source(package) if oracle else None

    all_obs, all_w = [], []
    renders_to_save = []
    cameras_used = []
    for inst in [int(i) for i in np.unique(instances) if i > 0]:
        idx = np.nonzero(instances == inst)[0]
        if idx.size < 2:
            logger.warning("instance %d has %d points; skipped", inst, idx.size)
            continue
        sub = cloud.subset(idx)
        spacing = median_nn_spacing(sub.positions)
        radius = config.splat_radius_scale * spacing
        match = MatchConfig(config.match_radius_scale * spacing,
                            config.depth_tolerance_scale * spacing)
        views = _instance_part_views(package, sub, inst, config, rc)
        cameras_used.extend(views)
        tree = cKDTree(sub.positions)

        def handle_view(view):
            rendered = render(sub, view, radius, rc)
            if oracle_src is not None:
                masks = oracle_masks(oracle_src, rendered, level="part", point_ids=idx)
                if config.corruption is not None:
                    masks = corrupt_masks(masks, config.corruption, package.catalog)
            elif package.has_masks(view.view_id):
                masks = package.load_masks(view.view_id)
            else:
                logger.warning("no masks for view %d; it contributes no observations",
                               view.view_id)
                return rendered, np.empty(0, dtype=OBSERVATION_DTYPE), np.empty(0)
            if not masks.regions:
                return rendered, np.empty(0, dtype=OBSERVATION_DTYPE), np.empty(0)
            obs = backproject_view(sub, rendered, masks, match, tree)
            counts = _region_projection_counts(sub, view, masks)
            weight_of = np.zeros(counts.shape[0], dtype=np.float64)
            for region in masks.regions:
                weight_of[region.region_id] = view_confidence(
                    masks, region.region_id, int(counts[region.region_id]), fusion_cfg
                ).weight
            return rendered, obs, weight_of[obs["region_id"]]

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(handle_view, views))
        else:
            results = [handle_view(v) for v in views]

        for view, (rendered, obs, w) in zip(views, results):
            renders_to_save.append(rendered)
            if obs.size:
                obs = obs.copy()
                obs["point_id"] = idx[obs["point_id"]]  # local -> scene ids
                all_obs.append(obs)
                all_w.append(w)

    if all_obs:
        observations = np.concatenate(all_obs)
        weights = np.concatenate(all_w)
    else:
        observations = np.empty(0, dtype=OBSERVATION_DTYPE)
        weights = np.empty(0)
    order = np.lexsort((observations["view_id"], observations["point_id"]))
    observations, weights = observations[order], weights[order]

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        for rendered in renders_to_save:
            save_render(out_dir / "renders", rendered)
        write_cameras(out_dir / "part_cameras.json", cameras_used)
        write_observations(out_dir / "observations.json", observations, weights, instances)
    return observations, weights


def write_observations(path, observations: np.ndarray, weights: np.ndarray,
                       instances: np.ndarray) -> None:
    """Observation stream for debugging and stage chaining.

    Record fields: point_id, view_id, class_id, q, plus the fusion weight
    and the instance id for traceability.  Floats are written with repr
    so a reload is bit-exact.
    """
    rows = []
    for rec, w in zip(observations, weights):
        pid = int(rec["point_id"])
        rows.append(
            '{"point_id":%d,"view_id":%d,"class_id":%d,"q":%s,"alpha":%s,"instance_id":%d}'
            % (pid, int(rec["view_id"]), int(rec["class_id"]),
               repr(float(rec["q"])), repr(float(w)), int(instances[pid]))
        )
    with open(path, "w") as fh:
        fh.write('{"observations":[\n' + ",\n".join(rows) + "\n]}\n")


def read_observations(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path) as fh:
        doc = json.load(fh)
    recs = doc["observations"]
    observations = np.empty(len(recs), dtype=OBSERVATION_DTYPE)
    weights = np.empty(len(recs))
    for i, r in enumerate(recs):
        observations[i] = (r["point_id"], r["view_id"], r["class_id"], 0, r["q"], 0)
        weights[i] = r["alpha"]
    return observations, weights


# --- stage 3: fusion ---------------------------------------------------------

def _class_index_lut(catalog: ClassCatalog) -> np.ndarray:
    lut = np.zeros(int(catalog.class_ids.max()) + 1, dtype=np.int64)
    lut[catalog.class_ids] = np.arange(len(catalog))
    return lut


def stage_fuse(package: ScenePackage, instances: np.ndarray,
               observations: np.ndarray, weights: np.ndarray,
               config: PipelineConfig, out_dir: Path | None = None,
               ) -> tuple[SegmentationResult, np.ndarray]:
    """Posterior fusion, thresholded label selection, and density cleanup."""
    catalog = package.catalog
    n = len(package.cloud)
    lut = _class_index_lut(catalog)
    posteriors = fuse_observations(
        observations["point_id"], lut[observations["class_id"]],
        observations["q"], weights, n, catalog,
    )
    classes, conf = select_labels(posteriors, config.label_threshold, catalog)
    result = SegmentationResult(instances, classes, conf)
    scene_spacing = median_nn_spacing(package.cloud.positions)
    fusion_cfg = config.fusion_config(config.dbscan_eps_scale * scene_spacing)
    result = dbscan_refine(result, package.cloud, fusion_cfg)

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        posteriors.astype(np.float64).tofile(out_dir / "posteriors.f64")
        write_ply(out_dir / "labeled.ply", package.cloud, result)
    return result, posteriors


def evaluate(package: ScenePackage, result: SegmentationResult,
             out_dir: Path | None = None, strategy: str = "pipeline") -> dict | None:
    """Metrics against package ground truth, written as JSON and a table."""
    if package.gt is None:
        return None
    cm = confusion(result, package.gt, package.catalog)
    metrics = per_class_metrics(cm)
    metrics["instance_accuracy"] = instance_accuracy(result, package.gt)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_json(out_dir / "metrics.json", metrics)
        with open(out_dir / "metrics.txt", "w") as fh:
            fh.write(format_metrics_table({strategy: metrics}))
    return metrics


def run_pipeline(package_dir, config: PipelineConfig, out_dir,
                 oracle: bool = False, threads: int = 1,
                 ) -> tuple[SegmentationResult, dict | None]:
    """The whole chain: instances -> part observations -> fusion -> labels,
    with every intermediate written under out_dir."""
    package = package_dir if isinstance(package_dir, ScenePackage) \
        else load_scene_package(package_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "pipeline", config)

    logger.info("stage 1: instance assignment over %d points", len(package.cloud))
    instances, _, _ = stage_instances(package, config, out, oracle=oracle)
    logger.info("stage 2: part observations for %d instances",
                int(np.sum(np.unique(instances) > 0)))
    observations, weights = stage_parts(package, instances, config, out,
                                        oracle=oracle, threads=threads)
    logger.info("stage 3: fusing %d observations", len(observations))
    result, _ = stage_fuse(package, instances, observations, weights, config, out)
    metrics = evaluate(package, result, out)
    return result, metrics


# --- ablation ----------------------------------------------------------------

ABLATION_ARMS = ("projection_only", "cluster", "bayes")


def run_ablation(package_dir, config: PipelineConfig, corruption: CorruptionSpec | None,
                 out_dir=None, threads: int = 1) -> dict[str, dict]:
    """Score the three fusion strategies on identical observations.

    The instance stage runs on clean oracle masks; part-view oracle masks
    are corrupted per ``corruption``.  Arms: plain per-point majority
    vote over observations, the same vote plus density refinement, and
    the full weighted Bayesian fusion with thresholding and refinement.
    """
    package = package_dir if isinstance(package_dir, ScenePackage) \
        else load_scene_package(package_dir)
    if package.gt is None:
        raise ConfigError("ablation needs ground-truth labels")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out, "ablate", config)

    if corruption is None:
        corruption = config.corruption
    run_cfg = PipelineConfig.from_dict({**config.to_dict(), "corruption":
                                        asdict(corruption) if corruption else None})
    instances, _, _ = stage_instances(package, run_cfg, out, oracle=True)
    observations, weights = stage_parts(package, instances, run_cfg, out,
                                        oracle=True, threads=threads)

    catalog = package.catalog
    n = len(package.cloud)
    lut = _class_index_lut(catalog)
    point_idx = observations["point_id"]
    class_idx = lut[observations["class_id"]]
    scene_spacing = median_nn_spacing(package.cloud.positions)
    fusion_cfg = run_cfg.fusion_config(run_cfg.dbscan_eps_scale * scene_spacing)

    vote_cls, vote_conf = majority_vote(point_idx, class_idx, n, catalog)
    arm_results = {"projection_only": SegmentationResult(instances, vote_cls, vote_conf)}
    arm_results["cluster"] = dbscan_refine(arm_results["projection_only"],
                                           package.cloud, fusion_cfg)
    posteriors = fuse_observations(point_idx, class_idx, observations["q"],
                                   weights, n, catalog)
    cls, conf = select_labels(posteriors, run_cfg.label_threshold, catalog)
    arm_results["bayes"] = dbscan_refine(SegmentationResult(instances, cls, conf),
                                         package.cloud, fusion_cfg)

    metrics = {}
    for arm in ABLATION_ARMS:
        m = per_class_metrics(confusion(arm_results[arm], package.gt, catalog))
        m["instance_accuracy"] = instance_accuracy(arm_results[arm], package.gt)
        metrics[arm] = m
        if out is not None:
            write_ply(out / f"labeled_{arm}.ply", package.cloud, arm_results[arm])
    if out is not None:
        _write_json(out / "ablation_metrics.json", metrics)
        with open(out / "ablation_table.txt", "w") as fh:
            fh.write(format_metrics_table(metrics))
    return metrics
