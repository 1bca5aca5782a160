"""Segmentation quality metrics and the three-strategy ablation harness."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ClassCatalog, SegmentationResult
from .errors import SizeMismatch


@dataclass(frozen=True)
class ConfusionMatrix:
    """(C+1) x (C+1) counts; row = ground truth, column = prediction.

    Index 0 is the unlabeled/background class, index k the catalog's
    k-th class.
    """

    counts: np.ndarray
    catalog: ClassCatalog

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _class_to_index(class_id: np.ndarray, catalog: ClassCatalog) -> np.ndarray:
    ids = catalog.class_ids
    lut = {0: 0}
    lut.update({int(c): k + 1 for k, c in enumerate(ids)})
    try:
        return np.array([lut[int(c)] for c in class_id], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"class id {exc} not in catalog") from None


def confusion(pred: SegmentationResult, gt: SegmentationResult,
              catalog: ClassCatalog) -> ConfusionMatrix:
    """Point-wise confusion counts between prediction and ground truth."""
    if len(pred) != len(gt):
        raise SizeMismatch(f"prediction covers {len(pred)} points, ground truth {len(gt)}")
    k = len(catalog) + 1
    gi = _class_to_index(gt.class_id, catalog)
    pi = _class_to_index(pred.class_id, catalog)
    counts = np.bincount(gi * k + pi, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(counts, catalog)


def per_class_metrics(cm: ConfusionMatrix) -> dict:
    """Precision/recall/IoU per class plus the mean IoU.

    Classes never seen in prediction or ground truth are excluded from
    the mean; a defined class with a zero denominator scores 0.
    """
    counts = cm.counts
    out = {"per_class": {}, "miou": 0.0}
    ious = []
    for k, (cid, name) in enumerate(cm.catalog.classes, start=1):
        tp = int(counts[k, k])
        fp = int(counts[:, k].sum()) - tp
        fn = int(counts[k, :].sum()) - tp
        if tp + fp + fn == 0:
            continue
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        iou = tp / (tp + fp + fn)
        out["per_class"][name] = {
            "class_id": cid, "precision": precision, "recall": recall,
            "iou": iou, "tp": tp, "fp": fp, "fn": fn,
        }
        ious.append(iou)
    out["miou"] = float(np.mean(ious)) if ious else 0.0
    return out


def format_metrics_table(metrics_by_strategy: dict[str, dict]) -> str:
    """Aligned plain-text table: one row per class, percentage metrics
    with two decimals for every strategy."""
    strategies = list(metrics_by_strategy)
    names: list[str] = []
    for m in metrics_by_strategy.values():
        for n in m["per_class"]:
            if n not in names:
                names.append(n)
    name_w = max([len(n) for n in names] + [len("Objects"), len("mIoU" )])
    header_groups = ["Precision", "Recall", "mIoU"]
    col_w = max(8, max(len(s) for s in strategies) + 1)

    lines = []
    top = "Objects".ljust(name_w)
    sub = " " * name_w
    for g in header_groups:
        top += " | " + g.center(col_w * len(strategies) + len(strategies) - 1)
        sub += " | " + " ".join(s.rjust(col_w) for s in strategies)
    lines.append(top)
    lines.append(sub)
    lines.append("-" * len(sub))

    def cell(m, name, key):
        info = m["per_class"].get(name)
        return f"{100.0 * info[key]:.2f}".rjust(col_w) if info else "-".rjust(col_w)

    for n in names:
        row = n.ljust(name_w)
        for key in ("precision", "recall", "iou"):
            row += " | " + " ".join(cell(metrics_by_strategy[s], n, key) for s in strategies)
        lines.append(row)
    mean_row = "mIoU".ljust(name_w)
    for key in ("precision", "recall", "iou"):
        if key == "iou":
            mean_row += " | " + " ".join(
                f"{100.0 * metrics_by_strategy[s]['miou']:.2f}".rjust(col_w) for s in strategies
            )
        else:
            mean_row += " | " + " ".join("-".rjust(col_w) for _ in strategies)
    lines.append(mean_row)
    return "\n".join(lines) + "\n"


def instance_accuracy(pred: SegmentationResult, gt: SegmentationResult) -> float:
    """Fraction of points whose predicted instance id matches ground truth."""
    if len(pred) != len(gt):
        raise SizeMismatch(f"prediction covers {len(pred)} points, ground truth {len(gt)}")
    if len(pred) == 0:
        return 1.0
    return float(np.mean(pred.instance_id == gt.instance_id))


def ablation_run(package_dir, config, corruption, out_dir=None, threads: int = 1) -> dict[str, dict]:
    """Run the three fusion strategies on one scene and score each.

    Strategy arms share the instance stage and the back-projected
    observations; they differ only in how observations become labels:
    plain majority vote, majority vote plus density refinement, and the
    full weighted Bayesian pipeline.  Returns {strategy: metrics}.
    """
    from . import pipeline as _pipeline  # runtime import; pipeline depends on this module

    return _pipeline.run_ablation(package_dir, config, corruption, out_dir=out_dir, threads=threads)
