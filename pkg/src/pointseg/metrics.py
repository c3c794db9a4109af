"""Segmentation quality metrics: per-class DSC and HD95 with class averages.

Conventions, stated so the numbers are interpretable:

* DSC = 2|P and G| / (|P| + |G|), and 1.0 when both regions are empty.
* HD95 pools the symmetric boundary distances {d(p, boundary G)} and
  {d(g, boundary P)} and takes their 95th percentile with linear
  interpolation between order statistics. A boundary pixel is a region pixel
  with a 4-neighbor outside the region; the image border counts as outside.
  If exactly one region is empty the score is the image diagonal, a finite
  total-miss penalty; if both are empty it is 0.
* Class averages run over foreground classes only (background id 0 excluded),
  and each class averages over the images whose ground truth contains it.

The central-bias filter reassigns a fixed-width column band at the left and
right edges to background before scoring, mirroring test-time suppression of
predictions far from the centered subject.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import LabelMask
from .errors import InvalidInputError
from .grids import SoftPrediction


def hard_mask(pred: SoftPrediction) -> LabelMask:
    """Per-pixel argmax class; ties resolve to the smaller class id."""
    return LabelMask(np.argmax(pred.probabilities, axis=0), pred.num_classes)


def _region(mask: LabelMask, k: int) -> np.ndarray:
    return mask.classes == k


def dsc(pred_mask: LabelMask, gt: LabelMask, k: int) -> float:
    """Dice similarity of class-k regions; empty-vs-empty scores 1.0."""
    if pred_mask.classes.shape != gt.classes.shape:
        raise InvalidInputError("prediction and ground truth shapes differ")
    p = _region(pred_mask, k)
    g = _region(gt, k)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def _boundary(region: np.ndarray) -> np.ndarray:
    """Region pixels with a 4-neighbor outside; the border counts as outside."""
    padded = np.pad(region, 1, mode="constant", constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return region & ~interior


def hd95(pred_mask: LabelMask, gt: LabelMask, k: int) -> float:
    """95th percentile of pooled symmetric boundary distances, in pixels."""
    if pred_mask.classes.shape != gt.classes.shape:
        raise InvalidInputError("prediction and ground truth shapes differ")
    p = _region(pred_mask, k)
    g = _region(gt, k)
    H, W = p.shape
    if not p.any() and not g.any():
        return 0.0
    if not p.any() or not g.any():
        return float(np.hypot(H, W))
    bp = np.argwhere(_boundary(p)).astype(np.float64)
    bg = np.argwhere(_boundary(g)).astype(np.float64)
    cross = np.sqrt(((bp[:, None, :] - bg[None, :, :]) ** 2).sum(axis=2))
    pooled = np.concatenate([cross.min(axis=1), cross.min(axis=0)])
    return float(np.percentile(pooled, 95))


def central_bias_filter(pred_mask: LabelMask, width: int) -> LabelMask:
    """Reassign the left and right `width`-column bands to background."""
    if width < 0:
        raise InvalidInputError(f"filter width must be nonnegative, got {width}")
    if width == 0:
        return pred_mask
    classes = pred_mask.classes.copy()
    W = classes.shape[1]
    classes[:, : min(width, W)] = 0
    classes[:, max(W - width, 0):] = 0
    return LabelMask(classes, pred_mask.num_classes)


@dataclass(frozen=True)
class EvalReport:
    """Aggregated metrics: per-class means, foreground averages, per-image detail."""

    num_classes: int
    per_class_dsc: dict    # class id -> mean DSC over images containing it
    per_class_hd95: dict
    dsc_average: float     # arithmetic mean over foreground classes
    hd95_average: float
    per_image: tuple       # per image: {"dsc": {k: v}, "hd95": {k: v}}

    def to_json(self) -> str:
        payload = {
            "num_classes": self.num_classes,
            "per_class_dsc": {str(k): v for k, v in sorted(self.per_class_dsc.items())},
            "per_class_hd95": {str(k): v for k, v in sorted(self.per_class_hd95.items())},
            "dsc_average": self.dsc_average,
            "hd95_average": self.hd95_average,
            "per_image": [
                {
                    "dsc": {str(k): v for k, v in sorted(entry["dsc"].items())},
                    "hd95": {str(k): v for k, v in sorted(entry["hd95"].items())},
                }
                for entry in self.per_image
            ],
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def format_table(self) -> str:
        classes = sorted(self.per_class_dsc)
        header = ["metric"] + [f"class {k}" for k in classes] + ["average"]
        rows = [
            ["DSC"] + [f"{self.per_class_dsc[k]:.4f}" for k in classes]
            + [f"{self.dsc_average:.4f}"],
            ["HD95"] + [f"{self.per_class_hd95[k]:.4f}" for k in classes]
            + [f"{self.hd95_average:.4f}"],
        ]
        widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
        lines = [
            "  ".join(cell.rjust(w) for cell, w in zip(row, widths))
            for row in [header] + rows
        ]
        return "\n".join(lines)


def evaluate(pred_masks, gt_masks, central_bias_width: int = 0) -> EvalReport:
    """Score predictions against ground truths.

    Per-class means run over the images whose ground truth contains the
    class; foreground classes absent from every ground truth are skipped.
    The optional central-bias filter is applied to predictions first.
    """
    if len(pred_masks) != len(gt_masks):
        raise InvalidInputError(
            f"{len(pred_masks)} predictions vs {len(gt_masks)} ground truths"
        )
    if not pred_masks:
        raise InvalidInputError("nothing to evaluate")
    K = gt_masks[0].num_classes
    for pm, gm in zip(pred_masks, gt_masks):
        if pm.num_classes != K or gm.num_classes != K:
            raise InvalidInputError("class counts disagree across the evaluation")

    filtered = [central_bias_filter(pm, central_bias_width) for pm in pred_masks]
    per_image = []
    sums_dsc = {k: [] for k in range(1, K)}
    sums_hd = {k: [] for k in range(1, K)}
    for pm, gm in zip(filtered, gt_masks):
        image_dsc, image_hd = {}, {}
        present = set(int(v) for v in np.unique(gm.classes))
        for k in range(1, K):
            if k not in present:
                continue
            d = dsc(pm, gm, k)
            h = hd95(pm, gm, k)
            image_dsc[k] = d
            image_hd[k] = h
            sums_dsc[k].append(d)
            sums_hd[k].append(h)
        per_image.append({"dsc": image_dsc, "hd95": image_hd})

    per_class_dsc = {k: float(np.mean(v)) for k, v in sums_dsc.items() if v}
    per_class_hd95 = {k: float(np.mean(v)) for k, v in sums_hd.items() if v}
    if not per_class_dsc:
        raise InvalidInputError("no foreground class appears in any ground truth")
    dsc_avg = float(np.mean(list(per_class_dsc.values())))
    hd_avg = float(np.mean(list(per_class_hd95.values())))
    return EvalReport(K, per_class_dsc, per_class_hd95, dsc_avg, hd_avg, tuple(per_image))
