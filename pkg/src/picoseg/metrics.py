"""Segmentation quality and efficiency metrics.

Conventions fixed here (they differ across toolkits, so they are the
normative definitions for this project):

* IoU of two empty masks is 1.0; exactly one empty mask gives 0.0.
* Binary masks come from sigmoid(logits) > 0.5.
* mAP is computed for the one-prediction-per-prompt regime: each prompt
  contributes one (score, iou) pair, score = mean sigmoid probability
  inside the predicted mask (0.0 for an empty prediction).  For each
  threshold t in {0.50, 0.55, ..., 0.95}, predictions are sorted by
  descending score (stable), a prediction is a true positive iff
  iou >= t, the positive count equals the number of prompts, and AP_t
  is the area under the all-point-interpolated precision-recall curve.
  mAP is the mean of the ten AP_t values.
* Efficiency: MACs/cycle = macs / (latency_s * clock_hz); utilization
  divides by the MAC-array width (2304 for the published sensor DSP).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError
from .tensor import Tensor, stable_sigmoid

MAP_THRESHOLDS = tuple(0.50 + 0.05 * i for i in range(10))
MAC_ARRAY_WIDTH = 2304


def binarize(logits: Tensor) -> Tensor:
    """Logits to a {0,1} float mask via sigmoid threshold 0.5."""
    return Tensor((stable_sigmoid(logits.data) > 0.5).astype(logits.data.dtype))


def mask_score(prob: np.ndarray, pred: np.ndarray) -> float:
    """Mean probability inside the predicted mask; 0.0 if it is empty."""
    sel = pred > 0
    if not sel.any():
        return 0.0
    return float(prob[sel].mean())


def iou(pred: Tensor, gt: Tensor) -> float:
    if pred.shape != gt.shape:
        raise ShapeError(f"iou: shape mismatch {pred.shape} vs {gt.shape}")
    p = pred.data != 0
    g = gt.data != 0
    inter = int(np.logical_and(p, g).sum())
    union = int(np.logical_or(p, g).sum())
    if union == 0:
        return 1.0
    return inter / union


def miou(per_instance_ious: list) -> float:
    if len(per_instance_ious) == 0:
        raise DomainError("miou: empty instance list")
    return float(np.mean(np.asarray(per_instance_ious, dtype=np.float64)))


def average_precision(preds: list, tau: float) -> float:
    """AP at one IoU threshold with all-point interpolation.

    ``preds`` is a list of (score, iou) pairs, one per prompt; total
    positives equals len(preds).
    """
    if len(preds) == 0:
        raise DomainError("average_precision: empty prediction list")
    for s, _ in preds:
        if not np.isfinite(s):
            raise DomainError(f"average_precision: non-finite score {s}")
    order = sorted(range(len(preds)), key=lambda i: -preds[i][0])
    n = len(preds)
    tp = 0
    precision = np.zeros(n)
    recall = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    for rank, i in enumerate(order):
        if preds[i][1] >= tau:
            tp += 1
            hit[rank] = True
        precision[rank] = tp / (rank + 1)
        recall[rank] = tp / n
    # interpolated precision: running max from the right
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for rank in range(n):
        if hit[rank]:
            ap += (recall[rank] - prev_r) * interp[rank]
            prev_r = recall[rank]
    return float(ap)


def map_single_prompt(preds: list) -> float:
    """Mean AP over the 10 IoU thresholds 0.50:0.05:0.95."""
    if len(preds) == 0:
        raise DomainError("map_single_prompt: empty prediction list")
    return float(np.mean([average_precision(preds, t) for t in MAP_THRESHOLDS]))


def efficiency_report(macs: int, latency_s: float, clock_hz: float) -> float:
    """Achieved MACs per hardware clock cycle."""
    if macs <= 0 or latency_s <= 0 or clock_hz <= 0:
        raise DomainError(
            f"efficiency_report needs positive inputs, got macs={macs} "
            f"latency_s={latency_s} clock_hz={clock_hz}"
        )
    return macs / (latency_s * clock_hz)


def utilization(macs_per_cycle: float, mac_units: int = MAC_ARRAY_WIDTH) -> float:
    """Fraction of the MAC array kept busy."""
    if macs_per_cycle <= 0 or mac_units <= 0:
        raise DomainError("utilization needs positive inputs")
    return macs_per_cycle / mac_units


@dataclass(frozen=True)
class MetricsReport:
    miou: float
    map: float
    params: int
    macs: int
    model_bytes: int
    macs_per_cycle: float | None = None

    def __post_init__(self):
        if not (0.0 <= self.miou <= 1.0 and 0.0 <= self.map <= 1.0):
            raise DomainError(f"miou/map must lie in [0,1], got {self.miou}/{self.map}")
        if self.macs_per_cycle is not None and self.macs_per_cycle <= 0:
            raise DomainError(f"macs_per_cycle must be positive, got {self.macs_per_cycle}")

    FIELDS = ("miou", "map", "params", "macs", "model_bytes", "macs_per_cycle")

    def kv_lines(self) -> str:
        out = []
        for k in self.FIELDS:
            v = getattr(self, k)
            if v is None:
                continue
            out.append(f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}")
        return "\n".join(out) + "\n"

    def csv_line(self) -> str:
        """One comma-separated line in FIELDS order; '' for absent values."""
        vals = []
        for k in self.FIELDS:
            v = getattr(self, k)
            vals.append("" if v is None else (repr(v) if isinstance(v, float) else str(v)))
        return ",".join(vals) + "\n"
