"""Classification metrics and Activation Precision.

Activation Precision asks how much of the high-attribution region lands on
pixels a ground-truth mask marks relevant. The original variant counts
thresholded pixels; the modified variant weights them by the attribution
values so near-threshold mass is not flattened to 0/1.
"""

from __future__ import annotations

import io
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = ["EvalResult", "confusion_matrix", "f1", "evaluate", "activation_precision"]


@dataclass
class EvalResult:
    precision: np.ndarray       # (v,)
    recall: np.ndarray          # (v,)
    class_f1: np.ndarray        # (v,)
    macro_f1: float
    micro_f1: float
    confusion: np.ndarray       # (v, v), rows = true label, cols = prediction
    prototype_ap: np.ndarray | None = field(default=None)

    def to_dict(self) -> dict:
        d = {
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "class_f1": self.class_f1.tolist(),
            "macro_f1": self.macro_f1,
            "micro_f1": self.micro_f1,
            "confusion": self.confusion.tolist(),
        }
        if self.prototype_ap is not None:
            d["prototype_ap"] = self.prototype_ap.tolist()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def confusion_csv(self) -> str:
        buf = io.StringIO()
        v = self.confusion.shape[0]
        buf.write("true\\pred," + ",".join(str(c) for c in range(v)) + "\n")
        for r in range(v):
            buf.write(f"{r}," + ",".join(str(int(x)) for x in self.confusion[r]) + "\n")
        return buf.getvalue()


def confusion_matrix(predictions, labels, v: int) -> np.ndarray:
    preds = np.asarray(predictions, dtype=np.int64)
    labs = np.asarray(labels, dtype=np.int64)
    if preds.shape != labs.shape:
        raise ValueError(f"predictions {preds.shape} vs labels {labs.shape}")
    m = np.zeros((v, v), dtype=np.int64)
    np.add.at(m, (labs, preds), 1)
    return m


def _per_class_prf(confusion: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    tp = np.diag(confusion).astype(np.float64)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        prec = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        rec = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f = np.where(prec + rec > 0, 2 * prec * rec / (prec + rec), 0.0)
    return prec, rec, f


def f1(predictions, labels, mode: str = "macro", v: int | None = None) -> float:
    """Macro: unweighted mean of per-class F1. Micro: pooled counts, which
    for single-label classification equals accuracy."""
    labs = np.asarray(labels, dtype=np.int64)
    preds = np.asarray(predictions, dtype=np.int64)
    if v is None:
        v = int(max(labs.max(), preds.max())) + 1
    m = confusion_matrix(preds, labs, v)
    if mode == "macro":
        return float(_per_class_prf(m)[2].mean())
    if mode == "micro":
        tp = np.diag(m).sum()
        return float(tp / m.sum()) if m.sum() else 0.0
    raise ValueError(f"unknown mode {mode!r}")


def evaluate(predictions, labels, v: int, prototype_ap: np.ndarray | None = None) -> EvalResult:
    m = confusion_matrix(predictions, labels, v)
    prec, rec, cf1 = _per_class_prf(m)
    micro = float(np.diag(m).sum() / m.sum()) if m.sum() else 0.0
    return EvalResult(precision=prec, recall=rec, class_f1=cf1,
                      macro_f1=float(cf1.mean()), micro_f1=micro,
                      confusion=m, prototype_ap=prototype_ap)


def activation_precision(maps, masks, tau: float = 5.0, variant: str = "original") -> float:
    """Mean over examples of the fraction of top-tau-percent attribution that
    falls on masked (relevant) pixels.

    T thresholds each map at its (100-tau) linear-interpolation percentile,
    ties included. Examples whose thresholded region is empty or carries zero
    attribution mass are skipped with a warning.
    """
    if not 0 < tau <= 100:
        raise ValueError(f"tau must be in (0, 100], got {tau}")
    if variant not in ("original", "modified"):
        raise ValueError(f"unknown variant {variant!r}")
    vals = []
    for i, (amap, mask) in enumerate(zip(maps, masks)):
        amap = np.asarray(amap, dtype=np.float64)
        m = np.asarray(mask, dtype=np.float64)
        if amap.shape != m.shape:
            raise ValueError(f"map {i}: shape {amap.shape} vs mask {m.shape}")
        thr = np.percentile(amap, 100.0 - tau, method="linear")
        t = amap >= thr
        denom = t.sum() if variant == "original" else (amap * t).sum()
        if denom <= 0:
            warnings.warn(f"activation_precision: example {i} has an empty "
                          f"thresholded region, skipping")
            continue
        if variant == "original":
            vals.append(float((m * t).sum() / denom))
        else:
            vals.append(float((m * t * amap).sum() / denom))
    if not vals:
        warnings.warn("activation_precision: no example had a usable region")
        return float("nan")
    return float(np.mean(vals))
