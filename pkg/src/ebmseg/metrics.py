"""Segmentation metrics: maximum F-measure, MAE, and a confidence-quality
diagnostic correlating per-pixel uncertainty with pseudo-label error.

Precision/recall are pooled over the whole dataset (not averaged per image)
at 256 binarization thresholds mirroring 8-bit quantization; this choice is
recorded in the emitted report.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

N_THRESHOLDS = 256
DEFAULT_XI_SQ = 0.3


class MetricError(Exception):
    pass


@dataclass(frozen=True)
class EvalReport:
    model_tag: str
    f_max: float
    mae: float
    confidence_quality: float
    seed: int
    xi_sq: float = DEFAULT_XI_SQ
    curve: tuple = field(default=(), repr=False)  # 256 (precision, recall)


def _stack(preds, gts) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64).ravel()
    t = np.asarray(gts, dtype=np.float64).ravel()
    if p.size == 0:
        raise MetricError("empty evaluation set")
    if p.size != t.size:
        raise MetricError("prediction/ground-truth size mismatch")
    return p, t


def mae(preds, gts) -> float:
    p, t = _stack(preds, gts)
    return float(np.mean(np.abs(p - t)))


def f_max(preds, gts, xi_sq: float = DEFAULT_XI_SQ) -> tuple[float, list]:
    """Max over 256 thresholds of the pooled xi^2-weighted F-measure.

    Returns (f_max, curve) with curve a list of 256 (precision, recall)
    pairs for thresholds k/255, k = 0..255.
    """
    if not xi_sq > 0:
        raise MetricError("xi_sq must be positive")
    p, t = _stack(preds, gts)
    fg = t >= 0.5
    n_fg = int(fg.sum())
    if n_fg == 0:
        raise MetricError("ground truth has no foreground pixels")
    # histogram of prediction values per class; cumulative suffix sums give
    # TP / (TP + FP) at every threshold without 256 full passes
    edges = np.arange(1, N_THRESHOLDS) / 255.0
    bins_all = np.searchsorted(edges, p, side="right")
    fg_hist = np.bincount(bins_all[fg], minlength=N_THRESHOLDS)
    all_hist = np.bincount(bins_all, minlength=N_THRESHOLDS)
    tp = np.cumsum(fg_hist[::-1])[::-1].astype(np.float64)     # pred >= tau
    pos = np.cumsum(all_hist[::-1])[::-1].astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(pos > 0, tp / pos, 0.0)
        recall = tp / n_fg
        denom = xi_sq * precision + recall
        f = np.where(denom > 0,
                     (1.0 + xi_sq) * precision * recall / np.maximum(denom, 1e-300),
                     0.0)
    curve = list(zip(precision.tolist(), recall.tolist()))
    return float(f.max()), curve


def confidence_quality(uncertainty, pseudo, gts) -> float:
    """Pearson correlation between uncertainty and pseudo-label error."""
    u = np.asarray(uncertainty, dtype=np.float64).ravel()
    err = np.abs(np.asarray(pseudo, dtype=np.float64).ravel()
                 - np.asarray(gts, dtype=np.float64).ravel())
    if u.size != err.size or u.size == 0:
        raise MetricError("uncertainty/error size mismatch")
    if np.std(u) == 0.0 or np.std(err) == 0.0:
        raise MetricError("zero-variance input to confidence_quality")
    return float(np.corrcoef(u, err)[0, 1])


def report_to_csv_rows(report: EvalReport) -> list:
    return [
        (report.model_tag, "f_max", f"{report.f_max:.17g}"),
        (report.model_tag, "mae", f"{report.mae:.17g}"),
        (report.model_tag, "confidence_quality",
         f"{report.confidence_quality:.17g}"),
    ]


def report_to_dict(report: EvalReport) -> dict:
    """Lossless plain-dict form; floats use repr round-tripping."""
    return {
        "model_tag": report.model_tag,
        "f_max": report.f_max,
        "mae": report.mae,
        "confidence_quality": report.confidence_quality,
        "seed": report.seed,
        "xi_sq": report.xi_sq,
        "curve": [list(pair) for pair in report.curve],
    }


def report_from_dict(d: dict) -> EvalReport:
    return EvalReport(
        model_tag=str(d["model_tag"]),
        f_max=float(d["f_max"]),
        mae=float(d["mae"]),
        confidence_quality=float(d["confidence_quality"]),
        seed=int(d["seed"]),
        xi_sq=float(d["xi_sq"]),
        curve=tuple((float(p), float(r)) for p, r in d["curve"]),
    )
