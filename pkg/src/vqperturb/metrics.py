"""Segmentation metrics and paired significance testing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


class MetricError(ValueError):
    pass


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise MetricError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    for name, m in (("pred", pred), ("gt", gt)):
        if not np.all((m == 0) | (m == 1)):
            raise MetricError(f"{name} mask must be binary")
    return pred.astype(bool), gt.astype(bool)


def dice_jaccard(pred, gt) -> tuple[float, float]:
    a, b = _pair(pred, gt)
    inter = np.count_nonzero(a & b)
    sa, sb = np.count_nonzero(a), np.count_nonzero(b)
    if sa + sb == 0:
        return 1.0, 1.0
    union = sa + sb - inter
    return 2.0 * inter / (sa + sb), inter / union


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with a 4-neighbour outside the mask; the image border counts as outside."""
    cross = ndimage.generate_binary_structure(2, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=cross, border_value=0)


def directed_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Distance from each boundary pixel of ``src`` to the nearest boundary pixel of ``dst``."""
    bs, bd = boundary(src), boundary(dst)
    dt = ndimage.distance_transform_edt(~bd)
    return dt[bs]


def surface_metrics(pred, gt) -> tuple[float, float]:
    """(HD95, ASD) from pooled boundary distances in both directions."""
    a, b = _pair(pred, gt)
    if not a.any() or not b.any():
        raise MetricError("surface metrics are undefined for an empty mask")
    pooled = np.concatenate([directed_distances(a, b), directed_distances(b, a)])
    return float(np.percentile(pooled, 95)), float(pooled.mean())


def evaluate_masks(preds, gts) -> dict:
    """Per-sample metrics plus mean/std aggregates (the metrics.json layout).

    Surface metrics are skipped (None) for samples where either mask is empty.
    """
    per = []
    for i, (p, g) in enumerate(zip(preds, gts)):
        d, j = dice_jaccard(p, g)
        try:
            hd, asd = surface_metrics(p, g)
        except MetricError:
            hd, asd = None, None
        per.append({"id": i, "dice": d, "jaccard": j, "hd95": hd, "asd": asd})
    agg = {}
    for key in ("dice", "jaccard", "hd95", "asd"):
        vals = np.array([r[key] for r in per if r[key] is not None], dtype=np.float64)
        agg[key] = {"mean": float(vals.mean()) if vals.size else None,
                    "std": float(vals.std()) if vals.size else None,
                    "count": int(vals.size)}
    return {"per_sample": per, "aggregate": agg}


# -- statistics ------------------------------------------------------------------
def _betacf(a: float, b: float, x: float, max_iter: int = 300, tol: float = 1e-15) -> float:
    # Lentz continued fraction for the incomplete beta function
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_tailed(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))


@dataclass
class TTestResult:
    t: float
    p: float
    df: int
    degenerate: bool = False


def paired_t_test(scores_a, scores_b) -> TTestResult:
    """Two-tailed paired t-test on ``a - b``.

    Constant differences give t = +/-inf (0 when the mean is also 0 is reported
    as t = 0, p = 1) and ``degenerate=True``.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise MetricError(f"paired samples must be equal-length vectors, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise MetricError("paired t-test needs at least 2 pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0 or np.all(d == d[0]):
        if mean == 0.0:
            return TTestResult(0.0, 1.0, n - 1, True)
        return TTestResult(math.copysign(math.inf, mean), 0.0, n - 1, True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(float(t), student_t_two_tailed(t, n - 1), n - 1)
