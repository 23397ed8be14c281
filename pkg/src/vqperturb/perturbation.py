"""Quantised perturbation: transition kernel, perturbed marginal, KL radius and bounds.

Replacing codeword ``i`` keeps it with probability ``1 - eps`` and otherwise
moves to ``j != i`` with probability proportional to ``exp(-d(c_i, c_j))``.
Under a uniform prior over codewords the induced marginal ``Q`` stays strictly
positive for every ``eps`` in [0, 1], so the KL divergence from the prior is
always finite. Dropout, approximated by moment matching, has no such bound.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace

import numpy as np

from .codebook import Codebook, QuantizedMap, pairwise_distances
from .tensor import format_number


class PerturbationError(ValueError):
    pass


@dataclass(frozen=True)
class PerturbationKernel:
    K: int
    eps: float
    pi: np.ndarray
    dist: np.ndarray
    # row-normalised off-diagonal weights exp(-d_ij) / Z_i (zero diagonal)
    weights: np.ndarray | None = None


@dataclass(frozen=True)
class PerturbedMarginal:
    Q: np.ndarray
    eps: float
    # K * Q - 1, kept separately so that a uniform marginal gives KL = 0 exactly
    delta: np.ndarray | None = None


@dataclass(frozen=True)
class DropoutKL:
    p: float
    kl: float
    sigma0_sq: float = 1.0

    @property
    def approx_variance(self) -> float:
        """Variance of the moment-matched Gaussian, sigma0^2 (1 - p)."""
        return self.sigma0_sq * (1.0 - self.p)


def kernel_from_distances(dist: np.ndarray, eps: float) -> PerturbationKernel:
    dist = np.asarray(dist, dtype=np.float64)
    k = dist.shape[0]
    if not 0.0 <= eps <= 1.0:
        raise PerturbationError(f"eps must lie in [0, 1], got {eps}")
    if k < 2:
        raise PerturbationError("transition kernel needs K >= 2 (normaliser over j != i is empty)")
    logits = -dist.copy()
    np.fill_diagonal(logits, -np.inf)
    # max-shift before exponentiating; the diagonal is excluded from Z_i
    shift = logits.max(axis=1, keepdims=True)
    w = np.exp(logits - shift)
    w /= w.sum(axis=1, keepdims=True)
    np.fill_diagonal(w, 0.0)
    pi = eps * w
    np.fill_diagonal(pi, 1.0 - eps)
    return PerturbationKernel(k, float(eps), pi, dist, w)


def transition_kernel(cb: Codebook, eps: float, metric: str | None = None) -> PerturbationKernel:
    """Row-stochastic K x K kernel pi[i, j] over codeword replacements."""
    return kernel_from_distances(pairwise_distances(cb.codewords, metric or cb.metric), eps)


def perturbed_marginal(kernel: PerturbationKernel) -> PerturbedMarginal:
    """Q(c_j) = (1/K) sum_i pi[i, j] under the uniform prior.

    Written as Q_j = (1 + delta_j) / K with delta_j = eps * sum_{i != j} (w_ij - 1/(K-1)),
    which is algebraically the same and makes equidistant codebooks exactly uniform.
    """
    if kernel.weights is None:
        q = kernel.pi.mean(axis=0)
        return PerturbedMarginal(q, kernel.eps, kernel.K * q - 1.0)
    k = kernel.K
    dev = kernel.weights - 1.0 / (k - 1)
    np.fill_diagonal(dev, 0.0)
    delta = kernel.eps * dev.sum(axis=0)
    return PerturbedMarginal((1.0 + delta) / k, kernel.eps, delta)


def kl_qpm(marginal: PerturbedMarginal) -> float:
    """KL(P || Q) with P uniform: -(1/K) sum_j log(K Q_j)."""
    q = np.asarray(marginal.Q, dtype=np.float64)
    if np.any(q <= 0):
        j = int(np.argmin(q))
        raise PerturbationError(f"perturbed marginal has zero mass at codeword {j}")
    k = q.size
    delta = k * q - 1.0 if marginal.delta is None else marginal.delta
    return float(0.0 - np.mean(np.log1p(delta)))


def kl_qpm_from_codebook(cb: Codebook, eps: float) -> float:
    return kl_qpm(perturbed_marginal(transition_kernel(cb, eps)))


# -- runtime sampling -----------------------------------------------------------
def _splitmix64(x: np.ndarray) -> np.ndarray:
    # uint64 arithmetic wraps modulo 2**64, which is what the mixer relies on
    with np.errstate(over="ignore"):
        x = x + np.uint64(0x9E3779B97F4A7C15)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def keyed_uniforms(seed: int, n: int) -> np.ndarray:
    """Uniforms in [0, 1) keyed by (seed, position); independent of evaluation order."""
    key = _splitmix64(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))[0]
    bits = _splitmix64(np.arange(n, dtype=np.uint64) ^ key)
    with np.errstate(over="ignore"):
        bits = _splitmix64(bits + key)
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def sample_indices(indices: np.ndarray, kernel: PerturbationKernel, seed: int) -> np.ndarray:
    """Resample every index from its kernel row by inverse CDF."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= kernel.K):
        raise PerturbationError(f"indices out of range for K={kernel.K}")
    flat = idx.reshape(-1)
    u = keyed_uniforms(seed, flat.size)
    cdf = np.cumsum(kernel.pi, axis=1)
    cdf[:, -1] = np.inf
    rows = cdf[flat]
    # first column whose cumulative mass exceeds u; zero-mass columns are never chosen
    new = (rows <= u[:, None]).sum(axis=1)
    return new.reshape(idx.shape)


def sample_perturbed(qm: QuantizedMap, kernel: PerturbationKernel, seed: int,
                     codewords: np.ndarray) -> QuantizedMap:
    """Runtime perturbation: independent categorical draw per position."""
    if codewords.shape[0] != kernel.K:
        raise PerturbationError(f"kernel K={kernel.K} does not match codebook K={codewords.shape[0]}")
    new = sample_indices(qm.indices, kernel, seed)
    return replace(qm, indices=new, dequantized=codewords[new].reshape(qm.dequantized.shape))


# -- bounds ------------------------------------------------------------------------
def bounds_eps1(cb: Codebook, metric: str | None = None) -> tuple[float, float, float, float]:
    """Closed-form bounds on Q(.|eps=1): (lower, upper, Dmin, Dmax)."""
    if cb.K < 2:
        raise PerturbationError("bounds need K >= 2")
    d = pairwise_distances(cb.codewords, metric or cb.metric)
    off = d[~np.eye(cb.K, dtype=bool)]
    dmin, dmax = float(off.min()), float(off.max())
    if dmin <= 0:
        raise PerturbationError("bounds need strictly positive pairwise distances (duplicate codewords)")
    if not math.isfinite(dmax):
        raise PerturbationError("bounds need finite pairwise distances")
    return math.exp(dmin - dmax) / cb.K, math.exp(dmax - dmin) / cb.K, dmin, dmax


# -- dropout comparison ------------------------------------------------------------
def kl_dropout(p: float, sigma0_sq: float = 1.0) -> DropoutKL:
    """Moment-matched KL(N(0, s^2) || N(0, s^2 (1 - p))) = (p/(1-p) + log(1-p)) / 2."""
    if not 0.0 <= p < 1.0:
        raise PerturbationError(f"dropout rate must lie in [0, 1), got {p} (KL is unbounded at p = 1)")
    # with x = p/(1-p): p/(1-p) + ln(1-p) = x - ln(1+x); small x uses the series
    # sum_{n>=2} (-x)^n / n to avoid cancellation
    x = p / (1.0 - p)
    if x < 0.1:
        kl = 0.5 * sum((-x) ** n / n for n in range(2, 24))
    else:
        kl = 0.5 * (x - math.log1p(x))
    return DropoutKL(float(p), kl, sigma0_sq)


def compare_report(cb: Codebook, eps_grid, p_grid) -> list[tuple[str, float, float]]:
    rows = [("qpm", float(e), kl_qpm_from_codebook(cb, float(e))) for e in eps_grid]
    rows += [("dropout", float(p), kl_dropout(float(p)).kl) for p in p_grid]
    return rows


def rows_csv(rows, header=("kind", "param", "kl")) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([v if isinstance(v, str) else format_number(v) for v in row])
    return buf.getvalue()


def marginal_csv(marginal: PerturbedMarginal) -> str:
    return rows_csv(((str(j), q) for j, q in enumerate(marginal.Q)), header=("j", "Q"))


def kernel_dump(kernel: PerturbationKernel) -> str:
    return "\n".join(" ".join(format_number(v) for v in row) for row in kernel.pi) + "\n"
