"""Codebook: initialisation, nearest-codeword quantisation, VQ losses, utilisation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

METRICS = ("euclidean", "squared_euclidean")


class CodebookError(ValueError):
    pass


def pairwise_distances(codewords: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    """Symmetric K x K distance matrix with an exact zero diagonal."""
    if metric not in METRICS:
        raise CodebookError(f"unknown metric {metric!r}; expected one of {METRICS}")
    c = np.asarray(codewords, dtype=np.float64)
    diff = c[:, None, :] - c[None, :, :]
    d = np.einsum("ijk,ijk->ij", diff, diff)
    if metric == "euclidean":
        d = np.sqrt(d)
    np.fill_diagonal(d, 0.0)
    return d


@dataclass
class Codebook:
    codewords: np.ndarray
    metric: str = "euclidean"

    def __post_init__(self):
        self.codewords = np.array(self.codewords, dtype=np.float64)
        if self.codewords.ndim != 2:
            raise CodebookError(f"codewords must be K x D, got shape {self.codewords.shape}")
        if self.metric not in METRICS:
            raise CodebookError(f"unknown metric {self.metric!r}")
        self.validate()

    @property
    def K(self) -> int:
        return self.codewords.shape[0]

    @property
    def D(self) -> int:
        return self.codewords.shape[1]

    def validate(self) -> None:
        if not np.all(np.isfinite(self.codewords)):
            raise CodebookError("codebook contains non-finite entries")
        if self.K >= 2:
            d = pairwise_distances(self.codewords, "squared_euclidean")
            np.fill_diagonal(d, np.inf)
            if d.min() <= 0.0:
                i, j = np.unravel_index(np.argmin(d), d.shape)
                raise CodebookError(f"duplicate codewords at indices {i} and {j}")

    def distances(self) -> np.ndarray:
        return pairwise_distances(self.codewords, self.metric)

    def dumps(self) -> str:
        lines = [f"{self.K} {self.D} {self.metric}"]
        lines += [" ".join(T.format_number(v) for v in row) for row in self.codewords]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> Codebook:
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        if not lines:
            raise CodebookError("codebook file is empty")
        head = lines[0].split()
        if len(head) != 3:
            raise CodebookError(f"codebook header must be 'K D metric', got {lines[0]!r}")
        try:
            k, d = int(head[0]), int(head[1])
            rows = [[float(v) for v in ln.split()] for ln in lines[1:]]
        except ValueError as e:
            raise CodebookError(f"malformed codebook value ({e})") from e
        if len(rows) != k or any(len(r) != d for r in rows):
            raise CodebookError(f"codebook body does not match header K={k} D={d}")
        return cls(np.array(rows, dtype=np.float64).reshape(k, d), head[2])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> Codebook:
        with open(path) as fh:
            return cls.loads(fh.read())


def _kmeans(sample: np.ndarray, k: int, rng: np.random.Generator, iters: int = 50) -> np.ndarray:
    # k-means++ seeding never picks a point at zero distance while others remain
    n = sample.shape[0]
    centers = [sample[rng.integers(n)]]
    d2 = ((sample - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise CodebookError("k-means: sample has fewer distinct points than K")
        nxt = sample[rng.choice(n, p=d2 / total)]
        centers.append(nxt)
        d2 = np.minimum(d2, ((sample - nxt) ** 2).sum(axis=1))
    c = np.array(centers)
    for _ in range(iters):
        assign = nearest_indices(sample, c)
        new = c.copy()
        for j in range(k):
            members = sample[assign == j]
            if len(members):
                new[j] = members.mean(axis=0)
        if np.array_equal(new, c):
            break
        c = new
    return c


def init_codebook(K: int, D: int, scheme: str = "uniform_random", seed: int = 0,
                  sample: np.ndarray | None = None, metric: str = "euclidean",
                  scale: float = 1.0) -> Codebook:
    """Build a valid codebook; deterministic given ``seed``.

    ``uniform_random`` draws entries from U(-scale, scale). ``kmeans_on_sample``
    runs Lloyd iterations from a k-means++ seeding on ``sample`` (N x D, N >= K).
    """
    if K < 2 or D < 1:
        raise CodebookError(f"need K >= 2 and D >= 1, got K={K}, D={D}")
    rng = np.random.default_rng(seed)
    if scheme == "uniform_random":
        cw = rng.uniform(-scale, scale, size=(K, D))
    elif scheme == "kmeans_on_sample":
        if sample is None:
            raise CodebookError("kmeans_on_sample requires a sample")
        sample = np.asarray(sample, dtype=np.float64).reshape(-1, D)
        if sample.shape[0] < K:
            raise CodebookError(f"kmeans_on_sample needs >= {K} vectors, got {sample.shape[0]}")
        cw = _kmeans(sample, K, rng)
    else:
        raise CodebookError(f"unknown init scheme {scheme!r}")
    for _ in range(3):
        try:
            return Codebook(cw, metric)
        except CodebookError:
            cw = cw + rng.normal(scale=1e-6 * max(scale, 1.0), size=cw.shape)
    return Codebook(cw, metric)


def nearest_indices(z: np.ndarray, codewords: np.ndarray) -> np.ndarray:
    """Index of the nearest codeword (squared euclidean) per row; ties -> lowest index."""
    diff = z[:, None, :] - codewords[None, :, :]
    d = np.einsum("nkd,nkd->nk", diff, diff)
    # argmin returns the first minimum, which is the lowest index
    return np.argmin(d, axis=1)


@dataclass
class QuantizedMap:
    indices: np.ndarray
    dequantized: np.ndarray
    source: np.ndarray

    @property
    def spatial_shape(self) -> tuple[int, ...]:
        return self.indices.shape


def quantize(z, cb: Codebook) -> QuantizedMap:
    """Snap each feature vector (last axis) of ``z`` to its nearest codeword."""
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    if z.shape[-1] != cb.D:
        raise CodebookError(f"quantize: feature dimension {z.shape[-1]} != codebook D {cb.D}")
    flat = z.reshape(-1, cb.D)
    idx = nearest_indices(flat, cb.codewords)
    spatial = z.shape[:-1]
    return QuantizedMap(idx.reshape(spatial), cb.codewords[idx].reshape(z.shape), z.copy())


def ste_dequantize(z: Tensor, cb: Codebook, indices: np.ndarray | None = None) -> Tensor:
    """Quantised values in the forward pass, identity Jacobian to ``z`` in the backward pass."""
    if z.shape[-1] != cb.D:
        raise CodebookError(f"ste_dequantize: feature dimension {z.shape[-1]} != codebook D {cb.D}")
    if indices is None:
        indices = quantize(z.data, cb).indices
    return T.straight_through(z, cb.codewords[indices])


def vq_losses(z: Tensor, codewords: Tensor, indices: np.ndarray, beta: float = 0.25):
    """Codebook and commitment terms.

    ``z`` is (..., D) and ``codewords`` the K x D learnable table. The codebook
    term only reaches the codewords, the commitment term only reaches ``z``.
    """
    d = z.shape[-1]
    zf = T.reshape(z, (-1, d))
    n = zf.shape[0]
    q = T.gather_rows(codewords, np.asarray(indices).reshape(-1))
    codebook_loss = T.tsum(T.square(T.sub(q, zf.detach()))) * (1.0 / n)
    commitment = T.tsum(T.square(T.sub(zf, q.detach()))) * (beta / n)
    return codebook_loss, commitment


def entropy_regularizer(z, codewords, tau_q: float) -> Tensor:
    """Mean per-sample assignment entropy minus entropy of the mean assignment.

    Soft assignments are softmax(-||z_n - c_j||^2 / tau_q). Accepts arrays or tensors.
    """
    if tau_q <= 0:
        raise ValueError(f"entropy_regularizer: tau_q must be positive, got {tau_q}")
    z = T.as_tensor(z)
    c = T.as_tensor(codewords)
    zf = T.reshape(z, (-1, c.shape[1]))
    n = zf.shape[0]
    logits = T.pairwise_sq_dist(zf, c) * (-1.0 / tau_q)
    logp = T.log_softmax(logits, axis=1)
    p = T.exp(logp)
    per_sample = -T.tsum(T.mul(p, logp)) * (1.0 / n)
    avg = T.mean(p, axis=0)
    # clamp guards log(0) for codewords no sample can reach
    safe = np.maximum(avg.data, 1e-300)
    log_avg = T.log(T.add(avg, Tensor(safe - avg.data)))
    batch = -T.tsum(T.mul(avg, log_avg))
    return per_sample - batch


@dataclass
class UtilizationRecord:
    step: int
    histogram: np.ndarray
    utilization: float
    entropy: float = field(default=0.0)


def _histogram_entropy(hist: np.ndarray) -> float:
    total = hist.sum()
    if total == 0:
        return 0.0
    p = hist[hist > 0] / total
    return float(-(p * np.log(p)).sum())


def utilization(history, K: int, cumulative: bool = False, steps=None) -> list[UtilizationRecord]:
    """Per-step codeword histograms and active fraction.

    ``history`` holds QuantizedMaps or raw index arrays. With ``cumulative`` the
    histograms accumulate across steps, which makes utilisation non-decreasing.
    """
    records = []
    running = np.zeros(K, dtype=np.int64)
    for n, item in enumerate(history):
        idx = item.indices if isinstance(item, QuantizedMap) else np.asarray(item)
        hist = np.bincount(idx.reshape(-1).astype(np.int64), minlength=K)
        if hist.size > K:
            raise CodebookError(f"index {idx.max()} out of range for K={K}")
        if cumulative:
            running = running + hist
            hist = running.copy()
        step = n if steps is None else steps[n]
        records.append(UtilizationRecord(step, hist, np.count_nonzero(hist) / K,
                                         _histogram_entropy(hist)))
    return records


def utilization_csv(records: list[UtilizationRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "utilization", "entropy_of_histogram"])
    for r in records:
        w.writerow([r.step, T.format_number(r.utilization), T.format_number(r.entropy)])
    return buf.getvalue()


def pca_export(cb: Codebook, active_mask=None) -> np.ndarray:
    """Project codewords on their top-2 principal axes.

    Returns a K x 3 array of (x, y, active). Each axis is signed so that its
    largest-magnitude loading is positive; a missing second axis is zero.
    """
    if cb.K < 2:
        raise CodebookError("pca_export needs K >= 2")
    if active_mask is None:
        active_mask = np.ones(cb.K, dtype=bool)
    active_mask = np.asarray(active_mask, dtype=bool)
    if active_mask.shape != (cb.K,):
        raise CodebookError(f"active mask must have length {cb.K}")
    x = cb.codewords - cb.codewords.mean(axis=0)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    comps = vt[:2]
    for r in range(comps.shape[0]):
        if comps[r, np.argmax(np.abs(comps[r]))] < 0:
            comps[r] = -comps[r]
    proj = x @ comps.T
    if proj.shape[1] < 2:
        proj = np.hstack([proj, np.zeros((cb.K, 2 - proj.shape[1]))])
    return np.column_stack([proj, active_mask.astype(np.float64)])
