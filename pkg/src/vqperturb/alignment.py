"""Post-VQ feature adapter and patch-wise contrastive alignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


def pfa_project(vq_features: Tensor, weight: Tensor, target_hw: tuple[int, int],
                bias: Tensor | None = None) -> Tensor:
    """Nearest resize of an NCHW post-VQ map to ``target_hw`` then a 1x1 convolution.

    ``weight`` has shape (C', D, 1, 1).
    """
    if weight.ndim != 4 or weight.shape[2:] != (1, 1):
        raise T.ShapeError(f"pfa_project: weight must be (C', D, 1, 1), got {weight.shape}")
    resized = T.resize_nearest(vq_features, target_hw)
    return T.conv2d(resized, weight, bias)


def _as_patches(fmap: Tensor) -> Tensor:
    # (C, H, W) -> (H*W, C)
    c = fmap.shape[0]
    return T.transpose(T.reshape(fmap, (c, -1)), (1, 0))


def contrastive_align_loss(f_pfa: Tensor, f_fm, tau: float = 0.1) -> Tensor:
    """InfoNCE over patch positions; same-position pairs are positives.

    Both maps are (C, H', W') or a batch (N, C, H', W'); the batch loss is the
    mean of the per-image losses. Similarity is cosine similarity.
    """
    f_fm = T.as_tensor(f_fm)
    if f_pfa.shape != f_fm.shape:
        raise T.ShapeError(f"contrastive_align_loss: shape mismatch {f_pfa.shape} vs {f_fm.shape}")
    if tau <= 0:
        raise ValueError(f"contrastive_align_loss: tau must be positive, got {tau}")
    if f_pfa.ndim == 4:
        n = f_pfa.shape[0]
        losses = [contrastive_align_loss(T.select(f_pfa, i), T.select(f_fm, i), tau)
                  for i in range(n)]
        total = losses[0]
        for extra in losses[1:]:
            total = total + extra
        return total * (1.0 / n)
    if f_pfa.ndim != 3:
        raise T.ShapeError(f"contrastive_align_loss: expected (C, H, W), got {f_pfa.shape}")
    a = _as_patches(f_pfa)
    b = _as_patches(f_fm)
    for name, m in (("f_pfa", a.data), ("f_fm", b.data)):
        norms = np.linalg.norm(m, axis=1)
        if np.any(norms == 0):
            pos = int(np.argmin(norms))
            w = f_pfa.shape[2]
            raise ValueError(f"contrastive_align_loss: zero-norm patch in {name} at "
                             f"position ({pos // w}, {pos % w})")
    sim = T.matmul(T.normalize(a, axis=1), T.transpose(T.normalize(b, axis=1), (1, 0)))
    logp = T.log_softmax(sim * (1.0 / tau), axis=1)
    p = a.shape[0]
    return -T.tsum(T.mul(logp, Tensor(np.eye(p)))) * (1.0 / p)


@dataclass
class FrozenExtractor:
    """Fixed random two-layer conv net standing in for a pretrained backbone.

    Maps an (N, 1, H, W) image batch to (N, C', H/8, W/8) patch features.
    """

    seed: int = 1234
    in_channels: int = 1
    hidden: int = 16
    out_channels: int = 16

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self.w1 = rng.normal(0, np.sqrt(2.0 / (self.in_channels * 16)),
                             (self.hidden, self.in_channels, 4, 4))
        self.b1 = rng.normal(0, 0.1, self.hidden)
        self.w2 = rng.normal(0, np.sqrt(2.0 / (self.hidden * 9)), (self.out_channels, self.hidden, 3, 3))
        self.b2 = rng.normal(0, 0.1, self.out_channels)

    def patch_grid(self, h: int, w: int) -> tuple[int, int]:
        return h // 8, w // 8

    def __call__(self, images) -> np.ndarray:
        return frozen_extract(images, self)


def frozen_extract(images, fe: FrozenExtractor) -> np.ndarray:
    """Deterministic features; weights are plain arrays so no gradient can reach them."""
    x = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != fe.in_channels:
        raise T.ShapeError(f"frozen_extract: expected (N, {fe.in_channels}, H, W), got {x.shape}")
    if x.shape[2] % 8 or x.shape[3] % 8:
        raise T.ShapeError(f"frozen_extract: spatial dims must be multiples of 8, got {x.shape[2:]}")
    with T.no_grad():
        h = T.relu(T.conv2d(Tensor(x), Tensor(fe.w1), Tensor(fe.b1), stride=4))
        out = T.conv2d(h, Tensor(fe.w2), Tensor(fe.b2), stride=2, padding=1)
    return out.data
