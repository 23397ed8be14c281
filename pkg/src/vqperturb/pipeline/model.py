"""Encoder -> VQ -> (image decoder, segmentation decoder) network on the autodiff engine."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..alignment import pfa_project
from ..codebook import Codebook, QuantizedMap, init_codebook, nearest_indices
from ..perturbation import PerturbationKernel, keyed_uniforms, sample_indices
from ..tensor import Tensor
from .config import TrainConfig

ENCODER = (("enc1", 2, 1), ("enc2", 2, 1), ("enc3", 1, 1))  # (name, stride, padding)
DECODER = (("1", 2, 1, 4), ("2", 2, 1, 4), ("3", 1, 1, 3))  # (suffix, stride, padding, kernel)


@dataclass
class Perturbation:
    """Runtime perturbation applied to post-VQ features: QPM kernel or feature dropout."""

    kind: str  # "qpm" or "dropout"
    seed: int
    kernel: PerturbationKernel | None = None
    p: float = 0.0


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)


def init_params(cfg: TrainConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    c1, c2, d = cfg.width1, cfg.width2, cfg.D
    p = {
        "enc1.w": _he(rng, (c1, 1, 3, 3), 9), "enc1.b": np.zeros(c1),
        "enc2.w": _he(rng, (c2, c1, 3, 3), 9 * c1), "enc2.b": np.zeros(c2),
        "enc3.w": _he(rng, (d, c2, 3, 3), 9 * c2), "enc3.b": np.zeros(d),
    }
    for head, out in (("img", 1), ("seg", 2)):
        # transposed-conv weights are (in, out, kh, kw)
        p[f"{head}1.w"] = _he(rng, (d, c2, 4, 4), 4 * d)
        p[f"{head}1.b"] = np.zeros(c2)
        p[f"{head}2.w"] = _he(rng, (c2, c1, 4, 4), 4 * c2)
        p[f"{head}2.b"] = np.zeros(c1)
        p[f"{head}3.w"] = _he(rng, (c1, out, 3, 3), 9 * c1) * 0.5
        p[f"{head}3.b"] = np.zeros(out)
    p["pfa.w"] = _he(rng, (cfg.fm_channels, d, 1, 1), d)
    p["pfa.b"] = np.zeros(cfg.fm_channels)
    p["codebook"] = init_codebook(cfg.K, d, "uniform_random", seed=seed + 1).codewords
    return p


class SegModel:
    """Student or teacher network. Parameters live in ``params`` (name -> Tensor)."""

    def __init__(self, params: dict[str, np.ndarray], metric: str = "euclidean",
                 trainable: bool = True):
        self.params = {k: Tensor(v, requires_grad=trainable) for k, v in params.items()}
        self.metric = metric
        # identity quantiser for gradient verification: q(z) = z, perturbation becomes
        # the constant codeword offset c[new] - c[old]
        self.bypass_vq = False

    @classmethod
    def create(cls, cfg: TrainConfig, seed: int | None = None) -> SegModel:
        return cls(init_params(cfg, cfg.seed if seed is None else seed), cfg.kernel_metric)

    def copy(self, trainable: bool = False) -> SegModel:
        twin = SegModel({k: v.data for k, v in self.params.items()}, self.metric, trainable)
        twin.bypass_vq = self.bypass_vq
        return twin

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    @property
    def codebook(self) -> Codebook:
        return Codebook(self.params["codebook"].data, self.metric)

    # -- network pieces -------------------------------------------------------
    def encode(self, x: Tensor) -> Tensor:
        h = x
        for i, (name, stride, pad) in enumerate(ENCODER):
            h = T.conv2d(h, self.params[f"{name}.w"], self.params[f"{name}.b"], stride, pad)
            if i < len(ENCODER) - 1:
                h = T.relu(h)
        return h

    def quantize(self, z: Tensor, indices: np.ndarray | None = None):
        """STE-quantise an (N, D, h, w) map.

        Returns (q in NCHW, z as (M, D) rows, indices (N, h, w)). Passing
        ``indices`` substitutes codewords (used for the perturbed stream).
        """
        n, d, h, w = z.shape
        rows = T.reshape(T.transpose(z, (0, 2, 3, 1)), (-1, d))
        if indices is None:
            indices = nearest_indices(rows.data, self.params["codebook"].data).reshape(n, h, w)
        if self.bypass_vq:
            return z, rows, indices
        return self.quantize_rows(rows, indices, z.shape), rows, indices

    def _decode(self, q: Tensor, head: str) -> Tensor:
        h = q
        for i, (suffix, stride, pad, _) in enumerate(DECODER):
            h = T.conv_transpose2d(h, self.params[f"{head}{suffix}.w"],
                                   self.params[f"{head}{suffix}.b"], stride, pad)
            if i < len(DECODER) - 1:
                h = T.relu(h)
        return h

    def decode_image(self, q: Tensor) -> Tensor:
        return self._decode(q, "img")

    def decode_seg(self, q: Tensor) -> Tensor:
        """Per-pixel class logits (N, 2, H, W)."""
        return self._decode(q, "seg")

    def perturb(self, q: Tensor, rows: Tensor, indices: np.ndarray, pert: Perturbation) -> Tensor:
        if pert.kind == "qpm":
            new = sample_indices(indices, pert.kernel, pert.seed)
            if self.bypass_vq:
                cw = self.params["codebook"].data
                offset = (cw[new] - cw[indices]).reshape(q.shape[0], *q.shape[2:], q.shape[1])
                return T.add(q, Tensor(np.transpose(offset, (0, 3, 1, 2))))
            return self.quantize_rows(rows, new, q.shape)
        if pert.kind == "dropout":
            if pert.p == 0.0:
                return q
            keep = keyed_uniforms(pert.seed, q.size).reshape(q.shape) >= pert.p
            return T.mul(q, Tensor(keep / (1.0 - pert.p)))
        raise ValueError(f"unknown perturbation kind {pert.kind!r}")

    def quantize_rows(self, rows: Tensor, indices: np.ndarray, nchw) -> Tensor:
        n, d, h, w = nchw
        cw = self.params["codebook"].data
        q_rows = T.straight_through(rows, cw[indices.reshape(-1)])
        return T.transpose(T.reshape(q_rows, (n, h, w, d)), (0, 3, 1, 2))

    def pfa(self, q: Tensor, target_hw: tuple[int, int]) -> Tensor:
        return pfa_project(q, self.params["pfa.w"], target_hw, self.params["pfa.b"])

    def forward(self, x, perturb: Perturbation | None = None):
        """(reconstruction, class probabilities, QuantizedMap) for an (N, 1, H, W) batch."""
        x = T.as_tensor(x)
        z = self.encode(x)
        q, rows, idx = self.quantize(z)
        q_seg = q if perturb is None else self.perturb(q, rows, idx, perturb)
        x_hat = self.decode_image(q)
        probs = T.softmax(self.decode_seg(q_seg), axis=1)
        cw = self.params["codebook"].data
        src = np.transpose(z.data, (0, 2, 3, 1))
        qm = QuantizedMap(idx, cw[idx], src.copy())
        return x_hat, probs, qm


def ema_update(teacher: SegModel, student: SegModel, alpha: float) -> None:
    """theta_t <- alpha * theta_t + (1 - alpha) * theta_s, in place."""
    if teacher.params.keys() != student.params.keys():
        raise ValueError("ema_update: parameter sets differ")
    for k, t in teacher.params.items():
        s = student.params[k].data
        if t.shape != s.shape:
            raise ValueError(f"ema_update: shape mismatch for {k}: {t.shape} vs {s.shape}")
        t.data = alpha * t.data + (1.0 - alpha) * s
