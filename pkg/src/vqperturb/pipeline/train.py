"""Mean-teacher training loop, evaluation and run artifacts."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..alignment import FrozenExtractor
from ..codebook import CodebookError, init_codebook, utilization, utilization_csv
from ..metrics import evaluate_masks
from ..tensor import Tensor, format_number
from .config import TrainConfig
from .data import gen_synthetic_dataset, stack, weak_augment
from .losses import Batch, compute_losses
from .model import SegModel, ema_update

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "lr", "L_l", "L_u", "L_align", "total", "codebook", "commitment",
                "entropy", "objective", "utilization")

TEST_SEED_OFFSET = 100_003


class TrainingError(RuntimeError):
    pass


class SGD:
    """Gradient descent with optional heavy-ball momentum."""

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, lr: float) -> None:
        for k, p in self.params.items():
            if p.grad is None:
                continue
            v = self.velocity[k]
            v *= self.momentum
            v += p.grad
            if lr:
                p.data = p.data - lr * v


class Adam:
    """Adam with bias correction (no weight decay)."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            if lr:
                p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(cfg: TrainConfig, params: dict[str, Tensor]):
    if cfg.optimizer == "adam":
        return Adam(params)
    return SGD(params, cfg.momentum)


def poly_lr(base: float, step: int, total: int, power: float = 0.9) -> float:
    return base * (1.0 - step / total) ** power if total else base


def step_seed(seed: int, step: int) -> int:
    return (seed * 1_000_003 + step) & 0x7FFFFFFF


@dataclass
class RunResult:
    config: TrainConfig
    student: SegModel
    teacher: SegModel
    losses: list[dict] = field(default_factory=list)
    utilization: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    @property
    def dice(self) -> float:
        return self.metrics["aggregate"]["dice"]["mean"]


def init_student(cfg: TrainConfig, train_images: np.ndarray) -> SegModel:
    """Random network; codebook fitted by k-means to its initial encoder features."""
    student = SegModel.create(cfg)
    sample = train_images[: min(len(train_images), 32)]
    with T.no_grad():
        z = student.encode(Tensor(sample)).data
    rows = np.transpose(z, (0, 2, 3, 1)).reshape(-1, cfg.D)
    cb = init_codebook(cfg.K, cfg.D, "kmeans_on_sample", seed=cfg.seed, sample=rows,
                       metric=cfg.kernel_metric)
    student.params["codebook"].data = cb.codewords
    return student


def sample_batch(labeled, unlabeled, cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    li = rng.choice(len(labeled), cfg.batch_labeled, replace=len(labeled) < cfg.batch_labeled)
    ui = rng.choice(len(unlabeled), cfg.batch_unlabeled, replace=False)
    x_l, y_l = stack([labeled[i] for i in li])
    x_l, y_l, _ = weak_augment(x_l, y_l, rng)
    x_u_raw, dummy = stack([unlabeled[i] for i in ui])
    x_u, _, rot = weak_augment(x_u_raw, dummy, rng)
    return Batch(x_l, y_l, x_u_raw, x_u, rot)


def predict_masks(model: SegModel, images: np.ndarray, chunk: int = 32) -> np.ndarray:
    out = []
    with T.no_grad():
        for s in range(0, len(images), chunk):
            _, probs, _ = model.forward(Tensor(images[s:s + chunk]))
            out.append(np.argmax(probs.data, axis=1))
    return np.concatenate(out)


def evaluate(model: SegModel, samples) -> dict:
    images, masks = stack(samples)
    return evaluate_masks(predict_masks(model, images), masks)


def test_set(cfg: TrainConfig):
    return gen_synthetic_dataset(cfg.n_test, cfg.image_size, cfg.seed + TEST_SEED_OFFSET,
                                 cfg.labeled_ratio)


def train(cfg: TrainConfig, out_dir: str | None = None, log_every: int = 100) -> RunResult:
    """Run the semi-supervised loop; deterministic for a given config."""
    data = gen_synthetic_dataset(cfg.n_train, cfg.image_size, cfg.seed, cfg.labeled_ratio)
    labeled = [s for s in data if s.labeled]
    unlabeled = [s for s in data if not s.labeled]
    if len(unlabeled) < cfg.batch_unlabeled:
        raise TrainingError("not enough unlabeled samples for one batch")
    student = init_student(cfg, stack(data)[0])
    teacher = student.copy(trainable=False)
    fe = FrozenExtractor(cfg.fm_seed, out_channels=cfg.fm_channels)
    opt = make_optimizer(cfg, student.params)
    rng = np.random.default_rng(cfg.seed + 17)

    result = RunResult(cfg, student, teacher)
    index_history = []
    for step in range(cfg.iters):
        batch = sample_batch(labeled, unlabeled, cfg, rng)
        lr = poly_lr(cfg.lr, step, cfg.iters, cfg.poly_power)
        student.zero_grad()
        terms = compute_losses(batch, student, teacher, fe, cfg, step_seed(cfg.seed, step))
        row = {k: terms[k].item() for k in LOSS_COLUMNS[2:-1]}
        if not all(math.isfinite(v) for v in row.values()):
            detail = ", ".join(f"{k}={v}" for k, v in row.items())
            raise TrainingError(f"non-finite loss at step {step}: {detail}")
        terms["objective"].backward()
        opt.step(lr)
        try:
            student.codebook.validate()
        except CodebookError as e:
            raise TrainingError(f"codebook invalid after step {step}: {e}") from e
        ema_update(teacher, student, cfg.ema_alpha)

        idx = terms["indices"]
        index_history.append(idx)
        row["utilization"] = np.unique(idx).size / cfg.K
        result.losses.append({"step": step, "lr": lr, **row})
        if log_every and (step % log_every == 0 or step == cfg.iters - 1):
            logger.info("step %d lr %.4g total %.4f L_l %.4f L_u %.4f L_align %.4f uti %.3f",
                        step, lr, row["total"], row["L_l"], row["L_u"], row["L_align"],
                        row["utilization"])

    result.utilization = utilization(index_history, cfg.K)
    result.metrics = evaluate(student, test_set(cfg))
    if out_dir is not None:
        write_artifacts(result, out_dir)
    return result


def losses_csv(rows: list[dict]) -> str:
    lines = [",".join(LOSS_COLUMNS)]
    for r in rows:
        lines.append(",".join(str(r["step"]) if k == "step" else format_number(r[k])
                              for k in LOSS_COLUMNS))
    return "\n".join(lines) + "\n"


def save_checkpoint(model: SegModel, directory: str, prefix: str) -> dict:
    os.makedirs(directory, exist_ok=True)
    files = {}
    for name, t in sorted(model.params.items()):
        fname = f"{prefix}.{name}.txt"
        T.save_tensor(os.path.join(directory, fname), t.data)
        files[name] = fname
    return files


def load_checkpoint(directory: str, which: str = "student") -> SegModel:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    params = {name: T.load_tensor(os.path.join(directory, fname))
              for name, fname in manifest[which].items()}
    return SegModel(params, manifest.get("metric", "euclidean"), trainable=False)


def write_artifacts(result: RunResult, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    result.config.save(os.path.join(out_dir, "config.txt"))
    with open(os.path.join(out_dir, "losses.csv"), "w") as fh:
        fh.write(losses_csv(result.losses))
    with open(os.path.join(out_dir, "utilization.csv"), "w") as fh:
        fh.write(utilization_csv(result.utilization))
    with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
        json.dump(result.metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    ckpt = os.path.join(out_dir, "checkpoint")
    manifest = {"metric": result.student.metric,
                "student": save_checkpoint(result.student, ckpt, "student"),
                "teacher": save_checkpoint(result.teacher, ckpt, "teacher")}
    with open(os.path.join(ckpt, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_losses_csv(path: str) -> list[dict]:
    with open(path) as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]
