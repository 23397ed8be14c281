"""Dual-branch losses, pseudo-labelling and the total objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..alignment import FrozenExtractor, contrastive_align_loss
from ..codebook import entropy_regularizer, vq_losses
from ..perturbation import transition_kernel
from ..tensor import Tensor
from .config import TrainConfig
from .data import cutmix_pair
from .model import Perturbation, SegModel


def one_hot(mask: np.ndarray, classes: int = 2) -> np.ndarray:
    """(N, H, W) integer mask -> (N, C, H, W) float one-hot."""
    mask = np.asarray(mask, dtype=np.int64)
    return np.moveaxis(np.eye(classes)[mask], -1, 1)


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean pixel-wise cross-entropy of (N, C, H, W) logits against an (N, H, W) mask."""
    oh = one_hot(target, logits.shape[1])
    if oh.shape != logits.shape:
        raise T.ShapeError(f"cross_entropy: logits {logits.shape} vs target {np.shape(target)}")
    logp = T.log_softmax(logits, axis=1)
    n_pix = logits.shape[0] * logits.shape[2] * logits.shape[3]
    return -T.tsum(T.mul(logp, Tensor(oh))) * (1.0 / n_pix)


def pseudo_label(probs) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to class 0."""
    p = np.asarray(probs.data if isinstance(probs, Tensor) else probs)
    return np.argmax(p, axis=1)


def labeled_loss(x_l, y_l, model: SegModel) -> Tensor:
    """L1 reconstruction plus cross-entropy against the ground truth."""
    x = T.as_tensor(x_l)
    z = model.encode(x)
    q, _, _ = model.quantize(z)
    return T.l1_distance(model.decode_image(q), x) + cross_entropy(model.decode_seg(q), y_l)


def teacher_predict(teacher: SegModel, x) -> np.ndarray:
    """Teacher class probabilities; computed without recording a graph."""
    with T.no_grad():
        _, probs, _ = teacher.forward(T.as_tensor(x).detach())
    return probs.data


def make_perturbation(cfg: TrainConfig, model: SegModel, seed: int) -> Perturbation | None:
    if cfg.perturb == "none":
        return None
    if cfg.perturb == "dropout":
        return Perturbation("dropout", seed, p=cfg.dropout_p)
    kernel = transition_kernel(model.codebook, cfg.eps, cfg.kernel_metric)
    return Perturbation("qpm", seed, kernel=kernel)


def unlabeled_loss(x_u, student: SegModel, teacher: SegModel, perturbation: Perturbation | None,
                   seed: int, x_teacher=None, pseudo_transform=None,
                   area_range=(0.1, 0.4), eq9_verbatim: bool = False) -> Tensor:
    """Reconstruction + perturbed-stream CE + CutMix-stream CE against teacher pseudo-labels.

    ``x_teacher`` is the un-augmented view shown to the teacher (defaults to
    ``x_u``); ``pseudo_transform`` maps teacher-view labels onto the student view.
    """
    x_u = np.asarray(x_u.data if isinstance(x_u, Tensor) else x_u)
    x_t = x_u if x_teacher is None else np.asarray(x_teacher)
    pseudo = pseudo_label(teacher_predict(teacher, x_t))
    if pseudo_transform is not None:
        pseudo = pseudo_transform(pseudo)
    x_a, y_a = mix_batch(x_u, pseudo, seed, area_range)

    xt = Tensor(x_u)
    z = student.encode(xt)
    q, rows, idx = student.quantize(z)
    q_pert = q if perturbation is None else student.perturb(q, rows, idx, perturbation)
    rec = T.l1_distance(student.decode_image(q), xt)
    seg = cross_entropy(student.decode_seg(q_pert), pseudo)
    qa, _, _ = student.quantize(student.encode(Tensor(x_a)))
    mix = cross_entropy(student.decode_seg(qa), pseudo if eq9_verbatim else y_a)
    return rec + seg + mix


def mix_batch(x: np.ndarray, y: np.ndarray, seed: int, area_range=(0.1, 0.4)):
    """CutMix sample i with sample (i + 1) mod n, one rectangle per pair."""
    n = x.shape[0]
    xs, ys = [], []
    for i in range(n):
        j = (i + 1) % n
        xa, ya, _ = cutmix_pair(x[i], x[j], y[i], y[j], seed=seed * 7919 + i, area_range=area_range)
        xs.append(xa)
        ys.append(ya)
    return np.stack(xs), np.stack(ys)


@dataclass
class Batch:
    x_l: np.ndarray  # (Nl, 1, H, W) student view
    y_l: np.ndarray  # (Nl, H, W)
    x_u_raw: np.ndarray  # (Nu, 1, H, W) teacher view
    x_u: np.ndarray  # (Nu, 1, H, W) student (weakly augmented) view
    rotations: np.ndarray  # (Nu,) quarter turns applied to the student view


def _rotate_masks(masks: np.ndarray, rotations) -> np.ndarray:
    return np.ascontiguousarray(np.stack([np.rot90(m, int(k)) for m, k in zip(masks, rotations)]))


def compute_losses(batch: Batch, student: SegModel, teacher: SegModel, fe: FrozenExtractor,
                   cfg: TrainConfig, seed: int) -> dict:
    """All loss terms for one step from a single batched student pass.

    Returns tensors ``L_l``, ``L_u``, ``L_align``, ``total`` (weighted sum of the
    first three), ``codebook``, ``commitment``, ``entropy`` and ``objective``
    (total plus the VQ terms), and the student indices under ``indices``.
    """
    nl, nu = batch.x_l.shape[0], batch.x_u.shape[0]

    pseudo = _rotate_masks(pseudo_label(teacher_predict(teacher, batch.x_u_raw)), batch.rotations)
    x_a, y_a = mix_batch(batch.x_u, pseudo, seed, (cfg.cutmix_min, cfg.cutmix_max))

    x_all = np.concatenate([batch.x_l, batch.x_u, x_a])
    xt = Tensor(x_all)
    z = student.encode(xt)
    q, rows, idx = student.quantize(z)

    # perturb only the unlabeled slice of the post-VQ map
    q_l = T.slice_rows(q, 0, nl)
    q_u = T.slice_rows(q, nl, nl + nu)
    q_a = T.slice_rows(q, nl + nu, nl + 2 * nu)
    pert = make_perturbation(cfg, student, seed)
    if pert is None:
        q_u_pert = q_u
    else:
        per_img = rows.shape[0] // x_all.shape[0]
        rows_u = T.slice_rows(rows, nl * per_img, (nl + nu) * per_img)
        q_u_pert = student.perturb(q_u, rows_u, idx[nl:nl + nu], pert)

    x_hat = student.decode_image(T.slice_rows(q, 0, nl + nu))
    logits = student.decode_seg(T.concat([q_l, q_u_pert, q_a]))

    x_lu = Tensor(x_all[: nl + nu])
    rec_l = T.l1_distance(T.slice_rows(x_hat, 0, nl), T.slice_rows(x_lu, 0, nl))
    rec_u = T.l1_distance(T.slice_rows(x_hat, nl, nl + nu), T.slice_rows(x_lu, nl, nl + nu))
    seg_l = cross_entropy(T.slice_rows(logits, 0, nl), batch.y_l)
    seg_u = cross_entropy(T.slice_rows(logits, nl, nl + nu), pseudo)
    seg_a = cross_entropy(T.slice_rows(logits, nl + nu, nl + 2 * nu),
                          pseudo if cfg.eq9_verbatim else y_a)
    L_l = rec_l + seg_l
    L_u = rec_u + seg_u + seg_a

    fm = fe(x_all[: nl + nu])
    f_pfa = student.pfa(T.slice_rows(q, 0, nl + nu), fm.shape[2:])
    align_l = contrastive_align_loss(T.slice_rows(f_pfa, 0, nl), fm[:nl], cfg.tau)
    align_u = contrastive_align_loss(T.slice_rows(f_pfa, nl, nl + nu), fm[nl:], cfg.tau)
    L_align = (align_l + align_u) * 0.5

    total = L_l + L_u * cfg.lambda_u + L_align * cfg.lambda_a

    cb_loss, commit = vq_losses(rows, student.params["codebook"], idx, cfg.beta_commit)
    ent = entropy_regularizer(rows, student.params["codebook"], cfg.tau_q)
    objective = total + cb_loss + commit + ent * cfg.entropy_weight
    return {"L_l": L_l, "L_u": L_u, "L_align": L_align, "total": total,
            "codebook": cb_loss, "commitment": commit, "entropy": ent,
            "objective": objective, "indices": idx}


def total_loss(batch: Batch, student: SegModel, teacher: SegModel, fe: FrozenExtractor,
               cfg: TrainConfig, seed: int) -> Tensor:
    """L_l + lambda_u L_u + lambda_a L_align."""
    return compute_losses(batch, student, teacher, fe, cfg, seed)["total"]
