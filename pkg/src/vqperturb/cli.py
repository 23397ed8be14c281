"""Command-line entry point: ``vqperturb <command> [flags]``.

Every command writes CSV, JSON or tensor text to ``--out`` (or stdout).
Exit codes: 0 success, 1 computation/input error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import tensor as T
from .alignment import contrastive_align_loss
from .codebook import (Codebook, CodebookError, init_codebook, nearest_indices, pairwise_distances,
                       pca_export, quantize)
from .metrics import evaluate_masks, paired_t_test
from .perturbation import (bounds_eps1, compare_report, kernel_dump, kl_dropout, kl_qpm,
                           perturbed_marginal,
                           rows_csv, sample_indices, transition_kernel)


class CLIError(Exception):
    """Bad input detected by a command; reported with exit code 1."""


def _floats(text: str, name: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CLIError(f"{name}: not a comma-separated list of numbers: {text!r}") from None
    if not vals:
        raise CLIError(f"{name}: empty list")
    return vals


def _in_range(vals, lo, hi, name, hi_open=False):
    for v in vals:
        if not (lo <= v < hi if hi_open else lo <= v <= hi):
            bracket = ")" if hi_open else "]"
            raise CLIError(f"{name} value {v} outside [{lo}, {hi}{bracket}")


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    with open(out, "w") as fh:
        fh.write(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _load_codebook(path: str) -> Codebook:
    if not os.path.exists(path):
        raise CLIError(f"codebook file not found: {path}")
    return Codebook.load(path)


def _load_tensor(path: str, name: str) -> np.ndarray:
    if not os.path.exists(path):
        raise CLIError(f"{name} file not found: {path}")
    return T.load_tensor(path)


def _load_indices(path: str, K: int) -> np.ndarray:
    raw = _load_tensor(path, "indices")
    idx = raw.astype(np.int64)
    if not np.array_equal(idx, raw) or idx.size and (idx.min() < 0 or idx.max() >= K):
        raise CLIError(f"indices in {path} must be integers in [0, {K})")
    return idx


def _features(path: str, D: int) -> np.ndarray:
    z = _load_tensor(path, "features")
    if z.ndim == 0 or z.shape[-1] != D:
        raise CLIError(f"features in {path} have shape {z.shape}; last axis must be D={D}")
    return z


# -- commands -----------------------------------------------------------------

def cmd_gen_data(a):
    from .pipeline.data import gen_synthetic_dataset, stack
    if a.n < 4 or a.size < 16:
        raise CLIError(f"need --n >= 4 and --size >= 16, got n={a.n}, size={a.size}")
    _in_range([a.labeled_ratio], 0.0, 1.0, "--labeled-ratio")
    data = gen_synthetic_dataset(a.n, a.size, a.seed, a.labeled_ratio)
    images, masks = stack(data)
    os.makedirs(a.out, exist_ok=True)
    T.save_tensor(os.path.join(a.out, "images.txt"), images[:, 0])
    T.save_tensor(os.path.join(a.out, "masks.txt"), masks)
    with open(os.path.join(a.out, "samples.csv"), "w") as fh:
        fh.write("id,labeled\n" + "".join(f"{s.id},{int(s.labeled)}\n" for s in data))


def cmd_codebook_init(a):
    sample = None
    if a.scheme == "kmeans_on_sample":
        if a.sample is None:
            raise CLIError("--scheme kmeans_on_sample needs --sample")
        sample = _features(a.sample, a.D)
    cb = init_codebook(a.K, a.D, a.scheme, seed=a.seed, sample=sample, metric=a.metric,
                       scale=a.scale)
    _emit(cb.dumps(), a.out)


def cmd_codebook_report(a):
    cb = _load_codebook(a.codebook)
    d = pairwise_distances(cb.codewords, cb.metric)
    off = d[~np.eye(cb.K, dtype=bool)]
    report = {"K": cb.K, "D": cb.D, "metric": cb.metric,
              "min_distance": float(off.min()), "max_distance": float(off.max()),
              "mean_norm": float(np.linalg.norm(cb.codewords, axis=1).mean())}
    if a.indices is not None:
        idx = _load_indices(a.indices, cb.K).reshape(-1)
        hist = np.bincount(idx, minlength=cb.K)
        p = hist[hist > 0] / max(idx.size, 1)
        report["utilization"] = float(np.count_nonzero(hist) / cb.K)
        report["entropy_of_histogram"] = float(-(p * np.log(p)).sum())
        report["histogram"] = hist.tolist()
    _emit(_json(report), a.out)


def cmd_codebook_export_pca(a):
    cb = _load_codebook(a.codebook)
    active = None
    if a.indices is not None:
        active = np.zeros(cb.K, dtype=bool)
        active[np.unique(_load_indices(a.indices, cb.K))] = True
    rows = pca_export(cb, active)
    _emit(rows_csv(((str(k), r[0], r[1], str(int(r[2]))) for k, r in enumerate(rows)),
                   header=("k", "x", "y", "active")), a.out)


def cmd_quantize(a):
    cb = _load_codebook(a.codebook)
    qm = quantize(_features(a.features, cb.D), cb)
    _emit(T.dumps_tensor(qm.dequantized if a.dequantize else qm.indices), a.out)


def cmd_perturb(a):
    cb = _load_codebook(a.codebook)
    _in_range([a.eps], 0.0, 1.0, "--eps")
    if a.indices is not None:
        idx = _load_indices(a.indices, cb.K)
    elif a.features is not None:
        z = _features(a.features, cb.D)
        idx = nearest_indices(z.reshape(-1, cb.D), cb.codewords).reshape(z.shape[:-1])
    else:
        raise CLIError("perturb needs --indices or --features")
    new = sample_indices(idx, transition_kernel(cb, a.eps), a.seed)
    _emit(T.dumps_tensor(cb.codewords[new] if a.dequantize else new), a.out)


def cmd_kernel(a):
    cb = _load_codebook(a.codebook)
    _in_range([a.eps], 0.0, 1.0, "--eps")
    kernel = transition_kernel(cb, a.eps)
    if a.marginal:
        m = perturbed_marginal(kernel)
        _emit(rows_csv(((str(j), q) for j, q in enumerate(m.Q)), header=("j", "Q")), a.out)
    else:
        _emit(kernel_dump(kernel), a.out)


def cmd_kl_curve(a):
    grid = a.grid if a.grid is not None else a.eps
    if grid is None:
        raise CLIError("kl-curve needs --grid (or --eps)")
    vals = _floats(grid, "--grid")
    if a.mode == "dropout":
        _in_range(vals, 0.0, 1.0, "dropout rate", hi_open=True)
        rows = [(p, kl_dropout(p).kl) for p in vals]
    else:
        if a.codebook is None:
            raise CLIError("--mode qpm needs --codebook")
        cb = _load_codebook(a.codebook)
        _in_range(vals, 0.0, 1.0, "eps")
        rows = [(e, kl_qpm(perturbed_marginal(transition_kernel(cb, e)))) for e in vals]
    _emit(rows_csv(rows, header=("param", "kl")), a.out)


def cmd_bounds(a):
    cb = _load_codebook(a.codebook)
    lower, upper, dmin, dmax = bounds_eps1(cb)
    q = perturbed_marginal(transition_kernel(cb, 1.0)).Q
    _emit(rows_csv([(lower, upper, dmin, dmax, q.min(), q.max())],
                   header=("lower", "upper", "d_min", "d_max", "q_min", "q_max")), a.out)


def cmd_compare(a):
    cb = _load_codebook(a.codebook)
    eps = _floats(a.eps, "--eps")
    ps = _floats(a.p, "--p")
    _in_range(eps, 0.0, 1.0, "eps")
    _in_range(ps, 0.0, 1.0, "dropout rate", hi_open=True)
    _emit(rows_csv(compare_report(cb, eps, ps)), a.out)


def cmd_align_loss(a):
    if a.tau <= 0:
        raise CLIError(f"--tau must be positive, got {a.tau}")
    f_pfa = _load_tensor(a.pfa, "pfa")
    f_fm = _load_tensor(a.fm, "fm")
    with T.no_grad():
        loss = contrastive_align_loss(T.Tensor(f_pfa), f_fm, a.tau)
    _emit(rows_csv([(loss.item(),)], header=("loss",)), a.out)


def cmd_train(a):
    from .pipeline.config import TrainConfig, apply_overrides
    from .pipeline.train import train
    cfg = TrainConfig.load(a.config) if a.config else TrainConfig()
    cfg = apply_overrides(cfg, a.set or [])
    if a.seed is not None:
        cfg = cfg.replace(seed=a.seed)
    result = train(cfg, out_dir=a.out, log_every=a.log_every)
    agg = result.metrics["aggregate"]
    sys.stdout.write(_json({k: agg[k]["mean"] for k in ("dice", "jaccard", "hd95", "asd")}))


def cmd_eval(a):
    if a.pred is not None:
        if a.gt is None:
            raise CLIError("--pred needs --gt")
        preds = _load_tensor(a.pred, "pred")
        gts = _load_tensor(a.gt, "gt")
    else:
        if a.checkpoint is None or a.data is None:
            raise CLIError("eval needs --pred/--gt or --checkpoint/--data")
        from .pipeline.train import load_checkpoint, predict_masks
        ckpt = os.path.join(a.checkpoint, "checkpoint")
        model = load_checkpoint(ckpt if os.path.isdir(ckpt) else a.checkpoint, a.which)
        images = _load_tensor(os.path.join(a.data, "images.txt"), "images")
        gts = _load_tensor(os.path.join(a.data, "masks.txt"), "masks")
        preds = predict_masks(model, images[:, None])
    for name, m in (("pred", preds), ("gt", gts)):
        if not np.isin(m, (0, 1)).all():
            raise CLIError(f"{name} masks must be binary")
    if preds.shape != gts.shape or preds.ndim != 3:
        raise CLIError(f"pred {preds.shape} and gt {gts.shape} must both be (N, H, W)")
    _emit(_json(evaluate_masks(preds.astype(np.int64), gts.astype(np.int64))), a.out)


def cmd_ttest(a):
    if a.csv is not None:
        if not os.path.exists(a.csv):
            raise CLIError(f"csv file not found: {a.csv}")
        cols = np.loadtxt(a.csv, delimiter=",", skiprows=1, ndmin=2)
        if cols.shape[1] < 2:
            raise CLIError(f"{a.csv}: need two columns of paired scores")
        xs, ys = cols[:, 0], cols[:, 1]
    elif a.a is not None and a.b is not None:
        xs, ys = _floats(a.a, "--a"), _floats(a.b, "--b")
    else:
        raise CLIError("ttest needs --a and --b, or --csv")
    r = paired_t_test(xs, ys)
    _emit(_json({"t": r.t, "p": r.p, "df": r.df, "n": len(xs), "degenerate": r.degenerate}),
          a.out)


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vqperturb", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help, out=True, seed=False):
        sp = sub.add_parser(name, help=help, description=help)
        sp.set_defaults(fn=fn)
        if out:
            sp.add_argument("--out", help="output path (default: stdout)")
        if seed:
            sp.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
        return sp

    sp = add("gen-data", cmd_gen_data, "write a synthetic lesion dataset", out=False, seed=True)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--n", type=int, default=200, help="number of images")
    sp.add_argument("--size", type=int, default=32, help="image side length")
    sp.add_argument("--labeled-ratio", type=float, default=0.1, help="labeled fraction")

    cb = sub.add_parser("codebook", help="codebook utilities")
    cbsub = cb.add_subparsers(dest="action", required=True, metavar="action")
    sp = cbsub.add_parser("init", help="create a codebook", description="create a codebook")
    sp.set_defaults(fn=cmd_codebook_init)
    sp.add_argument("--K", type=int, required=True, help="number of codewords")
    sp.add_argument("--D", type=int, required=True, help="codeword dimension")
    sp.add_argument("--scheme", choices=("uniform_random", "kmeans_on_sample"),
                    default="uniform_random", help="initialisation scheme")
    sp.add_argument("--sample", help="tensor file of (..., D) features for k-means")
    sp.add_argument("--metric", choices=("euclidean", "squared_euclidean"), default="euclidean",
                    help="kernel distance metric stored with the codebook")
    sp.add_argument("--scale", type=float, default=1.0, help="uniform init range")
    sp.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    sp.add_argument("--out", help="output path (default: stdout)")
    sp = cbsub.add_parser("report", help="codebook statistics as JSON",
                          description="codebook statistics as JSON")
    sp.set_defaults(fn=cmd_codebook_report)
    sp.add_argument("--codebook", required=True, help="codebook file")
    sp.add_argument("--indices", help="tensor file of assigned indices (adds utilization)")
    sp.add_argument("--out", help="output path (default: stdout)")
    sp = cbsub.add_parser("export-pca", help="2-D PCA projection as CSV",
                          description="2-D PCA projection as CSV")
    sp.set_defaults(fn=cmd_codebook_export_pca)
    sp.add_argument("--codebook", required=True, help="codebook file")
    sp.add_argument("--indices", help="tensor file of indices marking active codewords")
    sp.add_argument("--out", help="output path (default: stdout)")

    sp = add("quantize", cmd_quantize, "nearest-codeword indices of a feature tensor")
    sp.add_argument("--codebook", required=True, help="codebook file")
    sp.add_argument("--features", required=True, help="tensor file with last axis D")
    sp.add_argument("--dequantize", action="store_true", help="emit codewords, not indices")

    sp = add("perturb", cmd_perturb, "QPM-resample quantised indices", seed=True)
    sp.add_argument("--codebook", required=True, help="codebook file")
    sp.add_argument("--eps", type=float, default=0.7, help="perturbation strength in [0, 1]")
    sp.add_argument("--indices", help="tensor file of indices")
    sp.add_argument("--features", help="tensor file of features (quantised first)")
    sp.add_argument("--dequantize", action="store_true", help="emit codewords, not indices")

    sp = add("kernel", cmd_kernel, "QPM transition kernel (or its marginal)")
    sp.add_argument("--codebook", required=True, help="codebook file")
    sp.add_argument("--eps", type=float, default=0.7, help="perturbation strength in [0, 1]")
    sp.add_argument("--marginal", action="store_true", help="emit the perturbed marginal Q")

    sp = add("kl-curve", cmd_kl_curve, "KL divergence over a parameter grid")
    sp.add_argument("--mode", choices=("qpm", "dropout"), required=True, help="perturbation type")
    sp.add_argument("--grid", help="comma-separated eps or dropout values")
    sp.add_argument("--eps", help="alias of --grid for --mode qpm")
    sp.add_argument("--codebook", help="codebook file (qpm mode)")

    sp = add("bounds", cmd_bounds, "eps=1 marginal bounds for a codebook")
    sp.add_argument("--codebook", required=True, help="codebook file")

    sp = add("compare", cmd_compare, "QPM and dropout KL side by side")
    sp.add_argument("--codebook", required=True, help="codebook file")
    sp.add_argument("--eps", default="0.1,0.3,0.5,0.7,0.9,1", help="comma-separated eps grid")
    sp.add_argument("--p", default="0.1,0.3,0.5,0.7,0.9", help="comma-separated dropout grid")

    sp = add("align-loss", cmd_align_loss, "patch contrastive loss between two feature maps")
    sp.add_argument("--pfa", required=True, help="tensor file (C, H, W) or (N, C, H, W)")
    sp.add_argument("--fm", required=True, help="tensor file with the same shape")
    sp.add_argument("--tau", type=float, default=0.1, help="temperature")

    sp = add("train", cmd_train, "run the semi-supervised trainer", out=False)
    sp.add_argument("--out", required=True, help="run directory for artifacts")
    sp.add_argument("--config", help="key=value config file")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    sp.add_argument("--log-every", type=int, default=100, help="log interval in steps (0: off)")

    sp = add("eval", cmd_eval, "segmentation metrics as JSON")
    sp.add_argument("--pred", help="tensor file of predicted masks (N, H, W)")
    sp.add_argument("--gt", help="tensor file of ground-truth masks (N, H, W)")
    sp.add_argument("--checkpoint", help="run or checkpoint directory")
    sp.add_argument("--which", choices=("student", "teacher"), default="student",
                    help="model to evaluate from the checkpoint")
    sp.add_argument("--data", help="directory written by gen-data")

    sp = add("ttest", cmd_ttest, "paired two-tailed t-test as JSON")
    sp.add_argument("--a", help="comma-separated scores of method A")
    sp.add_argument("--b", help="comma-separated scores of method B")
    sp.add_argument("--csv", help="CSV with a header and two columns of paired scores")
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args.fn(args)
    except (CLIError, CodebookError, ValueError, ArithmeticError, RuntimeError, OSError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
