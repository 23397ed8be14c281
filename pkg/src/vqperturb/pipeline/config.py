"""Training configuration and its flat ``key=value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # perturbation
    eps: float = 0.7
    perturb: str = "qpm"  # qpm | dropout | none
    dropout_p: float = 0.9
    kernel_metric: str = "euclidean"
    # loss weights
    lambda_u: float = 1.0
    lambda_a: float = 5.0
    tau: float = 0.1
    beta_commit: float = 0.25
    entropy_weight: float = 0.1
    tau_q: float = 1.0
    eq9_verbatim: bool = False
    # teacher
    ema_alpha: float = 0.996
    # codebook / network
    K: int = 64
    D: int = 8
    width1: int = 8
    width2: int = 16
    fm_channels: int = 16
    fm_seed: int = 1234
    # data
    n_train: int = 200
    n_test: int = 64
    image_size: int = 32
    labeled_ratio: float = 0.1
    batch_labeled: int = 8
    batch_unlabeled: int = 4
    cutmix_min: float = 0.1
    cutmix_max: float = 0.4
    # optimisation
    iters: int = 2000
    optimizer: str = "adam"  # adam | sgd
    lr: float = 0.003
    momentum: float = 0.9
    poly_power: float = 0.9
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(0.0 <= self.eps <= 1.0, f"eps must lie in [0, 1], got {self.eps}")
        need(self.perturb in ("qpm", "dropout", "none"), f"unknown perturb {self.perturb!r}")
        need(0.0 <= self.dropout_p < 1.0, f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        need(self.kernel_metric in ("euclidean", "squared_euclidean"),
             f"unknown kernel_metric {self.kernel_metric!r}")
        need(self.lambda_u >= 0 and self.lambda_a >= 0, "loss weights must be non-negative")
        need(self.tau > 0 and self.tau_q > 0, "temperatures must be positive")
        need(self.beta_commit >= 0 and self.entropy_weight >= 0, "VQ weights must be non-negative")
        need(0.0 <= self.ema_alpha <= 1.0, f"ema_alpha must lie in [0, 1], got {self.ema_alpha}")
        need(self.K >= 2 and self.D >= 1, "need K >= 2 and D >= 1")
        need(self.image_size >= 16 and self.image_size % 8 == 0,
             f"image_size must be a multiple of 8 and >= 16, got {self.image_size}")
        need(self.n_train >= 4 and self.n_test >= 1, "need n_train >= 4 and n_test >= 1")
        need(0.0 < self.labeled_ratio < 1.0, f"labeled_ratio must lie in (0, 1), got {self.labeled_ratio}")
        need(self.batch_labeled >= 1 and self.batch_unlabeled >= 2, "batch sizes too small")
        need(0.0 <= self.cutmix_min <= self.cutmix_max <= 1.0, "cutmix area range must lie in [0, 1]")
        need(self.iters >= 0 and self.lr >= 0, "iters and lr must be non-negative")
        need(self.optimizer in ("adam", "sgd"), f"unknown optimizer {self.optimizer!r}")
        need(0.0 <= self.momentum < 1.0, f"momentum must lie in [0, 1), got {self.momentum}")

    def replace(self, **kw) -> TrainConfig:
        return dataclasses.replace(self, **kw)

    def dumps(self) -> str:
        return "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def loads(cls, text: str, base: TrainConfig | None = None) -> TrainConfig:
        return apply_overrides(base or cls(), [ln for ln in text.splitlines()])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> TrainConfig:
        with open(path) as fh:
            return cls.loads(fh.read())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(name: str, typ, raw: str):
    raw = raw.strip()
    try:
        if typ is bool or typ == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "1")
        if typ is int or typ == "int":
            return int(raw)
        if typ is float or typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"invalid value for {name}: {raw!r}") from None


def apply_overrides(cfg: TrainConfig, lines) -> TrainConfig:
    known = {f.name: f.type for f in fields(TrainConfig)}
    updates = {}
    for line in lines:
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line is not key=value: {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        updates[key] = _parse(key, known[key], raw)
    return cfg.replace(**updates)
