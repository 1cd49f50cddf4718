"""Training configuration and its flat ``key = value`` file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .mixing import Strategy


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # data
    dataset: str = ""
    n_labeled: int = 0            # 0 keeps the dataset's own labeled/unlabeled split
    split_seed: int = -1          # -1 reuses ``seed`` when re-splitting
    # schedule
    iters: int = 2000
    eval_every: int = 200
    n_src: int = 2
    n_lbl_tgt: int = 2
    n_unl_tgt: int = 2
    # optimiser
    lr_encoder: float = 3e-4
    lr_head: float = 3e-3
    warmup_iters: int = 100
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    # mean teacher
    alpha: float = 0.99
    tau: float = 0.968
    # loss
    lam: float = 1.0
    mu: float = 2.0
    strategy: str = Strategy.ONE_XU_TWO_STREAMS.value
    use_ls: bool = True
    use_lt: bool = True
    use_inter: bool = True
    use_intra: bool = True
    class_balanced: bool = False
    # model / run
    channels: tuple[int, ...] = (16, 32, 32, 16)
    dtype: str = "float32"
    seed: int = 0
    out_dir: str = ""
    save_checkpoints: bool = True
    debug_dump: bool = False

    def validate(self) -> "TrainConfig":
        if self.iters < 0:
            raise ConfigError("iters must be >= 0")
        if self.eval_every <= 0:
            raise ConfigError("eval_every must be > 0")
        for name in ("lr_encoder", "lr_head"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.lam < 0 or self.mu < 0:
            raise ConfigError("lambda and mu must be >= 0")
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError("alpha must lie in [0, 1)")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError("tau must lie in (0, 1)")
        if min(self.n_src, self.n_lbl_tgt, self.n_unl_tgt) < 1:
            raise ConfigError("batch counts must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        Strategy.parse(self.strategy)
        return self

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


# config keys differ from field names only where Python forbids the name
KEY_FOR_FIELD = {"lam": "lambda"}
FIELD_FOR_KEY = {v: k for k, v in KEY_FOR_FIELD.items()}


def config_keys() -> list[str]:
    return [KEY_FOR_FIELD.get(f.name, f.name) for f in fields(TrainConfig)]


def _field(key: str):
    name = FIELD_FOR_KEY.get(key, key)
    for f in fields(TrainConfig):
        if f.name == name:
            return f
    raise ConfigError(f"unknown config key: {key}")


def parse_value(key: str, text: str):
    f = _field(key)
    default = getattr(TrainConfig(), f.name)
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            conv = float if isinstance(default[0], float) else int
            return tuple(conv(p) for p in text.replace(" ", "").split(",") if p)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dumps(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        lines.append(f"{KEY_FOR_FIELD.get(f.name, f.name)} = {format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def loads(text: str, base: TrainConfig | None = None, source: str = "<config>") -> TrainConfig:
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        f = _field(key)
        values[f.name] = parse_value(key, val)
    return dataclasses.replace(base or TrainConfig(), **values)


def load(path, base: TrainConfig | None = None) -> TrainConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return loads(p.read_text(), base, source=str(p))


def save(cfg: TrainConfig, path) -> None:
    Path(path).write_text(dumps(cfg))
