"""Flat ``key = value`` run configuration files."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .transformer import ModelConfig

TASKS = ("mim", "mlm", "itm")


@dataclass
class TrainConfig:
    total_steps: int = 100_000
    warmup_ratio: float = 0.1
    lr_unimodal: float = 1e-5
    lr_fusion: float = 5e-5
    batch_size: int = 32
    weight_decay: float = 0.01
    task_weights: dict[str, float] = field(default_factory=lambda: {t: 1.0 for t in TASKS})
    seed: int = 0
    checkpoint_interval: int = 0

    def __post_init__(self):
        if self.lr_unimodal <= 0 or self.lr_fusion <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ConfigError("warmup_ratio must lie in [0, 1]")
        if self.total_steps <= 0:
            raise ConfigError("total_steps must be positive")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        unknown = set(self.task_weights) - set(TASKS)
        if unknown:
            raise ConfigError(f"unknown task weights {sorted(unknown)}")
        self.task_weights = {t: float(self.task_weights.get(t, 0.0)) for t in TASKS}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    corpus: Path | None = None
    eval_corpus: Path | None = None
    out: Path | None = None
    finetune_steps: int = 300
    finetune_lr: float = 1e-3
    sweep_layers: tuple[int, ...] = ()
    pool_size: int = 16
    source: Path | None = None

    def to_lines(self) -> list[str]:
        """The fully resolved configuration as ``key = value`` lines (sorted)."""
        items = dict(self.model.to_dict())
        t = self.train.to_dict()
        weights = t.pop("task_weights")
        items.update(t)
        items.update({f"w_{k}": v for k, v in weights.items()})
        items.update(
            corpus=self.corpus or "", eval_corpus=self.eval_corpus or "", finetune_steps=self.finetune_steps,
            finetune_lr=self.finetune_lr, sweep_layers=",".join(map(str, self.sweep_layers)),
            pool_size=self.pool_size,
        )
        return [f"{k} = {items[k]}" for k in sorted(items)]


_MODEL_FIELDS = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f.type for f in dataclasses.fields(TrainConfig) if f.name != "task_weights"}
_RUN_FIELDS = {"corpus": "path", "eval_corpus": "path", "out": "path", "finetune_steps": "int",
               "finetune_lr": "float", "sweep_layers": "ints", "pool_size": "int"}
_WEIGHT_FIELDS = {f"w_{t}": "float" for t in TASKS}


def _convert(raw: str, kind: str):
    kind = str(kind)
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "path":
        return Path(raw)
    if kind == "ints":
        return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
    return raw


def parse_kv(text: str, source: str = "<config>") -> dict[str, tuple[str, int]]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Returns key -> (value, line)."""
    out: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {body!r}")
        key, value = (s.strip() for s in body.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = (value, lineno)
    return out


def run_config_from_kv(pairs: dict[str, tuple[str, int]], source: str = "<config>", base: str = "desk") -> RunConfig:
    model_kw, train_kw, run_kw, weights = {}, {}, {}, {}
    for key, (raw, lineno) in pairs.items():
        try:
            if key in _MODEL_FIELDS:
                model_kw[key] = _convert(raw, _MODEL_FIELDS[key])
            elif key in _TRAIN_FIELDS:
                train_kw[key] = _convert(raw, _TRAIN_FIELDS[key])
            elif key in _RUN_FIELDS:
                run_kw[key] = _convert(raw, _RUN_FIELDS[key])
            elif key in _WEIGHT_FIELDS:
                weights[key[2:]] = float(raw)
            else:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {raw!r}") from None
    try:
        model = ModelConfig.desk(**model_kw) if base == "desk" else ModelConfig(**model_kw)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if weights:
        train_kw["task_weights"] = {t: weights.get(t, 1.0) for t in TASKS}
    train = TrainConfig(**train_kw)
    return RunConfig(model=model, train=train, **run_kw)


def load_run_config(path: str | Path, base: str = "desk") -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    cfg = run_config_from_kv(parse_kv(text, str(path)), str(path), base)
    cfg.source = path
    # relative paths resolve against the config file's directory
    for name in ("corpus", "eval_corpus", "out"):
        p = getattr(cfg, name)
        if p is not None and not p.is_absolute():
            setattr(cfg, name, path.parent / p)
    return cfg


def require(cfg: RunConfig, name: str) -> Path:
    value = getattr(cfg, name)
    if value is None:
        raise ConfigError(f"missing required field {name!r}")
    if name in ("corpus", "eval_corpus") and not Path(value).exists():
        raise ConfigError(f"field {name!r}: no such file {value}")
    return Path(value)
