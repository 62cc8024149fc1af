"""Run configuration and the flat ``key = value`` config file format.

One pair per line, ``#`` starts a comment, unknown keys are rejected.
Command-line flags override file values; a run manifest is itself a valid
config file (its metadata lines are comments), so a finished run can be
re-executed from its manifest alone.
"""

from dataclasses import dataclass, fields, replace
from datetime import date
from pathlib import Path

from .errors import ConfigError
from .pipeline import SplitSpec

MODES = ("none", "static", "embedding", "both")

DEFAULT_SPLIT = SplitSpec(
    train_start=date(1999, 10, 1),
    train_end=date(2008, 9, 30),
    eval_start=date(1989, 10, 1),
    eval_end=date(1999, 9, 30),
)


@dataclass(frozen=True)
class TrainConfig:
    """Every hyperparameter and mode flag of a training run."""

    data_root: str = ""
    checkpoint_dir: str = ""
    mode: str = "embedding"
    split: SplitSpec = DEFAULT_SPLIT
    lookback: int = 270
    hidden_size: int = 256
    embedding_dim: int = 20
    dropout: float = 0.4
    epsilon: float = 0.1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    batch_size: int = 256
    epochs: int = 30
    seed: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        positive = ("lookback", "hidden_size", "embedding_dim", "batch_size", "epochs")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.epsilon < 0.0:
            raise ConfigError("epsilon must be >= 0")
        if self.lr < 0.0:
            raise ConfigError("lr must be >= 0")
        for name in ("beta1", "beta2", "adam_eps", "clip_norm"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"{name} must be > 0")

    @property
    def use_static(self) -> bool:
        return self.mode in ("static", "both")

    @property
    def use_embedding(self) -> bool:
        return self.mode in ("embedding", "both")


_DATE_KEYS = ("train_start", "train_end", "eval_start", "eval_end")
_INT_KEYS = ("lookback", "hidden_size", "embedding_dim", "batch_size", "epochs", "seed")
_FLOAT_KEYS = ("dropout", "epsilon", "lr", "beta1", "beta2", "adam_eps", "clip_norm")
_STR_KEYS = ("data_root", "checkpoint_dir", "mode")


def _parse_date(value: str) -> date:
    try:
        y, m, d = value.split("-")
        return date(int(y), int(m), int(d))
    except ValueError as exc:
        raise ConfigError(f"expected YYYY-MM-DD date, got {value!r}") from exc


def parse_key_values(text: str) -> dict[str, str]:
    """Parse the flat file format into raw string pairs."""
    pairs: dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in pairs:
            raise ConfigError(f"line {line_no}: duplicate key {key!r}")
        pairs[key] = value.strip()
    return pairs


def config_from_pairs(pairs: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    """Apply raw string pairs on top of ``base`` (or the defaults)."""
    cfg = base if base is not None else TrainConfig()
    split_kw = {
        "train_start": cfg.split.train_start,
        "train_end": cfg.split.train_end,
        "eval_start": cfg.split.eval_start,
        "eval_end": cfg.split.eval_end,
    }
    updates = {}
    for key, value in pairs.items():
        if key in _DATE_KEYS:
            split_kw[key] = _parse_date(value)
        elif key in _INT_KEYS:
            try:
                updates[key] = int(value)
            except ValueError as exc:
                raise ConfigError(f"{key}: expected integer, got {value!r}") from exc
        elif key in _FLOAT_KEYS:
            try:
                updates[key] = float(value)
            except ValueError as exc:
                raise ConfigError(f"{key}: expected number, got {value!r}") from exc
        elif key in _STR_KEYS:
            updates[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        updates["split"] = SplitSpec(**split_kw)
        return replace(cfg, **updates)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config_file(path) -> TrainConfig:
    return config_from_pairs(parse_key_values(Path(path).read_text()))


def config_to_pairs(cfg: TrainConfig) -> list[tuple[str, str]]:
    """Serialize a config to ordered pairs; inverse of config_from_pairs."""
    pairs: list[tuple[str, str]] = []
    for f in fields(cfg):
        if f.name == "split":
            for key in _DATE_KEYS:
                pairs.append((key, getattr(cfg.split, key).isoformat()))
        else:
            value = getattr(cfg, f.name)
            pairs.append((f.name, repr(value) if isinstance(value, float) else str(value)))
    return pairs
