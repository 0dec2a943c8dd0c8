"""Experiment configuration: pinned defaults, `key = value` files, validation.

Config files are UTF-8 text with one `key = value` pair per line and `#`
comments. Unknown keys are errors, as are malformed values.
"""

from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError

DATASETS = ("cleveland", "uci", "integrated")
MODES = ("centralized", "federated")
MODELS = ("mlp", "logreg")
DP_CHOICES = ("target", "sigma", "no-dp")


@dataclass
class ExperimentConfig:
    dataset: str = "cleveland"
    data_path: str = ""
    mode: str = "centralized"
    clients: int = 4
    partition: str = "iid"
    model: str = "mlp"
    hidden: tuple[int, ...] = (128, 64, 32, 16)
    epochs: int = 25
    local_epochs: int = 1
    batch_size: int = 32
    lr: float = 0.001
    optimizer: str = "adam"
    dropout: float = 0.2
    dp: str = "target"
    target_epsilon: float = 1.0
    noise_multiplier: float = 1.0
    delta: float = 1e-5
    clip_norm: float = 1.0
    sampling: str = "poisson"
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    test_frac: float = 0.2
    kfolds: int = 5
    run_id: str = ""
    out: str = ""
    grid_lr: tuple[float, ...] = (0.0005, 0.001, 0.005)
    grid_batch: tuple[int, ...] = (16, 32, 64)
    grid_dropout: tuple[float, ...] = (0.0, 0.2, 0.5)

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.dp not in DP_CHOICES:
            raise ConfigError(f"dp must be one of {DP_CHOICES}, got {self.dp!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.sampling not in ("poisson", "fixed"):
            raise ConfigError(f"sampling must be poisson or fixed, got {self.sampling!r}")
        if self.partition not in ("iid", "by_site"):
            raise ConfigError(f"partition must be iid or by_site, got {self.partition!r}")
        if self.epochs < 1 or self.local_epochs < 1:
            raise ConfigError("epochs and local_epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not 0.0 < self.test_frac < 1.0:
            raise ConfigError("test_frac must lie in (0, 1)")

    def default_run_id(self) -> str:
        if self.run_id:
            return self.run_id
        mode = "central" if self.mode == "centralized" else f"fed{self.clients}"
        if self.dp == "no-dp":
            privacy = "nodp"
        elif self.dp == "target":
            privacy = f"eps{self.target_epsilon:g}"
        else:
            privacy = f"sigma{self.noise_multiplier:g}"
        return (
            f"{self.dataset}-{self.model}-{mode}-{self.optimizer}"
            f"-e{self.epochs}-{privacy}"
        )


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    try:
        if key in ("hidden",):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if key in ("seeds", "grid_batch"):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if key in ("grid_lr", "grid_dropout"):
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if key in ("clients", "epochs", "local_epochs", "batch_size", "kfolds"):
            return int(raw)
        if key in (
            "lr", "dropout", "target_epsilon", "noise_multiplier",
            "delta", "clip_norm", "test_frac",
        ):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse value {raw!r} for key {key!r}") from None


def parse_config_text(text: str) -> dict:
    """Parses `key = value` lines into a typed mapping; unknown keys error."""
    values: dict = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {line_no}: expected `key = value`")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {line_no}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {line_no}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


def load_config(path: str | None, overrides: dict | None = None) -> ExperimentConfig:
    values: dict = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                values = parse_config_text(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    if overrides:
        for key in overrides:
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown config key {key!r}")
        values.update(overrides)
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def with_updates(cfg: ExperimentConfig, **updates) -> ExperimentConfig:
    return replace(cfg, **updates)
