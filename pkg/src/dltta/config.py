"""Flat ``key=value`` run configuration.

Blank lines and lines starting with ``#`` are ignored. Lists are comma
separated. Every key is listed in ``RunConfig``; unknown keys are rejected
and a config file must set all of ``REQUIRED_KEYS`` (the remaining keys fall
back to the defaults below). ``alpha`` left unset means "same as
``train_lr``".
"""

import dataclasses
from dataclasses import dataclass, fields
from typing import Optional, Tuple

from .engine import METHODS, AdaptConfig
from .errors import ConfigError, DlttaError
from .model import ADAPT_SUBSETS, NORM_MODES, TRAIN_OPTIMIZERS, NormPolicy
from .memory import SIMILARITIES
from .objective import OBJECTIVES
from .stream import SCHEDULE_PATTERNS, ShiftFamily, SourceSpec, make_schedule, make_stream

REQUIRED_KEYS = ("seed", "alpha", "batch_size", "retrieval_size", "capacity_steps")


@dataclass(frozen=True)
class RunConfig:
    # source data
    n_classes: int = 4
    dim: int = 8
    cluster_radius: float = 5.0
    cluster_std: float = 1.0
    means_seed: int = 0
    train_samples: int = 4000
    val_samples: int = 2000
    data_seed: int = 1
    # model and source training
    hidden: Tuple[int, ...] = (32, 32)
    adapt_subset: str = "bn_affine"
    model_seed: int = 0
    train_epochs: int = 20
    train_lr: float = 1.8
    train_optimizer: str = "momentum"
    train_momentum: float = 0.0
    train_batch_size: int = 64
    # adaptation
    method: str = "dltta"
    alpha: Optional[float] = None
    batch_size: int = 16
    retrieval_size: int = 12
    capacity_steps: int = 4
    steps_per_batch: int = 1
    objective: str = "entropy"
    norm_mode: str = "test_batch"
    ema_momentum: float = 0.1
    similarity: str = "l2"
    # test stream
    schedule: str = "alternating"
    n_segments: int = 10
    segment_length: int = 200
    mild_severity: float = 0.1
    severe_severity: float = 0.6
    rotation_mix: float = 1.0
    offset_scale: float = 4.0
    noise_scale: float = 0.3
    horizon: int = 0
    seed: int = 0
    # experiment drivers
    lr_multipliers: Tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0)
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    sweep_methods: Tuple[str, ...] = ("fixed", "dltta")
    d_values: Tuple[int, ...] = (6, 8, 10, 12, 14)
    n_orders: int = 5

    def __post_init__(self):
        choices = {
            "adapt_subset": ADAPT_SUBSETS, "train_optimizer": TRAIN_OPTIMIZERS,
            "method": METHODS, "objective": OBJECTIVES, "norm_mode": NORM_MODES,
            "similarity": SIMILARITIES, "schedule": SCHEDULE_PATTERNS,
        }
        for key, valid in choices.items():
            if getattr(self, key) not in valid:
                raise ConfigError(f"{key}={getattr(self, key)!r} is not one of {sorted(valid)}", key=key)
        for m in self.sweep_methods:
            if m not in METHODS:
                raise ConfigError(f"sweep_methods entry {m!r} is not one of {list(METHODS)}", key="sweep_methods")
        positive = ("train_lr", "cluster_std", "batch_size", "retrieval_size", "capacity_steps",
                    "steps_per_batch", "n_segments", "segment_length", "train_batch_size", "n_orders")
        for key in positive:
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be > 0", key=key)
        if self.alpha is not None and not self.alpha > 0:
            raise ConfigError("alpha must be > 0", key="alpha")
        if self.horizon < 0:
            raise ConfigError("horizon must be >= 0", key="horizon")
        if self.train_epochs < 0:
            raise ConfigError("train_epochs must be >= 0", key="train_epochs")
        if not self.lr_multipliers or not self.seeds or not self.d_values:
            raise ConfigError("lr_multipliers, seeds and d_values must be non-empty", key="lr_multipliers")

    @property
    def base_alpha(self):
        return self.train_lr if self.alpha is None else self.alpha

    @property
    def stream_length(self):
        return self.horizon or self.n_segments * self.segment_length

    def replace(self, **changes):
        try:
            return dataclasses.replace(self, **changes)
        except DlttaError as exc:
            raise ConfigError(str(exc), getattr(exc, "key", None)) from None

    # -- builders ---------------------------------------------------------

    def source_spec(self, n_samples=0, seed=None):
        return SourceSpec.default(self.n_classes, self.dim, self.cluster_radius, self.cluster_std,
                                  n_samples, self.data_seed if seed is None else seed, self.means_seed)

    def shift_family(self):
        return ShiftFamily(self.rotation_mix, self.offset_scale, self.noise_scale)

    def make_stream(self, seed=None):
        seed = self.seed if seed is None else seed
        schedule = make_schedule(self.schedule, self.n_segments, self.mild_severity,
                                 self.severe_severity, self.segment_length, seed, self.shift_family())
        return make_stream(self.source_spec(), schedule, self.batch_size, seed)

    def adapt_config(self, **overrides):
        kw = dict(method=self.method, alpha=self.base_alpha, batch_size=self.batch_size,
                  retrieval_size=self.retrieval_size, capacity_steps=self.capacity_steps,
                  steps_per_batch=self.steps_per_batch, objective=self.objective,
                  norm_policy=NormPolicy(self.norm_mode, self.ema_momentum),
                  similarity=self.similarity, seed=self.seed)
        kw.update(overrides)
        return AdaptConfig(**kw)

    # -- (de)serialization ------------------------------------------------

    def to_dict(self):
        """Resolved flat mapping (``alpha`` filled in)."""
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["alpha"] = self.base_alpha
        return out

    def dumps(self):
        lines = []
        for key, value in self.to_dict().items():
            lines.append(f"{key}={format_value(value)}")
        return "\n".join(lines) + "\n"


def format_value(value):
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_FIELD_TYPES = {
    f.name: f.type for f in fields(RunConfig)
}


def _convert(key, raw):
    kind = _FIELD_TYPES[key]
    text = str(raw).strip()
    try:
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float") or kind == Optional[float]:
            return float(text)
        if kind == Tuple[int, ...]:
            return tuple(int(v) for v in text.split(",") if v.strip())
        if kind == Tuple[float, ...]:
            return tuple(float(v) for v in text.split(",") if v.strip())
        if kind == Tuple[str, ...]:
            return tuple(v.strip() for v in text.split(",") if v.strip())
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r}", key=key) from None


def from_mapping(mapping, required=()):
    """Build a RunConfig from string or typed values over the defaults."""
    unknown = sorted(set(mapping) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]}", key=unknown[0])
    for key in required:
        if key not in mapping:
            raise ConfigError(f"missing required config key: {key}", key=key)
    values = {k: (_convert(k, v) if isinstance(v, str) else _coerce(k, v)) for k, v in mapping.items()}
    try:
        return RunConfig(**values)
    except DlttaError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def _coerce(key, value):
    if isinstance(value, list):
        return tuple(value)
    return value


def parse_config(text, required=REQUIRED_KEYS):
    mapping = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in mapping:
            raise ConfigError(f"line {lineno}: duplicate key {key}", key=key)
        mapping[key] = value
    return from_mapping(mapping, required)


def load_config(path, required=REQUIRED_KEYS):
    with open(path) as fh:
        return parse_config(fh.read(), required)
