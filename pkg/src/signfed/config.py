"""Experiment configuration: YAML schema (version 1), validation, defaults.

A config file is a mapping with these sections, every key optional unless noted::

    schema_version: 1          # required
    seed: 0
    workers: 1
    data:      {source, path, num_classes, dim, per_class, separation, test_fraction}
    partition: {mode, per_client}
    model:     {kind, hidden_dim}
    protocol:  {name, N, C, rounds, local_iters, batch_size, lr, gamma}
    privacy:   {sigma, delta, nu, failures, clip, clip_mode, t}
    adversary: {kind, fraction, per_round, sigma_adv, eta_adv,
                source_class, target_class, collude, omit_dp_noise}

Unknown keys are rejected so typos fail loudly. Errors name the offending
field as ``section.key``.
"""

import dataclasses
from dataclasses import dataclass, field

import yaml

from signfed.adversary import AdversaryConfig
from signfed.errors import ConfigError
from signfed.theory import PROTOCOLS

SCHEMA_VERSION = 1


@dataclass
class DataConfig:
    source: str = "synthetic"
    path: str = ""
    num_classes: int = 10
    dim: int = 20
    per_class: int = 600
    separation: float = 3.0
    test_fraction: float = 0.2

    def validate(self):
        if self.source not in ("synthetic", "mnist"):
            raise ConfigError(f"unknown source {self.source!r}", field="data.source")
        if self.source == "mnist" and not self.path:
            raise ConfigError("required when source is mnist", field="data.path")
        if self.source == "synthetic":
            if self.num_classes < 2:
                raise ConfigError("must be >= 2", field="data.num_classes")
            if self.per_class < 1:
                raise ConfigError("must be >= 1", field="data.per_class")
            if self.dim < self.num_classes:
                raise ConfigError("must be >= num_classes", field="data.dim")
            if not 0 < self.test_fraction < 1:
                raise ConfigError("must lie in (0, 1)", field="data.test_fraction")


@dataclass
class PartitionConfig:
    mode: str = "iid"
    per_client: int = 40

    def validate(self):
        if self.mode not in ("iid", "label-sorted-shards"):
            raise ConfigError(f"unknown mode {self.mode!r}", field="partition.mode")
        if self.per_client < 1:
            raise ConfigError("must be >= 1", field="partition.per_client")


@dataclass
class ModelConfig:
    kind: str = "logistic-regression"
    hidden_dim: int = 0


@dataclass
class ProtocolConfig:
    name: str = "signfed"
    N: int = 100
    C: float = 0.1
    rounds: int = 100
    local_iters: int = 5
    batch_size: int = 10
    lr: float = 0.05
    gamma: float = None

    def validate(self):
        if self.name not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.name!r}", field="protocol.name")
        if self.N < 1:
            raise ConfigError("must be >= 1", field="protocol.N")
        if not 0 < self.C <= 1:
            raise ConfigError("must lie in (0, 1]", field="protocol.C")
        if self.rounds < 0:
            raise ConfigError("must be >= 0", field="protocol.rounds")
        if self.local_iters < 1:
            raise ConfigError("must be >= 1", field="protocol.local_iters")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", field="protocol.batch_size")
        if not self.lr > 0:
            raise ConfigError("must be > 0", field="protocol.lr")
        if self.gamma is None:
            self.gamma = 0.005 if self.name == "dp-signfed" else 0.001
        if self.name in ("signfed", "dp-signfed") and not self.gamma > 0:
            raise ConfigError("must be > 0", field="protocol.gamma")

    @property
    def clients_per_round(self):
        return max(1, int(round(self.C * self.N)))


@dataclass
class PrivacyConfig:
    sigma: float = 1.0
    delta: float = 1e-5
    nu: float = 1e-4
    failures: int = 0
    clip: float = 1.0
    clip_mode: str = "fixed"
    t: float = 12.0

    def validate(self):
        if self.sigma < 0:
            raise ConfigError("must be >= 0", field="privacy.sigma")
        if not 0 < self.delta < 1:
            raise ConfigError("must lie in (0, 1)", field="privacy.delta")
        if not 0 < self.nu < 1:
            raise ConfigError("must lie in (0, 1)", field="privacy.nu")
        if self.failures < 0:
            raise ConfigError("must be >= 0", field="privacy.failures")
        if not self.clip > 0:
            raise ConfigError("must be > 0", field="privacy.clip")
        if self.clip_mode not in ("fixed", "median"):
            raise ConfigError(f"unknown mode {self.clip_mode!r}", field="privacy.clip_mode")
        if not self.t > 0:
            raise ConfigError("must be > 0", field="privacy.t")


@dataclass
class ExperimentConfig:
    seed: int = 0
    workers: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    privacy: PrivacyConfig = field(default_factory=PrivacyConfig)
    adversary: AdversaryConfig = field(default_factory=AdversaryConfig)

    def validate(self):
        if self.workers < 1:
            raise ConfigError("must be >= 1", field="workers")
        if self.seed < 0:
            raise ConfigError("must be >= 0", field="seed")
        self.data.validate()
        self.partition.validate()
        self.protocol.validate()
        self.privacy.validate()
        if self.privacy.failures >= self.protocol.clients_per_round and self.protocol.name.startswith("dp"):
            raise ConfigError("must be below the clients per round", field="privacy.failures")
        if self.model.kind not in ("logistic-regression", "mlp-1-hidden"):
            raise ConfigError(f"unknown model kind {self.model.kind!r}", field="model.kind")
        if self.model.kind == "mlp-1-hidden" and self.model.hidden_dim < 1:
            raise ConfigError("must be >= 1 for mlp-1-hidden", field="model.hidden_dim")
        return self

    def to_dict(self):
        out = {"schema_version": SCHEMA_VERSION}
        out.update(dataclasses.asdict(self))
        return out


_SECTIONS = {
    "data": DataConfig,
    "partition": PartitionConfig,
    "model": ModelConfig,
    "protocol": ProtocolConfig,
    "privacy": PrivacyConfig,
    "adversary": AdversaryConfig,
}


def _coerce(value, default, name):
    """Light type check against the dataclass default."""
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", field=name)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", field=name)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", field=name)
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"expected a string, got {value!r}", field=name)
    return value


def _build_section(cls, raw, section):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("expected a mapping", field=section)
    defaults = cls() if cls is not AdversaryConfig else None
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        name = f"{section}.{key}"
        if key not in known:
            raise ConfigError("unknown key", field=name)
        default = getattr(defaults, key) if defaults is not None else known[key].default
        if key == "gamma" and value is not None:
            default = 0.0
        kwargs[key] = _coerce(value, default, name)
    return cls(**kwargs)


def from_dict(raw):
    """Build and validate an :class:`ExperimentConfig` from a parsed mapping."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping", field="<root>")
    version = raw.get("schema_version")
    if version is None:
        raise ConfigError("missing", field="schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported version {version!r}, expected {SCHEMA_VERSION}",
                          field="schema_version")
    top = {"schema_version", "seed", "workers", *_SECTIONS}
    for key in raw:
        if key not in top:
            raise ConfigError("unknown key", field=str(key))
    sections = {name: _build_section(cls, raw.get(name), name) for name, cls in _SECTIONS.items()}
    cfg = ExperimentConfig(
        seed=_coerce(raw.get("seed", 0), 0, "seed"),
        workers=_coerce(raw.get("workers", 1), 1, "workers"),
        **sections,
    )
    return cfg.validate()


def load(path):
    """Parse a YAML config file."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}", field="config") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"not valid YAML: {exc}", field="config") from exc
    return from_dict(raw)


def dump(cfg):
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
