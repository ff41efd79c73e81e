"""Experiment configuration: YAML/JSON file -> validated, fully defaulted dataclasses.

Unknown keys are rejected. Every default is materialised so ``to_dict`` echoes
the complete configuration that a run actually used.
"""
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigCrossFieldError, ConfigParseError, ConfigSchemaError

METHODS = ("diversehead-df", "diversehead-dt", "diversemodel", "base", "shs", "input-perturb")
MULTIHEAD_METHODS = ("diversehead-df", "diversehead-dt")


@dataclass
class ModelConfig:
    heads: int | None = None          # default: 10 for multi-head methods, 1 otherwise
    trunk: str = "desk"
    width: int = 32
    dropout: float = 0.5
    dropout_enabled: bool | None = None  # default: True only for diversehead-dt
    members: list = field(default_factory=lambda: ["pspnet", "unet", "segnet"])
    arch: str | None = None  # single-model methods: train one member architecture instead of the desk net


@dataclass
class LossConfig:
    lam: float = field(default=1.0, metadata={"key": "lambda"})
    phi: float = 1.0
    phi_mode: str = "fixed"
    ignore_index: int = 255


@dataclass
class OptimConfig:
    base_lr: float = 0.01
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    branch_lr_mult: float | None = None  # default: number of branches sharing the mean loss


@dataclass
class ScheduleConfig:
    epochs: int = 30
    eval_every: int = 1
    sup_warmup_epochs: int = 3  # supervised-only epochs before the unsupervised term joins


@dataclass
class PerturbConfig:
    freeze_count: int | None = None
    noise_sd: float = 0.01


@dataclass
class DataConfig:
    manifest: str | None = None
    synth: dict | None = None
    labelled_fraction: float | None = None
    seed: int = 0


@dataclass
class ExperimentConfig:
    method: str
    data: DataConfig
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    output_dir: str = "runs/experiment"
    overrides: list = field(default_factory=list)

    def to_dict(self):
        return _to_dict(self)

    def hash(self):
        echo = self.to_dict()
        echo.pop("output_dir", None)
        echo.pop("overrides", None)
        blob = json.dumps(echo, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _key(f):
    return f.metadata.get("key", f.name)


def _to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {_key(f): _to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, list):
        return [_to_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_dict(v) for k, v in obj.items()}
    return obj


_SCALARS = {"int": int, "float": (int, float), "str": str, "bool": bool, "dict": dict, "list": list}


def _check_type(value, annotation, key_path):
    if value is None:
        if "None" in annotation:
            return value
        raise ConfigSchemaError(key_path, "must not be null")
    for name, typ in _SCALARS.items():
        if annotation.startswith(name):
            if isinstance(value, bool) and name in ("int", "float"):
                break
            if isinstance(value, typ):
                return float(value) if name == "float" else value
            break
    raise ConfigSchemaError(key_path, f"expected {annotation}, got {type(value).__name__} {value!r}")


def _type_name(t):
    return t.__name__ if isinstance(t, type) else str(t)


def _build(cls, raw, prefix):
    if not isinstance(raw, dict):
        raise ConfigSchemaError(prefix or "<root>", f"expected a mapping, got {type(raw).__name__}")
    fields = {_key(f): f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigSchemaError(f"{prefix}{unknown[0]}", "unknown key")
    kwargs = {}
    for key, f in fields.items():
        path = f"{prefix}{key}"
        if key not in raw:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise ConfigSchemaError(path, "required key missing")
            continue
        value = raw[key]
        sub = _NESTED.get(f.name) if cls is ExperimentConfig else None
        if sub is not None:
            kwargs[f.name] = _build(sub, value, path + ".")
        else:
            kwargs[f.name] = _check_type(value, _type_name(f.type), path)
    return cls(**kwargs)


_NESTED = {
    "data": DataConfig, "model": ModelConfig, "loss": LossConfig, "optim": OptimConfig,
    "schedule": ScheduleConfig, "perturb": PerturbConfig,
}


def apply_override(raw, assignment):
    """Apply ``a.b.c=value`` to a raw config mapping; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigSchemaError(assignment, "override must look like key.path=value")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigSchemaError(key, "cannot descend into a non-mapping value")
    node[parts[-1]] = yaml.safe_load(text)
    return raw


def config_from_dict(raw, overrides=()):
    raw = json.loads(json.dumps(raw))  # deep copy, plain types
    raw.pop("overrides", None)
    for o in overrides:
        apply_override(raw, o)
    cfg = _build(ExperimentConfig, raw, "")
    cfg.overrides = list(overrides)
    _apply_method_defaults(cfg)
    validate(cfg)
    return cfg


def load_config(path, overrides=()):
    path = Path(path)
    if not path.exists():
        raise ConfigParseError(path, "file does not exist")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigParseError(path, f"cannot parse: {e}") from e
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigParseError(path, "top level must be a mapping")
    return config_from_dict(raw, overrides)


def _apply_method_defaults(cfg):
    multi = cfg.method in MULTIHEAD_METHODS
    if cfg.model.heads is None:
        cfg.model.heads = 10 if multi else 1
    if cfg.optim.branch_lr_mult is None:
        cfg.optim.branch_lr_mult = 3.0 if cfg.method == "diversemodel" else float(cfg.model.heads)
    if cfg.model.dropout_enabled is None:
        cfg.model.dropout_enabled = cfg.method == "diversehead-dt"


def validate(cfg):
    if cfg.method not in METHODS:
        raise ConfigSchemaError("method", f"must be one of {', '.join(METHODS)}")
    m, d = cfg.model, cfg.data
    if m.heads < 1:
        raise ConfigSchemaError("model.heads", "must be >= 1")
    if not 0.0 <= m.dropout < 1.0:
        raise ConfigSchemaError("model.dropout", "must lie in [0, 1)")
    if cfg.loss.lam < 0:
        raise ConfigSchemaError("loss.lambda", "must be >= 0")
    if cfg.loss.phi < 0:
        raise ConfigSchemaError("loss.phi", "must be >= 0")
    if cfg.loss.phi_mode not in ("fixed", "learnable"):
        raise ConfigSchemaError("loss.phi_mode", "must be 'fixed' or 'learnable'")
    if cfg.optim.batch_size < 1:
        raise ConfigSchemaError("optim.batch_size", "must be >= 1")
    if cfg.optim.branch_lr_mult <= 0:
        raise ConfigSchemaError("optim.branch_lr_mult", "must be > 0")
    if cfg.optim.base_lr <= 0:
        raise ConfigSchemaError("optim.base_lr", "must be > 0")
    if cfg.schedule.epochs < 0:
        raise ConfigSchemaError("schedule.epochs", "must be >= 0")
    if cfg.schedule.sup_warmup_epochs < 0:
        raise ConfigSchemaError("schedule.sup_warmup_epochs", "must be >= 0")
    if cfg.schedule.eval_every < 1:
        raise ConfigSchemaError("schedule.eval_every", "must be >= 1")
    if (d.manifest is None) == (d.synth is None):
        raise ConfigCrossFieldError("data", "give exactly one of data.manifest or data.synth")
    if d.labelled_fraction is not None and not 0 < d.labelled_fraction <= 1:
        raise ConfigSchemaError("data.labelled_fraction", "must lie in (0, 1]")

    if cfg.method == "diversehead-df" and m.dropout_enabled:
        raise ConfigCrossFieldError("model.dropout_enabled", "dynamic freezing runs without head dropout")
    if cfg.method == "diversehead-dt" and (not m.dropout_enabled or m.dropout == 0):
        raise ConfigCrossFieldError("model.dropout_enabled", "dropout mode needs dropout enabled with a rate > 0")
    if cfg.method in MULTIHEAD_METHODS and m.heads < 2:
        raise ConfigCrossFieldError("model.heads", f"{cfg.method} needs at least 2 heads")
    if cfg.method == "shs" and m.heads != 1:
        raise ConfigCrossFieldError("model.heads", "single-head self-training needs exactly 1 head")
    if cfg.method == "diversemodel" and len(m.members) != 3:
        raise ConfigCrossFieldError("model.members", "cross-model training needs exactly 3 member networks")
    if m.arch is not None:
        if cfg.method not in ("base", "shs", "input-perturb"):
            raise ConfigCrossFieldError("model.arch", "only single-model methods (base, shs, input-perturb) take an arch")
        if m.heads != 1:
            raise ConfigCrossFieldError("model.heads", "a member architecture has a single output")
    fc = cfg.perturb.freeze_count
    if fc is not None:
        if cfg.method != "diversehead-df":
            raise ConfigCrossFieldError("perturb.freeze_count", "only meaningful for diversehead-df")
        if not 0 <= fc <= m.heads:
            raise ConfigCrossFieldError("perturb.freeze_count", f"must lie in [0, {m.heads}]")
    if cfg.method == "input-perturb" and not cfg.perturb.noise_sd > 0:
        raise ConfigCrossFieldError("perturb.noise_sd", "input perturbation needs sd > 0")
    return cfg
