"""Run configuration: strict JSON in, fully resolved JSON out.

Shorthands accepted on input only:

* ``"mode"``: ``sqakd`` (KL only), ``ce`` (CE only) or ``kd`` (combined)
* ``"bits": "W2A4"``: weight / activation bit-widths

Overrides use dotted paths (``loss.rho=4``); the value is parsed as JSON when
possible and kept as a string otherwise.
"""
from __future__ import annotations

import copy
import json
import re
from dataclasses import MISSING, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Optional, get_type_hints

from .distill import LOSS_MODES, LossConfig
from .models import ModelConfig
from .quantizers import (
    GradientEstimator,
    MuSchedule,
    QuantizerParams,
    QuantizerSpec,
    canonical_family,
    default_params,
)


class ConfigError(ValueError):
    pass


MODE_SHORTHANDS = {"sqakd": "KL_only", "ce": "CE_only", "kd": "Combined"}
_BITS = re.compile(r"^W([1-8])A([1-8])$")


def parse_bits(bits: str) -> tuple[int, int]:
    m = _BITS.match(str(bits).strip().upper())
    if not m:
        raise ConfigError(f"bits must look like 'W2A4' with widths 1..8, got {bits!r}")
    return int(m.group(1)), int(m.group(2))


def loss_mode(name: str) -> str:
    mode = MODE_SHORTHANDS.get(str(name).lower(), name)
    if mode not in LOSS_MODES:
        raise ConfigError(f"unknown loss mode {name!r}")
    return mode


@dataclass
class ModelSection:
    arch: str = "mlp"
    num_classes: int = 3
    widths: list = field(default_factory=lambda: [2, 32, 32, 3])
    input_shape: list = field(default_factory=list)
    channels: list = field(default_factory=list)
    fc: list = field(default_factory=list)
    skip_first_last: bool = True


@dataclass
class QuantTemplate:
    family: str = "Uniform"
    v: float = 0.0
    m: float = 1.0
    clip_params: Optional[list] = None
    round_params: Optional[list] = None


@dataclass
class QuantSection:
    weight: QuantTemplate = field(default_factory=lambda: QuantTemplate("Uniform", -1.0, 1.0))
    activation: QuantTemplate = field(default_factory=lambda: QuantTemplate("Uniform", 0.0, 4.0))


@dataclass
class ScheduleSection:
    policy: str = "constant"
    start_step: int = 0
    end_step: int = 0
    mu_final: float = 0.0
    stages: list = field(default_factory=list)


@dataclass
class EstimatorSection:
    rule: str = "AdditiveDiscretization"
    mu: float = 0.1
    delta: float = 0.0
    schedule: ScheduleSection = field(default_factory=ScheduleSection)


@dataclass
class LossSection:
    mode: str = "KL_only"
    lam: float = field(default=0.5, metadata={"key": "lambda"})
    rho: float = 4.0
    rho2_scaling: bool = True


@dataclass
class OptimizerSection:
    name: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8


@dataclass
class LRScheduleSection:
    name: str = "constant"
    total_steps: Optional[int] = None
    milestones: list = field(default_factory=list)
    factor: float = 0.1


@dataclass
class TrainSection:
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    lr_schedule: LRScheduleSection = field(default_factory=LRScheduleSection)
    epochs: int = 20
    batch_size: int = 64
    init: str = "from_teacher"
    augment: str = "none"
    shuffle: bool = True
    quant_lr: Optional[float] = None


@dataclass
class TeacherSection:
    checkpoint: Any = None  # path, list of paths (ensemble) or null
    pretrain_loss: str = "CE_only"
    label_smoothing: float = 0.1
    epochs: Optional[int] = None
    lr: Optional[float] = None
    momentum: Optional[float] = None


@dataclass
class DataSection:
    source: str = "blobs"
    n_per_class: int = 1000
    test_n_per_class: int = 300
    classes: int = 3
    dim: int = 2
    spread: float = 1.0
    seed: int = 0
    test_seed: int = 1
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    shape: list = field(default_factory=lambda: [3, 32, 32])


@dataclass
class EvalSection:
    checkpoint: Optional[str] = None


@dataclass
class AblateSection:
    axes: dict = field(default_factory=dict)
    workers: int = 1


@dataclass
class RunConfig:
    model: ModelSection
    bits: str = "W2A2"
    seed: int = 0
    out: str = "runs/default"
    log_wall_clock: bool = False
    quant: QuantSection = field(default_factory=QuantSection)
    estimator: EstimatorSection = field(default_factory=EstimatorSection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablate: AblateSection = field(default_factory=AblateSection)

    # -- derived views used by the training code --

    def model_config(self, quantized: bool = True) -> ModelConfig:
        m = self.model
        quant = None
        if quantized:
            bw, ba = parse_bits(self.bits)
            quant = (_spec(self.quant.weight, bw, "weights"), _spec(self.quant.activation, ba, "activations"))
        return ModelConfig(m.arch, m.num_classes, tuple(m.widths), tuple(m.input_shape),
                           tuple(m.channels), tuple(m.fc), quant, m.skip_first_last)

    def loss_config(self) -> LossConfig:
        l = self.loss
        return LossConfig(l.mode, l.lam, l.rho, l.rho2_scaling)

    def gradient_estimator(self) -> GradientEstimator:
        e = self.estimator
        s = e.schedule
        sched = MuSchedule(s.policy, s.start_step, s.end_step, s.mu_final, tuple(tuple(x) for x in s.stages))
        return GradientEstimator(e.rule, e.mu, e.delta, sched)

    def teacher_checkpoints(self) -> list[str]:
        c = self.teacher.checkpoint
        if c is None:
            return []
        return [c] if isinstance(c, str) else list(c)

    def to_dict(self) -> dict:
        return _to_dict(self)


def _spec(t: QuantTemplate, b: int, target: str) -> QuantizerSpec:
    params = None
    if t.clip_params is not None or t.round_params is not None:
        base = default_params(canonical_family(t.family), target)
        params = QuantizerParams(
            tuple(t.clip_params) if t.clip_params is not None else base.clip_params,
            tuple(t.round_params) if t.round_params is not None else base.round_params,
        )
    return QuantizerSpec(t.family, b, t.v, t.m, params, target)


def _key(f) -> str:
    return f.metadata.get("key", f.name)


def _to_dict(obj) -> Any:
    if is_dataclass(obj):
        return {_key(f): _to_dict(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_dict(v) for k, v in obj.items()}
    return obj


_SCALARS = {int: (int,), float: (int, float), bool: (bool,), str: (str,)}


def _check_scalar(value, typ, where: str):
    allowed = _SCALARS.get(typ)
    if allowed is None:
        return value
    if isinstance(value, bool) and typ is not bool:
        raise ConfigError(f"{where}: expected {typ.__name__}, got a boolean")
    if not isinstance(value, allowed):
        raise ConfigError(f"{where}: expected {typ.__name__}, got {type(value).__name__}")
    return float(value) if typ is float else value


def _unwrap_optional(typ):
    args = getattr(typ, "__args__", None)
    if args and type(None) in args:
        inner = [a for a in args if a is not type(None)]
        return inner[0], True
    return typ, False


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(data).__name__}")
    hints = get_type_hints(cls)
    known = {_key(f): f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        path = f"{where}.{unknown[0]}" if where else unknown[0]
        raise ConfigError(f"unknown key '{path}'")
    kwargs = {}
    for key, f in known.items():
        path = f"{where}.{key}" if where else key
        if key not in data:
            if f.default is MISSING and f.default_factory is MISSING:
                raise ConfigError(f"missing required key '{path}'")
            continue
        typ, optional = _unwrap_optional(hints[f.name])
        value = data[key]
        if value is None:
            if not optional and typ is not Any:
                raise ConfigError(f"{path}: null is not allowed")
            kwargs[f.name] = None
        elif is_dataclass(typ):
            kwargs[f.name] = _build(typ, value, path)
        elif typ in (list, dict):
            if not isinstance(value, typ):
                raise ConfigError(f"{path}: expected {typ.__name__}, got {type(value).__name__}")
            kwargs[f.name] = copy.deepcopy(value)
        else:
            kwargs[f.name] = _check_scalar(value, typ, path)
    return cls(**kwargs)


def _expand_shorthands(d: dict) -> dict:
    d = copy.deepcopy(d)
    if "mode" in d:
        mode = d.pop("mode")
        d.setdefault("loss", {})
        if not isinstance(d["loss"], dict):
            raise ConfigError("loss: expected an object")
        d["loss"]["mode"] = loss_mode(mode)
    return d


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides) -> dict:
    d = copy.deepcopy(d)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        path, text = item.split("=", 1)
        set_path(d, path.strip(), _parse_value(text.strip()))
    return d


def set_path(d: dict, path: str, value) -> None:
    parts = path.split(".")
    cur = d
    for p in parts[:-1]:
        nxt = cur.get(p)
        if nxt is None:
            nxt = cur[p] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"override path '{path}': '{p}' is not an object")
        cur = nxt
    cur[parts[-1]] = value


def validate(cfg: RunConfig) -> RunConfig:
    """Construct every sub-config once so bad values fail at parse time."""
    try:
        cfg.loss.mode = loss_mode(cfg.loss.mode)
        parse_bits(cfg.bits)
        cfg.bits = cfg.bits.strip().upper()
        cfg.model_config(quantized=True)
        cfg.loss_config()
        cfg.gradient_estimator()
        if cfg.teacher.pretrain_loss not in ("CE_only", "label_smoothing"):
            raise ConfigError(
                f"teacher.pretrain_loss must be 'CE_only' or 'label_smoothing', got {cfg.teacher.pretrain_loss!r}"
            )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    t = cfg.train
    if t.epochs < 1:
        raise ConfigError(f"train.epochs must be >= 1, got {t.epochs}")
    if t.batch_size < 1:
        raise ConfigError(f"train.batch_size must be >= 1, got {t.batch_size}")
    if t.init not in ("from_teacher", "random"):
        raise ConfigError(f"train.init must be 'from_teacher' or 'random', got {t.init!r}")
    if t.optimizer.name not in ("sgd", "adam"):
        raise ConfigError(f"train.optimizer.name must be 'sgd' or 'adam', got {t.optimizer.name!r}")
    if t.lr_schedule.name not in ("constant", "cosine", "step"):
        raise ConfigError(f"unknown lr schedule {t.lr_schedule.name!r}")
    if cfg.data.source not in ("blobs", "binary"):
        raise ConfigError(f"data.source must be 'blobs' or 'binary', got {cfg.data.source!r}")
    return cfg


def config_from_dict(d: dict, overrides=(), seed: Optional[int] = None) -> RunConfig:
    d = _expand_shorthands(d)
    d = apply_overrides(d, overrides)
    if seed is not None:
        d["seed"] = seed
    return validate(_build(RunConfig, d, ""))


def parse_config(path, overrides=(), seed: Optional[int] = None) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text, object_pairs_hook=_no_duplicates)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return config_from_dict(data, overrides, seed)


def _no_duplicates(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise ConfigError(f"duplicate key '{k}'")
        out[k] = v
    return out


def write_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


ABLATION_AXES = (
    "backward_estimator",
    "epochs",
    "forward_family",
    "init",
    "lambda",
    "loss_mode",
    "rho",
    "teacher_checkpoint",
    "teacher_checkpoints",
    "teacher_pretrain_loss",
)


def apply_axis(cfg: RunConfig, name: str, value) -> RunConfig:
    d = cfg.to_dict()
    if name == "loss_mode":
        d["loss"]["mode"] = loss_mode(value)
    elif name == "lambda":
        d["loss"]["lambda"] = value
    elif name == "rho":
        d["loss"]["rho"] = value
    elif name == "init":
        d["train"]["init"] = value
    elif name == "epochs":
        d["train"]["epochs"] = value
    elif name == "forward_family":
        if isinstance(value, dict):
            for part in ("weight", "activation"):
                if part in value:
                    d["quant"][part]["family"] = value[part]
        elif str(value).lower() == "dorefa":
            d["quant"]["weight"]["family"] = "DoReFaWeight"
            d["quant"]["activation"]["family"] = "DoReFaActivation"
        else:
            d["quant"]["weight"]["family"] = value
            d["quant"]["activation"]["family"] = value
    elif name == "backward_estimator":
        if isinstance(value, dict):
            d["estimator"].update(value)
        else:
            d["estimator"]["rule"] = value
    elif name in ("teacher_checkpoint", "teacher_checkpoints"):
        d["teacher"]["checkpoint"] = value
    elif name == "teacher_pretrain_loss":
        d["teacher"]["pretrain_loss"] = value
    else:
        raise ConfigError(f"unknown ablation axis {name!r}; expected one of {ABLATION_AXES}")
    return validate(_build(RunConfig, d, ""))
