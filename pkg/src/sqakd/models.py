"""Small MLP / CNN classifiers with optional per-layer fake quantization.

A model stores its full-precision latent parameters as numpy arrays keyed by
name. Quantized weights are recomputed from them on every forward pass, so
the optimizer only ever touches the latent values.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .quantizers import GradientEstimator, QuantizerParams, QuantizerSpec, attach_quantizer
from .tensor import ShapeError, Tape, Tensor

MAGIC = b"SQKD"
VERSION = 1


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """``arch`` is ``"mlp"`` (``widths`` = input, hidden..., classes) or ``"cnn"``
    (``input_shape`` = C,H,W; conv ``channels``; hidden ``fc`` widths)."""

    arch: str = "mlp"
    num_classes: int = 3
    widths: tuple = (2, 32, 32, 3)
    input_shape: tuple = ()
    channels: tuple = ()
    fc: tuple = ()
    quant: Optional[tuple] = None  # (weight template, activation template)
    skip_first_last: bool = True

    def __post_init__(self):
        for name in ("widths", "input_shape", "channels", "fc"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.num_classes < 1:
            raise ModelError("num_classes must be positive")
        if self.arch == "mlp":
            if len(self.widths) < 3:
                raise ModelError("an MLP needs at least one hidden layer")
            if self.widths[-1] != self.num_classes:
                raise ModelError(f"last MLP width {self.widths[-1]} != num_classes {self.num_classes}")
            if any(w <= 0 for w in self.widths):
                raise ModelError(f"zero-width layer in {self.widths}")
        elif self.arch == "cnn":
            if len(self.input_shape) != 3:
                raise ModelError("cnn needs input_shape (C, H, W)")
            if not self.channels and not self.fc:
                raise ModelError("a CNN needs at least one hidden layer")
            if any(w <= 0 for w in self.channels + self.fc + self.input_shape):
                raise ModelError("zero-width layer in CNN config")
        else:
            raise ModelError(f"unknown architecture {self.arch!r}")
        if self.quant is not None:
            if len(self.quant) != 2 or any(q is None for q in self.quant):
                raise ModelError("quant needs both a weight and an activation template")
            object.__setattr__(self, "quant", tuple(self.quant))

    @property
    def quantized(self) -> bool:
        return self.quant is not None

    def without_quant(self) -> "ModelConfig":
        return ModelConfig(self.arch, self.num_classes, self.widths, self.input_shape,
                           self.channels, self.fc, None, self.skip_first_last)

    def layer_shapes(self) -> list[tuple[str, tuple]]:
        """(kind, weight shape) per layer in forward order."""
        if self.arch == "mlp":
            return [("fc", (a, b)) for a, b in zip(self.widths[:-1], self.widths[1:])]
        c, h, w = self.input_shape
        out = []
        for ch in self.channels:
            out.append(("conv", (ch, c, 3, 3)))
            if h % 2 or w % 2:
                raise ModelError(f"spatial size {h}x{w} is not divisible by the 2x2 pool")
            c, h, w = ch, h // 2, w // 2
        dims = [c * h * w, *self.fc, self.num_classes]
        out.extend(("fc", (a, b)) for a, b in zip(dims[:-1], dims[1:]))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["quant"] = None if self.quant is None else [_spec_dict(q) for q in self.quant]
        for k in ("widths", "input_shape", "channels", "fc"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("quant") is not None:
            d["quant"] = tuple(_spec_from_dict(q) for q in d["quant"])
        return cls(**d)


def _spec_dict(spec: QuantizerSpec) -> dict:
    return {
        "family": spec.family, "b": spec.b, "v": spec.v, "m": spec.m, "target": spec.target,
        "params": {"clip_params": list(spec.params.clip_params),
                   "round_params": list(spec.params.round_params)},
    }


def _spec_from_dict(d) -> QuantizerSpec:
    if isinstance(d, QuantizerSpec):
        return d
    d = dict(d)
    p = d.pop("params", None)
    if p is not None:
        d["params"] = QuantizerParams(tuple(p.get("clip_params", ())), tuple(p.get("round_params", ())))
    return QuantizerSpec(**d)


@dataclass
class Layer:
    kind: str
    weight: str
    bias: str
    wq: Optional[QuantizerSpec] = None
    aq: Optional[QuantizerSpec] = None
    wq_params: list = field(default_factory=list)
    aq_params: list = field(default_factory=list)


class Model:
    def __init__(self, config: ModelConfig, params: dict, layers: list[Layer]):
        self.config = config
        self.params = params
        self.layers = layers
        self.estimator = GradientEstimator()

    @property
    def quantized(self) -> bool:
        return any(l.wq is not None or l.aq is not None for l in self.layers)

    def latent_names(self) -> list[str]:
        out = []
        for l in self.layers:
            out += [l.weight, l.bias]
        return out

    def quant_param_names(self) -> list[str]:
        out = []
        for l in self.layers:
            out += l.wq_params + l.aq_params
        return out

    def watch(self, tape: Tape) -> dict:
        """Register every parameter as a leaf on ``tape``."""
        return {name: tape.leaf(arr, name) for name, arr in self.params.items()}

    def snapshot(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}

    def __repr__(self) -> str:
        return f"Model({self.config.arch}, layers={len(self.layers)}, quantized={self.quantized})"


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    rng = np.random.default_rng(seed)
    shapes = config.layer_shapes()
    params: dict[str, np.ndarray] = {}
    layers = []
    for i, (kind, shape) in enumerate(shapes):
        fan_in = shape[0] if kind == "fc" else int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        wname, bname = f"layer{i}.weight", f"layer{i}.bias"
        params[wname] = rng.uniform(-bound, bound, size=shape)
        params[bname] = np.zeros(shape[1] if kind == "fc" else shape[0])
        layer = Layer(kind, wname, bname)
        edge = i == 0 or i == len(shapes) - 1
        if config.quant is not None and not (config.skip_first_last and edge):
            wt, at = config.quant
            layer.wq = wt
            layer.aq = None if i == len(shapes) - 1 else at
            for tag, spec in (("wq", layer.wq), ("aq", layer.aq)):
                if spec is None:
                    continue
                names = []
                for j, value in enumerate(spec.params.values()):
                    name = f"layer{i}.{tag}.p{j}"
                    params[name] = np.array([value])
                    names.append(name)
                setattr(layer, f"{tag}_params", names)
        layers.append(layer)
    return Model(config, params, layers)


def forward(model: Model, batch, step: int = 0, params: Optional[dict] = None) -> Tensor:
    """Pre-softmax logits. ``params`` maps names to (on-tape) tensors."""
    cfg = model.config
    if params is None:
        params = {k: Tensor(v) for k, v in model.params.items()}
    h = T.tensor(batch)
    if cfg.arch == "mlp":
        if h.ndim != 2 or h.shape[1] != cfg.widths[0]:
            raise ShapeError(f"batch shape {h.shape} does not match MLP input width {cfg.widths[0]}")
    elif h.shape[1:] != cfg.input_shape:
        raise ShapeError(f"batch shape {h.shape} does not match CNN input {cfg.input_shape}")
    est = model.estimator
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        w = params[layer.weight]
        if layer.wq is not None:
            w = attach_quantizer(w, layer.wq, est, step, [params[n] for n in layer.wq_params])
        if layer.kind == "conv":
            h = T.add_bias(T.conv2d(h, w, stride=1, padding=1), params[layer.bias])
            h = T.max_pool2d(T.relu(h), 2, 2)
        else:
            h = T.add_bias(T.matmul(h, w), params[layer.bias])
            if i != last:
                h = T.relu(h)
        if layer.aq is not None:
            h = attach_quantizer(h, layer.aq, est, step, [params[n] for n in layer.aq_params])
        if layer.kind == "conv" and i < last and model.layers[i + 1].kind == "fc":
            h = T.reshape(h, (h.shape[0], -1))
    return h


def quantized_weights(model: Model) -> dict:
    """The weights each layer actually uses in its forward pass."""
    out = {}
    for layer in model.layers:
        w = model.params[layer.weight]
        if layer.wq is not None:
            vals = [model.params[n] for n in layer.wq_params]
            w = attach_quantizer(w, layer.wq, model.estimator, 0, vals).data
        out[layer.weight] = w
    return out


def _same_arch(a: ModelConfig, b: ModelConfig) -> bool:
    return a.layer_shapes() == b.layer_shapes()


def clone_weights(src: Model, dst: Model) -> None:
    """Copy full-precision weights and biases; quantizer parameters are left alone."""
    if not _same_arch(src.config, dst.config):
        raise ModelError("clone_weights: architectures differ")
    for name in src.latent_names():
        dst.params[name] = src.params[name].copy()


def strip_quantizers(model: Model) -> Model:
    """Full-precision twin sharing copies of the latent weights."""
    fp = build_model(model.config.without_quant(), 0)
    clone_weights(model, fp)
    return fp


def save_checkpoint(model: Model, path) -> None:
    """Write ``SQKD`` | u32 version | u32 len | descriptor | float64 arrays (LE)."""
    names = list(model.params)
    desc = json.dumps({
        "config": model.config.to_dict(),
        "arrays": [[n, list(model.params[n].shape)] for n in names],
    }, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(desc)))
    buf.write(desc)
    for n in names:
        buf.write(np.ascontiguousarray(model.params[n], dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ModelError(f"{path}: not a checkpoint (bad magic)")
    version, dlen = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {version}")
    desc = json.loads(raw[12:12 + dlen].decode("utf-8"))
    model = build_model(ModelConfig.from_dict(desc["config"]), 0)
    offset = 12 + dlen
    for name, shape in desc["arrays"]:
        count = int(np.prod(shape))
        if offset + 8 * count > len(raw):
            raise ModelError(f"{path}: truncated at array {name}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        model.params[name] = arr.astype(np.float64).reshape(shape)
        offset += 8 * count
    if offset != len(raw):
        raise ModelError(f"{path}: {len(raw) - offset} trailing bytes")
    return model
