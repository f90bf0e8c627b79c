"""Unified uniform quantizer: x -> Clip -> x_c -> R -> x_q.

Every family normalizes its input onto [0, 1], rounds onto the 2**b levels
``k / (2**b - 1)`` and maps the result back to its own range. Keeping the
rounding on one shared scale makes the discretization error ``x_c - x_q``
comparable across families, which is what the surrogate backward rules act on.

Backward through a quantizer is split in three steps, composed by
:func:`attach_quantizer`:

1. :func:`denormalize_backward` - from the output scale to ``dL/dx_q``
2. :func:`quantize_backward` - surrogate for the rounding step
3. :func:`clip_backward` - exact derivative of the clip/normalize map
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, custom_vjp, round_half_even, tensor

FAMILIES = ("Uniform", "DoReFaWeight", "DoReFaActivation", "PACTActivation", "LSQ")
_ALIASES = {
    "uniform": "Uniform",
    "dorefaweight": "DoReFaWeight",
    "dorefa_weight": "DoReFaWeight",
    "dorefaactivation": "DoReFaActivation",
    "dorefa_activation": "DoReFaActivation",
    "pact": "PACTActivation",
    "pactactivation": "PACTActivation",
    "lsq": "LSQ",
}
# (number of clip params, number of round params)
PARAM_COUNTS = {
    "Uniform": (0, 0),
    "DoReFaWeight": (0, 0),
    "DoReFaActivation": (0, 0),
    "PACTActivation": (1, 0),
    "LSQ": (0, 1),
}
RULES = ("STE", "AdditiveDiscretization", "EWGSMultiplicative")
_ROUND_SLACK = 1e-12


class QuantizerError(ValueError):
    pass


def canonical_family(name: str) -> str:
    if name in FAMILIES:
        return name
    try:
        return _ALIASES[name.lower()]
    except KeyError:
        raise QuantizerError(f"unknown quantizer family {name!r}") from None


@dataclass(frozen=True)
class QuantizerParams:
    """Initial values of the trainable clip ({p_i}) and round ({q_i}) parameters."""

    clip_params: tuple = ()
    round_params: tuple = ()

    def values(self) -> tuple:
        return tuple(self.clip_params) + tuple(self.round_params)


def default_params(family: str, target: str = "activations") -> QuantizerParams:
    if family == "PACTActivation":
        return QuantizerParams(clip_params=(6.0,))
    if family == "LSQ":
        return QuantizerParams(round_params=(0.1 if target == "weights" else 1.0,))
    return QuantizerParams()


@dataclass(frozen=True)
class QuantizerSpec:
    family: str = "Uniform"
    b: int = 8
    v: float = 0.0
    m: float = 1.0
    params: Optional[QuantizerParams] = None
    target: str = "activations"

    def __post_init__(self):
        object.__setattr__(self, "family", canonical_family(self.family))
        if self.target not in ("weights", "activations"):
            raise QuantizerError(f"target must be 'weights' or 'activations', got {self.target!r}")
        if not (isinstance(self.b, (int, np.integer)) and 1 <= self.b <= 8):
            raise QuantizerError(f"bit-width must be an integer in 1..8, got {self.b!r}")
        if not self.v < self.m:
            raise QuantizerError(f"lower bound v={self.v} must be below upper bound m={self.m}")
        params = self.params if self.params is not None else default_params(self.family, self.target)
        if isinstance(params, dict):
            params = QuantizerParams(tuple(params.get("clip_params", ())),
                                     tuple(params.get("round_params", ())))
        params = QuantizerParams(tuple(float(p) for p in params.clip_params),
                                 tuple(float(q) for q in params.round_params))
        kc, kr = PARAM_COUNTS[self.family]
        if (len(params.clip_params), len(params.round_params)) != (kc, kr):
            raise QuantizerError(
                f"{self.family} takes {kc} clip and {kr} round parameters, got "
                f"{len(params.clip_params)} and {len(params.round_params)}"
            )
        object.__setattr__(self, "params", params)

    @property
    def n_steps(self) -> int:
        return 2 ** self.b - 1

    @property
    def num_params(self) -> int:
        return sum(PARAM_COUNTS[self.family])

    def lsq_bounds(self) -> tuple[int, int]:
        if self.target == "weights":
            return -(2 ** (self.b - 1)), 2 ** (self.b - 1) - 1
        return 0, 2 ** self.b - 1

    def with_bits(self, b: int) -> "QuantizerSpec":
        return replace(self, b=b)


@dataclass(frozen=True)
class MuSchedule:
    """How the surrogate coefficient evolves with the global optimizer step.

    ``constant`` keeps the estimator's base value. ``linear_ramp`` moves from the
    base value at ``start_step`` to ``mu_final`` at ``end_step``. ``curriculum``
    takes ``stages`` as (first_step, value) pairs; steps before the first stage
    use the base value.
    """

    policy: str = "constant"
    start_step: int = 0
    end_step: int = 0
    mu_final: float = 0.0
    stages: tuple = ()

    def __post_init__(self):
        if self.policy not in ("constant", "linear_ramp", "curriculum"):
            raise QuantizerError(f"unknown schedule policy {self.policy!r}")
        stages = tuple(sorted((int(s), float(v)) for s, v in self.stages))
        object.__setattr__(self, "stages", stages)
        if self.mu_final < 0 or any(v < 0 for _, v in stages):
            raise QuantizerError("schedule values must be non-negative")
        if self.policy == "linear_ramp" and self.end_step < self.start_step:
            raise QuantizerError("linear_ramp needs end_step >= start_step")

    def value(self, step: int, base: float) -> float:
        if self.policy == "constant":
            return base
        if self.policy == "linear_ramp":
            if step <= self.start_step:
                return base
            if step >= self.end_step:
                return self.mu_final
            frac = (step - self.start_step) / (self.end_step - self.start_step)
            return base + frac * (self.mu_final - base)
        out = base
        for first, v in self.stages:
            if step >= first:
                out = v
        return out


@dataclass(frozen=True)
class GradientEstimator:
    rule: str = "STE"
    mu: float = 0.0
    delta: float = 0.0
    schedule: MuSchedule = field(default_factory=MuSchedule)

    def __post_init__(self):
        if self.rule not in RULES:
            raise QuantizerError(f"unknown gradient estimator {self.rule!r}; expected one of {RULES}")
        if self.mu < 0:
            raise QuantizerError(f"mu must be non-negative, got {self.mu}")
        if self.delta < 0:
            raise QuantizerError(f"delta must be non-negative, got {self.delta}")

    def coefficient(self, step: int) -> float:
        if self.rule == "STE":
            return 0.0
        base = self.mu if self.rule == "AdditiveDiscretization" else self.delta
        return self.schedule.value(step, base)


@dataclass
class QuantCache:
    """Forward values kept for the backward pass.

    ``x_c`` and ``x_q`` are on the normalized [0, 1] scale; ``out`` is ``x_q``
    mapped back to the family's range.
    """

    x: np.ndarray
    x_c: np.ndarray
    x_q: np.ndarray
    out: np.ndarray
    params: tuple
    argmax: Optional[int] = None  # DoReFaWeight: index of max |tanh(x)|


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _param_values(spec: QuantizerSpec, params) -> tuple:
    if params is None:
        return spec.params.values()
    vals = tuple(float(_arr(p).reshape(-1)[0]) for p in params)
    if len(vals) != spec.num_params:
        raise QuantizerError(f"{spec.family} expects {spec.num_params} parameters, got {len(vals)}")
    return vals


def _check_params(spec: QuantizerSpec, vals: tuple) -> None:
    if spec.family == "PACTActivation" and vals[0] <= 0:
        raise QuantizerError(f"PACT clipping level must be positive, got {vals[0]}")
    if spec.family == "LSQ" and vals[0] <= 0:
        raise QuantizerError(f"LSQ step size must be positive, got {vals[0]}")


def _clip(x: np.ndarray, spec: QuantizerSpec, vals: tuple):
    fam = spec.family
    if fam in ("Uniform", "DoReFaActivation"):
        return (np.clip(x, spec.v, spec.m) - spec.v) / (spec.m - spec.v), None
    if fam == "DoReFaWeight":
        t = np.tanh(x)
        if t.size == 0:
            raise QuantizerError("degenerate weight tensor: empty")
        idx = int(np.argmax(np.abs(t)))
        top = abs(t.reshape(-1)[idx])
        if top == 0:
            raise QuantizerError("degenerate weight tensor: max |tanh(x)| is zero")
        return t / (2 * top) + 0.5, idx
    if fam == "PACTActivation":
        (p,) = vals
        return np.clip(x, 0.0, p) / p, None
    (s,) = vals
    qn, qp = spec.lsq_bounds()
    return (np.clip(x / s, qn, qp) - qn) / (qp - qn), None


def _denormalize(x_q: np.ndarray, spec: QuantizerSpec, vals: tuple) -> np.ndarray:
    fam = spec.family
    if fam in ("Uniform", "DoReFaActivation"):
        return spec.v + x_q * (spec.m - spec.v)
    if fam == "DoReFaWeight":
        return 2.0 * x_q - 1.0
    if fam == "PACTActivation":
        return x_q * vals[0]
    qn, _ = spec.lsq_bounds()
    return (x_q * spec.n_steps + qn) * vals[0]


def _round_normalized(x_c: np.ndarray, b: int) -> np.ndarray:
    if x_c.size and (x_c.min() < -_ROUND_SLACK or x_c.max() > 1 + _ROUND_SLACK):
        raise QuantizerError(
            f"round input outside [0, 1]: range [{x_c.min()}, {x_c.max()}]"
        )
    n = 2 ** b - 1
    return round_half_even(x_c * n) / n


def levels(spec: QuantizerSpec) -> list[float]:
    """The 2**b normalized quantization levels, increasing."""
    n = spec.n_steps
    return [k / n for k in range(n + 1)]


def output_levels(spec: QuantizerSpec, params=None) -> np.ndarray:
    """Levels mapped to the family's output range."""
    vals = _param_values(spec, params)
    n = spec.n_steps
    return _denormalize(np.arange(n + 1) / n, spec, vals)


def clip_forward(x, spec: QuantizerSpec, params=None) -> Tensor:
    vals = _param_values(spec, params)
    _check_params(spec, vals)
    return Tensor(_clip(_arr(x), spec, vals)[0])


def round_forward(x_c, spec: QuantizerSpec, params=None) -> Tensor:
    """Round a normalized tensor onto the levels and map it back to the output range."""
    vals = _param_values(spec, params)
    return Tensor(_denormalize(_round_normalized(_arr(x_c), spec.b), spec, vals))


def quantize_forward(x, spec: QuantizerSpec, params=None) -> tuple[Tensor, QuantCache]:
    vals = _param_values(spec, params)
    _check_params(spec, vals)
    xa = _arr(x)
    x_c, idx = _clip(xa, spec, vals)
    x_q = _round_normalized(x_c, spec.b)
    out = _denormalize(x_q, spec, vals)
    return Tensor(out), QuantCache(xa, x_c, x_q, out, vals, idx)


def quantize_backward(upstream, cache: QuantCache, est: GradientEstimator, step: int = 0) -> Tensor:
    """Surrogate for dL/dx_c given dL/dx_q (both on the normalized scale)."""
    g = _arr(upstream)
    if g.shape != cache.x_c.shape:
        raise QuantizerError(f"upstream shape {g.shape} does not match cached {cache.x_c.shape}")
    if est.rule == "STE":
        return Tensor(g)
    err = cache.x_c - cache.x_q
    coef = est.coefficient(step)
    if est.rule == "AdditiveDiscretization":
        return Tensor(g + coef * err)
    return Tensor(g * (1.0 + coef * np.sign(g) * err))


def _lsq_grad_scale(spec: QuantizerSpec, numel: int) -> float:
    _, qp = spec.lsq_bounds()
    return 1.0 / math.sqrt(numel * max(qp, 1))


def denormalize_backward(grad_out, cache: QuantCache, spec: QuantizerSpec):
    """Map dL/d(output) to dL/dx_q and the direct parameter gradients of the output map."""
    g = _arr(grad_out)
    fam = spec.family
    if fam in ("Uniform", "DoReFaActivation"):
        return g * (spec.m - spec.v), []
    if fam == "DoReFaWeight":
        return 2.0 * g, []
    if fam == "PACTActivation":
        return g * cache.params[0], [float(np.sum(g * cache.x_q))]
    qn, _ = spec.lsq_bounds()
    s = cache.params[0]
    scale = _lsq_grad_scale(spec, cache.x.size)
    levels_int = cache.x_q * spec.n_steps + qn
    return g * (spec.n_steps * s), [scale * float(np.sum(g * levels_int))]


def clip_backward(grad_xc, cache: QuantCache, spec: QuantizerSpec):
    """Exact derivative of the clip/normalize map wrt the input and the parameters.

    LSQ step-size gradients carry the 1/sqrt(N * Q_p) scale.
    """
    g = _arr(grad_xc)
    x = cache.x
    fam = spec.family
    if fam in ("Uniform", "DoReFaActivation"):
        inside = (x >= spec.v) & (x <= spec.m)
        return Tensor(np.where(inside, g / (spec.m - spec.v), 0.0)), []
    if fam == "DoReFaWeight":
        t = np.tanh(x)
        idx = cache.argmax
        t_top = t.reshape(-1)[idx]
        top = abs(t_top)
        gx = g * (1.0 - t * t) / (2 * top)
        coupling = -float(np.sum(g * t)) / (2 * top * top)
        gx.reshape(-1)[idx] += coupling * np.sign(t_top) * (1.0 - t_top * t_top)
        return Tensor(gx), []
    if fam == "PACTActivation":
        (p,) = cache.params
        inside = (x >= 0) & (x <= p)
        gx = np.where(inside, g / p, 0.0)
        below = (x >= 0) & (x < p)
        gp = float(np.sum(np.where(below, -g * x / (p * p), 0.0)))
        return Tensor(gx), [gp]
    (s,) = cache.params
    qn, qp = spec.lsq_bounds()
    n = qp - qn
    u = x / s
    inside = (u >= qn) & (u <= qp)
    gx = np.where(inside, g / (s * n), 0.0)
    gs = float(np.sum(np.where(inside, -g * x / (s * s * n), 0.0)))
    return Tensor(gx), [_lsq_grad_scale(spec, x.size) * gs]


def attach_quantizer(
    x,
    spec: QuantizerSpec,
    est: GradientEstimator,
    step: int = 0,
    params: Optional[Sequence] = None,
) -> Tensor:
    """Fake-quantize ``x`` on the tape.

    ``params`` are the trainable quantizer parameters (clip then round order) as
    tensors; when omitted the initial values stored on ``spec`` are used as constants.
    The forward never depends on ``est``.
    """
    x = tensor(x)
    if params is None:
        params = [Tensor(np.array([v])) for v in spec.params.values()]
    params = [tensor(p) for p in params]
    if len(params) != spec.num_params:
        raise QuantizerError(f"{spec.family} expects {spec.num_params} parameters, got {len(params)}")
    shapes = [p.shape for p in params]

    def fwd(xa, *pa):
        vals = tuple(float(a.reshape(-1)[0]) for a in pa)
        out, cache = quantize_forward(xa, spec, vals)
        return out.data, (cache,)

    def bwd(saved, g):
        (cache,) = saved
        g_xq, gp_out = denormalize_backward(g, cache, spec)
        g_xc = quantize_backward(g_xq, cache, est, step)
        g_x, gp_clip = clip_backward(g_xc, cache, spec)
        gp = [a + b for a, b in zip(gp_out, gp_clip)]
        return (g_x.data, *(np.full(shp, v) for shp, v in zip(shapes, gp)))

    return custom_vjp(fwd, bwd, x, *params, name=f"quant[{spec.family},b={spec.b}]")
