import math

import numpy as np
import pytest
from conftest import rel_err
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sqakd import tensor as T
from sqakd.quantizers import (
    GradientEstimator,
    MuSchedule,
    QuantCache,
    QuantizerError,
    QuantizerParams,
    QuantizerSpec,
    attach_quantizer,
    canonical_family,
    clip_backward,
    clip_forward,
    levels,
    output_levels,
    quantize_backward,
    quantize_forward,
    round_forward,
)
from sqakd.tensor import Tape

UNIFORM01 = QuantizerSpec("Uniform", b=2, v=0.0, m=1.0)


def cache_with_error(err):
    err = np.asarray(err, dtype=float)
    x_q = np.full(err.shape, 0.5)
    return QuantCache(x=x_q + err, x_c=x_q + err, x_q=x_q, out=x_q, params=())


class TestSpec:
    def test_bits_range(self):
        for b in (0, 9, 2.0):
            with pytest.raises(QuantizerError):
                QuantizerSpec(b=b)

    def test_bounds_order(self):
        with pytest.raises(QuantizerError):
            QuantizerSpec(v=1.0, m=1.0)

    def test_param_counts(self):
        assert QuantizerSpec("PACTActivation").params == QuantizerParams((6.0,), ())
        assert QuantizerSpec("LSQ", target="weights").params.round_params == (0.1,)
        assert QuantizerSpec("Uniform").num_params == 0
        with pytest.raises(QuantizerError):
            QuantizerSpec("Uniform", params=QuantizerParams((1.0,), ()))

    def test_aliases(self):
        assert canonical_family("pact") == "PACTActivation"
        with pytest.raises(QuantizerError):
            canonical_family("apot")

    def test_lsq_bounds(self):
        assert QuantizerSpec("LSQ", b=3, target="weights").lsq_bounds() == (-4, 3)
        assert QuantizerSpec("LSQ", b=3).lsq_bounds() == (0, 7)


class TestClipForward:
    def test_uniform(self):
        assert clip_forward([-0.5, 0.3, 1.2], UNIFORM01).data.tolist() == [0.0, 0.3, 1.0]

    def test_pact_clips_at_level(self):
        spec = QuantizerSpec("PACTActivation", params=QuantizerParams((1.0,), ()))
        assert clip_forward([1.2], spec).data.tolist() == [1.0]

    def test_dorefa_single_element_hits_endpoint(self):
        assert clip_forward([0.7], QuantizerSpec("DoReFaWeight", target="weights")).data.tolist() == [1.0]

    def test_dorefa_all_zero_is_degenerate(self):
        with pytest.raises(QuantizerError, match="degenerate weight tensor"):
            clip_forward(np.zeros(4), QuantizerSpec("DoReFaWeight", target="weights"))

    def test_non_positive_params(self):
        with pytest.raises(QuantizerError):
            clip_forward([1.0], QuantizerSpec("PACTActivation", params=QuantizerParams((0.0,), ())))
        with pytest.raises(QuantizerError):
            clip_forward([1.0], QuantizerSpec("LSQ", params=QuantizerParams((), (-0.1,))))

    def test_lsq_affine(self):
        spec = QuantizerSpec("LSQ", b=2, params=QuantizerParams((), (0.5,)))
        # x / s = [0, 1, 3, 8] clamped to [0, 3], then divided by 3
        np.testing.assert_allclose(clip_forward([0.0, 0.5, 1.5, 4.0], spec).data, [0, 1 / 3, 1, 1])


class TestLevels:
    def test_b1(self):
        assert levels(QuantizerSpec(b=1)) == [0.0, 1.0]

    def test_b2(self):
        assert levels(QuantizerSpec(b=2)) == [0.0, 1 / 3, 2 / 3, 1.0]

    @pytest.mark.parametrize("b", range(1, 9))
    def test_count_and_order(self, b):
        lv = levels(QuantizerSpec(b=b))
        assert len(lv) == 2 ** b
        assert all(a < c for a, c in zip(lv, lv[1:]))

    def test_output_levels_dorefa(self):
        assert output_levels(QuantizerSpec("DoReFaWeight", b=1, target="weights")).tolist() == [-1.0, 1.0]


class TestRoundForward:
    def test_rounds_to_nearest(self):
        assert round_forward([0.3], UNIFORM01).data.tolist() == [1 / 3]

    def test_half_to_even(self):
        assert round_forward([0.5], QuantizerSpec(b=1)).data.tolist() == [0.0]

    def test_dorefa_endpoint(self):
        assert round_forward([1.0], QuantizerSpec("DoReFaWeight", b=2, target="weights")).data.tolist() == [1.0]

    def test_outside_unit_interval(self):
        with pytest.raises(QuantizerError):
            round_forward([1.0 + 1e-9], UNIFORM01)
        round_forward([1.0 + 1e-13], UNIFORM01)


class TestQuantizeForward:
    def test_composition(self):
        out, cache = quantize_forward([-0.5, 0.3, 1.2], UNIFORM01)
        assert out.data.tolist() == [0.0, 1 / 3, 1.0]
        assert cache.x_c.tolist() == [0.0, 0.3, 1.0]

    def test_levels_are_fixed_points(self):
        spec = QuantizerSpec(b=8)
        lv = np.array(levels(spec))
        assert np.array_equal(quantize_forward(lv, spec)[0].data, lv)

    def test_idempotent(self, rng):
        out, _ = quantize_forward(rng.uniform(-1, 2, 50), UNIFORM01)
        assert np.array_equal(quantize_forward(out, UNIFORM01)[0].data, out.data)

    def test_cache_shapes(self, rng):
        _, cache = quantize_forward(rng.normal(size=(3, 4)), QuantizerSpec("Uniform", v=-1, m=1))
        assert cache.x.shape == cache.x_c.shape == cache.x_q.shape == (3, 4)


class TestQuantizeBackward:
    def test_ste_passes_through(self):
        g = quantize_backward([0.5], cache_with_error([0.1]), GradientEstimator("STE"))
        assert g.data.tolist() == [0.5]

    def test_additive_rule_single(self):
        g = quantize_backward([0.5], cache_with_error([0.1]), GradientEstimator("AdditiveDiscretization", mu=1.0))
        assert abs(g.data[0] - 0.6) < 1e-15

    def test_additive_rule_two_elements(self):
        g = quantize_backward([0.0, -1.0], cache_with_error([0.05, -0.05]),
                              GradientEstimator("AdditiveDiscretization", mu=2.0))
        np.testing.assert_allclose(g.data, [0.1, -1.1], rtol=0, atol=1e-15)

    def test_ewgs_form(self):
        est = GradientEstimator("EWGSMultiplicative", delta=0.5)
        g = quantize_backward([2.0, -2.0], cache_with_error([0.1, 0.1]), est)
        # g * (1 + delta * sign(g) * err)
        np.testing.assert_allclose(g.data, [2.0 * 1.05, -2.0 * 0.95], rtol=0, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(QuantizerError):
            quantize_backward([1.0, 2.0], cache_with_error([0.1]), GradientEstimator())

    def test_negative_mu(self):
        with pytest.raises(QuantizerError):
            GradientEstimator("AdditiveDiscretization", mu=-1.0)

    def test_unknown_rule(self):
        with pytest.raises(QuantizerError):
            GradientEstimator("Magic")


class TestMuSchedule:
    def test_constant(self):
        s = MuSchedule()
        assert {s.value(k, 0.3) for k in (0, 10, 10_000)} == {0.3}

    def test_linear_ramp(self):
        s = MuSchedule("linear_ramp", start_step=10, end_step=20, mu_final=1.0)
        assert [s.value(k, 0.0) for k in (0, 10, 15, 20, 99)] == [0.0, 0.0, 0.5, 1.0, 1.0]

    def test_curriculum(self):
        s = MuSchedule("curriculum", stages=((100, 1.0), (10, 0.5)))
        assert [s.value(k, 0.1) for k in (0, 10, 99, 100)] == [0.1, 0.5, 0.5, 1.0]

    def test_negative_values_rejected(self):
        with pytest.raises(QuantizerError):
            MuSchedule("linear_ramp", end_step=5, mu_final=-0.1)

    def test_estimator_uses_schedule(self):
        est = GradientEstimator("AdditiveDiscretization", mu=0.0,
                                schedule=MuSchedule("linear_ramp", 0, 4, 2.0))
        assert est.coefficient(2) == 1.0
        assert GradientEstimator("STE", schedule=est.schedule).coefficient(4) == 0.0


class TestClipBackward:
    def test_uniform_interior_slope(self):
        _, cache = quantize_forward([0.2, 0.7], UNIFORM01)
        gx, gp = clip_backward([0.3, -1.0], cache, UNIFORM01)
        assert gx.data.tolist() == [0.3, -1.0] and gp == []

    def test_uniform_below_range_is_zero(self):
        _, cache = quantize_forward([-0.2], UNIFORM01)
        assert clip_backward([1.0], cache, UNIFORM01)[0].data.tolist() == [0.0]

    def test_pact_fully_clipped_param_gradient(self):
        x = np.array([2.0])

        def xc(p):
            spec = QuantizerSpec("PACTActivation", params=QuantizerParams((float(p.data.reshape(-1)[0]),), ()))
            return T.sum(clip_forward(x, spec))

        spec = QuantizerSpec("PACTActivation", params=QuantizerParams((1.0,), ()))
        _, cache = quantize_forward(x, spec)
        _, (gp,) = clip_backward([1.0], cache, spec)
        fd = T.finite_difference(xc, np.array([1.0]), eps=1e-3).data[0]
        assert abs(gp - fd) <= 1e-6


class TestAttachQuantizer:
    def test_ste_gradient_is_affine_slope(self):
        spec = QuantizerSpec("Uniform", b=2, v=-1.0, m=3.0)
        tape = Tape()
        x = tape.leaf([0.1, 1.3, 2.2])
        g = T.backward(T.sum(attach_quantizer(x, spec, GradientEstimator())))[x].data
        assert g.tolist() == [1.0, 1.0, 1.0]

    def test_estimator_never_changes_forward(self, rng):
        x = rng.normal(size=20)
        a = attach_quantizer(x, UNIFORM01, GradientEstimator()).data
        b = attach_quantizer(x, UNIFORM01, GradientEstimator("AdditiveDiscretization", mu=10.0)).data
        assert np.array_equal(a, b)

    def test_half_step_bound_b8(self, rng):
        spec = QuantizerSpec(b=8)
        x = rng.uniform(0, 1, 1000)
        assert np.max(np.abs(attach_quantizer(x, spec, GradientEstimator()).data - x)) <= 1 / (2 * 255)

    def test_additive_rule_through_uniform_range(self):
        # output = v + x_q*(m-v); with loss = sum(out), dL/dx_q = (m-v), then
        # dL/dx_c = (m-v) + mu*(x_c-x_q), then dL/dx = that / (m-v)
        spec = QuantizerSpec("Uniform", b=2, v=0.0, m=2.0)
        est = GradientEstimator("AdditiveDiscretization", mu=0.5)
        tape = Tape()
        x = tape.leaf([0.5])
        g = T.backward(T.sum(attach_quantizer(x, spec, est)))[x].data[0]
        x_c, x_q = 0.25, 1 / 3
        assert abs(g - (2.0 + 0.5 * (x_c - x_q)) / 2.0) < 1e-15

    def test_wrong_param_count(self):
        with pytest.raises(QuantizerError):
            attach_quantizer([1.0], QuantizerSpec("PACTActivation"), GradientEstimator(), params=[])

    @pytest.mark.parametrize("family,vals,lo,hi", [
        ("PACTActivation", (1.5,), -0.5, 2.5),
        ("LSQ", (0.3,), -0.5, 3.0),
    ])
    def test_param_gradient_matches_clip_path_fd(self, rng, family, vals, lo, hi):
        """The clip-path part of the parameter gradient against finite differences of x_c."""
        spec = QuantizerSpec(family, b=2, params=QuantizerParams(*((vals, ()) if family == "PACTActivation" else ((), vals))))
        x = rng.uniform(lo, hi, 40)
        w = rng.normal(size=40)
        _, cache = quantize_forward(x, spec)
        gx, (gp,) = clip_backward(w, cache, spec)

        def loss(p):
            pv = float(p.data.reshape(-1)[0])
            s = QuantizerSpec(family, b=2, params=QuantizerParams(*(((pv,), ()) if family == "PACTActivation" else ((), (pv,)))))
            return T.sum(T.mul(clip_forward(x, s), T.Tensor(w)))

        fd = T.finite_difference(loss, np.array(vals), eps=1e-3).data[0]
        scale = 1.0
        if family == "LSQ":
            scale = 1.0 / math.sqrt(x.size * spec.lsq_bounds()[1])
        edge = vals[0] * (spec.lsq_bounds()[1] if family == "LSQ" else 1.0)
        assert np.min(np.abs(x - edge)) > 1e-2 and np.min(np.abs(x)) > 1e-2
        assert rel_err(gp, scale * fd) <= 1e-4


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-4, 4)),
       st.integers(1, 8), st.floats(0.0, 10.0))
def test_additive_rule_is_exact(x, b, mu):
    spec = QuantizerSpec("Uniform", b=b, v=-2.0, m=2.0)
    _, cache = quantize_forward(x, spec)
    up = np.linspace(-1, 1, x.size)
    got = quantize_backward(up, cache, GradientEstimator("AdditiveDiscretization", mu=mu)).data
    assert np.max(np.abs(got - (up + mu * (cache.x_c - cache.x_q)))) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-10, 10)), st.integers(1, 8))
def test_monotone_uniform(x, b):
    spec = QuantizerSpec("Uniform", b=b, v=-3.0, m=5.0)
    xs = np.sort(x)
    assert np.all(np.diff(quantize_forward(xs, spec)[0].data) >= 0)
