import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvfuse import autodiff as ad
from mvfuse import gsgn


def zero_gate_params(df=3, du=2, d=4):
    return {k: np.zeros_like(v) for k, v in gsgn.init_gate_params(df, du, d, np.random.default_rng(0)).items()}


def gates_for(params, xf, xu, cfg):
    tape = ad.Tape()
    pv = tape.params(params)
    return gsgn.compute_gates(pv, tape.const(xf), tape.const(xu), cfg)


class TestComputeGates:
    def test_zero_params_scale_one(self):
        g = gates_for(zero_gate_params(), np.ones((5, 3)), np.ones((5, 2)), gsgn.GateConfig(scale=1.0))
        np.testing.assert_array_equal(g.g_fbank.value, 0.5)
        np.testing.assert_array_equal(g.g_unit.value, 0.5)

    def test_zero_params_scale_two(self):
        g = gates_for(zero_gate_params(), np.ones((5, 3)), np.ones((5, 2)), gsgn.GateConfig(scale=2.0))
        np.testing.assert_array_equal(g.g_fbank.value, 1.0)

    @pytest.mark.parametrize("scale", [1.0, 2.0])
    def test_random_inside_range(self, scale):
        rng = np.random.default_rng(1)
        params = gsgn.init_gate_params(3, 2, 4, rng, init_std=3.0)
        g = gates_for(params, rng.normal(size=(20, 3)), rng.normal(size=(20, 2)), gsgn.GateConfig(scale=scale))
        for v in (g.g_fbank.value, g.g_unit.value):
            assert v.min() > 0.0 and v.max() < scale

    def test_length_mismatch(self):
        with pytest.raises(ad.ShapeError):
            gates_for(zero_gate_params(), np.ones((5, 3)), np.ones((4, 2)), gsgn.GateConfig())

    def test_hard_unit_gate(self):
        g = gates_for(gsgn.init_gate_params(3, 2, 4, np.random.default_rng(2)),
                      np.ones((3, 3)), np.ones((3, 2)), gsgn.GateConfig(hard_unit_gate=True))
        np.testing.assert_array_equal(g.g_unit.value, 1.0)


def _gate_output(gf, gu, s=2.0):
    tape = ad.Tape()
    return tape, gsgn.GateOutput(tape.const(gf), tape.const(gu), s)


class TestFuse:
    def test_select_fbank(self):
        rng = np.random.default_rng(3)
        xf, xu = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        tape, g = _gate_output(np.ones((3, 4)), np.zeros((3, 4)))
        np.testing.assert_array_equal(gsgn.fuse(g, tape.const(xf), tape.const(xu)).value, xf)

    def test_half_gates_average(self):
        rng = np.random.default_rng(4)
        xf, xu = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        tape, g = _gate_output(np.full((3, 4), 0.5), np.full((3, 4), 0.5))
        np.testing.assert_allclose(gsgn.fuse(g, tape.const(xf), tape.const(xu)).value, (xf + xu) / 2, rtol=1e-15)

    def test_elementwise_recomputation(self):
        rng = np.random.default_rng(5)
        gf, gu, xf, xu = (rng.uniform(0, 2, (6, 5)) for _ in range(4))
        tape, g = _gate_output(gf, gu)
        out = gsgn.fuse(g, tape.const(xf), tape.const(xu)).value
        for i in range(6):
            for j in range(5):
                assert abs(out[i, j] - (gf[i, j] * xf[i, j] + gu[i, j] * xu[i, j])) <= 1e-15

    @settings(max_examples=30)
    @given(st.floats(-10, 10), st.integers(0, 10_000))
    def test_linear_in_each_view(self, alpha, seed):
        rng = np.random.default_rng(seed)
        gf, gu, xf, xu = (rng.uniform(-1, 1, (3, 4)) for _ in range(4))
        tape, g = _gate_output(gf, gu)
        out = gsgn.fuse(g, tape.const(alpha * xf), tape.const(xu)).value
        np.testing.assert_allclose(out, alpha * (gf * xf) + gu * xu, rtol=0, atol=1e-15 * max(1.0, abs(alpha)) * 4)


class TestConcatFuse:
    def _run(self, w, xf, xu):
        tape = ad.Tape()
        pv = tape.params({"concat.w": w, "concat.b": np.zeros(w.shape[1])})
        return gsgn.concat_gate_fuse(pv, tape.const(xf), tape.const(xu)).value

    def test_select_first(self):
        rng = np.random.default_rng(6)
        xf, xu = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        np.testing.assert_allclose(self._run(np.vstack([np.eye(4), np.zeros((4, 4))]), xf, xu), xf, rtol=1e-15)

    def test_sum(self):
        rng = np.random.default_rng(7)
        xf, xu = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        np.testing.assert_allclose(self._run(np.vstack([np.eye(4), np.eye(4)]), xf, xu), xf + xu, rtol=1e-15)

    def test_grad_check(self):
        rng = np.random.default_rng(8)
        xf, xu = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        params = gsgn.init_concat_params(4, rng)
        f = lambda t, p: ad.sum_all(ad.hadamard(
            gsgn.concat_gate_fuse(p, t.const(xf), t.const(xu)), t.const(np.arange(12.0).reshape(3, 4))))
        assert ad.grad_check(f, params).max_rel_error < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            self._run(np.zeros((8, 4)), np.zeros((3, 4)), np.zeros((2, 4)))


class TestGateLoss:
    def _loss(self, gf, gu, target, hard=False):
        _, g = _gate_output(np.asarray(gf, float), np.asarray(gu, float))
        return gsgn.gate_loss(g, target, hard).value

    def test_at_targets(self):
        assert self._loss(np.full((2, 3), 1.3), np.ones((2, 3)), 1.3) == 0.0

    def test_half_against_one(self):
        assert self._loss(np.full((2, 3), 0.5), np.ones((2, 3)), 1.0) == 0.25

    def test_target_above_one(self):
        assert self._loss(np.ones((2, 3)), np.ones((2, 3)), 1.5) == 0.25

    def test_hard_gate_ignores_unit_term(self):
        assert self._loss(np.ones((2, 3)), np.zeros((2, 3)), 1.0, hard=True) == 0.0

    @settings(max_examples=50)
    @given(st.integers(0, 10_000), st.floats(0, 2))
    def test_nonnegative_zero_iff_on_target(self, seed, target):
        rng = np.random.default_rng(seed)
        gf, gu = rng.uniform(0, 2, (2, 3)), rng.uniform(0, 2, (2, 3))
        assert self._loss(gf, gu, target) > 0.0
        assert self._loss(np.full((2, 3), target), np.ones((2, 3)), target) == 0.0


class TestFinalLoss:
    def test_unweighted_sum(self):
        assert gsgn.final_loss(2.0, 0.5, 1.0) == 2.5

    def test_zero_weight(self):
        assert gsgn.final_loss(1.7, 9.0, 0.0) == 1.7

    def test_weight_two(self):
        assert gsgn.final_loss(1.0, 1.0, 2.0) == 3.0

    def test_on_tape(self):
        tape = ad.Tape()
        assert gsgn.final_loss(tape.const(2.0), tape.const(0.5), 1.0).value == 2.5

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            gsgn.final_loss(1.0, 1.0, -1.0)
