import math

import numpy as np
import pytest

from fslab import schedules as sch
from fslab.schedules import (
    FMState,
    ScheduleError,
    TimeSamplerConfig,
    TrigState,
    fm_interpolate,
    fm_state_scale,
    sample_t_r,
    state_fm_to_trig,
    state_trig_to_fm,
    time_fm_to_trig,
    time_trig_to_fm,
    trig_interpolate,
    wrap_fm_model_as_trigflow,
    wrap_trig_model_as_fm,
)
from fslab.tensor import Tensor


class TestInterpolants:
    def test_fm_boundaries(self):
        x = np.array([[2.0, 0.0]])
        e = np.array([[0.0, 2.0]])
        z0, _ = fm_interpolate(x, e, 0.0)
        z1, _ = fm_interpolate(x, e, 1.0)
        np.testing.assert_array_equal(z0.array, x)
        np.testing.assert_array_equal(z1.array, e)

    def test_fm_midpoint(self):
        z, v = fm_interpolate(np.array([[2.0, 0.0]]), np.array([[0.0, 2.0]]), 0.5)
        np.testing.assert_array_equal(z.array, [[1.0, 1.0]])
        np.testing.assert_array_equal(v.array, [[-2.0, 2.0]])

    def test_fm_range_error(self):
        with pytest.raises(ScheduleError):
            fm_interpolate(np.zeros((1, 2)), np.zeros((1, 2)), 1.5)

    def test_trig_boundaries(self):
        x0 = np.array([[1.0, 0.0]])
        noise = np.array([[0.0, 1.0]])
        np.testing.assert_array_equal(trig_interpolate(x0, noise, 0.0).array, x0)
        np.testing.assert_allclose(
            trig_interpolate(x0, noise, math.pi / 2).array, noise, atol=1e-16
        )

    def test_trig_quarter(self):
        out = trig_interpolate(
            np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), math.pi / 4
        )
        np.testing.assert_allclose(
            out.array, [[math.sqrt(2) / 2, math.sqrt(2) / 2]], rtol=1e-15
        )

    def test_trig_range_error(self):
        with pytest.raises(ScheduleError):
            trig_interpolate(np.zeros((1, 2)), np.zeros((1, 2)), 2.0)


class TestTimeMaps:
    @pytest.mark.parametrize(
        "t_trig,expected", [(0.0, 0.0), (math.pi / 4, 0.5), (math.pi / 2, 1.0)]
    )
    def test_trig_to_fm_anchors(self, t_trig, expected):
        assert time_trig_to_fm(t_trig) == pytest.approx(expected, abs=1e-15)

    def test_fm_to_trig_anchors(self):
        assert time_fm_to_trig(0.0) == 0.0
        assert time_fm_to_trig(0.5) == pytest.approx(0.7853982, abs=1e-7)
        assert time_fm_to_trig(1.0) == pytest.approx(math.pi / 2, abs=0)

    def test_round_trip(self):
        assert abs(time_trig_to_fm(time_fm_to_trig(0.3)) - 0.3) < 1e-12

    def test_round_trip_grid(self):
        ts = np.linspace(0.0, 1.0, 1000)
        back = time_trig_to_fm(time_fm_to_trig(ts))
        assert np.max(np.abs(back - ts)) < 1e-12

    def test_monotone(self):
        ts = np.linspace(0.0, math.pi / 2, 500)
        vals = time_trig_to_fm(ts)
        assert np.all(np.diff(vals) > 0)

    def test_snr_preserved(self):
        # SNR of both interpolants agrees under the time map
        taus = np.linspace(1e-3, math.pi / 2 - 1e-3, 1000)
        snr_trig = (np.cos(taus) / np.sin(taus)) ** 2
        tf = time_trig_to_fm(taus)
        snr_fm = ((1.0 - tf) / tf) ** 2
        rel = np.abs(snr_fm - snr_trig) / snr_trig
        assert np.max(rel) < 1e-9

    def test_identity_triple(self):
        ts = np.linspace(0.0, 1.0, 1000)
        taus = time_fm_to_trig(ts)
        scale = fm_state_scale(ts)
        assert np.max(np.abs(np.cos(taus) - (1.0 - ts) / scale)) < 1e-12
        assert np.max(np.abs(np.sin(taus) - ts / scale)) < 1e-12
        assert np.max(np.abs(np.cos(taus) + np.sin(taus) - 1.0 / scale)) < 1e-12


class TestStateMaps:
    def test_trig_to_fm_at_zero(self):
        s = TrigState(Tensor([[1.0, 2.0]]), 0.0)
        out = state_trig_to_fm(s)
        np.testing.assert_array_equal(out.z.array, s.x.array)
        assert out.t_fm == 0.0

    def test_trig_to_fm_quarter_scale(self):
        s = TrigState(Tensor([[1.0, 0.0]]), math.pi / 4)
        out = state_trig_to_fm(s)
        np.testing.assert_allclose(out.z.array, [[0.7071068, 0.0]], atol=1e-7)

    def test_fm_to_trig_boundaries(self):
        s = FMState(Tensor([[1.0, -1.0]]), 0.0)
        np.testing.assert_array_equal(state_fm_to_trig(s).x.array, s.z.array)
        s5 = FMState(Tensor([[1.0, 0.0]]), 0.5)
        np.testing.assert_allclose(
            state_fm_to_trig(s5).x.array, [[math.sqrt(2), 0.0]], rtol=1e-15
        )

    def test_round_trip_random(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            z = rng.standard_normal((3, 2))
            t = float(rng.uniform(0, 1))
            s = FMState(Tensor(z), t)
            back = state_trig_to_fm(state_fm_to_trig(s))
            assert abs(back.t_fm - t) < 1e-12
            assert np.max(np.abs(back.z.array - z)) < 1e-12

    def test_interpolant_consistency(self):
        # mapping the trig state equals interpolating directly in linear time
        rng = np.random.default_rng(1)
        x0 = rng.standard_normal((4, 2))
        e = rng.standard_normal((4, 2))
        for tau in rng.uniform(0, math.pi / 2, size=10):
            xt = trig_interpolate(x0, e, float(tau))
            mapped = state_trig_to_fm(TrigState(xt, float(tau)))
            z, _ = fm_interpolate(x0, e, mapped.t_fm)
            assert np.max(np.abs(mapped.z.array - z.array)) < 1e-12


class TestWrappers:
    def test_wrap_fm_at_zero(self):
        v_model = lambda z, t, cond=None: -np.asarray(z)
        f = wrap_fm_model_as_trigflow(v_model)
        x = np.array([[1.0, 2.0]])
        np.testing.assert_allclose(f(x, 0.0), x + v_model(x, 0.0), rtol=1e-15)

    def test_wrap_fm_at_quarter(self):
        v_model = lambda z, t, cond=None: np.full_like(np.asarray(z), 3.0)
        f = wrap_fm_model_as_trigflow(v_model)
        x = np.array([[1.0, -1.0]])
        # cos = sin: state term vanishes, output is v / sqrt(2)
        np.testing.assert_allclose(
            f(x, math.pi / 4), 3.0 / math.sqrt(2) * np.ones((1, 2)), rtol=1e-12
        )

    def test_wrap_fm_linear_model_grid(self):
        v_model = lambda z, t, cond=None: -np.asarray(z)
        f = wrap_fm_model_as_trigflow(v_model)
        rng = np.random.default_rng(2)
        x = rng.standard_normal((5, 2))
        for tau in np.linspace(1e-6, math.pi / 2 - 1e-6, 20):
            c, s = math.cos(tau), math.sin(tau)
            z = x / (c + s)
            expected = ((c - s) / (c + s)) * x + (1.0 / (c + s)) * (-z)
            np.testing.assert_allclose(f(x, tau), expected, atol=1e-12)

    def test_wrap_trig_at_half(self):
        f_model = lambda x, tau, cond=None: np.full_like(np.asarray(x), 2.0)
        v = wrap_trig_model_as_fm(f_model)
        z = np.array([[1.0, 1.0]])
        np.testing.assert_allclose(v(z, 0.5), 2.0 * math.sqrt(2) * np.ones((1, 2)))

    def test_wrap_trig_at_zero(self):
        f_model = lambda x, tau, cond=None: np.asarray(x) * 0.5
        v = wrap_trig_model_as_fm(f_model)
        z = np.array([[2.0, -4.0]])
        np.testing.assert_allclose(v(z, 0.0), f_model(z, 0.0) - z, rtol=1e-15)

    def test_double_wrap_is_identity(self):
        rng = np.random.default_rng(3)
        w = rng.standard_normal((2, 2))

        def v_model(z, t, cond=None):
            return np.asarray(z) @ w + t

        recovered = wrap_trig_model_as_fm(wrap_fm_model_as_trigflow(v_model))
        for _ in range(100):
            z = rng.standard_normal((1, 2))
            t = float(rng.uniform(0, 1))
            assert np.max(np.abs(recovered(z, t) - v_model(z, t))) < 1e-10

    def test_double_wrap_other_direction(self):
        rng = np.random.default_rng(4)

        def f_model(x, tau, cond=None):
            return np.sin(np.asarray(x)) + tau

        recovered = wrap_fm_model_as_trigflow(wrap_trig_model_as_fm(f_model))
        for _ in range(50):
            x = rng.standard_normal((1, 2))
            tau = float(rng.uniform(1e-6, math.pi / 2 - 1e-6))
            assert np.max(np.abs(recovered(x, tau) - f_model(x, tau))) < 1e-10

    def test_cond_threaded_through(self):
        seen = []

        def v_model(z, t, cond=None):
            seen.append(cond)
            return np.zeros_like(np.asarray(z))

        f = wrap_fm_model_as_trigflow(v_model)
        f(np.zeros((1, 2)), 0.3, cond=7)
        assert seen == [7]

    def test_single_model_call(self):
        calls = [0]

        def v_model(z, t, cond=None):
            calls[0] += 1
            return np.zeros_like(np.asarray(z))

        f = wrap_fm_model_as_trigflow(v_model)
        f(np.zeros((1, 2)), 0.3)
        assert calls[0] == 1


class TestSampleTR:
    def test_p_equal_one(self):
        cfg = TimeSamplerConfig(p_equal=1.0)
        rng = np.random.default_rng(0)
        t, r = sample_t_r(cfg, rng, size=100)
        np.testing.assert_array_equal(t, r)

    def test_ordering_invariant(self):
        for dist in ("uniform", "lognormal"):
            cfg = TimeSamplerConfig(distribution=dist, p_equal=0.3)
            rng = np.random.default_rng(1)
            t, r = sample_t_r(cfg, rng, size=10000)
            assert np.all((0 <= r) & (r <= t) & (t <= 1))

    def test_reproducible(self):
        cfg = TimeSamplerConfig()
        a = sample_t_r(cfg, np.random.default_rng(42))
        b = sample_t_r(cfg, np.random.default_rng(42))
        assert a == b

    def test_equal_fraction(self):
        cfg = TimeSamplerConfig(p_equal=0.25)
        rng = np.random.default_rng(7)
        t, r = sample_t_r(cfg, rng, size=100000)
        frac = float(np.mean(t == r))
        assert abs(frac - 0.25) < 0.01

    def test_bad_config(self):
        with pytest.raises(ScheduleError):
            TimeSamplerConfig(distribution="beta")
        with pytest.raises(ScheduleError):
            TimeSamplerConfig(p_equal=1.5)
