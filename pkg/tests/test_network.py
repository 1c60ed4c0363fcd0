import numpy as np
import pytest

from fslab import network as net_mod
from fslab.network import (
    NetworkError,
    TargetNet,
    forward_velocity,
    init_velocity_net,
    jvp_velocity,
    one_hot_condition,
    rescale_distill,
    smooth_l1,
    sync_target,
)
from fslab.tensor import as_array


def small_net(seed=0, **kw):
    kw.setdefault("dim", 2)
    kw.setdefault("hidden", 16)
    kw.setdefault("depth", 2)
    kw.setdefault("n_classes", 4)
    kw.setdefault("n_freqs", 8)
    return init_velocity_net(seed=seed, **kw)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _silu(x):
    return x * _sigmoid(x)


class TestInit:
    def test_same_seed_identical(self):
        a = small_net(seed=3)
        b = small_net(seed=3)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])

    def test_different_seed_differs(self):
        a, b = small_net(seed=1), small_net(seed=2)
        assert any(
            np.any(a.params[n] != b.params[n])
            for n in a.params
            if n.startswith("trunk")
        )

    def test_dt_embed_cloned_from_t_embed(self):
        net = small_net()
        for suffix in ("w0", "b0", "w1", "b1"):
            diff = np.max(
                np.abs(net.params[f"dt_embed.{suffix}"] - net.params[f"t_embed.{suffix}"])
            )
            assert diff == 0.0

    def test_forward_shape(self):
        net = small_net()
        out = forward_velocity(net, np.zeros((5, 2)), 0.2, 0.7)
        assert out.shape == (5, 2)

    def test_invalid_sizes(self):
        with pytest.raises(NetworkError):
            init_velocity_net(dim=0, hidden=8, depth=2, n_classes=0, seed=0)
        with pytest.raises(NetworkError):
            init_velocity_net(dim=2, hidden=8, depth=1, n_classes=0, seed=0)


class TestForward:
    def test_r_equal_t_is_single_time_net(self):
        # with r == t the differential branch sees input 0 and contributes a
        # constant shift; the net is then a plain single-time velocity model
        net = small_net(seed=5)
        p = net.params
        feats0 = np.concatenate(
            [np.zeros(net.arch.n_freqs), np.ones(net.arch.n_freqs)]
        )
        const_shift = (
            _silu(feats0 @ p["dt_embed.w0"] + p["dt_embed.b0"]) @ p["dt_embed.w1"]
            + p["dt_embed.b1"]
        )
        rng = np.random.default_rng(0)
        z = rng.standard_normal((6, 2))
        t = rng.uniform(0, 1, size=6)
        got = forward_velocity(net, z, t, t).array

        # single-time reference path: t branch + folded constant
        args = (t[:, None] * net.arch.t_scale) * net.freqs[None, :]
        feats = np.concatenate([np.sin(args), np.cos(args)], axis=1)
        emb_t = _silu(feats @ p["t_embed.w0"] + p["t_embed.b0"]) @ p["t_embed.w1"] + p["t_embed.b1"]
        onehot = one_hot_condition(None, 6, net.arch.n_classes)
        emb = emb_t + const_shift + onehot @ p["class_table"]
        h = _silu(z @ p["trunk.in.w"] + p["trunk.in.b"] + emb)
        for i in range(net.arch.depth - 1):
            h = _silu(h @ p[f"trunk.h{i}.w"] + p[f"trunk.h{i}.b"] + emb)
        want = h @ p["trunk.out.w"] + p["trunk.out.b"]
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_cond_none_uses_null_class(self):
        net = small_net()
        z = np.ones((3, 2))
        a = forward_velocity(net, z, 0.1, 0.5, cond=None).array
        b = forward_velocity(net, z, 0.1, 0.5, cond=np.array([-1, -1, -1])).array
        np.testing.assert_array_equal(a, b)
        c = forward_velocity(net, z, 0.1, 0.5, cond=0).array
        assert np.any(a != c)

    def test_r_greater_t_rejected(self):
        net = small_net()
        with pytest.raises(NetworkError):
            forward_velocity(net, np.zeros((1, 2)), 0.9, 0.5)

    def test_jvp_matches_central_differences(self):
        # directional derivative along (v, 0, 1): dz = v, dr = 0, dt = 1
        net = small_net(seed=8)
        rng = np.random.default_rng(1)
        z = rng.standard_normal((4, 2))
        v = rng.standard_normal((4, 2))
        r = np.full(4, 0.2)
        t = np.full(4, 0.6)
        dual = jvp_velocity(net, z, r, t, None, v, 0.0, 1.0)
        h = 1e-4
        plus = forward_velocity(net, z + h * v, r, t + h).array
        minus = forward_velocity(net, z - h * v, r, t - h).array
        num = (plus - minus) / (2 * h)
        rel = np.abs(dual.tangent.array - num) / np.maximum(
            np.abs(num), 1e-3
        )
        assert np.max(rel) < 1e-4

    def test_smooth_in_t(self):
        # bounded second differences on [0.01, 0.99]: no kinks along time
        net = small_net(seed=2)
        z = np.ones((1, 2))
        ts = np.linspace(0.01, 0.99, 99)
        h = ts[1] - ts[0]
        vals = np.array([forward_velocity(net, z, t, t).array[0] for t in ts])
        second = (vals[2:] - 2 * vals[1:-1] + vals[:-2]) / h**2
        assert np.max(np.abs(second)) < 1e4

    def test_call_counter(self):
        net = small_net()
        before = net.calls
        forward_velocity(net, np.zeros((1, 2)), 0.0, 1.0)
        assert net.calls == before + 1


class TestTarget:
    def test_synced_exact_copy(self):
        online = small_net(seed=1)
        target = TargetNet(online, mode="synced")
        for name in online.params:
            online.params[name] += 0.5
        sync_target(target, online)
        for name in online.params:
            assert np.max(np.abs(target.net.params[name] - online.params[name])) == 0.0

    def test_ema_decay_one_unchanged(self):
        online = small_net(seed=1)
        target = TargetNet(online, mode="ema", decay=1.0)
        snapshot = {k: v.copy() for k, v in target.net.params.items()}
        for name in online.params:
            online.params[name] += 1.0
        sync_target(target, online)
        for name in snapshot:
            np.testing.assert_array_equal(target.net.params[name], snapshot[name])

    def test_ema_decay_zero_equals_online(self):
        online = small_net(seed=1)
        target = TargetNet(online, mode="ema", decay=0.0)
        for name in online.params:
            online.params[name] += 2.0
        sync_target(target, online)
        for name in online.params:
            np.testing.assert_array_equal(target.net.params[name], online.params[name])


class TestRescaleDistill:
    def test_smooth_l1_formula(self):
        beta = 0.8
        assert smooth_l1(beta / 2, beta) == pytest.approx(beta / 8)
        assert smooth_l1(2 * beta, beta) == pytest.approx(2 * beta - beta / 2)

    def test_copy_with_compensating_scale_zero_loss(self):
        teacher = small_net(seed=4, t_scale=1000.0)
        student = small_net(seed=4, t_scale=1000.0)  # same clock: same function
        data = np.random.default_rng(0).standard_normal((64, 2))
        _, loss, log = rescale_distill(teacher, student, data, steps=1, lr=0.0, batch=16)
        assert log[0][1] == 0.0

    def test_distillation_reduces_gap(self):
        teacher = small_net(seed=4, t_scale=1000.0)
        student = small_net(seed=4, t_scale=1.0)
        data = np.random.default_rng(0).standard_normal((256, 2))
        gap_before = net_mod.rescale_discrepancy(teacher, student, data, n_grid=128)
        student, loss, _ = rescale_distill(
            teacher, student, data, steps=300, lr=3e-3, batch=64, seed=1
        )
        gap_after = net_mod.rescale_discrepancy(teacher, student, data, n_grid=128)
        assert gap_after < gap_before
        assert np.isfinite(loss)
