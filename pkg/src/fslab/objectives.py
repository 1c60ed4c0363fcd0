"""Training objectives for velocity, average-velocity, and consistency models.

All targets are held behind stop-gradient, so every objective reduces to one
forward-mode pass (to assemble the target) plus one reverse-mode pass through
a regression-style graph.  Single-time functions F(x, t) are evaluated as
u(x, 0, t): the destination-time-zero slice of the dual-time network, which is
also the boundary-respecting consistency parameterization g(x, t) = x - t F(x, t).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import DivergenceError, GraphBuilder
from .network import (
    TargetNet,
    VelocityNet,
    build_forward,
    forward_velocity,
    jvp_velocity,
    one_hot_condition,
    param_shapes,
)
from .schedules import TimeSamplerConfig, fm_interpolate, sample_t_r
from .tensor import Tensor, as_array

POWER_EPS = 1e-8

LOSS_KINDS = ("fm", "meanflow_train", "meanflow_distill", "scm", "imm", "cm")


class ObjectiveError(ValueError):
    pass


@dataclass(frozen=True)
class LossSpec:
    kind: str
    gamma: float = None  # defaults to 2 for teacher distillation, 1 otherwise
    omega: float = 0.0
    kappa: float = 0.0
    adaptive_variance: bool = False
    weight_fn: str = "one"
    jvp_tangent: str = "interpolant"  # tangent fed to the forward-mode pass

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ObjectiveError(f"unknown loss kind {self.kind!r}")
        if self.gamma is None:
            object.__setattr__(
                self, "gamma", 2.0 if self.kind == "meanflow_distill" else 1.0
            )
        if self.gamma < 0.5:
            raise ObjectiveError(f"gamma {self.gamma} < 0.5")
        if self.gamma not in (0.5, 1.0, 2.0):
            warnings.warn(f"unconventional gamma {self.gamma}", stacklevel=2)
        if not 0.0 <= self.kappa <= 1.0:
            raise ObjectiveError(f"kappa {self.kappa} outside [0, 1]")
        if self.omega < 0.0:
            raise ObjectiveError(f"omega {self.omega} < 0")
        if self.jvp_tangent not in ("interpolant", "teacher"):
            raise ObjectiveError(f"unknown jvp_tangent {self.jvp_tangent!r}")


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "neg_sq_euclid"  # "neg_sq_euclid" | "rbf" | "laplace"
    bandwidth: float = 1.0

    def __post_init__(self):
        if self.kind not in ("neg_sq_euclid", "rbf", "laplace"):
            raise ObjectiveError(f"unknown kernel {self.kind!r}")
        if self.bandwidth <= 0:
            raise ObjectiveError("bandwidth must be positive")


def kernel_eval(spec: KernelSpec, a, b):
    """Row-wise kernel between paired samples; returns shape (B,)."""
    d = as_array(a) - as_array(b)
    if spec.kind == "neg_sq_euclid":
        return -np.sum(d * d, axis=-1)
    if spec.kind == "rbf":
        return np.exp(-np.sum(d * d, axis=-1) / (2.0 * spec.bandwidth**2))
    return np.exp(-np.sum(np.abs(d), axis=-1) / spec.bandwidth)


@dataclass
class InterpolantBatch:
    """One training batch under the linear interpolant."""

    x: np.ndarray
    noise: np.ndarray
    z: np.ndarray
    v: np.ndarray
    t: np.ndarray
    r: np.ndarray
    cond: Optional[np.ndarray] = None

    @property
    def size(self):
        return self.x.shape[0]


@dataclass
class PairBatch:
    """Paired states for distribution-consistency losses; times s < r < t."""

    x_t: np.ndarray
    x_t_prime: np.ndarray
    x_r: np.ndarray
    x_r_prime: np.ndarray
    s: np.ndarray
    r: np.ndarray
    t: np.ndarray
    cond: Optional[np.ndarray] = None

    @property
    def size(self):
        return self.x_t.shape[0]


def make_interpolant_batch(x, rng, time_cfg=None, cond=None, cond_dropout=0.0):
    """Draw (noise, times) and interpolate; time_cfg=None forces r = t."""
    xa = as_array(x)
    n = xa.shape[0]
    if time_cfg is None:
        t = rng.uniform(0.0, 1.0, size=n)
        r = t
    else:
        t, r = sample_t_r(time_cfg, rng, size=n)
    noise = rng.standard_normal(xa.shape)
    z, v = fm_interpolate(xa, noise, t)
    c = None
    if cond is not None:
        c = np.asarray(cond, dtype=np.int64).copy()
        if cond_dropout > 0.0:
            drop = rng.uniform(size=n) < cond_dropout
            c[drop] = -1
    return InterpolantBatch(xa, noise, z.array, v.array, t, r, c)


def make_pair_batch(x, x_prime, rng, s_zero=False, cond=None):
    """Shared-path pairs (x_t, x_r) for two independent draws of data and noise."""
    xa, xpa = as_array(x), as_array(x_prime)
    n = xa.shape[0]
    times = np.sort(rng.uniform(0.0, 1.0, size=(n, 3)), axis=1)
    s, r, t = times[:, 0], times[:, 1], times[:, 2]
    if s_zero:
        s = np.zeros(n)
    # keep orderings strict; degenerate draws are measure-zero but guarded
    r = np.clip(r, s + 1e-9, None)
    t = np.clip(t, r + 1e-9, 1.0)
    e = rng.standard_normal(xa.shape)
    ep = rng.standard_normal(xpa.shape)
    x_t, _ = fm_interpolate(xa, e, t)
    x_r, _ = fm_interpolate(xa, e, r)
    x_tp, _ = fm_interpolate(xpa, ep, t)
    x_rp, _ = fm_interpolate(xpa, ep, r)
    c = np.asarray(cond, dtype=np.int64) if cond is not None else None
    return PairBatch(x_t.array, x_tp.array, x_r.array, x_rp.array, s, r, t, c)


# ---------------------------------------------------------------------------
# Power metric
# ---------------------------------------------------------------------------


def power_metric(delta, gamma, adaptive_logvar=None):
    """(|delta|_2^2 + eps)^gamma, optionally variance-weighted.

    With a learned log-variance w the value is base / exp(w) + w.  The eps
    floor keeps gamma = 0.5 differentiable at delta = 0.
    """
    d = as_array(delta)
    base = (float(np.sum(d * d)) + POWER_EPS) ** gamma
    if adaptive_logvar is not None:
        w = float(adaptive_logvar)
        return base / np.exp(w) + w
    return base


# ---------------------------------------------------------------------------
# Shared graph machinery
# ---------------------------------------------------------------------------

_GRAPH_CACHE: dict = {}


def _loss_graph(net: VelocityNet, batch: int, kind: str, extra=()):
    key = (net.arch, batch, kind, extra)
    g = _GRAPH_CACHE.get(key)
    if g is None:
        g = _BUILDERS[kind](net, batch, *extra)
        _GRAPH_CACHE[key] = g
    return g


def _net_io(b: GraphBuilder, net: VelocityNet, batch: int):
    z = b.input((batch, net.arch.dim), "z")
    r = b.input((batch,), "r")
    t = b.input((batch,), "t")
    onehot = b.input((batch, net.arch.n_classes + 1), "onehot")
    pvars = {name: b.input(shape, name) for name, shape in param_shapes(net.arch).items()}
    return z, r, t, onehot, pvars


def _build_regression_graph(net, batch, gamma):
    b = GraphBuilder()
    z, r, t, onehot, pvars = _net_io(b, net, batch)
    target = b.stop_gradient(b.input((batch, net.arch.dim), "target"))
    u = build_forward(b, z, r, t, onehot, pvars, net.arch, net.freqs)
    d = b.sub(u, target, name="residual")
    persample = b.sum(b.mul(d, d), axis=1)
    base = b.pow_const(b.add_scalar(persample, POWER_EPS), gamma)
    loss = b.scale(b.sum(base, axis=None), 1.0 / batch, name="mean_power_loss")
    return b.build(loss)


def _build_scm_graph(net, batch):
    b = GraphBuilder()
    x, r, t, onehot, pvars = _net_io(b, net, batch)
    gin = b.stop_gradient(b.input((batch, net.arch.dim), "error_signal"))
    f_net = build_forward(b, x, r, t, onehot, pvars, net.arch, net.freqs)
    t_col = b.expand(b.reshape(t, (batch, 1)), (batch, net.arch.dim))
    f = b.sub(x, b.mul(t_col, f_net), name="boundary_param")
    inner = b.sum(b.mul(f, gin), axis=1)
    loss = b.scale(b.sum(inner, axis=None), 1.0 / batch, name="tangent_inner_loss")
    return b.build(loss)


def _kernel_var(b, spec: KernelSpec, ya, yb, batch):
    d = b.sub(ya, yb)
    if spec.kind == "neg_sq_euclid":
        return b.scale(b.sum(b.mul(d, d), axis=1), -1.0)
    if spec.kind == "rbf":
        return b.exp(b.scale(b.sum(b.mul(d, d), axis=1), -1.0 / (2.0 * spec.bandwidth**2)))
    return b.exp(b.scale(b.sum(b.abs(d), axis=1), -1.0 / spec.bandwidth))


def _build_imm_graph(net, batch, kernel_kind, bandwidth):
    spec = KernelSpec(kernel_kind, bandwidth)
    b = GraphBuilder()
    x_t, r, t, onehot, pvars = _net_io(b, net, batch)
    x_tp = b.input((batch, net.arch.dim), "x_t_prime")
    coeff = b.input((batch,), "coeff")  # t - s per sample
    y_sr = b.stop_gradient(b.input((batch, net.arch.dim), "y_sr"))
    y_srp = b.stop_gradient(b.input((batch, net.arch.dim), "y_sr_prime"))
    k_rr = b.stop_gradient(b.input((batch,), "k_rr"))
    w = b.input((batch,), "weight")

    c_col = b.expand(b.reshape(coeff, (batch, 1)), (batch, net.arch.dim))
    f1 = build_forward(b, x_t, r, t, onehot, pvars, net.arch, net.freqs)
    y1 = b.sub(x_t, b.mul(c_col, f1), name="y_st")
    f2 = build_forward(b, x_tp, r, t, onehot, pvars, net.arch, net.freqs)
    y2 = b.sub(x_tp, b.mul(c_col, f2), name="y_st_prime")

    k11 = _kernel_var(b, spec, y1, y2, batch)
    k1r = _kernel_var(b, spec, y1, y_srp, batch)
    k2r = _kernel_var(b, spec, y2, y_sr, batch)
    per = b.mul(w, b.sub(b.add(k11, k_rr), b.add(k1r, k2r)))
    loss = b.scale(b.sum(per, axis=None), 1.0 / batch, name="moment_match_loss")
    return b.build(loss)


def _build_cm_graph(net, batch):
    b = GraphBuilder()
    x_t, r, t, onehot, pvars = _net_io(b, net, batch)
    g_tgt = b.stop_gradient(b.input((batch, net.arch.dim), "g_target"))
    w = b.input((batch,), "weight")
    f_net = build_forward(b, x_t, r, t, onehot, pvars, net.arch, net.freqs)
    t_col = b.expand(b.reshape(t, (batch, 1)), (batch, net.arch.dim))
    g = b.sub(x_t, b.mul(t_col, f_net), name="boundary_param")
    d = b.sub(g, g_tgt)
    per = b.mul(w, b.sum(b.mul(d, d), axis=1))
    loss = b.scale(b.sum(per, axis=None), 1.0 / batch, name="consistency_l2_loss")
    return b.build(loss)


_BUILDERS = {
    "reg": _build_regression_graph,
    "scm": _build_scm_graph,
    "imm": _build_imm_graph,
    "cm": _build_cm_graph,
}


def _run_graph(net, graph, inputs, want_grads):
    loss = float(ad.forward(graph, inputs).array)
    if not np.isfinite(loss):
        raise DivergenceError("loss is non-finite")
    if not want_grads:
        return loss, None
    grads = ad.backward(graph, inputs, np.asarray(1.0))
    gmap = {
        name: grads[4 + i].array for i, name in enumerate(param_shapes(net.arch))
    }
    return loss, gmap


def _resolve_weight(weight_fn, s, t):
    if weight_fn is None or weight_fn == "one":
        return np.ones_like(t)
    if callable(weight_fn):
        return as_array(weight_fn(s, t))
    raise ObjectiveError(f"unknown weight_fn {weight_fn!r}")


def _cond_onehot(cond, batch, n_classes):
    return one_hot_condition(cond, batch, n_classes)


# ---------------------------------------------------------------------------
# Velocity-regression objectives
# ---------------------------------------------------------------------------


def _regression(net, z, r, t, cond, target, gamma, want_grads):
    batch = z.shape[0]
    graph = _loss_graph(net, batch, "reg", (float(gamma),))
    onehot = _cond_onehot(cond, batch, net.arch.n_classes)
    inputs = [z, r, t, onehot] + net.param_list() + [target]
    return _run_graph(net, graph, inputs, want_grads)


def fm_loss(net, batch: InterpolantBatch, gamma=1.0, return_grads=False):
    """Instantaneous-velocity regression; the r = t slice of the dual-time net."""
    loss, grads = _regression(
        net, batch.z, batch.t, batch.t, batch.cond, batch.v, gamma, return_grads
    )
    return (loss, grads) if return_grads else loss


def _meanflow_target(net, batch, v_target, spec):
    """u_tgt = v_target - (t - r) du/dt with du/dt from one forward-mode pass."""
    tangent = batch.v if spec.jvp_tangent == "interpolant" else v_target
    dual = jvp_velocity(net, batch.z, batch.r, batch.t, batch.cond, tangent, 0.0, 1.0)
    dudt = dual.tangent.array
    if not np.all(np.isfinite(dudt)):
        bad = ~np.all(np.isfinite(dudt), axis=1)
        raise DivergenceError(
            f"du/dt non-finite at t={batch.t[bad][:4]!r}, r={batch.r[bad][:4]!r}"
        )
    return v_target - (batch.t - batch.r)[:, None] * dudt


def meanflow_train_loss(net, batch: InterpolantBatch, spec: LossSpec, return_grads=False):
    """Average-velocity self-training: regress u onto v - (t - r) du/dt."""
    u_tgt = _meanflow_target(net, batch, batch.v, spec)
    loss, grads = _regression(
        net, batch.z, batch.r, batch.t, batch.cond, u_tgt, spec.gamma, return_grads
    )
    return (loss, grads) if return_grads else loss


def _model_velocity(model, z, t, cond):
    """Single-time velocity from a VelocityNet or a plain (z, t, cond) callable."""
    if isinstance(model, VelocityNet):
        return forward_velocity(model, z, t, t, cond).array
    return as_array(model(z, t, cond))


def cfg_teacher_velocity(teacher, z, t, cond, omega):
    """v_u + omega (v_c - v_u); omega = 1 and omega = 0 are exact passthroughs."""
    if omega == 1.0:
        return _model_velocity(teacher, z, t, cond)
    v_u = _model_velocity(teacher, z, t, None)
    if omega == 0.0:
        return v_u
    v_c = _model_velocity(teacher, z, t, cond)
    return v_u + omega * (v_c - v_u)


def improved_cfg_target(teacher, student, z, t, cond, omega, kappa):
    """omega v_c + (1 - omega - kappa) v_u + kappa u_student, student detached."""
    if not 0.0 <= kappa <= 1.0:
        raise ObjectiveError(f"kappa {kappa} outside [0, 1]")
    v_c = _model_velocity(teacher, z, t, cond)
    if kappa == 0.0 and omega == 1.0:
        return v_c
    v_u = _model_velocity(teacher, z, t, None)
    out = omega * v_c + (1.0 - omega - kappa) * v_u
    if kappa > 0.0:
        u_s = _model_velocity(student, z, t, cond)
        out = out + kappa * u_s
    return out


def teacher_velocity_target(teacher, student, batch, spec):
    if spec.kappa > 0.0:
        return improved_cfg_target(
            teacher, student, batch.z, batch.t, batch.cond, spec.omega, spec.kappa
        )
    if spec.omega > 0.0:
        return cfg_teacher_velocity(teacher, batch.z, batch.t, batch.cond, spec.omega)
    return _model_velocity(teacher, batch.z, batch.t, batch.cond)


def meanflow_distill_loss(
    net, teacher, batch: InterpolantBatch, spec: LossSpec, return_grads=False
):
    """Average-velocity distillation: the teacher supplies the velocity term."""
    v_teacher = teacher_velocity_target(teacher, net, batch, spec)
    u_tgt = _meanflow_target(net, batch, v_teacher, spec)
    loss, grads = _regression(
        net, batch.z, batch.r, batch.t, batch.cond, u_tgt, spec.gamma, return_grads
    )
    return (loss, grads) if return_grads else loss


# ---------------------------------------------------------------------------
# Continuous-time consistency objective
# ---------------------------------------------------------------------------


def scm_error_signal(target_net: VelocityNet, batch: InterpolantBatch):
    """v - F - t dF/dt evaluated on the target parameters (one JVP)."""
    dual = jvp_velocity(
        target_net, batch.z, np.zeros_like(batch.t), batch.t, batch.cond,
        batch.v, 0.0, 1.0,
    )
    f_tgt = dual.primal.array
    dfdt = dual.tangent.array
    if not np.all(np.isfinite(dfdt)):
        raise DivergenceError(f"dF/dt non-finite at t={batch.t[:4]!r}")
    return batch.v - f_tgt - batch.t[:, None] * dfdt


def scm_loss(
    net,
    target_net,
    batch: InterpolantBatch,
    spec: LossSpec = None,
    adaptive_logvar=None,
    return_grads=False,
):
    """Inner-product surrogate whose gradient is -<t grad F, error_signal>.

    Returns (loss, error_signal) where the error signal is the total time
    derivative of the boundary parameterization x - t F(x, t) on the target
    network.  The surrogate value itself is sign-indefinite; its gradient is
    the object of interest.  t = 0 samples contribute zero gradient.
    """
    tn = target_net.net if isinstance(target_net, TargetNet) else target_net
    g = scm_error_signal(tn, batch)
    batch_n = batch.size
    graph = _loss_graph(net, batch_n, "scm")
    onehot = _cond_onehot(batch.cond, batch_n, net.arch.n_classes)
    zeros_r = np.zeros_like(batch.t)
    inputs = [batch.z, zeros_r, batch.t, onehot] + net.param_list() + [g]
    loss, grads = _run_graph(net, graph, inputs, return_grads)
    if spec is not None and spec.adaptive_variance and adaptive_logvar is not None:
        w = float(adaptive_logvar)
        loss = loss / np.exp(w) + w
        if grads is not None:
            for k in grads:
                grads[k] = grads[k] / np.exp(w)
    signal = Tensor(g)
    return (loss, signal, grads) if return_grads else (loss, signal)


def meanflow_r0_grads(net, batch: InterpolantBatch):
    """Parameter gradient of 0.5 |F - sg(v - t dF/dt)|^2 at r = 0.

    The half factor matches the convention under which the consistency
    surrogate gradient equals t times this gradient when the target is synced.
    """
    dual = jvp_velocity(
        net, batch.z, np.zeros_like(batch.t), batch.t, batch.cond, batch.v, 0.0, 1.0
    )
    u_tgt = batch.v - batch.t[:, None] * dual.tangent.array
    _, grads = _regression(
        net, batch.z, np.zeros_like(batch.t), batch.t, batch.cond, u_tgt, 1.0, True
    )
    return {k: 0.5 * v for k, v in grads.items()}


def scm_vs_meanflow_gradient_relation(net, batch: InterpolantBatch):
    """Per-sample gradient comparison with the target synced to the online net.

    Checks grad_consistency == t * grad_meanflow(r=0) elementwise and reports
    the worst relative error and the cosine similarity of the two gradients.
    """
    if batch.size != 1:
        raise ObjectiveError("gradient relation is defined per sample")
    t = float(batch.t[0])
    _, _, grads_scm = scm_loss(net, net, batch, return_grads=True)
    grads_mf = meanflow_r0_grads(net, batch)
    flat_scm = np.concatenate([grads_scm[k].ravel() for k in grads_scm])
    flat_mf = np.concatenate([grads_mf[k].ravel() for k in grads_mf])
    scaled = t * flat_mf
    denom = np.maximum(np.maximum(np.abs(flat_scm), np.abs(scaled)), 1e-12)
    max_rel = float(np.max(np.abs(flat_scm - scaled) / denom))
    na, nb = np.linalg.norm(flat_scm), np.linalg.norm(scaled)
    cosine = 1.0 if na == nb == 0.0 else float(flat_scm @ scaled / (na * nb))
    return {"t": t, "max_rel_err": max_rel, "cosine": cosine}


# ---------------------------------------------------------------------------
# Moment-matching and discrete consistency objectives
# ---------------------------------------------------------------------------


def _consistency_map(net, x, dest, src, cond):
    """f_{dest,src}(x) = x - (src - dest) u(x, 0, src): boundary-respecting map."""
    f = forward_velocity(net, x, np.zeros_like(src), src, cond).array
    return x - (src - dest)[:, None] * f


def imm_loss(net, target_net, batch_pairs: PairBatch, kernel: KernelSpec,
             weight_fn="one", return_grads=False):
    """Kernel two-pair objective; target-time maps go through the target net."""
    pb = batch_pairs
    if np.any(pb.s >= pb.r) or np.any(pb.r >= pb.t):
        raise ObjectiveError("times must satisfy s < r < t")
    tn = target_net.net if isinstance(target_net, TargetNet) else target_net
    y_sr = _consistency_map(tn, pb.x_r, pb.s, pb.r, pb.cond)
    y_srp = _consistency_map(tn, pb.x_r_prime, pb.s, pb.r, pb.cond)
    k_rr = kernel_eval(kernel, y_sr, y_srp)
    w = _resolve_weight(weight_fn, pb.s, pb.t)
    n = pb.size
    graph = _loss_graph(net, n, "imm", (kernel.kind, float(kernel.bandwidth)))
    onehot = _cond_onehot(pb.cond, n, net.arch.n_classes)
    coeff = pb.t - pb.s
    inputs = (
        [pb.x_t, np.zeros(n), pb.t, onehot]
        + net.param_list()
        + [pb.x_t_prime, coeff, y_sr, y_srp, k_rr, w]
    )
    loss, grads = _run_graph(net, graph, inputs, return_grads)
    return (loss, grads) if return_grads else loss


def cm_loss(net, target_net, batch: PairBatch, weight_fn="one", return_grads=False):
    """Discrete-time consistency: match x - t F(x, t) across the pair (t, r)."""
    pb = batch
    if np.any(pb.r > pb.t):
        raise ObjectiveError("times must satisfy r <= t")
    tn = target_net.net if isinstance(target_net, TargetNet) else target_net
    g_tgt = pb.x_r - pb.r[:, None] * forward_velocity(
        tn, pb.x_r, np.zeros_like(pb.r), pb.r, pb.cond
    ).array
    w = _resolve_weight(weight_fn, None, pb.t)
    n = pb.size
    graph = _loss_graph(net, n, "cm")
    onehot = _cond_onehot(pb.cond, n, net.arch.n_classes)
    inputs = [pb.x_t, np.zeros(n), pb.t, onehot] + net.param_list() + [g_tgt, w]
    loss, grads = _run_graph(net, graph, inputs, return_grads)
    return (loss, grads) if return_grads else loss
