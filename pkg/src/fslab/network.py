"""MLP velocity networks with a dual time-embedding branch and class conditioning.

The network models u(z, r, t): an average velocity over [r, t] when the two
times differ, and the instantaneous velocity when r == t.  Time enters through
sinusoidal features of t and of the differential (t - r), each projected by a
two-layer MLP; the (t - r) branch starts as an exact weight copy of the t
branch, so at init the two encode the same time response.  The summed
embedding additively modulates every hidden trunk layer.

`t_scale` maps the external time in [0, 1] to the network's internal clock
(1.0 for the normalized regime, 1000.0 for the legacy wide-range regime), so
the timestep-rescaling distillation procedure has something real to rescale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DivergenceError, GraphBuilder
from .optim import RMSOptimizer
from .tensor import Tensor, as_array

FREQ_MIN = 0.05
FREQ_MAX = 30.0


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class NetArch:
    dim: int
    hidden: int
    depth: int
    n_classes: int
    t_scale: float = 1.0
    n_freqs: int = 64
    freq_min: float = FREQ_MIN
    freq_max: float = FREQ_MAX

    def __post_init__(self):
        if self.dim < 1:
            raise NetworkError(f"dim {self.dim} < 1")
        if self.depth < 2:
            raise NetworkError(f"depth {self.depth} < 2")
        if self.hidden < 1 or self.n_classes < 0 or self.n_freqs < 1:
            raise NetworkError("invalid sizes")
        if not 0.0 < self.freq_min < self.freq_max:
            raise NetworkError("invalid frequency band")
        # scalars are held at f32 precision so checkpoints round-trip exactly
        for name in ("t_scale", "freq_min", "freq_max"):
            object.__setattr__(self, name, float(np.float32(getattr(self, name))))


def _frequencies(arch: NetArch):
    return np.geomspace(arch.freq_min, arch.freq_max, arch.n_freqs)


def param_shapes(arch: NetArch) -> dict[str, tuple[int, ...]]:
    h, f = arch.hidden, arch.n_freqs
    shapes: dict[str, tuple[int, ...]] = {}
    for branch in ("t_embed", "dt_embed"):
        shapes[f"{branch}.w0"] = (2 * f, h)
        shapes[f"{branch}.b0"] = (h,)
        shapes[f"{branch}.w1"] = (h, h)
        shapes[f"{branch}.b1"] = (h,)
    shapes["class_table"] = (arch.n_classes + 1, h)
    shapes["trunk.in.w"] = (arch.dim, h)
    shapes["trunk.in.b"] = (h,)
    for i in range(arch.depth - 1):
        shapes[f"trunk.h{i}.w"] = (h, h)
        shapes[f"trunk.h{i}.b"] = (h,)
    shapes["trunk.out.w"] = (h, arch.dim)
    shapes["trunk.out.b"] = (arch.dim,)
    return shapes


class VelocityNet:
    """Parameter set plus cached computation graphs; `calls` counts forwards."""

    def __init__(self, arch: NetArch, params: dict[str, np.ndarray]):
        self.arch = arch
        self.params = params
        self.freqs = _frequencies(arch)
        self.calls = 0
        self._graph_cache: dict[int, ad.Graph] = {}

    @property
    def param_names(self) -> list[str]:
        return list(self.params.keys())

    def clone(self) -> "VelocityNet":
        return VelocityNet(self.arch, {k: v.copy() for k, v in self.params.items()})

    def graph_for(self, batch: int) -> ad.Graph:
        g = self._graph_cache.get(batch)
        if g is None:
            g = _build_net_graph(self.arch, self.freqs, batch)
            self._graph_cache[batch] = g
        return g

    def param_list(self) -> list[np.ndarray]:
        return list(self.params.values())


def init_velocity_net(dim, hidden, depth, n_classes, seed, t_scale=1.0, n_freqs=64,
                      freq_min=FREQ_MIN, freq_max=FREQ_MAX):
    """Deterministic init; the (t - r) branch is cloned from the t branch."""
    arch = NetArch(dim, hidden, depth, n_classes, t_scale, n_freqs, freq_min, freq_max)
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(arch).items():
        if name.startswith("dt_embed."):
            params[name] = params["t_embed." + name.split(".", 1)[1]].copy()
        elif name == "class_table":
            params[name] = 0.02 * rng.standard_normal(shape)
        elif name.endswith(".b"):
            params[name] = np.zeros(shape)
        elif name.endswith((".b0", ".b1")):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
    return VelocityNet(arch, params)


def _time_features(b, tvar, batch, freqs_const, n_freqs):
    col = b.reshape(tvar, (batch, 1))
    args = b.mul(b.expand(col, (batch, n_freqs)), freqs_const)
    return b.concat([b.sin(args), b.cos(args)], axis=1)


def build_forward(b, z, r, t, onehot, pvars, arch: NetArch, freqs):
    """Emit the network forward pass into an existing GraphBuilder.

    z: (B, dim), r/t: (B,), onehot: (B, n_classes + 1); pvars maps parameter
    names to graph Vars.  Returns the output Var of shape (B, dim).
    """
    batch = z.shape[0]
    freqs_const = b.expand(
        b.const(freqs.reshape(1, -1), name="freqs"), (batch, arch.n_freqs)
    )

    def branch(prefix, times):
        feats = _time_features(b, times, batch, freqs_const, arch.n_freqs)
        h0 = b.silu(b.affine(feats, pvars[f"{prefix}.w0"], pvars[f"{prefix}.b0"]))
        return b.affine(h0, pvars[f"{prefix}.w1"], pvars[f"{prefix}.b1"])

    t_int = b.scale(t, arch.t_scale, name="t_internal")
    dt_int = b.scale(b.sub(t, r), arch.t_scale, name="dt_internal")
    emb = b.add(
        b.add(branch("t_embed", t_int), branch("dt_embed", dt_int)),
        b.matmul(onehot, pvars["class_table"]),
        name="time_embedding",
    )

    h = b.silu(b.add(b.affine(z, pvars["trunk.in.w"], pvars["trunk.in.b"]), emb))
    for i in range(arch.depth - 1):
        h = b.silu(
            b.add(b.affine(h, pvars[f"trunk.h{i}.w"], pvars[f"trunk.h{i}.b"]), emb)
        )
    return b.affine(h, pvars["trunk.out.w"], pvars["trunk.out.b"], name="velocity_out")


def _build_net_graph(arch: NetArch, freqs, batch: int) -> ad.Graph:
    b = GraphBuilder()
    z = b.input((batch, arch.dim), "z")
    r = b.input((batch,), "r")
    t = b.input((batch,), "t")
    onehot = b.input((batch, arch.n_classes + 1), "onehot")
    pvars = {
        name: b.input(shape, name) for name, shape in param_shapes(arch).items()
    }
    out = build_forward(b, z, r, t, onehot, pvars, arch, freqs)
    return b.build(out)


def _as_time_vec(value, batch, name):
    arr = as_array(value)
    if arr.ndim == 0:
        arr = np.full(batch, float(arr))
    if arr.shape != (batch,):
        raise NetworkError(f"{name} shape {arr.shape} incompatible with batch {batch}")
    return arr


def one_hot_condition(cond, batch, n_classes):
    """Class ids to one-hot rows; None or -1 selects the null-class vector."""
    null = n_classes
    if cond is None:
        ids = np.full(batch, null, dtype=np.int64)
    else:
        ids = np.asarray(cond)
        if ids.ndim == 0:
            ids = np.full(batch, int(ids), dtype=np.int64)
        ids = ids.astype(np.int64).copy()
        ids[ids < 0] = null
        if ids.shape != (batch,):
            raise NetworkError(f"cond shape {ids.shape} incompatible with batch {batch}")
        if np.any(ids > null):
            raise NetworkError("class id out of range")
    onehot = np.zeros((batch, n_classes + 1))
    onehot[np.arange(batch), ids] = 1.0
    return onehot


def net_inputs(net: VelocityNet, z, r, t, cond):
    za = as_array(z)
    if za.ndim != 2 or za.shape[1] != net.arch.dim:
        raise NetworkError(f"z shape {za.shape} != (batch, {net.arch.dim})")
    batch = za.shape[0]
    ra = _as_time_vec(r, batch, "r")
    ta = _as_time_vec(t, batch, "t")
    if np.any(ra > ta + 1e-12):
        raise NetworkError("r > t")
    if np.any(ta < -1e-12) or np.any(ta > 1.0 + 1e-9) or np.any(ra < -1e-12):
        raise NetworkError("times outside [0, 1]")
    onehot = one_hot_condition(cond, batch, net.arch.n_classes)
    return [za, ra, ta, onehot] + net.param_list()


def forward_velocity(net: VelocityNet, z, r, t, cond=None) -> Tensor:
    """u(z, r, t); with r == t this is a plain single-time velocity net."""
    inputs = net_inputs(net, z, r, t, cond)
    net.calls += 1
    return ad.forward(net.graph_for(inputs[0].shape[0]), inputs)


def jvp_velocity(net: VelocityNet, z, r, t, cond, dz, dr, dt):
    """Forward-mode pass through u along per-sample tangents (dz, dr, dt)."""
    inputs = net_inputs(net, z, r, t, cond)
    batch = inputs[0].shape[0]
    tangents = [
        as_array(dz),
        _as_time_vec(dr, batch, "dr"),
        _as_time_vec(dt, batch, "dt"),
        np.zeros_like(inputs[3]),
    ] + [np.zeros_like(p) for p in net.param_list()]
    net.calls += 1
    return ad.jvp(net.graph_for(batch), inputs, tangents)


# ---------------------------------------------------------------------------
# Target networks
# ---------------------------------------------------------------------------


class TargetNet:
    """Snapshot of online parameters: exact copy each step, or an EMA blend."""

    def __init__(self, online: VelocityNet, mode="synced", decay=0.999):
        if mode not in ("synced", "ema"):
            raise NetworkError(f"unknown target mode {mode!r}")
        self.mode = mode
        self.decay = float(decay)
        self.net = online.clone()


def sync_target(target: TargetNet, online: VelocityNet) -> TargetNet:
    for name, src in online.params.items():
        dst = target.net.params[name]
        if dst.shape != src.shape:
            raise NetworkError(f"shape mismatch for {name}")
        if target.mode == "synced":
            np.copyto(dst, src)
        else:
            dst *= target.decay
            dst += (1.0 - target.decay) * src
    return target


# ---------------------------------------------------------------------------
# Timestep-rescaling distillation
# ---------------------------------------------------------------------------


def smooth_l1(delta, beta=1.0):
    """Elementwise smooth-L1: 0.5 d^2 / beta inside |d| < beta, |d| - beta/2 outside."""
    d = as_array(delta)
    return np.where(np.abs(d) < beta, 0.5 * d * d / beta, np.abs(d) - 0.5 * beta)


def _rescale_loss_graph(net: VelocityNet, batch: int) -> ad.Graph:
    b = GraphBuilder()
    z = b.input((batch, net.arch.dim), "z")
    r = b.input((batch,), "r")
    t = b.input((batch,), "t")
    onehot = b.input((batch, net.arch.n_classes + 1), "onehot")
    pvars = {name: b.input(shape, name) for name, shape in param_shapes(net.arch).items()}
    target = b.input((batch, net.arch.dim), "target")
    u = build_forward(b, z, r, t, onehot, pvars, net.arch, net.freqs)
    loss = b.mean_all(b.smooth_l1(b.sub(u, target), beta=1.0), name="smooth_l1_loss")
    return b.build(loss)


def rescale_distill(
    teacher: VelocityNet,
    student: VelocityNet,
    data,
    steps,
    lr,
    batch=256,
    seed=0,
    log_every=200,
):
    """Fit the normalized-clock student to the wide-range-clock teacher.

    Draws interpolant states from `data`, evaluates the frozen teacher at the
    same external times, and minimizes smooth-L1 between the two outputs.
    Returns (student, final_loss, log).
    """
    if teacher.arch.dim != student.arch.dim or teacher.arch.hidden != student.arch.hidden:
        raise NetworkError("teacher/student architecture mismatch")
    data = as_array(data)
    rng = np.random.default_rng(seed)
    opt = RMSOptimizer(lr)
    graph = _rescale_loss_graph(student, batch)
    names = student.param_names
    log = []
    loss_val = float("nan")
    for step in range(steps):
        opt.lr = lr * 0.5 * (1.0 + np.cos(np.pi * step / max(steps, 1)))
        idx = rng.integers(0, data.shape[0], size=batch)
        x = data[idx]
        e = rng.standard_normal(x.shape)
        t = rng.uniform(0.0, 1.0, size=batch)
        z = (1.0 - t[:, None]) * x + t[:, None] * e
        target = forward_velocity(teacher, z, t, t).array
        onehot = one_hot_condition(None, batch, student.arch.n_classes)
        inputs = [z, t, t, onehot] + student.param_list() + [target]
        loss_t = ad.forward(graph, inputs)
        loss_val = float(loss_t.array)
        if not np.isfinite(loss_val):
            raise DivergenceError(f"rescale distillation diverged at step {step}")
        grads = ad.backward(graph, inputs, np.asarray(1.0))
        gmap = {name: grads[4 + i].array for i, name in enumerate(names)}
        opt.step(student.params, gmap)
        if step % log_every == 0:
            log.append((step, loss_val))
    return student, loss_val, log


def rescale_discrepancy(teacher, student, data, n_grid=400, seed=1):
    """Max output gap between the two clocks on a held-out (z, t) grid."""
    data = as_array(data)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, data.shape[0], size=n_grid)
    x = data[idx]
    e = rng.standard_normal(x.shape)
    t = rng.uniform(0.0, 1.0, size=n_grid)
    z = (1.0 - t[:, None]) * x + t[:, None] * e
    a = forward_velocity(teacher, z, t, t).array
    b = forward_velocity(student, z, t, t).array
    return float(np.max(np.abs(a - b)))
