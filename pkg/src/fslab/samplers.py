"""Few-step and multi-step generation for all trained model families.

Every sampler draws its initial noise from a seeded generator, walks a
strictly decreasing time schedule from 1 to 0, and asserts its exact
function-evaluation count (one call per segment; two under sample-time CFG).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import schedules as sch
from .autodiff import DivergenceError
from .network import VelocityNet, forward_velocity
from .tensor import Tensor, as_array


class SamplerError(ValueError):
    pass


@dataclass(frozen=True)
class SampleRequest:
    n: int
    nfe: int
    schedule: Optional[tuple] = None
    cond: Optional[object] = None
    omega: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.nfe < 1:
            raise SamplerError("n and nfe must be >= 1")

    def times(self) -> np.ndarray:
        if self.schedule is None:
            return uniform_schedule(self.nfe)
        times = np.asarray(self.schedule, dtype=np.float64)
        validate_schedule(times)
        if len(times) - 1 != self.nfe:
            raise SamplerError(
                f"schedule has {len(times) - 1} segments but nfe is {self.nfe}"
            )
        return times


def uniform_schedule(nfe: int) -> np.ndarray:
    return np.linspace(1.0, 0.0, nfe + 1)


def validate_schedule(times):
    t = np.asarray(times, dtype=np.float64)
    if t.ndim != 1 or len(t) < 2:
        raise SamplerError("schedule needs at least two points")
    if t[0] != 1.0 or t[-1] != 0.0:
        raise SamplerError("schedule endpoints must be exactly 1 and 0")
    if np.any(np.diff(t) >= 0):
        raise SamplerError("schedule must be strictly decreasing")
    return t


def _initial_noise(req: SampleRequest, dim: int):
    rng = np.random.default_rng(req.seed)
    return rng.standard_normal((req.n, dim)), rng


def _check_state(z, step, t):
    if not np.all(np.isfinite(z)):
        raise DivergenceError(f"non-finite state at step {step} (t={t})")


def _assert_calls(net, before, expected):
    used = net.calls - before
    assert used == expected, f"NFE accounting broken: {used} calls != {expected}"


def euler_fm_sample(net: VelocityNet, req: SampleRequest) -> Tensor:
    """Explicit Euler along the instantaneous velocity of a single-time model.

    omega != 0 enables sample-time CFG (two calls per step); this is meant
    for teachers only, distilled students carry their guidance in-weights.
    """
    times = req.times()
    z, _ = _initial_noise(req, net.arch.dim)
    before = net.calls
    use_cfg = req.omega != 0.0
    for step in range(len(times) - 1):
        t_hi, t_lo = times[step], times[step + 1]
        if use_cfg:
            v_c = forward_velocity(net, z, t_hi, t_hi, req.cond).array
            v_u = forward_velocity(net, z, t_hi, t_hi, None).array
            v = v_u + req.omega * (v_c - v_u)
        else:
            v = forward_velocity(net, z, t_hi, t_hi, req.cond).array
        z = z - (t_hi - t_lo) * v
        _check_state(z, step, t_lo)
    _assert_calls(net, before, req.nfe * (2 if use_cfg else 1))
    return Tensor(z)


def meanflow_sample(net: VelocityNet, req: SampleRequest) -> Tensor:
    """Average-velocity update z_r = z_t - (t - r) u(z_t, r, t) per segment."""
    if req.omega != 0.0:
        raise SamplerError("distilled students bake guidance in; omega must be 0")
    times = req.times()
    z, _ = _initial_noise(req, net.arch.dim)
    before = net.calls
    for step in range(len(times) - 1):
        t_hi, t_lo = times[step], times[step + 1]
        u = forward_velocity(net, z, t_lo, t_hi, req.cond).array
        z = z - (t_hi - t_lo) * u
        _check_state(z, step, t_lo)
    _assert_calls(net, before, req.nfe)
    return Tensor(z)


def consistency_sample(net: VelocityNet, req: SampleRequest) -> Tensor:
    """Predict x0 with x - t F(x, t), re-noising to the next scheduled time.

    Multi-step sampling is stochastic: each segment re-noises the prediction
    with fresh noise through the linear interpolant; the final segment at
    t = 0 is the identity.
    """
    if req.omega != 0.0:
        raise SamplerError("distilled students bake guidance in; omega must be 0")
    times = req.times()
    z, rng = _initial_noise(req, net.arch.dim)
    before = net.calls
    for step in range(len(times) - 1):
        t_hi, t_lo = times[step], times[step + 1]
        f = forward_velocity(net, z, np.zeros(req.n), np.full(req.n, t_hi), req.cond)
        x0 = z - t_hi * f.array
        _check_state(x0, step, t_lo)
        if t_lo > 0.0:
            noise = rng.standard_normal(x0.shape)
            z = (1.0 - t_lo) * x0 + t_lo * noise
        else:
            z = x0
    _assert_calls(net, before, req.nfe)
    return Tensor(z)


def trig_solver(f_model, req: SampleRequest, dim: int, times_fm=None) -> Tensor:
    """Solver in trigonometric time: x <- cos(dtau) x - sin(dtau) F(x, tau).

    The update is exact for trajectories that are straight in the trig
    parameterization, and corresponds segment-for-segment to an explicit
    Euler step of the matched linear-time model.
    """
    times = req.times() if times_fm is None else validate_schedule(times_fm)
    taus = np.array([sch.time_fm_to_trig(float(t)) for t in times])
    x, _ = _initial_noise(req, dim)
    for step in range(len(taus) - 1):
        tau_hi, tau_lo = taus[step], taus[step + 1]
        dtau = tau_hi - tau_lo
        f = as_array(f_model(x, float(tau_hi), req.cond))
        x = math.cos(dtau) * x - math.sin(dtau) * f
        _check_state(x, step, tau_lo)
    return Tensor(x)


def fm_euler_solver(v_model, req: SampleRequest, dim: int) -> Tensor:
    """Explicit Euler in linear time for a bare velocity callable."""
    times = req.times()
    z, _ = _initial_noise(req, dim)
    for step in range(len(times) - 1):
        t_hi, t_lo = times[step], times[step + 1]
        v = as_array(v_model(z, float(t_hi), req.cond))
        z = z - (t_hi - t_lo) * v
        _check_state(z, step, t_lo)
    return Tensor(z)


def cross_framework_sample(model, framework_of_model, solver, req: SampleRequest,
                           dim=2) -> Tensor:
    """Run a model under either framework's solver, wrapping when they differ.

    `model` is a callable (x, t, cond) -> array in its native framework;
    the initial noise depends only on req.seed, so matched requests start
    from identical states in both frameworks (the t = 1 states coincide).
    """
    if framework_of_model not in ("fm", "trig"):
        raise SamplerError(f"unknown framework {framework_of_model!r}")
    if solver == "fm_euler":
        v_model = model if framework_of_model == "fm" else sch.wrap_trig_model_as_fm(model)
        return fm_euler_solver(v_model, req, dim)
    if solver == "trig_solver":
        f_model = model if framework_of_model == "trig" else sch.wrap_fm_model_as_trigflow(model)
        return trig_solver(f_model, req, dim)
    raise SamplerError(f"unknown solver {solver!r}")


def velocity_fn(net: VelocityNet, single_time=True):
    """Expose a VelocityNet as a bare velocity callable v(z, t, cond)."""

    def v_model(z, t, cond=None):
        return forward_velocity(net, z, t, t, cond).array

    if single_time:
        return v_model
    raise SamplerError("only single-time adaptation is defined")
