"""Interpolant schedules and the exact conversions between them.

Two parameterizations of the same noising process are supported:

* linear ("FM"):  z_t = (1 - t) x + t e,           t in [0, 1]
* trigonometric:  x_t = cos(t) x0 + sin(t) noise,  t in [0, pi/2]

Matching signal-to-noise ratios gives a closed-form bijection between times
and states, and lets a velocity model trained in one parameterization drive a
solver written for the other without retraining.  The state scale
sqrt(t^2 + (1-t)^2) never vanishes on [0, 1] (its minimum is 1/sqrt(2) at
t = 1/2), so no singularity guard is needed anywhere below.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_array


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class FMState:
    """State of the linear interpolant at time t_fm in [0, 1]."""

    z: Tensor
    t_fm: float

    def __post_init__(self):
        if not 0.0 <= self.t_fm <= 1.0:
            raise ScheduleError(f"t_fm {self.t_fm} outside [0, 1]")


@dataclass(frozen=True)
class TrigState:
    """State of the trigonometric interpolant at time t_trig in [0, pi/2]."""

    x: Tensor
    t_trig: float

    def __post_init__(self):
        if not 0.0 <= self.t_trig <= math.pi / 2:
            raise ScheduleError(f"t_trig {self.t_trig} outside [0, pi/2]")


@dataclass(frozen=True)
class TimeSamplerConfig:
    """(t, r) pair sampler: r = t is forced with probability p_equal."""

    distribution: str = "uniform"  # "uniform" | "lognormal"
    mu: float = -0.4
    sigma: float = 1.0
    p_equal: float = 0.25

    def __post_init__(self):
        if self.distribution not in ("uniform", "lognormal"):
            raise ScheduleError(f"unknown distribution {self.distribution!r}")
        if not 0.0 <= self.p_equal <= 1.0:
            raise ScheduleError(f"p_equal {self.p_equal} outside [0, 1]")


# ---------------------------------------------------------------------------
# Interpolants
# ---------------------------------------------------------------------------


def fm_interpolate(x, e, t):
    """Linear interpolant state and its instantaneous velocity.

    Returns (z, v) with z = (1 - t) x + t e and v = e - x.  `t` may be a
    scalar or a per-sample vector matching the batch dimension of x.
    """
    xa, ea = as_array(x), as_array(e)
    if xa.shape != ea.shape:
        raise ScheduleError(f"x shape {xa.shape} != e shape {ea.shape}")
    ta = as_array(t)
    if np.any(ta < 0.0) or np.any(ta > 1.0):
        raise ScheduleError("t outside [0, 1]")
    if ta.ndim == 1:
        ta = ta.reshape(-1, *([1] * (xa.ndim - 1)))
    z = (1.0 - ta) * xa + ta * ea
    v = ea - xa
    return Tensor(z), Tensor(v)


def trig_interpolate(x0, noise, t_trig):
    """Trigonometric interpolant cos(t) x0 + sin(t) noise."""
    xa, na = as_array(x0), as_array(noise)
    if xa.shape != na.shape:
        raise ScheduleError(f"x0 shape {xa.shape} != noise shape {na.shape}")
    ta = as_array(t_trig)
    if np.any(ta < 0.0) or np.any(ta > math.pi / 2):
        raise ScheduleError("t_trig outside [0, pi/2]")
    if ta.ndim == 1:
        ta = ta.reshape(-1, *([1] * (xa.ndim - 1)))
    return Tensor(np.cos(ta) * xa + np.sin(ta) * na)


# ---------------------------------------------------------------------------
# Time and state conversions
# ---------------------------------------------------------------------------


def time_trig_to_fm(t_trig):
    """sin(t) / (cos(t) + sin(t)); monotone [0, pi/2] -> [0, 1]."""
    t = as_array(t_trig)
    if np.any(t < 0.0) or np.any(t > math.pi / 2):
        raise ScheduleError("t_trig outside [0, pi/2]")
    out = np.sin(t) / (np.cos(t) + np.sin(t))
    return float(out) if out.ndim == 0 else out


def time_fm_to_trig(t_fm):
    """arctan(t / (1 - t)), continued to pi/2 at t = 1."""
    t = as_array(t_fm)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ScheduleError("t_fm outside [0, 1]")
    out = np.arctan2(t, 1.0 - t)
    return float(out) if out.ndim == 0 else out


def fm_state_scale(t_fm):
    """sqrt(t^2 + (1-t)^2) = 1 / (cos(t_trig) + sin(t_trig))."""
    t = as_array(t_fm)
    out = np.sqrt(t * t + (1.0 - t) * (1.0 - t))
    return float(out) if out.ndim == 0 else out


def state_trig_to_fm(s: TrigState) -> FMState:
    """Rescale a trig state onto the matched-SNR linear-interpolant state."""
    c, sn = math.cos(s.t_trig), math.sin(s.t_trig)
    t_fm = sn / (c + sn)
    return FMState(Tensor(s.x.array / (c + sn)), t_fm)


def state_fm_to_trig(s: FMState) -> TrigState:
    """Inverse of state_trig_to_fm; exact round trip."""
    scale = fm_state_scale(s.t_fm)
    return TrigState(Tensor(s.z.array / scale), time_fm_to_trig(s.t_fm))


# ---------------------------------------------------------------------------
# Model wrappers
#
# Velocity models are callables v(z, t_fm, cond) -> array; trig models are
# callables F(x, t_trig, cond) -> array.  Conditioning is threaded through
# untouched.  Each wrapped call costs exactly one inner-model call.
# ---------------------------------------------------------------------------


def wrap_fm_model_as_trigflow(v_model):
    """Adapt a velocity model so a trig-time solver can drive it."""

    def f_model(x_trig, t_trig, cond=None):
        c, sn = math.cos(t_trig), math.sin(t_trig)
        t_fm = sn / (c + sn)
        z = as_array(x_trig) / (c + sn)
        v = as_array(v_model(z, t_fm, cond))
        return ((c - sn) / (c + sn)) * as_array(x_trig) + v / (c + sn)

    return f_model


def wrap_trig_model_as_fm(f_model):
    """Adapt a trig-parameterized model so a linear-time solver can drive it."""

    def v_model(z, t_fm, cond=None):
        scale = fm_state_scale(t_fm)
        x_trig = as_array(z) / scale
        f = as_array(f_model(x_trig, time_fm_to_trig(t_fm), cond))
        return f / scale - ((1.0 - 2.0 * t_fm) / (scale * scale)) * as_array(z)

    return v_model


# ---------------------------------------------------------------------------
# (t, r) sampling
# ---------------------------------------------------------------------------


def sample_t_r(cfg: TimeSamplerConfig, rng, size=None):
    """Draw time pairs with 0 <= r <= t <= 1; r == t with probability p_equal.

    With size=None returns a scalar pair; otherwise arrays of shape (size,).
    """
    n = 1 if size is None else int(size)
    if cfg.distribution == "uniform":
        pairs = rng.uniform(0.0, 1.0, size=(n, 2))
    else:
        normal = rng.normal(cfg.mu, cfg.sigma, size=(n, 2))
        pairs = 1.0 / (1.0 + np.exp(-normal))
    t = np.maximum(pairs[:, 0], pairs[:, 1])
    r = np.minimum(pairs[:, 0], pairs[:, 1])
    equal = rng.uniform(size=n) < cfg.p_equal
    r = np.where(equal, t, r)
    if size is None:
        return float(t[0]), float(r[0])
    return t, r
