"""Distributional metrics and the cross-method identity verification suites."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import schedules as sch
from .network import TargetNet, forward_velocity, init_velocity_net
from .objectives import (
    InterpolantBatch,
    KernelSpec,
    LossSpec,
    cm_loss,
    fm_loss,
    imm_loss,
    make_interpolant_batch,
    make_pair_batch,
    meanflow_train_loss,
    scm_vs_meanflow_gradient_relation,
)
from .samplers import SampleRequest, cross_framework_sample, fm_euler_solver
from .tensor import as_array


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricReport:
    method: str
    nfe: int
    mmd2: float
    w2: float
    n_samples: int
    seed: int


# ---------------------------------------------------------------------------
# Maximum mean discrepancy
# ---------------------------------------------------------------------------


def _pairwise_sq_dists(x, y):
    xx = np.sum(x * x, axis=1)
    yy = np.sum(y * y, axis=1)
    d2 = xx[:, None] + yy[None, :] - 2.0 * (x @ y.T)
    return np.maximum(d2, 0.0)


def _kernel_matrix(spec: KernelSpec, x, y):
    if spec.kind == "neg_sq_euclid":
        return -_pairwise_sq_dists(x, y)
    if spec.kind == "rbf":
        return np.exp(-_pairwise_sq_dists(x, y) / (2.0 * spec.bandwidth**2))
    d1 = np.sum(np.abs(x[:, None, :] - y[None, :, :]), axis=2)
    return np.exp(-d1 / spec.bandwidth)


def median_heuristic_bandwidth(x, y, cap=1024):
    """Median pairwise distance of up to `cap` pooled points (deterministic)."""
    pooled = np.concatenate([as_array(x), as_array(y)], axis=0)[:cap]
    d2 = _pairwise_sq_dists(pooled, pooled)
    upper = d2[np.triu_indices(len(pooled), k=1)]
    med = float(np.median(np.sqrt(upper)))
    return med if med > 0.0 else 1.0


def mmd2(x, y, kernel: Optional[KernelSpec] = None, unbiased=False):
    """Kernel two-sample discrepancy; biased V-statistic unless `unbiased`.

    With kernel=None an RBF kernel with median-heuristic bandwidth is used.
    The biased estimator is exactly zero on identical multisets.
    """
    xa, ya = as_array(x), as_array(y)
    if xa.ndim != 2 or ya.ndim != 2 or xa.shape[1] != ya.shape[1]:
        raise MetricError(f"dimension mismatch: {xa.shape} vs {ya.shape}")
    if len(xa) == 0 or len(ya) == 0:
        raise MetricError("sample sets must be non-empty")
    if kernel is None:
        kernel = KernelSpec("rbf", median_heuristic_bandwidth(xa, ya))
    kxx = _kernel_matrix(kernel, xa, xa)
    kyy = _kernel_matrix(kernel, ya, ya)
    kxy = _kernel_matrix(kernel, xa, ya)
    if unbiased:
        m, n = len(xa), len(ya)
        if m < 2 or n < 2:
            raise MetricError("unbiased estimator needs at least 2 points per set")
        term_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
        term_y = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
        return float(term_x + term_y - 2.0 * kxy.mean())
    return float(kxx.mean() + kyy.mean() - 2.0 * kxy.mean())


# ---------------------------------------------------------------------------
# Exact small-n Wasserstein-2
# ---------------------------------------------------------------------------

W2_MAX_POINTS = 512


def wasserstein2_exact(x, y):
    """sqrt of the minimal mean squared pairing cost over all matchings.

    Exact assignment solve, O(n^3); capped at 512 points by design.
    """
    xa, ya = as_array(x), as_array(y)
    if xa.shape != ya.shape:
        raise MetricError(f"size mismatch: {xa.shape} vs {ya.shape}")
    if len(xa) > W2_MAX_POINTS:
        raise MetricError(f"oracle is small-n by design (max {W2_MAX_POINTS})")
    # direct differences keep the diagonal exactly zero on identical sets
    cost = np.sum((xa[:, None, :] - ya[None, :, :]) ** 2, axis=2)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


# ---------------------------------------------------------------------------
# Identity verification suites
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IdentityCheck:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self):
        return self.max_error <= self.tolerance

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: max_error={self.max_error:.3e} tol={self.tolerance:.0e}"


@dataclass(frozen=True)
class IdentityReport:
    checks: tuple

    @property
    def all_passed(self):
        return all(c.passed for c in self.checks)

    def lines(self):
        return [c.line() for c in self.checks]


def _fresh_net(seed, hidden=16, n_freqs=8):
    return init_velocity_net(
        dim=2, hidden=hidden, depth=2, n_classes=2, seed=seed, n_freqs=n_freqs
    )


def _check_time_state_round_trips(rng):
    ts = np.linspace(0.0, 1.0, 1000)
    err = float(np.max(np.abs(sch.time_trig_to_fm(sch.time_fm_to_trig(ts)) - ts)))
    taus = sch.time_fm_to_trig(ts)
    scale = sch.fm_state_scale(ts)
    err = max(err, float(np.max(np.abs(np.cos(taus) - (1 - ts) / scale))))
    err = max(err, float(np.max(np.abs(np.sin(taus) - ts / scale))))
    err = max(err, float(np.max(np.abs(np.cos(taus) + np.sin(taus) - 1.0 / scale))))
    for _ in range(50):
        z = rng.standard_normal((2, 2))
        t = float(rng.uniform(0, 1))
        state = sch.FMState(sch.Tensor(z), t)
        back = sch.state_trig_to_fm(sch.state_fm_to_trig(state))
        err = max(err, float(np.max(np.abs(back.z.array - z))), abs(back.t_fm - t))
    return err


def _check_double_wrap(rng):
    net = _fresh_net(int(rng.integers(1 << 30)))

    def v_model(z, t, cond=None):
        return forward_velocity(net, z, t, t, cond).array

    recovered = sch.wrap_trig_model_as_fm(sch.wrap_fm_model_as_trigflow(v_model))
    err = 0.0
    for _ in range(100):
        z = rng.standard_normal((1, 2))
        t = float(rng.uniform(0, 1))
        err = max(err, float(np.max(np.abs(recovered(z, t) - v_model(z, t)))))
    return err


def _check_cross_framework_sampling(rng):
    net = _fresh_net(int(rng.integers(1 << 30)))

    def v_model(z, t, cond=None):
        return forward_velocity(net, z, t, t, cond).array

    err = 0.0
    for nfe in (1, 2, 4, 8):
        req = SampleRequest(n=16, nfe=nfe, seed=int(rng.integers(1 << 30)))
        native = fm_euler_solver(v_model, req, dim=2)
        via_trig = cross_framework_sample(v_model, "fm", "trig_solver", req, dim=2)
        err = max(err, float(np.max(np.abs(native.array - via_trig.array))))
    return err


def _check_meanflow_fm_reduction(rng):
    err = 0.0
    for _ in range(5):
        net = _fresh_net(int(rng.integers(1 << 30)))
        x = rng.standard_normal((8, 2))
        batch = make_interpolant_batch(x, rng, time_cfg=None)
        a = fm_loss(net, batch, gamma=1.0)
        b = meanflow_train_loss(net, batch, LossSpec("meanflow_train", gamma=1.0))
        err = max(err, abs(a - b))
    return err


def _check_gradient_relation(rng):
    err = 0.0
    for _ in range(20):
        net = _fresh_net(int(rng.integers(1 << 30)), hidden=8)
        x = rng.standard_normal((1, 2))
        e = rng.standard_normal((1, 2))
        t = np.array([float(rng.uniform(0.05, 1.0))])
        z = (1 - t[:, None]) * x + t[:, None] * e
        batch = InterpolantBatch(x, e, z, e - x, t, np.zeros(1))
        rep = scm_vs_meanflow_gradient_relation(net, batch)
        err = max(err, rep["max_rel_err"], abs(rep["cosine"] - 1.0))
    return err


def _check_imm_cm_reduction(rng):
    err = 0.0
    for _ in range(5):
        net = _fresh_net(int(rng.integers(1 << 30)))
        target = TargetNet(net, mode="synced")
        x = rng.standard_normal((6, 2))
        pb = make_pair_batch(x, x, rng, s_zero=True)
        pb.x_t_prime = pb.x_t.copy()
        pb.x_r_prime = pb.x_r.copy()
        li = imm_loss(net, target, pb, KernelSpec("neg_sq_euclid"))
        lc = cm_loss(net, target, pb)
        err = max(err, abs(li - 2.0 * lc) / max(1.0, abs(li)))
    return err


IDENTITY_SUITE = (
    ("fm_trig_time_state_round_trips", _check_time_state_round_trips, 1e-12),
    ("double_wrap_pointwise_identity", _check_double_wrap, 1e-10),
    ("cross_framework_sampling", _check_cross_framework_sampling, 1e-6),
    ("meanflow_r_eq_t_is_fm", _check_meanflow_fm_reduction, 0.0),
    ("scm_meanflow_gradient_relation", _check_gradient_relation, 1e-8),
    ("imm_reduces_to_cm", _check_imm_cm_reduction, 1e-10),
)


def identity_report(seed=0) -> IdentityReport:
    """Run all cross-method identity suites on fresh random nets."""
    checks = []
    for idx, (name, fn, tol) in enumerate(IDENTITY_SUITE):
        rng = np.random.default_rng([seed, idx])
        checks.append(IdentityCheck(name, float(fn(rng)), tol))
    return IdentityReport(tuple(checks))


# ---------------------------------------------------------------------------
# NFE sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegisteredModel:
    net: object
    sampler: str  # "euler" | "meanflow" | "consistency"
    cond: Optional[object] = None
    omega: float = 0.0


def _dispatch_sample(entry: RegisteredModel, nfe, n, seed):
    from . import samplers

    req = SampleRequest(n=n, nfe=nfe, cond=entry.cond, omega=entry.omega, seed=seed)
    if entry.sampler == "euler":
        return samplers.euler_fm_sample(entry.net, req).array
    if entry.sampler == "meanflow":
        return samplers.meanflow_sample(entry.net, req).array
    if entry.sampler == "consistency":
        return samplers.consistency_sample(entry.net, req).array
    raise MetricError(f"unknown sampler {entry.sampler!r}")


def nfe_sweep(model_registry, heldout, nfe_list, n, seeds, include_reference=True,
              reference_nfe=100):
    """MetricReport rows per (method, NFE, seed) against held-out data.

    A registry entry named "teacher" additionally contributes one reference
    row per seed at `reference_nfe` when include_reference is set.  A missing
    (None) model yields a NaN warning row instead of failing the sweep.
    """
    heldout = as_array(heldout)
    rows = []

    def evaluate(name, entry, nfe, seed):
        if entry is None or entry.net is None:
            warnings.warn(f"model {name!r} missing; emitting NaN row", stacklevel=2)
            return MetricReport(name, nfe, float("nan"), float("nan"), n, seed)
        samples = _dispatch_sample(entry, nfe, n, seed)
        m2 = mmd2(samples, heldout)
        k = min(len(samples), len(heldout), W2_MAX_POINTS)
        w2 = wasserstein2_exact(samples[:k], heldout[:k])
        return MetricReport(name, nfe, m2, w2, n, seed)

    for name, entry in model_registry.items():
        for nfe in nfe_list:
            for seed in seeds:
                rows.append(evaluate(name, entry, nfe, seed))
    if include_reference and "teacher" in model_registry:
        for seed in seeds:
            rows.append(evaluate("teacher", model_registry["teacher"], reference_nfe, seed))
    return rows


CSV_HEADER = "method,nfe,seed,n,mmd2,w2"


def write_metric_csv(rows, path):
    """UTF-8, LF-terminated CSV with one row per sweep cell."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in rows:
            fh.write(f"{r.method},{r.nfe},{r.seed},{r.n_samples},{r.mmd2!r},{r.w2!r}\n")
