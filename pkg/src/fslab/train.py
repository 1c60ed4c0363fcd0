"""Experiment configuration and the training loop for every objective."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .autodiff import DivergenceError
from .checkpoint import load_checkpoint, save_checkpoint
from .data import gen_dataset, n_classes_for
from .metrics import RegisteredModel, nfe_sweep, write_metric_csv
from .network import TargetNet, init_velocity_net, sync_target
from .objectives import (
    InterpolantBatch,
    KernelSpec,
    LossSpec,
    cm_loss,
    fm_loss,
    imm_loss,
    make_interpolant_batch,
    make_pair_batch,
    meanflow_distill_loss,
    meanflow_train_loss,
    scm_loss,
    teacher_velocity_target,
)
from .optim import RMSOptimizer
from .schedules import TimeSamplerConfig, fm_interpolate


class ConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    pass


# seed, steps, and lr must always be stated explicitly in config files
REQUIRED_KEYS = ("dataset", "objective", "steps", "batch", "lr", "seed")

SAMPLER_FOR_KIND = {
    "fm": "euler",
    "meanflow_train": "meanflow",
    "meanflow_distill": "meanflow",
    "scm": "consistency",
    "imm": "consistency",
    "cm": "consistency",
}


@dataclass(frozen=True)
class RunConfig:
    dataset: str
    objective: LossSpec
    steps: int
    batch: int
    lr: float
    seed: int
    hidden: int = 64
    depth: int = 3
    dim: int = 2
    t_scale: float = 1.0
    n_freqs: int = 64
    freq_min: float = 0.05
    freq_max: float = 30.0
    target_mode: str = "synced"
    ema_decay: float = 0.999
    lr_schedule: str = "cosine"  # "cosine" | "constant"
    sampler_eval: tuple = (1, 2, 4)
    output_dir: str = "runs/out"
    teacher_ckpt: Optional[str] = None
    conditional: bool = True
    cond_dropout: float = 0.1
    p_equal: float = 0.25
    time_dist: str = "uniform"
    kernel_kind: str = "rbf"
    kernel_bandwidth: float = 1.0
    n_train: int = 8000
    eval_n: int = 1000
    log_every: int = 100

    def __post_init__(self):
        if self.dataset not in ("gauss8", "gauss1", "moons", "checkerboard"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.steps < 0 or self.batch < 1:
            raise ConfigError("invalid steps/batch")
        if self.target_mode not in ("synced", "ema"):
            raise ConfigError(f"unknown target_mode {self.target_mode!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.objective.kind == "meanflow_distill" and not self.teacher_ckpt:
            raise ConfigError("meanflow_distill requires teacher_ckpt")


_LOSS_SPEC_KEYS = (
    "gamma", "omega", "kappa", "adaptive_variance", "weight_fn", "jvp_tangent"
)


def config_from_dict(doc: dict) -> RunConfig:
    doc = dict(doc)
    missing = [k for k in REQUIRED_KEYS if k not in doc]
    if missing:
        raise ConfigError(f"missing required config keys: {missing}")
    spec_kw = {k: doc.pop(k) for k in _LOSS_SPEC_KEYS if k in doc}
    objective = LossSpec(kind=doc.pop("objective"), **spec_kw)
    known = {f.name for f in fields(RunConfig)}
    unknown = [k for k in doc if k not in known]
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    if "sampler_eval" in doc:
        doc["sampler_eval"] = tuple(int(v) for v in doc["sampler_eval"])
    return RunConfig(objective=objective, **doc)


def _parse_override(text: str):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def parse_run_config(path, overrides=()) -> RunConfig:
    """Load a flat-key UTF-8 JSON config, then apply --set key=value overrides."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object with flat keys")
    for item in overrides:
        key, value = _parse_override(item)
        doc[key] = value
    return config_from_dict(doc)


@dataclass
class TrainResult:
    config: RunConfig
    net: object
    checkpoint_path: str
    log: list = field(default_factory=list)
    metric_rows: list = field(default_factory=list)
    final_loss: float = float("nan")


def _single_time_batch(x, rng, cfg, cond):
    """Interpolant batch with r = t and t drawn from the configured density."""
    n = x.shape[0]
    if cfg.time_dist == "lognormal":
        t = 1.0 / (1.0 + np.exp(-rng.normal(-0.4, 1.0, size=n)))
    else:
        t = rng.uniform(0.0, 1.0, size=n)
    noise = rng.standard_normal(x.shape)
    z, v = fm_interpolate(x, noise, t)
    c = None
    if cond is not None:
        c = np.asarray(cond, dtype=np.int64).copy()
        if cfg.cond_dropout > 0.0:
            drop = rng.uniform(size=n) < cfg.cond_dropout
            c[drop] = -1
    return InterpolantBatch(x, noise, z.array, v.array, t, t, c)


def _build_batch(kind, data, labels, cfg, rng, time_cfg):
    n = data.shape[0]
    idx = rng.integers(0, n, size=cfg.batch)
    x = data[idx]
    cond = labels[idx] if cfg.conditional else None
    if kind in ("fm", "scm"):
        return _single_time_batch(x, rng, cfg, cond)
    if kind in ("meanflow_train", "meanflow_distill"):
        return make_interpolant_batch(
            x, rng, time_cfg=time_cfg, cond=cond, cond_dropout=cfg.cond_dropout
        )
    idx2 = rng.integers(0, n, size=cfg.batch)
    return make_pair_batch(x, data[idx2], rng, s_zero=(kind == "cm"), cond=cond)


def _loss_step(kind, net, teacher, target, batch, cfg):
    spec = cfg.objective
    if kind == "fm":
        return fm_loss(net, batch, gamma=spec.gamma, return_grads=True)
    if kind == "meanflow_train":
        return meanflow_train_loss(net, batch, spec, return_grads=True)
    if kind == "meanflow_distill":
        return meanflow_distill_loss(net, teacher, batch, spec, return_grads=True)
    if kind == "scm":
        if teacher is not None:
            batch.v = teacher_velocity_target(teacher, net, batch, spec)
        loss, _, grads = scm_loss(net, target, batch, spec, return_grads=True)
        return loss, grads
    if kind == "imm":
        kernel = KernelSpec(cfg.kernel_kind, cfg.kernel_bandwidth)
        return imm_loss(net, target, batch, kernel, spec.weight_fn, return_grads=True)
    if kind == "cm":
        return cm_loss(net, target, batch, spec.weight_fn, return_grads=True)
    raise ConfigError(f"unknown objective kind {kind!r}")


def train(cfg: RunConfig) -> TrainResult:
    """Run the configured objective; deterministic given the config.

    Logs the loss every `log_every` steps, saves a checkpoint and final
    metric rows, and aborts on non-finite loss keeping the last good
    checkpoint on disk.
    """
    os.makedirs(cfg.output_dir, exist_ok=True)
    kind = cfg.objective.kind
    data_t, labels = gen_dataset(cfg.dataset, cfg.n_train, seed=(cfg.seed, 0))
    data = data_t.array
    n_classes = n_classes_for(cfg.dataset)
    net = init_velocity_net(
        dim=cfg.dim, hidden=cfg.hidden, depth=cfg.depth, n_classes=n_classes,
        seed=(cfg.seed, 1), t_scale=cfg.t_scale, n_freqs=cfg.n_freqs,
        freq_min=cfg.freq_min, freq_max=cfg.freq_max,
    )
    teacher = load_checkpoint(cfg.teacher_ckpt) if cfg.teacher_ckpt else None
    target = None
    if kind in ("scm", "imm", "cm"):
        target = TargetNet(net, mode=cfg.target_mode, decay=cfg.ema_decay)
    time_cfg = TimeSamplerConfig(distribution=cfg.time_dist, p_equal=cfg.p_equal)
    rng = np.random.default_rng((cfg.seed, 2))
    opt = RMSOptimizer(cfg.lr)

    log: list[str] = []
    last_good = {k: v.copy() for k, v in net.params.items()}
    ckpt_path = os.path.join(cfg.output_dir, "model.fslb")
    loss = float("nan")
    for step in range(cfg.steps):
        batch = _build_batch(kind, data, labels, cfg, rng, time_cfg)
        try:
            loss, grads = _loss_step(kind, net, teacher, target, batch, cfg)
        except DivergenceError as e:
            for k, v in last_good.items():
                np.copyto(net.params[k], v)
            save_checkpoint(net, os.path.join(cfg.output_dir, "last_good.fslb"))
            raise TrainingAborted(
                f"objective {kind} diverged at step {step}: {e}; "
                f"last good checkpoint saved"
            ) from e
        if step % cfg.log_every == 0:
            # this loss was finite, so the current parameters are keepable
            log.append(f"step {step} loss {loss!r}")
            for k, v in net.params.items():
                np.copyto(last_good[k], v)
        if cfg.lr_schedule == "cosine":
            opt.lr = cfg.lr * 0.5 * (1.0 + np.cos(np.pi * step / max(cfg.steps, 1)))
        opt.step(net.params, grads)
        if target is not None:
            sync_target(target, net)
    log.append(f"final step {cfg.steps} loss {loss!r}")

    save_checkpoint(net, ckpt_path)
    with open(os.path.join(cfg.output_dir, "train_log.txt"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write("\n".join(log) + "\n")

    heldout_t, _ = gen_dataset(cfg.dataset, cfg.eval_n, seed=(cfg.seed, 3))
    registry = {"model": RegisteredModel(net, SAMPLER_FOR_KIND[kind])}
    rows = nfe_sweep(
        registry, heldout_t.array, cfg.sampler_eval, n=cfg.eval_n,
        seeds=[cfg.seed], include_reference=False,
    )
    write_metric_csv(rows, os.path.join(cfg.output_dir, "metrics.csv"))
    return TrainResult(cfg, net, ckpt_path, log, rows, loss)
