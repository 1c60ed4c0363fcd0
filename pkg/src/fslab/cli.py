"""Command-line interface: data generation, training, sampling, evaluation."""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import gen_dataset
from .metrics import RegisteredModel, identity_report, nfe_sweep, write_metric_csv
from .network import init_velocity_net, rescale_distill
from .samplers import (
    SampleRequest,
    consistency_sample,
    euler_fm_sample,
    meanflow_sample,
)
from .train import parse_run_config, train

SAMPLERS = {
    "euler": euler_fm_sample,
    "meanflow": meanflow_sample,
    "consistency": consistency_sample,
}


def _write_points_csv(path, points, labels=None):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("x0,x1,label\n" if labels is not None else "x0,x1\n")
        for i, row in enumerate(points):
            line = f"{row[0]!r},{row[1]!r}"
            if labels is not None:
                line += f",{int(labels[i])}"
            fh.write(line + "\n")


def _cmd_gen_data(args):
    pts, labels = gen_dataset(args.kind, args.n, args.seed)
    _write_points_csv(args.out, pts.array, labels)
    print(f"wrote {args.n} {args.kind} points to {args.out}")
    return 0


def _cmd_train(args):
    cfg = parse_run_config(args.config, args.set or ())
    result = train(cfg)
    print(f"trained {cfg.objective.kind} for {cfg.steps} steps; "
          f"final loss {result.final_loss!r}")
    print(f"checkpoint: {result.checkpoint_path}")
    for row in result.metric_rows:
        print(f"  nfe={row.nfe} mmd2={row.mmd2:.6g} w2={row.w2:.6g}")
    return 0


def _cmd_sample(args):
    net = load_checkpoint(args.ckpt)
    req = SampleRequest(
        n=args.n, nfe=args.nfe, cond=args.cond, omega=args.omega, seed=args.seed
    )
    samples = SAMPLERS[args.method](net, req)
    labels = None
    if args.cond is not None:
        labels = np.full(args.n, args.cond, dtype=np.int64)
    _write_points_csv(args.out, samples.array, labels)
    print(f"wrote {args.n} samples (nfe={args.nfe}, {args.method}) to {args.out}")
    return 0


def _cmd_eval_sweep(args):
    registry = {}
    for spec in args.model:
        try:
            name, rest = spec.split("=", 1)
            path, sampler = rest.rsplit(":", 1)
        except ValueError:
            print(f"bad --model spec {spec!r}; want name=path:sampler", file=sys.stderr)
            return 2
        if sampler not in SAMPLERS:
            print(f"unknown sampler {sampler!r}", file=sys.stderr)
            return 2
        registry[name] = RegisteredModel(load_checkpoint(path), sampler)
    heldout, _ = gen_dataset(args.dataset, args.n, seed=args.data_seed)
    nfe_list = [int(v) for v in args.nfe.split(",")]
    seeds = [int(v) for v in args.seeds.split(",")]
    rows = nfe_sweep(
        registry, heldout.array, nfe_list, n=args.n, seeds=seeds,
        include_reference=args.reference,
    )
    write_metric_csv(rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def _cmd_verify_identities(args):
    report = identity_report(seed=args.seed)
    for line in report.lines():
        print(line)
    if report.all_passed:
        print("all identity suites passed")
        return 0
    print("identity suite FAILURES detected", file=sys.stderr)
    return 1


def _cmd_rescale_distill(args):
    teacher = load_checkpoint(args.teacher)
    student = init_velocity_net(
        dim=teacher.arch.dim,
        hidden=teacher.arch.hidden,
        depth=teacher.arch.depth,
        n_classes=teacher.arch.n_classes,
        seed=args.seed,
        t_scale=1.0,
        n_freqs=teacher.arch.n_freqs,
        freq_min=teacher.arch.freq_min,
        freq_max=teacher.arch.freq_max,
    )
    if args.init_from_teacher:
        for name in student.params:
            np.copyto(student.params[name], teacher.params[name])
    data, _ = gen_dataset(args.dataset, args.n_data, seed=args.data_seed)
    student, loss, log = rescale_distill(
        teacher, student, data.array, steps=args.steps, lr=args.lr,
        batch=args.batch, seed=args.seed,
    )
    save_checkpoint(student, args.out)
    print(f"distilled clock-rescaled student; final loss {loss!r}")
    print(f"checkpoint: {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fslab",
        description="Few-step generative sampler laboratory on 2-D toy data.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a toy dataset CSV")
    g.add_argument("--kind", required=True,
                   choices=["gauss8", "gauss1", "moons", "checkerboard"])
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=_cmd_gen_data)

    t = sub.add_parser("train", help="train an objective from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (JSON-parsed value)")
    t.set_defaults(fn=_cmd_train)

    s = sub.add_parser("sample", help="draw samples from a trained checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--method", required=True, choices=sorted(SAMPLERS))
    s.add_argument("--nfe", type=int, required=True)
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--cond", type=int, default=None)
    s.add_argument("--omega", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_sample)

    e = sub.add_parser("eval-sweep", help="metric sweep across models and NFEs")
    e.add_argument("--model", action="append", required=True,
                   metavar="NAME=CKPT:SAMPLER")
    e.add_argument("--dataset", required=True,
                   choices=["gauss8", "gauss1", "moons", "checkerboard"])
    e.add_argument("--nfe", required=True, help="comma-separated NFE list")
    e.add_argument("--seeds", default="0", help="comma-separated seed list")
    e.add_argument("--n", type=int, default=1000)
    e.add_argument("--data-seed", type=int, default=12345)
    e.add_argument("--out", required=True)
    e.add_argument("--reference", action=argparse.BooleanOptionalAction, default=True,
                   help="add a teacher NFE=100 reference row when present")
    e.set_defaults(fn=_cmd_eval_sweep)

    v = sub.add_parser("verify-identities",
                       help="run the cross-method identity suites")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(fn=_cmd_verify_identities)

    r = sub.add_parser("rescale-distill",
                       help="distill a wide-clock teacher into a unit-clock student")
    r.add_argument("--teacher", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--dataset", default="gauss8",
                   choices=["gauss8", "gauss1", "moons", "checkerboard"])
    r.add_argument("--steps", type=int, required=True)
    r.add_argument("--lr", type=float, required=True)
    r.add_argument("--batch", type=int, default=128)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--n-data", type=int, default=4000)
    r.add_argument("--data-seed", type=int, default=77)
    r.add_argument("--init-from-teacher", action=argparse.BooleanOptionalAction,
                   default=True)
    r.set_defaults(fn=_cmd_rescale_distill)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
