"""Recipe probes for the distilled students (run against a quick teacher)."""

import sys
import time

import numpy as np

from fslab.data import gen_dataset
from fslab.metrics import mmd2
from fslab.samplers import SampleRequest, consistency_sample, meanflow_sample
from fslab.train import config_from_dict, train

TEACHER = sys.argv[1] if len(sys.argv) > 1 else "/tmp/cal_uncond/model.fslb"

heldout, _ = gen_dataset("gauss8", 2000, seed=999)
heldout = heldout.array


def eval_net(net, sampler, nfes, tag):
    for nfe in nfes:
        vals = [
            mmd2(sampler(net, SampleRequest(n=2000, nfe=nfe, seed=s)).array, heldout)
            for s in (11, 12, 13)
        ]
        print(f"    {tag} NFE={nfe}: {np.mean(vals):.6f}", flush=True)


def run(tag, doc):
    t0 = time.time()
    res = train(config_from_dict(doc))
    print(f"{tag} ({time.time()-t0:.0f}s) loss_tail={res.final_loss:.4f}", flush=True)
    return res.net


BASE = {
    "dataset": "gauss8", "batch": 128, "seed": 0, "hidden": 64, "depth": 3,
    "conditional": False, "teacher_ckpt": TEACHER,
    "n_train": 8000, "eval_n": 64, "sampler_eval": [1], "log_every": 1000,
}

# sCM: time distribution and duration
for dist in ("uniform", "lognormal"):
    doc = dict(BASE, objective="scm", steps=8000, lr=1e-3,
               target_mode="synced", time_dist=dist,
               output_dir=f"/tmp/probe_scm_{dist}")
    net = run(f"scm {dist} 8k", doc)
    eval_net(net, consistency_sample, [1, 2], "scm")

# MeanFlow distillation: gamma 2 vs 1
for gamma in (2.0, 1.0):
    doc = dict(BASE, objective="meanflow_distill", steps=8000, lr=1e-3,
               gamma=gamma, p_equal=0.25, time_dist="lognormal",
               output_dir=f"/tmp/probe_mf_{gamma}")
    net = run(f"meanflow_distill gamma={gamma} 8k", doc)
    eval_net(net, meanflow_sample, [1, 2, 4], "mf")
