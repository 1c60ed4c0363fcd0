"""Reference-run calibration for the teacher quality threshold fixture.

Trains the committed teacher recipe over 5 seeds, evaluates MMD^2 at NFE=100
with the brute-force double-loop kernel oracle, and writes the mean+3*sigma
threshold fixture consumed by the acceptance suite.
"""

import json
import math
import sys
import time

import numpy as np

from fslab.data import gen_dataset
from fslab.metrics import median_heuristic_bandwidth
from fslab.samplers import SampleRequest, euler_fm_sample
from fslab.train import config_from_dict, train

TEACHER_DOC = {
    "dataset": "gauss8",
    "objective": "fm",
    "gamma": 1.0,
    "steps": 20000,
    "batch": 256,
    "lr": 3e-3,
    "seed": 0,
    "hidden": 128,
    "depth": 4,
    "conditional": False,
    "n_train": 8000,
    "eval_n": 1000,
    "sampler_eval": [1],
    "log_every": 1000,
}

EVAL_N = 2000
HELDOUT_SEED = 999
SAMPLE_SEEDS = (11, 12, 13)


def brute_force_mmd2(x, y, bw):
    """Double-loop biased V-statistic, independent of the production path."""

    def mean_k(s1, s2):
        total = 0.0
        c = -1.0 / (2.0 * bw * bw)
        for i in range(len(s1)):
            xi0, xi1 = s1[i, 0], s1[i, 1]
            for j in range(len(s2)):
                d0 = xi0 - s2[j, 0]
                d1 = xi1 - s2[j, 1]
                total += math.exp(c * (d0 * d0 + d1 * d1))
        return total / (len(s1) * len(s2))

    return mean_k(x, x) + mean_k(y, y) - 2.0 * mean_k(x, y)


def teacher_mmd2(net, heldout):
    vals = []
    for s in SAMPLE_SEEDS:
        samples = euler_fm_sample(net, SampleRequest(n=EVAL_N, nfe=100, seed=s)).array
        bw = median_heuristic_bandwidth(samples, heldout)
        vals.append(brute_force_mmd2(samples, heldout, bw))
    return float(np.mean(vals)), vals


def main(out_path):
    heldout, _ = gen_dataset("gauss8", EVAL_N, seed=HELDOUT_SEED)
    heldout = heldout.array
    per_seed = {}
    for seed in range(5):
        doc = dict(TEACHER_DOC)
        doc["seed"] = seed
        doc["output_dir"] = f"/tmp/teacher_ref_{seed}"
        t0 = time.time()
        result = train(config_from_dict(doc))
        mean_val, vals = teacher_mmd2(result.net, heldout)
        per_seed[seed] = {"mean": mean_val, "draws": vals}
        print(f"seed {seed}: mmd2 mean {mean_val:.6f} draws {vals} "
              f"({time.time()-t0:.0f}s)", flush=True)
    means = [per_seed[s]["mean"] for s in per_seed]
    mu, sigma = float(np.mean(means)), float(np.std(means, ddof=1))
    fixture = {
        "protocol": {
            "eval_n": EVAL_N,
            "nfe": 100,
            "heldout_seed": HELDOUT_SEED,
            "sample_seeds": list(SAMPLE_SEEDS),
            "bandwidth": "median_heuristic",
            "estimator": "biased V-statistic, brute-force oracle",
        },
        "per_seed": per_seed,
        "mean": mu,
        "std": sigma,
        "threshold_mean_plus_3sigma": mu + 3.0 * sigma,
    }
    with open(out_path, "w") as fh:
        json.dump(fixture, fh, indent=2)
    print(json.dumps(fixture, indent=2))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "/tmp/teacher_threshold.json")
