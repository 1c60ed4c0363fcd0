"""Probe the timestep-rescaling distillation recipe for the grid criterion."""

import sys
import time

import numpy as np

from fslab.data import gen_dataset
from fslab.network import rescale_discrepancy, rescale_distill
from fslab.train import config_from_dict, train

t_steps = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
s_steps = int(sys.argv[2]) if len(sys.argv) > 2 else 3000

doc = {
    "dataset": "gauss8", "objective": "fm", "steps": t_steps, "batch": 256,
    "lr": 3e-3, "seed": 0, "hidden": 64, "depth": 3, "t_scale": 1000.0,
    "conditional": False, "n_train": 8000, "eval_n": 64, "sampler_eval": [1],
    "output_dir": "/tmp/probe_rescale_teacher", "log_every": 1000,
}
t0 = time.time()
res = train(config_from_dict(doc))
print(f"wide-clock teacher {t_steps} steps ({time.time()-t0:.0f}s) "
      f"loss_tail={res.final_loss:.4f}", flush=True)

from fslab.network import init_velocity_net

teacher = res.net
student = init_velocity_net(
    dim=2, hidden=64, depth=3, n_classes=teacher.arch.n_classes,
    seed=0, t_scale=1.0, n_freqs=teacher.arch.n_freqs,
)
for name in student.params:
    np.copyto(student.params[name], teacher.params[name])

data, _ = gen_dataset("gauss8", 8000, seed=(0, 0))
gap0 = rescale_discrepancy(teacher, student, data.array, n_grid=400)
t0 = time.time()
student, loss, log = rescale_distill(
    teacher, student, data.array, steps=s_steps, lr=1e-3, batch=256, seed=1
)
gap1 = rescale_discrepancy(teacher, student, data.array, n_grid=400)
print(f"distill {s_steps} steps ({time.time()-t0:.0f}s) loss={loss:.2e} "
      f"gap before={gap0:.4f} after={gap1:.6f}", flush=True)
