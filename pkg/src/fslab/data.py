"""Toy 2-D datasets with class labels."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

DATASET_KINDS = ("gauss8", "gauss1", "moons", "checkerboard")


class DatasetError(ValueError):
    pass


def gauss8_centers():
    angles = np.arange(8) * (np.pi / 4.0)
    return np.stack([2.0 * np.cos(angles), 2.0 * np.sin(angles)], axis=1)


def gen_dataset(kind, n, seed):
    """Deterministic sample of `n` points plus integer class ids."""
    if n < 1:
        raise DatasetError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if kind == "gauss8":
        centers = gauss8_centers()
        labels = rng.integers(0, 8, size=n)
        pts = centers[labels] + 0.1 * rng.standard_normal((n, 2))
        return Tensor(pts), labels.astype(np.int64)
    if kind == "gauss1":
        return Tensor(rng.standard_normal((n, 2))), np.zeros(n, dtype=np.int64)
    if kind == "moons":
        labels = rng.integers(0, 2, size=n)
        theta = rng.uniform(0.0, np.pi, size=n)
        x = np.where(labels == 0, np.cos(theta), 1.0 - np.cos(theta))
        y = np.where(labels == 0, np.sin(theta), 0.5 - np.sin(theta))
        pts = np.stack([x, y], axis=1) + 0.05 * rng.standard_normal((n, 2))
        return Tensor(pts), labels.astype(np.int64)
    if kind == "checkerboard":
        pts = np.empty((0, 2))
        while pts.shape[0] < n:
            cand = rng.uniform(-2.0, 2.0, size=(4 * n, 2))
            parity = (np.floor(cand[:, 0]) + np.floor(cand[:, 1])) % 2 == 0
            pts = np.concatenate([pts, cand[parity]], axis=0)
        return Tensor(pts[:n]), np.zeros(n, dtype=np.int64)
    raise DatasetError(f"unknown dataset kind {kind!r}")


def n_classes_for(kind):
    return {"gauss8": 8, "gauss1": 1, "moons": 2, "checkerboard": 1}[kind]
