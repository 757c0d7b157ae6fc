"""Metrics and experiment sweeps: AUROC, linear probe, grid reports."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import log_softmax, softmax
from scipy.stats import rankdata

from anomem.errors import ValidationError

SWEEP_AXES = {
    "memory_size": "memory.sizes",
    "sampling_ratio": "loss.ratios",
    "gamma": "protocol.gamma",
}


def auroc(scores, anomaly_labels) -> float:
    """Mann–Whitney AUROC with midranks; label 1 marks an anomaly (higher score = more anomalous)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    a = np.asarray(anomaly_labels).ravel()
    if s.shape != a.shape:
        raise ValidationError(f"{s.size} scores for {a.size} labels")
    if not np.all((a == 0) | (a == 1)):
        raise ValidationError("anomaly labels must be 0 or 1")
    n_a = int(a.sum())
    n_n = a.size - n_a
    if n_a == 0 or n_n == 0:
        raise ValidationError("auroc needs both normal and anomalous samples")
    if not np.all(np.isfinite(s)):
        raise ValidationError("scores must be finite")
    ranks = rankdata(s)
    return float((ranks[a == 1].sum() - n_a * (n_a + 1) / 2.0) / (n_a * n_n))


def _standardize(train: np.ndarray, test: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd[sd == 0] = 1.0
    return (train - mu) / sd, (test - mu) / sd


def fit_softmax_regression(
    x: np.ndarray, y: np.ndarray, n_classes: int, max_iter: int = 5000, tol: float = 1e-6
) -> tuple[np.ndarray, int]:
    """Full-batch gradient descent on the mean cross-entropy.

    Returns ``(W, iterations)`` with ``W`` of shape ``[d + 1, K]`` (bias row last).
    The step is ``1/L`` with ``L`` the Lipschitz bound ``‖X‖₂² / (2n)``.
    """
    n = x.shape[0]
    xb = np.hstack([x, np.ones((n, 1))])
    onehot = np.eye(n_classes)[y]
    # iterates from W = 0 stay in the row space of X, so when d > n the same
    # descent runs on coefficients in an orthonormal basis of that space
    basis = None
    if xb.shape[1] > n:
        _, sv, vt = np.linalg.svd(xb, full_matrices=False)
        basis = vt[sv > sv[0] * 1e-12].T
        xb = xb @ basis
    lip = 0.5 * np.linalg.norm(xb, 2) ** 2 / n
    step = 1.0 / max(lip, 1e-12)
    w = np.zeros((xb.shape[1], n_classes))
    iters = max_iter
    for it in range(1, max_iter + 1):
        grad = xb.T @ (softmax(xb @ w, axis=1) - onehot) / n
        if np.linalg.norm(grad) < tol:
            iters = it
            break
        w -= step * grad
    return (w if basis is None else basis @ w), iters


def cross_entropy(x: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    xb = np.hstack([x, np.ones((x.shape[0], 1))])
    return float(-log_softmax(xb @ w, axis=1)[np.arange(len(y)), y].mean())


def linear_probe(
    features, labels, seed: int = 0, test_fraction: float = 0.2, max_iter: int = 5000
) -> float:
    """Held-out accuracy of a multinomial logistic classifier on frozen features."""
    x = np.asarray(features, dtype=np.float64)
    x = x.reshape(x.shape[0], -1)
    classes, y = np.unique(np.asarray(labels), return_inverse=True)
    if classes.size < 2:
        raise ValidationError("linear probe needs at least two classes")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(y))
    n_test = max(1, int(round(test_fraction * len(y))))
    test, train = order[:n_test], order[n_test:]
    if np.unique(y[train]).size < 2:
        raise ValidationError("training fold holds a single class")
    xtr, xte = _standardize(x[train], x[test])
    w, _ = fit_softmax_regression(xtr, y[train], classes.size, max_iter)
    pred = np.argmax(np.hstack([xte, np.ones((len(test), 1))]) @ w, axis=1)
    return float((pred == y[test]).mean())


@dataclass
class EvalReport:
    axis: str | None
    value: object
    seeds: list[int]
    aurocs: list[float]
    mean: float = field(init=False)
    std: float = field(init=False)

    def __post_init__(self):
        if len(self.seeds) != len(self.aurocs) or not self.aurocs:
            raise ValidationError("need one auroc per seed")
        arr = np.asarray(self.aurocs, dtype=np.float64)
        if np.any((arr < 0) | (arr > 1)):
            raise ValidationError("auroc values must lie in [0, 1]")
        self.mean = float(arr.mean())
        self.std = float(arr.std())

    @property
    def auroc(self) -> float:
        return self.mean

    @property
    def median(self) -> float:
        return float(np.median(self.aurocs))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def sweep_config(config, axis: str, value):
    """Config for one grid point; scalar sizes/ratios apply to the first scale only."""
    if axis not in SWEEP_AXES:
        raise ValidationError(f"sweep axis must be one of {sorted(SWEEP_AXES)}, got {axis!r}")
    key = SWEEP_AXES[axis]
    if axis == "memory_size":
        sizes = list(value) if isinstance(value, (list, tuple)) else [int(value)] + config.memory.sizes[1:]
        return config.replace(**{key: sizes})
    if axis == "sampling_ratio":
        ratios = list(value) if isinstance(value, (list, tuple)) else [float(value)] + config.loss.ratios[1:]
        return config.replace(**{key: ratios})
    mode = "one-class" if float(value) == 0 else "ssad"
    return config.replace(**{key: float(value), "mode": mode})


def sweep(axis: str, grid: Sequence, config, data=None, seeds: Sequence[int] | None = None) -> list[EvalReport]:
    """Run the full pipeline at each grid point over shared seeds."""
    from anomem.pipeline import load_data, run_pipeline

    if len(grid) == 0:
        raise ValidationError("sweep grid must not be empty")
    seeds = list(config.protocol.seeds if seeds is None else seeds)
    reports = []
    for value in grid:
        cfg = sweep_config(config, axis, value)
        aurocs = []
        for seed in seeds:
            src = data if data is not None else load_data(cfg, seed)
            aurocs.append(run_pipeline(cfg, seed, src).auroc)
        reports.append(EvalReport(axis, value, seeds, aurocs))
    return reports
