"""Modern Hopfield memory layers.

A memory stores ``N`` prototypes as the columns of ``X ∈ R^{d×N}`` and
recalls a query by iterating ``ξ ← softmax(β ξ X) Xᵀ``. Each query row stops
iterating on its own once its max-norm change drops below ``tol``, so a row's
recollection never depends on the other rows of the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial.distance import pdist, squareform

from anomem import autodiff as ad
from anomem.autodiff import Tensor
from anomem.errors import DimensionError, ValidationError

DEFAULT_BETA = 2.0
DEFAULT_TOL = 1e-4
DEFAULT_MAX_ITERS = 16


class RetrievalInfo(NamedTuple):
    iterations: int
    converged: bool


@dataclass
class HopfieldMemory:
    """Learnable prototype matrix ``weights`` of shape ``[d, N]``."""

    weights: Tensor
    beta: float = DEFAULT_BETA
    max_iters: int = DEFAULT_MAX_ITERS
    tol: float = DEFAULT_TOL

    def __post_init__(self):
        if self.weights.ndim != 2:
            raise DimensionError(f"memory weights must be [d, N], got {self.weights.shape}")
        if not self.beta > 0:
            raise ValidationError(f"beta must be positive, got {self.beta}")
        if int(self.max_iters) < 1:
            raise ValidationError(f"max_iters must be ≥ 1, got {self.max_iters}")
        if not self.tol > 0:
            raise ValidationError(f"tol must be positive, got {self.tol}")
        self.max_iters = int(self.max_iters)

    @classmethod
    def init(
        cls,
        dim: int,
        size: int,
        rng: np.random.Generator,
        beta: float = DEFAULT_BETA,
        max_iters: int = DEFAULT_MAX_ITERS,
        tol: float = DEFAULT_TOL,
        radius: float = 1.0,
    ) -> "HopfieldMemory":
        """Prototypes drawn uniformly on the sphere of the given radius."""
        if dim < 1 or size < 1:
            raise ValidationError(f"memory needs dim ≥ 1 and size ≥ 1, got {dim}, {size}")
        cols = rng.standard_normal((dim, size))
        cols /= np.linalg.norm(cols, axis=0, keepdims=True)
        return cls(Tensor(radius * cols, requires_grad=True), beta, max_iters, tol)

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    @property
    def size(self) -> int:
        return self.weights.shape[1]

    def update(self, xi: Tensor) -> Tensor:
        """One Hopfield step: ``softmax(β ξ X) Xᵀ``."""
        attn = ad.softmax(ad.scale(ad.matmul(xi, self.weights), self.beta), axis=-1)
        return ad.matmul(attn, ad.transpose(self.weights))

    def _check_query(self, query: Tensor) -> None:
        if query.ndim < 1 or query.shape[-1] != self.dim:
            raise DimensionError(
                f"query width {query.shape[-1] if query.ndim else None} != memory dim {self.dim}"
            )

    def retrieve_with_info(self, query) -> tuple[Tensor, RetrievalInfo]:
        query = ad.as_tensor(query)
        self._check_query(query)
        lead = query.shape[:-1]
        xi = query if query.ndim == 2 else ad.reshape(query, (-1, self.dim))
        active = np.ones(xi.shape[0], dtype=bool)
        iterations = 0
        for _ in range(self.max_iters):
            nxt = self.update(xi)
            iterations += 1
            change = np.abs(nxt.data - xi.data).max(axis=1)
            # a row whose step was below tol keeps the iterate it was measured at
            active &= change >= self.tol
            if not active.any():
                break
            if active.all():
                xi = nxt
            else:
                keep = active[:, None].astype(np.float64)
                xi = ad.add(ad.mul(nxt, keep), ad.mul(xi, 1.0 - keep))
        converged = not active.any()
        if query.ndim != 2:
            xi = ad.reshape(xi, lead + (self.dim,))
        return xi, RetrievalInfo(iterations, converged)

    def retrieve(self, query) -> Tensor:
        """Iterate the update from ``query`` (``[..., d]``) until convergence."""
        return self.retrieve_with_info(query)[0]

    def residual(self, xi) -> np.ndarray:
        """Per-row ``‖ξ − update(ξ)‖_∞`` (no recording)."""
        with ad.no_grad():
            xi = ad.as_tensor(xi)
            return np.abs(self.update(xi).data - xi.data).max(axis=-1)


def _check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValidationError(f"label vector has shape {y.shape}, expected ({n},)")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be 0 (anomaly) or 1 (normal)")
    return y.astype(np.float64)


def mem_gate(mem: HopfieldMemory, z, y) -> Tensor:
    """``y·HF(z) + (1−y)·z`` row-wise; rows are the second-to-last axis of ``z``.

    ``z`` is ``[batch, d]`` or ``[..., batch, d]`` (positions leading).
    """
    z = ad.as_tensor(z)
    if z.ndim < 2:
        raise DimensionError(f"mem_gate needs [batch, d], got {z.shape}")
    y = _check_labels(y, z.shape[-2])
    if not y.any():
        return z
    recalled = mem.retrieve(z)
    if y.all():
        return recalled
    gate = y[:, None]
    return ad.add(ad.mul(recalled, gate), ad.mul(z, 1.0 - gate))


def spatial_retrieve(mem: HopfieldMemory, fmap) -> Tensor:
    """Recall every depth vector of a ``[..., H, W, C]`` map independently."""
    fmap = ad.as_tensor(fmap)
    if fmap.ndim < 3:
        raise DimensionError(f"spatial_retrieve needs [..., H, W, C], got {fmap.shape}")
    if fmap.shape[-1] != mem.dim:
        raise DimensionError(f"map has {fmap.shape[-1]} channels, memory dim is {mem.dim}")
    return mem.retrieve(fmap)


def prototype_distances(mem: HopfieldMemory) -> np.ndarray:
    """Pairwise Euclidean distances between prototype columns, ``[N, N]``."""
    return squareform(pdist(mem.weights.data.T))


def memory_summary(mem: HopfieldMemory) -> dict:
    dist = prototype_distances(mem)
    n = mem.size
    off = dist[~np.eye(n, dtype=bool)] if n > 1 else np.zeros(1)
    norms = np.linalg.norm(mem.weights.data, axis=0)
    return {
        "n_mem": n,
        "dim": mem.dim,
        "beta": mem.beta,
        "min_pairwise_distance": float(off.min()),
        "max_pairwise_distance": float(off.max()),
        "prototype_norms": norms.tolist(),
    }
