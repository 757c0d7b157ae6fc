"""Training objectives for both stages.

Stage 1 contrasts memory-gated branch-A features against branch-B features
(NT-Xent over the 2B multi-view batch), adds a variance regulariser on the
retrieved vectors, and sums both over sampled spatial positions of every
scale. Stage 2 uses a double-hinge distance loss on per-scale head outputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from anomem import autodiff as ad
from anomem.autodiff import Tensor
from anomem.errors import DimensionError, NumericError, ValidationError
from anomem.memory import HopfieldMemory, mem_gate

logger = logging.getLogger(__name__)

VARIANCE_MODES = ("sample", "batch")


@dataclass
class ScaleWeights:
    """Per-scale confidences ``λ^(s)``, variance factor ``λ_V`` and sampling ratios."""

    lambdas: tuple[float, ...] = (1.0, 2.0)
    lambda_v: float = 0.05
    ratios: tuple[float, ...] = field(default=(0.3, 1.0))

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)
        self.ratios = tuple(float(v) for v in self.ratios)
        if not self.lambdas or any(v <= 0 for v in self.lambdas):
            raise ValidationError(f"scale weights must be positive, got {self.lambdas}")
        if any(b <= a for a, b in zip(self.lambdas, self.lambdas[1:])):
            raise ValidationError(f"scale weights must increase with depth, got {self.lambdas}")
        if self.lambda_v < 0:
            raise ValidationError(f"lambda_v must be ≥ 0, got {self.lambda_v}")
        if len(self.ratios) != len(self.lambdas):
            raise ValidationError("need one sampling ratio per scale")
        if any(not 0 < r <= 1 for r in self.ratios):
            raise ValidationError(f"sampling ratios must lie in (0, 1], got {self.ratios}")

    @classmethod
    def geometric(cls, n_scales: int, lambda_v: float = 0.05, ratios=None) -> "ScaleWeights":
        """``λ^(s) = 2^(s-1)``."""
        ratios = ratios if ratios is not None else (1.0,) * n_scales
        return cls(tuple(2.0**s for s in range(n_scales)), lambda_v, tuple(ratios))

    @property
    def n_scales(self) -> int:
        return len(self.lambdas)


# ----------------------------------------------------------------------
# contrastive terms
# ----------------------------------------------------------------------


def _check_nonzero(x: Tensor, what: str) -> None:
    norms = np.sqrt((x.data**2).sum(axis=-1))
    if np.any(norms <= ad.NORM_EPS):
        raise NumericError(f"{what}: zero-norm vector makes cosine similarity undefined")


def nt_xent(anchor, positive, pool, tau: float = 0.1) -> Tensor:
    """``-log(exp(cos(a, p⁺)/τ) / Σ_{p∈pool} exp(cos(a, p)/τ))``.

    ``pool`` is ``[n, d]``, must not contain the anchor and must contain the
    positive.
    """
    anchor, positive, pool = ad.as_tensor(anchor), ad.as_tensor(positive), ad.as_tensor(pool)
    if tau <= 0:
        raise ValidationError(f"temperature must be positive, got {tau}")
    if anchor.ndim != 1 or positive.shape != anchor.shape:
        raise DimensionError("anchor and positive must be vectors of equal width")
    if pool.ndim != 2 or pool.shape[1] != anchor.shape[0]:
        raise DimensionError(f"pool must be [n, {anchor.shape[0]}], got {pool.shape}")
    if not np.any(np.all(pool.data == positive.data, axis=1)):
        raise ValidationError("pool must contain the positive")
    for t, what in ((anchor, "anchor"), (positive, "positive"), (pool, "pool")):
        _check_nonzero(t, what)
    a = ad.l2_normalize(anchor)
    logits = ad.scale(ad.matmul(ad.l2_normalize(pool), ad.reshape(a, (-1, 1))), 1.0 / tau)
    pos = ad.scale(ad.sum(ad.mul(a, ad.l2_normalize(positive))), 1.0 / tau)
    return ad.sub(ad.logsumexp(ad.reshape(logits, (-1,)), axis=0), pos)


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return ad.transpose(t, tuple(axes))


def contrastive_loss(zA, zB, tau: float = 0.1, strict: bool = True) -> Tensor:
    """Symmetric NT-Xent over ``[..., B, d]`` branches; one value per leading index.

    Anchor ``k`` of branch A has positive ``k`` of branch B and vice versa; the
    pool of every anchor is all ``2B`` vectors except itself. With
    ``strict=False`` a zero vector has cosine 0 with everything instead of
    raising.
    """
    zA, zB = ad.as_tensor(zA), ad.as_tensor(zB)
    if zA.shape != zB.shape or zA.ndim < 2:
        raise DimensionError(f"branches must share a [..., B, d] shape, got {zA.shape}, {zB.shape}")
    if tau <= 0:
        raise ValidationError(f"temperature must be positive, got {tau}")
    if strict:
        _check_nonzero(zA, "branch A")
        _check_nonzero(zB, "branch B")
    b = zA.shape[-2]
    z = ad.l2_normalize(ad.concat([zA, zB], axis=-2), axis=-1)
    sim = ad.scale(ad.matmul(z, _swap_last(z)), 1.0 / tau)
    rows = np.arange(2 * b)
    partner = np.concatenate([rows[b:], rows[:b]])
    lse = ad.logsumexp(sim, axis=-1, mask=~np.eye(2 * b, dtype=bool))
    pos = ad.getitem(sim, (Ellipsis, rows, partner))
    return ad.mean(ad.sub(lse, pos), axis=-1)


def loss_com(zA, zB, tau: float = 0.1) -> Tensor:
    """Contrasted memory loss for ``[B, d]`` branches; ``zA`` already gated."""
    zA = ad.as_tensor(zA)
    if zA.ndim != 2 or zA.shape[0] < 1:
        raise ValidationError("loss_com needs a non-empty [B, d] batch")
    return contrastive_loss(zA, zB, tau)


def loss_variance(z_mem, y, mode: str = "sample") -> Tensor:
    """Negative mean standard deviation of the retrieved normal vectors.

    ``mode="sample"`` takes the variance across the ``d`` features of each
    row; ``mode="batch"`` takes it per feature across the normal rows and
    averages the standard deviations. Returns one value per leading index of
    ``z_mem`` (``[..., B, d]``).
    """
    z_mem = ad.as_tensor(z_mem)
    if z_mem.ndim < 2:
        raise DimensionError(f"loss_variance needs [..., B, d], got {z_mem.shape}")
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (z_mem.shape[-2],):
        raise ValidationError(f"labels {y.shape} do not match batch {z_mem.shape[-2]}")
    if mode not in VARIANCE_MODES:
        raise ValidationError(f"variance mode must be one of {VARIANCE_MODES}, got {mode!r}")
    lead = z_mem.shape[:-2]
    n_normal = y.sum()
    if n_normal == 0:
        logger.warning("variance loss skipped: batch has no normal samples")
        return Tensor(np.zeros(lead)) if lead else Tensor(0.0)
    if mode == "sample":
        sd = ad.sqrt(ad.variance(z_mem, axis=-1))
        return ad.neg(ad.sum(ad.mul(sd, y / n_normal), axis=-1))
    idx = np.flatnonzero(y)
    if idx.size < 2:
        logger.warning("batch variance loss skipped: fewer than two normal samples")
        return Tensor(np.zeros(lead)) if lead else Tensor(0.0)
    normals = ad.getitem(z_mem, (Ellipsis, idx, slice(None)))
    sd = ad.sqrt(ad.variance(normals, axis=-2))
    return ad.neg(ad.mean(sd, axis=-1))


# ----------------------------------------------------------------------
# multi-scale composite
# ----------------------------------------------------------------------


def sample_positions(h: int, w: int, ratio: float, seed) -> np.ndarray:
    """Draw ``floor(h*w*ratio)`` distinct ``(i, j)`` positions, uniformly.

    ``seed`` is an int or a ``numpy.random.Generator``. Returns ``[P, 2]``
    in row-major position order.
    """
    if not 0 < ratio <= 1:
        raise ValidationError(f"sampling ratio must lie in (0, 1], got {ratio}")
    count = int(np.floor(h * w * ratio))
    if count < 1:
        raise ValidationError(f"ratio {ratio} samples no position of a {h}x{w} map")
    if count == h * w:
        flat = np.arange(h * w)
    else:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        flat = np.sort(rng.choice(h * w, size=count, replace=False))
    return np.stack(np.divmod(flat, w), axis=1)


def _position_vectors(z: Tensor, positions: np.ndarray | None) -> Tensor:
    """``[B, H, W, C]`` at sampled positions -> ``[P, B, C]``; ``[B, D]`` -> ``[1, B, D]``."""
    if z.ndim == 2:
        return ad.reshape(z, (1,) + z.shape)
    picked = ad.getitem(z, (slice(None), positions[:, 0], positions[:, 1]))
    return ad.transpose(picked, (1, 0, 2))


@dataclass
class MultiScaleLoss:
    total: Tensor
    com: list[float]
    var: list[float]
    positions: list[int]

    def as_dict(self) -> dict:
        return {
            "loss": float(self.total.data),
            "com": self.com,
            "var": self.var,
            "positions": self.positions,
        }


def loss_com_ms(
    featsA: Sequence[Tensor],
    featsB: Sequence[Tensor],
    y,
    weights: ScaleWeights,
    memories: Sequence[HopfieldMemory | None] | None,
    tau: float = 0.1,
    seed=None,
    variance_mode: str = "sample",
    normalize_before_memory: bool = False,
    scales: Sequence[int] | None = None,
    strict: bool = False,
) -> MultiScaleLoss:
    """Multi-scale contrasted memory loss.

    ``featsA[s]`` / ``featsB[s]`` are ``[B, H, W, C]`` maps or ``[B, D]``
    vectors (one position). ``scales`` restricts the sum to some scale
    indices; a ``None`` memory for a scale contrasts raw features and drops
    that scale's variance term.
    """
    n = len(featsA)
    if len(featsB) != n:
        raise DimensionError("both branches need the same number of scales")
    scales = list(range(n)) if scales is None else list(scales)
    if memories is None:
        memories = [None] * n
    if len(memories) != n:
        raise DimensionError(f"{len(memories)} memories for {n} scales")
    if weights.n_scales != n:
        raise DimensionError(f"{weights.n_scales} scale weights for {n} scales")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    y = np.asarray(y)

    terms, coms, vars_, counts = [], [], [], []
    for s in scales:
        zA, zB, mem = ad.as_tensor(featsA[s]), ad.as_tensor(featsB[s]), memories[s]
        if zA.shape != zB.shape:
            raise DimensionError(f"scale {s}: branch shapes differ {zA.shape} vs {zB.shape}")
        if mem is not None and zA.shape[-1] != mem.dim:
            raise DimensionError(f"scale {s}: width {zA.shape[-1]} != memory dim {mem.dim}")
        pos = None
        if zA.ndim == 4:
            pos = sample_positions(zA.shape[1], zA.shape[2], weights.ratios[s], rng)
        a = _position_vectors(zA, pos)
        b = _position_vectors(zB, pos)
        stage = "memory"
        try:
            if mem is not None and normalize_before_memory:
                a = ad.l2_normalize(a)
            gated = mem_gate(mem, a, y) if mem is not None else a
            stage = "L_COM"
            com = contrastive_loss(gated, b, tau, strict=strict)
            scale_sum = ad.sum(com)
            coms.append(float(com.data.mean()))
            if mem is not None and weights.lambda_v > 0:
                stage = "L_V"
                var = loss_variance(gated, y, variance_mode)
                vars_.append(float(var.data.mean()))
                scale_sum = ad.add(scale_sum, ad.scale(ad.sum(var), weights.lambda_v))
            else:
                vars_.append(0.0)
        except NumericError as exc:
            raise NumericError(f"scale {s + 1} {stage} term: {exc}") from exc
        terms.append(ad.scale(scale_sum, weights.lambdas[s]))
        counts.append(a.shape[0])

    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    total = ad.scale(total, 1.0 / float(np.sum(counts)))
    return MultiScaleLoss(total, coms, vars_, counts)


# ----------------------------------------------------------------------
# stage-2 distance losses
# ----------------------------------------------------------------------


def loss_dist(d: float, y: int, margin: float = 2.0) -> float:
    """Double hinge ``y·max(d − 1/M, 0) + (1 − y)·max(M − d, 0)`` for one sample."""
    if margin <= 0:
        raise ValidationError(f"margin must be positive, got {margin}")
    if d < 0:
        raise ValidationError(f"anomaly distance must be ≥ 0, got {d}")
    if y not in (0, 1):
        raise ValidationError(f"label must be 0 or 1, got {y}")
    return y * max(d - 1.0 / margin, 0.0) + (1 - y) * max(margin - d, 0.0)


def dist_hinge(d, y, margin: float = 2.0) -> Tensor:
    """Elementwise double hinge on a tensor of distances (any sign)."""
    if margin <= 0:
        raise ValidationError(f"margin must be positive, got {margin}")
    d = ad.as_tensor(d)
    y = np.broadcast_to(np.asarray(y, dtype=np.float64), d.shape)
    normal = ad.mul(ad.relu(ad.sub(d, 1.0 / margin)), y)
    anomal = ad.mul(ad.relu(ad.sub(margin, d)), 1.0 - y)
    return ad.add(normal, anomal)


def loss_sup(distances, y, margin: float = 2.0) -> Tensor:
    """Mean double hinge over all (sample, scale) pairs.

    ``distances`` is a ``[B, S]`` tensor or a list of ``S`` tensors of
    shape ``[B]``.
    """
    if isinstance(distances, (list, tuple)):
        distances = ad.concat([ad.reshape(ad.as_tensor(d), (-1, 1)) for d in distances], axis=1)
    distances = ad.as_tensor(distances)
    if distances.ndim != 2:
        raise DimensionError(f"distances must be [B, S], got {distances.shape}")
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (distances.shape[0],):
        raise ValidationError("need one label per sample")
    return ad.mean(dist_hinge(distances, y[:, None], margin))
