"""Anomaly scoring from memory deviation maps.

For every scale the deviation map is the feature map minus its spatial
memory recollection. One-class scoring takes the map's L2 norm; the
semi-supervised variant feeds an average-pooled map through a small MLP
head. Per-scale scores are fused with the scale confidences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from anomem import autodiff as ad
from anomem.autodiff import Tensor
from anomem.encoder import EncoderState, encode
from anomem.errors import DimensionError, ValidationError
from anomem.memory import HopfieldMemory, spatial_retrieve

MODES = ("one-class", "ssad")


@dataclass
class DeviationMap:
    scale: int
    delta: Tensor  # [B, H, W, C] (or [H, W, C]); vector scales use H = W = 1

    @property
    def batch_size(self) -> int:
        return self.delta.shape[0] if self.delta.ndim == 4 else 1


def _as_map(z: Tensor) -> Tensor:
    """``[B, D]`` vectors are 1×1 maps."""
    if z.ndim == 2:
        return ad.reshape(z, (z.shape[0], 1, 1, z.shape[1]))
    if z.ndim == 1:
        return ad.reshape(z, (1, 1, z.shape[0]))
    return z


def deviation_map(z, mem: HopfieldMemory, scale: int = 0, normalize: bool = False) -> DeviationMap:
    """``z − HF(z)`` applied at every spatial position of ``z``."""
    fmap = _as_map(ad.as_tensor(z))
    if normalize:
        fmap = ad.l2_normalize(fmap)
    return DeviationMap(scale, ad.sub(fmap, spatial_retrieve(mem, fmap)))


def deviation_maps(
    encoder: EncoderState,
    memories: Sequence[HopfieldMemory],
    images: np.ndarray,
    normalize: bool = False,
    chunk: int = 256,
) -> list[DeviationMap]:
    """Batched deviation maps of every scale for ``[N, H, W, C]`` images (no recording)."""
    if len(memories) != encoder.spec.n_scales:
        raise DimensionError(f"{len(memories)} memories for {encoder.spec.n_scales} scales")
    parts: list[list[np.ndarray]] = [[] for _ in memories]
    with ad.no_grad():
        for start in range(0, len(images), chunk):
            feats = encode(encoder, images[start : start + chunk])
            for s, (z, mem) in enumerate(zip(feats, memories)):
                parts[s].append(deviation_map(z, mem, s, normalize).delta.data)
    return [DeviationMap(s, Tensor._wrap(np.concatenate(p))) for s, p in enumerate(parts)]


def score_oneclass(deviations: Sequence[DeviationMap]) -> list[np.ndarray]:
    """Frobenius norm of every map; one ``[B]`` array (or scalar) per scale."""
    out = []
    for dev in deviations:
        d = dev.delta.data
        axes = (-3, -2, -1)
        out.append(np.sqrt((d**2).sum(axis=axes)))
    return out


@dataclass
class ScaleHead:
    """Average pooling onto a ``grid``×``grid`` map followed by two dense layers."""

    grid: int
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    # fixed per-feature input standardization (identity when None)
    shift: np.ndarray | None = None
    scale: np.ndarray | None = None

    @classmethod
    def init(cls, map_shape, grid: int, hidden: int, rng: np.random.Generator) -> "ScaleHead":
        h, w, c = map_shape if len(map_shape) == 3 else (1, 1, map_shape[0])
        grid = min(grid, h, w)
        if hidden < 1 or grid < 1:
            raise ValidationError("head needs hidden ≥ 1 and grid ≥ 1")
        fan_in = grid * grid * c
        return cls(
            grid,
            Tensor(rng.normal(0, np.sqrt(2.0 / fan_in), (fan_in, hidden)), requires_grad=True),
            Tensor(np.zeros(hidden), requires_grad=True),
            Tensor(rng.normal(0, np.sqrt(1.0 / hidden), (hidden, 1)), requires_grad=True),
            Tensor(np.zeros(1), requires_grad=True),
        )

    @property
    def in_features(self) -> int:
        return self.w1.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def pool(self, delta) -> Tensor:
        """``φ``: ``[B, H, W, C]`` -> ``[B, grid*grid*C]``."""
        delta = _as_map(ad.as_tensor(delta))
        if delta.ndim == 3:
            delta = ad.reshape(delta, (1,) + delta.shape)
        pooled = ad.avg_pool(delta, self.grid)
        flat = ad.reshape(pooled, (pooled.shape[0], -1))
        if flat.shape[1] != self.in_features:
            raise DimensionError(f"pooled width {flat.shape[1]} != head input {self.in_features}")
        return flat

    def standardize_from(self, pooled: np.ndarray) -> None:
        """Fix the input shift and scale to the per-feature mean and std of ``pooled``."""
        pooled = np.asarray(pooled, dtype=np.float64)
        self.shift = pooled.mean(axis=0)
        self.scale = np.maximum(pooled.std(axis=0), 1e-8)

    def mlp(self, pooled) -> Tensor:
        if self.shift is not None:
            pooled = ad.div(ad.sub(pooled, self.shift), self.scale)
        hidden = ad.relu(ad.add(ad.matmul(pooled, self.w1), self.b1))
        return ad.reshape(ad.add(ad.matmul(hidden, self.w2), self.b2), (-1,))

    def __call__(self, delta) -> Tensor:
        return self.mlp(self.pool(delta))


def score_ssad(deviations: Sequence[DeviationMap], heads: Sequence[ScaleHead]) -> list[np.ndarray]:
    """Head outputs ``g(φ(Δ))`` per scale (raw, unclamped)."""
    if len(heads) != len(deviations):
        raise ValidationError(f"{len(heads)} heads for {len(deviations)} scales")
    with ad.no_grad():
        return [head(dev.delta).data for dev, head in zip(deviations, heads)]


def fuse_scores(per_scale, lambdas) -> np.ndarray | float:
    """``Σ λ_s s_s / Σ λ_s``; ``per_scale`` holds scalars or equal-length arrays."""
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if len(per_scale) != lambdas.size or lambdas.size == 0:
        raise ValidationError(f"{len(per_scale)} scores for {lambdas.size} scale weights")
    if np.any(lambdas <= 0):
        raise ValidationError("scale weights must be positive")
    stacked = np.stack([np.asarray(p, dtype=np.float64) for p in per_scale])
    fused = np.tensordot(lambdas, stacked, axes=1) / lambdas.sum()
    return float(fused) if np.ndim(fused) == 0 else fused


@dataclass
class AnomalyScore:
    per_scale: list[float]
    fused: float
    mode: str

    def to_record(self, ident) -> dict:
        return {"id": ident, "per_scale": self.per_scale, "fused": self.fused, "mode": self.mode}

    def to_json(self, ident) -> str:
        return json.dumps(self.to_record(ident))


def detector_score(
    images,
    encoder: EncoderState,
    memories: Sequence[HopfieldMemory],
    lambdas,
    mode: str = "one-class",
    heads: Sequence[ScaleHead] | None = None,
    scales: Sequence[int] | None = None,
    normalize: bool = False,
) -> list[AnomalyScore]:
    """Score each image of a ``[N, H, W, C]`` batch (or a single ``[H, W, C]`` image).

    ``scales`` optionally restricts scoring and fusion to a subset of scales.
    """
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "ssad" and not heads:
        raise ValidationError("ssad scoring needs trained scale heads")
    if mode == "one-class" and heads:
        raise ValidationError("one-class scoring takes no heads")
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    devs = deviation_maps(encoder, memories, images, normalize)
    per_scale = score_oneclass(devs) if mode == "one-class" else score_ssad(devs, heads)
    lambdas = np.asarray(lambdas, dtype=np.float64)
    keep = list(range(len(devs))) if scales is None else list(scales)
    per_scale = [per_scale[s] for s in keep]
    fused = fuse_scores(per_scale, lambdas[keep])
    fused = np.atleast_1d(fused)
    return [
        AnomalyScore([float(p[i]) for p in per_scale], float(fused[i]), mode)
        for i in range(len(images))
    ]
