"""Staged convolutional encoder exposing one feature map per memory scale.

Each stage is a stack of 3×3 conv + relu blocks; every block of a stage
applies the stage stride. The final stage is globally average-pooled to a
``D``-wide vector. No normalisation layers are used, so samples in a batch
never interact.

With ``preact_taps`` a stage's map is read before its last relu, and the
next stage starts with that relu. Taps then carry signed features instead
of vectors crowded into the positive orthant. Pixels are centred by
:func:`preprocess` before entering the network.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from anomem import autodiff as ad
from anomem.autodiff import Tensor
from anomem.errors import DimensionError, ValidationError

KERNEL_SIZE = 3


@dataclass
class StageSpec:
    channels: int
    blocks: int = 2
    stride: int = 2


@dataclass
class EncoderSpec:
    input_shape: tuple[int, int, int] = (32, 32, 3)
    stages: list[StageSpec] = field(
        default_factory=lambda: [StageSpec(64, 2, 2), StageSpec(128, 2, 2)]
    )
    embed_dim: int = 128
    preact_taps: bool = True
    input_mean: float = 0.5
    input_std: float = 0.25

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.stages = [s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages]

    def validate(self) -> None:
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValidationError(f"input_shape must be (H, W, C) positive, got {self.input_shape}")
        if not self.input_std > 0:
            raise ValidationError(f"input_std must be positive, got {self.input_std}")
        if not self.stages:
            raise ValidationError("encoder needs at least one stage")
        for i, st in enumerate(self.stages):
            if st.channels < 1 or st.blocks < 1:
                raise ValidationError(f"stage {i}: channels and blocks must be ≥ 1")
            if st.stride < 2:
                raise ValidationError(f"stage {i}: stride must be ≥ 2 so the stage downsamples")
        if self.stages[-1].channels != self.embed_dim:
            raise ValidationError(
                f"embed_dim {self.embed_dim} must equal last stage width {self.stages[-1].channels}"
            )
        h, w = self.input_shape[:2]
        for i, st in enumerate(self.stages):
            for _ in range(st.blocks):
                if KERNEL_SIZE > h or KERNEL_SIZE > w:
                    raise ValidationError(f"stage {i}: map {h}x{w} too small for a 3x3 kernel")
                h, w = (h - 1) // st.stride + 1, (w - 1) // st.stride + 1

    def map_shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape of every stage (last one flattened to ``(D,)``)."""
        h, w = self.input_shape[:2]
        shapes: list[tuple[int, ...]] = []
        for st in self.stages:
            for _ in range(st.blocks):
                h, w = (h - 1) // st.stride + 1, (w - 1) // st.stride + 1
            shapes.append((h, w, st.channels))
        shapes[-1] = (self.embed_dim,)
        return shapes

    @property
    def n_scales(self) -> int:
        return len(self.stages)


@dataclass
class EncoderState:
    spec: EncoderSpec
    kernels: list[list[Tensor]]
    biases: list[list[Tensor]]

    def parameters(self) -> list[Tensor]:
        out = []
        for ks, bs in zip(self.kernels, self.biases):
            for k, b in zip(ks, bs):
                out.extend((k, b))
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        named = {}
        for s, (ks, bs) in enumerate(zip(self.kernels, self.biases)):
            for j, (k, b) in enumerate(zip(ks, bs)):
                named[f"encoder.stage{s}.block{j}.kernel"] = k
                named[f"encoder.stage{s}.block{j}.bias"] = b
        return named


def encoder_init(spec: EncoderSpec, seed: int) -> EncoderState:
    """He-normal kernels (variance ``2 / fan_in``) and zero biases."""
    spec.validate()
    rng = np.random.default_rng(seed)
    cin = spec.input_shape[2]
    kernels, biases = [], []
    for st in spec.stages:
        ks, bs = [], []
        for _ in range(st.blocks):
            fan_in = KERNEL_SIZE * KERNEL_SIZE * cin
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (KERNEL_SIZE, KERNEL_SIZE, cin, st.channels))
            ks.append(Tensor(w, requires_grad=True))
            bs.append(Tensor(np.zeros(st.channels), requires_grad=True))
            cin = st.channels
        kernels.append(ks)
        biases.append(bs)
    return EncoderState(spec, kernels, biases)


def encoder_forward(state: EncoderState, images) -> list[Tensor]:
    """Return ``[z¹, …, z^S]`` for a ``[B, H, W, C]`` batch; ``z^S`` is ``[B, D]``."""
    x = ad.as_tensor(images)
    spec = state.spec
    if x.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise DimensionError(f"images must be [B, {spec.input_shape}], got {x.shape}")
    maps = []
    for s, (st, ks, bs) in enumerate(zip(spec.stages, state.kernels, state.biases)):
        if spec.preact_taps and s > 0:
            x = ad.relu(x)
        for j, (k, b) in enumerate(zip(ks, bs)):
            x = ad.add(ad.conv2d(x, k, st.stride), b)
            if not (spec.preact_taps and j == len(ks) - 1):
                x = ad.relu(x)
        maps.append(x)
    last = ad.mean(maps[-1], axis=(1, 2))
    maps[-1] = last
    return maps


def preprocess(spec: EncoderSpec, images) -> np.ndarray:
    """Centre and scale ``[0, 1]`` pixels: ``(x − mean) / std``."""
    return (np.asarray(images, dtype=np.float64) - spec.input_mean) / spec.input_std


def encode(state: EncoderState, images) -> list[Tensor]:
    """:func:`preprocess` followed by :func:`encoder_forward`."""
    return encoder_forward(state, preprocess(state.spec, images))
