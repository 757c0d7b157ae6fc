"""Datasets, one-vs-all protocol splits and minibatching.

Images are ``[N, H, W, C]`` float64 arrays with values in [0, 1]. Labels use
1 for normal and 0 for anomalous samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from anomem.errors import FormatError, ValidationError

CIFAR_RECORD_BYTES = 3073
CIFAR_SIDE = 32


@dataclass
class LabeledImageSet:
    images: np.ndarray
    labels: np.ndarray
    class_ids: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        n = len(self.images)
        if self.images.ndim != 4:
            raise ValidationError(f"images must be [N, H, W, C], got {self.images.shape}")
        if self.labels.shape != (n,) or self.class_ids.shape != (n,):
            raise ValidationError("images, labels and class_ids must have equal length")
        if n and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValidationError("image values must lie in [0, 1]")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValidationError("labels must be 0 (anomaly) or 1 (normal)")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "LabeledImageSet":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledImageSet(self.images[idx], self.labels[idx], self.class_ids[idx])

    def relabel(self, normal_class: int) -> "LabeledImageSet":
        """Copy with ``labels = (class_ids == normal_class)``."""
        return LabeledImageSet(
            self.images, (self.class_ids == normal_class).astype(np.int64), self.class_ids
        )


# ----------------------------------------------------------------------
# synthetic benchmark
# ----------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Procedural classes: each is an oriented band-limited gaussian texture
    with a class-specific orientation and frequency, overlaid with a simple
    shape whose kind depends on the class, plus a weak class colour tint."""

    n_classes: int = 2
    per_class: int = 600
    image_size: int = 32
    channels: int = 3
    orientation_jitter: float = np.pi / 10
    frequency_jitter: float = 0.8
    tint_strength: float = 0.04
    tint_spread: float = 0.06
    shape_prob: float = 0.7
    pixel_noise: float = 0.04

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ValidationError(f"synthetic data needs at least 2 classes, got {self.n_classes}")
        if self.per_class < 1 or self.image_size < 4 or self.channels not in (1, 3):
            raise ValidationError("invalid synthetic per_class / image_size / channels")


def _class_params(k: int, spec: SyntheticSpec) -> tuple[float, float, np.ndarray]:
    theta = np.pi * k / spec.n_classes
    freq = 3.5 + 3.0 * (k % 2) + 0.7 * (k // 2)
    hue = np.roll(np.array([1.0, 0.0, -1.0]), k)[: spec.channels]
    return theta, freq, spec.tint_strength * hue


def _oriented_field(rng: np.random.Generator, n: int, freq: float, theta: float) -> np.ndarray:
    f = np.fft.fftfreq(n) * n
    fy, fx = f[:, None], f[None, :]
    px, py = freq * np.cos(theta), freq * np.sin(theta)
    bw = 1.0
    gain = np.exp(-((fx - px) ** 2 + (fy - py) ** 2) / (2 * bw**2)) + np.exp(
        -((fx + px) ** 2 + (fy + py) ** 2) / (2 * bw**2)
    )
    fieldv = np.real(np.fft.ifft2(np.fft.fft2(rng.standard_normal((n, n))) * gain))
    return fieldv / (fieldv.std() + 1e-12)


def _shape_mask(rng: np.random.Generator, n: int, kind: int) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    r = rng.uniform(0.12, 0.25) * n
    cy, cx = rng.uniform(r, n - r, size=2)
    if kind == 0:
        return ((yy - cy) ** 2 + (xx - cx) ** 2 <= r**2).astype(np.float64)
    return ((np.abs(yy - cy) <= r * 0.85) & (np.abs(xx - cx) <= r * 0.85)).astype(np.float64)


def _render(rng: np.random.Generator, k: int, spec: SyntheticSpec) -> np.ndarray:
    n, c = spec.image_size, spec.channels
    theta, freq, tint = _class_params(k, spec)
    theta += rng.uniform(-spec.orientation_jitter, spec.orientation_jitter)
    freq = max(1.0, freq + rng.uniform(-spec.frequency_jitter, spec.frequency_jitter))
    texture = _oriented_field(rng, n, freq, theta)
    base = rng.uniform(0.35, 0.65) + tint + rng.normal(0.0, spec.tint_spread, c)
    amp = rng.uniform(0.1, 0.2)
    img = base[None, None, :] + amp * texture[:, :, None]
    if rng.random() < spec.shape_prob:
        kind = k % 2 if rng.random() < 0.8 else 1 - k % 2
        mask = _shape_mask(rng, n, kind)[:, :, None]
        colour = rng.uniform(0.0, 1.0, c)
        img = img * (1 - 0.6 * mask) + 0.6 * mask * colour
    img += rng.normal(0.0, spec.pixel_noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def gen_synthetic(spec: SyntheticSpec, seed: int, normal_class: int = 0) -> LabeledImageSet:
    """Generate ``per_class`` images for each of ``n_classes`` classes."""
    spec.validate()
    root = np.random.SeedSequence(seed)
    images, class_ids = [], []
    for k, child in enumerate(root.spawn(spec.n_classes)):
        rng = np.random.default_rng(child)
        images.extend(_render(rng, k, spec) for _ in range(spec.per_class))
        class_ids.extend([k] * spec.per_class)
    class_ids = np.asarray(class_ids)
    return LabeledImageSet(
        np.stack(images), (class_ids == normal_class).astype(np.int64), class_ids
    )


# ----------------------------------------------------------------------
# CIFAR-style binary records
# ----------------------------------------------------------------------


def parse_cifar_record(record: bytes) -> tuple[int, np.ndarray]:
    """Decode one 3073-byte record: label byte, then R, G and B planes."""
    if len(record) != CIFAR_RECORD_BYTES:
        raise FormatError(
            f"CIFAR record must be {CIFAR_RECORD_BYTES} bytes, got {len(record)}", offset=len(record)
        )
    label = record[0]
    if label > 9:
        raise FormatError(f"CIFAR label {label} outside [0, 9]", offset=0)
    planes = np.frombuffer(record, dtype=np.uint8, offset=1).reshape(3, CIFAR_SIDE, CIFAR_SIDE)
    return int(label), planes.transpose(1, 2, 0).astype(np.float64) / 255.0


def encode_cifar_record(label: int, image: np.ndarray) -> bytes:
    """Inverse of :func:`parse_cifar_record`; ``image`` is 32×32×3 in [0, 1]."""
    if not 0 <= label <= 9:
        raise ValidationError(f"CIFAR label must lie in [0, 9], got {label}")
    image = np.asarray(image)
    if image.shape != (CIFAR_SIDE, CIFAR_SIDE, 3):
        raise ValidationError(f"CIFAR image must be 32x32x3, got {image.shape}")
    pixels = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return bytes([label]) + pixels.transpose(2, 0, 1).tobytes()


def load_cifar_file(path: str | Path, normal_class: int = 0) -> LabeledImageSet:
    """Read a CIFAR-10 binary batch file (a concatenation of records)."""
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD_BYTES:
        raise FormatError(
            f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}",
            offset=len(raw) - len(raw) % CIFAR_RECORD_BYTES,
        )
    labels, images = [], []
    for off in range(0, len(raw), CIFAR_RECORD_BYTES):
        try:
            label, img = parse_cifar_record(raw[off : off + CIFAR_RECORD_BYTES])
        except FormatError as exc:
            raise FormatError(f"{path}: {exc}", offset=off) from exc
        labels.append(label)
        images.append(img)
    class_ids = np.asarray(labels)
    return LabeledImageSet(np.stack(images), (class_ids == normal_class).astype(np.int64), class_ids)


# ----------------------------------------------------------------------
# one-vs-all protocol
# ----------------------------------------------------------------------


@dataclass
class ProtocolSplit:
    normal_class: int
    gamma: float
    seed: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    train_labels: np.ndarray = field(repr=False)
    test_labels: np.ndarray = field(repr=False)

    @property
    def n_train_anomalies(self) -> int:
        return int((self.train_labels == 0).sum())

    def train_set(self, data: LabeledImageSet) -> LabeledImageSet:
        return LabeledImageSet(
            data.images[self.train_idx], self.train_labels, data.class_ids[self.train_idx]
        )

    def test_set(self, data: LabeledImageSet) -> LabeledImageSet:
        return LabeledImageSet(
            data.images[self.test_idx], self.test_labels, data.class_ids[self.test_idx]
        )


def anomaly_count(n_normal: int, gamma: float) -> int:
    """Anomalies to add so that they form a fraction ``gamma`` of the training set."""
    return int(round(gamma * n_normal / (1.0 - gamma)))


def make_one_vs_all_split(
    data: LabeledImageSet,
    normal_class: int,
    gamma: float,
    seed: int,
    n_test: int = 100,
    n_train_normal: int | None = None,
) -> ProtocolSplit:
    """One class is normal, all others anomalous.

    ``n_test`` normals and ``n_test`` anomalies are held out for testing; the
    remaining normals (or the first ``n_train_normal`` of them) form the
    training set, plus anomalies so that their fraction is ``gamma``. The test
    set and normal training images depend only on ``seed``, not on ``gamma``.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValidationError(f"gamma must lie in [0, 1), got {gamma}")
    normals = np.flatnonzero(data.class_ids == normal_class)
    others = np.flatnonzero(data.class_ids != normal_class)
    if normals.size == 0:
        raise ValidationError(f"normal class {normal_class} is absent from the data")
    if normals.size <= n_test or others.size < n_test:
        raise ValidationError(
            f"need more than {n_test} normals and at least {n_test} anomalies for the test set"
        )
    test_seq, anom_seq = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(test_seq)
    normals = rng.permutation(normals)
    others = rng.permutation(others)
    test_idx = np.concatenate([normals[:n_test], others[:n_test]])
    train_norm = normals[n_test:]
    if n_train_normal is not None:
        if n_train_normal > train_norm.size:
            raise ValidationError(f"only {train_norm.size} training normals available")
        train_norm = train_norm[:n_train_normal]
    n_anom = anomaly_count(train_norm.size, gamma)
    pool = others[n_test:]
    if n_anom > pool.size:
        raise ValidationError(
            f"gamma={gamma} needs {n_anom} training anomalies, only {pool.size} available"
        )
    train_anom = np.random.default_rng(anom_seq).choice(pool, size=n_anom, replace=False)
    train_idx = np.concatenate([train_norm, np.sort(train_anom)])
    return ProtocolSplit(
        normal_class=normal_class,
        gamma=gamma,
        seed=seed,
        train_idx=train_idx,
        test_idx=test_idx,
        train_labels=np.concatenate([np.ones(train_norm.size), np.zeros(n_anom)]).astype(np.int64),
        test_labels=np.concatenate([np.ones(n_test), np.zeros(n_test)]).astype(np.int64),
    )


def iterate_minibatches(
    n: int, batch_size: int, rng: np.random.Generator, min_size: int = 2
) -> Iterator[np.ndarray]:
    """Shuffled index batches; a trailing batch smaller than ``min_size`` is dropped."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if idx.size >= min_size:
            yield idx


def n_minibatches(n: int, batch_size: int, min_size: int = 2) -> int:
    full, rest = divmod(n, batch_size)
    return full + (1 if rest >= min_size else 0)
