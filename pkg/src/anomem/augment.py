"""Stochastic view generation for the two contrastive branches.

Ops run in a fixed order: crop-rescale, horizontal flip, brightness,
contrast, saturation, gaussian blur, gaussian noise. A view is a pure
function of ``(policy, image, draw_index)``.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from anomem.errors import ValidationError

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class AugmentPolicy:
    crop_scale: tuple[float, float] = (0.5, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    color_prob: float = 0.8
    blur_sigma: tuple[float, float] = (0.1, 1.0)
    blur_prob: float = 0.5
    noise_std: float = 0.03
    noise_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.crop_scale = tuple(float(v) for v in self.crop_scale)
        self.crop_ratio = tuple(float(v) for v in self.crop_ratio)
        self.blur_sigma = tuple(float(v) for v in self.blur_sigma)

    def validate(self) -> None:
        for name in ("flip_prob", "color_prob", "blur_prob", "noise_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {p}")
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi:
            raise ValidationError(f"crop_scale must satisfy 0 < min ≤ max, got {self.crop_scale}")
        if hi > 1.0:
            raise ValidationError(f"crop_scale max {hi} > 1 asks for a crop larger than the image")
        r0, r1 = self.crop_ratio
        if not 0.0 < r0 <= r1:
            raise ValidationError(f"crop_ratio must satisfy 0 < min ≤ max, got {self.crop_ratio}")
        s0, s1 = self.blur_sigma
        if not 0.0 <= s0 <= s1:
            raise ValidationError(f"blur_sigma must satisfy 0 ≤ min ≤ max, got {self.blur_sigma}")
        for name in ("brightness", "contrast", "saturation", "noise_std"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be ≥ 0")

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentPolicy":
        return cls(
            crop_scale=(1.0, 1.0),
            crop_ratio=(1.0, 1.0),
            flip_prob=0.0,
            color_prob=0.0,
            blur_prob=0.0,
            noise_prob=0.0,
            seed=seed,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def _bilinear_crop(img: np.ndarray, top: float, left: float, ch: float, cw: float) -> np.ndarray:
    h, w = img.shape[:2]
    ys = top + np.arange(h) * ((ch - 1) / (h - 1) if h > 1 else 0.0)
    xs = left + np.arange(w) * ((cw - 1) / (w - 1) if w > 1 else 0.0)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top_row = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot_row = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top_row * (1 - fy) + bot_row * fy


def _gray(img: np.ndarray) -> np.ndarray:
    if img.shape[2] == 3:
        return (img @ _LUMA)[:, :, None]
    return img.mean(axis=2, keepdims=True)


def sample_view(policy: AugmentPolicy, image: np.ndarray, draw_index: int) -> np.ndarray:
    """Draw one augmented view of an ``[H, W, C]`` image with values in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise ValidationError(f"image must be [H, W, C], got shape {img.shape}")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ValidationError("image values must lie in [0, 1]")
    policy.validate()
    rng = np.random.default_rng([policy.seed, int(draw_index)])
    h, w, _ = img.shape

    # area fraction and aspect ratio are relative to the image's own extent
    frac = rng.uniform(*policy.crop_scale)
    ratio = np.exp(rng.uniform(np.log(policy.crop_ratio[0]), np.log(policy.crop_ratio[1])))
    cw = min(float(w), w * np.sqrt(frac * ratio))
    ch = min(float(h), h * np.sqrt(frac / ratio))
    top = rng.uniform(0.0, h - ch)
    left = rng.uniform(0.0, w - cw)
    if ch < h or cw < w:
        img = _bilinear_crop(img, top, left, ch, cw)

    if rng.random() < policy.flip_prob:
        img = img[:, ::-1]

    if rng.random() < policy.color_prob:
        b = rng.uniform(1 - policy.brightness, 1 + policy.brightness)
        c = rng.uniform(1 - policy.contrast, 1 + policy.contrast)
        s = rng.uniform(1 - policy.saturation, 1 + policy.saturation)
        img = np.clip(img * max(b, 0.0), 0.0, 1.0)
        img = np.clip((img - img.mean()) * max(c, 0.0) + img.mean(), 0.0, 1.0)
        g = _gray(img)
        img = np.clip((img - g) * max(s, 0.0) + g, 0.0, 1.0)

    if rng.random() < policy.blur_prob:
        sigma = rng.uniform(*policy.blur_sigma)
        if sigma > 0:
            img = gaussian_filter(img, sigma=(sigma, sigma, 0.0), mode="reflect")

    if rng.random() < policy.noise_prob and policy.noise_std > 0:
        img = img + rng.normal(0.0, policy.noise_std, img.shape)

    return np.clip(img, 0.0, 1.0)


def worker_count() -> int:
    env = os.environ.get("ANOMEM_THREADS")
    cores = os.cpu_count() or 1
    if env:
        try:
            return max(1, min(int(env), cores))
        except ValueError:
            raise ValidationError(f"ANOMEM_THREADS must be an integer, got {env!r}") from None
    return cores


def augment_batch(
    policy: AugmentPolicy, images: np.ndarray, draw_indices, workers: int | None = None
) -> np.ndarray:
    """Augment ``images[k]`` with ``draw_indices[k]``; order of results is fixed."""
    draws = [int(d) for d in draw_indices]
    if len(draws) != len(images):
        raise ValidationError("need one draw index per image")
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(images) < 8:
        return np.stack([sample_view(policy, im, d) for im, d in zip(images, draws)])
    with ThreadPoolExecutor(max_workers=workers) as pool:
        views = list(pool.map(lambda a: sample_view(policy, *a), zip(images, draws)))
    return np.stack(views)
