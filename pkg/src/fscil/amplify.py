"""Amplified distillation data made by mixing pairs of few-shot images."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError

SCHEMES = ("cutmix", "mixup", "cutout", "none")


@dataclass
class AmplifyConfig:
    scheme: str = "cutmix"
    factor: int = 16
    beta_a: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if int(self.factor) != self.factor or self.factor < 1:
            raise ConfigurationError("factor must be a positive integer")
        if self.beta_a <= 0:
            raise ConfigurationError("beta_a must be positive")


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DataError(f"cannot mix images of shapes {a.shape} and {b.shape}")


def _box(h: int, w: int, cut_h: int, cut_w: int, cy: int, cx: int) -> tuple[int, int, int, int]:
    y1 = int(np.clip(cy - cut_h // 2, 0, h))
    x1 = int(np.clip(cx - cut_w // 2, 0, w))
    y2 = int(np.clip(cy - cut_h // 2 + cut_h, 0, h))
    x2 = int(np.clip(cx - cut_w // 2 + cut_w, 0, w))
    return y1, y2, x1, x2


def cutmix_with(image_a: np.ndarray, image_b: np.ndarray, lam: float, cy: int, cx: int) -> tuple[np.ndarray, float]:
    """Paste a floor(rH) x floor(rW) box (r = sqrt(1 - lam)) of b, centred at (cy, cx), into a."""
    _check_pair(image_a, image_b)
    h, w = image_a.shape[:2]
    r = np.sqrt(1.0 - lam)
    y1, y2, x1, x2 = _box(h, w, int(np.floor(r * h)), int(np.floor(r * w)), cy, cx)
    out = image_a.copy()
    out[y1:y2, x1:x2] = image_b[y1:y2, x1:x2]
    return out, 1.0 - (y2 - y1) * (x2 - x1) / (h * w)


def cutmix(image_a: np.ndarray, image_b: np.ndarray, rng: np.random.Generator,
           beta_a: float = 1.0) -> tuple[np.ndarray, float]:
    _check_pair(image_a, image_b)
    h, w = image_a.shape[:2]
    lam = rng.beta(beta_a, beta_a)
    return cutmix_with(image_a, image_b, lam, int(rng.integers(h)), int(rng.integers(w)))


def mixup(image_a: np.ndarray, image_b: np.ndarray, rng: np.random.Generator,
          beta_a: float = 1.0) -> tuple[np.ndarray, float]:
    _check_pair(image_a, image_b)
    lam = float(rng.beta(beta_a, beta_a))
    return lam * image_a + (1.0 - lam) * image_b, lam


def cutout_with(image: np.ndarray, cut_h: int, cut_w: int, cy: int, cx: int) -> np.ndarray:
    h, w = image.shape[:2]
    y1, y2, x1, x2 = _box(h, w, cut_h, cut_w, cy, cx)
    out = image.copy()
    out[y1:y2, x1:x2] = 0.0
    return out


def cutout(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Zero one (H/2 x W/2) rectangle at a random centre, clipped to the image."""
    h, w = image.shape[:2]
    return cutout_with(image, h // 2, w // 2, int(rng.integers(h)), int(rng.integers(w)))


def amplify(images: np.ndarray, cfg: AmplifyConfig) -> np.ndarray:
    """Return ``cfg.factor * len(images)`` unlabeled images.

    Every output index draws from its own generator keyed on (seed, index),
    so the result does not depend on evaluation order.
    """
    images = np.asarray(images, dtype=np.float64)
    n = len(images)
    if cfg.scheme == "none":
        return np.concatenate([images] * cfg.factor)
    if n < 2 and cfg.scheme in ("cutmix", "mixup"):
        raise ConfigurationError("mixing needs at least two source images")
    if n < 1:
        raise ConfigurationError("nothing to amplify")
    out = np.empty((cfg.factor * n,) + images.shape[1:])
    for i in range(len(out)):
        rng = np.random.default_rng([cfg.seed, i])
        a = images[rng.integers(n)]
        if cfg.scheme == "cutout":
            out[i] = cutout(a, rng)
            continue
        b = images[rng.integers(n)]
        if cfg.scheme == "cutmix":
            out[i] = cutmix(a, b, rng, cfg.beta_a)[0]
        else:
            out[i] = mixup(a, b, rng, cfg.beta_a)[0]
    return out
