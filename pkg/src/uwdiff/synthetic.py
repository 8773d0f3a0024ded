"""Procedural clean images and controlled degradations for desk-scale runs.

No real corpus ships with the package, so tests, scripts and the acceptance
suite build their pairs here.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .data import ImagePair

# per-channel attenuation (red fastest) and veiling-light colour for the water model
ATTENUATION = np.array([1.6, 0.55, 0.35])
VEIL = np.array([0.05, 0.38, 0.48])


def clean_image(rng: np.random.Generator, side: int) -> np.ndarray:
    """Colourful scene: smooth gradient background, a few shapes, mild texture."""
    yy, xx = np.mgrid[0:side, 0:side] / max(side - 1, 1)
    c0, c1 = rng.uniform(0.15, 0.95, 3), rng.uniform(0.15, 0.95, 3)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    ramp = (ramp - ramp.min()) / (np.ptp(ramp) + 1e-9)
    img = c0 * (1 - ramp[..., None]) + c1 * ramp[..., None]
    for _ in range(rng.integers(2, 5)):
        col = rng.uniform(0.0, 1.0, 3)
        cx, cy, r = rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85), rng.uniform(0.08, 0.3)
        if rng.random() < 0.5:
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 < r ** 2
        else:
            mask = (np.abs(xx - cx) < r) & (np.abs(yy - cy) < 0.6 * r)
        img[mask] = col
    freq = rng.uniform(4, 12)
    texture = 0.06 * np.sin(2 * np.pi * freq * (xx + 0.5 * yy) + rng.uniform(0, 2 * np.pi))
    img = img + texture[..., None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def underwater(clean: np.ndarray, severity: float, rng: np.random.Generator | None = None) -> np.ndarray:
    """Wavelength-dependent attenuation plus blue-green veiling light, lightly blurred."""
    depth = 0.3 + 1.2 * severity
    trans = np.exp(-ATTENUATION * depth)
    veil = VEIL if rng is None else np.clip(VEIL + rng.normal(0, 0.02, 3), 0, 1)
    img = clean * trans + veil * (1.0 - trans)
    img = ndimage.gaussian_filter(img, sigma=(0.6 * severity, 0.6 * severity, 0))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def blur_noise(clean: np.ndarray, severity: float, rng: np.random.Generator) -> np.ndarray:
    """Graded Gaussian blur (sigma up to 2.5 px) and additive noise (sigma up to 0.08)."""
    img = ndimage.gaussian_filter(clean, sigma=(2.5 * severity, 2.5 * severity, 0))
    img = img + rng.normal(0.0, 0.08 * severity, clean.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_pairs(n: int, side: int, seed: int = 0, kind: str = "underwater",
               severities: np.ndarray | None = None) -> list[ImagePair]:
    """``n`` pairs with ids ``syn0000``...; severities default to uniform [0.05, 1]."""
    rng = np.random.default_rng(seed)
    if severities is None:
        severities = rng.uniform(0.05, 1.0, n)
    degrade = {"underwater": underwater, "blur_noise": blur_noise}[kind]
    pairs = []
    for k in range(n):
        ref = clean_image(rng, side)
        raw = degrade(ref, float(severities[k]), rng)
        pairs.append(ImagePair(raw=raw, reference=ref, id=f"syn{k:04d}"))
    return pairs
