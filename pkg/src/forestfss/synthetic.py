"""Procedural rasters for desk-scale checks.

Forest is a high-frequency oriented grating; background is smooth colour
noise that includes forest-like hues, so colour alone cannot separate the
classes. Train and test domains use different orientations, wavelengths
and palettes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .dataio import Geography, LabeledTile


@dataclass(frozen=True)
class TextureDomain:
    geography: Geography
    theta_range: tuple[float, float]
    wavelength_range: tuple[float, float]
    forest_rgb: tuple[int, int, int]
    background_palette: tuple[tuple[int, int, int], ...]
    water_rgb: tuple[int, int, int] = (30, 50, 110)
    amplitude: float = 40.0


TRAIN_DOMAIN = TextureDomain(
    Geography.TRAIN,
    theta_range=(0.0, math.pi / 2),
    wavelength_range=(3.0, 4.5),
    forest_rgb=(40, 110, 45),
    background_palette=((150, 130, 90), (60, 120, 60), (170, 170, 160), (100, 140, 70)),
)

TEST_DOMAIN = TextureDomain(
    Geography.TEST,
    theta_range=(math.pi / 2, math.pi),
    wavelength_range=(4.0, 6.0),
    forest_rgb=(50, 90, 60),
    background_palette=((120, 120, 110), (55, 95, 65), (180, 160, 120), (90, 110, 80)),
)


def smooth_noise(rng: np.random.Generator, side: int, scale: float) -> np.ndarray:
    """Gaussian-filtered white noise rescaled to [0, 1]."""
    f = ndimage.gaussian_filter(rng.standard_normal((side, side)), scale, mode="wrap")
    lo, hi = f.min(), f.max()
    return (f - lo) / (hi - lo) if hi > lo else np.zeros_like(f)


def blob_mask(rng: np.random.Generator, side: int, coverage: float, scale: float | None = None) -> np.ndarray:
    field = smooth_noise(rng, side, scale or side / 8)
    return field >= np.quantile(field, 1.0 - coverage)


def grating(side: int, theta: float, wavelength: float, phase: float) -> np.ndarray:
    y, x = np.mgrid[:side, :side].astype(np.float64)
    return np.cos(2 * math.pi * (x * math.cos(theta) + y * math.sin(theta)) / wavelength + phase)


def make_tile(
    rng: np.random.Generator,
    domain: TextureDomain,
    side: int = 64,
    water: bool = False,
    label_dilation: int = 0,
    source_id: str = "synthetic",
) -> LabeledTile:
    """One tile: class 1 forest texture, class 2 water (optional), class 0 background.

    ``label_dilation`` grows the annotated forest mask beyond the textured
    region to imitate coarse manual annotation.
    """
    weights = rng.dirichlet(np.ones(len(domain.background_palette)) * 0.7)
    palette = np.array(domain.background_palette, dtype=np.float64)
    mix = np.stack([smooth_noise(rng, side, side / 6) for _ in palette])
    mix = mix * weights[:, None, None]
    mix /= mix.sum(axis=0, keepdims=True) + 1e-12
    img = np.einsum("kyx,kc->yxc", mix, palette)
    img += (smooth_noise(rng, side, side / 10)[..., None] - 0.5) * 30.0

    forest = blob_mask(rng, side, rng.uniform(0.25, 0.55))
    theta = rng.uniform(*domain.theta_range)
    lam = rng.uniform(*domain.wavelength_range)
    tex = grating(side, theta, lam, rng.uniform(0, 2 * math.pi))
    tex = tex * (0.7 + 0.3 * smooth_noise(rng, side, 3.0))
    forest_img = np.array(domain.forest_rgb, dtype=np.float64) + domain.amplitude * tex[..., None] * np.array([0.6, 1.0, 0.6])
    img = np.where(forest[..., None], forest_img, img)

    mask = forest.astype(np.uint8)
    if water:
        lake = blob_mask(rng, side, rng.uniform(0.1, 0.25)) & ~forest
        img = np.where(lake[..., None], np.array(domain.water_rgb, dtype=np.float64), img)
        mask[lake] = 2
    img += rng.normal(0.0, 4.0, img.shape)
    if label_dilation > 0:
        grown = ndimage.binary_dilation(forest, iterations=label_dilation) & (mask != 2)
        mask[grown] = 1
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return LabeledTile(pixels, mask, source_id, domain.geography)


def make_pool(
    n: int,
    domain: TextureDomain,
    side: int = 64,
    seed: int = 0,
    water: bool = False,
    label_dilation: int = 0,
) -> list[LabeledTile]:
    rng = np.random.default_rng(seed)
    tag = domain.geography.value
    return [
        make_tile(rng, domain, side, water, label_dilation, source_id=f"{tag}-{seed}-{i:05d}") for i in range(n)
    ]


def noisy_disk(
    rng: np.random.Generator,
    side: int = 96,
    noise_fraction: float = 0.05,
    harmonics: int = 6,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Green disk on grey with a boundary-noise annotation.

    Returns ``(image, clean_mask, noisy_mask)``. The annotated boundary is
    the true circle displaced radially, inwards and outwards, by a smooth
    random curve scaled so that the annotation disagrees with the clean
    mask on ``noise_fraction`` of the disk's pixel count.
    """
    cy, cx = rng.uniform(0.4, 0.6, 2) * side
    radius = rng.uniform(0.2, 0.3) * side
    y, x = np.mgrid[:side, :side]
    r = np.hypot(y - cy, x - cx)
    phi = np.arctan2(y - cy, x - cx)
    clean = r < radius
    fg = np.array([50, 150, 50], dtype=np.float64)
    bg = np.array([128, 128, 128], dtype=np.float64)
    img = np.where(clean[..., None], fg, bg) + rng.normal(0.0, 8.0, (side, side, 3))
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    amp = rng.normal(size=harmonics)
    shift = rng.uniform(0, 2 * math.pi, harmonics)
    wobble = sum(amp[i] * np.cos((i + 2) * phi + shift[i]) for i in range(harmonics))
    target = noise_fraction * clean.sum()
    lo, hi = 0.0, radius
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        if ((r < radius + mid * wobble) ^ clean).sum() < target:
            lo = mid
        else:
            hi = mid
    noisy = r < radius + hi * wobble
    return image, clean.astype(np.uint8), noisy.astype(np.uint8)
