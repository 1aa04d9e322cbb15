"""Texture attention from a CNN whose first layer is a learnable Gabor bank.

The Gabor layer stores only the five Gabor parameters per filter; its
convolution kernels are rebuilt from them on every forward pass, so the
layer can never drift away from the Gabor family during training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import upsample_bilinear


@dataclass
class GaborParams:
    """One Gabor filter: orientation, wavelength, phase, envelope std, aspect ratio."""

    theta: float
    lam: float
    psi: float
    sigma: float
    gamma: float
    kernel_size: int = 11

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd integer")
        for name in ("lam", "sigma", "gamma"):
            if float(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")


def _grid(kernel_size: int, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    r = kernel_size // 2
    coords = torch.arange(-r, r + 1, dtype=like.dtype, device=like.device)
    y, x = torch.meshgrid(coords, coords, indexing="ij")
    return x, y


def gabor_kernels(theta, lam, psi, sigma, gamma, kernel_size: int) -> torch.Tensor:
    """Vectorized Gabor kernels, shape ``n x k x k``, indexed ``[filter, row, col]``.

    Column offset is x, row offset is y; all parameter tensors have shape ``n``.
    """
    x, y = _grid(kernel_size, theta)
    cos_t = torch.cos(theta)[:, None, None]
    sin_t = torch.sin(theta)[:, None, None]
    xr = x * cos_t + y * sin_t
    yr = -x * sin_t + y * cos_t
    sigma = sigma[:, None, None]
    envelope = torch.exp(-(xr**2 + (gamma[:, None, None] * yr) ** 2) / (2 * sigma**2))
    carrier = torch.cos(2 * math.pi * xr / lam[:, None, None] + psi[:, None, None])
    return envelope * carrier


def gabor_kernel(p: GaborParams) -> torch.Tensor:
    """Single ``k x k`` kernel; differentiable if the fields are tensors requiring grad."""

    def t(v):
        return (v if torch.is_tensor(v) else torch.tensor(float(v), dtype=torch.get_default_dtype())).reshape(1)

    return gabor_kernels(t(p.theta), t(p.lam), t(p.psi), t(p.sigma), t(p.gamma), p.kernel_size)[0]


def init_filter_bank(
    n_filters: int,
    rng: np.random.Generator,
    kernel_size: int = 11,
    wavelengths: tuple[float, float] = (2.0, 16.0),
) -> list[GaborParams]:
    """Orientations at ``i*pi/n``; log-spaced wavelengths in a seeded order; random phase."""
    if n_filters < 1:
        raise ValueError("n_filters must be >= 1")
    thetas = np.arange(n_filters) * math.pi / n_filters
    lams = np.geomspace(wavelengths[0], wavelengths[1], n_filters)[rng.permutation(n_filters)]
    psis = rng.uniform(0.0, 2 * math.pi, n_filters)
    bank = []
    for th, lam, psi in zip(thetas, lams, psis):
        sigma = float(np.clip(0.56 * lam, 1.0, kernel_size / 3))
        bank.append(GaborParams(float(th), float(lam), float(psi), sigma, 0.5, kernel_size))
    return bank


class GaborConv2d(nn.Module):
    """Gabor-constrained convolution over the channel mean of the input.

    Positive parameters (wavelength, sigma, gamma) are stored as logs.
    """

    def __init__(self, in_channels: int, bank: list[GaborParams]):
        super().__init__()
        self.in_channels = in_channels
        self.kernel_size = bank[0].kernel_size
        as_t = lambda vals: torch.tensor(vals, dtype=torch.get_default_dtype())
        self.theta = nn.Parameter(as_t([p.theta for p in bank]))
        self.psi = nn.Parameter(as_t([p.psi for p in bank]))
        self.log_lam = nn.Parameter(torch.log(as_t([p.lam for p in bank])))
        self.log_sigma = nn.Parameter(torch.log(as_t([p.sigma for p in bank])))
        self.log_gamma = nn.Parameter(torch.log(as_t([p.gamma for p in bank])))
        self.last_kernels: torch.Tensor | None = None

    @property
    def out_channels(self) -> int:
        return self.theta.numel()

    def params(self) -> list[GaborParams]:
        vals = zip(
            self.theta.tolist(), self.log_lam.exp().tolist(), self.psi.tolist(),
            self.log_sigma.exp().tolist(), self.log_gamma.exp().tolist(),
        )
        return [GaborParams(*v, kernel_size=self.kernel_size) for v in vals]

    def kernels(self) -> torch.Tensor:
        return gabor_kernels(
            self.theta, self.log_lam.exp(), self.psi, self.log_sigma.exp(), self.log_gamma.exp(), self.kernel_size
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        k = self.kernels()
        self.last_kernels = k.detach()
        weight = k[:, None].expand(-1, self.in_channels, -1, -1) / self.in_channels
        return F.conv2d(x, weight, padding=self.kernel_size // 2)


class TextureAttention(nn.Module):
    """Gabor layer -> 2x pool -> 3x3 conv -> 1x1 conv -> sigmoid -> upsample."""

    def __init__(self, n_filters: int = 32, kernel_size: int = 11, hidden: int = 16, seed: int = 0,
                 wavelengths: tuple[float, float] = (2.0, 16.0)):
        super().__init__()
        bank = init_filter_bank(n_filters, np.random.default_rng(seed), kernel_size, wavelengths)
        self.gabor = GaborConv2d(3, bank)
        self.conv = nn.Conv2d(n_filters, hidden, 3, padding=1)
        self.head = nn.Conv2d(hidden, 1, 1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return texture_attention(self, images)


def texture_attention(net: TextureAttention, images: torch.Tensor) -> torch.Tensor:
    """``B x 3 x H x W`` images to ``B x 1 x H x W`` attention values in [0, 1]."""
    h, w = images.shape[-2:]
    x = F.leaky_relu(net.gabor(images), 0.1)
    if h % 2 == 0 and w % 2 == 0:
        x = F.max_pool2d(x, 2)
    x = F.relu(net.conv(x))
    t = torch.sigmoid(net.head(x))
    return upsample_bilinear(t, (h, w)).clamp(0.0, 1.0)
