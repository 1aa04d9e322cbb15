"""Dense feature extractors that return features at input resolution."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# VGG-16 conv widths per block
_VGG_BLOCKS = [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)]


@dataclass(frozen=True)
class BackboneConfig:
    architecture: str = "tiny-cnn"
    pretrained: bool = False
    dilation_block5: int = 2
    stride_pool4: int = 1
    width: int = 16

    def __post_init__(self):
        if self.architecture not in ("reference-vgg16", "tiny-cnn"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.dilation_block5 < 1:
            raise ValueError("dilation_block5 must be >= 1")
        if self.stride_pool4 not in (1, 2):
            raise ValueError("stride_pool4 must be 1 or 2")

    def to_dict(self) -> dict:
        return asdict(self)


def upsample_bilinear(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize with ``align_corners=True``.

    Accepts ``D x h x w`` or ``B x D x h x w``.
    """
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    if x.dim() == 3:
        return F.interpolate(x[None], size=size, mode="bilinear", align_corners=True)[0]
    return F.interpolate(x, size=size, mode="bilinear", align_corners=True)


def normalize_images(pixels: torch.Tensor, dtype: torch.dtype | None = None) -> torch.Tensor:
    """uint8 ``B x H x W x 3`` (or float in [0, 255]) to normalized ``B x 3 x H x W``."""
    x = pixels.permute(0, 3, 1, 2).to(dtype or torch.get_default_dtype()) / 255.0
    mean = x.new_tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
    std = x.new_tensor(IMAGENET_STD).view(1, 3, 1, 1)
    return (x - mean) / std


class VGG16Dilated(nn.Module):
    """Five VGG-16 conv blocks; pool4 stride configurable, block 5 dilated."""

    def __init__(self, dilation: int = 2, stride_pool4: int = 1):
        super().__init__()
        layers: list[nn.Module] = []
        in_ch = 3
        for b, (n_conv, width) in enumerate(_VGG_BLOCKS):
            dil = dilation if b == 4 else 1
            for i in range(n_conv):
                layers.append(nn.Conv2d(in_ch, width, 3, padding=dil, dilation=dil))
                in_ch = width
                # the final conv of block 5 is left linear so features keep their sign
                if not (b == 4 and i == n_conv - 1):
                    layers.append(nn.ReLU(inplace=True))
            if b < 3:
                layers.append(nn.MaxPool2d(3, stride=2, padding=1))
            elif b == 3:
                layers.append(nn.MaxPool2d(3, stride=stride_pool4, padding=1))
        self.features = nn.Sequential(*layers)
        self.stride = 8 * stride_pool4
        self.out_channels = 512

    def load_imagenet(self) -> None:
        from torchvision.models import VGG16_Weights, vgg16

        ref = vgg16(weights=VGG16_Weights.IMAGENET1K_V1).features
        src = [m for m in ref if isinstance(m, nn.Conv2d)]
        dst = [m for m in self.features if isinstance(m, nn.Conv2d)]
        for a, b in zip(src, dst):
            b.weight.data.copy_(a.weight.data)
            b.bias.data.copy_(a.bias.data)

    def forward(self, x):
        return self.features(x)


class TinyCNN(nn.Module):
    """Three conv layers with one 2x pooling; for tests and desk-scale runs."""

    def __init__(self, width: int = 16):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 16, 3, padding=1)
        self.conv2 = nn.Conv2d(16, 16, 3, padding=1)
        self.conv3 = nn.Conv2d(16, width, 3, padding=1)
        self.stride = 2
        self.out_channels = width

    def forward(self, x):
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.relu(self.conv2(x))
        return self.conv3(x)


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig = BackboneConfig()):
        super().__init__()
        self.config = config
        if config.architecture == "reference-vgg16":
            self.net = VGG16Dilated(config.dilation_block5, config.stride_pool4)
            if config.pretrained:
                self.net.load_imagenet()
        else:
            self.net = TinyCNN(config.width)

    @property
    def stride(self) -> int:
        return self.net.stride

    @property
    def out_channels(self) -> int:
        return self.net.out_channels

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return extract_features(self, images)


def extract_features(backbone: Backbone, images: torch.Tensor) -> torch.Tensor:
    """Compute ``B x D x H x W`` features for normalized ``B x 3 x H x W`` images.

    Raises:
        ValueError: if H or W is not a multiple of the backbone stride.
    """
    h, w = images.shape[-2:]
    s = backbone.stride
    if h % s or w % s:
        raise ValueError(f"image size {h}x{w} must be a multiple of {s} for {backbone.config.architecture}")
    return upsample_bilinear(backbone.net(images), (h, w))
