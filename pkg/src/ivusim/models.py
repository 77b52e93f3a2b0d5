"""Networks for the two refinement stages.

Stage I: a fully-convolutional refiner that cleans up 64x64 pseudo B-mode
polar patches, and a discriminator that scores each patch with the
probability it is refined (as opposed to drawn from the real corpus).
Stage II: a 4x upscaling generator (64 -> 256) with an input skip path and
its matching discriminator.

All tensors are NCHW with a single channel. Output activations pass through
a logistic sigmoid with the logit clamped to +-16, which keeps outputs
strictly inside (0, 1) in float32 and keeps the downstream log-losses
finite.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

LOGIT_CLAMP = 16.0


def _bounded_sigmoid(z: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))


def _check_image_batch(x: torch.Tensor, size: int, name: str) -> None:
    if x.dim() != 4 or x.shape[1] != 1 or x.shape[2] != size or x.shape[3] != size:
        raise ValueError(
            f"{name} expected input of shape (N, 1, {size}, {size}), "
            f"got {tuple(x.shape)}"
        )
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} input contains non-finite values")


def count_params(model: nn.Module) -> int:
    """Number of trainable scalars in the model."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


class ResidualBlock(nn.Module):
    """y = x + F(x) with F = conv-(norm)-relu-conv-(norm).

    Zeroing every parameter of F turns the block into an exact identity.
    """

    def __init__(self, channels: int, use_norm: bool = False):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = nn.BatchNorm2d(channels) if use_norm else nn.Identity()
        self.norm2 = nn.BatchNorm2d(channels) if use_norm else nn.Identity()

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return x + h


class Refiner(nn.Module):
    """Stage I generator: residual refinement at constant resolution.

    Entry 3x3 convolution to `width` maps, `n_blocks` residual blocks, exit
    1x1 convolution back to one map, bounded output. Spatial dims are
    preserved throughout.
    """

    def __init__(self, width: int = 64, n_blocks: int = 4, input_size: int = 64):
        super().__init__()
        if width < 1 or n_blocks < 1 or input_size < 1:
            raise ValueError("width, n_blocks and input_size must be positive")
        self.hparams = dict(width=width, n_blocks=n_blocks, input_size=input_size)
        self.input_size = input_size
        self.entry = nn.Conv2d(1, width, 3, padding=1)
        self.blocks = nn.ModuleList(ResidualBlock(width) for _ in range(n_blocks))
        self.exit = nn.Conv2d(width, 1, 1)

    def forward(self, x):
        _check_image_batch(x, self.input_size, "Refiner")
        h = F.relu(self.entry(x))
        for block in self.blocks:
            h = block(h)
        return _bounded_sigmoid(self.exit(h))


class RefinerDiscriminator(nn.Module):
    """Stage I discriminator: P(input is refined) per image.

    Five convolutions with two interleaved max-pooling layers
    (conv-conv-pool-conv-pool-conv-conv); widths scale off `base_width` as
    (w, 2w, 4w, 8w) with a final 1x1 map to a single logit plane. By default
    the patch logits are averaged into one per-image probability; with
    `patch_output` the per-patch probability map is returned instead.
    """

    def __init__(
        self,
        base_width: int = 64,
        input_size: int = 64,
        patch_output: bool = False,
    ):
        super().__init__()
        if input_size % 4 != 0:
            raise ValueError(f"input_size must be divisible by 4, got {input_size}")
        w = base_width
        self.hparams = dict(
            base_width=base_width, input_size=input_size, patch_output=patch_output
        )
        self.input_size = input_size
        self.patch_output = patch_output
        self.conv1 = nn.Conv2d(1, w, 3, padding=1)
        self.conv2 = nn.Conv2d(w, 2 * w, 3, padding=1)
        self.conv3 = nn.Conv2d(2 * w, 4 * w, 3, padding=1)
        self.conv4 = nn.Conv2d(4 * w, 8 * w, 3, padding=1)
        self.conv5 = nn.Conv2d(8 * w, 1, 1)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        _check_image_batch(x, self.input_size, "RefinerDiscriminator")
        h = F.leaky_relu(self.conv1(x), 0.2)
        h = self.pool(F.leaky_relu(self.conv2(h), 0.2))
        h = self.pool(F.leaky_relu(self.conv3(h), 0.2))
        h = F.leaky_relu(self.conv4(h), 0.2)
        logits = self.conv5(h)
        if self.patch_output:
            return _bounded_sigmoid(logits[:, 0])
        return _bounded_sigmoid(logits.mean(dim=(1, 2, 3)))


class Upscaler(nn.Module):
    """Stage II generator: 4x super-resolution of refined patches.

    Two max-pooling steps compress the input to a quarter-size bottleneck,
    a residual stack processes it, and four nearest-neighbor-plus-conv
    doublings restore and then quadruple the resolution. The raw input is
    concatenated back in (skip path) once the feature map returns to the
    input size, so fine structure does not have to squeeze through the
    bottleneck.
    """

    def __init__(
        self,
        width: int = 64,
        n_blocks: int = 4,
        input_size: int = 64,
        use_norm: bool = True,
    ):
        super().__init__()
        if input_size % 4 != 0:
            raise ValueError(f"input_size must be divisible by 4, got {input_size}")
        w = width
        self.hparams = dict(
            width=width, n_blocks=n_blocks, input_size=input_size, use_norm=use_norm
        )
        self.input_size = input_size
        self.output_size = 4 * input_size

        def norm():
            return nn.BatchNorm2d(w) if use_norm else nn.Identity()

        self.entry = nn.Conv2d(1, w, 3, padding=1)
        self.down_conv = nn.Conv2d(w, w, 3, padding=1)
        self.pool = nn.MaxPool2d(2)
        self.blocks = nn.ModuleList(
            ResidualBlock(w, use_norm=use_norm) for _ in range(n_blocks)
        )
        self.up1 = nn.Conv2d(w, w, 3, padding=1)
        self.up2 = nn.Conv2d(w, w, 3, padding=1)
        self.up3 = nn.Conv2d(w + 1, w, 3, padding=1)
        self.up4 = nn.Conv2d(w, w, 3, padding=1)
        self.norm_up1 = norm()
        self.norm_up2 = norm()
        self.norm_up3 = norm()
        self.norm_up4 = norm()
        self.exit = nn.Conv2d(w, 1, 1)

    @staticmethod
    def _double(h):
        return F.interpolate(h, scale_factor=2, mode="nearest")

    def forward(self, x, tap: dict | None = None):
        _check_image_batch(x, self.input_size, "Upscaler")
        h = F.relu(self.entry(x))
        h = self.pool(h)
        h = self.pool(F.relu(self.down_conv(h)))
        if tap is not None:
            tap["bottleneck"] = h
        for block in self.blocks:
            h = block(h)
        h = F.relu(self.norm_up1(self.up1(self._double(h))))
        h = F.relu(self.norm_up2(self.up2(self._double(h))))
        h = torch.cat([h, x], dim=1)
        h = F.relu(self.norm_up3(self.up3(self._double(h))))
        h = F.relu(self.norm_up4(self.up4(self._double(h))))
        return _bounded_sigmoid(self.exit(h))


class UpscalerDiscriminator(nn.Module):
    """Stage II discriminator: P(input is generated) for full-size images.

    Six stride-2 convolutions shrink the image by 64x (256 -> 4), then a
    1x1 convolution and a fully connected head produce one probability.
    """

    def __init__(self, base_width: int = 64, input_size: int = 256, use_norm: bool = True):
        super().__init__()
        if input_size % 64 != 0:
            raise ValueError(f"input_size must be divisible by 64, got {input_size}")
        w = base_width
        widths = [w, 2 * w, 4 * w, 8 * w, 8 * w, 8 * w]
        self.hparams = dict(
            base_width=base_width, input_size=input_size, use_norm=use_norm
        )
        self.input_size = input_size
        layers = []
        c_in = 1
        for i, c_out in enumerate(widths):
            layers.append(nn.Conv2d(c_in, c_out, 3, stride=2, padding=1))
            if use_norm and i > 0:
                layers.append(nn.BatchNorm2d(c_out))
            layers.append(nn.LeakyReLU(0.2))
            c_in = c_out
        self.down = nn.Sequential(*layers)
        self.reduce = nn.Conv2d(c_in, c_in, 1)
        head_side = input_size // 64
        self.head = nn.Linear(c_in * head_side * head_side, 1)

    def forward(self, x, tap: dict | None = None):
        _check_image_batch(x, self.input_size, "UpscalerDiscriminator")
        h = self.down(x)
        if tap is not None:
            tap["pre_head"] = h
        h = F.leaky_relu(self.reduce(h), 0.2)
        logit = self.head(h.flatten(1))
        return _bounded_sigmoid(logit[:, 0])
