"""
Feature-recovery networks.

- SRGANGenerator: pix2pix-style residual generator with the pixel up-sampling
  layers removed, so the output has the input's resolution.
- Discriminator: VGG-style stack of strided convolutions with a dense head.
- SpectralDiscriminator: the same idea with vertical 1-D filters, scoring each
  A-scan and averaging the scores per image.
- ResUNetA: 1-D U-Net whose blocks sum parallel dilated-convolution branches with
  an identity skip; every A-scan is processed independently.
"""

from dataclasses import dataclass
from collections import OrderedDict
from typing import Dict, List, Mapping, Sequence, Tuple

import torch
import torch.nn as nn

from src.config import RunConfig
from src.errors import DataFormatError, DomainError, ShapeError

RANGE_TOL = 1e-6
MAX_BRANCHES = 8
LEAKY_SLOPE = 0.2


@dataclass
class SRGANGeneratorConfig:
    n_res_blocks: int = 4
    channels: int = 16
    kernel: int = 3
    output_activation: str = "tanh"

    def __post_init__(self):
        if self.n_res_blocks < 1 or self.channels < 1:
            raise DomainError("SRGAN generator needs n_res_blocks >= 1 and channels >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise DomainError(f"Kernel size must be odd, got {self.kernel}")
        if self.output_activation != "tanh":
            raise DomainError(f"Unsupported output activation: {self.output_activation}")


@dataclass
class DiscriminatorConfig:
    conv_blocks: Tuple[Tuple[int, int], ...] = ((16, 1), (16, 2), (32, 1), (32, 2), (64, 1), (64, 2))
    dense_units: int = 64
    input_shape: Tuple[int, ...] = (256, 64)

    def __post_init__(self):
        if not self.conv_blocks or not any(stride > 1 for _, stride in self.conv_blocks):
            raise DomainError("Discriminator needs at least one strided conv block")
        if any(c < 1 or s < 1 for c, s in self.conv_blocks) or self.dense_units < 1:
            raise DomainError("Discriminator channels, strides and dense units must be >= 1")


@dataclass
class ResUNetAConfig:
    depth: int = 3
    base_channels: int = 8
    dilation_sets: Tuple[Tuple[int, ...], ...] = ((1, 3, 15, 31), (1, 3, 15), (1, 3), (1,))
    kernel_len: int = 3

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1:
            raise DomainError("ResUNet-a needs depth >= 1 and base_channels >= 1")
        if len(self.dilation_sets) != self.depth + 1:
            raise DomainError(f"Need {self.depth + 1} dilation sets (one per level plus the bridge), got {len(self.dilation_sets)}")
        for rates in self.dilation_sets:
            if not rates or len(rates) > MAX_BRANCHES or any(d < 1 for d in rates):
                raise DomainError(f"Each level needs 1..{MAX_BRANCHES} dilation rates >= 1, got {rates}")
        if self.kernel_len < 1 or self.kernel_len % 2 == 0:
            raise DomainError(f"kernel_len must be odd, got {self.kernel_len}")


def dilation_sets_for(rates: Sequence[int], depth: int, length: int, kernel_len: int) -> Tuple[Tuple[int, ...], ...]:
    """Per-level dilation rates, keeping only those whose dilated kernel fits the level's length."""
    sets = []
    for level in range(depth + 1):
        level_len = length >> level
        fitting = tuple(d for d in rates if (kernel_len - 1) * d + 1 <= level_len)[:MAX_BRANCHES]
        sets.append(fitting or (1,))
    return tuple(sets)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# Spatial generator
# ---------------------------------------------------------------------------

class ResidualBlock(nn.Module):
    """conv-BN-PReLU-conv-BN plus identity skip."""

    def __init__(self, channels: int, kernel: int):
        super().__init__()
        pad = kernel // 2
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, kernel, padding=pad),
            nn.BatchNorm2d(channels),
            nn.PReLU(channels),
            nn.Conv2d(channels, channels, kernel, padding=pad),
            nn.BatchNorm2d(channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


class SRGANGenerator(nn.Module):
    def __init__(self, config: SRGANGeneratorConfig):
        super().__init__()
        self.config = config
        c, k = config.channels, config.kernel
        self.head = nn.Sequential(nn.Conv2d(1, c, k, padding=k // 2), nn.PReLU(c))
        self.blocks = nn.Sequential(*[ResidualBlock(c, k) for _ in range(config.n_res_blocks)])
        self.post = nn.Sequential(nn.Conv2d(c, c, k, padding=k // 2), nn.BatchNorm2d(c))
        self.tail = nn.Conv2d(c, 1, k, padding=k // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 1:
            raise ShapeError(f"Generator expects [N, 1, H, W], got {tuple(x.shape)}")
        if x.numel() and (x.min() < -1 - RANGE_TOL or x.max() > 1 + RANGE_TOL):
            raise DomainError("Generator input must be train-normalized to [-1, 1]")
        head = self.head(x)
        features = self.post(self.blocks(head)) + head
        return torch.tanh(self.tail(features))


# ---------------------------------------------------------------------------
# Discriminators
# ---------------------------------------------------------------------------

def _conv_out(length: int, kernel: int, stride: int) -> int:
    return (length + 2 * (kernel // 2) - kernel) // stride + 1


class Discriminator(nn.Module):
    """VGG-style 2-D discriminator: per-image probability in (0, 1)."""

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        layers: List[nn.Module] = []
        in_ch = 1
        h, w = config.input_shape
        for i, (out_ch, stride) in enumerate(config.conv_blocks):
            layers.append(nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1))
            if i > 0:
                layers.append(nn.BatchNorm2d(out_ch))
            layers.append(nn.LeakyReLU(LEAKY_SLOPE))
            h, w = _conv_out(h, 3, stride), _conv_out(w, 3, stride)
            in_ch = out_ch
        self.features = nn.Sequential(*layers)
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(in_ch * h * w, config.dense_units),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Linear(config.dense_units, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        expected = (1, *self.config.input_shape)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"Discriminator expects [N, {', '.join(map(str, expected))}], got {tuple(x.shape)}")
        return torch.sigmoid(self.head(self.features(x))).view(-1)


class SpectralDiscriminator(nn.Module):
    """
    1-D discriminator over A-scan fringes. Input is [N, W, L] (W A-scans of
    length L per image); every A-scan is scored and the scores are averaged per image.
    """

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        layers: List[nn.Module] = []
        in_ch = 1
        (length,) = config.input_shape
        for i, (out_ch, stride) in enumerate(config.conv_blocks):
            layers.append(nn.Conv1d(in_ch, out_ch, 3, stride=stride, padding=1))
            if i > 0:
                layers.append(nn.BatchNorm1d(out_ch))
            layers.append(nn.LeakyReLU(LEAKY_SLOPE))
            length = _conv_out(length, 3, stride)
            in_ch = out_ch
        self.features = nn.Sequential(*layers)
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(in_ch * length, config.dense_units),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Linear(config.dense_units, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        (length,) = self.config.input_shape
        if x.dim() != 3 or x.shape[-1] != length:
            raise ShapeError(f"Spectral discriminator expects [N, W, {length}], got {tuple(x.shape)}")
        n, w, _ = x.shape
        scores = torch.sigmoid(self.head(self.features(x.reshape(n * w, 1, length))))
        return scores.view(n, w).mean(dim=1)


# ---------------------------------------------------------------------------
# Spectral generator
# ---------------------------------------------------------------------------

class ResBlockA(nn.Module):
    """Parallel branches of (BN -> ReLU -> dilated conv1d) x 2, summed with the identity."""

    def __init__(self, channels: int, dilations: Sequence[int], kernel: int):
        super().__init__()
        self.branches = nn.ModuleList()
        for d in dilations:
            pad = d * (kernel - 1) // 2
            self.branches.append(nn.Sequential(
                nn.BatchNorm1d(channels),
                nn.ReLU(),
                nn.Conv1d(channels, channels, kernel, dilation=d, padding=pad),
                nn.BatchNorm1d(channels),
                nn.ReLU(),
                nn.Conv1d(channels, channels, kernel, dilation=d, padding=pad),
            ))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = x
        for branch in self.branches:
            out = out + branch(x)
        return out


class ResUNetA(nn.Module):
    def __init__(self, config: ResUNetAConfig):
        super().__init__()
        self.config = config
        k = config.kernel_len
        widths = [config.base_channels * 2 ** level for level in range(config.depth + 1)]

        self.stem = nn.Conv1d(1, widths[0], 1)
        self.encoders = nn.ModuleList()
        self.downs = nn.ModuleList()
        for level in range(config.depth):
            self.encoders.append(ResBlockA(widths[level], config.dilation_sets[level], k))
            self.downs.append(nn.Conv1d(widths[level], widths[level + 1], k, stride=2, padding=k // 2))
        self.bridge = ResBlockA(widths[-1], config.dilation_sets[-1], k)

        self.ups = nn.ModuleList()
        self.combines = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for level in reversed(range(config.depth)):
            self.ups.append(nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv1d(widths[level + 1], widths[level], k, padding=k // 2),
            ))
            self.combines.append(nn.Conv1d(2 * widths[level], widths[level], 1))
            self.decoders.append(ResBlockA(widths[level], config.dilation_sets[level], k))
        self.head = nn.Conv1d(widths[0], 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: [N, L] or [N, 1, L] A-scans; output has the input's shape."""
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(1)
        if x.dim() != 3 or x.shape[1] != 1:
            raise ShapeError(f"ResUNet-a expects [N, L] or [N, 1, L], got {tuple(x.shape)}")
        if x.shape[-1] % (2 ** self.config.depth):
            raise DomainError(f"A-scan length {x.shape[-1]} is not divisible by 2^{self.config.depth}")

        h = self.stem(x)
        skips = []
        for encoder, down in zip(self.encoders, self.downs):
            h = encoder(h)
            skips.append(h)
            h = down(h)
        h = self.bridge(h)
        for up, combine, decoder in zip(self.ups, self.combines, self.decoders):
            h = combine(torch.cat([up(h), skips.pop()], dim=1))
            h = decoder(h)
        out = torch.tanh(self.head(h))
        return out.squeeze(1) if squeeze else out


class SpectralGenerator(nn.Module):
    """Applies a ResUNetA to every A-scan of [N, W, L] fringe images."""

    def __init__(self, config: ResUNetAConfig):
        super().__init__()
        self.config = config
        self.net = ResUNetA(config)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3:
            raise ShapeError(f"Spectral generator expects [N, W, L], got {tuple(x.shape)}")
        n, w, length = x.shape
        return self.net(x.reshape(n * w, length)).view(n, w, length)


# ---------------------------------------------------------------------------
# Construction from a RunConfig
# ---------------------------------------------------------------------------

def generator_config(config: RunConfig) -> SRGANGeneratorConfig:
    return SRGANGeneratorConfig(
        n_res_blocks=config["model.res_blocks"], channels=config["model.channels"], kernel=config["model.kernel"],
    )


def discriminator_config(config: RunConfig, input_shape: Tuple[int, ...]) -> DiscriminatorConfig:
    channels, strides = config["model.disc_channels"], config["model.disc_strides"]
    if len(channels) != len(strides):
        raise DomainError("model.disc_channels and model.disc_strides must have the same length")
    return DiscriminatorConfig(
        conv_blocks=tuple(zip(channels, strides)), dense_units=config["model.dense_units"], input_shape=tuple(input_shape),
    )


def resuneta_config(config: RunConfig, length: int) -> ResUNetAConfig:
    depth, kernel = config["model.unet_depth"], config["model.unet_kernel"]
    return ResUNetAConfig(
        depth=depth,
        base_channels=config["model.unet_base_channels"],
        dilation_sets=dilation_sets_for(config["model.unet_dilations"], depth, length, kernel),
        kernel_len=kernel,
    )


def build_models(config: RunConfig, domain: str, sample_shape: Tuple[int, ...]) -> Tuple[nn.Module, nn.Module]:
    """
    Generator and discriminator for one training domain.

    sample_shape is a single training sample's shape: [1, H, W] for spatial,
    [W, L] for spectral.
    """
    if domain == "spatial":
        _, h, w = sample_shape
        return SRGANGenerator(generator_config(config)), Discriminator(discriminator_config(config, (h, w)))
    if domain == "spectral":
        _, length = sample_shape
        generator = SpectralGenerator(resuneta_config(config, length))
        return generator, SpectralDiscriminator(discriminator_config(config, (length,)))
    raise DomainError(f"Unknown domain: {domain}")


# ---------------------------------------------------------------------------
# Named parameter dicts (checkpoint payloads)
# ---------------------------------------------------------------------------

def model_state(generator: nn.Module, discriminator: nn.Module) -> Dict[str, torch.Tensor]:
    """Parameters and buffers of both networks under `generator.` / `discriminator.` prefixes."""
    state = OrderedDict()
    for prefix, model in (("generator", generator), ("discriminator", discriminator)):
        for name, tensor in model.state_dict().items():
            state[f"{prefix}.{name}"] = tensor.detach().cpu()
    return state


def load_model_state(model: nn.Module, tensors: Mapping[str, torch.Tensor], prefix: str):
    """
    Copy `prefix.*` entries into `model`, casting each one back to the dtype of
    the tensor it replaces (CKP1 stores everything as float32).
    """
    target = model.state_dict()
    lead = prefix + "."
    missing = [name for name in target if lead + name not in tensors]
    if missing:
        raise DataFormatError(f"Checkpoint lacks {len(missing)} {prefix} entries, e.g. {lead + missing[0]}")

    restored = OrderedDict()
    for name, current in target.items():
        value = tensors[lead + name]
        if tuple(value.shape) != tuple(current.shape):
            raise ShapeError(f"{lead + name}: checkpoint shape {tuple(value.shape)} != model shape {tuple(current.shape)}")
        restored[name] = value.to(current.dtype)
    model.load_state_dict(restored)
