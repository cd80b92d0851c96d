"""Nested U-net with four deep-supervision heads.

The grid of nodes follows the usual nested layout: five encoder blocks down
the first column, and decoder nodes node(i,j) that fuse an upsampled
node(i+1,j-1) with every earlier node in row i. Supervision heads sit on the
diagonal nodes node(4,2), node(3,3), node(2,4), node(1,5), so the four
probability maps come out at 1/8, 1/4, 1/2 and full input resolution; the
reduced maps are upsampled bilinearly back to input size when needed.

Batch normalization is used in the encoder column only, and dropout only on
the two deepest encoder blocks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError

N_ROWS = 5
CHANNEL_FACTORS = (1, 2, 4, 8, 16)
# (row, column) of the node feeding each supervision head, level 1 to 4.
HEAD_NODES = ((4, 2), (3, 3), (2, 4), (1, 5))


@dataclass
class ModelConfig:
    input_size: int = 256
    base_channels: int = 32
    dropout_rate: float = 0.3

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * f for f in CHANNEL_FACTORS)

    def validate(self) -> None:
        if self.input_size < 16 or self.input_size % 16 != 0:
            raise ConfigError(f"input_size must be a positive multiple of 16, got {self.input_size}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be positive, got {self.base_channels}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


@dataclass
class LevelOutputs:
    """The four head probability maps for one image, plus resized copies."""

    l1: np.ndarray
    l2: np.ndarray
    l3: np.ndarray
    l4: np.ndarray
    l1r: np.ndarray | None = None
    l2r: np.ndarray | None = None
    l3r: np.ndarray | None = None


class _EncoderBlock(nn.Module):
    """Two 3x3 conv + batch-norm + ReLU stages, optional dropout at the end."""

    def __init__(self, in_ch: int, out_ch: int, dropout: float = 0.0):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.dropout = nn.Dropout2d(dropout) if dropout > 0 else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.bn1(self.conv1(x)))
        x = F.relu(self.bn2(self.conv2(x)))
        if self.dropout is not None:
            x = self.dropout(x)
        return x


class _DecoderBlock(nn.Module):
    """Two 3x3 conv + ReLU stages (no batch norm outside the encoder)."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.conv1(x))
        return F.relu(self.conv2(x))


class SegModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        ch = config.channels

        self.pool = nn.MaxPool2d(2)
        in_ch = 1
        for i in range(1, N_ROWS + 1):
            dropout = config.dropout_rate if i >= 4 else 0.0
            self.add_module(f"node_{i}_1", _EncoderBlock(in_ch, ch[i - 1], dropout))
            in_ch = ch[i - 1]

        # node(i,j) takes cat(node(i,1..j-1), up(node(i+1,j-1))): j * ch[i] channels.
        for j in range(2, N_ROWS + 1):
            for i in range(1, N_ROWS - j + 2):
                c = ch[i - 1]
                self.add_module(f"up_{i}_{j}", nn.ConvTranspose2d(ch[i], c, kernel_size=2, stride=2))
                self.add_module(f"node_{i}_{j}", _DecoderBlock(j * c, c))

        for level, (i, _) in enumerate(HEAD_NODES, start=1):
            self.add_module(f"head_{level}", nn.Conv2d(ch[i - 1], 1, kernel_size=1))

    def node(self, i: int, j: int) -> nn.Module:
        return getattr(self, f"node_{i}_{j}")

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        if x.dim() != 4 or x.shape[-2] != self.config.input_size or x.shape[-1] != self.config.input_size:
            raise ShapeError(
                f"expected input of shape (N, 1, {self.config.input_size}, {self.config.input_size}), "
                f"got {tuple(x.shape)}"
            )
        grid: dict[tuple[int, int], torch.Tensor] = {}
        feature = x
        for i in range(1, N_ROWS + 1):
            if i > 1:
                feature = self.pool(feature)
            feature = self.node(i, 1)(feature)
            grid[(i, 1)] = feature

        for j in range(2, N_ROWS + 1):
            for i in range(1, N_ROWS - j + 2):
                up = getattr(self, f"up_{i}_{j}")(grid[(i + 1, j - 1)])
                row = [grid[(i, jj)] for jj in range(1, j)]
                grid[(i, j)] = self.node(i, j)(torch.cat(row + [up], dim=1))

        heads = []
        for level, (i, j) in enumerate(HEAD_NODES, start=1):
            heads.append(torch.sigmoid(getattr(self, f"head_{level}")(grid[(i, j)])))
        return tuple(heads)


def build_model(config: ModelConfig, seed: int) -> SegModel:
    """Construct a model with He-uniform (fan-in) init, deterministic in `seed`."""
    config.validate()
    model = SegModel(config)
    gen = torch.Generator().manual_seed(seed)
    for module in model.modules():
        if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_uniform_(module.weight, mode="fan_in", nonlinearity="relu", generator=gen)
            nn.init.zeros_(module.bias)
        elif isinstance(module, nn.BatchNorm2d):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)
    model.eval()
    return model


def count_params(model: SegModel) -> int:
    """Total trainable parameter elements (batch-norm scale/shift included)."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def resize_to_input(probability_map: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear upsampling of an (N, 1, h, w) map to (N, 1, size, size)."""
    if probability_map.shape[-1] == size and probability_map.shape[-2] == size:
        return probability_map
    return F.interpolate(probability_map, size=(size, size), mode="bilinear", align_corners=False)


def forward(model: SegModel, batch: np.ndarray, training_mode: bool = False) -> list[LevelOutputs]:
    """Run the model over a batch of (N, H, W) images in [0, 1].

    Returns one LevelOutputs per image with the reduced-resolution maps not
    yet resized; inference mode (the default) is deterministic.
    """
    arr = np.asarray(batch, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"expected a batch of 2-D images, got shape {arr.shape}")
    x = torch.from_numpy(arr).unsqueeze(1)
    was_training = model.training
    model.train(training_mode)
    try:
        with torch.no_grad():
            l1, l2, l3, l4 = model(x)
    finally:
        model.train(was_training)
    out = []
    for k in range(arr.shape[0]):
        out.append(LevelOutputs(
            l1=l1[k, 0].numpy(),
            l2=l2[k, 0].numpy(),
            l3=l3[k, 0].numpy(),
            l4=l4[k, 0].numpy(),
        ))
    return out


def resize_outputs(outputs: LevelOutputs) -> LevelOutputs:
    """Populate the full-resolution copies of the three reduced maps. Idempotent."""
    size = outputs.l4.shape[-1]
    resized = []
    for m in (outputs.l1, outputs.l2, outputs.l3):
        t = torch.from_numpy(np.ascontiguousarray(m, dtype=np.float32))[None, None]
        resized.append(resize_to_input(t, size)[0, 0].numpy())
    return LevelOutputs(
        l1=outputs.l1, l2=outputs.l2, l3=outputs.l3, l4=outputs.l4,
        l1r=resized[0], l2r=resized[1], l3r=resized[2],
    )
