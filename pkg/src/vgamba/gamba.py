"""Gamba cell: 2D feature map -> row-major sequence (+ factorized RPE) -> non-causal Mamba -> 2D."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import ConfigurationError
from .ssm import MambaBlock, MambaBlockConfig


def to_sequence(x: torch.Tensor) -> torch.Tensor:
    """[B, C, H, W] -> [B, H*W, C], row-major over (h, w)."""
    return x.flatten(2).transpose(1, 2)


def from_sequence(seq: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Inverse of :func:`to_sequence`."""
    b, m, c = seq.shape
    if m != height * width:
        raise ConfigurationError(f"sequence length {m} != {height}x{width}")
    return seq.transpose(1, 2).reshape(b, c, height, width)


class Rpe2d(nn.Module):
    """Factorized learnable position encoding ``P[c, h, w] = r_h[c, h] + r_w[c, w]``.

    Zero-initialized, so a fresh cell is a pure content mixer.
    """

    def __init__(self, channels: int, height: int, width: int):
        super().__init__()
        self.r_h = nn.Parameter(torch.zeros(channels, height))
        self.r_w = nn.Parameter(torch.zeros(channels, width))

    @property
    def extents(self) -> tuple[int, int]:
        return self.r_h.shape[1], self.r_w.shape[1]

    def forward(self, height: int | None = None, width: int | None = None) -> torch.Tensor:
        return build_rpe(self, height, width)


def _resize_axis(r: torch.Tensor, size: int) -> torch.Tensor:
    if r.shape[1] == size:
        return r
    return F.interpolate(r.unsqueeze(0), size=size, mode="linear", align_corners=True).squeeze(0)


def build_rpe(rpe: Rpe2d, height: int | None = None, width: int | None = None) -> torch.Tensor:
    """Return the encoding as a [1, H*W, C] sequence, linearly resampled if extents differ."""
    r_h, r_w = rpe.r_h, rpe.r_w
    if height is not None:
        r_h = _resize_axis(r_h, height)
    if width is not None:
        r_w = _resize_axis(r_w, width)
    grid = r_h.unsqueeze(2) + r_w.unsqueeze(1)  # [C, H, W]
    return to_sequence(grid.unsqueeze(0))


@dataclass
class GambaCellConfig:
    channels: int
    height: int
    width: int
    state_size: int = 16
    expand: float = 2.0
    conv_kernel: int = 3
    use_rpe: bool = True
    use_asc: bool = True
    interpolate_rpe: bool = True

    @property
    def seq_len(self) -> int:
        return self.height * self.width


class GambaCell(nn.Module):
    """One non-causal Mamba block over the flattened map; a single SSM per cell.

    ASC is not part of the cell; the enclosing bottleneck applies it when
    ``cfg.use_asc`` is set.
    """

    def __init__(self, cfg: GambaCellConfig):
        super().__init__()
        self.cfg = cfg
        self.rpe = Rpe2d(cfg.channels, cfg.height, cfg.width) if cfg.use_rpe else None
        self.mamba = MambaBlock(MambaBlockConfig(cfg.channels, cfg.state_size, cfg.expand, cfg.conv_kernel))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _, _, h, w = x.shape
        if (h, w) != (self.cfg.height, self.cfg.width) and not self.cfg.interpolate_rpe:
            raise ConfigurationError(
                f"input extents {h}x{w} differ from cell extents {self.cfg.height}x{self.cfg.width}"
            )
        seq = to_sequence(x)
        if self.rpe is not None:
            seq = seq + build_rpe(self.rpe, h, w)
        return from_sequence(self.mamba(seq), h, w)


def gamba_cell_forward(cell: GambaCell, x: torch.Tensor) -> torch.Tensor:
    return cell(x)
