"""Attentive spatial context: coordinate pooling with a per-channel gate between axes."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def coordinate_pool(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean over width -> [B,C,H,1] and mean over height -> [B,C,1,W]."""
    return x.mean(dim=3, keepdim=True), x.mean(dim=2, keepdim=True)


class ASC(nn.Module):
    """``X * sigmoid(alpha * f_h + (1 - alpha) * f_w)``.

    ``f_h`` and ``f_w`` come from a shared 1x1 reduction (C -> max(8, C // r), SiLU)
    followed by axis-specific 1x1 expansions and axis biases ``b_h``, ``b_w``.
    ``alpha = sigmoid(alpha_raw)`` per channel.
    """

    def __init__(self, channels: int, reduction: int = 32, min_hidden: int = 8):
        super().__init__()
        hidden = max(min_hidden, channels // reduction)
        self.hidden = hidden
        self.reduce = nn.Conv2d(channels, hidden, 1)
        self.conv_h = nn.Conv2d(hidden, channels, 1, bias=False)
        self.conv_w = nn.Conv2d(hidden, channels, 1, bias=False)
        self.b_h = nn.Parameter(torch.zeros(channels))
        self.b_w = nn.Parameter(torch.zeros(channels))
        self.alpha_raw = nn.Parameter(torch.zeros(channels))

    @property
    def alpha(self) -> torch.Tensor:
        return torch.sigmoid(self.alpha_raw)

    def descriptors(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x_h, x_w = coordinate_pool(x)
        f_h = self.conv_h(F.silu(self.reduce(x_h))) + self.b_h.view(1, -1, 1, 1)
        f_w = self.conv_w(F.silu(self.reduce(x_w))) + self.b_w.view(1, -1, 1, 1)
        return f_h, f_w

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        f_h, f_w = self.descriptors(x)
        a = self.alpha.view(1, -1, 1, 1)
        return torch.sigmoid(a * f_h + (1 - a) * f_w)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gate(x)


def asc_forward(module: ASC, x: torch.Tensor) -> torch.Tensor:
    return module(x)
