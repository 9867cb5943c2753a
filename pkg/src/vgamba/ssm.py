"""Selective state-space core: ZOH discretization, causal and non-causal scans.

Shapes follow the usual Mamba naming: ``B`` batch, ``M`` sequence length,
``E`` inner channel width, ``N`` state size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

# |A*dt| below this uses the series expansion of expm1(z)/z
ZOH_SERIES_THRESHOLD = 1e-6
DENSE_ORACLE_MAX_LEN = 64


@dataclass
class DiscreteStep:
    """Per-token discrete transition ``a_bar`` and input matrix ``b_bar``, both [..., E, N]."""

    a_bar: torch.Tensor
    b_bar: torch.Tensor

    def input_term(self, x: torch.Tensor) -> torch.Tensor:
        """``b_bar * x`` broadcast over the state axis; ``x`` is [..., E]."""
        return self.b_bar * x.unsqueeze(-1)


def _expm1_over_z(z: torch.Tensor) -> torch.Tensor:
    small = z.abs() < ZOH_SERIES_THRESHOLD
    safe_z = torch.where(small, torch.ones_like(z), z)
    exact = torch.expm1(safe_z) / safe_z
    series = 1.0 + z / 2.0 + z * z / 6.0
    return torch.where(small, series, exact)


def discretize_zoh(A: torch.Tensor, B: torch.Tensor | float, delta: torch.Tensor) -> DiscreteStep:
    """Zero-order hold: ``a_bar = exp(A dt)``, ``b_bar = (exp(A dt) - 1) / A * B``.

    ``A`` is [E, N] (diagonal per channel), ``delta`` is [..., E] and ``B`` is
    [..., N] or a scalar. The ``A -> 0`` limit gives ``b_bar = dt * B``.
    """
    if not torch.all(delta > 0):
        raise ValueError("discretize_zoh requires delta > 0 elementwise")
    dA = delta.unsqueeze(-1) * A
    a_bar = torch.exp(dA)
    if not torch.is_tensor(B):
        B = torch.as_tensor(B, dtype=dA.dtype)
    elif B.dim() > 0:
        B = B.unsqueeze(-2)
    b_bar = delta.unsqueeze(-1) * _expm1_over_z(dA) * B
    return DiscreteStep(a_bar, b_bar)


def _dt_bias_init(E: int, dt_min: float, dt_max: float, generator: torch.Generator | None) -> torch.Tensor:
    u = torch.rand(E, generator=generator, dtype=torch.float64)
    dt = torch.exp(u * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
    # inverse softplus
    return (dt + torch.log(-torch.expm1(-dt))).float()


class SelectiveSSM(nn.Module):
    """Parameters of one selective SSM with diagonal ``A = -exp(a_log)``."""

    def __init__(self, inner: int, state: int = 16, dt_min: float = 1e-3, dt_max: float = 1e-1):
        super().__init__()
        if inner < 1 or state < 1:
            raise ValueError("inner width and state size must be >= 1")
        self.inner = inner
        self.state = state
        a = torch.arange(1, state + 1, dtype=torch.float32).repeat(inner, 1)
        self.a_log = nn.Parameter(torch.log(a))
        self.d_skip = nn.Parameter(torch.ones(inner))
        self.b_proj = nn.Linear(inner, state)
        self.c_proj = nn.Linear(inner, state)
        self.dt_weight = nn.Parameter(0.1 * torch.randn(inner))
        self.dt_bias = nn.Parameter(_dt_bias_init(inner, dt_min, dt_max, None))

    @property
    def A(self) -> torch.Tensor:
        return -torch.exp(self.a_log)

    def forward(self, x: torch.Tensor, causal: bool = False) -> torch.Tensor:
        return ssm_scan_causal(self, x) if causal else ssm_scan_noncausal(self, x)


def selective_parameters(x: torch.Tensor, params: SelectiveSSM):
    """Input-dependent ``(B_t, C_t, delta_t)`` with shapes [B,M,N], [B,M,N], [B,M,E]."""
    B_t = params.b_proj(x)
    C_t = params.c_proj(x)
    delta_t = F.softplus(x * params.dt_weight + params.dt_bias)
    return B_t, C_t, delta_t


def _prepare(params: SelectiveSSM, x: torch.Tensor):
    B_t, C_t, delta_t = selective_parameters(x, params)
    step = discretize_zoh(params.A, B_t, delta_t)
    return step.a_bar, step.input_term(x), C_t


def _recurrence(a_bar: torch.Tensor, bx: torch.Tensor) -> torch.Tensor:
    """Sequential ``h_k = a_bar_k * h_{k-1} + bx_k`` from ``h_0 = 0``; returns all states [B,M,E,N]."""
    h = torch.zeros_like(bx[:, 0])
    states = []
    for k in range(bx.shape[1]):
        h = a_bar[:, k] * h + bx[:, k]
        states.append(h)
    return torch.stack(states, dim=1)


def _readout(states: torch.Tensor, C_t: torch.Tensor) -> torch.Tensor:
    return torch.einsum("bmen,bmn->bme", states, C_t)


def ssm_scan_causal(params: SelectiveSSM, x: torch.Tensor) -> torch.Tensor:
    """``y_k = C_k h_k + D x_k`` with the causal recurrence; x is [B,M,E]."""
    a_bar, bx, C_t = _prepare(params, x)
    return _readout(_recurrence(a_bar, bx), C_t) + params.d_skip * x


def ssm_scan_noncausal(params: SelectiveSSM, x: torch.Tensor) -> torch.Tensor:
    """Forward scan + backward scan - self term, all from one parameter set.

    The backward scan is the causal recurrence run on the reversed sequence.
    Position k's own contribution ``C_k (b_bar_k x_k) + D x_k`` appears in both
    directions and is subtracted once.
    """
    a_bar, bx, C_t = _prepare(params, x)
    fwd = _recurrence(a_bar, bx)
    bwd = _recurrence(a_bar.flip(1), bx.flip(1)).flip(1)
    return _readout(fwd + bwd - bx, C_t) + params.d_skip * x


def dense_scan_oracle(params: SelectiveSSM, x: torch.Tensor) -> torch.Tensor:
    """Brute-force non-causal scan: build the M x M mixing matrix per channel.

    Entry (i, j) is ``sum_n C_i[n] * decay(i, j)[n] * b_bar_j[n]`` where the decay
    multiplies ``a_bar`` over the positions strictly between source ``j`` and
    receiver ``i`` plus the receiver itself; the diagonal has decay 1 and gets
    ``D`` added. O(M^2 N) per channel, so only for short sequences.
    """
    if x.shape[0] != 1:
        raise ValueError("dense_scan_oracle expects batch size 1")
    M = x.shape[1]
    if M > DENSE_ORACLE_MAX_LEN:
        raise MemoryError(f"dense oracle limited to M <= {DENSE_ORACLE_MAX_LEN}, got {M}")
    with torch.no_grad():
        B_t, C_t, delta_t = selective_parameters(x, params)
        step = discretize_zoh(params.A, B_t, delta_t)
    a_bar = step.a_bar[0]  # [M, E, N]
    b_bar = step.b_bar[0]
    C = C_t[0]  # [M, N]
    E = x.shape[2]
    mix = torch.zeros(E, M, M, dtype=x.dtype)
    for i in range(M):
        for j in range(M):
            if j < i:
                decay = torch.prod(a_bar[j + 1 : i + 1], dim=0)
            elif j > i:
                decay = torch.prod(a_bar[i:j], dim=0)
            else:
                decay = torch.ones_like(a_bar[0])
            mix[:, i, j] = (C[i] * decay * b_bar[j]).sum(-1)
    mix = mix + torch.diag_embed(params.d_skip.detach().unsqueeze(-1).expand(E, M))
    y = torch.einsum("eij,je->ie", mix, x[0].detach())
    return y.unsqueeze(0)


@dataclass
class MambaBlockConfig:
    channels: int
    state_size: int = 16
    expand: float = 2.0
    conv_kernel: int = 3

    @property
    def inner(self) -> int:
        return max(1, int(round(self.expand * self.channels)))


class MambaBlock(nn.Module):
    """Mamba wiring around a non-causal scan, with a residual connection.

    in_proj C -> 2E (main | gate); main: depthwise conv (symmetric padding) + SiLU
    -> scan; gated by SiLU(gate); out_proj E -> C.
    """

    def __init__(self, cfg: MambaBlockConfig, causal: bool = False):
        super().__init__()
        if cfg.conv_kernel % 2 != 1:
            raise ValueError("conv_kernel must be odd for symmetric padding")
        self.cfg = cfg
        self.causal = causal
        E = cfg.inner
        self.in_proj = nn.Linear(cfg.channels, 2 * E, bias=False)
        self.conv = nn.Conv1d(E, E, cfg.conv_kernel, padding=cfg.conv_kernel // 2, groups=E)
        self.ssm = SelectiveSSM(E, cfg.state_size)
        self.out_proj = nn.Linear(E, cfg.channels, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        main, gate = self.in_proj(x).chunk(2, dim=-1)
        main = F.silu(self.conv(main.transpose(1, 2)).transpose(1, 2))
        y = self.ssm(main, causal=self.causal)
        y = y * F.silu(gate)
        return x + self.out_proj(y)


def mamba_block_forward(block: MambaBlock, x_seq: torch.Tensor) -> torch.Tensor:
    return block(x_seq)
