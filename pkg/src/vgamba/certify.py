"""Gradient certification of every exported differentiable op, seed by seed."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
from torch.func import functional_call

from .asc import ASC, coordinate_pool
from .backbone import build_backbone, get_spec
from .gamba import GambaCell, GambaCellConfig, Rpe2d, build_rpe, to_sequence
from .numerics import CERT_ORDER, CERT_STEPS, check_gradients, check_module_gradients, derive_seed, spread_parameters, torch_generator
from .ssm import MambaBlock, MambaBlockConfig, SelectiveSSM, discretize_zoh, selective_parameters

D64 = torch.float64
# 64 px leaves stage 4 at 2x2; at 32 px it is 1x1 and GroupNorm over two values
# squashes some stage-4 gradients to ~1e-12, below what differencing can resolve
IMG = 64


@dataclass
class CertRow:
    op: str
    seed: int
    target: str  # parameter name, or "input"
    probes: int
    max_rel_error: float
    max_abs_error: float
    passed: bool


def _x(seed: int, *shape: int) -> torch.Tensor:
    return torch.randn(*shape, generator=torch_generator(derive_seed(seed, "x")), dtype=D64)


class _Zoh(torch.nn.Module):
    """discretize_zoh with learnable ``A = -exp(a_log)`` and ``B``; input is ``delta``."""

    def __init__(self, inner: int, state: int):
        super().__init__()
        self.a_log = torch.nn.Parameter(torch.randn(inner, state) * 0.5)
        self.b = torch.nn.Parameter(torch.randn(state))

    def forward(self, delta):
        step = discretize_zoh(-torch.exp(self.a_log), self.b, delta)
        return torch.cat([step.a_bar, step.b_bar], dim=-1)


class _Selective(torch.nn.Module):
    def __init__(self, inner: int, state: int):
        super().__init__()
        self.ssm = SelectiveSSM(inner, state)

    def forward(self, x):
        return torch.cat(selective_parameters(x, self.ssm), dim=-1)


class _Rpe(torch.nn.Module):
    """The encoding grid resampled to a different extent, plus the input tokens."""

    def __init__(self):
        super().__init__()
        self.rpe = Rpe2d(3, 4, 4)

    def forward(self, x):
        return x + build_rpe(self.rpe, 6, 5)


class _Fn(torch.nn.Module):
    def __init__(self, fn):
        super().__init__()
        self.fn = fn

    def forward(self, x):
        return self.fn(x)


def _zoh(seed: int):
    # delta in [0.5, 1.5] stays positive under every ladder step
    return _Zoh(3, 4), 0.5 + torch.rand(1, 5, 3, generator=torch_generator(derive_seed(seed, "x")), dtype=D64), {}


def _ssm(seed: int, causal: bool):
    module = SelectiveSSM(3, 4)
    x = torch.randn(1, 5, 3, generator=torch_generator(derive_seed(seed, "x")), dtype=D64)
    return module, x, {"causal": causal}


def _mamba(seed: int):
    return MambaBlock(MambaBlockConfig(4, state_size=4)), torch.randn(
        1, 6, 4, generator=torch_generator(derive_seed(seed, "x")), dtype=D64
    ), {}


def _cell(seed: int):
    cell = GambaCell(GambaCellConfig(4, 3, 3, state_size=4))
    return cell, torch.randn(1, 4, 3, 3, generator=torch_generator(derive_seed(seed, "x")), dtype=D64), {}


def _asc(seed: int):
    return ASC(4), torch.randn(1, 4, 5, 5, generator=torch_generator(derive_seed(seed, "x")), dtype=D64), {}


def _backbone(seed: int):
    spec = get_spec("vgamba-tiny", depths=(1, 1, 1, 1), image_size=IMG, num_classes=4)
    model = build_backbone(spec, seed=seed)
    # eval mode keeps samples independent; calibrate BN statistics so activations are O(1)
    for m in model.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.momentum = None
    g = torch_generator(derive_seed(seed, "calibrate"))
    with torch.no_grad():
        for _ in range(4):
            model(torch.randn(8, 3, IMG, IMG, generator=g))
    model.eval()
    return model, torch.randn(1, 3, IMG, IMG, generator=torch_generator(derive_seed(seed, "x")), dtype=D64), {}


OPS: dict[str, Callable[[int], tuple]] = {
    "discretize_zoh": _zoh,
    "selective_parameters": lambda s: (_Selective(3, 4), _x(s, 1, 5, 3), {}),
    "ssm_scan_causal": lambda s: _ssm(s, True),
    "ssm_scan_noncausal": lambda s: _ssm(s, False),
    "mamba_block": _mamba,
    "gamba_cell": _cell,
    "asc": _asc,
    "coordinate_pool": lambda s: (_Fn(lambda t: torch.cat([p.flatten(2) for p in coordinate_pool(t)], -1)), _x(s, 1, 2, 3, 4), {}),
    "to_sequence": lambda s: (_Fn(to_sequence), _x(s, 1, 2, 3, 4), {}),
    "rpe": lambda s: (_Rpe(), _x(s, 1, 30, 3), {}),
    "backbone_tiny": _backbone,
}


# the backbone has ~60 parameter tensors; fewer probes per tensor keep 20 seeds near 10 minutes
PROBE_CAP = {"backbone_tiny": 2}


def certify_op(
    op: str,
    seed: int,
    tol: float = 1e-4,
    order: int = CERT_ORDER,
    steps=CERT_STEPS,
    max_probes: int | None = 6,
) -> list[CertRow]:
    """Input and parameter gradients of ``op`` at one seed, in double precision.

    The loss is ``mean(output * w)`` with a fixed random ``w``, so every output
    entry contributes with a distinct weight.
    """
    if op in PROBE_CAP:
        max_probes = PROBE_CAP[op] if max_probes is None else min(max_probes, PROBE_CAP[op])
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, op))
        module, x, kwargs = OPS[op](seed)
    module = spread_parameters(module.double(), derive_seed(seed, "spread"))
    with torch.no_grad():
        w = torch.randn(functional_call(module, {}, (x,), kwargs).shape, generator=torch_generator(seed), dtype=D64)

    def loss_fn(mod, overrides):
        return (functional_call(mod, overrides, (x,), kwargs) * w).mean()

    rows = []
    in_idx = None
    if max_probes is not None and x.numel() > max_probes:
        g = torch_generator(derive_seed(seed, "probe"))
        in_idx = sorted(torch.randperm(x.numel(), generator=g)[:max_probes].tolist())
    r = check_gradients(
        lambda t: (functional_call(module, {}, (t,), kwargs) * w).mean(), x, tol=tol, indices=in_idx, order=order, steps=steps
    )
    rows.append(CertRow(op, seed, "input", x.numel() if in_idx is None else len(in_idx), r.max_rel_error, r.max_abs_error, r.passed))
    reports = check_module_gradients(module, loss_fn, tol=tol, max_probes=max_probes, seed=derive_seed(seed, "probe"), order=order, steps=steps)
    sizes = dict((n, p.numel()) for n, p in module.named_parameters())
    for name, rep in reports.items():
        probes = sizes[name] if max_probes is None else min(sizes[name], max_probes)
        rows.append(CertRow(op, seed, name, probes, rep.max_rel_error, rep.max_abs_error, rep.passed))
    return rows


def certify_all(seeds: int, ops=tuple(OPS), **kw) -> list[CertRow]:
    return [row for op in ops for s in range(seeds) for row in certify_op(op, s, **kw)]
