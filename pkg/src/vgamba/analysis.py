"""Complexity accounting (analytic and hook-based MAC counting), scaling fits, ERF maps.

FLOP convention: one multiply-accumulate counts as one FLOP (``MacReport.macs``);
``MacReport.flops_2x`` gives the 2*MAC convention.
"""

from __future__ import annotations

import timeit
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .backbone import MHSA2d
from .numerics import ConfigurationError, torch_generator
from .ssm import SelectiveSSM, ssm_scan_causal


@dataclass
class ComplexityQuery:
    kind: str
    M: int
    D: int
    N: int | None = None
    K: int | None = None


def flops_analytic(q: ComplexityQuery) -> int:
    """Mixer cost for a length-M, width-D sequence with the inner width E = 2D.

    attention: 4MD^2 + 2M^2 D; ssm: 3M(2D)N + M(2D)N; cnn: M K^2 D^2.
    """
    if q.M < 1 or q.D < 1:
        raise ConfigurationError("M and D must be >= 1")
    if q.kind == "attention":
        return 4 * q.M * q.D**2 + 2 * q.M**2 * q.D
    if q.kind == "ssm":
        if q.N is None or q.N < 1:
            raise ConfigurationError("ssm query needs N >= 1")
        return 3 * q.M * (2 * q.D) * q.N + q.M * (2 * q.D) * q.N
    if q.kind == "cnn":
        if q.K is None or q.K < 1:
            raise ConfigurationError("cnn query needs K >= 1")
        return q.M * q.K**2 * q.D**2
    raise ConfigurationError(f"unknown mixer kind {q.kind!r}")


_KIND = {"gamba": "ssm", "attention": "attention", "conv": "cnn"}


def stage4_mixer_flops(spec) -> list[int]:
    """Analytic mixer cost of each stage-4 block of a backbone spec.

    Token mixers see the block's input extent; a strided conv sees the output grid.
    """
    extent = spec.image_size // 16
    out = []
    for j in range(spec.depths[3]):
        stride = 2 if j == 0 else 1
        side = extent // stride if spec.mixer == "conv" else extent
        q = ComplexityQuery(_KIND[spec.mixer], side * side, spec.widths[3], N=spec.state_size, K=3)
        out.append(flops_analytic(q))
        extent //= stride
    return out


# --------------------------------------------------------------------------- #
# empirical MAC counting
# --------------------------------------------------------------------------- #


@dataclass
class MacReport:
    macs: int
    by_module: dict[str, int] = field(default_factory=dict)

    @property
    def flops_2x(self) -> int:
        return 2 * self.macs

    def grouped(self, depth: int = 1) -> dict[str, int]:
        """Sum leaf counts by the first ``depth`` components of the module path."""
        out: dict[str, int] = defaultdict(int)
        for name, n in self.by_module.items():
            out[".".join(name.split(".")[:depth])] += n
        return dict(out)


def _conv_macs(m: nn.Conv2d | nn.Conv1d, out: torch.Tensor) -> int:
    k = int(np.prod(m.kernel_size))
    return out.numel() * (m.in_channels // m.groups) * k


def _ssm_macs(m: SelectiveSSM, inp: torch.Tensor, causal: bool) -> int:
    b, M, E = inp.shape
    one_pass = 4 * b * M * E * m.state  # discretize + input (3MEN) and recurrence/readout (MEN)
    return one_pass if causal else 2 * one_pass


def count_macs(model: nn.Module, input_shape: Sequence[int], method: str = "forward") -> MacReport:
    """Run one forward pass with hooks and tally MACs of conv, linear, scan and attention products.

    Normalization, activations, pooling and elementwise adds are not counted.
    """
    counts: dict[str, int] = defaultdict(int)
    handles = []

    def hook_for(name: str):
        def hook(mod, args, kwargs, out):
            x = args[0]
            if isinstance(mod, (nn.Conv2d, nn.Conv1d)):
                counts[name] += _conv_macs(mod, out)
            elif isinstance(mod, nn.Linear):
                counts[name] += out.numel() * mod.in_features
            elif isinstance(mod, SelectiveSSM):
                causal = args[1] if len(args) > 1 else kwargs.get("causal", False)
                counts[name] += _ssm_macs(mod, x, causal)
            elif isinstance(mod, MHSA2d):
                b, c, h, w = x.shape
                counts[name] += 2 * b * (h * w) ** 2 * c

        return hook

    for name, mod in model.named_modules():
        if isinstance(mod, (nn.Conv2d, nn.Conv1d, nn.Linear, SelectiveSSM, MHSA2d)):
            handles.append(mod.register_forward_hook(hook_for(name), with_kwargs=True))
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            # module __call__ so hooks on the root module fire too
            run = model if method == "forward" else getattr(model, method)
            run(torch.zeros(*input_shape, dtype=dtype))
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    return MacReport(int(sum(counts.values())), dict(counts))


def flops_empirical(model: nn.Module, input_shape: Sequence[int]) -> int:
    return count_macs(model, input_shape).macs


# --------------------------------------------------------------------------- #
# scaling
# --------------------------------------------------------------------------- #


def scaling_fit(timings: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """Least-squares slope of log(time) on log(M); returns (exponent, R^2)."""
    ms = np.array([t[0] for t in timings], dtype=float)
    ts = np.array([t[1] for t in timings], dtype=float)
    if len(np.unique(ms)) < 4:
        raise ValueError("scaling_fit needs at least 4 distinct M values")
    if np.any(np.diff(ms) < 0):
        raise ValueError("M values must be monotone non-decreasing")
    if np.any(ts <= 0) or np.any(ms <= 0):
        raise ValueError("timings and M must be positive")
    x, y = np.log(ms), np.log(ts)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(r2)


def time_calls(fns: Sequence[Callable[[], object]], repeats: int = 7, min_sample: float = 2e-3) -> list[float]:
    """Best-of-``repeats`` seconds per call for each function.

    Rounds are interleaved across the functions so slow periods on a shared
    machine hit every entry alike; calls are batched so a sample lasts at
    least ``min_sample`` seconds.
    """
    timers = [timeit.Timer(fn) for fn in fns]
    numbers = []
    for t in timers:
        first = t.timeit(1)
        numbers.append(max(1, int(np.ceil(min_sample / max(first, 1e-7)))))
    best = [float("inf")] * len(timers)
    for _ in range(repeats):
        for i, (t, n) in enumerate(zip(timers, numbers)):
            best[i] = min(best[i], t.timeit(n) / n)
    return best


def attention_forward(
    x: torch.Tensor, w_qkv: torch.Tensor, w_out: torch.Tensor, block: int = 512
) -> torch.Tensor:
    """Single-head softmax self-attention with input/output projections (4MD^2 + 2M^2 D MACs).

    Query rows are processed ``block`` at a time so the score matrix never
    exceeds block x M; the arithmetic is unchanged.
    """
    q, k, v = (x @ w_qkv).chunk(3, dim=-1)
    kt = k.transpose(-1, -2) / q.shape[-1] ** 0.5
    rows = [torch.softmax(q[:, i : i + block] @ kt, dim=-1) @ v for i in range(0, q.shape[1], block)]
    return torch.cat(rows, dim=1) @ w_out


def bench_scaling(
    lengths: Sequence[int],
    mixer: str,
    width: int = 32,
    state: int = 16,
    repeats: int = 15,
    seed: int = 0,
) -> list[tuple[int, float]]:
    """Time one forward pass of a mixer at each sequence length.

    ``ssm`` times :func:`ssm_scan_causal` at inner width ``width``;
    ``attention`` times :func:`attention_forward` at model width ``width``.
    """
    g = torch_generator(seed)
    inputs = [torch.randn(1, M, width, generator=g) for M in lengths]
    if mixer == "ssm":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            params = SelectiveSSM(width, state)
        fns = [lambda x=x: ssm_scan_causal(params, x) for x in inputs]
    elif mixer == "attention":
        w_qkv = torch.randn(width, 3 * width, generator=g) / width**0.5
        w_out = torch.randn(width, width, generator=g) / width**0.5
        fns = [lambda x=x: attention_forward(x, w_qkv, w_out) for x in inputs]
    else:
        raise ConfigurationError(f"unknown mixer {mixer!r}; expected 'ssm' or 'attention'")
    with torch.no_grad():
        rows = list(zip(lengths, time_calls(fns, repeats)))
    if all(t < 1e-3 for _, t in rows):
        warnings.warn("all timings below 1 ms; results are near timer resolution", RuntimeWarning)
    return rows


# --------------------------------------------------------------------------- #
# effective receptive field
# --------------------------------------------------------------------------- #


@dataclass
class ErfMap:
    values: np.ndarray  # [H, W], max-normalized, >= 0

    def area_fraction(self, threshold: float = 0.05) -> float:
        peak = self.values.max()
        if peak <= 0:
            return 0.0
        return float(np.mean(self.values >= threshold * peak))


def _stage_output(model: nn.Module, x: torch.Tensor, stage: int | None) -> torch.Tensor:
    if hasattr(model, "forward_features"):
        feats = model.forward_features(x)
        if stage is None or not 0 <= stage < len(feats):
            raise ConfigurationError(f"stage must be in 0..{len(feats) - 1}")
        return feats[stage]
    return model(x)


def erf_map(
    model: nn.Module | Callable[[torch.Tensor], torch.Tensor],
    stage: int | None,
    input_extent: int,
    n_samples: int = 32,
    seed: int = 0,
    in_channels: int = 3,
) -> ErfMap:
    """|d(center unit of stage output, summed over channels) / d input|, averaged over random inputs.

    Models with ``forward_features`` are evaluated in eval mode so samples do not
    interact through batch statistics.
    """
    is_module = isinstance(model, nn.Module)
    was_training = model.training if is_module else False
    if is_module:
        model.eval()
        dtype = next(model.parameters(), torch.empty(0)).dtype
    else:
        dtype = torch.get_default_dtype()
    g = torch_generator(seed)
    x = torch.randn(n_samples, in_channels, input_extent, input_extent, generator=g, dtype=dtype)
    x.requires_grad_(True)
    try:
        out = _stage_output(model, x, stage)
        ch, cw = out.shape[-2] // 2, out.shape[-1] // 2
        out[..., ch, cw].sum().backward()
    finally:
        if is_module:
            model.train(was_training)
    grad = x.grad.detach().abs().sum(dim=1).mean(dim=0).double().numpy()
    peak = grad.max()
    values = grad / peak if peak > 0 else grad
    return ErfMap(values)
