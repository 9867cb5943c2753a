"""Tensor plumbing: precision, seeding, finite-difference gradient checks, checkpoints.

Tensors are ``torch.Tensor``; reverse-mode gradients come from torch autograd.
The finite-difference oracle below only ever calls ``f`` under ``no_grad`` so it
stays independent of the autograd path it certifies.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

CKPT_MAGIC = "VGAMBA-CKPT-1"

DTYPES = {"f32": torch.float32, "f64": torch.float64}


class NumericalDomainError(ArithmeticError):
    """A computation produced or consumed a non-finite value."""


class ContractViolation(ValueError):
    """Two values that must agree in shape (or similar) do not."""


class ConfigurationError(ValueError):
    """A model, dataset or run configuration is inconsistent."""


def resolve_dtype(precision: str) -> torch.dtype:
    try:
        return DTYPES[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(DTYPES)}") from None


def derive_seed(root: int, name: str) -> int:
    """Split a root seed into a stream seed: sha256(root:name) truncated to 63 bits."""
    digest = hashlib.sha256(f"{int(root)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; stable across platforms for a given integer seed."""
    return np.random.Generator(np.random.PCG64(seed))


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed)
    return g


def apply_thread_limit() -> None:
    threads = os.environ.get("VGAMBA_THREADS")
    if threads:
        try:
            n = int(threads)
        except ValueError:
            raise ConfigurationError(f"VGAMBA_THREADS: expected a positive integer, got {threads!r}") from None
        if n < 1:
            raise ConfigurationError(f"VGAMBA_THREADS: expected a positive integer, got {threads!r}")
        torch.set_num_threads(n)


def ensure_finite(t: torch.Tensor, where: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericalDomainError(f"non-finite values in {where}")
    return t


# --------------------------------------------------------------------------- #
# gradient certification
# --------------------------------------------------------------------------- #


@dataclass
class GradReport:
    max_rel_error: float
    max_abs_error: float
    worst_index: int
    passed: bool


# finite-difference settings for gradient certification: 5-point stencil over a step ladder
CERT_ORDER = 4
CERT_STEPS = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8)


def _scalar(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor) -> float:
    with torch.no_grad():
        value = f(x)
    value = float(value)
    if not np.isfinite(value):
        raise NumericalDomainError("objective is not finite at a perturbed point")
    return value


def _stencil(order: int):
    if order == 2:
        return [(1, 0.5), (-1, -0.5)]
    if order == 4:
        return [(1, 8 / 12), (-1, -8 / 12), (2, -1 / 12), (-2, 1 / 12)]
    raise ValueError("order must be 2 or 4")


def finite_difference_gradient(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    eps: float = 1e-6,
    indices: Iterable[int] | None = None,
    order: int = 2,
    steps: Sequence[float] | None = None,
) -> torch.Tensor:
    """Central differences of scalar ``f`` at ``x``.

    ``order=2`` is the 3-point stencil, ``order=4`` the 5-point stencil.
    With ``steps`` (decreasing), every coordinate is differenced at each step and
    the estimate kept is the larger-step member of the adjacent pair that agrees
    best, once each pair is charged the roundoff floor of its smaller step.
    Large steps lose to truncation and ReLU kinks, small ones to roundoff.
    When ``indices`` (flat positions) is given only those coordinates are
    probed; the remaining entries of the result are NaN.
    """
    ladder = [eps] if steps is None else list(steps)
    if not ladder or any(h <= 0 for h in ladder):
        raise ValueError("eps must be positive")
    if any(b >= a for a, b in zip(ladder, ladder[1:])):
        raise ValueError("steps must be strictly decreasing")
    stencil = _stencil(order)
    base = x.detach().clone().reshape(-1)
    noise = np.spacing(abs(_scalar(f, base.view_as(x)))) * sum(abs(w) for _, w in stencil) if len(ladder) > 1 else 0.0
    probe = range(base.numel()) if indices is None else list(indices)
    grad = torch.full_like(base, float("nan")) if indices is not None else torch.empty_like(base)
    for i in probe:
        orig = base[i].item()
        estimates = []
        for h in ladder:
            acc = 0.0
            for step, weight in stencil:
                base[i] = orig + step * h
                acc += weight * _scalar(f, base.view_as(x))
            estimates.append(acc / h)
        base[i] = orig
        if len(estimates) == 1:
            grad[i] = estimates[0]
        else:
            # a pair's gap plus the roundoff floor of its smaller step, so two
            # roundoff-dominated estimates cannot win by agreeing by chance
            scores = [abs(a - b) + noise / h for a, b, h in zip(estimates, estimates[1:], ladder[1:])]
            grad[i] = estimates[int(np.argmin(scores))]
    return grad.view_as(x)


def reverse_mode_gradient(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    leaf = x.detach().clone().requires_grad_(True)
    out = f(leaf)
    if out.numel() != 1:
        raise ContractViolation(f"objective must be scalar, got shape {tuple(out.shape)}")
    (grad,) = torch.autograd.grad(out.reshape(()), leaf, allow_unused=True)
    return torch.zeros_like(leaf) if grad is None else grad.detach()


def compare_gradients(
    analytic: torch.Tensor,
    numeric: torch.Tensor,
    tol: float,
    indices: Iterable[int] | None = None,
) -> GradReport:
    if analytic.shape != numeric.shape:
        raise ContractViolation(
            f"analytic gradient shape {tuple(analytic.shape)} != numeric {tuple(numeric.shape)}"
        )
    a = analytic.detach().reshape(-1).double()
    b = numeric.detach().reshape(-1).double()
    if indices is not None:
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        a, b = a[idx], b[idx]
    else:
        idx = torch.arange(a.numel())
    if a.numel() == 0:
        return GradReport(0.0, 0.0, -1, True)
    abs_err = (a - b).abs()
    denom = torch.maximum(torch.maximum(a.abs(), b.abs()), torch.full_like(a, 1e-12))
    rel_err = abs_err / denom
    worst = int(torch.argmax(rel_err))
    max_rel = float(rel_err[worst])
    return GradReport(
        max_rel_error=max_rel,
        max_abs_error=float(abs_err.max()),
        worst_index=int(idx[worst]),
        passed=max_rel <= tol,
    )


def check_gradients(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    eps: float = 1e-6,
    tol: float = 1e-4,
    indices: Iterable[int] | None = None,
    grad_fn: Callable[[torch.Tensor], torch.Tensor] | None = None,
    order: int = 2,
    steps: Sequence[float] | None = None,
) -> GradReport:
    """Compare the reverse-mode gradient of ``f`` at ``x`` with central differences.

    ``grad_fn`` overrides the analytic gradient (used for negative controls).
    Relative error per coordinate is ``|a-b| / max(|a|, |b|, 1e-12)``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    indices = None if indices is None else list(indices)
    analytic = reverse_mode_gradient(f, x) if grad_fn is None else grad_fn(x)
    numeric = finite_difference_gradient(f, x, eps, indices, order, steps)
    return compare_gradients(analytic, numeric, tol, indices)


def check_module_gradients(
    module: torch.nn.Module,
    loss_fn: Callable[[torch.nn.Module, Mapping[str, torch.Tensor]], torch.Tensor],
    eps: float = 1e-6,
    tol: float = 1e-4,
    max_probes: int | None = None,
    seed: int = 0,
    order: int = 2,
    steps: Sequence[float] | None = None,
) -> dict[str, GradReport]:
    """Certify gradients of every parameter of ``module``.

    ``loss_fn(module, overrides)`` must evaluate the scalar loss with the given
    parameter overrides (see :func:`torch.func.functional_call`). With
    ``max_probes`` set, each parameter is probed at that many random coordinates.
    """
    rng = make_rng(seed)
    reports = {}
    for name, p in module.named_parameters():
        def f(v, name=name):
            return loss_fn(module, {name: v})

        indices = None
        if max_probes is not None and p.numel() > max_probes:
            indices = sorted(rng.choice(p.numel(), size=max_probes, replace=False).tolist())
        reports[name] = check_gradients(f, p.detach(), eps, tol, indices, order=order, steps=steps)
    return reports


# --------------------------------------------------------------------------- #
# checkpoints
# --------------------------------------------------------------------------- #


def save_checkpoint(path: str | Path, state: Mapping[str, torch.Tensor]) -> Path:
    """Write ``<path>`` (text manifest) and ``<path>.bin`` (float64 LE blob).

    Manifest lines after the magic header: ``key = d0,d1,... @ offset`` with the
    offset counted in float64 elements.
    """
    path = Path(path)
    blob_path = path.with_name(path.name + ".bin")
    lines = [CKPT_MAGIC, f"blob = {blob_path.name}"]
    chunks = []
    offset = 0
    for key, tensor in state.items():
        arr = tensor.detach().cpu().to(torch.float64).numpy().reshape(-1)
        dims = ",".join(str(d) for d in tensor.shape)
        lines.append(f"{key} = {dims} @ {offset}")
        chunks.append(arr.astype("<f8"))
        offset += arr.size
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    blob_path.write_bytes(data.tobytes())
    path.write_text("\n".join(lines) + "\n")
    return path


def load_checkpoint(path: str | Path) -> dict[str, torch.Tensor]:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != CKPT_MAGIC:
        raise ValueError(f"{path}: missing {CKPT_MAGIC} header")
    key, _, blob_name = lines[1].partition("=")
    if key.strip() != "blob":
        raise ValueError(f"{path}: second line must name the blob")
    data = np.frombuffer((path.parent / blob_name.strip()).read_bytes(), dtype="<f8")
    state = {}
    for line in lines[2:]:
        if not line.strip():
            continue
        name, _, rest = line.partition(" = ")
        dims, _, offset = rest.partition(" @ ")
        shape = tuple(int(d) for d in dims.split(",")) if dims.strip() else ()
        start = int(offset)
        count = int(np.prod(shape)) if shape else 1
        if start + count > data.size:
            raise ValueError(f"{path}: entry {name!r} runs past end of blob")
        state[name] = torch.from_numpy(data[start : start + count].copy()).reshape(shape)
    return state


def load_into(module: torch.nn.Module, state: Mapping[str, torch.Tensor]) -> None:
    """Load a float64 checkpoint into ``module``, casting to each entry's dtype."""
    own = module.state_dict()
    missing = set(own) - set(state)
    unexpected = set(state) - set(own)
    if missing or unexpected:
        raise ValueError(f"checkpoint mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
    module.load_state_dict({k: state[k].to(own[k].dtype).reshape(own[k].shape) for k in own})


# names of parameters whose init makes gradients vanishingly small or exactly symmetric
_SPREAD = {
    "a_log": ("add", 0.3),
    "dt_bias": ("set", 1.0),
    "d_skip": ("set", 1.0),
    "alpha_raw": ("set", 1.0),
    "b_h": ("set", 0.5),
    "b_w": ("set", 0.5),
    "r_h": ("set", 0.5),
    "r_w": ("set", 0.5),
}


def spread_parameters(module: torch.nn.Module, seed: int) -> torch.nn.Module:
    """Move degenerate initial values (zero RPE and gate biases, tiny steps) to random O(1) values.

    At init several gradients are exactly zero or ~1e-9 of the loss, which is below
    what a finite-difference oracle can resolve; gradient certification runs here instead.
    """
    g = torch_generator(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            rule = _SPREAD.get(name.rsplit(".", 1)[-1])
            if rule is None:
                continue
            noise = torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype) * rule[1]
            if rule[0] == "add":
                p.add_(noise)
            else:
                p.copy_(noise)
    return module
