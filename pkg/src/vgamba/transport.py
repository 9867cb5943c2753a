"""Corner-to-corner shape transport: dataset, MSE evaluation, AdamW training loop."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import ConfigurationError, NumericalDomainError, derive_seed, make_rng, save_checkpoint

SHAPES = ("ball", "box")
CORNERS = ("top-left", "top-right", "bottom-left", "bottom-right")
OPPOSITE = {"top-left": "bottom-right", "bottom-right": "top-left", "top-right": "bottom-left", "bottom-left": "top-right"}


@dataclass
class TransportSample:
    input: torch.Tensor  # [1, S, S]
    target: torch.Tensor  # [1, S, S]
    kind: str
    corner: str
    size: int
    seed: int


def shape_raster(kind: str, k: int) -> np.ndarray:
    """Binary k x k raster: filled square, or the disc of diameter k sampled at pixel centres."""
    if kind == "box":
        return np.ones((k, k), dtype=np.float32)
    if kind == "ball":
        c = (np.arange(k) + 0.5) - k / 2
        return ((c[:, None] ** 2 + c[None, :] ** 2) <= (k / 2) ** 2).astype(np.float32)
    raise ConfigurationError(f"unknown shape kind {kind!r}")


def place(raster: np.ndarray, corner: str, size: int) -> np.ndarray:
    k = raster.shape[0]
    canvas = np.zeros((size, size), dtype=np.float32)
    r0 = 0 if corner.startswith("top") else size - k
    c0 = 0 if corner.endswith("left") else size - k
    canvas[r0 : r0 + k, c0 : c0 + k] = raster
    return canvas


def gen_transport_dataset(
    size: int = 64, n_samples: int = 200, shape_kinds: Sequence[str] = SHAPES, seed: int = 0
) -> list[TransportSample]:
    """Shapes of extent k in [S/8, S/4] in a random corner; targets sit in the opposite corner."""
    if n_samples <= 0:
        raise ConfigurationError("n_samples must be positive")
    if size < 16:
        raise ConfigurationError("image size must be >= 16")
    for kind in shape_kinds:
        if kind not in SHAPES:
            raise ConfigurationError(f"unknown shape kind {kind!r}")
    rng = make_rng(seed)
    samples = []
    for _ in range(n_samples):
        kind = shape_kinds[int(rng.integers(len(shape_kinds)))]
        corner = CORNERS[int(rng.integers(4))]
        k = int(rng.integers(size // 8, size // 4 + 1))
        raster = shape_raster(kind, k)
        samples.append(
            TransportSample(
                input=torch.from_numpy(place(raster, corner, size))[None],
                target=torch.from_numpy(place(raster, OPPOSITE[corner], size))[None],
                kind=kind,
                corner=corner,
                size=k,
                seed=seed,
            )
        )
    return samples


def split_dataset(samples: Sequence[TransportSample], seed: int, val_fraction: float = 0.2):
    order = make_rng(derive_seed(seed, "split")).permutation(len(samples))
    n_val = max(1, int(round(val_fraction * len(samples))))
    val = [samples[i] for i in order[:n_val]]
    train = [samples[i] for i in order[n_val:]]
    return train, val


def stack(samples: Sequence[TransportSample], dtype=torch.float32):
    x = torch.stack([s.input for s in samples]).to(dtype)
    y = torch.stack([s.target for s in samples]).to(dtype)
    return x, y


def _predictor(model) -> Callable[[torch.Tensor], torch.Tensor]:
    if hasattr(model, "forward_dense"):
        return model.forward_dense
    return model


def evaluate_mse(model, dataset: Sequence[TransportSample], batch_size: int = 64) -> float:
    """Mean over samples of per-sample mean squared pixel error."""
    if len(dataset) == 0:
        raise ConfigurationError("cannot evaluate on an empty dataset")
    predict = _predictor(model)
    is_module = isinstance(model, nn.Module)
    was_training = model.training if is_module else False
    dtype = next(model.parameters()).dtype if is_module else torch.float32
    if is_module:
        model.eval()
    per_sample = []
    try:
        with torch.no_grad():
            for i in range(0, len(dataset), batch_size):
                x, y = stack(dataset[i : i + batch_size], dtype)
                err = (predict(x) - y) ** 2
                per_sample.append(err.flatten(1).mean(dim=1).double())
    finally:
        if is_module:
            model.train(was_training)
    return float(torch.cat(per_sample).mean())


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 8
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    loss: str = "mse"


@dataclass
class TrainHistory:
    train_mse: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def epochs(self) -> list[int]:
        return list(range(len(self.train_mse)))

    def rows(self):
        return [(e, self.train_mse[e], self.val_mse[e], self.seconds[e]) for e in self.epochs]

    def epochs_to_reach(self, level: float) -> int | None:
        """First epoch whose validation MSE is <= ``level`` (None if never)."""
        for e, v in enumerate(self.val_mse):
            if v <= level:
                return e
        return None


def first_nonfinite_module(model: nn.Module, x: torch.Tensor) -> str | None:
    """Name of the first module (in execution order) whose output is non-finite."""
    found: list[str] = []
    handles = []

    def hook_for(name):
        def hook(mod, args, out):
            if not found and torch.is_tensor(out) and not torch.isfinite(out).all():
                found.append(name)

        return hook

    for name, mod in model.named_modules():
        if name:
            handles.append(mod.register_forward_hook(hook_for(name)))
    try:
        with torch.no_grad():
            _predictor(model)(x)
    finally:
        for h in handles:
            h.remove()
    return found[0] if found else None


def train(
    model: nn.Module,
    train_set: Sequence[TransportSample],
    val_set: Sequence[TransportSample],
    cfg: TrainConfig,
    seed: int = 0,
    checkpoint: str | Path | None = None,
    log: Callable[[str], None] | None = None,
) -> TrainHistory:
    """AdamW (decoupled weight decay) on pixel MSE of ``model.forward_dense``."""
    if cfg.loss != "mse":
        raise ConfigurationError(f"only the mse loss is supported, got {cfg.loss!r}")
    if getattr(model, "dense", None) is None:
        raise ConfigurationError("transport training needs a model with a dense head")
    if not train_set or not val_set:
        raise ConfigurationError("train and validation sets must be non-empty")
    dtype = next(model.parameters()).dtype
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    rng = make_rng(derive_seed(seed, "shuffle"))
    x_all, y_all = stack(train_set, dtype)
    history = TrainHistory(config=asdict(cfg))
    for epoch in range(cfg.epochs):
        model.train()
        start = time.perf_counter()
        order = torch.from_numpy(rng.permutation(len(train_set)))
        total, count = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            x, y = x_all[idx], y_all[idx]
            loss = F.mse_loss(model.forward_dense(x), y)
            if not torch.isfinite(loss):
                culprit = first_nonfinite_module(model, x)
                raise NumericalDomainError(
                    f"non-finite loss at epoch {epoch}, batch {i // cfg.batch_size}; "
                    f"first non-finite module: {culprit or 'loss only'}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        history.train_mse.append(total / count)
        history.val_mse.append(evaluate_mse(model, val_set))
        history.seconds.append(time.perf_counter() - start)
        if log:
            log(f"epoch {epoch:3d} train {history.train_mse[-1]:.5f} val {history.val_mse[-1]:.5f}")
    if checkpoint is not None:
        save_checkpoint(checkpoint, model.state_dict())
    return history
