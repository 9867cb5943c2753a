"""Reusable experiment drivers shared by scripts/ and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import torch

from .analysis import erf_map
from .backbone import Backbone, build_backbone, get_spec
from .transport import TrainConfig, TrainHistory, gen_transport_dataset, split_dataset, train


def transport_model(variant: str, size: int = 64, seed: int = 0, **overrides) -> Backbone:
    spec = get_spec(variant, in_channels=1, dense_channels=1, num_classes=1, image_size=size, **overrides)
    return build_backbone(spec, seed=seed)


@dataclass
class TransportRun:
    seed: int
    histories: dict[str, TrainHistory] = field(default_factory=dict)
    models: dict[str, Backbone] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)

    def compare(self, ours: str = "vgamba-tiny", ref: str = "conv-tiny") -> dict:
        """Final-MSE and epochs-to-reach comparison of ``ours`` against ``ref``."""
        h_ours, h_ref = self.histories[ours], self.histories[ref]
        level = h_ref.val_mse[-1]
        e_ours, e_ref = h_ours.epochs_to_reach(level), h_ref.epochs_to_reach(level)
        lower = h_ours.val_mse[-1] < level
        faster = e_ours is not None and e_ours < e_ref
        return {
            "final": {ours: h_ours.val_mse[-1], ref: level},
            "epochs_to_ref_final": {ours: e_ours, ref: e_ref},
            "lower_final": lower,
            "fewer_epochs": faster,
            "passed": lower and faster,
        }


def run_transport(
    seed: int,
    variants=("vgamba-tiny", "conv-tiny"),
    size: int = 64,
    n_samples: int = 200,
    cfg: TrainConfig | None = None,
    log=None,
) -> TransportRun:
    """One seed triple: data, split and init all derive from ``seed``."""
    cfg = cfg or TrainConfig(epochs=30)
    data = gen_transport_dataset(size, n_samples, seed=seed)
    tr, va = split_dataset(data, seed)
    run = TransportRun(seed)
    for v in variants:
        model = transport_model(v, size, seed)
        t0 = time.perf_counter()
        run.histories[v] = train(model, tr, va, cfg, seed=seed, log=log)
        run.seconds[v] = time.perf_counter() - t0
        run.models[v] = model
    return run


def erf_fractions(model: torch.nn.Module, extent: int = 64, threshold: float = 0.05, n_samples: int = 16, seed: int = 0):
    """Area fraction above ``threshold`` of peak for stem and stages 1-4."""
    return [
        erf_map(model, s, extent, n_samples=n_samples, seed=seed, in_channels=model.spec.in_channels).area_fraction(threshold)
        for s in range(5)
    ]
