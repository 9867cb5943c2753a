"""ResNet-style backbone with a swappable stage-4 mixer (Gamba cell, 3x3 conv, or MHSA)."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .asc import ASC
from .gamba import GambaCell, GambaCellConfig, from_sequence, to_sequence
from .numerics import ConfigurationError, derive_seed

MIXERS = ("gamba", "conv", "attention")


@dataclass
class BackboneSpec:
    name: str = "vgamba-b"
    depths: tuple[int, ...] = (3, 4, 6, 3)
    widths: tuple[int, ...] = (64, 128, 256, 512)
    stem_width: int = 64
    expansion: int = 4
    num_classes: int = 1000
    mixer: str = "gamba"
    use_rpe: bool = True
    use_asc: bool = True
    # inner SSM width E = ssm_expand * (bottleneck width); see README for why 0.5 here
    ssm_expand: float = 0.5
    state_size: int = 16
    asc_reduction: int = 32
    heads: int = 4
    image_size: int = 224
    # dense decoder for pixel-to-pixel tasks; None disables it
    dense_channels: int | None = None
    dense_width: int = 32
    in_channels: int = 3

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.widths = tuple(int(w) for w in self.widths)

    def validate(self) -> None:
        if len(self.depths) != 4 or len(self.widths) != 4:
            raise ConfigurationError("depths and widths need exactly 4 stages")
        if any(d < 1 for d in self.depths):
            raise ConfigurationError(f"every stage needs at least one block, got depths={self.depths}")
        if any(w < 1 for w in self.widths) or self.stem_width < 1:
            raise ConfigurationError("widths must be positive")
        if self.mixer not in MIXERS:
            raise ConfigurationError(f"mixer must be one of {MIXERS}, got {self.mixer!r}")
        if self.image_size % 32:
            raise ConfigurationError(f"image_size must be divisible by 32, got {self.image_size}")
        if self.mixer == "attention" and self.widths[3] % self.heads:
            raise ConfigurationError("stage-4 width must be divisible by the number of heads")

    @property
    def out_channels(self) -> tuple[int, ...]:
        return tuple(w * self.expansion for w in self.widths)


_FULL = dict(widths=(64, 128, 256, 512), stem_width=64)
_TINY = dict(widths=(8, 16, 32, 64), stem_width=8, depths=(2, 2, 2, 2), ssm_expand=2.0, image_size=64)

VARIANTS: dict[str, dict] = {
    "vgamba-b": dict(_FULL, depths=(3, 4, 6, 3)),
    "vgamba-l": dict(_FULL, depths=(3, 4, 23, 3)),
    "vgamba-x": dict(_FULL, depths=(3, 8, 36, 3)),
    "resnet-50": dict(_FULL, depths=(3, 4, 6, 3), mixer="conv"),
    "botnet-50": dict(_FULL, depths=(3, 4, 6, 3), mixer="attention"),
    "vgamba-tiny": dict(_TINY),
    "conv-tiny": dict(_TINY, mixer="conv"),
    "attention-tiny": dict(_TINY, mixer="attention"),
}


def get_spec(variant: str, **overrides) -> BackboneSpec:
    try:
        base = VARIANTS[variant]
    except KeyError:
        raise ConfigurationError(f"unknown variant {variant!r}; known: {sorted(VARIANTS)}") from None
    spec = BackboneSpec(name=variant, **{**base, **overrides})
    spec.validate()
    return spec


def _group_norm(channels: int) -> nn.GroupNorm:
    groups = math.gcd(channels, 32)
    return nn.GroupNorm(groups, channels)


def _norm(kind: str, channels: int) -> nn.Module:
    return nn.BatchNorm2d(channels) if kind == "batch" else _group_norm(channels)


class MHSA2d(nn.Module):
    """Multi-head self-attention over the flattened map with content-position logits."""

    def __init__(self, channels: int, height: int, width: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.head_dim = channels // heads
        self.qkv = nn.Linear(channels, 3 * channels, bias=False)
        scale = self.head_dim**-0.5
        self.pos_h = nn.Parameter(scale * torch.randn(height, self.head_dim))
        self.pos_w = nn.Parameter(scale * torch.randn(width, self.head_dim))

    def position(self, height: int, width: int) -> torch.Tensor:
        ph, pw = self.pos_h, self.pos_w
        if ph.shape[0] != height:
            ph = F.interpolate(ph.T[None], size=height, mode="linear", align_corners=True)[0].T
        if pw.shape[0] != width:
            pw = F.interpolate(pw.T[None], size=width, mode="linear", align_corners=True)[0].T
        return (ph[:, None, :] + pw[None, :, :]).reshape(height * width, self.head_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        seq = to_sequence(x)
        q, k, v = self.qkv(seq).view(b, h * w, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        k = k + self.position(h, w)
        att = torch.softmax(q @ k.transpose(-1, -2) * self.head_dim**-0.5, dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, h * w, c)
        return from_sequence(out, h, w)


class Bottleneck(nn.Module):
    """1x1 reduce -> mixer -> 1x1 expand, plus a (projected) residual.

    ``mixer='conv'`` is the standard 3x3 (stride on the 3x3). For ``gamba`` and
    ``attention`` the token mixer runs at input resolution and a 2x2 average
    pool follows when the block downsamples.
    """

    def __init__(
        self,
        in_ch: int,
        width: int,
        stride: int,
        spec: BackboneSpec,
        mixer: str = "conv",
        extent: tuple[int, int] | None = None,
    ):
        super().__init__()
        out_ch = width * spec.expansion
        norm = "group" if mixer == "gamba" else "batch"
        self.mixer_kind = mixer
        self.reduce = nn.Conv2d(in_ch, width, 1, bias=False)
        self.norm1 = _norm(norm, width)
        self.asc = None
        if mixer == "conv":
            self.mixer = nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False)
        elif mixer == "gamba":
            h, w = extent
            cfg = GambaCellConfig(
                width, h, w, spec.state_size, spec.ssm_expand, use_rpe=spec.use_rpe, use_asc=spec.use_asc
            )
            self.mixer = GambaCell(cfg)
            self.asc = ASC(width, spec.asc_reduction) if spec.use_asc else None
        elif mixer == "attention":
            self.mixer = MHSA2d(width, *extent, heads=spec.heads)
        else:
            raise ConfigurationError(f"unknown mixer {mixer!r}")
        self.pool = nn.AvgPool2d(2) if stride == 2 and mixer != "conv" else None
        self.norm2 = _norm(norm, width)
        self.expand = nn.Conv2d(width, out_ch, 1, bias=False)
        self.norm3 = _norm(norm, out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), _norm(norm, out_ch))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.relu(self.norm1(self.reduce(x)))
        y = self.mixer(y)
        if self.asc is not None:
            y = self.asc(y)
        if self.pool is not None:
            y = self.pool(y)
        y = F.relu(self.norm2(y))
        y = self.norm3(self.expand(y))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(y + identity)


class DenseHead(nn.Module):
    """Top-down decoder from the four stage outputs back to input resolution."""

    def __init__(self, stage_channels: tuple[int, ...], width: int, out_channels: int):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, width, 1) for c in stage_channels)
        self.smooth = nn.Conv2d(width, width, 3, padding=1)
        self.out = nn.Conv2d(width, out_channels, 1)

    def forward(self, stages: list[torch.Tensor], size: tuple[int, int]) -> torch.Tensor:
        y = self.lateral[-1](stages[-1])
        for lat, feat in zip(reversed(self.lateral[:-1]), reversed(stages[:-1])):
            y = F.interpolate(y, size=feat.shape[-2:], mode="nearest") + lat(feat)
        y = self.out(F.relu(self.smooth(y)))
        return F.interpolate(y, size=size, mode="bilinear", align_corners=False)


class Backbone(nn.Module):
    def __init__(self, spec: BackboneSpec, seed: int = 0):
        super().__init__()
        spec.validate()
        self.spec = spec
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(seed, "stem"))
            self.stem = nn.Sequential(
                nn.Conv2d(spec.in_channels, spec.stem_width, 7, stride=2, padding=3, bias=False),
                nn.BatchNorm2d(spec.stem_width),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(3, stride=2, padding=1),
            )
            stages = []
            in_ch = spec.stem_width
            for i, (depth, width) in enumerate(zip(spec.depths, spec.widths)):
                torch.manual_seed(derive_seed(seed, f"stage{i + 1}"))
                mixer = spec.mixer if i == 3 else "conv"
                # spatial extent at the input of this stage
                extent = spec.image_size // (4 * 2 ** max(i - 1, 0))
                blocks = []
                for j in range(depth):
                    stride = 2 if (j == 0 and i > 0) else 1
                    blocks.append(Bottleneck(in_ch, width, stride, spec, mixer, (extent, extent)))
                    in_ch = width * spec.expansion
                    extent //= stride
                stages.append(nn.Sequential(*blocks))
            self.stages = nn.ModuleList(stages)
            torch.manual_seed(derive_seed(seed, "head"))
            self.fc = nn.Linear(in_ch, spec.num_classes)
            self.dense = None
            if spec.dense_channels:
                torch.manual_seed(derive_seed(seed, "dense"))
                self.dense = DenseHead(spec.out_channels, spec.dense_width, spec.dense_channels)
            self._init_weights()

    def _init_weights(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        if self.dense is not None:
            # start from the all-zero prediction instead of a large random one
            nn.init.zeros_(self.dense.out.weight)

    def _check_input(self, x: torch.Tensor) -> None:
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ConfigurationError(f"input extents must be divisible by 32, got {h}x{w}")

    def forward_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Outputs of the stem and the four stages (index 0..4)."""
        self._check_input(x)
        feats = [self.stem(x)]
        for stage in self.stages:
            feats.append(stage(feats[-1]))
        return feats

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x4 = self.forward_features(x)[-1]
        return self.fc(x4.mean(dim=(2, 3)))

    def forward_dense(self, x: torch.Tensor) -> torch.Tensor:
        if self.dense is None:
            raise ConfigurationError("model was built without a dense head (set dense_channels)")
        feats = self.forward_features(x)
        return self.dense(feats[1:], x.shape[-2:])


def build_backbone(spec: BackboneSpec, seed: int = 0) -> Backbone:
    return Backbone(spec, seed)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def stage_parameters(model: Backbone) -> list[int]:
    return [count_parameters(model.stem)] + [count_parameters(s) for s in model.stages]


def spec_dict(spec: BackboneSpec) -> dict:
    return dataclasses.asdict(spec)
