"""Objectives for the deraining GAN.

Least-squares adversarial losses on patch maps, a perceptual loss over a
frozen feature extractor, a multi-scale discriminator feature-matching loss,
and their weighted sum. Layer i of an n-layer feature loss is divided by
2**(n - i), so each deeper layer counts exactly twice its predecessor.

All reductions are means over batch/channel/spatial dims (weights stay
resolution-independent). Multi-scale inputs are lists with one entry per
discriminator scale; scales are averaged.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .errors import ConfigurationError, ShapeError


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float = 1.0
    lambda_perc: float = 10.0
    lambda_msadv: float = 10.0
    n_vgg: int = 5
    n_adv: int = 4

    def __post_init__(self):
        if min(self.lambda_adv, self.lambda_perc, self.lambda_msadv) < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.n_vgg < 1 or self.n_adv < 1:
            raise ConfigurationError("layer counts must be positive")

    def perceptual_divisors(self) -> list[float]:
        """1/w_i multipliers come from w_i = 2**(n_vgg - i), i = 1..n_vgg."""
        return [float(2 ** (self.n_vgg - i)) for i in range(1, self.n_vgg + 1)]

    def feature_divisors(self) -> list[float]:
        return [float(2 ** (self.n_adv - i)) for i in range(1, self.n_adv + 1)]


@dataclass(frozen=True)
class GenLoss:
    total: torch.Tensor | float
    adv: torch.Tensor | float
    perc: torch.Tensor | float
    msadv: torch.Tensor | float


def _scales(x) -> list:
    return x if isinstance(x, (list, tuple)) else [x]


def adv_gen_loss(d_out_on_fake) -> torch.Tensor:
    """Mean over patches (and scales) of (D(G(rainy)) - 1)^2."""
    per_scale = [((m - 1.0) ** 2).mean() for m in _scales(d_out_on_fake)]
    return torch.stack([torch.as_tensor(v) for v in per_scale]).mean()


def disc_loss(d_out_on_real, d_out_on_fake) -> torch.Tensor:
    """(D(clear) - 1)^2 + D(derained)^2, each term averaged over patches and
    scales. The fake branch must be computed on a detached generator output so
    the gradient only reaches discriminator parameters."""
    real = torch.stack([torch.as_tensor(((m - 1.0) ** 2).mean()) for m in _scales(d_out_on_real)]).mean()
    fake = torch.stack([torch.as_tensor((m**2).mean()) for m in _scales(d_out_on_fake)]).mean()
    return real + fake


def perceptual_loss(extractor, clear: torch.Tensor, derained: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    """Layer-weighted L1 between frozen extractor features of both images."""
    if clear.shape != derained.shape:
        raise ShapeError(f"shape mismatch {tuple(clear.shape)} vs {tuple(derained.shape)}")
    with torch.no_grad():
        feats_clear = extractor(clear)
    feats_derained = extractor(derained)
    if len(feats_clear) != weights.n_vgg:
        raise ConfigurationError(
            f"extractor yields {len(feats_clear)} taps but n_vgg is {weights.n_vgg}"
        )
    total = 0.0
    for fc, fd, div in zip(feats_clear, feats_derained, weights.perceptual_divisors()):
        total = total + (fc - fd).abs().mean() / div
    return torch.as_tensor(total)


def ms_feature_loss(d_real_feats, d_fake_feats, weights: LossWeights) -> torch.Tensor:
    """Layer-weighted L1 between discriminator activations on real vs fake,
    averaged over scales. Real-branch features are gradient-blocked: the term
    teaches the generator to match statistics, not the discriminator to
    diverge them."""
    real_stacks = d_real_feats if isinstance(d_real_feats[0], (list, tuple)) else [d_real_feats]
    fake_stacks = d_fake_feats if isinstance(d_fake_feats[0], (list, tuple)) else [d_fake_feats]
    if len(real_stacks) != len(fake_stacks):
        raise ShapeError(f"{len(real_stacks)} real scales vs {len(fake_stacks)} fake scales")
    divisors = weights.feature_divisors()
    per_scale = []
    for real_stack, fake_stack in zip(real_stacks, fake_stacks):
        if len(real_stack) != len(fake_stack):
            raise ShapeError("feature stacks have different lengths")
        if len(real_stack) != weights.n_adv:
            raise ConfigurationError(
                f"feature stack has {len(real_stack)} layers but n_adv is {weights.n_adv}"
            )
        total = 0.0
        for fr, ff, div in zip(real_stack, fake_stack, divisors):
            total = total + (fr.detach() - ff).abs().mean() / div
        per_scale.append(torch.as_tensor(total))
    return torch.stack(per_scale).mean()


def total_gen_loss(adv, perc, msadv, weights: LossWeights) -> GenLoss:
    """Full generator objective: lambda-weighted sum of the three parts."""
    total = weights.lambda_adv * adv + weights.lambda_perc * perc + weights.lambda_msadv * msadv
    return GenLoss(total=total, adv=adv, perc=perc, msadv=msadv)


class PerceptualExtractor(nn.Module):
    """Frozen convolutional feature taps, ordered shallow to deep.

    ``stages`` are applied sequentially; the output of each is one tap.
    ``normalize`` maps [0, 1] inputs to the backbone's expected statistics.
    """

    def __init__(self, stages: list[nn.Module], mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5)):
        super().__init__()
        self.stages = nn.ModuleList(stages)
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @property
    def n_taps(self) -> int:
        return len(self.stages)

    def train(self, mode: bool = True):  # stays frozen regardless of trainer calls
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = (x - self.mean) / self.std
        taps = []
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        return taps


def seeded_random_extractor(n_layers: int = 5, base_channels: int = 16, seed: int = 0) -> PerceptualExtractor:
    """Deterministic frozen conv pyramid for hardware/offline runs.

    Random fixed filters still rank image similarity usefully; this keeps the
    whole pipeline runnable where pretrained backbones cannot be downloaded.
    """
    state = torch.get_rng_state()
    try:
        torch.manual_seed(seed)
        stages = []
        cin = 3
        for i in range(n_layers):
            cout = base_channels * 2 ** min(i, 3)
            stride = 1 if i == 0 else 2
            stages.append(
                nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.LeakyReLU(0.2, inplace=True))
            )
            cin = cout
    finally:
        torch.set_rng_state(state)
    return PerceptualExtractor(stages)


_VGG16_TAP_ENDS = (4, 9, 16, 23, 30)  # through relu1_2, relu2_2, relu3_3, relu4_3, relu5_3


def vgg16_extractor(n_layers: int = 5, weights_path: str | Path | None = None) -> PerceptualExtractor:
    """VGG16 feature taps, one per conv block. Needs pretrained weights: either
    downloadable torchvision weights or a local ``weights_path`` state dict."""
    if not 1 <= n_layers <= len(_VGG16_TAP_ENDS):
        raise ConfigurationError(f"n_layers must be in [1, {len(_VGG16_TAP_ENDS)}]")
    try:
        import torchvision.models as tvm

        if weights_path is not None:
            backbone = tvm.vgg16(weights=None)
            backbone.load_state_dict(torch.load(weights_path, map_location="cpu", weights_only=True))
        else:
            backbone = tvm.vgg16(weights=tvm.VGG16_Weights.IMAGENET1K_V1)
    except ConfigurationError:
        raise
    except Exception as exc:
        raise ConfigurationError(
            "could not load pretrained VGG16 weights (offline?); pass weights_path "
            "or use extractor kind 'random'"
        ) from exc
    features = backbone.features
    stages = []
    start = 0
    for end in _VGG16_TAP_ENDS[:n_layers]:
        stages.append(nn.Sequential(*[features[i] for i in range(start, end)]))
        start = end
    return PerceptualExtractor(stages, mean=(0.485, 0.456, 0.406), std=(0.229, 0.224, 0.225))


def make_extractor(kind: str, n_layers: int, seed: int = 0, weights_path=None) -> PerceptualExtractor:
    if kind == "random":
        return seeded_random_extractor(n_layers=n_layers, seed=seed)
    if kind == "vgg16":
        return vgg16_extractor(n_layers=n_layers, weights_path=weights_path)
    raise ConfigurationError(f"unknown extractor kind {kind!r}")
