"""Deraining generator and multi-scale patch discriminator.

The generator is an encoder/residual/decoder convnet: a 7-wide ingress conv,
``down_layers`` stride-2 convs doubling channels, ``residual_blocks`` ResNet
blocks at the bottleneck, mirrored up-convs, and a 7-wide egress conv. Each
down layer's activation is added to the input of the matching up layer
(additive skips); the ingress activation is added back before the egress
conv, and the input image itself is added inside the final saturating
activation (in its pre-activation space), so the network computes a bounded
correction on top of an identity pass-through: input structure survives to
the output untouched. Images enter and leave as float tensors in [0, 1].

The discriminator scores overlapping patches (spatial map, not one scalar)
at ``num_scales`` resolutions and exposes its per-layer activations for the
feature-matching loss.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, ConfigurationError, ShapeError

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class GeneratorSpec:
    down_layers: int = 4
    residual_blocks: int = 6
    up_layers: int = 4
    base_channels: int = 64
    skip_mode: str = "additive"

    def __post_init__(self):
        if self.down_layers != self.up_layers:
            raise ConfigurationError("down_layers must equal up_layers (skip pairing)")
        if self.down_layers < 1:
            raise ConfigurationError("need at least one down/up layer")
        if self.residual_blocks < 0:
            raise ConfigurationError("residual_blocks must be non-negative")
        if self.base_channels < 1:
            raise ConfigurationError("base_channels must be positive")
        if self.skip_mode != "additive":
            raise ConfigurationError("only additive skips are supported")

    @property
    def size_multiple(self) -> int:
        return 2**self.down_layers


@dataclass(frozen=True)
class DiscriminatorSpec:
    num_scales: int = 2
    layers_per_scale: int = 4  # n_ADV: every layer is tapped for the feature loss
    base_channels: int = 64
    patch_output: bool = True

    def __post_init__(self):
        if self.num_scales < 1:
            raise ConfigurationError("num_scales must be at least 1")
        if self.layers_per_scale < 2:
            raise ConfigurationError("layers_per_scale must be at least 2")
        if self.base_channels < 1:
            raise ConfigurationError("base_channels must be positive")
        if not self.patch_output:
            raise ConfigurationError("patch_output is fixed true")


def _conv_params(cin: int, cout: int, k: int) -> int:
    return cin * cout * k * k + cout


def expected_generator_parameters(spec: GeneratorSpec) -> int:
    """Layer-by-layer analytic parameter count for the generator.

    Instance norms carry no parameters (affine-free); every conv has a bias.
    """
    b = spec.base_channels
    total = _conv_params(3, b, 7)  # ingress
    ch = b
    for _ in range(spec.down_layers):
        total += _conv_params(ch, 2 * ch, 3)
        ch *= 2
    total += spec.residual_blocks * 2 * _conv_params(ch, ch, 3)
    for _ in range(spec.up_layers):
        total += _conv_params(ch, ch // 2, 3)
        ch //= 2
    total += _conv_params(b, 3, 7)  # egress
    return total


class _ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, 1, 1),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, 1, 1),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.body(x)


class _SkipJoin(nn.Module):
    """Additive junction; projects with a 1x1 conv when channel counts differ."""

    def __init__(self, skip_channels: int, main_channels: int):
        super().__init__()
        self.project = (
            nn.Conv2d(skip_channels, main_channels, 1) if skip_channels != main_channels else None
        )

    def forward(self, main, skip):
        if main.shape[-2:] != skip.shape[-2:]:
            raise ShapeError(
                f"skip junction spatial mismatch: {tuple(main.shape[-2:])} vs {tuple(skip.shape[-2:])}"
            )
        if self.project is not None:
            skip = self.project(skip)
        return main + skip


class Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        b = spec.base_channels
        self.ingress = nn.Sequential(nn.Conv2d(3, b, 7, 1, 3), nn.InstanceNorm2d(b), nn.ReLU(inplace=True))
        downs, ch = [], b
        for _ in range(spec.down_layers):
            downs.append(
                nn.Sequential(nn.Conv2d(ch, 2 * ch, 3, 2, 1), nn.InstanceNorm2d(2 * ch), nn.ReLU(inplace=True))
            )
            ch *= 2
        self.downs = nn.ModuleList(downs)
        self.res_blocks = nn.Sequential(*[_ResidualBlock(ch) for _ in range(spec.residual_blocks)])
        ups, joins = [], []
        enc_channels = [b * 2**i for i in range(spec.down_layers, 0, -1)]
        for skip_ch in enc_channels:
            joins.append(_SkipJoin(skip_ch, ch))
            ups.append(
                nn.Sequential(
                    nn.ConvTranspose2d(ch, ch // 2, 3, 2, 1, output_padding=1),
                    nn.InstanceNorm2d(ch // 2),
                    nn.ReLU(inplace=True),
                )
            )
            ch //= 2
        self.ups = nn.ModuleList(ups)
        self.joins = nn.ModuleList(joins)
        self.ingress_join = _SkipJoin(b, ch)
        self.egress = nn.Conv2d(ch, 3, 7, 1, 3)
        self.apply(_init_weights)
        # zero correction at init: the generator starts as the identity map
        nn.init.zeros_(self.egress.weight)
        nn.init.zeros_(self.egress.bias)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (N, 3, H, W) input, got {tuple(x.shape)}")
        m = self.spec.size_multiple
        if x.shape[-2] % m or x.shape[-1] % m:
            raise ShapeError(
                f"input spatial dims {tuple(x.shape[-2:])} must be multiples of {m}"
            )
        y = 2.0 * x - 1.0
        feat = self.ingress(y)
        skips = [feat]
        for down in self.downs:
            feat = down(feat)
            skips.append(feat)
        feat = self.res_blocks(feat)
        for up, join, skip in zip(self.ups, self.joins, reversed(skips[1:])):
            feat = up(join(feat, skip))
        out = self.egress(self.ingress_join(feat, skips[0]))
        # add the input in tanh pre-activation space: zero correction = identity
        base = torch.atanh(torch.clamp(y, -0.999, 0.999))
        return 0.5 * (torch.tanh(out + base) + 1.0)


def _init_weights(module: nn.Module):
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def build_generator(spec: GeneratorSpec) -> Generator:
    return Generator(spec)


def generator_forward(g: Generator, rainy: torch.Tensor) -> torch.Tensor:
    return g(rainy)


class _PatchDiscriminator(nn.Module):
    """Single-scale PatchGAN tower; returns (patch map, per-layer activations)."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        b = spec.base_channels
        layers = []
        cin = 3
        for i in range(spec.layers_per_scale):
            cout = min(b * 2**i, 8 * b)
            block = [nn.Conv2d(cin, cout, 4, 2, 1)]
            if i > 0:
                block.append(nn.InstanceNorm2d(cout))
            block.append(nn.LeakyReLU(0.2, inplace=True))
            layers.append(nn.Sequential(*block))
            cin = cout
        self.layers = nn.ModuleList(layers)
        self.head = nn.Conv2d(cin, 1, 3, 1, 1)
        self.apply(_init_weights)

    def forward(self, x):
        feats = []
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return self.head(x), feats


class Discriminator(nn.Module):
    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        self.scales = nn.ModuleList(_PatchDiscriminator(spec) for _ in range(spec.num_scales))
        self.pool = nn.AvgPool2d(2, 2)

    def forward(self, image: torch.Tensor):
        """Returns (patch maps, feature stacks), one entry per scale; scale s
        sees the image downsampled by 2**s."""
        min_side = 2 ** (self.spec.layers_per_scale + self.spec.num_scales - 1)
        if min(image.shape[-2:]) < min_side:
            raise ShapeError(
                f"image {tuple(image.shape[-2:])} smaller than the discriminator's "
                f"receptive footprint (needs at least {min_side} px per side)"
            )
        patch_maps, feature_stacks = [], []
        x = image
        for s, tower in enumerate(self.scales):
            if s > 0:
                x = self.pool(x)
            patches, feats = tower(x)
            patch_maps.append(patches)
            feature_stacks.append(feats)
        return patch_maps, feature_stacks


def build_discriminator(spec: DiscriminatorSpec) -> Discriminator:
    return Discriminator(spec)


def discriminator_forward(d: Discriminator, image: torch.Tensor):
    return d(image)


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) float [0,1] array -> (1, 3, H, W) tensor."""
    if image.ndim == 2:
        image = np.stack([image] * 3, axis=-1)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got {image.shape}")
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float().unsqueeze(0)


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().cpu().numpy()
    if arr.ndim == 4:
        arr = arr[0]
    return np.clip(arr.transpose(1, 2, 0), 0.0, 1.0).astype(np.float32)


def derain_image(g: Generator, image: np.ndarray) -> np.ndarray:
    """Run the generator on one numpy image of any size (reflect-padded to
    the required multiple, cropped back)."""
    m = g.spec.size_multiple
    h, w = image.shape[:2]
    pad_h = (-h) % m
    pad_w = (-w) % m
    x = image if image.ndim == 3 else np.stack([image] * 3, axis=-1)
    if pad_h or pad_w:
        x = np.pad(x, ((0, pad_h), (0, pad_w), (0, 0)), mode="reflect")
    was_training = g.training
    g.eval()
    with torch.no_grad():
        out = tensor_to_image(g(image_to_tensor(x)))
    if was_training:
        g.train()
    return out[:h, :w]


def save_checkpoint(
    path: str | Path,
    generator: Generator,
    discriminator: Discriminator | None,
    loss_weights,
    epoch: int = 0,
    iteration: int = 0,
    optimizer_g: torch.optim.Optimizer | None = None,
    optimizer_d: torch.optim.Optimizer | None = None,
    train_config_text: str = "",
) -> Path:
    """Single-archive checkpoint embedding both specs and the loss weights."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "generator_spec": asdict(generator.spec),
        "discriminator_spec": asdict(discriminator.spec) if discriminator else None,
        "loss_weights": asdict(loss_weights) if loss_weights is not None else None,
        "generator_state": generator.state_dict(),
        "discriminator_state": discriminator.state_dict() if discriminator else None,
        "optimizer_g_state": optimizer_g.state_dict() if optimizer_g else None,
        "optimizer_d_state": optimizer_d.state_dict() if optimizer_d else None,
        "epoch": epoch,
        "iteration": iteration,
        "train_config_text": train_config_text,
    }
    torch.save(payload, path)
    return path


@dataclass
class Checkpoint:
    generator: Generator
    discriminator: Discriminator | None
    loss_weights: object
    epoch: int
    iteration: int
    optimizer_g_state: dict | None
    optimizer_d_state: dict | None
    train_config_text: str


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version!r}")
    generator = build_generator(GeneratorSpec(**payload["generator_spec"]))
    generator.load_state_dict(payload["generator_state"])
    discriminator = None
    if payload.get("discriminator_spec") is not None:
        discriminator = build_discriminator(DiscriminatorSpec(**payload["discriminator_spec"]))
        discriminator.load_state_dict(payload["discriminator_state"])
    weights = None
    if payload.get("loss_weights") is not None:
        from .losses import LossWeights

        weights = LossWeights(**payload["loss_weights"])
    return Checkpoint(
        generator=generator,
        discriminator=discriminator,
        loss_weights=weights,
        epoch=payload.get("epoch", 0),
        iteration=payload.get("iteration", 0),
        optimizer_g_state=payload.get("optimizer_g_state"),
        optimizer_d_state=payload.get("optimizer_d_state"),
        train_config_text=payload.get("train_config_text", ""),
    )
