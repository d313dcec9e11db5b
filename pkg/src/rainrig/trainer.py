"""Training and fine-tuning loops.

Adam at base rate 2e-4 (betas 0.5/0.999), one discriminator step then one
generator step per batch, checkpoints every epoch, per-iteration CSV log of
all five loss terms. Any non-finite loss aborts immediately, leaving the
last good checkpoint on disk. Runs are reproducible per seed on fixed
hardware/thread settings.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .dataset_builder import DatasetManifest, PairRecord
from .derain_model import (
    DiscriminatorSpec,
    GeneratorSpec,
    build_discriminator,
    build_generator,
    image_to_tensor,
    load_checkpoint,
    save_checkpoint,
)
from .errors import ConfigurationError, TrainingDiverged
from .imgio import load_png
from .losses import (
    LossWeights,
    adv_gen_loss,
    disc_loss,
    make_extractor,
    ms_feature_loss,
    perceptual_loss,
    total_gen_loss,
)

LOG_FIELDS = ("iteration", "L_adv", "L_perc", "L_msadv", "L_disc", "L_gen_total")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    optimizer: str = "adam"
    learning_rate: float = 0.0002
    batch_size: int = 1
    seed: int = 0
    crop_size: int | None = None
    resume_from: str | None = None
    beta1: float = 0.5
    beta2: float = 0.999
    extractor: str = "vgg16"
    extractor_seed: int = 0
    extractor_weights_path: str | None = None
    target_ground_truth: str = "original"  # which clear variant the loss compares against

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be at least 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if self.optimizer != "adam":
            raise ConfigurationError("only the adam optimizer is supported")
        if self.crop_size is not None and self.crop_size < 1:
            raise ConfigurationError("crop_size must be positive")
        if self.target_ground_truth not in ("original", "photographed"):
            raise ConfigurationError("target_ground_truth must be 'original' or 'photographed'")

    def to_text(self) -> str:
        lines = [f"{k} = {v}" for k, v in sorted(vars(self).items())]
        return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    epochs_run: int
    iterations: int


def _clear_path(record: PairRecord, which: str) -> str:
    return record.original_clear_path if which == "original" else record.clear_path


def _load_pair(record: PairRecord, config: TrainConfig, rng: np.random.Generator):
    rainy = load_png(record.rainy_path)
    clear = load_png(_clear_path(record, config.target_ground_truth))
    if config.crop_size:
        c = config.crop_size
        h, w = rainy.shape[:2]
        if h < c or w < c:
            raise ConfigurationError(f"crop_size {c} exceeds image size {w}x{h}")
        y = int(rng.integers(0, h - c + 1))
        x = int(rng.integers(0, w - c + 1))
        rainy = rainy[y : y + c, x : x + c]
        clear = clear[y : y + c, x : x + c]
    return image_to_tensor(rainy)[0], image_to_tensor(clear)[0]


def _epoch_batches(records, config: TrainConfig, epoch: int):
    order_rng = np.random.default_rng(np.random.SeedSequence([config.seed, epoch]))
    order = order_rng.permutation(len(records))
    crop_rng = np.random.default_rng(np.random.SeedSequence([config.seed, epoch, 1]))
    batch = []
    for idx in order:
        batch.append(_load_pair(records[int(idx)], config, crop_rng))
        if len(batch) == config.batch_size:
            yield torch.stack([b[0] for b in batch]), torch.stack([b[1] for b in batch])
            batch = []
    if batch:
        yield torch.stack([b[0] for b in batch]), torch.stack([b[1] for b in batch])


def _fit(
    generator,
    discriminator,
    extractor,
    weights: LossWeights,
    records: list[PairRecord],
    config: TrainConfig,
    out_dir: Path,
    prefix: str,
    start_epoch: int = 0,
    start_iteration: int = 0,
    optimizer_states: tuple | None = None,
) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / f"{prefix}_log.csv"
    last_path = out_dir / f"{prefix}_checkpoint_last.pt"
    final_path = out_dir / f"{prefix}_checkpoint_final.pt"

    opt_g = torch.optim.Adam(generator.parameters(), lr=config.learning_rate, betas=(config.beta1, config.beta2))
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=config.learning_rate, betas=(config.beta1, config.beta2))
    if optimizer_states is not None:
        g_state, d_state = optimizer_states
        if g_state:
            opt_g.load_state_dict(g_state)
        if d_state:
            opt_d.load_state_dict(d_state)

    torch.manual_seed(config.seed)
    generator.train()
    discriminator.train()
    iteration = start_iteration
    last_saved = last_path if last_path.exists() else None
    mode = "a" if start_iteration > 0 and log_path.exists() else "w"
    with open(log_path, mode, newline="") as log_file:
        writer = csv.writer(log_file)
        if mode == "w":
            writer.writerow(LOG_FIELDS)
        for epoch in range(start_epoch, config.epochs):
            for rainy, clear in _epoch_batches(records, config, epoch):
                iteration += 1
                derained = generator(rainy)

                opt_d.zero_grad(set_to_none=True)
                real_maps, _ = discriminator(clear)
                fake_maps, _ = discriminator(derained.detach())
                l_disc = disc_loss(real_maps, fake_maps)
                l_disc.backward()
                opt_d.step()

                opt_g.zero_grad(set_to_none=True)
                opt_d.zero_grad(set_to_none=True)  # G-step grads must not leak into the next D step
                fake_maps_g, fake_feats = discriminator(derained)
                with torch.no_grad():
                    _, real_feats = discriminator(clear)
                l_adv = adv_gen_loss(fake_maps_g)
                l_perc = perceptual_loss(extractor, clear, derained, weights)
                l_ms = ms_feature_loss(real_feats, fake_feats, weights)
                gen = total_gen_loss(l_adv, l_perc, l_ms, weights)
                gen.total.backward()
                opt_g.step()

                row = [
                    iteration,
                    gen.adv.detach().item(),
                    gen.perc.detach().item(),
                    gen.msadv.detach().item(),
                    l_disc.detach().item(),
                    gen.total.detach().item(),
                ]
                if not all(np.isfinite(v) for v in row[1:]):
                    raise TrainingDiverged(
                        f"non-finite loss at iteration {iteration}: {row[1:]}",
                        last_checkpoint=str(last_saved) if last_saved else None,
                    )
                writer.writerow(row)
            save_checkpoint(
                last_path,
                generator,
                discriminator,
                weights,
                epoch=epoch + 1,
                iteration=iteration,
                optimizer_g=opt_g,
                optimizer_d=opt_d,
                train_config_text=config.to_text(),
            )
            last_saved = last_path
    save_checkpoint(
        final_path,
        generator,
        discriminator,
        weights,
        epoch=config.epochs,
        iteration=iteration,
        optimizer_g=opt_g,
        optimizer_d=opt_d,
        train_config_text=config.to_text(),
    )
    return TrainResult(checkpoint_path=final_path, log_path=log_path, epochs_run=config.epochs - start_epoch, iterations=iteration)


def _build_extractor(config: TrainConfig, weights: LossWeights, extractor=None):
    if extractor is not None:
        return extractor
    return make_extractor(
        config.extractor,
        n_layers=weights.n_vgg,
        seed=config.extractor_seed,
        weights_path=config.extractor_weights_path,
    )


def train(
    manifest: DatasetManifest,
    g_spec: GeneratorSpec,
    d_spec: DiscriminatorSpec,
    loss_weights: LossWeights,
    config: TrainConfig,
    out_dir: str | Path,
    extractor=None,
) -> TrainResult:
    """Train from scratch (or resume) on the manifest's train split."""
    records = manifest.by_split("train")
    if not records:
        raise ConfigurationError("manifest has no train records")
    if loss_weights.n_adv != d_spec.layers_per_scale:
        raise ConfigurationError(
            f"n_adv ({loss_weights.n_adv}) must match discriminator layers_per_scale "
            f"({d_spec.layers_per_scale})"
        )
    extractor = _build_extractor(config, loss_weights, extractor)
    if config.resume_from:
        ck = load_checkpoint(config.resume_from)
        if ck.generator.spec != g_spec or (ck.discriminator and ck.discriminator.spec != d_spec):
            raise ConfigurationError("checkpoint specs do not match the requested specs")
        return _fit(
            ck.generator,
            ck.discriminator,
            extractor,
            loss_weights,
            records,
            config,
            Path(out_dir),
            prefix="train",
            start_epoch=ck.epoch,
            start_iteration=ck.iteration,
            optimizer_states=(ck.optimizer_g_state, ck.optimizer_d_state),
        )
    torch.manual_seed(config.seed)
    generator = build_generator(g_spec)
    discriminator = build_discriminator(d_spec)
    return _fit(generator, discriminator, extractor, loss_weights, records, config, Path(out_dir), prefix="train")


def finetune(
    checkpoint_path: str | Path,
    manifest: DatasetManifest,
    config: TrainConfig,
    out_dir: str | Path,
    extractor=None,
) -> TrainResult:
    """Continue training a checkpoint on the manifest's finetune_sample subset."""
    records = manifest.finetune_records()
    if not records:
        raise ConfigurationError("manifest has no finetune_sample records")
    ck = load_checkpoint(checkpoint_path)
    if ck.discriminator is None:
        raise ConfigurationError("checkpoint lacks a discriminator; cannot finetune")
    weights = ck.loss_weights or LossWeights()
    if weights.n_adv != ck.discriminator.spec.layers_per_scale:
        weights = replace(weights, n_adv=ck.discriminator.spec.layers_per_scale)
    extractor = _build_extractor(config, weights, extractor)
    return _fit(
        ck.generator,
        ck.discriminator,
        extractor,
        weights,
        records,
        config,
        Path(out_dir),
        prefix="finetune",
    )
