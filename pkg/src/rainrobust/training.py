"""Training regimes: clean pretraining, adversarial training, and the two
robust-derain regimes where a frozen segmenter supplies the attack signal.

All loops share the same batch iterator and seeding so the degenerate cases
line up exactly: with a zero attack budget, adversarial training reproduces
clean pretraining update-for-update, and robust derain training reproduces
derain pretraining.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attacks import AttackSpec, ama_generate, mix_seed, naa_generate
from .attacks import attack_loss as seg_loss
from .metrics import IGNORE_ID
from .models import DerainNet, SegNet, model_param_hash
from .synthesis import PairedSample

OPTIMIZERS = ("adam", "sgd_momentum")
DEFENSE_LOSSES = ("mse", "l1", "l1_ssim")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the epoch/batch it happened in."""

    def __init__(self, stage: str, epoch: int, batch: int, loss: float):
        self.stage, self.epoch, self.batch, self.loss = stage, epoch, batch, loss
        super().__init__(f"{stage} diverged at epoch {epoch}, batch {batch}: loss={loss}")


class FrozenParamsViolation(RuntimeError):
    """The segmenter that must stay frozen changed during derain training."""


@dataclass
class TrainConfig:
    """Knobs shared by every training stage.

    The spec-level defaults are an adaptive optimizer at 1e-3 for restorer
    stages; segmentation pretraining conventionally uses sgd_momentum at 1e-2
    (see default_seg_pretrain_config).
    """

    epochs: int = 2
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    attack: AttackSpec = field(default_factory=lambda: AttackSpec(method="bim", epsilon=8.0 / 255.0, steps=5))
    defense_loss: str = "mse"
    ssim_weight: float = 0.2
    ama_enabled: bool = False
    ama_variant: str = "independent_descent"
    train_on: str = "clean"  # input source for adversarial seg training
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.defense_loss not in DEFENSE_LOSSES:
            raise ValueError(f"unknown defense loss {self.defense_loss!r}")
        if self.train_on not in ("clean", "rainy"):
            raise ValueError(f"train_on must be 'clean' or 'rainy', got {self.train_on!r}")


def default_seg_pretrain_config(**overrides) -> TrainConfig:
    cfg = TrainConfig(optimizer="sgd_momentum", learning_rate=1e-2, epochs=3)
    return replace(cfg, **overrides)


def default_derain_config(**overrides) -> TrainConfig:
    cfg = TrainConfig(optimizer="adam", learning_rate=1e-3, epochs=2)
    return replace(cfg, **overrides)


@dataclass
class TrainResult:
    model: nn.Module
    loss_curve: list[float]
    attack_calls: int = 0


@dataclass
class DefenseLoss:
    """Restoration objective; mse and l1 vanish at equality and are symmetric."""

    kind: str = "mse"
    ssim_weight: float = 0.2

    def __call__(self, output: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        if self.kind == "mse":
            return F.mse_loss(output, target)
        if self.kind == "l1":
            return F.l1_loss(output, target)
        if self.kind == "l1_ssim":
            return F.l1_loss(output, target) + self.ssim_weight * (1.0 - ssim_torch(output, target))
        raise ValueError(f"unknown defense loss {self.kind!r}")


_SSIM_KERNEL_CACHE: dict[tuple[int, float], torch.Tensor] = {}


def _ssim_kernel(window: int, sigma: float) -> torch.Tensor:
    key = (window, sigma)
    if key not in _SSIM_KERNEL_CACHE:
        r = torch.arange(window, dtype=torch.float32) - (window - 1) / 2.0
        k = torch.exp(-(r**2) / (2.0 * sigma**2))
        k = k / k.sum()
        _SSIM_KERNEL_CACHE[key] = torch.outer(k, k)
    return _SSIM_KERNEL_CACHE[key]


def ssim_torch(a: torch.Tensor, b: torch.Tensor, window: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Differentiable SSIM matching metrics.ssim (valid region, per channel)."""
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    c = a.shape[1]
    kern = _ssim_kernel(window, sigma).to(a.dtype).expand(c, 1, window, window)
    c1, c2 = 0.01**2, 0.03**2

    def filt(x):
        return F.conv2d(x, kern, groups=c)

    ma, mb = filt(a), filt(b)
    saa = filt(a * a) - ma * ma
    sbb = filt(b * b) - mb * mb
    sab = filt(a * b) - ma * mb
    num = (2 * ma * mb + c1) * (2 * sab + c2)
    den = (ma * ma + mb * mb + c1) * (saa + sbb + c2)
    return (num / den).mean()


def stack_corpus(samples: Sequence[PairedSample]) -> dict[str, torch.Tensor]:
    """Batchable NCHW tensors for a sample list (float32 images, long labels)."""
    clean = torch.from_numpy(np.stack([s.clean for s in samples])).permute(0, 3, 1, 2).contiguous()
    rainy = torch.from_numpy(np.stack([s.rainy for s in samples])).permute(0, 3, 1, 2).contiguous()
    labels = torch.from_numpy(np.stack([s.labels.astype(np.int64) for s in samples]))
    return {"clean": clean, "rainy": rainy, "labels": labels}


def _make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate, betas=cfg.betas)
    return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum)


def _epoch_batches(n: int, batch_size: int, generator: torch.Generator):
    perm = torch.randperm(n, generator=generator)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def _batch_seeds(cfg: TrainConfig, epoch: int, idx: torch.Tensor) -> list[int]:
    return [mix_seed(cfg.seed, epoch, int(i)) for i in idx]


def _train_seg(
    model: SegNet,
    samples: Sequence[PairedSample],
    cfg: TrainConfig,
    attack: AttackSpec | None,
    epoch_callback: Callable[[int, nn.Module, float], None] | None = None,
) -> TrainResult:
    cfg.validate()
    data = stack_corpus(samples)
    inputs = data["clean"] if cfg.train_on == "clean" else data["rainy"]
    labels = data["labels"]
    opt = _make_optimizer(model.parameters(), cfg)
    g = torch.Generator().manual_seed(cfg.seed)
    curve: list[float] = []
    attack_calls = 0
    stage = "seg_pretrain" if attack is None else "seg_adv_train"

    for epoch in range(cfg.epochs):
        model.train()
        losses = []
        for b, idx in enumerate(_epoch_batches(len(samples), cfg.batch_size, g)):
            xb, yb = inputs[idx], labels[idx]
            if attack is not None:
                delta = naa_generate(model, xb, yb, attack, sample_seeds=_batch_seeds(cfg, epoch, idx))
                attack_calls += 1
                xb = xb + delta
            model.train()
            opt.zero_grad()
            loss = seg_loss(model(xb), yb)
            if not torch.isfinite(loss):
                raise TrainingDiverged(stage, epoch, b, float(loss))
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        curve.append(float(np.mean(losses)))
        if epoch_callback is not None:
            epoch_callback(epoch, model, curve[-1])
    return TrainResult(model=model, loss_curve=curve, attack_calls=attack_calls)


def pretrain_seg(
    model: SegNet,
    samples: Sequence[PairedSample],
    cfg: TrainConfig,
    epoch_callback: Callable[[int, nn.Module, float], None] | None = None,
) -> TrainResult:
    """Minimize mean cross-entropy of the segmenter on clean scenes."""
    return _train_seg(model, samples, cfg, attack=None, epoch_callback=epoch_callback)


def train_at(
    model: SegNet,
    samples: Sequence[PairedSample],
    cfg: TrainConfig,
    epoch_callback: Callable[[int, nn.Module, float], None] | None = None,
) -> TrainResult:
    """Adversarial training: regenerate delta_n against the current weights every
    batch, then take one descent step on the attacked batch."""
    cfg.validate()
    return _train_seg(model, samples, cfg, attack=cfg.attack, epoch_callback=epoch_callback)


def _train_derain(
    model: DerainNet,
    samples: Sequence[PairedSample],
    cfg: TrainConfig,
    seg_frozen: SegNet | None,
    ama: bool,
    epoch_callback: Callable[[int, nn.Module, float], None] | None = None,
) -> TrainResult:
    cfg.validate()
    data = stack_corpus(samples)
    rainy, clean, labels = data["rainy"], data["clean"], data["labels"]
    loss_fn = DefenseLoss(cfg.defense_loss, cfg.ssim_weight)
    opt = _make_optimizer(model.parameters(), cfg)
    g = torch.Generator().manual_seed(cfg.seed)
    curve: list[float] = []
    attack_calls = 0
    stage = "derain_pretrain" if seg_frozen is None else ("pearl_ama" if ama else "pearl")

    frozen_hash = None
    if seg_frozen is not None:
        seg_frozen.eval()
        for p in seg_frozen.parameters():
            p.requires_grad_(False)
        frozen_hash = model_param_hash(seg_frozen)

    record_trace = ama and cfg.ama_variant == "mirror_of_naa"
    for epoch in range(cfg.epochs):
        model.train()
        losses = []
        for b, idx in enumerate(_epoch_batches(len(samples), cfg.batch_size, g)):
            xb, cb, yb = rainy[idx], clean[idx], labels[idx]
            trace = None
            if seg_frozen is not None:
                seeds = _batch_seeds(cfg, epoch, idx)
                out = naa_generate(seg_frozen, xb, yb, cfg.attack, sample_seeds=seeds, record_trace=record_trace)
                delta_n = out[0] if record_trace else out
                trace = out[1] if record_trace else None
                attack_calls += 1
                xb = xb + delta_n
            target = cb
            if ama:
                delta_m = ama_generate(
                    seg_frozen,
                    xb,
                    cb,
                    yb,
                    cfg.attack,
                    variant=cfg.ama_variant,
                    naa_trace=trace,
                    sample_seeds=_batch_seeds(cfg, epoch + 10_000, idx),
                )
                target = torch.clamp(cb + delta_m, 0.0, 1.0)
            model.train()
            opt.zero_grad()
            loss = loss_fn(model(xb), target)
            if not torch.isfinite(loss):
                raise TrainingDiverged(stage, epoch, b, float(loss))
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        if seg_frozen is not None and model_param_hash(seg_frozen) != frozen_hash:
            raise FrozenParamsViolation("segmentation weights changed during derain training")
        curve.append(float(np.mean(losses)))
        if epoch_callback is not None:
            epoch_callback(epoch, model, curve[-1])
    return TrainResult(model=model, loss_curve=curve, attack_calls=attack_calls)


def pretrain_derain(
    model: DerainNet,
    samples: Sequence[PairedSample],
    cfg: TrainConfig,
    epoch_callback: Callable[[int, nn.Module, float], None] | None = None,
) -> TrainResult:
    """Fit the restorer to map rainy inputs back to the clean scenes."""
    return _train_derain(model, samples, cfg, seg_frozen=None, ama=False, epoch_callback=epoch_callback)


def train_pearl(
    model: DerainNet,
    seg_frozen: SegNet,
    samples: Sequence[PairedSample],
    cfg: TrainConfig,
    epoch_callback: Callable[[int, nn.Module, float], None] | None = None,
) -> TrainResult:
    """Robust derain training: each batch, build delta_n against the frozen
    clean-pretrained segmenter on the rainy input, then step the restorer
    toward the clean target. The segmenter is hash-checked every epoch."""
    return _train_derain(model, samples, cfg, seg_frozen=seg_frozen, ama=False, epoch_callback=epoch_callback)


def train_pearl_ama(
    model: DerainNet,
    seg_frozen: SegNet,
    samples: Sequence[PairedSample],
    cfg: TrainConfig,
    epoch_callback: Callable[[int, nn.Module, float], None] | None = None,
) -> TrainResult:
    """Like train_pearl, but the regression target is the clean image shifted by
    the loss-lowering mirror perturbation, clipped to the box."""
    if not cfg.ama_enabled:
        raise ValueError("train_pearl_ama requires cfg.ama_enabled")
    return _train_derain(model, samples, cfg, seg_frozen=seg_frozen, ama=True, epoch_callback=epoch_callback)


class Pipeline(nn.Module):
    """Optional restoration stage followed by segmentation; order is fixed."""

    def __init__(self, seg: SegNet, derain: DerainNet | None = None):
        super().__init__()
        if derain is not None and not isinstance(derain, DerainNet):
            raise TypeError("derain stage must be a DerainNet")
        if not isinstance(seg, SegNet):
            raise TypeError("seg stage must be a SegNet")
        self.derain = derain
        self.seg = seg

    @property
    def stage_names(self) -> tuple[str, ...]:
        return ("derain", "seg") if self.derain is not None else ("seg",)

    @property
    def num_classes(self) -> int:
        return self.seg.num_classes

    def restore(self, x: torch.Tensor) -> torch.Tensor:
        return x if self.derain is None else self.derain(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.seg(self.restore(x))

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x).argmax(dim=1)


def assemble_nat(derain: DerainNet, robust_seg: SegNet) -> Pipeline:
    """Compose a pretrained restorer with an adversarially trained segmenter.

    Pure assembly; no weights change. Raises on incompatible components.
    """
    if not isinstance(derain, DerainNet):
        raise TypeError("derain component must be a DerainNet")
    if not isinstance(robust_seg, SegNet):
        raise TypeError("segmentation component must be a SegNet")
    return Pipeline(seg=robust_seg, derain=derain)
