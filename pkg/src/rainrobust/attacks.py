"""L-infinity attack generators for dense prediction.

naa_generate produces loss-raising ("negative") perturbations via K-step
signed-gradient ascent inside the epsilon ball; ama_generate produces the
loss-lowering mirror perturbation that is added to the clean target during
robust derain training. All outputs satisfy both the epsilon bound and the
image box exactly (not up to tolerance).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .metrics import IGNORE_ID

METHODS = ("fgsm", "bim", "pgd", "cw")
AMA_VARIANTS = ("independent_descent", "mirror_of_naa")


def mix_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary hashable parts (process-independent)."""
    h = hashlib.sha256(repr(tuple(parts)).encode()).digest()
    return int.from_bytes(h[:8], "little") & 0x7FFFFFFFFFFFFFFF


@dataclass(frozen=True)
class AttackSpec:
    """One attack configuration.

    alpha=None selects the schedule min(epsilon, 2.5*epsilon/steps);
    random_init=None lets the method decide (uniform start for pgd only).
    epsilon 0 is the degenerate no-attack budget: generators return zeros.
    """

    method: str = "bim"
    epsilon: float = 8.0 / 255.0
    alpha: float | None = None
    steps: int = 5
    norm_order: str = "inf"
    kappa: float = 0.0
    random_init: bool | None = None
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}")
        if self.norm_order != "inf":
            raise ValueError(f"only the inf norm is implemented, got {self.norm_order!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not (math.isfinite(self.kappa) and self.kappa >= 0.0):
            raise ValueError("kappa must be finite and >= 0")
        if self.method == "fgsm":
            if self.steps != 1:
                raise ValueError("fgsm forces steps=1")
            if self.alpha is not None and self.alpha != self.epsilon:
                raise ValueError("fgsm forces alpha=epsilon")
            if self.random_init:
                raise ValueError("fgsm forces random_init=False")
        if self.alpha is not None and self.epsilon > 0:
            if not 0.0 < self.alpha <= self.epsilon:
                raise ValueError(f"alpha must lie in (0, epsilon], got {self.alpha}")

    @property
    def effective_alpha(self) -> float:
        if self.method == "fgsm":
            return self.epsilon
        if self.alpha is not None:
            return self.alpha
        return min(self.epsilon, 2.5 * self.epsilon / self.steps)

    @property
    def effective_random_init(self) -> bool:
        if self.random_init is None:
            return self.method == "pgd"
        return self.random_init

    @property
    def name(self) -> str:
        if self.method in ("bim", "pgd"):
            return f"{self.method}{self.steps}"
        return self.method

    def with_seed(self, seed: int) -> "AttackSpec":
        return replace(self, seed=seed)


@dataclass(frozen=True)
class NaaTrace:
    """Per-step gradient signs recorded during naa_generate, for the mirror."""

    signs: tuple[torch.Tensor, ...]
    alpha: float
    epsilon: float


def project(delta: torch.Tensor, epsilon: float, anchor: torch.Tensor) -> torch.Tensor:
    """Clamp delta into the intersection of the eps ball and the image box.

    Equivalent to clamp(delta, -eps, eps) followed by
    clamp(anchor + delta, 0, 1) - anchor, but computed as a single interval
    clamp so it is exactly idempotent in float32.
    """
    if delta.shape != anchor.shape:
        raise ValueError(f"shape mismatch: delta {tuple(delta.shape)} vs anchor {tuple(anchor.shape)}")
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    lo = torch.clamp(-anchor, min=-epsilon)
    hi = torch.clamp(1.0 - anchor, max=epsilon)
    return torch.minimum(torch.maximum(delta, lo), hi)


def attack_loss(logits: torch.Tensor, labels: torch.Tensor, ignore_id: int = IGNORE_ID) -> torch.Tensor:
    """Mean per-pixel cross-entropy over non-ignored pixels.

    Serves as both the attack objective and the segmentation training loss
    (they share the same functional form).
    """
    if logits.shape[0] != labels.shape[0] or logits.shape[-2:] != labels.shape[-2:]:
        raise ValueError(f"logits {tuple(logits.shape)} incompatible with labels {tuple(labels.shape)}")
    if not (labels != ignore_id).any():
        raise ValueError("all pixels carry the ignore id; loss undefined")
    return F.cross_entropy(logits, labels, ignore_index=ignore_id)


def cw_loss(
    logits: torch.Tensor, labels: torch.Tensor, kappa: float = 0.0, ignore_id: int = IGNORE_ID
) -> torch.Tensor:
    """Mean per-pixel margin objective -max(z_y - max_{j!=y} z_j, -kappa).

    Maximizing it pushes the true-class logit below the runner-up by kappa.
    """
    if not (math.isfinite(kappa) and kappa >= 0.0):
        raise ValueError("kappa must be finite and >= 0")
    if logits.shape[0] != labels.shape[0] or logits.shape[-2:] != labels.shape[-2:]:
        raise ValueError(f"logits {tuple(logits.shape)} incompatible with labels {tuple(labels.shape)}")
    valid = labels != ignore_id
    if not valid.any():
        raise ValueError("all pixels carry the ignore id; loss undefined")
    safe_labels = labels.masked_fill(~valid, 0).unsqueeze(1)
    z_true = logits.gather(1, safe_labels).squeeze(1)
    masked = logits.scatter(1, safe_labels, float("-inf"))
    z_other = masked.max(dim=1).values
    margin = z_true - z_other
    contrib = -torch.clamp(margin, min=-kappa)
    return contrib[valid].mean()


def _loss_fn_for(spec: AttackSpec):
    if spec.method == "cw":
        return lambda logits, y: cw_loss(logits, y, kappa=spec.kappa)
    return attack_loss


def _init_delta(x: torch.Tensor, spec: AttackSpec, sample_seeds: Sequence[int]) -> torch.Tensor:
    delta = torch.zeros_like(x)
    if spec.effective_random_init:
        for i in range(x.shape[0]):
            g = torch.Generator().manual_seed(int(sample_seeds[i]))
            delta[i].uniform_(-spec.epsilon, spec.epsilon, generator=g)
    return delta


def _default_seeds(spec: AttackSpec, n: int) -> list[int]:
    return [mix_seed(spec.seed, i) for i in range(n)]


def naa_generate(
    model: nn.Module,
    x: torch.Tensor,
    labels: torch.Tensor,
    spec: AttackSpec,
    sample_seeds: Sequence[int] | None = None,
    record_trace: bool = False,
):
    """Generate the loss-raising perturbation delta_n for a batch.

    x: NCHW images in [0,1]; labels: NHW long. The target model is treated as
    frozen (weights untouched, eval mode during generation). Returns the final
    delta, or (delta, NaaTrace) when record_trace is set. Deterministic given
    (model params, x, labels, spec, seeds); seeding only matters for random
    starts, and sample_seeds lets callers tie it to dataset indices so results
    do not depend on batch composition.
    """
    x = x.detach()
    n = x.shape[0]
    if sample_seeds is None:
        sample_seeds = _default_seeds(spec, n)
    if len(sample_seeds) != n:
        raise ValueError("sample_seeds length must match the batch size")

    if spec.epsilon == 0.0:
        delta = torch.zeros_like(x)
        return (delta, NaaTrace(signs=(), alpha=0.0, epsilon=0.0)) if record_trace else delta

    loss_fn = _loss_fn_for(spec)
    alpha = spec.effective_alpha
    delta = _init_delta(x, spec, sample_seeds)
    signs: list[torch.Tensor] = []

    was_training = model.training
    model.eval()
    try:
        for _ in range(spec.steps):
            d = delta.detach().requires_grad_(True)
            loss = loss_fn(model(x + d), labels)
            (grad,) = torch.autograd.grad(loss, d)
            s = grad.sign()
            if record_trace:
                signs.append(s.detach())
            delta = project(delta.detach() + alpha * s, spec.epsilon, x)
    finally:
        model.train(was_training)

    delta = delta.detach()
    if record_trace:
        return delta, NaaTrace(signs=tuple(signs), alpha=alpha, epsilon=spec.epsilon)
    return delta


def ama_generate(
    model: nn.Module,
    x_attacked: torch.Tensor,
    clean: torch.Tensor,
    labels: torch.Tensor,
    spec: AttackSpec,
    variant: str = "independent_descent",
    naa_trace: NaaTrace | None = None,
    sample_seeds: Sequence[int] | None = None,
) -> torch.Tensor:
    """Generate the loss-lowering mirror perturbation delta_m against `clean`.

    independent_descent runs K projected signed-descent steps on the attack
    objective starting from zero; mirror_of_naa negates the recorded sign sum
    of the paired delta_n generation and projects once against `clean`.
    `x_attacked` is the degraded input the paired delta_n was built on; it is
    carried for interface completeness (the descent anchors on `clean`).
    """
    if variant not in AMA_VARIANTS:
        raise ValueError(f"unknown AMA variant {variant!r}")
    clean = clean.detach()
    if spec.epsilon == 0.0:
        return torch.zeros_like(clean)

    if variant == "mirror_of_naa":
        if naa_trace is None:
            raise ValueError("mirror_of_naa requires the paired NAA trace")
        mirrored = torch.zeros_like(clean)
        for s in naa_trace.signs:
            mirrored = mirrored - naa_trace.alpha * s
        return project(mirrored, spec.epsilon, clean)

    loss_fn = _loss_fn_for(spec)
    alpha = spec.effective_alpha
    delta = torch.zeros_like(clean)
    was_training = model.training
    model.eval()
    try:
        for _ in range(spec.steps):
            d = delta.detach().requires_grad_(True)
            loss = loss_fn(model(clean + d), labels)
            (grad,) = torch.autograd.grad(loss, d)
            delta = project(delta.detach() - alpha * grad.sign(), spec.epsilon, clean)
    finally:
        model.train(was_training)
    return delta.detach()


def budget_audit(delta: torch.Tensor, anchor: torch.Tensor, epsilon: float) -> None:
    """Assert both feasibility constraints machine-exactly.

    Checks the carried perturbation rather than re-subtracting the attacked
    image (float re-subtraction can exceed epsilon by an ulp even when the
    perturbation itself is exactly feasible), and compares against epsilon in
    the perturbation's own dtype.
    """
    eps = torch.as_tensor(epsilon, dtype=delta.dtype)
    if bool((delta.abs() > eps).any()):
        raise AssertionError(f"perturbation exceeds budget: {delta.abs().max().item()} > {epsilon}")
    x_adv = anchor + delta
    if x_adv.min().item() < 0.0 or x_adv.max().item() > 1.0:
        raise AssertionError("attacked image leaves the [0,1] box")
