"""Tiny reference networks, deterministic initialization, checkpoint format.

Both nets avoid normalization and pooling layers on purpose: per-sample
gradients stay independent of batch composition, and evaluation-mode forward
passes are exactly deterministic. Activations are ELU (C1-smooth), which keeps
finite-difference gradient validation tight.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Checkpoint file is unreadable or does not match what the caller expects."""


def _check_image_batch(x: torch.Tensor) -> None:
    if x.dim() != 4 or x.shape[1] != 3:
        raise ValueError(f"expected NCHW image batch with 3 channels, got shape {tuple(x.shape)}")
    if x.shape[2] % 8 != 0 or x.shape[3] % 8 != 0:
        raise ValueError(f"spatial dims must be divisible by 8, got {tuple(x.shape[2:])}")


class SegNet(nn.Module):
    """Encoder-decoder segmenter: 3 stride-2 stages down, nearest-neighbor up,
    skip connections, ~1e5 parameters at the default width."""

    kind = "seg"

    def __init__(self, num_classes: int, base_channels: int = 10):
        super().__init__()
        if num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        self.num_classes = num_classes
        self.base_channels = base_channels
        b = base_channels
        widths = [b, 2 * b, 4 * b, 6 * b]
        self.enc0 = nn.Conv2d(3, widths[0], 3, padding=1)
        self.down1 = nn.Conv2d(widths[0], widths[1], 3, stride=2, padding=1)
        self.down2 = nn.Conv2d(widths[1], widths[2], 3, stride=2, padding=1)
        self.down3 = nn.Conv2d(widths[2], widths[3], 3, stride=2, padding=1)
        self.mid = nn.Conv2d(widths[3], widths[3], 3, padding=1)
        self.up1 = nn.Conv2d(widths[3] + widths[2], widths[2], 3, padding=1)
        self.up2 = nn.Conv2d(widths[2] + widths[1], widths[1], 3, padding=1)
        self.up3 = nn.Conv2d(widths[1] + widths[0], widths[0], 3, padding=1)
        self.head = nn.Conv2d(widths[0], num_classes, 1)

    def descriptor(self) -> dict:
        return {"num_classes": self.num_classes, "base_channels": self.base_channels}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_image_batch(x)
        act = F.elu
        e0 = act(self.enc0(x))
        e1 = act(self.down1(e0))
        e2 = act(self.down2(e1))
        e3 = act(self.down3(e2))
        m = act(self.mid(e3))
        u1 = act(self.up1(torch.cat([F.interpolate(m, scale_factor=2, mode="nearest"), e2], dim=1)))
        u2 = act(self.up2(torch.cat([F.interpolate(u1, scale_factor=2, mode="nearest"), e1], dim=1)))
        u3 = act(self.up3(torch.cat([F.interpolate(u2, scale_factor=2, mode="nearest"), e0], dim=1)))
        return self.head(u3)

    def reset_parameters_(self, generator: torch.Generator) -> None:
        _uniform_init_(self, generator)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.elu(self.conv1(x)))


class DerainNet(nn.Module):
    """Residual restorer: a conv stem, residual blocks, and a head that predicts
    the degradation layer. residual mode returns clip(x - predicted, 0, 1);
    direct mode clips the head output itself."""

    kind = "derain"

    def __init__(self, channels: int = 12, blocks: int = 6, mode: str = "residual"):
        super().__init__()
        if mode not in ("residual", "direct"):
            raise ValueError(f"unknown derain mode {mode!r}")
        self.channels = channels
        self.blocks = blocks
        self.mode = mode
        self.stem = nn.Conv2d(3, channels, 3, padding=1)
        self.body = nn.Sequential(*[ResidualBlock(channels) for _ in range(blocks)])
        self.head = nn.Conv2d(channels, 3, 3, padding=1)

    def descriptor(self) -> dict:
        return {"channels": self.channels, "blocks": self.blocks, "mode": self.mode}

    def predict_rain(self, x: torch.Tensor) -> torch.Tensor:
        _check_image_batch(x)
        return self.head(self.body(F.elu(self.stem(x))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.predict_rain(x)
        if self.mode == "residual":
            return torch.clamp(x - out, 0.0, 1.0)
        return torch.clamp(out, 0.0, 1.0)

    def reset_parameters_(self, generator: torch.Generator) -> None:
        _uniform_init_(self, generator)
        # zero head: the restorer starts as the identity map
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()


def _uniform_init_(model: nn.Module, generator: torch.Generator) -> None:
    """Fill weights with U(-1/sqrt(fan_in), 1/sqrt(fan_in)) from an explicit
    generator; biases zero. Walk order is the module registration order, so
    the result depends only on (architecture, seed)."""
    with torch.no_grad():
        for _, p in model.named_parameters():
            if p.dim() >= 2:
                fan_in = p[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                p.uniform_(-bound, bound, generator=generator)
            else:
                p.zero_()


_BUILDERS: dict[str, Callable[..., nn.Module]] = {
    "seg": lambda **kw: SegNet(**kw),
    "derain": lambda **kw: DerainNet(**kw),
}


def build_model(kind: str, descriptor: dict) -> nn.Module:
    if kind not in _BUILDERS:
        raise ValueError(f"unknown model kind {kind!r}")
    return _BUILDERS[kind](**descriptor)


def init_model(kind: str, descriptor: dict, seed: int) -> nn.Module:
    """Construct a model and initialize it deterministically from the seed."""
    model = build_model(kind, descriptor)
    g = torch.Generator().manual_seed(seed)
    model.reset_parameters_(g)
    return model


def descriptor_hash(descriptor: dict) -> str:
    return hashlib.sha256(json.dumps(descriptor, sort_keys=True).encode()).hexdigest()


def model_param_hash(model: nn.Module) -> str:
    """Hash of all parameter bytes; cheap freeze/change detector."""
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | Path, model: nn.Module) -> None:
    """Write a versioned container: key=value text header, blank line, then the
    raw little-endian float32 parameter payload in named_parameters order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kind = getattr(model, "kind", None)
    if kind not in _BUILDERS:
        raise CheckpointError(f"model of type {type(model).__name__} has no registered kind")
    descriptor = model.descriptor()
    lines = [
        f"format_version={CHECKPOINT_VERSION}",
        f"model_kind={kind}",
        f"descriptor={json.dumps(descriptor, sort_keys=True)}",
        f"config_hash={descriptor_hash(descriptor)}",
    ]
    payload = bytearray()
    for name, p in model.named_parameters():
        arr = p.detach().cpu().numpy()
        if arr.dtype != np.float32:
            raise CheckpointError(f"parameter {name} is {arr.dtype}, expected float32")
        shape = ",".join(str(d) for d in arr.shape) or "0"
        lines.append(f"tensor={name}:{shape}")
        payload.extend(arr.tobytes())
    blob = ("\n".join(lines) + "\n\n").encode() + bytes(payload)
    path.write_bytes(blob)


def load_checkpoint(
    path: str | Path,
    expected_kind: str | None = None,
    expected_descriptor: dict | None = None,
) -> nn.Module:
    """Rebuild a model from a checkpoint; round-trips forward outputs bitwise.

    Rejects unknown format versions, kind mismatches, descriptor mismatches
    and truncated/corrupt payloads.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise CheckpointError(f"no header terminator in {path}")
    header_lines = blob[:sep].decode().splitlines()
    payload = blob[sep + 2 :]

    fields: dict[str, str] = {}
    tensors: list[tuple[str, tuple[int, ...]]] = []
    for line in header_lines:
        key, _, value = line.partition("=")
        if key == "tensor":
            name, _, shape_s = value.partition(":")
            shape = tuple(int(d) for d in shape_s.split(",") if d != "0") if shape_s != "0" else ()
            tensors.append((name, shape))
        else:
            fields[key] = value

    if fields.get("format_version") != str(CHECKPOINT_VERSION):
        raise CheckpointError(f"unsupported format_version {fields.get('format_version')!r} in {path}")
    kind = fields.get("model_kind")
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointError(f"model_kind mismatch in {path}: found {kind!r}, expected {expected_kind!r}")
    try:
        descriptor = json.loads(fields["descriptor"])
    except (KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad descriptor in {path}: {exc}")
    if fields.get("config_hash") != descriptor_hash(descriptor):
        raise CheckpointError(f"config_hash does not match descriptor in {path}")
    if expected_descriptor is not None and descriptor != expected_descriptor:
        raise CheckpointError(
            f"architecture descriptor mismatch in {path}: found {descriptor}, expected {expected_descriptor}"
        )

    model = build_model(kind, descriptor)
    expected_names = [n for n, _ in model.named_parameters()]
    if [n for n, _ in tensors] != expected_names:
        raise CheckpointError(f"tensor manifest does not match architecture in {path}")

    offset = 0
    with torch.no_grad():
        for (name, shape), (_, p) in zip(tensors, model.named_parameters()):
            if tuple(p.shape) != shape:
                raise CheckpointError(f"shape mismatch for {name} in {path}")
            nbytes = p.numel() * 4
            chunk = payload[offset : offset + nbytes]
            if len(chunk) != nbytes:
                raise CheckpointError(f"corrupt payload (truncated at {name}) in {path}")
            arr = np.frombuffer(chunk, dtype=np.float32).reshape(shape or (1,)).copy()
            p.copy_(torch.from_numpy(arr.reshape(p.shape)))
            offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"corrupt payload ({len(payload) - offset} trailing bytes) in {path}")
    return model


def grad_wrt(loss: torch.Tensor, *leaves: torch.Tensor) -> tuple[torch.Tensor, ...]:
    """Exact reverse-mode gradient of a scalar loss w.r.t. designated leaves."""
    if loss.dim() != 0:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    return torch.autograd.grad(loss, leaves)


def fd_directional(f: Callable[[torch.Tensor], float], x: torch.Tensor, d: torch.Tensor, h: float = 1e-4) -> float:
    """Central-difference directional derivative of f at x along d.

    Pure evaluation (no autograd); the independent check for grad_wrt.
    """
    return (f(x + h * d) - f(x - h * d)) / (2.0 * h)
