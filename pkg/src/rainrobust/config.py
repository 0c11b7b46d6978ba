"""Run configuration: built-in defaults, YAML files, dotted-path overrides.

Precedence is command-line flags > config file > built-in defaults, and the
fully merged tree is snapshotted into the run directory before any work runs.
"""

from __future__ import annotations

import copy
import os
import re
from pathlib import Path

import yaml

from .attacks import AttackSpec

OUTPUT_ROOT_ENV = "RAINROBUST_OUTPUT_ROOT"
SNAPSHOT_NAME = "config.snapshot"

EPS_4 = 4.0 / 255.0
EPS_8 = 8.0 / 255.0


class ConfigError(Exception):
    """Configuration file or override could not be parsed/validated."""


def default_config() -> dict:
    return copy.deepcopy(
        {
            "run": {
                "dir": "runs/default",
                "seed": 0,
            },
            "dataset": {
                "dir": None,  # defaults to <run.dir>/dataset
                "height": 64,
                "width": 64,
                "num_classes": 5,
                "shapes_per_image": 5,
                "background_noise_amp": 0.08,
                "train_count": 2000,
                "test_count": 200,
                "rain": {
                    "density": 0.05,
                    "streak_length": 15,
                    "angle_low": 60.0,
                    "angle_high": 120.0,
                    "intensity": 0.6,
                },
            },
            "models": {
                "seg": {"base_channels": 10},
                "seg_alt": {"base_channels": 12, "seed_offset": 101},
                "derain": {"channels": 12, "blocks": 6, "mode": "residual"},
            },
            "train": {
                "batch_size": 32,
                "momentum": 0.9,
                "defense_loss": "mse",
                "ssim_weight": 0.2,
                "ama_variant": "independent_descent",
                "train_on": "clean",
                "epochs": {"seg": 3, "derain": 2, "at": 2, "pearl": 2, "pearl_ama": 2},
                "lr": {"seg": 0.01, "derain": 0.001},
                "optimizer": {"seg": "sgd_momentum", "derain": "adam"},
                "attack": {
                    "method": "bim",
                    "epsilon": EPS_8,
                    "alpha": None,
                    "steps": 5,
                    "kappa": 0.0,
                    "random_init": None,
                },
                "val_count": 32,
            },
            "eval": {
                "pipelines": ["seg", "robust_seg", "derain_seg", "nat", "pearl", "pearl_ama"],
                "attacks": ["bim3", "bim5", "bim10", "pgd10", "cw"],
                "epsilons": [EPS_4, EPS_8],
                "seeds": [0],
                "batch_size": 32,
                "include_rain_only": True,
                "attack_through_derain": False,
                "transplant": {"enabled": False},
            },
        }
    )


def _deep_merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict) and not isinstance(value, dict) and value is not None:
            raise ConfigError(f"config key {here} expects a mapping")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _deep_merge(base[key], value, here)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> dict:
    """Merge defaults <- file <- dotted overrides and validate the result."""
    cfg = default_config()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config file {path}: {exc}")
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must contain a mapping at top level")
        cfg = _deep_merge(cfg, loaded)
    for item in overrides or []:
        cfg = apply_override(cfg, item)
    validate_config(cfg)
    return cfg


def apply_override(cfg: dict, assignment: str) -> dict:
    """Apply one 'a.b.c=value' override; value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override must look like key.path=value, got {assignment!r}")
    key_path, _, raw = assignment.partition("=")
    keys = key_path.strip().split(".")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}: {exc}")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node, dict) or k not in node:
            raise ConfigError(f"unknown config key: {key_path}")
        node = node[k]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise ConfigError(f"unknown config key: {key_path}")
    node[keys[-1]] = value
    return cfg


_ATTACK_NAME_RE = re.compile(r"^(fgsm|bim|pgd|cw)(\d*)$")


def parse_attack_name(name: str, epsilon: float) -> AttackSpec:
    m = _ATTACK_NAME_RE.match(name)
    if not m:
        raise ConfigError(f"cannot parse attack name {name!r} (expected e.g. bim5, pgd10, cw, fgsm)")
    method, steps_s = m.groups()
    if method == "fgsm":
        if steps_s:
            raise ConfigError("fgsm takes no step count")
        return AttackSpec(method="fgsm", epsilon=epsilon, steps=1)
    steps = int(steps_s) if steps_s else 10
    return AttackSpec(method=method, epsilon=epsilon, steps=steps)


def attack_spec_from_config(node: dict, seed: int = 0) -> AttackSpec:
    return AttackSpec(
        method=node["method"],
        epsilon=float(node["epsilon"]),
        alpha=None if node["alpha"] is None else float(node["alpha"]),
        steps=int(node["steps"]),
        kappa=float(node["kappa"]),
        random_init=node["random_init"],
        seed=seed,
    )


def validate_config(cfg: dict) -> None:
    try:
        attack_spec_from_config(cfg["train"]["attack"])
        for name in cfg["eval"]["attacks"]:
            parse_attack_name(name, EPS_8)
        for eps in cfg["eval"]["epsilons"]:
            if not 0.0 <= float(eps) <= 1.0:
                raise ConfigError(f"eval epsilon {eps} outside [0, 1]")
        if not cfg["eval"]["pipelines"]:
            raise ConfigError("eval.pipelines is empty")
        for count_key in ("train_count", "test_count"):
            if int(cfg["dataset"][count_key]) < 1:
                raise ConfigError(f"dataset.{count_key} must be >= 1")
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}")


def resolve_run_dir(cfg: dict) -> Path:
    """run.dir, placed under the output-root env override when it is relative."""
    run_dir = Path(str(cfg["run"]["dir"]))
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not run_dir.is_absolute():
        run_dir = Path(root) / run_dir
    return run_dir


def canonical_yaml(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)


def snapshot_config(cfg: dict, run_dir: Path, overwrite: bool = False) -> Path:
    """Write the merged config before any work; a differing existing snapshot
    means the run directory belongs to another experiment."""
    run_dir.mkdir(parents=True, exist_ok=True)
    snap = run_dir / SNAPSHOT_NAME
    text = canonical_yaml(cfg)
    if snap.exists() and not overwrite:
        if snap.read_text() != text:
            raise ConfigError(
                f"run directory {run_dir} already holds a different config snapshot; "
                "use a fresh directory or pass --overwrite"
            )
        return snap
    snap.write_text(text)
    return snap
