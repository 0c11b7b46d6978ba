"""Command-line surface: synth, pretrain, train, eval, report, attack-demo.

Every command materializes the merged config, snapshots it into the run
directory before doing work, and writes all outputs under the fixed layout
(checkpoints/, metrics/, images/, logs/). Exit codes: 0 ok, 2 config/usage
error, 3 missing or unreadable artifact, 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import metrics as M
from .attacks import AttackSpec, ama_generate, mix_seed, naa_generate
from .config import (
    ConfigError,
    attack_spec_from_config,
    load_config,
    parse_attack_name,
    resolve_run_dir,
    snapshot_config,
)
from .evaluation import (
    PIPELINE_COMPONENTS,
    MetricsReport,
    MissingArtifactError,
    PipelineSpec,
    cross_model_eval,
    evaluate_defense,
    qualitative_dump,
)
from .models import CheckpointError, init_model, load_checkpoint, save_checkpoint
from .synthesis import (
    DatasetFormatError,
    RainParams,
    SceneParams,
    load_dataset,
    make_dataset,
    save_dataset,
)
from .training import (
    Pipeline,
    TrainConfig,
    TrainingDiverged,
    assemble_nat,
    pretrain_derain,
    pretrain_seg,
    stack_corpus,
    train_at,
    train_pearl,
    train_pearl_ama,
)

CHECKPOINTS = {
    "seg": "checkpoints/seg.ckpt",
    "seg_alt": "checkpoints/seg_alt.ckpt",
    "robust_seg": "checkpoints/robust_seg.ckpt",
    "derain": "checkpoints/derain.ckpt",
    "pearl_derain": "checkpoints/pearl_derain.ckpt",
    "pearl_ama_derain": "checkpoints/pearl_ama_derain.ckpt",
}

REGIMES = ("at", "nat", "pearl", "pearl-ama")


class UsageError(ConfigError):
    """Command-level misuse (e.g. re-running into a completed run directory)."""


def _log(run_dir: Path, message: str) -> None:
    print(message)
    logs = run_dir / "logs"
    logs.mkdir(parents=True, exist_ok=True)
    with open(logs / "run.log", "a") as fh:
        fh.write(message + "\n")


def _guard(run_dir: Path, command: str, overwrite: bool) -> None:
    marker = run_dir / "logs" / f"{command}.done"
    if marker.exists() and not overwrite:
        raise UsageError(
            f"run directory {run_dir} already completed '{command}'; "
            "use a fresh directory or pass --overwrite"
        )


def _mark_done(run_dir: Path, command: str) -> None:
    marker = run_dir / "logs" / f"{command}.done"
    marker.parent.mkdir(parents=True, exist_ok=True)
    marker.write_text("ok\n")


def _ckpt_path(run_dir: Path, key: str, must_exist: bool = False) -> Path:
    path = run_dir / CHECKPOINTS[key]
    if must_exist and not path.exists():
        raise MissingArtifactError(f"required checkpoint missing: {path}")
    return path


def _scene_params(cfg: dict, seed: int) -> SceneParams:
    d = cfg["dataset"]
    return SceneParams(
        height=int(d["height"]),
        width=int(d["width"]),
        num_classes=int(d["num_classes"]),
        shapes_per_image=int(d["shapes_per_image"]),
        background_noise_amp=float(d["background_noise_amp"]),
        seed=seed,
    )


def _rain_params(cfg: dict, seed: int) -> RainParams:
    r = cfg["dataset"]["rain"]
    return RainParams(
        density=float(r["density"]),
        streak_length=int(r["streak_length"]),
        angle_low=float(r["angle_low"]),
        angle_high=float(r["angle_high"]),
        intensity=float(r["intensity"]),
        seed=seed,
    )


def _dataset_root(cfg: dict, run_dir: Path) -> Path:
    configured = cfg["dataset"]["dir"]
    return Path(configured) if configured else run_dir / "dataset"


def _load_split(cfg: dict, run_dir: Path, split: str):
    root = _dataset_root(cfg, run_dir) / split
    if not (root / "manifest.txt").exists():
        raise MissingArtifactError(f"dataset split not found (run synth first?): {root}")
    return load_dataset(root)


def _val_corpus(cfg: dict, run_dir: Path):
    seed = int(cfg["run"]["seed"]) + 10_000_000
    scene = _scene_params(cfg, seed)
    rain = _rain_params(cfg, seed)
    return make_dataset(scene, rain, int(cfg["train"]["val_count"]))


def _train_config(cfg: dict, stage: str, *, ama: bool = False) -> TrainConfig:
    t = cfg["train"]
    group = "seg" if stage in ("seg", "at") else "derain"
    return TrainConfig(
        epochs=int(t["epochs"][stage]),
        batch_size=int(t["batch_size"]),
        learning_rate=float(t["lr"][group]),
        optimizer=str(t["optimizer"][group]),
        momentum=float(t["momentum"]),
        attack=attack_spec_from_config(t["attack"], seed=int(cfg["run"]["seed"])),
        defense_loss=str(t["defense_loss"]),
        ssim_weight=float(t["ssim_weight"]),
        ama_enabled=ama,
        ama_variant=str(t["ama_variant"]),
        train_on=str(t["train_on"]),
        seed=int(cfg["run"]["seed"]),
    )


def _write_epoch_log(run_dir: Path, name: str, header: str, rows: list[str]) -> None:
    path = run_dir / "metrics" / f"{name}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(header + "\n" + "\n".join(rows) + ("\n" if rows else ""))


@torch.no_grad()
def _val_allacc(model, val_tensors, delta=None) -> float:
    x = val_tensors["clean"] if delta is None else val_tensors["clean"] + delta
    pred = model(x).argmax(dim=1)
    cm = M.ConfusionMatrix(model.num_classes)
    M.accumulate(cm, pred.numpy(), val_tensors["labels"].numpy())
    return M.allacc(cm)


def _val_attacked_restoration(derain, seg, val_tensors, attack: AttackSpec) -> tuple[float, float]:
    """(mean PSNR of restored-vs-clean, mIoU through the segmenter), under attack."""
    x, y, c = val_tensors["rainy"], val_tensors["labels"], val_tensors["clean"]
    if attack.epsilon > 0:
        seeds = [mix_seed(attack.seed, "val", i) for i in range(x.shape[0])]
        x = x + naa_generate(seg, x, y, attack, sample_seeds=seeds)
    with torch.no_grad():
        restored = derain(x)
        pred = seg(restored).argmax(dim=1)
    psnrs = [
        M.psnr(restored[i].permute(1, 2, 0).numpy(), c[i].permute(1, 2, 0).numpy())
        for i in range(x.shape[0])
    ]
    cm = M.ConfusionMatrix(seg.num_classes)
    M.accumulate(cm, pred.numpy(), y.numpy())
    return float(np.mean(psnrs)), M.miou(cm)


class _BestTracker:
    """Keeps the state dict of the best-scoring epoch (higher is better)."""

    def __init__(self, model):
        self.model = model
        self.best_score = None
        self.best_state = None

    def update(self, score: float) -> None:
        if self.best_score is None or score > self.best_score:
            self.best_score = score
            self.best_state = {k: v.detach().clone() for k, v in self.model.state_dict().items()}

    def restore(self) -> None:
        if self.best_state is not None:
            self.model.load_state_dict(self.best_state)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: dict, run_dir: Path, overwrite: bool) -> None:
    _guard(run_dir, "synth", overwrite)
    t0 = time.time()
    seed = int(cfg["run"]["seed"])
    n_train = int(cfg["dataset"]["train_count"])
    n_test = int(cfg["dataset"]["test_count"])
    root = _dataset_root(cfg, run_dir)

    train_scene, train_rain = _scene_params(cfg, seed), _rain_params(cfg, seed)
    test_scene = replace(train_scene, seed=seed + n_train)
    test_rain = replace(train_rain, seed=seed + n_train)

    train = make_dataset(train_scene, train_rain, n_train)
    save_dataset(root / "train", train, train_scene, train_rain)
    test = make_dataset(test_scene, test_rain, n_test)
    save_dataset(root / "test", test, test_scene, test_rain)

    from .synthesis import corpus_mean_psnr

    _log(
        run_dir,
        f"[synth] wrote {n_train} train / {n_test} test samples to {root} "
        f"(rain severity: train {corpus_mean_psnr(train):.2f} dB, test {corpus_mean_psnr(test):.2f} dB, "
        f"{time.time() - t0:.1f}s)",
    )
    _mark_done(run_dir, "synth")


def cmd_pretrain(cfg: dict, run_dir: Path, kind: str, overwrite: bool) -> None:
    command = f"pretrain_{kind}"
    _guard(run_dir, command, overwrite)
    t0 = time.time()
    seed = int(cfg["run"]["seed"])
    train = _load_split(cfg, run_dir, "train")
    val = stack_corpus(_val_corpus(cfg, run_dir))
    rows: list[str] = []

    if kind == "seg":
        model = init_model("seg", {"num_classes": int(cfg["dataset"]["num_classes"]), **cfg["models"]["seg"]}, seed)
        tracker = _BestTracker(model)

        def on_epoch(epoch, m, loss):
            acc = _val_allacc(m, val)
            tracker.update(acc)
            rows.append(f"{epoch},{loss:.6f},{acc:.6f}")

        cfg_t = _train_config(cfg, "seg")
        pretrain_seg(model, train, cfg_t, epoch_callback=on_epoch)
        tracker.restore()
        _write_epoch_log(run_dir, "train_seg", "epoch,loss,val_allAcc", rows)
        save_checkpoint(_ckpt_path(run_dir, "seg"), model)

        alt_cfg = cfg["models"]["seg_alt"]
        alt = init_model(
            "seg",
            {"num_classes": int(cfg["dataset"]["num_classes"]), "base_channels": int(alt_cfg["base_channels"])},
            seed + int(alt_cfg["seed_offset"]),
        )
        pretrain_seg(alt, train, replace(cfg_t, seed=seed + int(alt_cfg["seed_offset"])))
        save_checkpoint(_ckpt_path(run_dir, "seg_alt"), alt)
        _log(run_dir, f"[pretrain seg] val allAcc {tracker.best_score:.4f} ({time.time() - t0:.1f}s)")
    elif kind == "derain":
        model = init_model("derain", dict(cfg["models"]["derain"]), seed + 1)
        tracker = _BestTracker(model)

        def on_epoch(epoch, m, loss):
            with torch.no_grad():
                restored = m(val["rainy"])
            p = float(
                np.mean(
                    [
                        M.psnr(restored[i].permute(1, 2, 0).numpy(), val["clean"][i].permute(1, 2, 0).numpy())
                        for i in range(restored.shape[0])
                    ]
                )
            )
            tracker.update(p)
            rows.append(f"{epoch},{loss:.6f},{p:.6f}")

        pretrain_derain(model, train, _train_config(cfg, "derain"), epoch_callback=on_epoch)
        tracker.restore()
        _write_epoch_log(run_dir, "train_derain", "epoch,loss,val_PSNR", rows)
        save_checkpoint(_ckpt_path(run_dir, "derain"), model)
        _log(run_dir, f"[pretrain derain] val PSNR {tracker.best_score:.2f} dB ({time.time() - t0:.1f}s)")
    else:
        raise UsageError(f"unknown pretrain kind {kind!r}")
    _mark_done(run_dir, command)


def cmd_train(cfg: dict, run_dir: Path, regime: str, overwrite: bool) -> None:
    command = f"train_{regime.replace('-', '_')}"
    _guard(run_dir, command, overwrite)
    t0 = time.time()
    train = _load_split(cfg, run_dir, "train")
    val = stack_corpus(_val_corpus(cfg, run_dir))
    rows: list[str] = []

    if regime == "at":
        model = load_checkpoint(_ckpt_path(run_dir, "seg", must_exist=True), expected_kind="seg")
        cfg_t = _train_config(cfg, "at")
        tracker = _BestTracker(model)

        def on_epoch(epoch, m, loss):
            seeds = [mix_seed(cfg_t.seed, "val_at", i) for i in range(val["clean"].shape[0])]
            delta = naa_generate(m, val["clean"], val["labels"], cfg_t.attack, sample_seeds=seeds)
            acc = _val_allacc(m, val, delta=delta)
            tracker.update(acc)
            rows.append(f"{epoch},{loss:.6f},{acc:.6f}")

        train_at(model, train, cfg_t, epoch_callback=on_epoch)
        tracker.restore()
        _write_epoch_log(run_dir, "train_at", "epoch,loss,val_allAcc_attacked", rows)
        save_checkpoint(_ckpt_path(run_dir, "robust_seg"), model)
        _log(run_dir, f"[train at] attacked val allAcc {tracker.best_score:.4f} ({time.time() - t0:.1f}s)")

    elif regime == "nat":
        derain = load_checkpoint(_ckpt_path(run_dir, "derain", must_exist=True), expected_kind="derain")
        seg = load_checkpoint(_ckpt_path(run_dir, "robust_seg", must_exist=True), expected_kind="seg")
        pipeline = assemble_nat(derain, seg)
        with torch.no_grad():
            logits = pipeline(val["rainy"][:4])
        if logits.shape[1] != seg.num_classes:
            raise CheckpointError("assembled pipeline produces wrong class count")
        manifest = run_dir / "checkpoints" / "nat.pipeline"
        manifest.parent.mkdir(parents=True, exist_ok=True)
        manifest.write_text(
            f"stages={','.join(pipeline.stage_names)}\n"
            f"derain={CHECKPOINTS['derain']}\nseg={CHECKPOINTS['robust_seg']}\n"
        )
        _log(run_dir, f"[train nat] assembly verified, manifest at {manifest} ({time.time() - t0:.1f}s)")

    elif regime in ("pearl", "pearl-ama"):
        ama = regime == "pearl-ama"
        seg = load_checkpoint(_ckpt_path(run_dir, "seg", must_exist=True), expected_kind="seg")
        derain = load_checkpoint(_ckpt_path(run_dir, "derain", must_exist=True), expected_kind="derain")
        stage = "pearl_ama" if ama else "pearl"
        cfg_t = _train_config(cfg, stage, ama=ama)
        tracker = _BestTracker(derain)

        def on_epoch(epoch, m, loss):
            p, iou = _val_attacked_restoration(m, seg, val, cfg_t.attack)
            tracker.update(p)
            rows.append(f"{epoch},{loss:.6f},{p:.6f},{iou:.6f}")

        fn = train_pearl_ama if ama else train_pearl
        fn(derain, seg, train, cfg_t, epoch_callback=on_epoch)
        tracker.restore()
        _write_epoch_log(run_dir, f"train_{stage}", "epoch,L_def,PSNR_attacked,mIoU_attacked", rows)
        save_checkpoint(_ckpt_path(run_dir, "pearl_ama_derain" if ama else "pearl_derain"), derain)
        _log(run_dir, f"[train {regime}] attacked val PSNR {tracker.best_score:.2f} dB ({time.time() - t0:.1f}s)")
    else:
        raise UsageError(f"unknown regime {regime!r}")
    _mark_done(run_dir, command)


def _eval_grid(cfg: dict):
    grid = []
    if cfg["eval"]["include_rain_only"]:
        grid.append(("none", None))
    for eps in cfg["eval"]["epsilons"]:
        for name in cfg["eval"]["attacks"]:
            grid.append((name, parse_attack_name(name, float(eps))))
    return grid


def cmd_eval(cfg: dict, run_dir: Path, overwrite: bool) -> None:
    _guard(run_dir, "eval", overwrite)
    t0 = time.time()
    test = _load_split(cfg, run_dir, "test")
    specs = []
    for kind in cfg["eval"]["pipelines"]:
        seg_key, derain_key = PIPELINE_COMPONENTS[kind]
        specs.append(
            PipelineSpec(
                kind=kind,
                seg_checkpoint=_ckpt_path(run_dir, seg_key, must_exist=True),
                derain_checkpoint=None if derain_key is None else _ckpt_path(run_dir, derain_key, must_exist=True),
            )
        )
    report = evaluate_defense(
        specs,
        test,
        attack_grid=_eval_grid(cfg),
        seeds=[int(s) for s in cfg["eval"]["seeds"]],
        batch_size=int(cfg["eval"]["batch_size"]),
        attack_through_derain=bool(cfg["eval"]["attack_through_derain"]),
        extra_metadata={"run_seed": str(cfg["run"]["seed"])},
    )
    out = run_dir / "metrics" / "eval.csv"
    report.write_csv(out)
    _log(run_dir, f"[eval] {len(report.rows)} rows -> {out} ({time.time() - t0:.1f}s)")

    if cfg["eval"]["transplant"]["enabled"]:
        grid = _eval_grid(cfg)
        seeds = [int(s) for s in cfg["eval"]["seeds"]]
        alt = _ckpt_path(run_dir, "seg_alt", must_exist=True)
        merged = cross_model_eval(
            _ckpt_path(run_dir, "pearl_derain", must_exist=True), alt, test, grid, seeds, "transplant_pearl"
        ).merge(
            cross_model_eval(
                _ckpt_path(run_dir, "derain", must_exist=True), alt, test, grid, seeds, "transplant_pretrained"
            )
        )
        out2 = run_dir / "metrics" / "eval_transplant.csv"
        merged.write_csv(out2)
        _log(run_dir, f"[eval] transplant rows -> {out2}")
    _mark_done(run_dir, "eval")


_ATTACK_ORDER = ["none", "fgsm", "bim3", "bim5", "bim10", "pgd10", "cw"]


def cmd_report(run_dirs: list[Path], out_dir: Path | None) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    merged = MetricsReport()
    found = 0
    for rd in run_dirs:
        metrics_dir = Path(rd) / "metrics"
        for csv in sorted(metrics_dir.glob("eval*.csv")):
            merged = merged.merge(MetricsReport.from_csv(csv))
            found += 1
    if found == 0:
        raise MissingArtifactError(f"no metrics CSVs found under {[str(r) for r in run_dirs]}")

    out = Path(out_dir) if out_dir else Path(run_dirs[0]) / "report"
    out.mkdir(parents=True, exist_ok=True)
    merged.write_csv(out / "merged.csv")

    epsilons = sorted({round(r.epsilon, 8) for r in merged.rows if r.epsilon > 0})
    tables = []
    for eps in epsilons:
        text = merged.table_text(eps)
        tables.append(text)
        (out / f"table_eps{eps:.4f}.txt").write_text(text)

    pipelines = list(dict.fromkeys(r.pipeline for r in merged.rows))
    for metric, label in (("miou", "mIoU"), ("psnr", "PSNR (dB)")):
        for eps in epsilons:
            attacks = [a for a in _ATTACK_ORDER if any(r.attack == a for r in merged.rows)]
            fig, ax = plt.subplots(figsize=(7, 4))
            for p in pipelines:
                ys = []
                for a in attacks:
                    try:
                        e = 0.0 if a == "none" else eps
                        ys.append(merged.seed_mean(p, a, e, metric))
                    except KeyError:
                        ys.append(np.nan)
                ax.plot(attacks, ys, marker="o", label=p)
            ax.set_xlabel("attack")
            ax.set_ylabel(label)
            ax.set_title(f"{label} vs attack strength (eps={eps:.4f})")
            ax.legend(fontsize=8)
            fig.tight_layout()
            fig.savefig(out / f"{metric}_eps{eps:.4f}.png", dpi=120)
            plt.close(fig)

    for text in tables:
        print(text)
    print(f"[report] merged {found} CSVs -> {out}")


def cmd_attack_demo(cfg: dict, run_dir: Path, index: int, overwrite: bool) -> None:
    from PIL import Image

    _guard(run_dir, "attack_demo", overwrite)
    test = _load_split(cfg, run_dir, "test")
    if not 0 <= index < len(test):
        raise UsageError(f"sample index {index} outside dataset of {len(test)} samples")
    seg = load_checkpoint(_ckpt_path(run_dir, "seg", must_exist=True), expected_kind="seg")
    sample = test[index]
    tensors = stack_corpus([sample])
    x, c, y = tensors["rainy"], tensors["clean"], tensors["labels"]
    spec = attack_spec_from_config(cfg["train"]["attack"], seed=int(cfg["run"]["seed"]))

    delta_n = naa_generate(seg, x, y, spec, sample_seeds=[mix_seed(spec.seed, index)])
    delta_m = ama_generate(seg, x + delta_n, c, y, spec, variant=str(cfg["train"]["ama_variant"]))

    out = run_dir / "images" / "attack_demo"
    out.mkdir(parents=True, exist_ok=True)

    def save(name, arr_hwc):
        Image.fromarray(np.clip(np.round(arr_hwc * 255), 0, 255).astype(np.uint8)).save(out / name)

    eps = max(spec.epsilon, 1e-8)
    save("input.png", x[0].permute(1, 2, 0).numpy())
    save("delta_n.png", 0.5 + delta_n[0].permute(1, 2, 0).numpy() / (2 * eps))
    save("attacked.png", (x + delta_n)[0].permute(1, 2, 0).numpy())
    save("sign_map.png", (delta_n[0].permute(1, 2, 0).numpy() > 0).astype(np.float32))
    save("delta_m.png", 0.5 + delta_m[0].permute(1, 2, 0).numpy() / (2 * eps))
    save("mirror_target.png", np.clip(c[0].permute(1, 2, 0).numpy() + delta_m[0].permute(1, 2, 0).numpy(), 0, 1))
    _log(run_dir, f"[attack-demo] sample {index} rasters -> {out}")
    _mark_done(run_dir, "attack_demo")


# ---------------------------------------------------------------------------
# argument plumbing


def _extract_overrides(unknown: list[str]) -> list[str]:
    """Interpret leftover '--a.b.c value' / '--a.b.c=value' flags as config
    overrides (flags mirror config keys with dotted paths)."""
    overrides = []
    i = 0
    while i < len(unknown):
        token = unknown[i]
        if not token.startswith("--"):
            raise UsageError(f"unexpected argument {token!r}")
        body = token[2:]
        if "=" in body:
            overrides.append(body)
            i += 1
        else:
            if i + 1 >= len(unknown):
                raise UsageError(f"flag {token!r} expects a value")
            overrides.append(f"{body}={unknown[i + 1]}")
            i += 2
    return overrides


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rainrobust",
        description="Joint rain + adversarial-perturbation defense workbench for semantic segmentation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="YAML config file")
        p.add_argument("--run-dir", type=str, default=None, help="shorthand for run.dir")
        p.add_argument("--overwrite", action="store_true", help="allow writing into a completed run directory")

    common(sub.add_parser("synth", help="generate and persist the paired dataset"))
    p = sub.add_parser("pretrain", help="pretrain the segmenter or the derain model")
    p.add_argument("--kind", choices=("seg", "derain"), required=True)
    common(p)
    p = sub.add_parser("train", help="run a training regime")
    p.add_argument("--regime", choices=REGIMES, required=True)
    common(p)
    common(sub.add_parser("eval", help="run the comparison grid on the test split"))
    p = sub.add_parser("report", help="merge metrics CSVs and render tables/plots")
    p.add_argument("run_dirs", nargs="+", type=Path)
    p.add_argument("--out", type=Path, default=None)
    p = sub.add_parser("attack-demo", help="single-image attack visualization")
    p.add_argument("--index", type=int, default=0)
    common(p)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args, unknown = parser.parse_known_args(argv)
    try:
        if args.command == "report":
            if unknown:
                raise UsageError(f"report takes no overrides, got {unknown}")
            cmd_report(args.run_dirs, args.out)
            return 0

        overrides = _extract_overrides(unknown)
        if args.run_dir:
            overrides.append(f"run.dir={args.run_dir}")
        cfg = load_config(args.config, overrides)
        run_dir = resolve_run_dir(cfg)
        snapshot_config(cfg, run_dir, overwrite=args.overwrite)

        if args.command == "synth":
            cmd_synth(cfg, run_dir, args.overwrite)
        elif args.command == "pretrain":
            cmd_pretrain(cfg, run_dir, args.kind, args.overwrite)
        elif args.command == "train":
            cmd_train(cfg, run_dir, args.regime, args.overwrite)
        elif args.command == "eval":
            cmd_eval(cfg, run_dir, args.overwrite)
        elif args.command == "attack-demo":
            cmd_attack_demo(cfg, run_dir, args.index, args.overwrite)
        else:  # pragma: no cover - argparse enforces choices
            raise UsageError(f"unknown command {args.command!r}")
        return 0
    except ConfigError as exc:
        _emit_error(2, "config_error", exc)
        return 2
    except (MissingArtifactError, DatasetFormatError, CheckpointError) as exc:
        _emit_error(3, "missing_artifact", exc)
        return 3
    except TrainingDiverged as exc:
        _emit_error(4, "training_diverged", exc)
        return 4


def _emit_error(code: int, kind: str, exc: Exception) -> None:
    print(json.dumps({"exit_code": code, "error": kind, "detail": str(exc)}), file=sys.stderr)


def entrypoint() -> None:  # console-script hook
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entrypoint()
