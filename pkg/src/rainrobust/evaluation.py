"""Comparison-grid evaluation: pipelines x attacks x budgets -> metric rows.

Attacks are generated against each pipeline's segmentation component on the
(rainy) input image; derain-free pipelines report restoration quality of the
attacked input itself, which is recorded in the report metadata. Deltas are
cached per attack target so pipelines sharing a segmenter share the attack.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from . import metrics as M
from .attacks import AttackSpec, budget_audit, mix_seed, naa_generate
from .models import load_checkpoint, model_param_hash
from .synthesis import DEFAULT_PALETTE, PairedSample
from .training import Pipeline, stack_corpus

CSV_COLUMNS = ("pipeline", "attack", "epsilon", "seed", "mIoU", "mAcc", "allAcc", "PSNR", "SSIM")

PIPELINE_KINDS = ("seg", "robust_seg", "derain_seg", "nat", "pearl", "pearl_ama")

# kind -> (seg checkpoint key, derain checkpoint key or None)
PIPELINE_COMPONENTS = {
    "seg": ("seg", None),
    "robust_seg": ("robust_seg", None),
    "derain_seg": ("seg", "derain"),
    "nat": ("robust_seg", "derain"),
    "pearl": ("seg", "pearl_derain"),
    "pearl_ama": ("seg", "pearl_ama_derain"),
}


class MissingArtifactError(FileNotFoundError):
    """A referenced checkpoint/dataset/run artifact does not exist."""


@dataclass
class PipelineSpec:
    """Checkpoint-backed pipeline description."""

    kind: str
    seg_checkpoint: str | Path
    derain_checkpoint: str | Path | None = None

    def __post_init__(self):
        if self.kind not in PIPELINE_KINDS:
            raise ValueError(f"unknown pipeline kind {self.kind!r}")


def load_pipeline(spec: PipelineSpec) -> Pipeline:
    seg_path = Path(spec.seg_checkpoint)
    if not seg_path.exists():
        raise MissingArtifactError(f"segmentation checkpoint not found: {seg_path}")
    seg = load_checkpoint(seg_path, expected_kind="seg")
    derain = None
    if spec.derain_checkpoint is not None:
        derain_path = Path(spec.derain_checkpoint)
        if not derain_path.exists():
            raise MissingArtifactError(f"derain checkpoint not found: {derain_path}")
        derain = load_checkpoint(derain_path, expected_kind="derain")
    pipe = Pipeline(seg=seg, derain=derain)
    pipe.eval()
    return pipe


AttackGrid = Sequence[tuple[str, AttackSpec | None]]


def default_attack_grid(epsilons: Sequence[float] = (4.0 / 255.0, 8.0 / 255.0)) -> list[tuple[str, AttackSpec]]:
    """The standard test grid: bim3/5/10, pgd10, cw (10 steps) per budget."""
    grid = []
    for eps in epsilons:
        for spec in (
            AttackSpec(method="bim", epsilon=eps, steps=3),
            AttackSpec(method="bim", epsilon=eps, steps=5),
            AttackSpec(method="bim", epsilon=eps, steps=10),
            AttackSpec(method="pgd", epsilon=eps, steps=10),
            AttackSpec(method="cw", epsilon=eps, steps=10),
        ):
            grid.append((spec.name, spec))
    return grid


@dataclass
class ReportRow:
    pipeline: str
    attack: str
    epsilon: float
    seed: int
    miou: float
    macc: float
    allacc: float
    psnr: float
    ssim: float

    def key(self) -> tuple:
        return (self.pipeline, self.attack, round(self.epsilon, 8), self.seed)


@dataclass
class MetricsReport:
    rows: list[ReportRow] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)

    def add_row(self, row: ReportRow) -> None:
        if any(r.key() == row.key() for r in self.rows):
            raise ValueError(f"duplicate report cell {row.key()}")
        self.rows.append(row)

    def to_csv_text(self, timestamp: str | None = None) -> str:
        buf = io.StringIO()
        if timestamp is None:
            timestamp = _dt.datetime.now(_dt.timezone.utc).isoformat()
        buf.write(f"# created={timestamp}\n")
        for k in sorted(self.metadata):
            buf.write(f"# {k}={self.metadata[k]}\n")
        buf.write(",".join(CSV_COLUMNS) + "\n")
        for r in self.rows:
            buf.write(
                f"{r.pipeline},{r.attack},{r.epsilon:.8f},{r.seed},"
                f"{r.miou:.6f},{r.macc:.6f},{r.allacc:.6f},{r.psnr:.6f},{r.ssim:.6f}\n"
            )
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv_text())

    @classmethod
    def from_csv(cls, path: str | Path) -> "MetricsReport":
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(f"metrics CSV not found: {path}")
        report = cls()
        header_seen = False
        for line in path.read_text().splitlines():
            if line.startswith("#"):
                body = line[1:].strip()
                k, _, v = body.partition("=")
                if k and k != "created":
                    report.metadata[k] = v
                continue
            if not line.strip():
                continue
            if not header_seen:
                if line.split(",") != list(CSV_COLUMNS):
                    raise ValueError(f"unexpected CSV header in {path}: {line!r}")
                header_seen = True
                continue
            f = line.split(",")
            report.add_row(
                ReportRow(
                    pipeline=f[0],
                    attack=f[1],
                    epsilon=float(f[2]),
                    seed=int(f[3]),
                    miou=float(f[4]),
                    macc=float(f[5]),
                    allacc=float(f[6]),
                    psnr=float(f[7]),
                    ssim=float(f[8]),
                )
            )
        return report

    def merge(self, other: "MetricsReport") -> "MetricsReport":
        merged = MetricsReport(rows=list(self.rows), metadata=dict(self.metadata))
        for k, v in other.metadata.items():
            if k in merged.metadata and merged.metadata[k] != v:
                merged.metadata[k] = f"{merged.metadata[k]}|{v}"
            else:
                merged.metadata[k] = v
        for r in other.rows:
            merged.add_row(r)
        return merged

    def select(self, **filters) -> list[ReportRow]:
        out = []
        for r in self.rows:
            if all(getattr(r, k) == v for k, v in filters.items()):
                out.append(r)
        return out

    def seed_mean(self, pipeline: str, attack: str, epsilon: float, metric: str) -> float:
        rows = [
            r
            for r in self.rows
            if r.pipeline == pipeline and r.attack == attack and abs(r.epsilon - epsilon) < 1e-9
        ]
        if not rows:
            raise KeyError(f"no rows for ({pipeline}, {attack}, {epsilon})")
        return float(np.mean([getattr(r, metric) for r in rows]))

    def table_text(self, epsilon: float, metrics_shown: Sequence[str] = ("miou", "allacc", "psnr")) -> str:
        """Aligned comparison table: pipelines down, attacks across, seed means."""
        attacks = sorted({r.attack for r in self.rows if abs(r.epsilon - epsilon) < 1e-9})
        pipelines = list(dict.fromkeys(r.pipeline for r in self.rows))
        label = {"miou": "mIoU", "macc": "mAcc", "allacc": "allAcc", "psnr": "PSNR", "ssim": "SSIM"}
        lines = [f"epsilon = {epsilon:.6f} (seed-mean over available seeds)"]
        header = f"{'pipeline':<12}" + "".join(
            f"{a + ':' + label[m]:>16}" for a in attacks for m in metrics_shown
        )
        lines.append(header)
        lines.append("-" * len(header))
        for p in pipelines:
            cells = []
            for a in attacks:
                for m in metrics_shown:
                    try:
                        cells.append(f"{self.seed_mean(p, a, epsilon, m):>16.4f}")
                    except KeyError:
                        cells.append(f"{'-':>16}")
            lines.append(f"{p:<12}" + "".join(cells))
        return "\n".join(lines) + "\n"


def dataset_fingerprint(samples: Sequence[PairedSample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        for arr in (s.clean, s.rainy, s.rain, s.labels):
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]


def _to_hwc(x: torch.Tensor) -> np.ndarray:
    return x.detach().permute(1, 2, 0).numpy()


def _num_classes_of(pipelines: Mapping[str, Pipeline]) -> int:
    counts = {p.num_classes for p in pipelines.values()}
    if len(counts) != 1:
        raise ValueError(f"pipelines disagree on class count: {sorted(counts)}")
    return counts.pop()


def _resolve_pipelines(pipelines) -> dict[str, Pipeline]:
    if isinstance(pipelines, Mapping):
        return dict(pipelines)
    resolved = {}
    for spec in pipelines:
        if not isinstance(spec, PipelineSpec):
            raise TypeError("expected PipelineSpec entries or a name->Pipeline mapping")
        resolved[spec.kind] = load_pipeline(spec)
    return resolved


def evaluate_defense(
    pipelines,
    samples: Sequence[PairedSample],
    attack_grid: AttackGrid | None = None,
    seeds: Sequence[int] = (0,),
    batch_size: int = 32,
    input_kind: str = "rainy",
    attack_through_derain: bool = False,
    extra_metadata: Mapping[str, str] | None = None,
) -> MetricsReport:
    """Run the full comparison grid and return one row per
    (pipeline, attack, epsilon, seed) cell.
    """
    if not samples:
        raise ValueError("empty dataset")
    if input_kind not in ("rainy", "clean"):
        raise ValueError("input_kind must be 'rainy' or 'clean'")
    pipes = _resolve_pipelines(pipelines)
    if not pipes:
        raise ValueError("no pipelines to evaluate")
    if attack_grid is None:
        attack_grid = default_attack_grid()
    num_classes = _num_classes_of(pipes)
    max_label = max(int(s.labels[s.labels != M.IGNORE_ID].max(initial=0)) for s in samples)
    if max_label >= num_classes:
        raise ValueError(f"dataset labels reach {max_label} but pipelines predict {num_classes} classes")

    data = stack_corpus(samples)
    inputs = data[input_kind]
    clean = data["clean"]
    labels = data["labels"]
    n = inputs.shape[0]

    for p in pipes.values():
        p.eval()
    target_hash = {name: model_param_hash(p if attack_through_derain else p.seg) for name, p in pipes.items()}

    delta_cache: dict[tuple, torch.Tensor] = {}

    def deltas_for(name: str, attack_name: str, spec: AttackSpec | None, seed: int) -> torch.Tensor | None:
        if spec is None or spec.epsilon == 0.0:
            return None
        key = (target_hash[name], attack_name, round(spec.epsilon, 10), seed)
        if key not in delta_cache:
            target = pipes[name] if attack_through_derain else pipes[name].seg
            run_spec = spec.with_seed(mix_seed(seed, attack_name, round(spec.epsilon, 10)))
            chunks = []
            for start in range(0, n, batch_size):
                sl = slice(start, min(start + batch_size, n))
                seeds_b = [mix_seed(run_spec.seed, i) for i in range(sl.start, sl.stop)]
                d = naa_generate(target, inputs[sl], labels[sl], run_spec, sample_seeds=seeds_b)
                budget_audit(d, inputs[sl], run_spec.epsilon)
                chunks.append(d)
            delta_cache[key] = torch.cat(chunks)
        return delta_cache[key]

    report = MetricsReport()
    report.metadata.update(
        {
            "schema": "1",
            "dataset_hash": dataset_fingerprint(samples),
            "num_samples": str(n),
            "input_kind": input_kind,
            "attack_through_derain": str(attack_through_derain).lower(),
            "miou_convention": "union_present",
            "macc_convention": "gt_present",
            "psnr_ssim_aggregation": "mean_of_per_image",
            "derain_free_psnr": "attacked_input_vs_clean",
        }
    )
    if extra_metadata:
        report.metadata.update(extra_metadata)

    for name, pipe in pipes.items():
        for attack_name, spec in attack_grid:
            eps = 0.0 if spec is None else spec.epsilon
            for seed in seeds:
                delta = deltas_for(name, attack_name, spec, seed)
                cm = M.ConfusionMatrix(num_classes)
                psnrs, ssims = [], []
                for start in range(0, n, batch_size):
                    sl = slice(start, min(start + batch_size, n))
                    xb = inputs[sl] if delta is None else inputs[sl] + delta[sl]
                    with torch.no_grad():
                        restored = pipe.restore(xb)
                        pred = pipe.seg(restored).argmax(dim=1)
                    M.accumulate(cm, pred.numpy(), labels[sl].numpy())
                    for i in range(xb.shape[0]):
                        r = _to_hwc(restored[i])
                        c = _to_hwc(clean[sl][i])
                        psnrs.append(M.psnr(r, c))
                        ssims.append(M.ssim(r, c))
                report.add_row(
                    ReportRow(
                        pipeline=name,
                        attack=attack_name,
                        epsilon=eps,
                        seed=seed,
                        miou=M.miou(cm),
                        macc=M.macc(cm),
                        allacc=M.allacc(cm),
                        psnr=float(np.mean(psnrs)),
                        ssim=float(np.mean(ssims)),
                    )
                )
    return report


@dataclass
class PerClassRow:
    class_id: int
    iou: float
    acc: float
    in_gt: bool
    in_pred: bool


@dataclass
class PerClassReport:
    rows: list[PerClassRow]
    attack: str
    epsilon: float

    def mean_iou(self) -> float:
        vals = [r.iou for r in self.rows if r.in_gt or r.in_pred]
        return float(np.mean(vals))

    def to_csv_text(self) -> str:
        lines = ["class_id,IoU,Acc,in_gt,in_pred"]
        for r in self.rows:
            iou = f"{r.iou:.6f}" if not np.isnan(r.iou) else "absent"
            acc = f"{r.acc:.6f}" if not np.isnan(r.acc) else "absent"
            lines.append(f"{r.class_id},{iou},{acc},{str(r.in_gt).lower()},{str(r.in_pred).lower()}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_csv_text())


def per_class_report(
    pipeline: Pipeline,
    samples: Sequence[PairedSample],
    attack: tuple[str, AttackSpec | None] = ("none", None),
    seed: int = 0,
    batch_size: int = 32,
    input_kind: str = "rainy",
) -> PerClassReport:
    """Per-class IoU/accuracy for one pipeline under one attack."""
    attack_name, spec = attack
    pipeline.eval()
    data = stack_corpus(samples)
    inputs = data[input_kind]
    labels = data["labels"]
    n = inputs.shape[0]
    cm = M.ConfusionMatrix(pipeline.num_classes)
    for start in range(0, n, batch_size):
        sl = slice(start, min(start + batch_size, n))
        xb = inputs[sl]
        if spec is not None and spec.epsilon > 0:
            run_spec = spec.with_seed(mix_seed(seed, attack_name, round(spec.epsilon, 10)))
            seeds_b = [mix_seed(run_spec.seed, i) for i in range(sl.start, sl.stop)]
            xb = xb + naa_generate(pipeline.seg, xb, labels[sl], run_spec, sample_seeds=seeds_b)
        with torch.no_grad():
            pred = pipeline.predict(xb)
        M.accumulate(cm, pred.numpy(), labels[sl].numpy())
    iou, iou_present = M.per_class_iou(cm)
    acc, acc_present = M.per_class_acc(cm)
    pred_present = cm.counts.sum(axis=0) > 0
    rows = [
        PerClassRow(
            class_id=c,
            iou=float(iou[c]),
            acc=float(acc[c]),
            in_gt=bool(acc_present[c]),
            in_pred=bool(pred_present[c]),
        )
        for c in range(pipeline.num_classes)
    ]
    return PerClassReport(rows=rows, attack=attack_name, epsilon=0.0 if spec is None else spec.epsilon)


# ---------------------------------------------------------------------------
# qualitative dumps

_HEAT_STOPS = np.array(
    [
        [0.00, 0.02, 0.02, 0.35],
        [0.50, 0.60, 0.05, 0.60],
        [1.00, 1.00, 0.10, 0.05],
    ]
)


def heatmap_values(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Channel-mean absolute difference, the value map fed to the colormap."""
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    return np.abs(a.astype(np.float64) - b.astype(np.float64)).mean(axis=-1)


def apply_heat_colormap(values: np.ndarray) -> np.ndarray:
    """Fixed piecewise-linear blue->red colormap over [0, 1] (uint8 RGB)."""
    v = np.clip(values, 0.0, 1.0)
    xs = _HEAT_STOPS[:, 0]
    rgb = np.stack([np.interp(v, xs, _HEAT_STOPS[:, c]) for c in (1, 2, 3)], axis=-1)
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)


def colorize_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Map class ids to the shape palette; ignore pixels go black."""
    out = np.zeros(labels.shape + (3,), dtype=np.uint8)
    for c in range(num_classes):
        out[labels == c] = np.round(DEFAULT_PALETTE[c] * 255).astype(np.uint8)
    out[labels == M.IGNORE_ID] = 0
    return out


def qualitative_dump(
    pipeline: Pipeline,
    samples: Sequence[PairedSample],
    attack: tuple[str, AttackSpec | None],
    out_dir: str | Path,
    seed: int = 0,
    limit: int | None = None,
) -> list[Path]:
    """Write, per sample, exactly five rasters: the (attacked) input, the
    restorer output, the |restored - clean| heat map, and colorized gt/pred."""
    from PIL import Image

    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory not writable: {out_dir} ({exc})")

    attack_name, spec = attack
    pipeline.eval()
    use = samples if limit is None else samples[:limit]
    data = stack_corpus(use)
    inputs, labels = data["rainy"], data["labels"]
    if spec is not None and spec.epsilon > 0:
        run_spec = spec.with_seed(mix_seed(seed, attack_name, round(spec.epsilon, 10)))
        seeds_b = [mix_seed(run_spec.seed, i) for i in range(inputs.shape[0])]
        inputs = inputs + naa_generate(pipeline.seg, inputs, labels, run_spec, sample_seeds=seeds_b)
    with torch.no_grad():
        restored = pipeline.restore(inputs)
        pred = pipeline.seg(restored).argmax(dim=1)

    def save(name: str, arr: np.ndarray) -> Path:
        p = out_dir / name
        Image.fromarray(arr).save(p, format="PNG")
        return p

    written = []
    for i, s in enumerate(use):
        x_hwc = _to_hwc(inputs[i])
        r_hwc = _to_hwc(restored[i])
        heat = heatmap_values(r_hwc, s.clean)
        written += [
            save(f"sample{i:03d}_input.png", np.clip(np.round(x_hwc * 255), 0, 255).astype(np.uint8)),
            save(f"sample{i:03d}_restored.png", np.clip(np.round(r_hwc * 255), 0, 255).astype(np.uint8)),
            save(f"sample{i:03d}_heat.png", apply_heat_colormap(heat)),
            save(f"sample{i:03d}_gt.png", colorize_labels(s.labels, pipeline.num_classes)),
            save(f"sample{i:03d}_pred.png", colorize_labels(pred[i].numpy(), pipeline.num_classes)),
        ]
    return written


def cross_model_eval(
    derain_checkpoint: str | Path,
    alternate_seg_checkpoint: str | Path,
    samples: Sequence[PairedSample],
    attack_grid: AttackGrid | None = None,
    seeds: Sequence[int] = (0,),
    pipeline_name: str = "transplant",
    batch_size: int = 32,
) -> MetricsReport:
    """Evaluate a fixed derain model transplanted in front of a segmenter it
    was never trained against. Same grid semantics as evaluate_defense."""
    spec = PipelineSpec(kind="derain_seg", seg_checkpoint=alternate_seg_checkpoint, derain_checkpoint=derain_checkpoint)
    pipe = load_pipeline(spec)
    max_label = max(int(s.labels[s.labels != M.IGNORE_ID].max(initial=0)) for s in samples)
    if max_label >= pipe.num_classes:
        raise ValueError(
            f"class-count mismatch: dataset labels reach {max_label}, segmenter predicts {pipe.num_classes}"
        )
    return evaluate_defense(
        {pipeline_name: pipe},
        samples,
        attack_grid=attack_grid,
        seeds=seeds,
        batch_size=batch_size,
        extra_metadata={"transplanted_derain": str(derain_checkpoint)},
    )
