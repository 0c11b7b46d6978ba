"""Synthetic paired corpus: colored-shape scenes, rain layers, disk format.

Each sample is (clean image C, rain layer R, rainy image I = clip(C+R, 0, 1),
label map Y). Everything is a pure function of its parameters and seed, so a
corpus regenerates bit-identically on the same platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import convolve

from .metrics import IGNORE_ID, psnr

MANIFEST_NAME = "manifest.txt"
MANIFEST_VERSION = 1

# Base colors for foreground classes 1..N (class 0 is the textured background).
DEFAULT_PALETTE = np.array(
    [
        [0.50, 0.50, 0.50],  # background reference tone (unused for shapes)
        [0.85, 0.20, 0.20],
        [0.20, 0.65, 0.90],
        [0.95, 0.80, 0.15],
        [0.30, 0.75, 0.30],
        [0.70, 0.30, 0.80],
        [0.95, 0.55, 0.15],
        [0.15, 0.30, 0.75],
        [0.60, 0.85, 0.75],
        [0.85, 0.45, 0.60],
    ],
    dtype=np.float32,
)


class DatasetFormatError(Exception):
    """A dataset directory is missing pieces or contains corrupt files."""

    def __init__(self, message: str, path: Path | str | None = None):
        self.path = Path(path) if path is not None else None
        super().__init__(message if path is None else f"{message}: {path}")


@dataclass
class SceneParams:
    """Geometry/coloring knobs for one synthetic scene."""

    height: int = 64
    width: int = 64
    num_classes: int = 5  # background class 0 plus num_classes-1 shape classes
    shapes_per_image: int = 5
    background_noise_amp: float = 0.08
    seed: int = 0

    def validate(self) -> None:
        for name, v in (("height", self.height), ("width", self.width)):
            if v < 16 or v % 8 != 0:
                raise ValueError(f"{name} must be >= 16 and divisible by 8, got {v}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_classes - 1 >= len(DEFAULT_PALETTE):
            raise ValueError(f"num_classes={self.num_classes} exceeds palette size {len(DEFAULT_PALETTE)}")
        if self.shapes_per_image < 0:
            raise ValueError("shapes_per_image must be >= 0")
        if not 0.0 <= self.background_noise_amp <= 0.2:
            raise ValueError("background_noise_amp must lie in [0, 0.2]")


@dataclass
class RainParams:
    """Streak-field generator parameters.

    Defaults are calibrated so the default 64x64 corpus degrades the clean
    scenes to a corpus-mean PSNR of roughly 17.45 dB; see calibrate_rain().
    """

    density: float = 0.05
    streak_length: int = 15
    angle_low: float = 60.0
    angle_high: float = 120.0
    intensity: float = 0.6
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.density <= 1.0:
            raise ValueError("density must lie in [0, 1]")
        if self.streak_length < 1:
            raise ValueError("streak_length must be >= 1")
        if not (0.0 <= self.angle_low <= self.angle_high <= 180.0):
            raise ValueError("angle range must satisfy 0 <= low <= high <= 180 degrees")
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError("intensity must lie in [0, 1]")


@dataclass
class PairedSample:
    """One corpus entry: clean scene, rain layer, their clipped sum, labels."""

    clean: np.ndarray  # HxWx3 float32 in [0,1]
    rainy: np.ndarray  # HxWx3 float32 in [0,1]
    rain: np.ndarray  # HxWx3 float32, >= 0
    labels: np.ndarray  # HxW uint8, class ids or IGNORE_ID

    def validate(self, num_classes: int | None = None, atol: float = 0.0) -> None:
        if self.clean.shape != self.rainy.shape or self.clean.shape != self.rain.shape:
            raise ValueError("clean/rainy/rain shapes differ")
        if self.labels.shape != self.clean.shape[:2]:
            raise ValueError("labels shape does not match image shape")
        if (self.rain < 0).any():
            raise ValueError("rain layer has negative entries")
        expected = np.clip(self.clean + self.rain, 0.0, 1.0)
        if not np.allclose(self.rainy, expected, rtol=0.0, atol=atol):
            raise ValueError("rainy != clip(clean + rain, 0, 1)")
        if num_classes is not None:
            ids = np.unique(self.labels)
            bad = ids[(ids >= num_classes) & (ids != IGNORE_ID)]
            if bad.size:
                raise ValueError(f"labels contain out-of-range ids {bad.tolist()}")


def _disk_mask(yy, xx, rng, h, w):
    cy = rng.uniform(0, h)
    cx = rng.uniform(0, w)
    r = rng.uniform(min(h, w) / 10.0, min(h, w) / 4.0)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _rect_mask(yy, xx, rng, h, w):
    cy = rng.uniform(0, h)
    cx = rng.uniform(0, w)
    hh = rng.uniform(h / 12.0, h / 4.0)
    hw = rng.uniform(w / 12.0, w / 4.0)
    return (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)


def _triangle_mask(yy, xx, rng, h, w):
    cy = rng.uniform(0, h)
    cx = rng.uniform(0, w)
    r = rng.uniform(min(h, w) / 8.0, min(h, w) / 3.5)
    angles = rng.uniform(0, 2 * math.pi) + np.array([0.0, 2.1, 4.2]) + rng.uniform(-0.3, 0.3, size=3)
    vy = cy + r * np.sin(angles)
    vx = cx + r * np.cos(angles)
    # inside = same orientation sign against all three edges
    mask = np.ones(yy.shape, dtype=bool)
    ref = None
    for i in range(3):
        j = (i + 1) % 3
        cross = (vx[j] - vx[i]) * (yy - vy[i]) - (vy[j] - vy[i]) * (xx - vx[i])
        if ref is None:
            ref = (vx[2] - vx[0]) * (vy[1] - vy[0]) - (vy[2] - vy[0]) * (vx[1] - vx[0])
            ref = 1.0 if ref >= 0 else -1.0
        mask &= (cross * -ref) >= 0
    return mask


_SHAPE_FNS = (_disk_mask, _rect_mask, _triangle_mask)


def synth_scene(params: SceneParams, rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Render one scene: shapes with class-keyed colors over a textured background.

    Returns (image HxWx3 float32 in [0,1], labels HxW uint8).
    """
    params.validate()
    if rng is None:
        rng = np.random.default_rng(params.seed)
    h, w = params.height, params.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    bg = rng.uniform(0.35, 0.60, size=3)
    image = np.broadcast_to(bg, (h, w, 3)).astype(np.float64).copy()
    labels = np.zeros((h, w), dtype=np.uint8)

    for _ in range(params.shapes_per_image):
        cls = int(rng.integers(1, params.num_classes))
        color = np.clip(DEFAULT_PALETTE[cls] + rng.uniform(-0.08, 0.08, size=3), 0.0, 1.0)
        kind = int(rng.integers(0, len(_SHAPE_FNS)))
        mask = _SHAPE_FNS[kind](yy, xx, rng, h, w)
        image[mask] = color
        labels[mask] = cls

    noise = rng.uniform(-params.background_noise_amp, params.background_noise_amp, size=(h, w, 1))
    image = np.clip(image + noise, 0.0, 1.0)
    return image.astype(np.float32), labels


def _line_kernel(length: int, angle_deg: float) -> np.ndarray:
    """Unit-sum rasterized line of the given pixel length and angle."""
    size = int(length)
    k = np.zeros((size, size), dtype=np.float64)
    c = (size - 1) / 2.0
    dy = math.sin(math.radians(angle_deg))
    dx = math.cos(math.radians(angle_deg))
    # half-pixel steps with bilinear splatting give an antialiased streak
    for t in np.arange(-(size - 1) / 2.0, (size - 1) / 2.0 + 1e-9, 0.5):
        y = c + t * dy
        x = c + t * dx
        y0, x0 = int(math.floor(y)), int(math.floor(x))
        fy, fx = y - y0, x - x0
        for oy, wy in ((0, 1 - fy), (1, fy)):
            for ox, wx in ((0, 1 - fx), (1, fx)):
                yi, xi = y0 + oy, x0 + ox
                if 0 <= yi < size and 0 <= xi < size:
                    k[yi, xi] += wy * wx
    s = k.sum()
    if s > 0:
        k /= s
    return k


def synth_rain_layer(
    height: int, width: int, params: RainParams, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Generate a streak field R with 0 <= R <= intensity, HxWx3 float32.

    Uniform noise is thresholded at (1 - density), smeared along a random
    streak direction with a unit-sum line kernel, then peak-scaled.
    """
    params.validate()
    if rng is None:
        rng = np.random.default_rng(params.seed)
    noise = rng.random((height, width))
    seeds = np.where(noise > 1.0 - params.density, noise, 0.0)
    angle = rng.uniform(params.angle_low, params.angle_high)
    kernel = _line_kernel(params.streak_length, angle)
    layer = convolve(seeds, kernel, mode="constant", cval=0.0)
    layer = np.maximum(layer, 0.0)
    peak = layer.max()
    if peak > 0:
        layer = layer / peak * params.intensity
    return np.repeat(layer[..., None], 3, axis=2).astype(np.float32)


def apply_rain(clean: np.ndarray, rain: np.ndarray) -> np.ndarray:
    """Additive degradation: clip(clean + rain, 0, 1)."""
    if clean.shape != rain.shape:
        raise ValueError(f"shape mismatch: clean {clean.shape} vs rain {rain.shape}")
    return np.clip(clean + rain, 0.0, 1.0).astype(np.float32)


def rain_coverage(rain: np.ndarray) -> float:
    """Fraction of pixels touched by the streak field."""
    return float((rain[..., 0] > 0).mean())


def make_dataset(scene: SceneParams, rain: RainParams, n: int) -> list[PairedSample]:
    """Generate n paired samples; sample i uses seeds scene.seed+i / rain.seed+i."""
    if n < 1:
        raise ValueError("n must be >= 1")
    scene.validate()
    rain.validate()
    samples = []
    for i in range(n):
        clean, labels = synth_scene(replace(scene, seed=scene.seed + i))
        layer = synth_rain_layer(scene.height, scene.width, replace(rain, seed=rain.seed + i))
        samples.append(PairedSample(clean=clean, rainy=apply_rain(clean, layer), rain=layer, labels=labels))
    return samples


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def _save_png(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(arr).save(path, format="PNG")


def _load_png(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode))
    except FileNotFoundError:
        raise DatasetFormatError("missing raster", path)
    except Exception as exc:  # PIL raises several decode error types
        raise DatasetFormatError(f"corrupt raster ({exc})", path)


def _flatten_params(prefix: str, params) -> list[str]:
    return [f"{prefix}.{k}={v}" for k, v in vars(params).items()]


def save_dataset(
    directory: str | Path,
    samples: list[PairedSample],
    scene: SceneParams | None = None,
    rain: RainParams | None = None,
) -> None:
    """Write samples as lossless 8-bit rasters plus a key=value manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        _save_png(directory / f"clean_{i:05d}.png", _to_u8(s.clean))
        _save_png(directory / f"rainy_{i:05d}.png", _to_u8(s.rainy))
        _save_png(directory / f"rain_{i:05d}.png", _to_u8(s.rain))
        _save_png(directory / f"label_{i:05d}.png", s.labels.astype(np.uint8))
    lines = [f"format_version={MANIFEST_VERSION}", f"count={len(samples)}"]
    if scene is not None:
        lines += _flatten_params("scene", scene)
    if rain is not None:
        lines += _flatten_params("rain", rain)
    (directory / MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def read_manifest(directory: str | Path) -> dict[str, str]:
    """Parse the dataset manifest into a flat {key: value} mapping."""
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise DatasetFormatError("missing manifest", path)
    entries: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DatasetFormatError(f"malformed manifest line {lineno}: {line!r}", path)
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    if "format_version" not in entries or "count" not in entries:
        raise DatasetFormatError("manifest lacks format_version/count", path)
    if int(entries["format_version"]) != MANIFEST_VERSION:
        raise DatasetFormatError(f"unsupported manifest version {entries['format_version']}", path)
    return entries


def scene_params_from_manifest(manifest: dict[str, str]) -> SceneParams | None:
    if not any(k.startswith("scene.") for k in manifest):
        return None
    return SceneParams(
        height=int(manifest["scene.height"]),
        width=int(manifest["scene.width"]),
        num_classes=int(manifest["scene.num_classes"]),
        shapes_per_image=int(manifest["scene.shapes_per_image"]),
        background_noise_amp=float(manifest["scene.background_noise_amp"]),
        seed=int(manifest["scene.seed"]),
    )


def rain_params_from_manifest(manifest: dict[str, str]) -> RainParams | None:
    if not any(k.startswith("rain.") for k in manifest):
        return None
    return RainParams(
        density=float(manifest["rain.density"]),
        streak_length=int(manifest["rain.streak_length"]),
        angle_low=float(manifest["rain.angle_low"]),
        angle_high=float(manifest["rain.angle_high"]),
        intensity=float(manifest["rain.intensity"]),
        seed=int(manifest["rain.seed"]),
    )


def load_dataset(directory: str | Path) -> list[PairedSample]:
    """Load a saved corpus; errors name the offending path."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    count = int(manifest["count"])
    samples = []
    for i in range(count):
        clean = _load_png(directory / f"clean_{i:05d}.png", "RGB").astype(np.float32) / 255.0
        rainy = _load_png(directory / f"rainy_{i:05d}.png", "RGB").astype(np.float32) / 255.0
        rain = _load_png(directory / f"rain_{i:05d}.png", "RGB").astype(np.float32) / 255.0
        labels = _load_png(directory / f"label_{i:05d}.png", "L").astype(np.uint8)
        samples.append(PairedSample(clean=clean, rainy=rainy, rain=rain, labels=labels))
    return samples


def corpus_mean_psnr(samples: list[PairedSample]) -> float:
    """Mean PSNR(rainy, clean) over a corpus — the degradation severity."""
    return float(np.mean([psnr(s.rainy, s.clean) for s in samples]))


def calibrate_rain(
    scene: SceneParams,
    rain: RainParams,
    target_psnr: float = 17.45,
    n: int = 48,
    tol: float = 0.05,
    max_iter: int = 30,
) -> tuple[RainParams, float]:
    """Tune rain intensity until corpus-mean PSNR(I, C) hits the target.

    PSNR decreases monotonically in intensity, so a bisection on intensity in
    (0, 1] suffices; density is left untouched unless intensity saturates.
    Returns (calibrated params, achieved corpus-mean PSNR).
    """

    def severity(intensity: float, density: float) -> float:
        cand = replace(rain, intensity=intensity, density=density)
        return corpus_mean_psnr(make_dataset(scene, cand, n))

    density = rain.density
    lo, hi = 1e-3, 1.0
    if severity(1.0, density) > target_psnr:
        # even max intensity is too mild; thicken the streak field
        while severity(1.0, density) > target_psnr and density < 0.5:
            density = min(0.5, density * 1.5)
    best_i, best_p = rain.intensity, severity(rain.intensity, density)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        p = severity(mid, density)
        if abs(p - target_psnr) < abs(best_p - target_psnr):
            best_i, best_p = mid, p
        if abs(p - target_psnr) <= tol:
            break
        if p > target_psnr:
            lo = mid  # too mild, push intensity up
        else:
            hi = mid
    return replace(rain, intensity=best_i, density=density), best_p
