"""Synthetic degradation: haze, low light and nighttime haze from clean images.

The observation model is

    I = J * L * t + A * (1 - t) + N,    t = exp(-beta * d)

with ``J`` the clean radiance, ``L`` an illumination adjustment, ``t`` the
transmission derived from a depth map ``d``, ``A`` a per-channel atmospheric
light and ``N`` additive sensor noise.  Which terms are active depends on the
task: dehazing uses the haze term only, low-light uses illumination and noise
only, nighttime haze uses all three.
"""
from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .tasks import ALL_TASKS, TaskKind

DEFAULT_D_MAX = 2.0
DEPTH_MODES = ("ramp", "radial", "fractal")
MANIFEST_NAME = "manifest.jsonl"


# --------------------------------------------------------------------------
# parameter types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class IlluminationSpec:
    """Global illumination change ``J' = scale * J ** gamma``."""

    mode: str = "identity"
    scale: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.mode not in ("identity", "global_scale", "gamma"):
            raise ValueError(f"unknown illumination mode {self.mode!r}")
        if not 0.0 < self.scale <= 1.0:
            raise ValueError(f"illumination scale must be in (0, 1], got {self.scale}")
        if self.gamma < 1.0:
            raise ValueError(f"illumination gamma must be >= 1, got {self.gamma}")
        if self.mode == "identity" and (self.scale != 1.0 or self.gamma != 1.0):
            raise ValueError("identity illumination requires scale=1 and gamma=1")
        if self.mode == "global_scale" and self.gamma != 1.0:
            raise ValueError("global_scale illumination requires gamma=1")

    @property
    def is_identity(self) -> bool:
        return self.mode == "identity"

    def apply(self, clean: np.ndarray) -> np.ndarray:
        if self.mode == "identity":
            return clean
        if self.mode == "global_scale":
            return self.scale * clean
        return self.scale * np.power(clean, self.gamma)


@dataclass(frozen=True)
class NoiseSpec:
    """Zero-mean additive Gaussian noise with standard deviation ``sigma``."""

    enabled: bool = False
    sigma: float = 0.0

    def __post_init__(self):
        if not (self.sigma >= 0.0 and math.isfinite(self.sigma)):
            raise ValueError(f"noise sigma must be finite and >= 0, got {self.sigma}")


@dataclass(frozen=True)
class DegradationParams:
    beta: float
    atmos_light: tuple[float, ...]
    illum: IlluminationSpec = IlluminationSpec()
    noise: NoiseSpec = NoiseSpec()
    task: TaskKind = TaskKind.ID

    def __post_init__(self):
        object.__setattr__(self, "task", TaskKind.parse(self.task))
        object.__setattr__(self, "atmos_light", tuple(float(a) for a in self.atmos_light))
        if not (self.beta > 0.0 and math.isfinite(self.beta)):
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if not self.atmos_light:
            raise ValueError("atmos_light needs at least one channel")
        for a in self.atmos_light:
            if not 0.0 < a <= 1.0:
                raise ValueError(f"atmospheric light channels must lie in (0, 1], got {a}")
        if self.task == TaskKind.ID:
            if not self.illum.is_identity:
                raise ValueError("dehazing (ID) parameters require identity illumination")
            if self.noise.enabled:
                raise ValueError("dehazing (ID) parameters require noise disabled")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["task"] = self.task.slug
        d["atmos_light"] = list(self.atmos_light)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationParams":
        return cls(
            beta=d["beta"],
            atmos_light=tuple(d["atmos_light"]),
            illum=IlluminationSpec(**d["illum"]),
            noise=NoiseSpec(**d["noise"]),
            task=TaskKind.parse(d["task"]),
        )


@dataclass
class PairedSample:
    degraded: np.ndarray
    clean: np.ndarray
    task: TaskKind


# --------------------------------------------------------------------------
# the physical model
# --------------------------------------------------------------------------


def _validate_depth(depth) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ValueError(f"depth map must be 2-D (H, W), got shape {depth.shape}")
    if not np.all(np.isfinite(depth)):
        raise ValueError("depth map contains non-finite values")
    if np.any(depth < 0):
        raise ValueError("depth map contains negative values")
    return depth


def transmission_map(depth, beta: float) -> np.ndarray:
    """Per-pixel transmission ``exp(-beta * depth)``."""
    depth = _validate_depth(depth)
    if not (beta > 0 and math.isfinite(beta)):
        raise ValueError(f"beta must be > 0, got {beta}")
    return np.exp(-beta * depth)


def synthesize(clean, depth, params: DegradationParams, rng_seed: int) -> PairedSample:
    """Degrade ``clean`` (C×H×W or B×C×H×W, values in [0, 1]) according to ``params``.

    The noise field is drawn from ``np.random.default_rng(rng_seed)`` with the
    shape of ``clean``; the output is clipped to [0, 1].
    """
    clean = np.asarray(clean, dtype=np.float64)
    if clean.ndim not in (3, 4):
        raise ValueError(f"clean image must be C×H×W or B×C×H×W, got shape {clean.shape}")
    if clean.size and (clean.min() < 0.0 or clean.max() > 1.0):
        raise ValueError("clean image values must lie in [0, 1]")
    depth = _validate_depth(depth)
    if depth.shape != clean.shape[-2:]:
        raise ValueError(
            f"depth shape {depth.shape} does not match image size {clean.shape[-2:]}"
        )
    n_channels = clean.shape[-3]
    atmos = np.asarray(params.atmos_light, dtype=np.float64)
    if atmos.size == 1:
        atmos = np.repeat(atmos, n_channels)
    if atmos.size != n_channels:
        raise ValueError(
            f"atmos_light has {atmos.size} channels, image has {n_channels}"
        )
    atmos = atmos.reshape(n_channels, 1, 1)

    radiance = params.illum.apply(clean)
    if params.task == TaskKind.LLIE:
        degraded = radiance.copy()
    else:
        t = transmission_map(depth, params.beta)
        degraded = radiance * t + atmos * (1.0 - t)

    if params.noise.enabled and params.noise.sigma > 0:
        rng = np.random.default_rng(rng_seed)
        degraded = degraded + rng.normal(0.0, params.noise.sigma, size=clean.shape)

    np.clip(degraded, 0.0, 1.0, out=degraded)
    return PairedSample(degraded=degraded, clean=clean, task=params.task)


# --------------------------------------------------------------------------
# depth
# --------------------------------------------------------------------------


def _bilinear_resize(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    gh, gw = grid.shape
    ys = np.linspace(0.0, gh - 1, height)
    xs = np.linspace(0.0, gw - 1, width)
    y0 = np.minimum(np.floor(ys).astype(int), gh - 2) if gh > 1 else np.zeros(height, int)
    x0 = np.minimum(np.floor(xs).astype(int), gw - 2) if gw > 1 else np.zeros(width, int)
    wy = (ys - y0)[:, None] if gh > 1 else np.zeros((height, 1))
    wx = (xs - x0)[None, :] if gw > 1 else np.zeros((1, width))
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    top = grid[np.ix_(y0, x0)] * (1 - wx) + grid[np.ix_(y0, x1)] * wx
    bottom = grid[np.ix_(y1, x0)] * (1 - wx) + grid[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bottom * wy


def generate_depth(
    height: int,
    width: int,
    mode: str = "fractal",
    rng_seed: int = 0,
    d_max: float = DEFAULT_D_MAX,
    octaves: int = 5,
) -> np.ndarray:
    """Procedural depth map in [0, d_max], used when no measured depth exists."""
    if mode not in DEPTH_MODES:
        raise ValueError(f"unknown depth mode {mode!r}; expected one of {DEPTH_MODES}")
    if height < 1 or width < 1:
        raise ValueError("depth map size must be at least 1×1")

    if mode == "ramp":
        rows = np.linspace(0.0, 1.0, height) if height > 1 else np.zeros(1)
        raw = np.repeat(rows[:, None], width, axis=1)
    elif mode == "radial":
        yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
        raw = np.hypot(yy - (height - 1) / 2.0, xx - (width - 1) / 2.0)
    else:
        rng = np.random.default_rng(rng_seed)
        raw = np.zeros((height, width))
        for octave in range(octaves):
            n = 2 ** (octave + 1) + 1
            raw += 0.5**octave * _bilinear_resize(rng.random((n, n)), height, width)

    lo, hi = raw.min(), raw.max()
    if hi - lo <= 0:
        return np.zeros((height, width))
    return (raw - lo) / (hi - lo) * d_max


# --------------------------------------------------------------------------
# parameter sampling
# --------------------------------------------------------------------------


@dataclass
class ParamsSampler:
    """Draws task-appropriate :class:`DegradationParams`.

    Daytime airlight is grey and bright; nighttime airlight is darker with a
    small per-channel jitter to mimic coloured artificial light.
    """

    beta_range: tuple[float, float] = (0.5, 1.5)
    day_light_range: tuple[float, float] = (0.7, 1.0)
    night_light_range: tuple[float, float] = (0.2, 0.6)
    night_light_jitter: float = 0.05
    scale_range: tuple[float, float] = (0.1, 0.5)
    gamma_range: tuple[float, float] = (1.5, 3.0)
    sigma_range: tuple[float, float] = (0.005, 0.02)
    channels: int = 3

    def _illum(self, rng) -> IlluminationSpec:
        return IlluminationSpec(
            mode="gamma",
            scale=float(rng.uniform(*self.scale_range)),
            gamma=float(rng.uniform(*self.gamma_range)),
        )

    def _noise(self, rng) -> NoiseSpec:
        return NoiseSpec(enabled=True, sigma=float(rng.uniform(*self.sigma_range)))

    def sample(self, task, rng: np.random.Generator) -> DegradationParams:
        task = TaskKind.parse(task)
        if task == TaskKind.ID:
            a = float(rng.uniform(*self.day_light_range))
            return DegradationParams(
                beta=float(rng.uniform(*self.beta_range)),
                atmos_light=(a,) * self.channels,
                task=task,
            )
        if task == TaskKind.LLIE:
            # beta is unused for low light; a placeholder keeps the type valid
            return DegradationParams(
                beta=1.0,
                atmos_light=(1.0,) * self.channels,
                illum=self._illum(rng),
                noise=self._noise(rng),
                task=task,
            )
        base = rng.uniform(*self.night_light_range)
        jitter = rng.uniform(-self.night_light_jitter, self.night_light_jitter, self.channels)
        atmos = tuple(float(v) for v in np.clip(base + jitter, 1e-3, 1.0))
        return DegradationParams(
            beta=float(rng.uniform(*self.beta_range)),
            atmos_light=atmos,
            illum=self._illum(rng),
            noise=self._noise(rng),
            task=task,
        )


# --------------------------------------------------------------------------
# image io
# --------------------------------------------------------------------------


def _png_bit_depth(path) -> int:
    with open(path, "rb") as fh:
        head = fh.read(25)
    if head[:8] != b"\x89PNG\r\n\x1a\n" or len(head) < 25:
        return 8
    return head[24]


def read_image(path) -> np.ndarray:
    """Read an 8- or 16-bit RGB PNG into a 3×H×W float64 array in [0, 1]."""
    if _png_bit_depth(path) == 16:
        import cv2

        raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if raw is None:
            raise OSError(f"cannot read image {path}")
        if raw.ndim == 2:
            raw = np.repeat(raw[..., None], 3, axis=2)
        arr = raw[..., 2::-1].astype(np.float64) / 65535.0
    else:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_image(path, image, bits: int = 8) -> None:
    """Write a C×H×W array in [0, 1] as an 8- or 16-bit RGB PNG."""
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if image.ndim == 2:
        image = image[None]
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    hwc = image.transpose(1, 2, 0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if bits == 8:
        Image.fromarray(np.rint(hwc * 255.0).astype(np.uint8)).save(path)
    elif bits == 16:
        import cv2

        bgr = np.ascontiguousarray(np.rint(hwc[..., ::-1] * 65535.0).astype(np.uint16))
        if not cv2.imwrite(str(path), bgr):
            raise OSError(f"cannot write image {path}")
    else:
        raise ValueError("bits must be 8 or 16")


# --------------------------------------------------------------------------
# dataset generation
# --------------------------------------------------------------------------


def _patch_offsets(height, width, patch, mode, crops, rng) -> list[tuple[int, int]]:
    if mode == "grid":
        return [
            (y, x)
            for y in range(0, height - patch + 1, patch)
            for x in range(0, width - patch + 1, patch)
        ]
    if mode == "random":
        ys = rng.integers(0, height - patch + 1, size=crops)
        xs = rng.integers(0, width - patch + 1, size=crops)
        return [(int(y), int(x)) for y, x in zip(ys, xs)]
    raise ValueError(f"unknown patch mode {mode!r}; expected 'grid' or 'random'")


def make_dataset(
    clean_images: Sequence[np.ndarray],
    params_sampler: ParamsSampler,
    out,
    patch: int = 256,
    rng_seed: int = 0,
    tasks: Iterable = ALL_TASKS,
    mode: str = "grid",
    crops_per_image: int = 4,
    depths: Sequence[np.ndarray] | None = None,
    depth_mode: str = "fractal",
    sources: Sequence[str] | None = None,
    bits: int = 8,
) -> dict:
    """Write paired patches under ``out/<task>/{degraded,clean}/<id>.png``.

    Returns the manifest summary (per-task counts, skipped sources).  The full
    line-oriented manifest is written to ``out/manifest.jsonl``.
    """
    if len(clean_images) == 0:
        raise ValueError("make_dataset needs at least one clean image")
    if patch <= 0:
        raise ValueError("patch size must be positive")
    tasks = [TaskKind.parse(t) for t in tasks]
    if depths is not None and len(depths) != len(clean_images):
        raise ValueError("depths must match clean_images one-to-one")
    if sources is None:
        sources = [f"image_{i:05d}" for i in range(len(clean_images))]
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)

    records: list[dict] = []
    counts = {t.slug: 0 for t in tasks}
    skipped = []
    for index, image in enumerate(clean_images):
        image = np.asarray(image, dtype=np.float64)
        _, height, width = image.shape
        if height < patch or width < patch:
            skipped.append(sources[index])
            records.append(
                {
                    "kind": "skip",
                    "source": sources[index],
                    "reason": f"image {height}x{width} smaller than patch {patch}",
                }
            )
            continue
        image_rng = np.random.default_rng([rng_seed, index])
        offsets = _patch_offsets(height, width, patch, mode, crops_per_image, image_rng)
        if depths is not None:
            depth = _validate_depth(depths[index])
        else:
            depth = generate_depth(height, width, depth_mode, rng_seed=int(image_rng.integers(2**31)))

        for task in tasks:
            for k, (y, x) in enumerate(offsets):
                sample_rng = np.random.default_rng([rng_seed, index, int(task), k])
                params = params_sampler.sample(task, sample_rng)
                noise_seed = int(sample_rng.integers(2**31))
                crop = image[:, y : y + patch, x : x + patch]
                pair = synthesize(crop, depth[y : y + patch, x : x + patch], params, noise_seed)
                sample_id = f"{index:05d}_{k:04d}"
                write_image(root / task.slug / "degraded" / f"{sample_id}.png", pair.degraded, bits)
                write_image(root / task.slug / "clean" / f"{sample_id}.png", pair.clean, bits)
                counts[task.slug] += 1
                records.append(
                    {
                        "kind": "sample",
                        "id": sample_id,
                        "task": task.slug,
                        "source": sources[index],
                        "offset": [y, x],
                        "patch": patch,
                        "noise_seed": noise_seed,
                        "params": params.to_dict(),
                    }
                )

    summary = {
        "kind": "summary",
        "counts": counts,
        "skipped": skipped,
        "seed": rng_seed,
        "patch": patch,
        "mode": mode,
        "depth": "provided" if depths is not None else depth_mode,
    }
    records.append(summary)
    tmp = root / (MANIFEST_NAME + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    os.replace(tmp, root / MANIFEST_NAME)
    return summary


def read_manifest(root) -> list[dict]:
    with open(Path(root) / MANIFEST_NAME, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
