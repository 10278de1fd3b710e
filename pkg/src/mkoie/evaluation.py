"""PSNR / SSIM and per-task reports in mean ± std form."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .tasks import TaskKind

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
REPORT_COLUMNS = (
    "task", "n", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std", "psnr_inf_excluded", "niqe",
)


def _as_array(x) -> np.ndarray:
    if torch.is_tensor(x):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """PSNR in dB over all elements; ``inf`` when the images are identical."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("peak must be > 0")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalised 1-D Gaussian taps."""
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(planes: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation over the last two axes
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(planes, k, axis=-1) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=-2) @ g


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean SSIM over all valid 11×11 Gaussian windows of every channel.

    Accepts H×W, C×H×W or B×C×H×W inputs.
    """
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim < 2 or min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs spatial dims >= {SSIM_WINDOW}, got {a.shape[-2:]}")
    a = a.reshape(-1, *a.shape[-2:])
    b = b.reshape(-1, *b.shape[-2:])
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    g = gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricRow:
    task: TaskKind
    n: int
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    psnr_inf_excluded: int = 0
    niqe: float | None = None


@dataclass
class MetricReport:
    rows: list[MetricRow]
    per_sample: list[dict] = field(default_factory=list)

    def row(self, task) -> MetricRow:
        task = TaskKind.parse(task)
        for r in self.rows:
            if r.task == task:
                return r
        raise KeyError(task)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in self.rows:
            writer.writerow(
                [
                    r.task.slug, r.n,
                    _fmt(r.psnr_mean), _fmt(r.psnr_std),
                    _fmt(r.ssim_mean), _fmt(r.ssim_std),
                    r.psnr_inf_excluded,
                    "" if r.niqe is None else _fmt(r.niqe),
                ]
            )
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"{'task':<6} {'n':>5}  {'PSNR (dB)':>18}  {'SSIM':>17}"]
        for r in self.rows:
            p = "inf" if math.isinf(r.psnr_mean) else f"{r.psnr_mean:.3f} ± {r.psnr_std:.3f}"
            lines.append(
                f"{r.task.slug:<6} {r.n:>5}  {p:>18}  {r.ssim_mean:.4f} ± {r.ssim_std:.4f}"
            )
        return "\n".join(lines)


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


def aggregate(task, psnrs, ssims) -> MetricRow:
    """Mean and population std; infinite PSNRs are left out and counted."""
    finite = [p for p in psnrs if math.isfinite(p)]
    excluded = len(psnrs) - len(finite)
    if finite:
        p_mean, p_std = float(np.mean(finite)), float(np.std(finite))
    else:
        p_mean, p_std = math.inf, 0.0
    return MetricRow(
        task=TaskKind.parse(task),
        n=len(ssims),
        psnr_mean=p_mean,
        psnr_std=p_std,
        ssim_mean=float(np.mean(ssims)),
        ssim_std=float(np.std(ssims)),
        psnr_inf_excluded=excluded,
    )


def evaluate(model, dataset, tasks=None) -> MetricReport:
    """Score ``model(degraded, task)`` against the clean images, per task.

    ``model`` is an :class:`~mkoie.net.MKoIE` (inputs are padded to its size
    divisor) or any callable mapping a 1×3×H×W tensor and a task to an image.
    """
    from .net import MKoIE, enhance

    tasks = [TaskKind.parse(t) for t in (tasks or dataset.tasks)]
    if not tasks:
        raise ValueError("no tasks to evaluate")
    if isinstance(model, MKoIE):
        model.eval()
        run = lambda x, t: enhance(model, x, t)  # noqa: E731
    else:
        run = model
    rows, dump = [], []
    for task in tasks:
        if dataset.count(task) == 0:
            raise ValueError(f"dataset has no samples for task {task.slug}")
        psnrs, ssims = [], []
        # a stable order keeps float accumulation identical under shuffling
        order = sorted(range(dataset.count(task)), key=lambda i: dataset.ids[task][i])
        for i in order:
            degraded, clean = dataset.pairs[task][i]
            with torch.no_grad():
                out = run(torch.from_numpy(degraded)[None], task)
            out = _as_array(out)[0]
            p, s = psnr(out, clean), ssim(out, clean)
            psnrs.append(p)
            ssims.append(s)
            dump.append({"task": task.slug, "id": dataset.ids[task][i], "psnr": p, "ssim": s})
        rows.append(aggregate(task, psnrs, ssims))
    return MetricReport(rows=rows, per_sample=dump)
