"""Quality metrics, reference baselines and dataset-level evaluation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .net import FramePair
from .seqdata import FrameSequence, QuadrupleSample, make_quadruples

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

REPORT_HEADER = ["sample_index", "frame_slot", "psnr_db", "ssim", "scatter_index"]


@dataclass
class SampleScore:
    sample_index: int
    frame_slot: int  # 1 or 2, matching the two predicted frames per quadruple
    psnr: float
    ssim: float
    si: float


@dataclass
class MetricsReport:
    per_sample: list[SampleScore]
    mean_psnr: float
    mean_ssim: float
    mean_si: float
    model_id: str = ""
    dataset_id: str = ""

    @property
    def n_samples(self) -> int:
        return len(self.per_sample) // 2


def _check_shapes(pred, ref):
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    return pred, ref


def mse(pred, ref) -> float:
    pred, ref = _check_shapes(pred, ref)
    return float(np.mean((pred - ref) ** 2))


def psnr(pred, ref, data_range: float) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs return +inf."""
    if data_range <= 0:
        raise ValueError(f"data_range must be > 0, got {data_range}")
    err = mse(pred, ref)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / err)


def _gaussian_window() -> np.ndarray:
    half = SSIM_WINDOW // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(coords**2) / (2 * SSIM_SIGMA**2))
    g /= g.sum()
    return np.outer(g, g)


_SSIM_KERNEL = _gaussian_window()


def _ssim_channel(x: np.ndarray, y: np.ndarray, data_range: float) -> float:
    w = _SSIM_KERNEL
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x = convolve2d(x, w, mode="valid")
    mu_y = convolve2d(y, w, mode="valid")
    # weighted second moments; population form, matching the reference metric
    sxx = convolve2d(x * x, w, mode="valid") - mu_x**2
    syy = convolve2d(y * y, w, mode="valid") - mu_y**2
    sxy = convolve2d(x * y, w, mode="valid") - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(pred, ref, data_range: float) -> float:
    """Structural similarity with an 11x11 Gaussian window, averaged over channels."""
    if data_range <= 0:
        raise ValueError(f"data_range must be > 0, got {data_range}")
    pred, ref = _check_shapes(pred, ref)
    if pred.ndim == 2:
        pred, ref = pred[None], ref[None]
    if pred.ndim != 3:
        raise ValueError(f"expected (C, H, W) frames, got shape {pred.shape}")
    h, w = pred.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"frames must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")
    return float(np.mean([_ssim_channel(pred[c], ref[c], data_range)
                          for c in range(pred.shape[0])]))


def scatter_index(pred, ref, capacity: float) -> float:
    """Mean squared error normalized by the variable's capacity."""
    if capacity <= 0:
        raise ValueError(f"capacity must be > 0, got {capacity}")
    return mse(pred, ref) / capacity


def trivial_copy_baseline(q: QuadrupleSample, mode: str = "replicate") -> FramePair:
    """Frame-duplication baseline.

    ``replicate`` repeats the earlier input twice in a consecutive manner, the
    default; ``nearest`` fills each slot with the nearer input instead.
    """
    if mode == "replicate":
        return FramePair(q.in_a.copy(), q.in_a.copy())
    if mode == "nearest":
        return FramePair(q.in_a.copy(), q.in_b.copy())
    raise ValueError(f"unknown trivial-copy mode {mode!r}")


def linear_blend_oracle(in_a, in_b) -> FramePair:
    """Thirds blend between the inputs; exact on pixelwise-linear sequences."""
    a = np.asarray(in_a, dtype=np.float64)
    b = np.asarray(in_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return FramePair(a + (b - a) / 3.0, a + 2.0 * (b - a) / 3.0)


def evaluate(predict_fn, seq: FrameSequence, data_range: float, capacity: float,
             model_id: str = "", dataset_id: str = "") -> MetricsReport:
    """Score ``predict_fn`` over every quadruple of ``seq``.

    ``predict_fn(in_a, in_b)`` must return the two predicted middle frames.
    Metrics are computed on the values as stored in ``seq``, so callers are
    expected to pass unnormalized sequences (model adapters denormalize their
    predictions before they land here).
    """
    quads = make_quadruples(seq)
    if not quads:
        raise ValueError(f"sequence yields no quadruples (N={seq.n_frames})")
    rows: list[SampleScore] = []
    for q in quads:
        p1, p2 = predict_fn(q.in_a, q.in_b)
        for slot, (pred, ref) in enumerate(((p1, q.gt_1), (p2, q.gt_2)), start=1):
            rows.append(SampleScore(
                sample_index=q.index,
                frame_slot=slot,
                psnr=psnr(pred, ref, data_range),
                ssim=ssim(pred, ref, data_range),
                si=scatter_index(pred, ref, capacity),
            ))
    return MetricsReport(
        per_sample=rows,
        mean_psnr=float(np.mean([r.psnr for r in rows])),
        mean_ssim=float(np.mean([r.ssim for r in rows])),
        mean_si=float(np.mean([r.si for r in rows])),
        model_id=model_id,
        dataset_id=dataset_id,
    )


def write_report_csv(report: MetricsReport, path: str | Path):
    """Per-frame rows plus a MEAN aggregate row; infinities are printed as "inf"."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(REPORT_HEADER)
        for r in report.per_sample:
            writer.writerow([r.sample_index, r.frame_slot, repr(r.psnr), repr(r.ssim),
                             repr(r.si)])
        writer.writerow(["MEAN", "", repr(report.mean_psnr), repr(report.mean_ssim),
                         repr(report.mean_si)])
