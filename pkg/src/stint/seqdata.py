"""Spatiotemporal frame sequences: synthetic generators, file IO, windowing, augmentation."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

FSEQ_MAGIC = b"FSEQ"
FSEQ_VERSION = 1

# std floor for z-score normalization of constant channels
NORM_EPS = 1e-8

SYNTHETIC_KINDS = ("translate_gaussian", "rotate_field", "diffuse_blob", "shear_deform")


class SequenceFormatError(ValueError):
    """Raised when an FSEQ file cannot be decoded."""


@dataclass
class FrameSequence:
    """An ordered stack of frames with shape (N, C, H, W), float32.

    ``capacity`` is the maximum value the physical variable can take over the
    sequence; it normalizes the scatter index and sets metric data ranges.
    ``norm_stats`` is ``(mean, std)`` per channel when the frames are z-scored,
    else None.
    """

    frames: np.ndarray
    capacity: float
    dt_label: str = ""
    norm_stats: tuple[np.ndarray, np.ndarray] | None = None
    seed: int | None = None

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4:
            raise ValueError(f"frames must be (N, C, H, W), got ndim={self.frames.ndim}")
        n, c, h, w = self.frames.shape
        if min(n, c, h, w) < 1:
            raise ValueError(f"all dimensions must be >= 1, got shape {(n, c, h, w)}")
        if not np.isfinite(self.frames).all():
            raise ValueError("frames contain non-finite values")
        if not (np.isfinite(self.capacity) and self.capacity > 0):
            raise ValueError(f"capacity must be a positive finite real, got {self.capacity}")
        if self.norm_stats is None:
            # small slack for float roundoff after denormalization
            if float(self.frames.max()) > self.capacity * (1 + 1e-4) + 1e-6:
                raise ValueError(
                    f"capacity {self.capacity} is below the sequence maximum "
                    f"{float(self.frames.max())}"
                )

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def channels(self) -> int:
        return self.frames.shape[1]

    def slice_frames(self, start: int, stop: int) -> FrameSequence:
        """Sub-sequence of frames [start:stop]; capacity and label are inherited."""
        return replace(self, frames=self.frames[start:stop].copy())

    def subsample(self, factor: int) -> FrameSequence:
        """Every ``factor``-th frame, lowering the temporal resolution."""
        if factor < 1:
            raise ValueError(f"subsample factor must be >= 1, got {factor}")
        if factor == 1:
            return self
        return replace(self, frames=self.frames[::factor].copy())


@dataclass
class TripletSample:
    """Three consecutive frames (each C x H x W); ``index`` locates i0 in the source."""

    i0: np.ndarray
    i1: np.ndarray
    i2: np.ndarray
    index: int


@dataclass
class QuadrupleSample:
    """Four consecutive frames: inputs at offsets 0 and 3, targets at 1 and 2."""

    in_a: np.ndarray
    in_b: np.ndarray
    gt_1: np.ndarray
    gt_2: np.ndarray
    index: int


@dataclass
class SyntheticSpec:
    """Recipe for a deterministic synthetic sequence.

    The motion parameters are interpreted per kind: ``velocity`` for
    translate_gaussian (pixels/frame, periodic boundary), ``angular_rate`` for
    rotate_field (rad/frame), ``diffusion_rate`` for diffuse_blob
    (pixels^2/frame) and ``shear_rate`` for shear_deform (per frame).
    shear_deform evolves linearly in time at every pixel, so thirds-blending
    between consecutive frames reproduces the intermediate frames exactly.
    """

    kind: str = "translate_gaussian"
    n_frames: int = 16
    height: int = 32
    width: int = 32
    channels: int = 1
    velocity: tuple[float, float] = (1.0, 0.5)
    angular_rate: float = 0.15
    diffusion_rate: float = 0.5
    shear_rate: float = 0.02
    noise_std: float = 0.0
    seed: int = 0

    def validate(self):
        if self.kind not in SYNTHETIC_KINDS:
            raise ValueError(f"kind must be one of {SYNTHETIC_KINDS}, got {self.kind!r}")
        if self.n_frames < 4:
            raise ValueError("n_frames must be >= 4")
        if self.height < 1:
            raise ValueError(f"height must be >= 1, got {self.height}")
        if self.width < 1:
            raise ValueError(f"width must be >= 1, got {self.width}")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        motion = (*self.velocity, self.angular_rate, self.diffusion_rate, self.shear_rate)
        if not np.isfinite(motion).all():
            raise ValueError(f"motion parameters must be finite, got {motion}")
        if not (np.isfinite(self.noise_std) and self.noise_std >= 0):
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")


def _grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")
    return ys, xs


def _wrapped_gaussian(ys, xs, cy, cx, sigma, height, width):
    # displacement on a torus keeps translating features inside the frame
    dy = np.mod(ys - cy + height / 2, height) - height / 2
    dx = np.mod(xs - cx + width / 2, width) - width / 2
    return np.exp(-(dx**2 + dy**2) / (2 * sigma**2))


def generate_synthetic(spec: SyntheticSpec) -> FrameSequence:
    """Render a sequence from ``spec``. Pure function: same spec, same bits."""
    spec.validate()
    n, c, h, w = spec.n_frames, spec.channels, spec.height, spec.width
    ys, xs = _grid(h, w)
    sigma = max(min(h, w) / 8.0, 1.5)
    frames = np.empty((n, c, h, w), dtype=np.float64)

    for t in range(n):
        for k in range(c):
            if spec.kind == "translate_gaussian":
                cx = w / 4.0 + spec.velocity[0] * t
                cy = h / 2.0 + spec.velocity[1] * t + k
                field = _wrapped_gaussian(ys, xs, cy, cx, sigma, h, w)
            elif spec.kind == "rotate_field":
                # two unequal lobes orbiting the center
                radius = min(h, w) / 4.0
                base = spec.angular_rate * t + 0.3 * k
                cy0, cx0 = (h - 1) / 2.0, (w - 1) / 2.0
                field = np.zeros_like(ys)
                for amp, phase in ((1.0, 0.0), (0.6, 2 * np.pi / 3)):
                    cy = cy0 + radius * np.sin(base + phase)
                    cx = cx0 + radius * np.cos(base + phase)
                    field += amp * np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * sigma**2))
            elif spec.kind == "diffuse_blob":
                # mass-conserving 2D diffusion of a Gaussian bump
                var = sigma**2 + 2.0 * spec.diffusion_rate * t
                cy0, cx0 = (h - 1) / 2.0 + k, (w - 1) / 2.0
                field = (sigma**2 / var) * np.exp(
                    -((ys - cy0) ** 2 + (xs - cx0) ** 2) / (2 * var)
                )
            else:  # shear_deform
                # ramp under a shearing coordinate flow; linear in t per pixel
                y_c = ys - (h - 1) / 2.0
                field = (xs + spec.shear_rate * t * y_c) / w + 0.1 * k
            frames[t, k] = field

    if spec.noise_std > 0:
        rng = np.random.default_rng(spec.seed)
        frames += rng.normal(0.0, spec.noise_std, size=frames.shape)

    frames = frames.astype(np.float32)
    return FrameSequence(
        frames=frames,
        capacity=float(frames.max()),
        dt_label=f"synthetic/{spec.kind}",
        seed=spec.seed,
    )


def save_sequence(seq: FrameSequence, path: str | Path):
    """Write ``seq`` in the FSEQ v1 binary layout (little-endian throughout)."""
    n, c, h, w = seq.frames.shape
    label = seq.dt_label.encode("utf-8")
    if len(label) > 0xFFFF:
        raise ValueError("dt_label too long for the u16 length prefix")
    with open(path, "wb") as f:
        f.write(FSEQ_MAGIC)
        f.write(bytes([FSEQ_VERSION]))
        f.write(struct.pack("<4I", n, c, h, w))
        f.write(struct.pack("<f", seq.capacity))
        f.write(struct.pack("<H", len(label)))
        f.write(label)
        f.write(np.ascontiguousarray(seq.frames, dtype="<f4").tobytes())


def load_sequence(path: str | Path) -> FrameSequence:
    """Read an FSEQ v1 file; inverse of :func:`save_sequence` up to metadata not stored."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 5 or raw[:4] != FSEQ_MAGIC:
        raise SequenceFormatError(f"{path}: bad magic, not an FSEQ file")
    version = raw[4]
    if version != FSEQ_VERSION:
        raise SequenceFormatError(f"{path}: unsupported version {version}")
    header_end = 5 + 16 + 4 + 2
    if len(raw) < header_end:
        raise SequenceFormatError(f"{path}: truncated header")
    n, c, h, w = struct.unpack_from("<4I", raw, 5)
    (capacity,) = struct.unpack_from("<f", raw, 21)
    (label_len,) = struct.unpack_from("<H", raw, 25)
    if min(n, c, h, w) < 1:
        raise SequenceFormatError(f"{path}: invalid dimensions {(n, c, h, w)}")
    payload_off = header_end + label_len
    if len(raw) < payload_off:
        raise SequenceFormatError(f"{path}: truncated dt_label")
    dt_label = raw[header_end:payload_off].decode("utf-8")
    expected = n * c * h * w * 4
    payload = raw[payload_off:]
    if len(payload) != expected:
        raise SequenceFormatError(
            f"{path}: payload size mismatch, expected {expected} bytes, got {len(payload)}"
        )
    frames = np.frombuffer(payload, dtype="<f4").reshape(n, c, h, w).copy()
    if not np.isfinite(frames).all():
        raise SequenceFormatError(f"{path}: payload contains non-finite values")
    if not (np.isfinite(capacity) and capacity > 0):
        raise SequenceFormatError(f"{path}: invalid capacity {capacity}")
    return FrameSequence(frames=frames, capacity=float(capacity), dt_label=dt_label)


def make_triplets(seq: FrameSequence, stride: int = 1) -> list[TripletSample]:
    """Sliding windows of 3 consecutive frames starting at 0, stride, 2*stride, ..."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    frames = seq.frames
    out = []
    for start in range(0, max(frames.shape[0] - 2, 0), stride):
        out.append(TripletSample(frames[start], frames[start + 1], frames[start + 2], start))
    return out


def make_quadruples(seq: FrameSequence, stride: int = 1) -> list[QuadrupleSample]:
    """Windows of 4 consecutive frames; ends are inputs, the middle two are targets."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    frames = seq.frames
    out = []
    for start in range(0, max(frames.shape[0] - 3, 0), stride):
        out.append(
            QuadrupleSample(
                in_a=frames[start],
                in_b=frames[start + 3],
                gt_1=frames[start + 1],
                gt_2=frames[start + 2],
                index=start,
            )
        )
    return out


def normalize(seq: FrameSequence) -> FrameSequence:
    """Per-channel z-score using the sequence's own statistics.

    std is floored at ``NORM_EPS`` so constant channels map to zeros.
    """
    x = seq.frames.astype(np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = np.maximum(x.std(axis=(0, 2, 3)), NORM_EPS)
    z = (x - mean[None, :, None, None]) / std[None, :, None, None]
    return replace(
        seq,
        frames=z.astype(np.float32),
        norm_stats=(mean.astype(np.float32), std.astype(np.float32)),
    )


def denormalize(seq: FrameSequence) -> FrameSequence:
    """Invert :func:`normalize`; a sequence without stats is returned unchanged."""
    if seq.norm_stats is None:
        return seq
    mean, std = seq.norm_stats
    x = seq.frames.astype(np.float64)
    x = x * std[None, :, None, None].astype(np.float64) + mean[None, :, None, None].astype(np.float64)
    return replace(seq, frames=x.astype(np.float32), norm_stats=None)


def denormalize_frames(frames: np.ndarray, norm_stats) -> np.ndarray:
    """Apply inverse z-scoring to raw (C, H, W) or (N, C, H, W) frame arrays."""
    mean, std = norm_stats
    shape = (-1, 1, 1) if frames.ndim == 3 else (1, -1, 1, 1)
    return frames * std.reshape(shape) + mean.reshape(shape)


def normalize_frames(frames: np.ndarray, norm_stats) -> np.ndarray:
    mean, std = norm_stats
    shape = (-1, 1, 1) if frames.ndim == 3 else (1, -1, 1, 1)
    return (frames - mean.reshape(shape)) / std.reshape(shape)


def augment_reverse(sample, draw: float, p: float):
    """Reverse a sample's temporal order when ``draw`` < ``p``.

    Triplets reverse frame order; quadruples swap the inputs and swap the
    targets, which is the same reversal seen through a 4-frame window.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    if draw >= p:
        return sample
    if isinstance(sample, TripletSample):
        return TripletSample(sample.i2, sample.i1, sample.i0, sample.index)
    if isinstance(sample, QuadrupleSample):
        return QuadrupleSample(
            in_a=sample.in_b,
            in_b=sample.in_a,
            gt_1=sample.gt_2,
            gt_2=sample.gt_1,
            index=sample.index,
        )
    raise TypeError(f"unsupported sample type {type(sample).__name__}")
