"""Core video/mask containers, mask geometry and evaluation metrics.

Videos are float arrays of shape (T, H, W, C) with values in [0, 1];
masks are strictly binary (T, H, W) arrays. Everything in this module is
a pure function on immutable inputs, so it is safe to call from any
number of workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

PSNR_INF_DB = 99.0  # serialized stand-in for infinite PSNR


class DimensionError(ValueError):
    """Shapes of the supplied tensors are inconsistent."""


class UndefinedRegionError(ValueError):
    """The requested metric has no pixels to be computed on."""


@dataclass
class VideoTensor:
    """A clip of T frames, (T, H, W, 3) float values in [0, 1]."""

    data: np.ndarray
    fps: int = 8

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[-1] != 3:
            raise DimensionError(f"video must be (T, H, W, 3), got {self.data.shape}")
        if self.data.shape[0] < 2:
            raise DimensionError("video needs at least 2 frames")
        if not np.isfinite(self.data).all():
            raise ValueError("video contains non-finite values")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ValueError("video values must lie in [0, 1]")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def copy(self) -> "VideoTensor":
        return VideoTensor(self.data.copy(), fps=self.fps)


@dataclass
class MaskSequence:
    """Per-frame binary masks (T, H, W) for one instance."""

    data: np.ndarray
    instance_id: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise DimensionError(f"mask must be (T, H, W), got {self.data.shape}")
        vals = np.unique(self.data)
        if not np.isin(vals, (0.0, 1.0)).all():
            raise ValueError("mask must be strictly binary")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    def is_empty(self) -> bool:
        return not self.data.any()

    def copy(self) -> "MaskSequence":
        return MaskSequence(self.data.copy(), instance_id=self.instance_id)


@dataclass
class LatentMask:
    """Soft mask aligned to a model's latent grid, (T', H', W') in [0, 1]."""

    data: np.ndarray
    source_factor: int = 1

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise DimensionError(f"latent mask must be (T', H', W'), got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("latent mask contains non-finite values")
        if self.data.min() < -1e-6 or self.data.max() > 1.0 + 1e-6:
            raise ValueError("latent mask values must lie in [0, 1]")
        self.data = np.clip(self.data, 0.0, 1.0)

    def binarized(self, threshold: float = 0.5) -> np.ndarray:
        """Hard {0,1} variant (used for loss-identity checks and MPD targets)."""
        return (self.data >= threshold).astype(np.float32)


def gaussian_kernel(spatial_factor: int) -> np.ndarray:
    """Normalized 1-D Gaussian with sigma = factor/2, width 2*factor + 1."""
    if spatial_factor < 1:
        raise ValueError("spatial_factor must be >= 1")
    sigma = spatial_factor / 2.0
    radius = spatial_factor
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def _blur_frames(frames: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # Normalized (partition-of-unity) convolution: zero-pad, then divide by
    # the blurred all-ones image so constants stay constant at the borders.
    num = convolve1d(frames.astype(np.float64), kernel, axis=1, mode="constant")
    num = convolve1d(num, kernel, axis=2, mode="constant")
    den = convolve1d(np.ones_like(frames, dtype=np.float64), kernel, axis=1, mode="constant")
    den = convolve1d(den, kernel, axis=2, mode="constant")
    return num / den


def temporal_indices(source_frames: int, latent_frames: int) -> np.ndarray:
    """Nearest-index temporal alignment; identity when counts match."""
    if latent_frames < 1:
        raise ValueError("latent_frames must be >= 1")
    if latent_frames == 1:
        return np.array([0])
    pos = np.arange(latent_frames) * (source_frames - 1) / (latent_frames - 1)
    return np.rint(pos).astype(int)


def downsample_mask(mask: MaskSequence, spatial_factor: int, latent_frames: int) -> LatentMask:
    """Gaussian-downsample a pixel mask onto a latent grid.

    Spatial: separable Gaussian blur (sigma = factor/2, width 2*factor+1,
    renormalized at the borders) followed by stride subsampling at block
    offset (factor-1)//2. Temporal: nearest-index selection onto
    ``latent_frames`` frames.
    """
    t, h, w = mask.data.shape
    if h % spatial_factor != 0 or w % spatial_factor != 0:
        raise DimensionError(
            f"spatial_factor {spatial_factor} does not divide mask dims {h}x{w}"
        )
    kernel = gaussian_kernel(spatial_factor)
    blurred = _blur_frames(mask.data, kernel)
    off = (spatial_factor - 1) // 2
    sub = blurred[:, off::spatial_factor, off::spatial_factor]
    sub = sub[:, : h // spatial_factor, : w // spatial_factor]
    idx = temporal_indices(t, latent_frames)
    out = np.clip(sub[idx], 0.0, 1.0)
    return LatentMask(out.astype(np.float32), source_factor=spatial_factor)


def upsample_latent_mask(latent: np.ndarray, spatial_factor: int) -> np.ndarray:
    """Nearest-neighbor inverse of the downsample stride (shape round-trips)."""
    return np.repeat(np.repeat(latent, spatial_factor, axis=1), spatial_factor, axis=2)


def composite(base: VideoTensor, overlay: VideoTensor, mask: MaskSequence) -> VideoTensor:
    """Per-pixel blend: (1 - m) * base + m * overlay."""
    if base.data.shape != overlay.data.shape:
        raise DimensionError("base/overlay shape mismatch")
    if mask.data.shape != base.data.shape[:3]:
        raise DimensionError("mask shape does not match video")
    m = mask.data[..., None]
    out = np.where(m > 0.5, overlay.data, base.data)
    return VideoTensor(out, fps=base.fps)


def psnr_masked(a: VideoTensor, b: VideoTensor, exclude: MaskSequence) -> float:
    """PSNR (peak 1.0) over pixels where ``exclude`` is zero, pooled over frames.

    Returns ``math.inf`` when the compared regions agree exactly; serialize
    with :data:`PSNR_INF_DB`.
    """
    if a.data.shape != b.data.shape:
        raise DimensionError("video shape mismatch")
    if exclude.data.shape != a.data.shape[:3]:
        raise DimensionError("exclude mask shape mismatch")
    keep = exclude.data == 0.0
    if not keep.any():
        raise UndefinedRegionError("exclude mask covers every pixel")
    diff = (a.data.astype(np.float64) - b.data.astype(np.float64))[keep]
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def psnr_db_for_report(value: float) -> float:
    """Cap infinite PSNR for file output."""
    return PSNR_INF_DB if math.isinf(value) else value


def mask_iou(pred: MaskSequence, gt: MaskSequence) -> float:
    """Intersection-over-union pooled over all frames; empty/empty = 1.0."""
    if pred.data.shape != gt.data.shape:
        raise DimensionError("mask shape mismatch")
    p = pred.data > 0.5
    g = gt.data > 0.5
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    inter = np.logical_and(p, g).sum()
    return float(inter) / float(union)


def frame_consistency(v: VideoTensor) -> float:
    """Mean over adjacent frame pairs of 1 - mean|v[t+1] - v[t]|."""
    d = v.data.astype(np.float64)
    diffs = np.abs(d[1:] - d[:-1]).mean(axis=(1, 2, 3))
    return float(np.mean(1.0 - diffs))


def union_masks(masks: list[MaskSequence], instance_id: int = -1) -> MaskSequence:
    """Binary union of a non-empty list of equally shaped masks."""
    if not masks:
        raise ValueError("need at least one mask")
    out = masks[0].data.copy()
    for m in masks[1:]:
        if m.data.shape != out.shape:
            raise DimensionError("mask shape mismatch in union")
        out = np.maximum(out, m.data)
    return MaskSequence(out, instance_id=instance_id)


def empty_mask_like(video: VideoTensor, instance_id: int = -1) -> MaskSequence:
    return MaskSequence(np.zeros(video.data.shape[:3], dtype=np.float32), instance_id=instance_id)
