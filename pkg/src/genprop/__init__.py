"""genprop: desk-scale generative propagation of first-frame video edits."""

from .video import (
    LatentMask,
    MaskSequence,
    VideoTensor,
    composite,
    downsample_mask,
    frame_consistency,
    mask_iou,
    psnr_masked,
)

__all__ = [
    "VideoTensor",
    "MaskSequence",
    "LatentMask",
    "composite",
    "downsample_mask",
    "psnr_masked",
    "mask_iou",
    "frame_consistency",
]

__version__ = "0.1.0"
