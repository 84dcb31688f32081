"""Inference: propagate a first-frame edit through a video.

The original video is encoded by the SCE (optionally with black-region
motion hints) while the generator samples from the edited first frame;
the injection weight in [0, 1] trades reconstruction fidelity against
edit strength. MPD logits from the final sampling step become the
predicted edit-region masks.
"""

from __future__ import annotations

import hashlib
import json
import subprocess
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import ConditionBundle, NoiseSchedule
from .datagen import TASK_PHRASE
from .propnet import PropagationModel
from .video import DimensionError, MaskSequence, VideoTensor, upsample_latent_mask

PHRASE_TASK = {v: k.value for k, v in TASK_PHRASE.items()}


@dataclass
class PropagationRequest:
    original_video: VideoTensor
    edited_first_frame: np.ndarray  # (H, W, 3) in [0, 1]
    phrase_id: int
    injection_weight: float = 1.0
    cfg_scale: float | None = None  # model default when None
    seed: int = 0
    steps: int | None = None
    black_region: MaskSequence | None = None

    def __post_init__(self):
        self.edited_first_frame = np.asarray(self.edited_first_frame, dtype=np.float32)
        if self.edited_first_frame.shape != self.original_video.data.shape[1:]:
            raise DimensionError("edited frame dimensions do not match the video")
        if not 0.0 <= self.injection_weight <= 1.0:
            raise ValueError("injection_weight must be in [0, 1]")


@dataclass
class PropagationResult:
    video_out: VideoTensor
    predicted_masks: MaskSequence
    manifest: dict = field(default_factory=dict)


def apply_black_region(video: VideoTensor, region_track: MaskSequence) -> VideoTensor:
    """Zero out tracked pixels of the encoder input (motion control hint)."""
    if region_track.data.shape != video.data.shape[:3]:
        raise DimensionError("region track shape does not match the video")
    out = np.where(region_track.data[..., None] > 0.5, np.float32(0.0), video.data)
    return VideoTensor(out, fps=video.fps)


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=5,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def config_hash(model: PropagationModel) -> str:
    blob = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def propagate(
    req: PropagationRequest,
    model: PropagationModel,
    sched: NoiseSchedule | None = None,
) -> PropagationResult:
    """Run one propagation request; deterministic given the seed."""
    cfg = model.config
    video = req.original_video
    if (video.height, video.width, video.frames) != (cfg.height, cfg.width, cfg.frames):
        raise DimensionError(
            f"video {video.frames}x{video.height}x{video.width} does not match "
            f"model {cfg.frames}x{cfg.height}x{cfg.width}"
        )
    if req.phrase_id < 0 or req.phrase_id >= len(cfg.vocab):
        raise ValueError(f"phrase_id {req.phrase_id} outside vocab")
    sched = sched or NoiseSchedule.cosine(cfg.diffusion_steps)

    encoder_video = video
    if req.black_region is not None:
        encoder_video = apply_black_region(video, req.black_region)

    cond = ConditionBundle(
        first_frame=req.edited_first_frame,
        task_embedding_id=PHRASE_TASK.get(req.phrase_id, cfg.null_task_id),
        phrase_id=req.phrase_id,
        cfg_scale=cfg.cfg_scale if req.cfg_scale is None else req.cfg_scale,
    )

    started = time.perf_counter()
    out_video, logits = model.sample(
        cond,
        sched,
        req.seed,
        reference_video=encoder_video,
        injection_weight=req.injection_weight,
        sample_steps=req.steps,
    )
    elapsed = time.perf_counter() - started

    probs = torch.sigmoid(logits[0]).numpy()  # (T, h, w)
    latent_binary = (probs >= 0.5).astype(np.float32)
    pixel_masks = upsample_latent_mask(latent_binary, cfg.latent_factor)
    predicted = MaskSequence(pixel_masks, instance_id=-1)

    manifest = {
        "git_describe": git_describe(),
        "config_hash": config_hash(model),
        "seeds": {"sample": req.seed},
        "phrase_id": req.phrase_id,
        "injection_weight": req.injection_weight,
        "cfg_scale": cond.cfg_scale,
        "steps": req.steps or cfg.sample_steps,
        "timings": {"propagate_s": elapsed},
    }
    return PropagationResult(video_out=out_video, predicted_masks=predicted, manifest=manifest)
