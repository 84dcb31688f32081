"""Synthetic training pairs: copy-and-paste, mask-and-fill, color-fill.

Each builder leaves every pixel outside the edit mask bit-identical to
its input. The routing of (encoder video, generator target, first-frame
condition) depends on the task:

==========  =====================  ==================  =================
task        encoder video          generator target    condition frame
==========  =====================  ==================  =================
COPY_PASTE  augmented (pasted-in)  original            original frame 1
MASK_FILL   augmented (filled)     original            original frame 1
COLOR_FILL  original               color-filled        filled frame 1
==========  =====================  ==================  =================

Synthetic pixels are only ever shown to the content encoder except in
the color-fill case, whose routing is deliberately flipped to teach
tracking.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import telea
from .video import MaskSequence, VideoTensor, composite, union_masks


class SkipExample(Exception):
    """Raised when a sampled scene cannot support the requested task."""


class TaskTag(Enum):
    COPY_PASTE = 0
    MASK_FILL = 1
    COLOR_FILL = 2


TASK_RATIO = {TaskTag.COPY_PASTE: 0.5, TaskTag.MASK_FILL: 0.375, TaskTag.COLOR_FILL: 0.125}

# Micro-vocabulary of prompt phrases, indexed by phrase_id.
PHRASES = (
    "propagate the first frame edit",
    "fill the masked region",
    "track colored regions",
)
TASK_PHRASE = {
    TaskTag.COPY_PASTE: 0,
    TaskTag.MASK_FILL: 1,
    TaskTag.COLOR_FILL: 2,
}

DEFAULT_FILL_COLOR = (1.0, 0.0, 0.0)
FILL_PALETTE = (
    (0.0, 1.0, 0.0),  # green
    (0.0, 0.0, 1.0),  # blue
    (1.0, 1.0, 0.0),  # yellow
    (0.5, 0.0, 0.5),  # purple
    (0.0, 1.0, 1.0),  # cyan
)
SECOND_COLOR_PROB = 0.3


@dataclass
class ColorFillConfig:
    default_color: tuple = DEFAULT_FILL_COLOR
    palette: tuple = FILL_PALETTE
    default_color_prob: float = 0.5
    second_color_prob: float = SECOND_COLOR_PROB


@dataclass
class TrainingExample:
    encoder_video: VideoTensor
    target_video: VideoTensor
    first_frame_condition: np.ndarray  # (H, W, 3)
    edit_masks: MaskSequence
    task: TaskTag
    phrase_id: int
    meta: dict = field(default_factory=dict)


def sample_task(rng_seed: int) -> TaskTag:
    """Deterministic task draw with marginals 0.5 / 0.375 / 0.125.

    Eight equiprobable buckets mapped 4/3/1 give the ratio exactly.
    """
    bucket = int(np.random.default_rng(rng_seed).integers(0, 8))
    if bucket < 4:
        return TaskTag.COPY_PASTE
    if bucket < 7:
        return TaskTag.MASK_FILL
    return TaskTag.COLOR_FILL


def copy_paste(
    v1: VideoTensor,
    v2: VideoTensor,
    m2: MaskSequence,
    *,
    require_first_frame_mask: bool = True,
) -> VideoTensor:
    """Paste the ``m2`` region of ``v2`` onto ``v1`` (no harmonization)."""
    if require_first_frame_mask and not m2.data[0].any():
        raise SkipExample("donor mask empty in the first frame")
    return composite(v1, v2, m2)


def _bbox(mask_frame: np.ndarray) -> tuple[int, int, int, int] | None:
    ys, xs = np.nonzero(mask_frame)
    if ys.size == 0:
        return None
    return int(ys.min()), int(ys.max()), int(xs.min()), int(xs.max())


def mask_fill_mean(v: VideoTensor, m: MaskSequence, margin: int = 5) -> VideoTensor:
    """Replace masked pixels with the mean of nearby unmasked pixels.

    Per frame, the mask's bounding box is expanded by ``margin`` pixels
    (clamped to the canvas) and the per-channel mean of the unmasked
    pixels inside that box is painted over the masked region. When the
    box holds no unmasked pixel, the whole-frame unmasked mean is used.
    """
    if v.data.shape[:3] != m.data.shape:
        raise ValueError("mask shape does not match video")
    out = v.data.copy()
    h, w = v.height, v.width
    for t in range(v.frames):
        box = _bbox(m.data[t])
        if box is None:
            continue
        y0, y1, x0, x1 = box
        y0, x0 = max(0, y0 - margin), max(0, x0 - margin)
        y1, x1 = min(h - 1, y1 + margin), min(w - 1, x1 + margin)
        region = out[t, y0 : y1 + 1, x0 : x1 + 1]
        region_mask = m.data[t, y0 : y1 + 1, x0 : x1 + 1] > 0.5
        if (~region_mask).any():
            fill = region[~region_mask].mean(axis=0)
        else:
            frame_mask = m.data[t] > 0.5
            if frame_mask.all():
                raise telea.DegenerateInputError("mask covers the entire frame")
            fill = out[t][~frame_mask].mean(axis=0)
        out[t][m.data[t] > 0.5] = fill
    return VideoTensor(out, fps=v.fps)


def mask_fill_inpaint(v: VideoTensor, m: MaskSequence, radius: int = 3) -> VideoTensor:
    """Fill masked pixels per frame with fast-marching inpainting."""
    if v.data.shape[:3] != m.data.shape:
        raise ValueError("mask shape does not match video")
    out = v.data.copy()
    for t in range(v.frames):
        if m.data[t].any():
            out[t] = telea.inpaint_frame(out[t], m.data[t], radius=radius)
    return VideoTensor(out, fps=v.fps)


def sample_fill_colors(rng_seed: int, n_masks: int, cfg: ColorFillConfig | None = None):
    """Replay the seeded color draw used by :func:`color_fill`."""
    cfg = cfg or ColorFillConfig()
    rng = np.random.default_rng(rng_seed)
    if rng.random() < cfg.default_color_prob:
        primary = cfg.default_color
    else:
        primary = cfg.palette[int(rng.integers(0, len(cfg.palette)))]
    secondary = None
    if n_masks >= 2 and rng.random() < cfg.second_color_prob:
        candidates = [c for c in cfg.palette if c != primary]
        secondary = candidates[int(rng.integers(0, len(candidates)))]
    return primary, secondary


def color_fill(
    v: VideoTensor,
    masks: list[MaskSequence],
    rng_seed: int,
    cfg: ColorFillConfig | None = None,
) -> VideoTensor:
    """Fill instance regions with solid palette colors (tracking cue).

    The primary instance gets the default red unless the seed routes to
    the palette; with probability ``second_color_prob`` a second instance
    receives a distinct palette color.
    """
    if not masks:
        return v.copy()
    primary, secondary = sample_fill_colors(rng_seed, len(masks), cfg)
    out = v.data.copy()
    fill = np.asarray(primary, dtype=np.float32)
    out[masks[0].data > 0.5] = fill
    if secondary is not None:
        out[masks[1].data > 0.5] = np.asarray(secondary, dtype=np.float32)
    return VideoTensor(out, fps=v.fps)


def _first_frame_instances(masks: list[MaskSequence]) -> list[int]:
    return [i for i, m in enumerate(masks) if m.data[0].any()]


def choose_fill_method(rng_seed: int) -> str:
    """2:1 mean-fill to inpaint split via seed bucketing."""
    return "mean" if int(np.random.default_rng(rng_seed).integers(0, 3)) < 2 else "inpaint"


def build_training_example(
    scene,
    donor=None,
    task: TaskTag = TaskTag.COPY_PASTE,
    rng_seed: int = 0,
    color_cfg: ColorFillConfig | None = None,
) -> TrainingExample:
    """Assemble one routed training example from rendered scenes.

    ``scene`` and ``donor`` are :class:`~genprop.synthworld.RenderedScene`
    objects (donor is required for COPY_PASTE). Raises
    :class:`SkipExample` when the task needs a first-frame instance mask
    and none exists.
    """
    rng = np.random.default_rng(rng_seed)
    video = scene.video
    meta = {"task": task.name, "rng_seed": rng_seed}

    if task is TaskTag.COPY_PASTE:
        if donor is None:
            raise ValueError("COPY_PASTE requires a donor scene")
        candidates = _first_frame_instances(donor.instance_masks)
        if not candidates:
            raise SkipExample("donor has no first-frame instance mask")
        m2 = donor.instance_masks[candidates[int(rng.integers(0, len(candidates)))]]
        encoder_video = copy_paste(video, donor.video, m2)
        return TrainingExample(
            encoder_video=encoder_video,
            target_video=video,
            first_frame_condition=video.data[0].copy(),
            edit_masks=MaskSequence(m2.data.copy(), instance_id=-1),
            task=task,
            phrase_id=TASK_PHRASE[task],
            meta=meta,
        )

    candidates = _first_frame_instances(scene.instance_masks)
    if not candidates:
        raise SkipExample("scene has no first-frame instance mask")

    if task is TaskTag.MASK_FILL:
        m = scene.instance_masks[candidates[int(rng.integers(0, len(candidates)))]]
        method = choose_fill_method(int(rng.integers(0, 2**63)))
        if method == "mean":
            encoder_video = mask_fill_mean(video, m)
        else:
            encoder_video = mask_fill_inpaint(video, m)
        meta["fill_method"] = method
        return TrainingExample(
            encoder_video=encoder_video,
            target_video=video,
            first_frame_condition=video.data[0].copy(),
            edit_masks=MaskSequence(m.data.copy(), instance_id=-1),
            task=task,
            phrase_id=TASK_PHRASE[task],
            meta=meta,
        )

    if task is TaskTag.COLOR_FILL:
        order = [candidates[int(i)] for i in rng.permutation(len(candidates))]
        chosen = [scene.instance_masks[i] for i in order]
        fill_seed = int(rng.integers(0, 2**63))
        filled = color_fill(video, chosen, fill_seed, color_cfg)
        _, secondary = sample_fill_colors(fill_seed, len(chosen), color_cfg)
        used = chosen[:1] if secondary is None else chosen[:2]
        meta["fill_seed"] = fill_seed
        return TrainingExample(
            encoder_video=video.copy(),
            target_video=filled,
            first_frame_condition=filled.data[0].copy(),
            edit_masks=union_masks(used),
            task=task,
            phrase_id=TASK_PHRASE[task],
            meta=meta,
        )

    raise ValueError(f"unknown task {task}")


def save_training_example(directory, example: TrainingExample) -> None:
    """Write the on-disk layout: encoder/, target/, condition.png, edit_mask/."""
    import json
    from pathlib import Path

    from . import videoio

    directory = Path(directory)
    videoio.save_video(directory / "encoder", example.encoder_video)
    videoio.save_video(directory / "target", example.target_video)
    videoio.save_frame(directory / "condition.png", example.first_frame_condition)
    videoio.save_mask(directory, example.edit_masks, prefix="edit_mask")
    info = {"task": example.task.name, "phrase_id": example.phrase_id, "seeds": example.meta}
    (directory / "example.json").write_text(json.dumps(info, indent=2))


def load_training_example(directory) -> TrainingExample:
    import json
    from pathlib import Path

    from . import videoio

    directory = Path(directory)
    info = json.loads((directory / "example.json").read_text())
    masks = videoio.load_masks(directory, prefix="edit_mask")
    return TrainingExample(
        encoder_video=videoio.load_video(directory / "encoder"),
        target_video=videoio.load_video(directory / "target"),
        first_frame_condition=videoio.load_frame(directory / "condition.png"),
        edit_masks=masks[0],
        task=TaskTag[info["task"]],
        phrase_id=int(info["phrase_id"]),
        meta=info.get("seeds", {}),
    )
