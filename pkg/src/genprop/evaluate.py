"""Held-out evaluation: removal, color-fill tracking, reconstruction, editing.

Eval items are built from procedural scenes with known specs, so every
task has exact ground truth: removal scores masked PSNR against a
re-render of the scene without the target instance plus MPD IoU against
its latent mask; tracking scores the IoU of the propagated fill-color
region against the true instance mask; reconstruction (identity edit)
scores plain PSNR; editing scores masked PSNR plus frame consistency.

Eval scenes are rendered without shadows so removal ground truth equals
the clean re-render exactly outside the instance mask.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import NoiseSchedule
from .datagen import DEFAULT_FILL_COLOR, TASK_PHRASE, TaskTag
from .propagate import PropagationRequest, propagate
from .propnet import PropagationModel
from .synthworld import RenderedScene, render_scene, sample_scene_spec
from .video import (
    MaskSequence,
    VideoTensor,
    downsample_mask,
    frame_consistency,
    mask_iou,
    psnr_db_for_report,
    psnr_masked,
    upsample_latent_mask,
)

COLOR_MATCH_TOLERANCE = 0.35  # max-channel distance that counts as "filled"
MIN_FILL_CONTRAST = 0.35  # scenes whose palette collides with the fill are skipped

EVAL_KINDS = ("removal", "tracking", "reconstruction", "editing")


@dataclass
class EvalItem:
    kind: str
    item_id: str
    input_video: VideoTensor
    edited_first_frame: np.ndarray
    phrase_id: int
    gt_video: VideoTensor | None = None
    exclude: MaskSequence | None = None
    gt_mask: MaskSequence | None = None
    fill_color: tuple | None = None


def _target_instance(scene: RenderedScene) -> int | None:
    """Last instance with a nonempty first-frame mask (never occluded)."""
    for i in range(len(scene.instance_masks) - 1, -1, -1):
        if scene.instance_masks[i].data[0].any():
            return i
    return None


def _render_clean(seed: int, canvas, frames) -> RenderedScene:
    spec = sample_scene_spec(seed, canvas=canvas, frames=frames, shadow_prob=0.0)
    return render_scene(spec)


def build_removal_item(seed: int, canvas=(32, 32), frames: int = 8) -> EvalItem | None:
    scene = _render_clean(seed, canvas, frames)
    idx = _target_instance(scene)
    if idx is None:
        return None
    clean = render_scene(scene.spec.without_instance(idx))
    return EvalItem(
        kind="removal",
        item_id=f"removal_{seed}",
        input_video=scene.video,
        edited_first_frame=clean.video.data[0].copy(),
        phrase_id=TASK_PHRASE[TaskTag.COPY_PASTE],
        gt_video=clean.video,
        exclude=scene.instance_masks[idx],
        gt_mask=scene.instance_masks[idx],
    )


def build_tracking_item(seed: int, canvas=(32, 32), frames: int = 8) -> EvalItem | None:
    scene = _render_clean(seed, canvas, frames)
    idx = _target_instance(scene)
    if idx is None:
        return None
    fill = np.asarray(DEFAULT_FILL_COLOR, dtype=np.float32)
    palette = [inst.color for inst in scene.spec.instances]
    palette.extend(scene.spec.background.colors())
    if min(np.abs(np.asarray(c) - fill).max() for c in palette) < MIN_FILL_CONTRAST:
        return None
    mask = scene.instance_masks[idx]
    edited = scene.video.data[0].copy()
    edited[mask.data[0] > 0.5] = fill
    return EvalItem(
        kind="tracking",
        item_id=f"tracking_{seed}",
        input_video=scene.video,
        edited_first_frame=edited,
        phrase_id=TASK_PHRASE[TaskTag.COLOR_FILL],
        gt_mask=mask,
        fill_color=tuple(float(c) for c in fill),
    )


def build_reconstruction_item(seed: int, canvas=(32, 32), frames: int = 8) -> EvalItem:
    scene = _render_clean(seed, canvas, frames)
    return EvalItem(
        kind="reconstruction",
        item_id=f"reconstruction_{seed}",
        input_video=scene.video,
        edited_first_frame=scene.video.data[0].copy(),
        phrase_id=TASK_PHRASE[TaskTag.COPY_PASTE],
        gt_video=scene.video,
    )


def build_editing_item(seed: int, canvas=(32, 32), frames: int = 8) -> EvalItem | None:
    scene = _render_clean(seed, canvas, frames)
    idx = _target_instance(scene)
    if idx is None:
        return None
    recolor = np.asarray((0.0, 1.0, 0.0), dtype=np.float32)
    mask = scene.instance_masks[idx]
    edited = scene.video.data[0].copy()
    edited[mask.data[0] > 0.5] = recolor
    return EvalItem(
        kind="editing",
        item_id=f"editing_{seed}",
        input_video=scene.video,
        edited_first_frame=edited,
        phrase_id=TASK_PHRASE[TaskTag.MASK_FILL],
        gt_video=scene.video,
        exclude=mask,
    )


def build_eval_items(kind: str, seeds, canvas=(32, 32), frames: int = 8, count: int | None = None):
    """Build items of one kind, skipping unsuitable seeds, up to ``count``."""
    builders = {
        "removal": build_removal_item,
        "tracking": build_tracking_item,
        "reconstruction": build_reconstruction_item,
        "editing": build_editing_item,
    }
    builder = builders[kind]
    items = []
    for seed in seeds:
        item = builder(seed, canvas=canvas, frames=frames)
        if item is not None:
            items.append(item)
        if count is not None and len(items) >= count:
            break
    return items


def extract_fill_region(
    video: VideoTensor,
    fill_color,
    original: VideoTensor | None = None,
    tolerance: float = COLOR_MATCH_TOLERANCE,
) -> MaskSequence:
    """Pixels carrying the fill color.

    A pixel counts as filled when its max-channel distance to the fill
    color is within tolerance and, if the original video is supplied,
    smaller than its distance to the original pixel (majority rule at
    soft shape boundaries).
    """
    d_fill = np.abs(video.data - np.asarray(fill_color, dtype=np.float32)).max(axis=-1)
    filled = d_fill <= tolerance
    if original is not None:
        d_orig = np.abs(video.data - original.data).max(axis=-1)
        filled &= d_fill < d_orig
    return MaskSequence(filled.astype(np.float32), instance_id=-1)


def mpd_iou(predicted_masks: MaskSequence, gt_mask: MaskSequence, latent_factor: int) -> float:
    """IoU of the MPD prediction against the binarized latent ground truth.

    The prediction is block-constant (nearest-upsampled from the latent
    grid), so comparing on the pixel grid against the upsampled latent
    ground truth equals the latent-grid IoU exactly.
    """
    gt_latent = downsample_mask(gt_mask, latent_factor, predicted_masks.frames).binarized()
    gt_pixels = upsample_latent_mask(gt_latent, latent_factor)
    return mask_iou(predicted_masks, MaskSequence(gt_pixels))


def evaluate_item(model: PropagationModel, item: EvalItem, *, seed: int = 0,
                  injection_weight: float = 1.0, cfg_scale: float | None = None,
                  steps: int | None = None, sched: NoiseSchedule | None = None) -> dict:
    req = PropagationRequest(
        original_video=item.input_video,
        edited_first_frame=item.edited_first_frame,
        phrase_id=item.phrase_id,
        injection_weight=injection_weight,
        cfg_scale=cfg_scale,
        seed=seed,
        steps=steps,
    )
    result = propagate(req, model, sched=sched)
    row = {"item_id": item.item_id, "kind": item.kind}

    if item.kind == "removal":
        if item.gt_video is None or item.exclude is None or item.gt_mask is None:
            raise ValueError("missing ground truth for removal item")
        psnr = psnr_masked(result.video_out, item.gt_video, item.exclude)
        row["psnr_m"] = psnr_db_for_report(psnr)
        row["mpd_iou"] = mpd_iou(result.predicted_masks, item.gt_mask, model.config.latent_factor)
    elif item.kind == "tracking":
        if item.gt_mask is None or item.fill_color is None:
            raise ValueError("missing ground truth for tracking item")
        pred = extract_fill_region(result.video_out, item.fill_color, original=item.input_video)
        row["track_iou"] = mask_iou(pred, item.gt_mask)
    elif item.kind == "reconstruction":
        if item.gt_video is None:
            raise ValueError("missing ground truth for reconstruction item")
        empty = MaskSequence(np.zeros(item.gt_video.data.shape[:3], dtype=np.float32))
        row["psnr"] = psnr_db_for_report(psnr_masked(result.video_out, item.gt_video, empty))
    elif item.kind == "editing":
        if item.gt_video is None or item.exclude is None:
            raise ValueError("missing ground truth for editing item")
        row["psnr_m"] = psnr_db_for_report(psnr_masked(result.video_out, item.gt_video, item.exclude))
        row["frame_consistency"] = frame_consistency(result.video_out)
    else:
        raise ValueError(f"unknown eval kind {item.kind!r}")
    return row


def evaluate_items(model: PropagationModel, items, **kwargs) -> dict:
    """Evaluate a batch of items; returns {items, aggregates, skipped}."""
    rows, skipped = [], []
    for item in items:
        try:
            rows.append(evaluate_item(model, item, **kwargs))
        except (ValueError, KeyError) as exc:
            warnings.warn(f"skipping {item.item_id}: {exc}")
            skipped.append({"item_id": item.item_id, "reason": str(exc)})
    return {"items": rows, "aggregates": aggregate_rows(rows), "skipped": skipped}


def aggregate_rows(rows) -> dict:
    agg: dict = {}
    for kind in EVAL_KINDS:
        kind_rows = [r for r in rows if r["kind"] == kind]
        if not kind_rows:
            continue
        metrics = [k for k in kind_rows[0] if k not in ("item_id", "kind")]
        agg[kind] = {"count": len(kind_rows)}
        for m in metrics:
            agg[kind][f"mean_{m}"] = float(np.mean([r[m] for r in kind_rows]))
    return agg


def validate_report(report: dict) -> dict:
    """Schema check for a serialized report; returns it unchanged."""
    for key in ("items", "aggregates", "skipped"):
        if key not in report:
            raise ValueError(f"report missing key {key!r}")
    for row in report["items"]:
        if "item_id" not in row or "kind" not in row:
            raise ValueError("report row missing item_id/kind")
        if row["kind"] not in EVAL_KINDS:
            raise ValueError(f"unknown kind {row['kind']!r} in report")
        for key, value in row.items():
            if key in ("item_id", "kind"):
                continue
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ValueError(f"non-finite metric {key} in {row['item_id']}")
    return report


def write_report(report: dict, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2))
    rows = report["items"]
    fields = ["item_id", "kind"]
    for row in rows:
        for key in row:
            if key not in fields:
                fields.append(key)
    with open(out_dir / "report.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def load_report(path: str | Path) -> dict:
    return validate_report(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# disk-based evaluation (CLI surface)


def items_from_scene_dir(scene_dir: Path, kinds=EVAL_KINDS) -> tuple[list, list]:
    """Build eval items from saved scenes; scenes without usable ground
    truth (e.g. no scene_spec.json for removal re-rendering) are skipped
    with a warning."""
    from .synthworld import load_scene

    items, skipped = [], []
    scene_paths = sorted(p for p in Path(scene_dir).iterdir() if p.is_dir())
    for idx, path in enumerate(scene_paths):
        scene = load_scene(path)
        kind = kinds[idx % len(kinds)]
        if scene.spec is None:
            warnings.warn(f"{path.name}: no scene_spec.json, skipping")
            skipped.append({"item_id": path.name, "reason": "missing ground truth (scene_spec.json)"})
            continue
        item = build_eval_items(kind, [scene.spec.seed], canvas=scene.spec.canvas, frames=scene.spec.frames)
        if not item:
            skipped.append({"item_id": path.name, "reason": f"seed unsuitable for {kind}"})
            continue
        items.append(item[0])
    return items, skipped


def evaluate_run(run_dir: str | Path, set_dir: str | Path, out_dir: str | Path | None = None,
                 steps: int | None = None, use_ema: bool = True) -> dict:
    """Load the newest checkpoint of a training run and evaluate a scene dir."""
    from .trainer import ema_model, load_checkpoint
    from .videoio import MissingArtifactError

    run_dir = Path(run_dir)
    ckpts = sorted((run_dir / "checkpoints").glob("step_*")) if (run_dir / "checkpoints").exists() else []
    if not ckpts:
        raise MissingArtifactError(f"no checkpoints under {run_dir}")
    state = load_checkpoint(ckpts[-1])
    model = ema_model(state) if use_ema else state.model
    if not isinstance(model, PropagationModel):
        from .propnet import assemble_propagation_model

        model = assemble_propagation_model(model)
    model.eval()

    items, skipped = items_from_scene_dir(Path(set_dir))
    report = evaluate_items(model, items, steps=steps)
    report["skipped"].extend(skipped)
    report["checkpoint"] = str(ckpts[-1])
    if out_dir is not None:
        write_report(report, out_dir)
    return report
