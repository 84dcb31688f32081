"""End-to-end desk-scale run: pretrain, propagation training, ablations, eval.

Drives the whole recipe on procedural scenes and returns one results
dict. Used by the acceptance suite (CPU smoke scale) and by
``scripts/run_desk_acceptance.py`` (optionally at the full 32x32 scale).

The backbone is pretrained from scratch as a plain first-frame
conditioned denoiser (the published recipe assumes an existing I2V
model), then frozen for the propagation phase. Ablation models (no MPD
supervision, no region-aware loss) train for a shorter budget and are
compared against a same-step checkpoint of the full model, which then
continues to its final budget.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import evaluate, trainer
from .backbone import ModelConfig, VideoDenoiser
from .synthworld import render_scene, sample_scene_spec

HOLDOUT_SEED_BASE = 1_000_000  # eval scenes never overlap the training pool


@dataclass
class DeskRunConfig:
    model: ModelConfig
    canvas: tuple = (16, 16)
    frames: int = 8
    train_scenes: int = 2000
    holdout_scenes: int = 50
    pretrain_steps: int = 3000
    prop_steps: int = 1800
    ablation_steps: int = 700
    pretrain_lr: float = 3e-4
    prop_lr: float = 3e-4
    ema_decay: float = 0.995
    batch: int = 8
    eval_sample_steps: int = 16
    seed: int = 20240801
    warmup_fraction: float = 0.05
    extra: dict = field(default_factory=dict)

    def total_steps(self) -> int:
        return self.pretrain_steps + self.prop_steps + 2 * self.ablation_steps


def _train_config(cfg: DeskRunConfig, phase: str, steps: int, lr: float, **overrides) -> trainer.TrainConfig:
    base = dict(
        lr_base=lr,
        warmup_steps=max(1, int(steps * cfg.warmup_fraction)),
        total_steps=steps,
        ema_decay=cfg.ema_decay,
        batch=cfg.batch,
        seed=cfg.seed,
        phase=phase,
    )
    base.update(overrides)
    return trainer.TrainConfig(**base)


def build_scene_pool(cfg: DeskRunConfig):
    return [
        render_scene(sample_scene_spec(seed, canvas=cfg.canvas, frames=cfg.frames))
        for seed in range(cfg.train_scenes)
    ]


def pretrain_backbone(cfg: DeskRunConfig, scenes, log=print):
    tc = _train_config(cfg, "backbone", cfg.pretrain_steps, cfg.pretrain_lr)
    state = trainer.init_backbone_state(cfg.model, tc)
    source = trainer.PretrainDataSource(scenes, tc.seed)
    state, traces = trainer.train_loop(state, source)
    log(
        f"backbone pretrain: {cfg.pretrain_steps} steps, "
        f"loss {np.mean([b.total for b in traces[:50]]):.4f} -> {np.mean([b.total for b in traces[-50:]]):.4f}"
    )
    return state


def train_propagation(cfg: DeskRunConfig, backbone_model, scenes, *, steps, seed_offset=0,
                      mpd_enabled=True, ra_enabled=True, log=print, tag="prop"):
    tc = _train_config(
        cfg,
        "prop",
        steps,
        cfg.prop_lr,
        seed=cfg.seed + seed_offset,
        mpd_enabled=mpd_enabled,
        ra_enabled=ra_enabled,
    )
    state = trainer.init_prop_state(backbone_model, tc)
    source = trainer.SceneDataSource(scenes, tc.seed)
    checkpoints = {}

    def on_step(st, _):
        if st.step in checkpoint_at:
            checkpoints[st.step] = trainer.ema_model(st)

    checkpoint_at = set(cfg.extra.get(f"{tag}_checkpoints", ()))
    state, traces = trainer.train_loop(state, source, on_step=on_step if checkpoint_at else None)
    log(
        f"{tag}: {steps} steps, total {np.mean([b.total for b in traces[:50]]):.4f} -> "
        f"{np.mean([b.total for b in traces[-50:]]):.4f}"
    )
    return state, checkpoints


def eval_kind(model, cfg: DeskRunConfig, kind: str, count: int | None = None):
    seeds = range(HOLDOUT_SEED_BASE, HOLDOUT_SEED_BASE + 40 * cfg.holdout_scenes)
    items = evaluate.build_eval_items(
        kind, seeds, canvas=cfg.canvas, frames=cfg.frames, count=count or cfg.holdout_scenes
    )
    report = evaluate.evaluate_items(model, items, steps=cfg.eval_sample_steps)
    return report["aggregates"].get(kind, {}), report


def run(cfg: DeskRunConfig, log=print) -> dict:
    """Execute the full desk pipeline; returns metrics and timing."""
    started = time.perf_counter()
    results: dict = {"config": {"canvas": list(cfg.canvas), "steps_budget": cfg.total_steps()}}

    scenes = build_scene_pool(cfg)
    log(f"scene pool: {len(scenes)} scenes at {cfg.canvas}")

    backbone_state = pretrain_backbone(cfg, scenes, log=log)
    frozen_backbone = trainer.ema_model(backbone_state)

    cfg.extra.setdefault("full_checkpoints", (cfg.ablation_steps,))
    full_state, checkpoints = train_propagation(
        cfg, frozen_backbone, scenes, steps=cfg.prop_steps, log=log, tag="full"
    )
    full_model = trainer.ema_model(full_state)
    full_model.eval()
    full_at_ablation = checkpoints.get(cfg.ablation_steps)
    if full_at_ablation is not None:
        full_at_ablation.eval()

    removal_agg, _ = eval_kind(full_model, cfg, "removal")
    tracking_agg, _ = eval_kind(full_model, cfg, "tracking")
    recon_agg, _ = eval_kind(full_model, cfg, "reconstruction")
    results["removal"] = removal_agg
    results["tracking"] = tracking_agg
    results["reconstruction"] = recon_agg
    log(f"full model: removal={removal_agg} tracking={tracking_agg} reconstruction={recon_agg}")

    # ablations, each compared against the full model at the same step count
    no_mpd_state, _ = train_propagation(
        cfg, frozen_backbone, scenes, steps=cfg.ablation_steps, seed_offset=0,
        mpd_enabled=False, log=log, tag="no_mpd",
    )
    no_mpd_model = trainer.ema_model(no_mpd_state)
    no_mpd_model.eval()
    no_ra_state, _ = train_propagation(
        cfg, frozen_backbone, scenes, steps=cfg.ablation_steps, seed_offset=0,
        ra_enabled=False, log=log, tag="no_ra",
    )
    no_ra_model = trainer.ema_model(no_ra_state)
    no_ra_model.eval()

    reference = full_at_ablation if full_at_ablation is not None else full_model
    ref_removal, _ = eval_kind(reference, cfg, "removal")
    ref_tracking, _ = eval_kind(reference, cfg, "tracking")
    ablation_removal, _ = eval_kind(no_mpd_model, cfg, "removal")
    ablation_tracking, _ = eval_kind(no_ra_model, cfg, "tracking")
    results["ablations"] = {
        "reference_step": cfg.ablation_steps if full_at_ablation is not None else cfg.prop_steps,
        "full_mpd_iou": ref_removal.get("mean_mpd_iou"),
        "no_mpd_mpd_iou": ablation_removal.get("mean_mpd_iou"),
        "full_track_iou": ref_tracking.get("mean_track_iou"),
        "no_ra_track_iou": ablation_tracking.get("mean_track_iou"),
    }
    log(f"ablations: {results['ablations']}")

    results["trainable_parameters"] = sum(p.numel() for p in full_state.model.trainable_parameters())
    results["elapsed_s"] = time.perf_counter() - started
    results["steps_used"] = cfg.total_steps()
    return results
