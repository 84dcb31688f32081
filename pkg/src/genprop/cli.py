"""Command line surface: synth / augment / train / propagate / eval.

Exit codes are a stable scripting contract: 0 success, 2 validation
error, 3 missing artifact, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4


def _parse_canvas(text: str) -> tuple[int, int]:
    h, _, w = text.partition("x")
    return int(h), int(w)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="genprop", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate procedural scenes with ground-truth masks")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--canvas", type=_parse_canvas, default=(32, 32), metavar="HxW")
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--shadow-prob", type=float, default=0.4)

    p = sub.add_parser("augment", help="build synthetic training examples from scenes")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--task", choices=("copy", "fill", "color", "mixed"), default="mixed")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="run a training phase")
    p.add_argument("--config", required=True, help="JSON with {train: ..., model: ...}")
    p.add_argument("--data", required=True, help="directory of synth scenes")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--backbone", help="checkpoint dir of a pretrained backbone (prop phase)")
    p.add_argument("--steps", type=int, help="override config total_steps")
    p.add_argument("--checkpoint-every", type=int, default=0)

    p = sub.add_parser("propagate", help="propagate a first-frame edit through a video")
    p.add_argument("--video", required=True, help="video directory (frames + manifest)")
    p.add_argument("--edited-frame", required=True, help="edited first frame PNG")
    p.add_argument("--phrase", default="propagate the first frame edit")
    p.add_argument("--weight", type=float, default=1.0)
    p.add_argument("--cfg", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--black-region", help="mask directory for motion control")
    p.add_argument("--no-ema", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a run on a held-out scene directory")
    p.add_argument("--run", required=True)
    p.add_argument("--set", dest="set_dir", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--steps", type=int, default=None)
    return parser


def cmd_synth(args) -> int:
    from .synthworld import render_scene, sample_scene_spec, save_scene

    out = Path(args.out)
    for i in range(args.count):
        spec = sample_scene_spec(
            args.seed + i, canvas=args.canvas, frames=args.frames, shadow_prob=args.shadow_prob
        )
        save_scene(out / f"scene_{i:05d}", render_scene(spec))
    print(f"wrote {args.count} scenes to {out}")
    return EXIT_OK


def cmd_augment(args) -> int:
    from .datagen import SkipExample, TaskTag, build_training_example, sample_task, save_training_example
    from .synthworld import load_scene
    from .videoio import MissingArtifactError

    in_dir = Path(args.in_dir)
    scene_dirs = sorted(p for p in in_dir.iterdir() if p.is_dir()) if in_dir.exists() else []
    if not scene_dirs:
        raise MissingArtifactError(f"no scenes found under {in_dir}")
    scenes = [load_scene(p) for p in scene_dirs]
    fixed = {"copy": TaskTag.COPY_PASTE, "fill": TaskTag.MASK_FILL, "color": TaskTag.COLOR_FILL}

    out = Path(args.out)
    written = 0
    attempt = 0
    while written < args.count and attempt < args.count * 32:
        seed = args.seed + attempt
        attempt += 1
        rng = np.random.default_rng(seed)
        task = fixed.get(args.task) or sample_task(seed)
        base = scenes[int(rng.integers(0, len(scenes)))]
        donor = None
        if task is TaskTag.COPY_PASTE:
            if len(scenes) < 2:
                task = TaskTag.MASK_FILL
            else:
                j = int(rng.integers(0, len(scenes) - 1))
                donor = scenes[j if scenes[j] is not base else len(scenes) - 1]
        try:
            example = build_training_example(base, donor, task, rng_seed=seed)
        except SkipExample:
            continue
        save_training_example(out / f"example_{written:05d}", example)
        written += 1
    if written < args.count:
        raise ValueError(f"only built {written}/{args.count} examples (scenes unsuitable)")
    print(f"wrote {written} examples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .synthworld import load_scene
    from .trainer import (
        PretrainDataSource,
        SceneDataSource,
        TrainConfig,
        init_backbone_state,
        init_prop_state,
        load_checkpoint,
        save_checkpoint,
        train_loop,
    )
    from .backbone import ModelConfig
    from .videoio import MissingArtifactError

    config_path = Path(args.config)
    if not config_path.exists():
        raise MissingArtifactError(f"no config at {config_path}")
    raw = json.loads(config_path.read_text())
    train_cfg = TrainConfig.from_dict(raw.get("train", {}))
    model_cfg = ModelConfig.from_dict(raw["model"]) if "model" in raw else ModelConfig()

    data_dir = Path(args.data)
    scene_dirs = sorted(p for p in data_dir.iterdir() if p.is_dir()) if data_dir.exists() else []
    if not scene_dirs:
        raise MissingArtifactError(f"no scenes found under {data_dir}")
    scenes = [load_scene(p) for p in scene_dirs]

    if train_cfg.phase == "backbone":
        state = init_backbone_state(model_cfg, train_cfg)
        source = PretrainDataSource(scenes, train_cfg.seed)
    else:
        if args.backbone:
            backbone_state = load_checkpoint(Path(args.backbone), expected_model_config=model_cfg)
            backbone = backbone_state.model
        else:
            from .backbone import VideoDenoiser
            import torch

            torch.manual_seed(train_cfg.seed)
            backbone = VideoDenoiser(model_cfg)
        state = init_prop_state(backbone, train_cfg)
        source = SceneDataSource(scenes, train_cfg.seed, task_ratio=train_cfg.task_ratio)

    run_dir = Path(args.out)
    started = time.perf_counter()
    state, _ = train_loop(
        state,
        source,
        steps=args.steps,
        run_dir=run_dir,
        checkpoint_every=args.checkpoint_every or None,
    )
    save_checkpoint(state, run_dir / "checkpoints" / f"step_{state.step:06d}")
    manifest = {
        "steps": state.step,
        "elapsed_s": time.perf_counter() - started,
        "phase": train_cfg.phase,
        "seed": train_cfg.seed,
    }
    (run_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"trained to step {state.step}; run dir {run_dir}")
    return EXIT_OK


def cmd_propagate(args) -> int:
    from . import videoio
    from .propagate import PropagationRequest, propagate
    from .propnet import PropagationModel, assemble_propagation_model
    from .trainer import ema_model, load_checkpoint
    from .videoio import MissingArtifactError

    video = videoio.load_video(Path(args.video))
    edited = videoio.load_frame(Path(args.edited_frame))
    state = load_checkpoint(Path(args.checkpoint))
    model = state.model if args.no_ema else ema_model(state)
    if not isinstance(model, PropagationModel):
        model = assemble_propagation_model(model)
    model.eval()

    vocab = list(model.config.vocab)
    if args.phrase not in vocab:
        raise ValueError(f"unknown phrase {args.phrase!r}; vocab: {vocab}")

    black = None
    if args.black_region:
        masks = videoio.load_masks(Path(args.black_region), prefix="mask")
        if not masks:
            raise MissingArtifactError(f"no masks under {args.black_region}")
        black = masks[0]

    request = PropagationRequest(
        original_video=video,
        edited_first_frame=edited,
        phrase_id=vocab.index(args.phrase),
        injection_weight=args.weight,
        cfg_scale=args.cfg,
        seed=args.seed,
        steps=args.steps,
        black_region=black,
    )
    result = propagate(request, model)
    if not np.isfinite(result.video_out.data).all():
        raise ArithmeticError("propagation produced non-finite pixels")

    out = Path(args.out)
    videoio.save_video(out, result.video_out)
    videoio.save_mask(out, result.predicted_masks, prefix="predicted_mask")
    (out / "manifest.json").write_text(json.dumps(result.manifest, indent=2))
    print(f"propagated {args.video} -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluate import evaluate_run

    report = evaluate_run(args.run, args.set_dir, out_dir=args.out, steps=args.steps)
    for kind, agg in report["aggregates"].items():
        metrics = ", ".join(f"{k}={v:.4f}" for k, v in agg.items() if k != "count")
        print(f"{kind} (n={agg['count']}): {metrics}")
    for metric_block in report["aggregates"].values():
        for value in metric_block.values():
            if isinstance(value, float) and not math.isfinite(value):
                raise ArithmeticError("evaluation produced non-finite aggregates")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "augment": cmd_augment,
    "train": cmd_train,
    "propagate": cmd_propagate,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code not in (0, None) else EXIT_OK
    from .trainer import ConfigMismatchError, CorruptCheckpointError, NonFiniteLossError
    from .videoio import MissingArtifactError

    try:
        return COMMANDS[args.command](args)
    except (MissingArtifactError, FileNotFoundError) as exc:
        print(f"error: missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NonFiniteLossError, ArithmeticError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, ConfigMismatchError, CorruptCheckpointError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
