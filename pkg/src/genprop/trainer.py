"""Optimization loop: linear warmup + cosine decay, tiny global gradient
norm threshold, EMA shadow weights, deterministic per-step seeding, and
bit-exact checkpoint resume.

Two phases share the machinery:

* ``backbone``: pretrains the I2V model itself on clean procedural clips
  (plain epsilon MSE). The published recipe starts from a pretrained
  generator; at desk scale we must make our own.
* ``prop``: the propagation recipe proper. The backbone is frozen; only
  SCE, injection MLPs, fusion projection and MPD receive gradients, and
  the region-aware loss applies.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
from copy import deepcopy
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import datagen
from .backbone import ModelConfig, NoiseSchedule, VideoDenoiser, add_noise, pixels_to_latent
from .datagen import SkipExample, TaskTag, build_training_example, sample_task
from .losses import LossBreakdown, LossWeights, channel_norm, masked_diffusion_loss, mpd_loss, ra_total
from .propnet import PropagationModel, assemble_propagation_model
from .video import downsample_mask

LOSS_CSV_FIELDS = ("step", "non_mask", "mask", "grad", "mpd", "total", "lr", "grad_norm")


class CorruptCheckpointError(RuntimeError):
    pass


class ConfigMismatchError(RuntimeError):
    pass


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr_base: float = 5e-5
    warmup_steps: int = 100
    total_steps: int = 2000
    ema_decay: float = 0.999
    grad_norm_threshold: float = 0.001
    grad_norm_mode: str = "clip"  # "clip" rescales, "skip" drops the update
    batch: int = 8
    seed: int = 0
    task_ratio: tuple = (0.5, 0.375, 0.125)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    cond_dropout: float = 0.1
    weight_decay: float = 0.0
    phase: str = "prop"  # "prop" | "backbone"
    mpd_enabled: bool = True
    ra_enabled: bool = True

    def __post_init__(self):
        if self.warmup_steps >= self.total_steps:
            raise ValueError("warmup_steps must be < total_steps")
        if min(self.lr_base, self.ema_decay, self.grad_norm_threshold) <= 0:
            raise ValueError("rates must be positive")
        if not 0 < self.ema_decay < 1:
            raise ValueError("ema_decay must be in (0, 1)")
        if self.phase not in ("prop", "backbone"):
            raise ValueError("phase must be 'prop' or 'backbone'")
        if self.grad_norm_mode not in ("clip", "skip"):
            raise ValueError("grad_norm_mode must be 'clip' or 'skip'")
        if abs(sum(self.task_ratio) - 1.0) > 1e-9:
            raise ValueError("task_ratio must sum to 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task_ratio"] = list(self.task_ratio)
        return d

    @staticmethod
    def from_dict(raw: dict) -> "TrainConfig":
        raw = dict(raw)
        if "task_ratio" in raw:
            raw["task_ratio"] = tuple(raw["task_ratio"])
        lw = raw.get("loss_weights")
        if isinstance(lw, dict):
            raw["loss_weights"] = LossWeights(**lw)
        return TrainConfig(**raw)


def derive_seed(*parts: int) -> int:
    """Stable, well-mixed 63-bit seed from integer components."""
    state = np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(2)
    return (int(state[0]) << 31 | int(state[1]) >> 1) & 0x7FFFFFFFFFFFFFFF


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_base, then cosine decay to zero."""
    if step < 0 or step > cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.lr_base * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr_base * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(grads) -> float:
    total = 0.0
    for g in grads:
        total += float(g.detach().double().square().sum())
    return math.sqrt(total)


def clip_gradients(grads, threshold: float):
    """Rescale all gradients so the global l2 norm is <= threshold.

    The boundary is inclusive: a norm exactly at the threshold is left
    untouched.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    grads = list(grads)
    norm = global_grad_norm(grads)
    if norm <= threshold:
        return grads
    scale = threshold / norm
    return [g * scale for g in grads]


def ema_update(params, shadow, decay: float):
    """shadow <- decay * shadow + (1 - decay) * params, elementwise."""
    if not 0 < decay < 1:
        raise ValueError("decay must be in (0, 1)")
    if isinstance(params, dict):
        if params.keys() != shadow.keys():
            raise ValueError("ema shadow keys do not match params")
        return {k: ema_update([params[k]], [shadow[k]], decay)[0] for k in params}
    out = []
    for p, s in zip(params, shadow, strict=True):
        if p.shape != s.shape:
            raise ValueError("ema shadow shape mismatch")
        out.append(decay * s.detach() + (1.0 - decay) * p.detach())
    return out


# ---------------------------------------------------------------------------
# data sources


class SceneDataSource:
    """Builds routed training examples from rendered scenes, per-step seeded."""

    def __init__(self, scenes, base_seed: int, task_ratio=(0.5, 0.375, 0.125), color_cfg=None):
        if not scenes:
            raise ValueError("need at least one scene")
        self.scenes = list(scenes)
        self.base_seed = base_seed
        self.task_ratio = tuple(task_ratio)
        self.color_cfg = color_cfg

    def _draw_task(self, seed: int) -> TaskTag:
        if self.task_ratio == (0.5, 0.375, 0.125):
            return sample_task(seed)
        r = np.random.default_rng(seed).random()
        acc = 0.0
        for tag, p in zip(TaskTag, self.task_ratio):
            acc += p
            if r < acc:
                return tag
        return TaskTag.COLOR_FILL

    def example(self, step: int, slot: int) -> datagen.TrainingExample:
        for attempt in range(32):
            seed = derive_seed(self.base_seed, step, slot, attempt)
            rng = np.random.default_rng(seed)
            task = self._draw_task(derive_seed(seed, 1))
            base = self.scenes[int(rng.integers(0, len(self.scenes)))]
            donor = None
            if task is TaskTag.COPY_PASTE:
                if len(self.scenes) < 2:
                    task = TaskTag.MASK_FILL
                else:
                    j = int(rng.integers(0, len(self.scenes) - 1))
                    donor = self.scenes[j if self.scenes[j] is not base else len(self.scenes) - 1]
            try:
                ex = build_training_example(
                    base, donor, task, rng_seed=derive_seed(seed, 2), color_cfg=self.color_cfg
                )
            except SkipExample:
                continue
            ex.meta["example_id"] = f"s{step}b{slot}a{attempt}"
            return ex
        raise RuntimeError(f"no viable example after 32 attempts (step {step}, slot {slot})")

    def batch(self, step: int, n: int):
        return [self.example(step, i) for i in range(n)]


class PretrainDataSource:
    """Plain clean clips for backbone pretraining."""

    def __init__(self, scenes, base_seed: int):
        if not scenes:
            raise ValueError("need at least one scene")
        self.scenes = list(scenes)
        self.base_seed = base_seed

    def batch(self, step: int, n: int):
        rng = np.random.default_rng(derive_seed(self.base_seed, step, 7))
        return [self.scenes[int(i)].video for i in rng.integers(0, len(self.scenes), size=n)]


# ---------------------------------------------------------------------------
# train state


@dataclass
class TrainState:
    step: int
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer
    ema: dict
    config: TrainConfig
    model_config: ModelConfig
    sched: NoiseSchedule
    base_seed: int
    last_grad_norm: float = 0.0

    def trainable_named(self):
        if isinstance(self.model, PropagationModel):
            return self.model.trainable_named_parameters()
        return list(self.model.named_parameters())

    def trainable(self):
        return [p for _, p in self.trainable_named()]


def _make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    # decoupled weight decay; betas are the field-standard default. Decay is
    # kept at zero: with the tiny clipped gradient norms used here a nonzero
    # decay overpowers the adapter pathway and pins it near its zero init.
    return torch.optim.AdamW(params, lr=cfg.lr_base, betas=(0.9, 0.999), weight_decay=cfg.weight_decay)


def init_backbone_state(model_config: ModelConfig, cfg: TrainConfig) -> TrainState:
    torch.manual_seed(derive_seed(cfg.seed, 9000))
    model = VideoDenoiser(model_config)
    opt = _make_optimizer(list(model.parameters()), cfg)
    ema = {n: p.detach().clone() for n, p in model.named_parameters()}
    sched = NoiseSchedule.cosine(model_config.diffusion_steps)
    return TrainState(0, model, opt, ema, cfg, model_config, sched, cfg.seed)


def init_prop_state(backbone: VideoDenoiser, cfg: TrainConfig) -> TrainState:
    torch.manual_seed(derive_seed(cfg.seed, 9001))
    model = assemble_propagation_model(backbone)
    params = model.trainable_parameters()
    opt = _make_optimizer(params, cfg)
    ema = {n: p.detach().clone() for n, p in model.trainable_named_parameters()}
    sched = NoiseSchedule.cosine(model.config.diffusion_steps)
    return TrainState(0, model, opt, ema, cfg, model.config, sched, cfg.seed)


def ema_model(state: TrainState):
    """Copy of the model with EMA weights swapped into the trainable set."""
    model = deepcopy(state.model)
    with torch.no_grad():
        named = dict(model.named_parameters())
        for name, value in state.ema.items():
            named[name].copy_(value)
    return model


# ---------------------------------------------------------------------------
# steps


def _stack_latents(videos, factor: int) -> torch.Tensor:
    return torch.stack([pixels_to_latent(v.data, factor) for v in videos])


def _apply_grad_update(state: TrainState) -> float:
    cfg = state.config
    params = state.trainable()
    grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in params]
    pre_norm = global_grad_norm(grads)
    if cfg.grad_norm_mode == "skip" and pre_norm > cfg.grad_norm_threshold:
        state.optimizer.zero_grad(set_to_none=True)
        state.last_grad_norm = 0.0
        return 0.0
    clipped = clip_gradients(grads, cfg.grad_norm_threshold)
    with torch.no_grad():
        for p, g in zip(params, clipped):
            p.grad = g
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    post_norm = min(pre_norm, cfg.grad_norm_threshold)
    state.last_grad_norm = post_norm
    return post_norm


def _finish_step(state: TrainState):
    named = dict(state.trainable_named())
    state.ema = ema_update({k: named[k] for k in state.ema}, state.ema, state.config.ema_decay)
    state.step += 1


def _set_lr(state: TrainState):
    lr = lr_at(state.step, state.config)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    return lr


def pretrain_step(state: TrainState, videos) -> tuple[TrainState, LossBreakdown]:
    """Plain I2V denoising step on clean clips (backbone phase)."""
    cfg = state.config
    mcfg = state.model_config
    model: VideoDenoiser = state.model
    b = len(videos)
    g = torch.Generator().manual_seed(derive_seed(state.base_seed, state.step, 11))

    x0 = _stack_latents(videos, mcfg.latent_factor)
    cond_lat = torch.stack([pixels_to_latent(v.data[0], mcfg.latent_factor) for v in videos])
    t = torch.randint(0, state.sched.steps, (b,), generator=g)
    eps = torch.randn(x0.shape, generator=g)
    x_t = add_noise(x0, eps, t, state.sched)

    # random task/phrase ids with dropout keep the embedding tables
    # in-distribution even though they carry no signal during pretraining
    task_ids = torch.randint(0, len(TaskTag), (b,), generator=g)
    phrase_ids = torch.randint(0, len(mcfg.vocab), (b,), generator=g)
    drop = torch.rand(b, generator=g) < cfg.cond_dropout
    task_ids = torch.where(drop, torch.full_like(task_ids, mcfg.null_task_id), task_ids)
    phrase_ids = torch.where(drop, torch.full_like(phrase_ids, mcfg.null_phrase_id), phrase_ids)

    out = model.denoise(x_t, t, cond_lat, task_ids, phrase_ids)
    loss = (out.eps - eps).square().mean()
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite pretrain loss at step {state.step}")
    loss.backward()
    _apply_grad_update(state)
    _finish_step(state)
    value = float(loss.detach())
    return state, LossBreakdown(non_mask=value, mask=0.0, grad=0.0, mpd=0.0, total=value)


def train_step(state: TrainState, batch) -> tuple[TrainState, LossBreakdown]:
    """One propagation step: route examples, apply the region-aware loss,
    update the trainable set only."""
    cfg = state.config
    w = cfg.loss_weights
    mcfg = state.model_config
    model: PropagationModel = state.model
    if not batch:
        raise ValueError("batch must be nonempty")
    b = len(batch)
    g = torch.Generator().manual_seed(derive_seed(state.base_seed, state.step, 13))

    target_lat = _stack_latents([ex.target_video for ex in batch], mcfg.latent_factor)
    ref_lat = _stack_latents([ex.encoder_video for ex in batch], mcfg.latent_factor)
    cond_lat = torch.stack(
        [pixels_to_latent(ex.first_frame_condition, mcfg.latent_factor) for ex in batch]
    )
    soft_masks = torch.stack(
        [
            torch.from_numpy(
                downsample_mask(ex.edit_masks, mcfg.latent_factor, mcfg.frames).data
            )
            for ex in batch
        ]
    )  # (B, T, h, w)
    m = soft_masks[:, :, None]  # broadcast over channels

    t = torch.randint(0, state.sched.steps, (b,), generator=g)
    eps = torch.randn(target_lat.shape, generator=g)
    x_t = add_noise(target_lat, eps, t, state.sched)

    task_ids = torch.tensor([ex.task.value for ex in batch])
    phrase_ids = torch.tensor([ex.phrase_id for ex in batch])
    drop = torch.rand(b, generator=g) < cfg.cond_dropout
    task_ids = torch.where(drop, torch.full_like(task_ids, mcfg.null_task_id), task_ids)
    phrase_ids = torch.where(drop, torch.full_like(phrase_ids, mcfg.null_phrase_id), phrase_ids)

    out = model(x_t, t, cond_lat, task_ids, phrase_ids, ref_lat, injection_weight=1.0)

    zero = torch.zeros((), dtype=out.eps.dtype)
    if cfg.ra_enabled:
        non_mask_t = masked_diffusion_loss(out.eps, eps, 1.0 - m)
        mask_t = masked_diffusion_loss(out.eps, eps, m)
        grad_t = _encoder_grad_penalty(model, state, batch, out, task_ids, phrase_ids, t, m) if w.beta > 0 else zero
    else:
        non_mask_t = masked_diffusion_loss(out.eps, eps, torch.ones_like(m))
        mask_t = zero
        grad_t = zero
    if cfg.mpd_enabled:
        mpd_t = mpd_loss(out.mask_logits, soft_masks)
    else:
        mpd_t = zero

    total_t = non_mask_t + w.lam * mask_t + w.beta * grad_t + w.gamma * mpd_t
    if not torch.isfinite(total_t):
        ids = [ex.meta.get("example_id", "?") for ex in batch]
        raise NonFiniteLossError(f"non-finite loss at step {state.step}; examples: {ids}")

    total_t.backward()
    _apply_grad_update(state)
    _finish_step(state)
    breakdown = ra_total(
        float(non_mask_t.detach()),
        float(mask_t.detach()),
        float(grad_t.detach()),
        float(mpd_t.detach()),
        w,
    )
    return state, breakdown


def _encoder_grad_penalty(model, state, batch, out, task_ids, phrase_ids, t, m):
    """Extra SCE-only pass on a perturbed encoder input (backbone untouched)."""
    cfg = state.config
    w = cfg.loss_weights
    mcfg = state.model_config
    pixel_masks = torch.stack(
        [torch.from_numpy(ex.edit_masks.data) for ex in batch]
    )[:, :, None]  # (B, T, 1, H, W)
    if w.perturb_full_frame:
        pixel_masks = torch.ones_like(pixel_masks)
    enc_pixels = torch.stack(
        [torch.as_tensor(ex.encoder_video.data, dtype=torch.float32) for ex in batch]
    ).movedim(-1, 2)  # (B, T, C, H, W)
    cond_vec = model.backbone.cond_vector(t, task_ids, phrase_ids, len(batch))

    f0 = torch.cat(out.taps.per_block, dim=-1)
    perturbed = (enc_pixels + w.delta * pixel_masks) * 2.0 - 1.0
    if mcfg.latent_factor > 1:
        b_, t_, c_, hh, ww = perturbed.shape
        perturbed = torch.nn.functional.avg_pool2d(
            perturbed.reshape(b_ * t_, c_, hh, ww), mcfg.latent_factor
        ).reshape(b_, t_, c_, hh // mcfg.latent_factor, ww // mcfg.latent_factor)
    f1 = torch.cat(model.sce(perturbed, out.entry, cond_vec).per_block, dim=-1)
    delta_f = (f1 - f0) / w.delta

    soft = m[:, :, 0]  # (B, T, h, w)
    pooled = torch.nn.functional.avg_pool2d(soft, mcfg.patch)  # token-grid weights
    weight = pooled.flatten(2)  # (B, T, S)
    return (weight * channel_norm(delta_f, weight)).mean()


# ---------------------------------------------------------------------------
# loop + run directory


def environment_manifest() -> dict:
    return {
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "platform": platform.platform(),
    }


class LossLogger:
    def __init__(self, path: Path | None):
        self.path = Path(path) if path is not None else None
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            new = not self.path.exists()
            self._fh = open(self.path, "a", newline="")
            self.writer = csv.DictWriter(self._fh, fieldnames=LOSS_CSV_FIELDS)
            if new:
                self.writer.writeheader()

    def log(self, step: int, breakdown: LossBreakdown, lr: float, grad_norm: float):
        if self._fh is None:
            return
        row = {"step": step, "lr": lr, "grad_norm": grad_norm}
        row.update(breakdown.as_row())
        self.writer.writerow(row)

    def close(self):
        if self._fh is not None:
            self._fh.flush()
            self._fh.close()
            self._fh = None


def train_loop(state: TrainState, data_source, steps: int | None = None, run_dir=None,
               checkpoint_every: int | None = None, on_step=None):
    """Run up to ``steps`` more steps (default: until config.total_steps)."""
    cfg = state.config
    remaining = cfg.total_steps - state.step if steps is None else steps
    run_dir = Path(run_dir) if run_dir is not None else None
    logger = LossLogger(run_dir / "loss.csv" if run_dir else None)
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
        (run_dir / "model_config.json").write_text(json.dumps(state.model_config.to_dict(), indent=2))
        (run_dir / "environment.json").write_text(json.dumps(environment_manifest(), indent=2))
    traces = []
    try:
        for _ in range(remaining):
            lr = _set_lr(state)
            logged_step = state.step
            if cfg.phase == "backbone":
                state, breakdown = pretrain_step(state, data_source.batch(state.step, cfg.batch))
            else:
                state, breakdown = train_step(state, data_source.batch(state.step, cfg.batch))
            logger.log(logged_step, breakdown, lr, state.last_grad_norm)
            traces.append(breakdown)
            if on_step is not None:
                on_step(state, breakdown)
            if run_dir is not None and checkpoint_every and state.step % checkpoint_every == 0:
                save_checkpoint(state, run_dir / "checkpoints" / f"step_{state.step:06d}")
    finally:
        logger.close()
    return state, traces


# ---------------------------------------------------------------------------
# checkpoints


def _tensor_checksum(t: torch.Tensor) -> str:
    arr = t.detach().cpu().contiguous().numpy()
    return hashlib.sha256(arr.tobytes()).hexdigest()


def parameter_checksums(module: torch.nn.Module) -> dict:
    return {n: _tensor_checksum(p) for n, p in module.named_parameters()}


def component_manifest(model: torch.nn.Module) -> dict:
    names = [n for n, _ in model.named_parameters()]
    if not isinstance(model, PropagationModel):
        return {"backbone": names}
    return {
        "backbone": [n for n in names if n.startswith("backbone.")],
        "sce": [
            n
            for n in names
            if n.startswith("sce.") and not n.startswith(("sce.injections.", "sce.fusion."))
        ],
        "injections": [n for n in names if n.startswith("sce.injections.")],
        "fusion": [n for n in names if n.startswith("sce.fusion.")],
        "mpd": [n for n in names if n.startswith("mpd.")],
    }


def save_checkpoint(state: TrainState, path) -> Path:
    """Write a binary blob plus a checkpoint.json manifest; returns the dir."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = {
        "step": state.step,
        "base_seed": state.base_seed,
        "model_state": state.model.state_dict(),
        "optimizer_state": state.optimizer.state_dict(),
        "ema": state.ema,
        "train_config": state.config.to_dict(),
        "model_config": state.model_config.to_dict(),
    }
    torch.save(blob, path / "state.pt")
    manifest = {
        "config": state.model_config.to_dict(),
        "train_config": state.config.to_dict(),
        "step": state.step,
        "ema": True,
        "parameters": [
            {"name": n, "shape": list(p.shape), "sha256": _tensor_checksum(p)}
            for n, p in state.model.named_parameters()
        ],
        "components": component_manifest(state.model),
    }
    (path / "checkpoint.json").write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(path, expected_model_config: ModelConfig | None = None) -> TrainState:
    """Restore a TrainState; training resumes bit-identically."""
    from .videoio import MissingArtifactError

    path = Path(path)
    blob_path = path / "state.pt"
    manifest_path = path / "checkpoint.json"
    if not blob_path.exists() or not manifest_path.exists():
        raise MissingArtifactError(f"no checkpoint at {path}")
    blob = torch.load(blob_path, weights_only=False)
    manifest = json.loads(manifest_path.read_text())

    model_config = ModelConfig.from_dict(blob["model_config"])
    if expected_model_config is not None and model_config.to_dict() != expected_model_config.to_dict():
        raise ConfigMismatchError("checkpoint model config does not match the expected config")
    cfg = TrainConfig.from_dict(blob["train_config"])

    if cfg.phase == "backbone":
        model = VideoDenoiser(model_config)
    else:
        model = assemble_propagation_model(VideoDenoiser(model_config))
    model.load_state_dict(blob["model_state"])

    recorded = {p["name"]: p["sha256"] for p in manifest["parameters"]}
    for name, param in model.named_parameters():
        if name not in recorded or recorded[name] != _tensor_checksum(param):
            raise CorruptCheckpointError(f"checksum mismatch for parameter {name}")

    if isinstance(model, PropagationModel):
        params = model.trainable_parameters()
    else:
        params = list(model.parameters())
    opt = _make_optimizer(params, cfg)
    opt.load_state_dict(blob["optimizer_state"])

    sched = NoiseSchedule.cosine(model_config.diffusion_steps)
    return TrainState(
        step=int(blob["step"]),
        model=model,
        optimizer=opt,
        ema=blob["ema"],
        config=cfg,
        model_config=model_config,
        sched=sched,
        base_seed=int(blob["base_seed"]),
    )
