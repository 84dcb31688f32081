"""A small trainable image-to-video denoising diffusion model.

Spatio-temporal transformer over patch tokens with factorized spatial /
temporal attention, epsilon prediction on a cosine noise schedule, and
adaptive-norm conditioning on (timestep, task, phrase). The first frame
conditions generation through channel concatenation plus an indicator
channel, and is hard-clamped at every sampler step.

The "latent" space is the pixel tensor rescaled to [-1, 1], optionally
average-pooled by ``latent_factor`` (identity by default at desk scale).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datagen import PHRASES, TaskTag
from .video import DimensionError, VideoTensor

REQUIRED_PHRASE = "track colored regions"


@dataclass
class ModelConfig:
    height: int = 32
    width: int = 32
    frames: int = 8
    channels: int = 3
    latent_factor: int = 1
    patch: int = 4
    hidden: int = 128
    blocks: int = 6
    heads: int = 4
    sce_blocks: int = 3
    vocab: tuple = tuple(PHRASES)
    diffusion_steps: int = 64
    sample_steps: int = 32
    cfg_scale: float = 20.0

    def __post_init__(self):
        self.vocab = tuple(self.vocab)
        if self.sce_blocks > self.blocks:
            raise ValueError("sce_blocks must be <= blocks")
        if REQUIRED_PHRASE not in self.vocab:
            raise ValueError(f"vocab must contain {REQUIRED_PHRASE!r}")
        if self.height % self.latent_factor or self.width % self.latent_factor:
            raise DimensionError("latent_factor must divide height and width")
        if self.latent_height % self.patch or self.latent_width % self.patch:
            raise DimensionError("patch size must divide the latent grid")
        if self.hidden % self.heads:
            raise ValueError("hidden must be divisible by heads")

    @property
    def latent_height(self) -> int:
        return self.height // self.latent_factor

    @property
    def latent_width(self) -> int:
        return self.width // self.latent_factor

    @property
    def tokens_per_frame(self) -> int:
        return (self.latent_height // self.patch) * (self.latent_width // self.patch)

    @property
    def null_task_id(self) -> int:
        return len(TaskTag)

    @property
    def null_phrase_id(self) -> int:
        return len(self.vocab)

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "frames": self.frames,
            "channels": self.channels,
            "latent_factor": self.latent_factor,
            "patch": self.patch,
            "hidden": self.hidden,
            "blocks": self.blocks,
            "heads": self.heads,
            "sce_blocks": self.sce_blocks,
            "vocab": list(self.vocab),
            "diffusion_steps": self.diffusion_steps,
            "sample_steps": self.sample_steps,
            "cfg_scale": self.cfg_scale,
        }

    @staticmethod
    def from_dict(raw: dict) -> "ModelConfig":
        raw = dict(raw)
        raw["vocab"] = tuple(raw["vocab"])
        return ModelConfig(**raw)


@dataclass
class NoiseSchedule:
    """Cumulative signal coefficients for forward diffusion."""

    steps: int
    alpha_bar: np.ndarray

    def __post_init__(self):
        self.alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        if self.alpha_bar.shape != (self.steps,):
            raise ValueError("alpha_bar length must equal steps")
        if not (np.diff(self.alpha_bar) < 0).all():
            raise ValueError("alpha_bar must be strictly decreasing")
        if self.alpha_bar[0] > 1.0 or self.alpha_bar[-1] < 0.0:
            raise ValueError("alpha_bar must stay in [0, 1]")

    @staticmethod
    def cosine(steps: int, offset: float = 0.008, floor: float = 1e-4) -> "NoiseSchedule":
        t = np.arange(steps, dtype=np.float64) / (steps - 1)
        f = np.cos((t + offset) / (1.0 + offset) * np.pi / 2.0) ** 2
        ab = np.maximum(f / f[0], floor)
        ab[0] = 1.0
        return NoiseSchedule(steps=steps, alpha_bar=ab)


@dataclass
class ConditionBundle:
    first_frame: np.ndarray  # (H, W, 3) pixels in [0, 1]
    task_embedding_id: int
    phrase_id: int
    cfg_scale: float = 20.0

    def __post_init__(self):
        self.first_frame = np.asarray(self.first_frame, dtype=np.float32)
        if self.first_frame.ndim != 3 or self.first_frame.shape[-1] != 3:
            raise DimensionError("first_frame must be (H, W, 3)")
        if self.cfg_scale < 1.0:
            raise ValueError("cfg_scale must be >= 1")


def add_noise(x0: torch.Tensor, eps: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """Forward diffusion: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps.

    ``t`` may be an int or a (B,) tensor of per-example steps for batched
    (B, ...) inputs.
    """
    ab = torch.as_tensor(sched.alpha_bar, dtype=x0.dtype, device=x0.device)
    t_idx = torch.as_tensor(t, device=x0.device)
    if (t_idx < 0).any() or (t_idx >= sched.steps).any():
        raise ValueError("timestep out of range")
    a = ab[t_idx]
    while a.ndim < x0.ndim:
        a = a.unsqueeze(-1)
    return torch.sqrt(a) * x0 + torch.sqrt(1.0 - a) * eps


# ---------------------------------------------------------------------------
# latent <-> pixel helpers


def pixels_to_latent(frames: np.ndarray | torch.Tensor, factor: int = 1) -> torch.Tensor:
    """(..., H, W, C) pixels in [0,1] -> (..., C, h, w) latent in [-1, 1]."""
    x = torch.as_tensor(np.asarray(frames), dtype=torch.float32)
    x = x.movedim(-1, -3) * 2.0 - 1.0
    if factor > 1:
        shape = x.shape
        x = F.avg_pool2d(x.reshape(-1, *shape[-3:]), factor).reshape(
            *shape[:-2], shape[-2] // factor, shape[-1] // factor
        )
    return x


def latent_to_pixels(x: torch.Tensor, factor: int = 1) -> np.ndarray:
    """Inverse of :func:`pixels_to_latent` (nearest upsample for factor > 1)."""
    if factor > 1:
        x = x.repeat_interleave(factor, dim=-2).repeat_interleave(factor, dim=-1)
    out = (x.movedim(-3, -1) + 1.0) / 2.0
    return np.clip(out.detach().cpu().numpy(), 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# modules


class TimestepEmbedder(nn.Module):
    def __init__(self, hidden: int, freq_dim: int = 128):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.freq_dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
        args = t.float()[:, None] * freqs[None]
        emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
        return self.mlp(emb)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


def _modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1.0 + scale[:, None, None, :]) + shift[:, None, None, :]


class STBlock(nn.Module):
    """Factorized spatial + temporal attention + MLP with adaLN-zero gating."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm_s = nn.LayerNorm(dim, elementwise_affine=False)
        self.attn_s = Attention(dim, heads)
        self.norm_t = nn.LayerNorm(dim, elementwise_affine=False)
        self.attn_t = Attention(dim, heads)
        self.norm_m = nn.LayerNorm(dim, elementwise_affine=False)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 9 * dim))
        nn.init.zeros_(self.modulation[1].weight)
        nn.init.zeros_(self.modulation[1].bias)

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        # x: (B, T, S, D), c: (B, D)
        b, t, s, d = x.shape
        mods = self.modulation(c).chunk(9, dim=-1)
        (sh_s, sc_s, g_s, sh_t, sc_t, g_t, sh_m, sc_m, g_m) = mods

        h = _modulate(self.norm_s(x), sh_s, sc_s).reshape(b * t, s, d)
        x = x + g_s[:, None, None, :] * self.attn_s(h).reshape(b, t, s, d)

        h = _modulate(self.norm_t(x), sh_t, sc_t).permute(0, 2, 1, 3).reshape(b * s, t, d)
        ht = self.attn_t(h).reshape(b, s, t, d).permute(0, 2, 1, 3)
        x = x + g_t[:, None, None, :] * ht

        h = _modulate(self.norm_m(x), sh_m, sc_m).reshape(b * t, s, d)
        x = x + g_m[:, None, None, :] * self.mlp(h).reshape(b, t, s, d)
        return x


@dataclass
class DenoiseOutput:
    eps: torch.Tensor  # (B, T, C, h, w)
    entry: torch.Tensor  # post-patch-embedding tokens (B, T, S, D)
    block_features: list  # per-block outputs, length = blocks
    penultimate: torch.Tensor  # input features of the final block


class VideoDenoiser(nn.Module):
    """Epsilon-predicting I2V transformer with per-block feature taps."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.channels
        d = config.hidden
        gh = config.latent_height // config.patch
        gw = config.latent_width // config.patch
        self.grid = (gh, gw)

        self.patch_embed = nn.Conv2d(2 * c + 1, d, config.patch, config.patch)
        self.pos_spatial = nn.Parameter(torch.zeros(1, 1, gh * gw, d))
        self.pos_temporal = nn.Parameter(torch.zeros(1, config.frames, 1, d))
        nn.init.normal_(self.pos_spatial, std=0.02)
        nn.init.normal_(self.pos_temporal, std=0.02)

        self.t_embed = TimestepEmbedder(d)
        self.task_embed = nn.Embedding(len(TaskTag) + 1, d)
        self.phrase_embed = nn.Embedding(len(config.vocab) + 1, d)

        self.blocks = nn.ModuleList(STBlock(d, config.heads) for _ in range(config.blocks))

        self.head_norm = nn.LayerNorm(d, elementwise_affine=False)
        self.head_mod = nn.Sequential(nn.SiLU(), nn.Linear(d, 2 * d))
        self.head = nn.Linear(d, config.patch * config.patch * c)
        nn.init.zeros_(self.head_mod[1].weight)
        nn.init.zeros_(self.head_mod[1].bias)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def cond_vector(self, t, task_id, phrase_id, batch: int) -> torch.Tensor:
        t_idx = torch.as_tensor(t, dtype=torch.float32).reshape(-1)
        if t_idx.numel() == 1:
            t_idx = t_idx.expand(batch)
        task = torch.as_tensor(task_id).reshape(-1)
        if task.numel() == 1:
            task = task.expand(batch)
        phrase = torch.as_tensor(phrase_id).reshape(-1)
        if phrase.numel() == 1:
            phrase = phrase.expand(batch)
        return self.t_embed(t_idx) + self.task_embed(task) + self.phrase_embed(phrase)

    def embed_entry(self, x_t: torch.Tensor, cond_latent: torch.Tensor) -> torch.Tensor:
        """Patchify noised latents + broadcast condition frame + indicator."""
        b, t, c, h, w = x_t.shape
        cond = cond_latent[:, None].expand(b, t, c, h, w)
        indicator = torch.zeros(b, t, 1, h, w, dtype=x_t.dtype, device=x_t.device)
        indicator[:, 0] = 1.0
        inp = torch.cat([x_t, cond, indicator], dim=2).reshape(b * t, 2 * c + 1, h, w)
        tokens = self.patch_embed(inp).flatten(2).transpose(1, 2)  # (B*T, S, D)
        tokens = tokens.reshape(b, t, -1, tokens.shape[-1])
        return tokens + self.pos_spatial + self.pos_temporal

    def _unpatchify(self, tokens: torch.Tensor) -> torch.Tensor:
        b, t, s, _ = tokens.shape
        p = self.config.patch
        c = self.config.channels
        gh, gw = self.grid
        x = tokens.reshape(b, t, gh, gw, p, p, c)
        x = x.permute(0, 1, 6, 2, 4, 3, 5)
        return x.reshape(b, t, c, gh * p, gw * p)

    def forward_tokens(self, tokens, c, taps_in=None, injection_weight: float = 1.0):
        n = self.config.sce_blocks
        if taps_in is not None:
            if len(taps_in) != n:
                raise DimensionError(f"expected {n} taps, got {len(taps_in)}")
            for tap in taps_in:
                if tap.shape != tokens.shape:
                    raise DimensionError("tap shape does not match token grid")
        feats = []
        h = tokens
        penult = None
        for k, block in enumerate(self.blocks):
            if taps_in is not None and k < n:
                h = h + injection_weight * taps_in[k]
            if k == len(self.blocks) - 1:
                penult = h
            h = block(h, c)
            feats.append(h)
        mods = self.head_mod(c).chunk(2, dim=-1)
        out = self.head_norm(h) * (1.0 + mods[1][:, None, None, :]) + mods[0][:, None, None, :]
        eps = self._unpatchify(self.head(out))
        return eps, feats, penult

    def denoise(
        self,
        x_t: torch.Tensor,
        t,
        cond_latent: torch.Tensor,
        task_id,
        phrase_id,
        taps_in=None,
        injection_weight: float = 1.0,
    ) -> DenoiseOutput:
        """One denoising evaluation; pure in (inputs, parameters)."""
        b = x_t.shape[0]
        c = self.cond_vector(t, task_id, phrase_id, b)
        entry = self.embed_entry(x_t, cond_latent)
        eps, feats, penult = self.forward_tokens(entry, c, taps_in, injection_weight)
        return DenoiseOutput(eps=eps, entry=entry, block_features=feats, penultimate=penult)

    @torch.no_grad()
    def sample(
        self,
        cond: ConditionBundle,
        sched: NoiseSchedule,
        seed: int,
        taps_provider=None,
        injection_weight: float = 1.0,
        sample_steps: int | None = None,
        final_features_hook=None,
    ) -> VideoTensor:
        """Deterministic DDIM-style ancestral sampling from a seed.

        ``taps_provider(x_t, t, entry_tokens)`` may supply per-block
        injection features for each step. Classifier-free guidance mixes
        a null-embedding pass when ``cond.cfg_scale > 1``. The first
        frame is clamped to the conditioning frame throughout and copied
        into the output exactly.
        """
        cfgm = self.config
        steps = sample_steps or cfgm.sample_steps
        g = torch.Generator().manual_seed(seed)
        x = torch.randn(
            (1, cfgm.frames, cfgm.channels, cfgm.latent_height, cfgm.latent_width), generator=g
        )
        n0 = x[:, 0].clone()
        z_cond = pixels_to_latent(cond.first_frame, cfgm.latent_factor)[None]

        ab = sched.alpha_bar
        ts = np.unique(np.rint(np.linspace(0, sched.steps - 1, steps)).astype(int))[::-1]
        use_cfg = cond.cfg_scale > 1.0
        if use_cfg:
            # conditional and null branches share one batched forward pass
            task_ids = torch.tensor([cond.task_embedding_id, cfgm.null_task_id])
            phrase_ids = torch.tensor([cond.phrase_id, cfgm.null_phrase_id])
        penult_final = None
        for i, t_cur in enumerate(ts):
            a_cur = float(ab[t_cur])
            x[:, 0] = math.sqrt(a_cur) * z_cond + math.sqrt(1.0 - a_cur) * n0
            entry = self.embed_entry(x, z_cond)
            taps = taps_provider(x, int(t_cur), entry) if taps_provider is not None else None
            if use_cfg:
                taps2 = [tap.repeat(2, 1, 1, 1) for tap in taps] if taps is not None else None
                out = self.denoise(
                    x.repeat(2, 1, 1, 1, 1),
                    int(t_cur),
                    z_cond.repeat(2, 1, 1, 1),
                    task_ids,
                    phrase_ids,
                    taps2,
                    injection_weight,
                )
                eps_c, eps_u = out.eps[0:1], out.eps[1:2]
                eps = eps_u + cond.cfg_scale * (eps_c - eps_u)
                penult_final = out.penultimate[0:1]
            else:
                out = self.denoise(
                    x, int(t_cur), z_cond, cond.task_embedding_id, cond.phrase_id, taps, injection_weight
                )
                eps = out.eps
                penult_final = out.penultimate
            x0 = (x - math.sqrt(1.0 - a_cur) * eps) / math.sqrt(a_cur)
            x0 = x0.clamp(-1.0, 1.0)
            if i + 1 < len(ts):
                a_next = float(ab[ts[i + 1]])
                x = math.sqrt(a_next) * x0 + math.sqrt(1.0 - a_next) * eps
            else:
                x = x0

        if final_features_hook is not None:
            final_features_hook(penult_final)

        frames = latent_to_pixels(x[0], cfgm.latent_factor)
        frames[0] = cond.first_frame
        return VideoTensor(frames, fps=8)
