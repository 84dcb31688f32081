"""Selective content encoder and mask prediction decoder around the backbone.

The SCE replicates the first N generator blocks (weights copied at
construction), consumes the clean reference-video latent at every
denoising step, and emits one injection feature map per block through a
zero-initialized MLP, so a freshly assembled model is exactly transparent.
Bidirectional fusion feeds the generator's post-patch-embedding tokens
back into the SCE input through a zero-initialized projection. The MPD
replicates the final generator block and decodes the penultimate
features into per-cell edit-region logits.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import ConditionBundle, ModelConfig, NoiseSchedule, VideoDenoiser, pixels_to_latent
from .video import DimensionError


@dataclass
class InjectionFeatures:
    """Ordered per-block features added into the generator, length N."""

    per_block: list

    def __post_init__(self):
        if not self.per_block:
            raise ValueError("need at least one block feature")

    def __len__(self):
        return len(self.per_block)

    def __iter__(self):
        return iter(self.per_block)

    def __getitem__(self, k):
        return self.per_block[k]


class InjectionMLP(nn.Module):
    """Normalized two-layer MLP whose output layer starts at zero.

    The input norm keeps fc1 pre-activations in range whatever the scale
    of the residual stream; without it the adapter can saturate and die
    once training moves the weights.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False)
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x):
        return self.fc2(torch.nn.functional.silu(self.fc1(self.norm(x))))


class SelectiveContentEncoder(nn.Module):
    """Replicated-prefix encoder of the reference video."""

    def __init__(self, backbone: VideoDenoiser):
        super().__init__()
        cfg = backbone.config
        self.config = cfg
        d = cfg.hidden
        self.patch_embed = nn.Conv2d(cfg.channels, d, cfg.patch, cfg.patch)
        with torch.no_grad():
            # start from the backbone's condition-frame input slice so the
            # replicated blocks see in-distribution tokens from step one
            cond_slice = backbone.patch_embed.weight[:, cfg.channels : 2 * cfg.channels]
            self.patch_embed.weight.copy_(cond_slice)
            self.patch_embed.bias.copy_(backbone.patch_embed.bias)
        self.pos_spatial = nn.Parameter(backbone.pos_spatial.detach().clone())
        self.pos_temporal = nn.Parameter(backbone.pos_temporal.detach().clone())
        self.fusion = nn.Linear(d, d)
        nn.init.zeros_(self.fusion.weight)
        nn.init.zeros_(self.fusion.bias)
        self.blocks = nn.ModuleList(
            copy.deepcopy(backbone.blocks[k]) for k in range(cfg.sce_blocks)
        )
        # copies must train even when the source backbone is already frozen
        self.blocks.requires_grad_(True)
        self.injections = nn.ModuleList(InjectionMLP(d) for _ in range(cfg.sce_blocks))

    def embed_reference(self, reference_latent: torch.Tensor) -> torch.Tensor:
        b, t, c, h, w = reference_latent.shape
        tokens = self.patch_embed(reference_latent.reshape(b * t, c, h, w))
        tokens = tokens.flatten(2).transpose(1, 2).reshape(b, t, -1, self.config.hidden)
        return tokens + self.pos_spatial + self.pos_temporal

    def forward(
        self,
        reference_latent: torch.Tensor,
        generator_entry: torch.Tensor,
        cond_vec: torch.Tensor,
    ) -> InjectionFeatures:
        tokens = self.embed_reference(reference_latent)
        if generator_entry.shape != tokens.shape:
            raise DimensionError("generator entry features do not match the SCE token grid")
        h = tokens + self.fusion(generator_entry)
        taps = []
        for block, injection in zip(self.blocks, self.injections):
            h = block(h, cond_vec)
            taps.append(injection(h))
        return InjectionFeatures(per_block=taps)


class MaskPredictionDecoder(nn.Module):
    """Replicated final block + MLP head over the penultimate features."""

    def __init__(self, backbone: VideoDenoiser):
        super().__init__()
        cfg = backbone.config
        self.config = cfg
        d = cfg.hidden
        self.block = copy.deepcopy(backbone.blocks[-1])
        self.block.requires_grad_(True)
        self.norm = nn.LayerNorm(d, elementwise_affine=False)
        self.head = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, cfg.patch * cfg.patch))

    def forward(self, penultimate: torch.Tensor, cond_vec: torch.Tensor) -> torch.Tensor:
        """(B, T, S, D) features -> (B, T, h, w) logits on the latent grid."""
        h = self.block(penultimate, cond_vec)
        logits = self.head(self.norm(h))  # (B, T, S, p*p)
        b, t, s, _ = logits.shape
        p = self.config.patch
        gh = self.config.latent_height // p
        gw = self.config.latent_width // p
        grid = logits.reshape(b, t, gh, gw, p, p).permute(0, 1, 2, 4, 3, 5)
        return grid.reshape(b, t, gh * p, gw * p)


@dataclass
class PropForwardOutput:
    eps: torch.Tensor
    mask_logits: torch.Tensor | None
    taps: InjectionFeatures
    entry: torch.Tensor
    penultimate: torch.Tensor


class PropagationModel(nn.Module):
    """Frozen generator + trainable SCE/MPD with zero-init injection."""

    def __init__(self, backbone: VideoDenoiser, sce: SelectiveContentEncoder, mpd: MaskPredictionDecoder):
        super().__init__()
        if sce.config.sce_blocks != backbone.config.sce_blocks or sce.config.hidden != backbone.config.hidden:
            raise ValueError("SCE config does not match backbone")
        if mpd.config.hidden != backbone.config.hidden:
            raise ValueError("MPD config does not match backbone")
        self.backbone = backbone
        self.sce = sce
        self.mpd = mpd
        self.backbone.requires_grad_(False)

    @property
    def config(self) -> ModelConfig:
        return self.backbone.config

    def trainable_parameters(self):
        return [p for _, p in self.trainable_named_parameters()]

    def trainable_named_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("backbone.")]

    def forward(
        self,
        x_t: torch.Tensor,
        t,
        cond_latent: torch.Tensor,
        task_id,
        phrase_id,
        reference_latent: torch.Tensor,
        injection_weight: float = 1.0,
        with_mask: bool = True,
    ) -> PropForwardOutput:
        b = x_t.shape[0]
        cond_vec = self.backbone.cond_vector(t, task_id, phrase_id, b)
        entry = self.backbone.embed_entry(x_t, cond_latent)
        taps = self.sce(reference_latent, entry, cond_vec)
        eps, _, penult = self.backbone.forward_tokens(
            entry, cond_vec, taps_in=taps.per_block, injection_weight=injection_weight
        )
        logits = self.mpd(penult, cond_vec) if with_mask else None
        return PropForwardOutput(eps=eps, mask_logits=logits, taps=taps, entry=entry, penultimate=penult)

    def sce_taps(self, reference_latent, entry, cond_vec) -> InjectionFeatures:
        return self.sce(reference_latent, entry, cond_vec)

    @torch.no_grad()
    def sample(
        self,
        cond: ConditionBundle,
        sched: NoiseSchedule,
        seed: int,
        reference_video,
        injection_weight: float = 1.0,
        sample_steps: int | None = None,
    ):
        """Sample through the backbone with SCE taps; returns (video, mask_logits).

        The SCE sees the clean reference latent at every denoising step;
        MPD logits are taken from the conditional branch of the final
        sampling step.
        """
        cfg = self.config
        ref = pixels_to_latent(reference_video.data, cfg.latent_factor)[None]

        def provider(x_t, t, entry):
            cond_vec = self.backbone.cond_vector(t, cond.task_embedding_id, cond.phrase_id, x_t.shape[0])
            return self.sce(ref, entry, cond_vec).per_block

        captured = {}

        def hook(penult):
            captured["penultimate"] = penult

        video = self.backbone.sample(
            cond,
            sched,
            seed,
            taps_provider=provider,
            injection_weight=injection_weight,
            sample_steps=sample_steps,
            final_features_hook=hook,
        )
        final_cond_vec = self.backbone.cond_vector(
            0, cond.task_embedding_id, cond.phrase_id, 1
        )
        logits = self.mpd(captured["penultimate"], final_cond_vec)
        return video, logits


def assemble_propagation_model(
    backbone: VideoDenoiser,
    sce: SelectiveContentEncoder | None = None,
    mpd: MaskPredictionDecoder | None = None,
) -> PropagationModel:
    """Wire backbone + SCE + MPD; fresh components are built when omitted."""
    sce = sce if sce is not None else SelectiveContentEncoder(backbone)
    mpd = mpd if mpd is not None else MaskPredictionDecoder(backbone)
    return PropagationModel(backbone, sce, mpd)
