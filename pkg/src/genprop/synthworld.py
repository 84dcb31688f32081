"""Procedural moving-shape videos with exact per-instance ground-truth masks.

Scenes are tiny (default 32x32, 8 frames, up to 3 instances) and rendered
without anti-aliasing so instance masks are pixel-exact. Rendering is
deterministic given the spec; all colors are snapped to the 8-bit grid so
the disk format round-trips losslessly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import videoio
from .video import MaskSequence, VideoTensor
from .videoio import quantize_unit

SHAPES = ("circle", "square", "triangle")
SHADOW_ALPHA = 0.4
MIN_COLOR_DISTANCE = 0.2  # max-channel distance between instance and background


@dataclass
class Trajectory:
    kind: str  # "linear" | "sinusoidal"
    start: tuple[float, float]  # (x, y) center at frame 0
    velocity: tuple[float, float]  # px / frame
    amplitude: float = 0.0  # sinusoidal y-offset, px
    period: float = 8.0  # frames per cycle
    phase: float = 0.0

    def positions(self, frames: int) -> np.ndarray:
        """(T, 2) array of (x, y) centers."""
        t = np.arange(frames, dtype=np.float64)
        x = self.start[0] + self.velocity[0] * t
        y = self.start[1] + self.velocity[1] * t
        if self.kind == "sinusoidal":
            y = y + self.amplitude * np.sin(2.0 * np.pi * t / self.period + self.phase)
        return np.stack([x, y], axis=1)


@dataclass
class ShadowSpec:
    offset: tuple[float, float]
    alpha: float = SHADOW_ALPHA


@dataclass
class InstanceSpec:
    shape: str
    size: float  # px; diameter for circles, side for squares
    color: tuple[float, float, float]
    trajectory: Trajectory
    shadow: ShadowSpec | None = None

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.size < 4:
            raise ValueError("instance size must be >= 4 px")


@dataclass
class BackgroundSpec:
    kind: str  # "flat" | "hgrad" | "vgrad"
    color_a: tuple[float, float, float]
    color_b: tuple[float, float, float] | None = None

    def colors(self) -> list[tuple[float, float, float]]:
        return [self.color_a] if self.color_b is None else [self.color_a, self.color_b]


@dataclass
class SceneSpec:
    canvas: tuple[int, int]  # (H, W)
    background: BackgroundSpec
    instances: list[InstanceSpec]
    frames: int
    seed: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @staticmethod
    def from_json(text: str) -> "SceneSpec":
        raw = json.loads(text)
        instances = []
        for inst in raw["instances"]:
            shadow = inst.get("shadow")
            instances.append(
                InstanceSpec(
                    shape=inst["shape"],
                    size=inst["size"],
                    color=tuple(inst["color"]),
                    trajectory=Trajectory(
                        kind=inst["trajectory"]["kind"],
                        start=tuple(inst["trajectory"]["start"]),
                        velocity=tuple(inst["trajectory"]["velocity"]),
                        amplitude=inst["trajectory"]["amplitude"],
                        period=inst["trajectory"]["period"],
                        phase=inst["trajectory"]["phase"],
                    ),
                    shadow=None
                    if shadow is None
                    else ShadowSpec(offset=tuple(shadow["offset"]), alpha=shadow["alpha"]),
                )
            )
        bg = raw["background"]
        return SceneSpec(
            canvas=tuple(raw["canvas"]),
            background=BackgroundSpec(
                kind=bg["kind"],
                color_a=tuple(bg["color_a"]),
                color_b=None if bg["color_b"] is None else tuple(bg["color_b"]),
            ),
            instances=instances,
            frames=raw["frames"],
            seed=raw["seed"],
        )

    def without_instance(self, index: int) -> "SceneSpec":
        kept = [inst for i, inst in enumerate(self.instances) if i != index]
        return SceneSpec(self.canvas, self.background, kept, self.frames, self.seed)


@dataclass
class RenderedScene:
    video: VideoTensor
    instance_masks: list[MaskSequence]
    effect_masks: list[MaskSequence]
    spec: SceneSpec | None = None


def _grid_color(rng: np.random.Generator) -> tuple[float, float, float]:
    return tuple(float(v) / 255.0 for v in rng.integers(0, 256, size=3))


def _max_channel_distance(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def sample_scene_spec(
    rng_seed: int,
    canvas: tuple[int, int] = (32, 32),
    frames: int = 8,
    max_instances: int = 3,
    shadow_prob: float = 0.4,
) -> SceneSpec:
    """Draw a random scene; bit-deterministic given the seed.

    Ranges: 1..max_instances instances, shapes uniform over circle/square/
    triangle, sizes uniform in [4, min(H,W)/2.5], speeds uniform in
    [-2, 2] px/frame per axis, sinusoidal amplitude up to 3 px. Starting
    positions are chosen so every per-frame center stays inside the canvas.
    """
    if frames < 2:
        raise ValueError("frames must be >= 2")
    h, w = canvas
    rng = np.random.default_rng(rng_seed)

    kind = ("flat", "hgrad", "vgrad")[rng.integers(0, 3)]
    color_a = _grid_color(rng)
    color_b = _grid_color(rng) if kind != "flat" else None
    background = BackgroundSpec(kind=kind, color_a=color_a, color_b=color_b)

    instances = []
    n = int(rng.integers(1, max_instances + 1))
    for _ in range(n):
        shape = SHAPES[rng.integers(0, len(SHAPES))]
        size = float(rng.uniform(4.0, min(h, w) / 2.5))
        color = _grid_color(rng)
        while min(_max_channel_distance(color, bg) for bg in background.colors()) < MIN_COLOR_DISTANCE:
            color = _grid_color(rng)

        traj_kind = "linear" if rng.random() < 0.5 else "sinusoidal"
        vx = float(rng.uniform(-2.0, 2.0))
        vy = float(rng.uniform(-2.0, 2.0))
        amplitude = float(rng.uniform(0.5, 3.0)) if traj_kind == "sinusoidal" else 0.0
        period = float(rng.uniform(4.0, 2 * frames)) if traj_kind == "sinusoidal" else 8.0
        phase = float(rng.uniform(0.0, 2 * np.pi)) if traj_kind == "sinusoidal" else 0.0

        # Start range that keeps every center inside [0, dim-1]; shrink the
        # motion if the range collapses.
        def start_range(v: float, extent: int, wiggle: float) -> tuple[float, float, float]:
            t_last = frames - 1
            lo = max(0.0, -min(0.0, v * t_last)) + wiggle
            hi = (extent - 1) - max(0.0, v * t_last) - wiggle
            while hi < lo:
                v *= 0.5
                lo = max(0.0, -min(0.0, v * t_last)) + wiggle
                hi = (extent - 1) - max(0.0, v * t_last) - wiggle
                if abs(v) < 1e-3 and hi < lo:
                    v = 0.0
                    lo, hi = wiggle, (extent - 1) - wiggle
                    if hi < lo:
                        lo = hi = (extent - 1) / 2.0
                    break
            return v, lo, hi

        vx, x_lo, x_hi = start_range(vx, w, 0.0)
        vy, y_lo, y_hi = start_range(vy, h, amplitude)
        start = (float(rng.uniform(x_lo, x_hi)), float(rng.uniform(y_lo, y_hi)))

        shadow = None
        if rng.random() < shadow_prob:
            off = (float(rng.uniform(1.0, 3.0)), float(rng.uniform(1.0, 3.0)))
            shadow = ShadowSpec(offset=off)

        instances.append(
            InstanceSpec(
                shape=shape,
                size=size,
                color=color,
                trajectory=Trajectory(traj_kind, start, (vx, vy), amplitude, period, phase),
                shadow=shadow,
            )
        )
    return SceneSpec(canvas=canvas, background=background, instances=instances, frames=frames, seed=rng_seed)


def rasterize_shape(shape: str, center: tuple[float, float], size: float, canvas: tuple[int, int]) -> np.ndarray:
    """Binary (H, W) support of a shape; no anti-aliasing."""
    h, w = canvas
    ys, xs = np.mgrid[0:h, 0:w]
    cx, cy = center
    half = size / 2.0
    if shape == "circle":
        return (((xs - cx) ** 2 + (ys - cy) ** 2) <= half**2).astype(np.float32)
    if shape == "square":
        return ((np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)).astype(np.float32)
    if shape == "triangle":
        # upward isoceles triangle: apex (cx, cy-half), base y = cy+half
        inside = (ys >= cy - half) & (ys <= cy + half)
        frac = (ys - (cy - half)) / size  # 0 at apex, 1 at base
        inside &= np.abs(xs - cx) <= frac * half
        return inside.astype(np.float32)
    raise ValueError(f"unknown shape {shape!r}")


def rasterize_shadow(center: tuple[float, float], size: float, offset: tuple[float, float], canvas: tuple[int, int]) -> np.ndarray:
    """Ellipse support for a drop shadow (rx = size/2, ry = 0.6 * rx)."""
    h, w = canvas
    ys, xs = np.mgrid[0:h, 0:w]
    cx = center[0] + offset[0]
    cy = center[1] + offset[1]
    rx = size / 2.0
    ry = max(1.0, 0.6 * rx)
    return ((((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2) <= 1.0).astype(np.float32)


def render_background(spec: SceneSpec) -> np.ndarray:
    h, w = spec.canvas
    bg = spec.background
    a = np.asarray(bg.color_a, dtype=np.float64)
    if bg.kind == "flat":
        frame = np.broadcast_to(a, (h, w, 3)).copy()
    else:
        b = np.asarray(bg.color_b, dtype=np.float64)
        if bg.kind == "hgrad":
            ramp = np.linspace(0.0, 1.0, w)[None, :, None]
        else:
            ramp = np.linspace(0.0, 1.0, h)[:, None, None]
        frame = a * (1.0 - ramp) + b * ramp
    return quantize_unit(frame)


def apply_shadow(frame: np.ndarray, support: np.ndarray, alpha: float) -> np.ndarray:
    """Blend black at ``alpha`` inside the support, re-quantized to the 8-bit grid."""
    shaded = frame * (1.0 - alpha)
    blended = np.where(support[..., None] > 0.5, shaded, frame)
    return quantize_unit(blended)


def render_scene(spec: SceneSpec) -> RenderedScene:
    """Rasterize a scene into a video plus exact instance and effect masks.

    Layer order follows the instance list: for each instance, its shadow
    (if any) darkens everything below, then the opaque shape is painted.
    Instance masks record only visible (un-occluded) pixels; shadow
    supports are reported separately as effect masks.
    """
    h, w = spec.canvas
    t_frames = spec.frames
    background = render_background(spec)

    n = len(spec.instances)
    positions = [inst.trajectory.positions(t_frames) for inst in spec.instances]

    video = np.empty((t_frames, h, w, 3), dtype=np.float32)
    opaque = np.zeros((n, t_frames, h, w), dtype=np.float32)
    shadows = np.zeros((n, t_frames, h, w), dtype=np.float32)

    for t in range(t_frames):
        frame = background.copy()
        for i, inst in enumerate(spec.instances):
            center = tuple(positions[i][t])
            if inst.shadow is not None:
                s = rasterize_shadow(center, inst.size, inst.shadow.offset, spec.canvas)
                shadows[i, t] = s
                frame = apply_shadow(frame, s, inst.shadow.alpha)
            support = rasterize_shape(inst.shape, center, inst.size, spec.canvas)
            opaque[i, t] = support
            frame = np.where(support[..., None] > 0.5, np.asarray(inst.color, dtype=np.float32), frame)
        video[t] = frame

    instance_masks = []
    effect_masks = []
    for i in range(n):
        covered = np.zeros((t_frames, h, w), dtype=bool)
        for j in range(i + 1, n):
            covered |= opaque[j] > 0.5
        visible = np.where(covered, 0.0, opaque[i])
        instance_masks.append(MaskSequence(visible, instance_id=i))

        covered_from_i = covered | (opaque[i] > 0.5)
        effect = np.where(covered_from_i, 0.0, shadows[i])
        effect_masks.append(MaskSequence(effect, instance_id=i))

    return RenderedScene(
        video=VideoTensor(video, fps=8),
        instance_masks=instance_masks,
        effect_masks=effect_masks,
        spec=spec,
    )


def save_scene(directory: str | Path, scene: RenderedScene) -> None:
    directory = Path(directory)
    videoio.save_video(directory, scene.video)
    for mask in scene.instance_masks:
        videoio.save_mask(directory, mask, prefix="mask")
    for mask in scene.effect_masks:
        if not mask.is_empty():
            videoio.save_mask(directory, mask, prefix="effect_mask")
    if scene.spec is not None:
        (directory / "scene_spec.json").write_text(scene.spec.to_json())


def load_scene(directory: str | Path) -> RenderedScene:
    directory = Path(directory)
    video = videoio.load_video(directory)
    instance_masks = videoio.load_masks(directory, prefix="mask")
    effect_masks = videoio.load_masks(directory, prefix="effect_mask")
    spec = None
    spec_path = directory / "scene_spec.json"
    if spec_path.exists():
        spec = SceneSpec.from_json(spec_path.read_text())
    return RenderedScene(video=video, instance_masks=instance_masks, effect_masks=effect_masks, spec=spec)
