"""Lossless on-disk layout for videos and masks.

A video directory holds ``frame_00000.png ...`` plus ``manifest.json``
with ``{fps, width, height, frames}``. Each instance mask lives in a
``mask_<instance>/`` subdirectory as single-channel PNGs with values
{0, 255}; shadow/effect masks use ``effect_mask_<instance>/``.
"""

from __future__ import annotations

import json
import os
import re
from pathlib import Path

import numpy as np
from PIL import Image

from .video import DimensionError, MaskSequence, VideoTensor


class MissingArtifactError(FileNotFoundError):
    """A required file or directory is absent."""


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(values * 255.0), 0, 255).astype(np.uint8)


def from_uint8(values: np.ndarray) -> np.ndarray:
    return values.astype(np.float32) / 255.0


def quantize_unit(values: np.ndarray) -> np.ndarray:
    """Snap values in [0,1] to the 8-bit grid so disk round-trips are exact."""
    return np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.float32) / 255.0


def frame_name(index: int) -> str:
    return f"frame_{index:05d}.png"


def save_frame(path: Path, frame: np.ndarray) -> None:
    Image.fromarray(to_uint8(frame)).save(path)


def load_frame(path: Path) -> np.ndarray:
    if not path.exists():
        raise MissingArtifactError(str(path))
    arr = np.asarray(Image.open(path).convert("RGB"))
    return from_uint8(arr)


def save_video(directory: str | Path, video: VideoTensor) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(video.frames):
        save_frame(directory / frame_name(i), video.data[i])
    manifest = {
        "fps": video.fps,
        "width": video.width,
        "height": video.height,
        "frames": video.frames,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_video(directory: str | Path) -> VideoTensor:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise MissingArtifactError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    frames = []
    for i in range(int(manifest["frames"])):
        frames.append(load_frame(directory / frame_name(i)))
    data = np.stack(frames)
    if data.shape[1] != manifest["height"] or data.shape[2] != manifest["width"]:
        raise DimensionError("frame size disagrees with manifest")
    return VideoTensor(data, fps=int(manifest["fps"]))


def save_mask(directory: str | Path, mask: MaskSequence, prefix: str = "mask") -> None:
    directory = Path(directory) / f"{prefix}_{mask.instance_id}"
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(mask.frames):
        img = (mask.data[i] > 0.5).astype(np.uint8) * 255
        Image.fromarray(img, mode="L").save(directory / frame_name(i))


def load_mask_dir(directory: Path, instance_id: int) -> MaskSequence:
    paths = sorted(directory.glob("frame_*.png"))
    if not paths:
        raise MissingArtifactError(f"no mask frames in {directory}")
    frames = []
    for p in paths:
        arr = np.asarray(Image.open(p).convert("L"))
        frames.append((arr > 127).astype(np.float32))
    return MaskSequence(np.stack(frames), instance_id=instance_id)


def load_masks(directory: str | Path, prefix: str = "mask") -> list[MaskSequence]:
    directory = Path(directory)
    pattern = re.compile(rf"^{prefix}_(-?\d+)$")
    found = []
    for entry in sorted(os.listdir(directory)):
        m = pattern.match(entry)
        if m and (directory / entry).is_dir():
            found.append((int(m.group(1)), directory / entry))
    found.sort(key=lambda kv: kv[0])
    return [load_mask_dir(path, instance_id) for instance_id, path in found]
