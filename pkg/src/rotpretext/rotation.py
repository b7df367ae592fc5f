"""Clip rotations for the pretext task.

Rotations are counter-clockwise and act on every frame of a clip alike.
Multiples of 90 degrees are exact index permutations; other angles are
bilinearly resampled and then centre-cropped so no sample falls outside
the source frame.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .video import VideoClip


@dataclass(frozen=True)
class RotationSet:
    degrees: tuple

    def __post_init__(self):
        degs = tuple(float(d) for d in self.degrees)
        if not degs:
            raise ValueError("rotation set is empty")
        for d in degs:
            if not 0.0 <= d < 360.0:
                raise ValueError(f"rotation {d} outside [0, 360)")
        if len(set(degs)) != len(degs):
            raise ValueError(f"rotation degrees must be distinct, got {degs}")
        object.__setattr__(self, "degrees", degs)

    @classmethod
    def parse(cls, text: str) -> "RotationSet":
        """Parse ``"0,90,180,270"``."""
        parts = [p.strip() for p in text.split(",") if p.strip()]
        try:
            return cls(tuple(float(p) for p in parts))
        except ValueError as e:
            raise ValueError(f"bad rotation list {text!r}: {e}") from None

    @property
    def k(self) -> int:
        return len(self.degrees)

    def __len__(self) -> int:
        return len(self.degrees)

    def __str__(self) -> str:
        return ",".join(f"{d:g}" for d in self.degrees)

    @property
    def right_angles(self) -> bool:
        return all(d % 90 == 0 for d in self.degrees)

    def label(self, degrees: float) -> int:
        return self.degrees.index(float(degrees))

    def output_size(self, size: int) -> int:
        """Spatial extent of rotated square clips of side ``size``."""
        return size if self.right_angles else valid_crop_size(size)

    def regression_targets(self) -> np.ndarray:
        return np.asarray(self.degrees, dtype=np.float64) / 360.0


FOUR_WAY = RotationSet((0, 90, 180, 270))


def rotate90(clip: VideoClip, k: int) -> VideoClip:
    """Rotate every frame counter-clockwise by ``k * 90`` degrees.

    One step maps ``out[r][c] = in[c][W-1-r]``: transpose then reverse rows.
    """
    k = int(k) % 4
    if k == 0:
        return VideoClip(clip.data.copy())
    return VideoClip(np.ascontiguousarray(np.rot90(clip.data, k, axes=(2, 3))))


def valid_crop_size(size: int) -> int:
    """Largest even side that stays inside a ``size`` square under any rotation."""
    c = int(math.floor(size / math.sqrt(2)))
    return c - (c % 2)


def source_coordinates(size: int, degrees: float) -> tuple[np.ndarray, np.ndarray]:
    """Source (row, col) sampled for each pixel of the cropped rotated frame."""
    c = valid_crop_size(size)
    if c < 1:
        raise ValueError(f"frame side {size} too small to rotate")
    centre = (size - 1) / 2.0
    rad = math.radians(degrees)
    cos, sin = math.cos(rad), math.sin(rad)
    # grid symmetric about the frame centre; pixel-aligned when size is even,
    # half a pixel off the grid when size is odd (the crop side is always even)
    rows = np.arange(c, dtype=np.float64) - (c - 1) / 2.0
    dy, dx = np.meshgrid(rows, rows, indexing="ij")
    sy = centre + cos * dy + sin * dx
    sx = centre - sin * dy + cos * dx
    return sy, sx


def _sample(frames: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    S = frames.shape[-1]
    sy = np.clip(sy, 0, S - 1)
    sx = np.clip(sx, 0, S - 1)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, S - 1)
    x1 = np.minimum(x0 + 1, S - 1)
    fy = (sy - y0).astype(frames.dtype)
    fx = (sx - x0).astype(frames.dtype)
    a = frames[..., y0, x0]
    b = frames[..., y0, x1]
    c = frames[..., y1, x0]
    d = frames[..., y1, x1]
    # lerp form a + t*(b - a) keeps constant regions and integer positions exact
    top = a + fx * (b - a)
    bot = c + fx * (d - c)
    return top + fy * (bot - top)


def rotate_arbitrary(clip: VideoClip, degrees: float) -> VideoClip:
    """Rotate square frames by any angle, then take the always-valid centre crop."""
    C, T, H, W = clip.shape
    if H != W:
        raise ValueError(f"arbitrary-angle rotation needs square frames, got {H}x{W}")
    sy, sx = source_coordinates(H, degrees)
    out = _sample(clip.data, sy, sx)
    out = np.clip(out, clip.data.min(), clip.data.max())
    return VideoClip(np.ascontiguousarray(out, dtype=np.float32))


def rotate(clip: VideoClip, degrees: float, exact: bool = True) -> VideoClip:
    if exact and degrees % 90 == 0:
        return rotate90(clip, int(degrees // 90))
    return rotate_arbitrary(clip, degrees)


def expand_batch_with_rotations(clips: Sequence[VideoClip], rset: RotationSet) -> tuple[np.ndarray, np.ndarray]:
    """Turn B clips into a ``(B*K, C, T, H, W)`` batch plus rotation labels.

    Clip-major ordering: all K rotations of clip 0, then of clip 1, ...
    """
    if not clips:
        raise ValueError("no clips to expand")
    shape = clips[0].shape
    for c in clips:
        if c.shape != shape:
            raise ValueError(f"clips differ in shape: {shape} vs {c.shape}")
    exact = rset.right_angles
    H, W = shape[2], shape[3]
    if H != W and (not exact or any(d % 180 for d in rset.degrees)):
        raise ValueError(f"rotation set {rset} on {H}x{W} frames would give unequal extents")
    out = []
    for clip in clips:
        for d in rset.degrees:
            out.append(rotate(clip, d, exact=exact).data)
    labels = np.tile(np.arange(rset.k), len(clips))
    return np.stack(out), labels
