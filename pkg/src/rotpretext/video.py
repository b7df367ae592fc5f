"""Clip storage, datasets and augmentation.

Clips are ``(C, T, H, W)`` float32 arrays. RGB clips hold values in [0, 1];
difference-of-frames clips hold values in [-1, 1].
"""
from __future__ import annotations

import functools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .rng import Rng

RVC_MAGIC = b"RVC1"
_HEADER = struct.Struct("<4I")
MAX_ELEMENTS = 1 << 31


class ClipFormatError(ValueError):
    """Base class for unreadable RVC files."""


class BadMagicError(ClipFormatError):
    pass


class TruncatedClipError(ClipFormatError):
    pass


class ExtentOverflowError(ClipFormatError):
    pass


@dataclass
class VideoClip:
    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"clip must be (C, T, H, W), got shape {self.data.shape}")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def frames(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]


# RVC files

def encode_clip(clip: VideoClip) -> bytes:
    return RVC_MAGIC + _HEADER.pack(*clip.shape) + np.ascontiguousarray(clip.data, dtype="<f4").tobytes()


def decode_clip(buf: bytes, source: str = "<bytes>") -> VideoClip:
    if len(buf) < 4 or buf[:4] != RVC_MAGIC:
        raise BadMagicError(f"{source}: not an RVC clip (bad magic {bytes(buf[:4])!r})")
    if len(buf) < 4 + _HEADER.size:
        raise TruncatedClipError(f"{source}: header truncated ({len(buf)} bytes)")
    shape = _HEADER.unpack_from(buf, 4)
    count = 1
    for d in shape:
        count *= d
    if min(shape) == 0 or count > MAX_ELEMENTS:
        raise ExtentOverflowError(f"{source}: invalid extents {shape}")
    need = 4 + _HEADER.size + 4 * count
    if len(buf) < need:
        raise TruncatedClipError(f"{source}: payload truncated, need {need} bytes, have {len(buf)}")
    if len(buf) > need:
        raise ClipFormatError(f"{source}: {len(buf) - need} trailing bytes after payload")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=4 + _HEADER.size).astype(np.float32)
    return VideoClip(data.reshape(shape))


def save_clip(clip: VideoClip, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_clip(clip))


def load_clip(path) -> VideoClip:
    path = Path(path)
    return decode_clip(path.read_bytes(), str(path))


@functools.lru_cache(maxsize=4096)
def _cached_clip(path: str, mtime_ns: int) -> np.ndarray:
    arr = load_clip(path).data
    arr.setflags(write=False)
    return arr


def load_clip_cached(path) -> VideoClip:
    """Like ``load_clip`` but memoised; the returned array is read-only."""
    p = Path(path)
    return VideoClip(_cached_clip(str(p.resolve()), p.stat().st_mtime_ns))


# datasets

INDEX_NAME = "index.tsv"


@dataclass
class LabeledDataset:
    root: Path
    items: list  # (relative locator, label)
    class_count: int
    split: str = "train"
    class_names: tuple = ()

    def __post_init__(self):
        self.root = Path(self.root)
        for loc, label in self.items:
            if not 0 <= label < self.class_count:
                raise ValueError(f"label {label} of {loc} outside [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def labels(self) -> list[int]:
        return [label for _, label in self.items]

    def path(self, i: int) -> Path:
        return self.root / self.items[i][0]

    def load(self, i: int) -> VideoClip:
        return load_clip_cached(self.path(i))

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        return LabeledDataset(self.root, [self.items[i] for i in indices], self.class_count, self.split, self.class_names)

    def unlabeled(self) -> "UnlabeledDataset":
        return UnlabeledDataset(self.root, [loc for loc, _ in self.items])


@dataclass
class UnlabeledDataset:
    """Clip locators only. This is all the pretext trainer ever sees."""

    root: Path
    locators: list = field(default_factory=list)

    def __post_init__(self):
        self.root = Path(self.root)

    def __len__(self) -> int:
        return len(self.locators)

    def path(self, i: int) -> Path:
        return self.root / self.locators[i]

    def load(self, i: int) -> VideoClip:
        return load_clip_cached(self.path(i))

    def subset(self, indices: Sequence[int]) -> "UnlabeledDataset":
        return UnlabeledDataset(self.root, [self.locators[i] for i in indices])


def write_index(dataset: LabeledDataset, path=None) -> Path:
    path = Path(path) if path is not None else dataset.root / INDEX_NAME
    lines = [f"{loc}\t{label}\n" for loc, label in dataset.items]
    path.write_text("".join(lines), encoding="utf-8")
    return path


def read_index(path, class_count: int | None = None, split: str = "train") -> LabeledDataset:
    """Read ``relative/path.rvc<TAB>label`` lines; the root is the index's directory."""
    path = Path(path)
    items = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        loc, sep, label = line.rpartition("\t")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected 'path<TAB>label'")
        try:
            items.append((loc, int(label)))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: label {label!r} is not an integer") from None
    if class_count is None:
        class_count = max((lab for _, lab in items), default=-1) + 1
    return LabeledDataset(path.parent, items, class_count, split)


# clip operations

def sample_subclip(clip: VideoClip, length: int, rng: Rng) -> VideoClip:
    """Frames ``[s, s+length)`` with ``s`` uniform over the valid starts."""
    T = clip.frames
    if length > T:
        raise ValueError(f"cannot take {length} frames from a {T}-frame clip")
    s = int(rng.integers(0, T - length + 1))
    return VideoClip(clip.data[:, s : s + length])


def center_subclip(clip: VideoClip, length: int) -> VideoClip:
    T = clip.frames
    if length > T:
        raise ValueError(f"cannot take {length} frames from a {T}-frame clip")
    s = (T - length) // 2
    return VideoClip(clip.data[:, s : s + length])


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres: output i samples input coordinate (i + 0.5) * n_in / n_out - 0.5
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=np.float64)
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize_bilinear(clip: VideoClip, out_h: int, out_w: int) -> VideoClip:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resize extents must be >= 1, got {out_h}x{out_w}")
    C, T, H, W = clip.shape
    if (H, W) == (out_h, out_w):
        return VideoClip(clip.data.copy())
    rh = _bilinear_matrix(H, out_h)
    rw = _bilinear_matrix(W, out_w)
    out = np.einsum("ph,cthw,qw->ctpq", rh, clip.data.astype(np.float64), rw, optimize=True)
    out = np.clip(out, clip.data.min(), clip.data.max())
    return VideoClip(out.astype(np.float32))


def spatial_crop(
    clip: VideoClip,
    size: int,
    mode: str = "center",
    rng: Rng | None = None,
    top: int | None = None,
    left: int | None = None,
) -> VideoClip:
    """Square crop applied identically to every frame.

    Explicit ``top``/``left`` override ``mode``.
    """
    H, W = clip.height, clip.width
    if size > min(H, W) or size < 1:
        raise ValueError(f"crop size {size} does not fit a {H}x{W} frame")
    if top is None or left is None:
        if mode == "center":
            top, left = (H - size) // 2, (W - size) // 2
        elif mode == "random":
            if rng is None:
                raise ValueError("random crop needs an rng")
            top = int(rng.integers(0, H - size + 1))
            left = int(rng.integers(0, W - size + 1))
        else:
            raise ValueError(f"unknown crop mode {mode!r}")
    return VideoClip(clip.data[:, :, top : top + size, left : left + size])


def flip_w(clip: VideoClip) -> VideoClip:
    return VideoClip(clip.data[..., ::-1].copy())


def horizontal_flip(clip: VideoClip, probability: float, rng: Rng) -> VideoClip:
    """Mirror every frame with the given probability (one decision per clip)."""
    if not 0.0 <= probability <= 1.0:
        raise ValueError(f"flip probability must be in [0, 1], got {probability}")
    if rng.random() < probability:
        return flip_w(clip)
    return clip


def compute_dif(clip: VideoClip) -> VideoClip:
    """Difference of consecutive frames; ``T`` frames in, ``T-1`` out."""
    if clip.frames < 2:
        raise ValueError(f"difference of frames needs T >= 2, got {clip.frames}")
    return VideoClip(np.diff(clip.data, axis=1).astype(np.float32))
