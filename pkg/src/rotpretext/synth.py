"""Procedural oriented videos: a moving shape in an upright little world.

Every clip has a bright sky gradient at the top, a dark ground band at the
bottom and particles falling under gravity, so which way is up can be read
off both appearance and motion. The action label is the motion pattern of
the foreground shape.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import make_rng
from .video import LabeledDataset, VideoClip, save_clip, write_index

ACTIONS = ("translate_up", "translate_right", "oscillate", "expand_contract")
SPLIT_IDS = {"train": 0, "test": 1, "val": 2}


@dataclass
class SynthSpec:
    seed: int = 0
    clips_per_class: int = 100
    frames: int = 20
    height: int = 40
    width: int = 40
    classes: tuple = ACTIONS
    cue_strength: float = 1.0
    channels: int = 1
    particles: int = 4
    particle_radius: float = 2.0
    noise: float = 0.03

    def __post_init__(self):
        unknown = [c for c in self.classes if c not in ACTIONS]
        if unknown:
            raise ValueError(f"unknown action classes {unknown}; choose from {ACTIONS}")
        if self.frames < 2 or self.height < 24 or self.width < 24:
            raise ValueError("synthetic clips need frames >= 2 and frames at least 24x24")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")


def _shape_mask(kind: int, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if kind == 0:  # disk
        return np.clip(r + 0.5 - np.sqrt(dy * dy + dx * dx), 0, 1)
    if kind == 1:  # square
        return np.clip(r + 0.5 - np.maximum(np.abs(dy), np.abs(dx)), 0, 1)
    # diamond
    return np.clip(r + 0.5 - (np.abs(dy) + np.abs(dx)) * 0.75, 0, 1)


def _trajectory(action: str, T: int, H: int, W: int, rng: np.random.Generator):
    """Per-frame centre row, centre column and radius of the foreground shape."""
    r0 = rng.uniform(2.5, 4.5)
    speed = rng.uniform(0.9, 1.4)
    travel = speed * (T - 1)
    t = np.arange(T, dtype=np.float64)
    margin = r0 + 2
    r = np.full(T, r0)
    if action == "translate_up":
        cx = np.full(T, rng.uniform(margin, W - margin))
        y_start = rng.uniform(min(H - margin, travel + margin), H - margin)
        cy = y_start - speed * t
    elif action == "translate_right":
        x_start = rng.uniform(margin, max(margin, W - margin - travel))
        cx = x_start + speed * t
        cy = np.full(T, rng.uniform(margin, H - margin))
    elif action == "oscillate":
        amp = rng.uniform(3.0, 5.0)
        period = rng.uniform(5.0, 8.0)
        phase = rng.uniform(0, 2 * np.pi)
        cx0 = rng.uniform(margin + amp, W - margin - amp)
        cx = cx0 + amp * np.sin(2 * np.pi * t / period + phase)
        cy = np.full(T, rng.uniform(margin, H - margin))
    elif action == "expand_contract":
        period = rng.uniform(6.0, 10.0)
        phase = rng.uniform(0, 2 * np.pi)
        r = r0 + 2.0 * np.sin(2 * np.pi * t / period + phase)
        big = r0 + 2
        cx = np.full(T, rng.uniform(big + 1, W - big - 1))
        cy = np.full(T, rng.uniform(big + 1, H - big - 1))
    else:
        raise ValueError(f"unknown action {action!r}")
    return cy, cx, r


def render_clip_with_track(spec: SynthSpec, action: str, rng: np.random.Generator) -> tuple[VideoClip, np.ndarray]:
    """Render one clip; also return the shape centre per frame as ``(T, 2)`` (row, col)."""
    T, H, W = spec.frames, spec.height, spec.width
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    cue = spec.cue_strength

    horizon = rng.uniform(0.68, 0.8) * H
    sky_top = rng.uniform(0.55, 0.75)
    sky = cue * sky_top * np.clip(1.0 - yy / horizon, 0, 1) ** 1.5
    ground_level = cue * rng.uniform(0.02, 0.1)
    ground = (yy >= horizon).astype(np.float64)
    texture = cue * rng.uniform(0, 0.08, size=(H, W)) * ground
    background = sky * (1 - ground) + (ground_level + texture) * ground

    kind = int(rng.integers(0, 3))
    brightness = rng.uniform(0.6, 1.0)
    cy, cx, r = _trajectory(action, T, H, W, rng)

    # particles fall straight down through the whole frame and wrap to the top, so
    # only their motion (not where they sit) tells which way is up; they do not
    # fade with cue_strength
    n_p = spec.particles
    px = rng.uniform(1, W - 1, size=n_p)
    py0 = rng.uniform(0, H, size=n_p)
    pv = rng.uniform(0.9, 1.6, size=n_p)
    p_bright = rng.uniform(0.5, 0.9, size=n_p)

    frames = np.empty((T, H, W), dtype=np.float64)
    for i in range(T):
        f = background.copy()
        py = np.mod(py0 + pv * i, H)
        for j in range(n_p):
            d2 = (yy - py[j]) ** 2 + (xx - px[j]) ** 2
            f = np.maximum(f, p_bright[j] * np.exp(-d2 / (2 * spec.particle_radius**2)))
        m = _shape_mask(kind, yy, xx, cy[i], cx[i], r[i])
        f = f * (1 - m) + brightness * m
        frames[i] = f
    frames += rng.normal(0, spec.noise, size=frames.shape)
    frames = np.clip(frames, 0.0, 1.0)
    data = np.repeat(frames[None], spec.channels, axis=0)
    if spec.channels == 3:
        data = data * rng.uniform(0.85, 1.0, size=(3, 1, 1, 1))
    return VideoClip(data.astype(np.float32)), np.stack([cy, cx], axis=1)


def render_clip(spec: SynthSpec, action: str, rng: np.random.Generator) -> VideoClip:
    return render_clip_with_track(spec, action, rng)[0]


def render_blob_clip(frames: int, size: int, seed: int, radius: float = 3.0) -> tuple[VideoClip, np.ndarray]:
    """One bright blob drifting across a dark empty frame; returns the clip and its (row, col) track."""
    rng = make_rng(seed, 7)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    start = rng.uniform(radius + 2, size - radius - 2, size=2)
    angle = rng.uniform(0, 2 * np.pi)
    step = rng.uniform(0.8, 1.5)
    track = np.empty((frames, 2))
    data = np.empty((1, frames, size, size))
    pos = start.copy()
    vel = step * np.array([np.sin(angle), np.cos(angle)])
    lo, hi = radius + 1, size - radius - 1
    for t in range(frames):
        track[t] = pos
        d2 = (yy - pos[0]) ** 2 + (xx - pos[1]) ** 2
        data[0, t] = np.exp(-d2 / (2 * (radius / 1.5) ** 2))
        pos = pos + vel
        for a in range(2):
            if not lo <= pos[a] <= hi:
                vel[a] = -vel[a]
                pos[a] = np.clip(pos[a], lo, hi)
    return VideoClip(np.clip(data, 0, 1).astype(np.float32)), track


def generate_synthetic_dataset(spec: SynthSpec, root, split: str = "train") -> LabeledDataset:
    """Render ``clips_per_class`` clips per action into ``root/<split>/`` and write its index.

    Same spec and split give byte-identical files.
    """
    split_id = SPLIT_IDS.get(split)
    if split_id is None:
        raise ValueError(f"unknown split {split!r}; choose from {sorted(SPLIT_IDS)}")
    out = Path(root) / split
    items = []
    for label, action in enumerate(spec.classes):
        for i in range(spec.clips_per_class):
            rng = make_rng(spec.seed, split_id, label, i)
            clip = render_clip(spec, action, rng)
            loc = f"{action}/clip_{i:05d}.rvc"
            save_clip(clip, out / loc)
            items.append((loc, label))
    ds = LabeledDataset(out, items, len(spec.classes), split, tuple(spec.classes))
    write_index(ds)
    return ds
