"""3D residual network with a swappable rotation / action head.

Block 0 is the stem (conv, batch norm, ReLU, optional max-pool); blocks 1-4
are residual stages; block index 5 denotes the head. Parameters live in a
flat name -> Tensor dict whose names are stable across save/load.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import functional as F
from .checkpoint import load_checkpoint, save_checkpoint
from .rng import make_rng
from .tensor import Tensor, no_grad

HEAD_BLOCK = 5
NUM_BLOCKS = 5


@dataclass
class ModelSpec:
    input_channels: int = 1
    input_frames: int = 8
    input_size: int = 32
    block_widths: tuple = (8, 8, 16, 32, 64)
    stem_kernel: tuple = (3, 3, 3)
    stem_stride: tuple = (1, 2, 2)
    stem_padding: tuple = (1, 1, 1)
    stem_pool: bool = False
    residual_kernels: tuple = ((3, 3, 3), (3, 3, 3), (3, 3, 3), (1, 3, 3))
    units_per_block: int = 1
    temporal_downsample: bool = False
    head: str = "pretext"
    num_outputs: int = 4
    hidden: int = 64
    scale: str = "desk"

    def __post_init__(self):
        self.block_widths = tuple(int(w) for w in self.block_widths)
        self.stem_kernel = tuple(int(v) for v in self.stem_kernel)
        self.stem_stride = tuple(int(v) for v in self.stem_stride)
        self.stem_padding = tuple(int(v) for v in self.stem_padding)
        self.residual_kernels = tuple(tuple(int(v) for v in k) for k in self.residual_kernels)
        if len(self.block_widths) != NUM_BLOCKS:
            raise ValueError(f"need exactly 5 block widths, got {self.block_widths}")
        if len(self.residual_kernels) != NUM_BLOCKS - 1:
            raise ValueError("need one residual kernel per residual block (4)")
        if any(w < 1 for w in self.block_widths):
            raise ValueError("block widths must be positive")
        if self.head not in ("pretext", "transfer"):
            raise ValueError(f"head must be 'pretext' or 'transfer', got {self.head!r}")
        if self.num_outputs < 1:
            raise ValueError("num_outputs must be >= 1")
        if self.units_per_block < 1:
            raise ValueError("units_per_block must be >= 1")
        if self.input_channels < 1 or self.input_frames < 1 or self.input_size < 1:
            raise ValueError("input extents must be positive")
        extents = self.activation_extents()
        if min(min(e) for e in extents) < 1:
            raise ValueError(f"input {self.input_frames}x{self.input_size}^2 too small for this network")

    @classmethod
    def desk(cls, **overrides) -> "ModelSpec":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "ModelSpec":
        base = dict(
            input_channels=3,
            input_frames=16,
            input_size=112,
            block_widths=(64, 64, 128, 256, 512),
            stem_kernel=(7, 7, 7),
            stem_stride=(1, 2, 2),
            stem_padding=(3, 3, 3),
            stem_pool=True,
            residual_kernels=((3, 3, 3),) * 4,
            units_per_block=2,
            temporal_downsample=True,
            scale="paper",
        )
        base.update(overrides)
        return cls(**base)

    @property
    def feature_dim(self) -> int:
        return self.block_widths[-1]

    def block_stride(self, block: int) -> tuple:
        if block <= 1:
            return (1, 1, 1)
        return (2 if self.temporal_downsample else 1, 2, 2)

    def stem_shape(self) -> tuple:
        return F.conv_output_shape(
            (self.input_frames, self.input_size, self.input_size), self.stem_kernel, self.stem_stride, self.stem_padding
        )

    def activation_extents(self) -> list:
        """(T, H, W) after the stem's ReLU and after each block."""
        shapes = [self.stem_shape()]
        cur = shapes[0]
        if self.stem_pool:
            cur = F.conv_output_shape(cur, 3, 2, 1)
        shapes.append(cur)
        for b in range(1, NUM_BLOCKS):
            k = self.residual_kernels[b - 1]
            pad = tuple(v // 2 for v in k)
            cur = F.conv_output_shape(cur, k, self.block_stride(b), pad)
            shapes.append(cur)
        return shapes

    def to_meta(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f"spec.{f.name}"] = repr(v) if not isinstance(v, str) else v
        return out

    @classmethod
    def from_meta(cls, meta: Mapping[str, str]) -> "ModelSpec":
        import ast

        kwargs = {}
        for f in dataclasses.fields(cls):
            key = f"spec.{f.name}"
            if key not in meta:
                continue
            raw = meta[key]
            kwargs[f.name] = raw if f.type in ("str", str) else ast.literal_eval(raw)
        return cls(**kwargs)


def _uniform(rng, shape, bound) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Model:
    """Parameters, batch-norm statistics and the freezing state of one network."""

    def __init__(self, spec: ModelSpec, params: dict, stats: dict, trainable_from: int = 0):
        self.spec = spec
        self.params: dict[str, Tensor] = params
        self.stats: dict[str, F.BatchNormStats] = stats
        self.trainable_from = 0
        set_trainable_prefix(self, trainable_from)

    @staticmethod
    def block_of(name: str) -> int:
        if name.startswith("head."):
            return HEAD_BLOCK
        return int(name.split(".", 1)[0][1:])

    def is_frozen(self, block: int) -> bool:
        return block < self.trainable_from

    def trainable(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if p.requires_grad}

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {n: p.data for n, p in self.params.items()}
        for n, s in self.stats.items():
            out[f"{n}.running_mean"] = s.mean
            out[f"{n}.running_var"] = s.var
        return out

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        expected = set(self.state_dict())
        missing = expected - set(state)
        if strict and missing:
            raise KeyError(f"state is missing {sorted(missing)[:5]}")
        for n, p in self.params.items():
            if n in state:
                _assign(p.data, state[n], n)
        for n, s in self.stats.items():
            if f"{n}.running_mean" in state:
                _assign(s.mean, state[f"{n}.running_mean"], n)
                _assign(s.var, state[f"{n}.running_var"], n)

    def copy(self) -> "Model":
        params = {n: Tensor(p.data.copy(), dtype=p.dtype) for n, p in self.params.items()}
        stats = {}
        for n, s in self.stats.items():
            st = F.BatchNormStats(len(s.mean))
            st.mean[:] = s.mean
            st.var[:] = s.var
            stats[n] = st
        return Model(dataclasses.replace(self.spec), params, stats, self.trainable_from)


def _assign(dst: np.ndarray, src: np.ndarray, name: str) -> None:
    if dst.shape != tuple(src.shape):
        raise ValueError(f"shape mismatch for {name}: model {dst.shape}, state {tuple(src.shape)}")
    dst[...] = src


def _add_conv(params, stats, rng, prefix, c_in, c_out, kernel):
    fan_in = c_in * int(np.prod(kernel))
    params[f"{prefix}.conv.w"] = _uniform(rng, (c_out, c_in, *kernel), math.sqrt(6.0 / fan_in))
    params[f"{prefix}.conv.b"] = np.zeros(c_out, np.float32)
    params[f"{prefix}.bn.g"] = np.ones(c_out, np.float32)
    params[f"{prefix}.bn.b"] = np.zeros(c_out, np.float32)
    stats[f"{prefix}.bn"] = F.BatchNormStats(c_out)


def _head_params(spec: ModelSpec, rng) -> dict:
    d = spec.feature_dim
    p = {}
    if spec.head == "pretext":
        p["head.fc1.w"] = _uniform(rng, (spec.hidden, d), math.sqrt(6.0 / d))
        p["head.fc1.b"] = np.zeros(spec.hidden, np.float32)
        # small output layer keeps logits near uniform at init
        p["head.fc2.w"] = _uniform(rng, (spec.num_outputs, spec.hidden), 0.1 / math.sqrt(spec.hidden))
        p["head.fc2.b"] = np.zeros(spec.num_outputs, np.float32)
    else:
        p["head.fc.w"] = _uniform(rng, (spec.num_outputs, d), 0.1 / math.sqrt(d))
        p["head.fc.b"] = np.zeros(spec.num_outputs, np.float32)
    return p


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    """Construct and initialise a network (fan-in uniform weights, BN gamma=1 beta=0)."""
    rng = make_rng(seed, 1)
    raw: dict[str, np.ndarray] = {}
    stats: dict[str, F.BatchNormStats] = {}
    w = spec.block_widths
    _add_conv(raw, stats, rng, "b0", spec.input_channels, w[0], spec.stem_kernel)
    c_in = w[0]
    for b in range(1, NUM_BLOCKS):
        k = spec.residual_kernels[b - 1]
        for u in range(spec.units_per_block):
            pre = f"b{b}.u{u}"
            stride = spec.block_stride(b) if u == 0 else (1, 1, 1)
            _add_conv(raw, stats, rng, f"{pre}.c1", c_in, w[b], k)
            _add_conv(raw, stats, rng, f"{pre}.c2", w[b], w[b], k)
            if c_in != w[b] or stride != (1, 1, 1):
                _add_conv(raw, stats, rng, f"{pre}.proj", c_in, w[b], (1, 1, 1))
            c_in = w[b]
    raw.update(_head_params(spec, rng))
    params = {n: Tensor(v, dtype=np.float32, name=n) for n, v in raw.items()}
    return Model(spec, params, stats)


def replace_head(model: Model, head: str, num_outputs: int, seed: int = 0) -> Model:
    """Swap in a freshly initialised head; the trunk is shared, not copied."""
    spec = dataclasses.replace(model.spec, head=head, num_outputs=num_outputs)
    params = {n: p for n, p in model.params.items() if not n.startswith("head.")}
    for n, v in _head_params(spec, make_rng(seed, 2)).items():
        params[n] = Tensor(v, dtype=np.float32, name=n)
    return Model(spec, params, model.stats, model.trainable_from)


def set_trainable_prefix(model: Model, n: int) -> None:
    """Freeze blocks ``0..n-1``; the head always stays trainable."""
    if not 0 <= n <= NUM_BLOCKS:
        raise ValueError(f"trainable prefix must be in [0, 5], got {n}")
    model.trainable_from = n
    for name, p in model.params.items():
        p.requires_grad = Model.block_of(name) >= n
        if not p.requires_grad:
            p.grad = None


# forward pass


def _conv_bn(model: Model, x: Tensor, prefix: str, stride, padding, training: bool) -> Tensor:
    P = model.params
    y = F.conv3d(x, P[f"{prefix}.conv.w"], P[f"{prefix}.conv.b"], stride, padding)
    frozen = model.is_frozen(Model.block_of(prefix))
    return F.batchnorm3d(y, P[f"{prefix}.bn.g"], P[f"{prefix}.bn.b"], model.stats[f"{prefix}.bn"], training and not frozen)


def _stem(model: Model, x: Tensor, training: bool) -> Tensor:
    s = model.spec
    return F.relu(_conv_bn(model, x, "b0", s.stem_stride, s.stem_padding, training))


def residual_block(model: Model, h: Tensor, b: int, training: bool) -> Tensor:
    """Residual block ``b`` (1..4): each unit is ``relu(bn(conv(relu(bn(conv(h))))) + skip)``."""
    s = model.spec
    k = s.residual_kernels[b - 1]
    pad = tuple(v // 2 for v in k)
    for u in range(s.units_per_block):
        pre = f"b{b}.u{u}"
        stride = s.block_stride(b) if u == 0 else (1, 1, 1)
        r = F.relu(_conv_bn(model, h, f"{pre}.c1", stride, pad, training))
        r = _conv_bn(model, r, f"{pre}.c2", (1, 1, 1), pad, training)
        if f"{pre}.proj.conv.w" in model.params:
            skip = _conv_bn(model, h, f"{pre}.proj", stride, (0, 0, 0), training)
        else:
            skip = h
        h = F.relu(r + skip)
    return h


def _trunk(model: Model, x: Tensor, training: bool) -> Tensor:
    h = _stem(model, x, training)
    if model.spec.stem_pool:
        h = F.maxpool3d(h, 3, 2, 1)
    for b in range(1, NUM_BLOCKS):
        h = residual_block(model, h, b, training)
    return h


def _as_batch(model: Model, batch) -> Tensor:
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    s = model.spec
    want = (s.input_channels, s.input_frames, s.input_size, s.input_size)
    if x.ndim != 5 or tuple(x.shape[1:]) != want:
        raise ValueError(f"batch shape {x.shape} does not match model input (N, {', '.join(map(str, want))})")
    return x


def features(model: Model, batch, training: bool = False) -> Tensor:
    x = _as_batch(model, batch)
    return F.global_avg_pool(_trunk(model, x, training))


def head_forward(model: Model, feats: Tensor) -> Tensor:
    P = model.params
    if model.spec.head == "pretext":
        h = F.relu(F.linear(feats, P["head.fc1.w"], P["head.fc1.b"]))
        return F.linear(h, P["head.fc2.w"], P["head.fc2.b"])
    return F.linear(feats, P["head.fc.w"], P["head.fc.b"])


def forward(model: Model, batch, mode: str = "eval") -> Tensor:
    """Logits for a ``(N, C, T, H, W)`` batch. Eval mode records no tape."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval":
        with no_grad():
            return head_forward(model, features(model, batch, False))
    return head_forward(model, features(model, batch, True))


def first_block_activations(model: Model, batch) -> Tensor:
    """Post-ReLU stem output (before any max-pooling), eval mode."""
    with no_grad():
        return _stem(model, _as_batch(model, batch), False)


# persistence


def save_model(model: Model, path, extra: Mapping[str, np.ndarray] | None = None, meta: Mapping[str, object] | None = None) -> None:
    tensors = dict(model.state_dict())
    if extra:
        tensors.update(extra)
    m = model.spec.to_meta()
    m["trainable_from"] = model.trainable_from
    if meta:
        m.update(meta)
    save_checkpoint(path, tensors, m)


def load_model(path) -> tuple[Model, dict[str, np.ndarray], dict[str, str]]:
    """Returns the model plus any extra tensors and the raw metadata."""
    tensors, meta = load_checkpoint(Path(path))
    spec = ModelSpec.from_meta(meta)
    model = build_model(spec)
    model.load_state_dict(tensors)
    set_trainable_prefix(model, int(meta.get("trainable_from", 0)))
    known = set(model.state_dict())
    extra = {k: v for k, v in tensors.items() if k not in known}
    return model, extra, meta
