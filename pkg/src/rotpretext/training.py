"""Pretext (rotation) training and downstream fine-tuning loops.

Randomness is keyed by position, not by history: shuffling uses
``(seed, epoch)`` and augmentation uses ``(seed, iteration, slot)``. A run
resumed from a checkpoint therefore replays exactly the same batches as an
uninterrupted one.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .network import Model, ModelSpec, build_model, forward, load_model, replace_head, save_model, set_trainable_prefix
from .optim import sgd_step
from .rng import make_rng
from .rotation import RotationSet, expand_batch_with_rotations, rotate, valid_crop_size
from .tensor import backward, get_tape
from .video import (
    LabeledDataset,
    UnlabeledDataset,
    VideoClip,
    center_subclip,
    compute_dif,
    horizontal_flip,
    resize_bilinear,
    sample_subclip,
    spatial_crop,
)

log = logging.getLogger(__name__)

TASKS = ("pretext_classify", "pretext_regress", "transfer")
MODALITIES = ("rgb", "dif")

# stream ids for make_rng
_SHUFFLE, _AUGMENT, _REGRESS = 11, 12, 13


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 8
    iterations: int = 300
    epochs: int | None = None
    lr_initial: float = 0.1
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 24000
    momentum: float = 0.9
    weight_decay: float = 1e-4
    modality: str = "rgb"
    task: str = "pretext_classify"
    rotations: RotationSet = field(default_factory=lambda: RotationSet((0, 90, 180, 270)))
    clip_length: int = 8
    resize: int = 36
    crop: int = 32
    flip_probability: float = 0.5
    freeze_prefix: int = 0
    checkpoint_every: int = 0
    eval_every: int = 0
    regression_norm: str = "l2"
    regress_samples: int = 4
    out_dir: str | None = None
    block_widths: tuple = (8, 8, 16, 32, 64)
    scale: str = "desk"

    def __post_init__(self):
        if isinstance(self.rotations, str):
            self.rotations = RotationSet.parse(self.rotations)
        elif not isinstance(self.rotations, RotationSet):
            self.rotations = RotationSet(tuple(self.rotations))
        if not self.lr_initial > 0:
            raise ValueError(f"lr_initial must be > 0, got {self.lr_initial}")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError(f"lr_decay_factor must be in (0, 1], got {self.lr_decay_factor}")
        if self.lr_decay_every < 1:
            raise ValueError("lr_decay_every must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.task == "pretext_classify" and self.rotations.k < 2:
            raise ValueError("rotation classification needs at least 2 rotations")
        if self.crop > self.resize:
            raise ValueError(f"crop {self.crop} larger than resize {self.resize}")
        if self.modality == "dif" and self.clip_length < 2:
            raise ValueError("difference-of-frames input needs clip_length >= 2")
        if not 0 <= self.freeze_prefix <= 5:
            raise ValueError("freeze_prefix must be in [0, 5]")

    @property
    def input_frames(self) -> int:
        return self.clip_length - 1 if self.modality == "dif" else self.clip_length

    @property
    def input_size(self) -> int:
        if self.task == "pretext_regress" or (self.task == "pretext_classify" and not self.rotations.right_angles):
            return valid_crop_size(self.crop)
        return self.crop

    def model_spec(self, channels: int, head: str, num_outputs: int) -> ModelSpec:
        maker = ModelSpec.paper if self.scale == "paper" else ModelSpec.desk
        return maker(
            input_channels=channels,
            input_frames=self.input_frames,
            input_size=self.input_size,
            block_widths=tuple(self.block_widths),
            head=head,
            num_outputs=num_outputs,
        )

    def total_iterations(self, dataset_size: int) -> int:
        n = self.iterations
        if self.epochs is not None:
            n = min(n, self.epochs * steps_per_epoch(dataset_size, self.batch_size))
        return n


def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, math.ceil(n / batch_size))


def lr_at_iteration(config: TrainConfig, t: int) -> float:
    """Step schedule ``lr_initial * factor ** floor(t / decay_every)``."""
    if t < 0:
        raise ValueError("iteration must be >= 0")
    return config.lr_initial * config.lr_decay_factor ** (t // config.lr_decay_every)


# run log


@dataclass
class LogRecord:
    iter: int
    loss: float
    lr: float
    train_acc: float
    eval_acc: float
    seconds: float


@dataclass
class RunLog:
    records: list = field(default_factory=list)

    CSV_HEADER = ("iter", "loss", "lr", "train_acc", "eval_acc", "seconds")

    def append(self, rec: LogRecord) -> None:
        if self.records and rec.iter <= self.records[-1].iter:
            raise ValueError(f"log iterations must increase ({self.records[-1].iter} then {rec.iter})")
        if not math.isfinite(rec.loss):
            raise FloatingPointError(f"non-finite loss {rec.loss} at iteration {rec.iter}")
        self.records.append(rec)

    def last_eval(self) -> float:
        for r in reversed(self.records):
            if not math.isnan(r.eval_acc):
                return r.eval_acc
        return float("nan")

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.CSV_HEADER)
            for r in self.records:
                w.writerow([r.iter, repr(r.loss), repr(r.lr), _fmt(r.train_acc), _fmt(r.eval_acc), f"{r.seconds:.3f}"])

    @classmethod
    def read_csv(cls, path) -> "RunLog":
        out = cls()
        with Path(path).open(newline="") as fh:
            for row in csv.DictReader(fh):
                out.records.append(
                    LogRecord(int(row["iter"]), float(row["loss"]), float(row["lr"]),
                              _parse(row["train_acc"]), _parse(row["eval_acc"]), float(row["seconds"]))
                )
        return out


def _parse(v: str) -> float:
    return float(v) if v else float("nan")


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else f"{v:.6f}"


# input pipeline


def prepare_clip(clip: VideoClip, config: TrainConfig, rng=None) -> VideoClip:
    """Temporal sample, resize, crop, flip, optional DIF.

    With ``rng=None`` everything is deterministic: centre window, centre crop,
    no flip (the evaluation view).
    """
    if rng is None:
        clip = center_subclip(clip, config.clip_length)
    else:
        clip = sample_subclip(clip, config.clip_length, rng)
    clip = resize_bilinear(clip, config.resize, config.resize)
    if rng is None:
        clip = spatial_crop(clip, config.crop, "center")
    else:
        clip = spatial_crop(clip, config.crop, "random", rng)
        clip = horizontal_flip(clip, config.flip_probability, rng)
    if config.modality == "dif":
        clip = compute_dif(clip)
    return clip


def _augmented(dataset, indices: Sequence[int], config: TrainConfig, iteration: int) -> list[VideoClip]:
    return [
        prepare_clip(dataset.load(i), config, make_rng(config.seed, _AUGMENT, iteration, slot))
        for slot, i in enumerate(indices)
    ]


def batch_indices(n: int, config: TrainConfig, iteration: int) -> list[int]:
    """Clip indices for one step: epoch-wise permutations seeded by ``(seed, epoch)``."""
    per_epoch = steps_per_epoch(n, config.batch_size)
    epoch, step = divmod(iteration, per_epoch)
    perm = make_rng(config.seed, _SHUFFLE, epoch).permutation(n)
    # a short last batch wraps around to the start of the same permutation
    pos = np.arange(step * config.batch_size, (step + 1) * config.batch_size) % n
    return [int(i) for i in perm[pos]]


def rotated_batch(clips: Sequence[VideoClip], config: TrainConfig, iteration: int = 0, rng=None):
    """Network inputs and targets for the configured pretext task."""
    if config.task == "pretext_regress":
        rng = rng if rng is not None else make_rng(config.seed, _REGRESS, iteration)
        degs = np.asarray(config.rotations.degrees)
        xs, ys = [], []
        for clip in clips:
            for d in rng.choice(degs, size=config.regress_samples):
                xs.append(rotate(clip, float(d), exact=False).data)
                ys.append(float(d) / 360.0)
        return np.stack(xs), np.asarray(ys)
    return expand_batch_with_rotations(clips, config.rotations)


# train state


@dataclass
class TrainState:
    model: Model
    velocity: dict = field(default_factory=dict)
    iteration: int = 0


def save_train_state(state: TrainState, path, config: TrainConfig | None = None) -> None:
    extra = {f"opt.velocity.{k}": v for k, v in state.velocity.items()}
    meta = {"iteration": state.iteration}
    if config is not None:
        meta["task"] = config.task
        meta["modality"] = config.modality
        meta["rotations"] = str(config.rotations)
        meta["clip_length"] = config.clip_length
    save_model(state.model, path, extra, meta)


def load_train_state(path) -> TrainState:
    model, extra, meta = load_model(path)
    velocity = {k[len("opt.velocity.") :]: v.copy() for k, v in extra.items() if k.startswith("opt.velocity.")}
    return TrainState(model, velocity, int(meta.get("iteration", 0)))


def _step(state: TrainState, x: np.ndarray, loss_fn: Callable, config: TrainConfig, lr: float):
    get_tape().clear()
    logits = forward(state.model, x, "train")
    loss = loss_fn(logits)
    backward(loss)
    sgd_step(state.model.trainable(), lr, config.momentum, config.weight_decay, state.velocity)
    return loss.item(), logits.data


def pretrain_step(state: TrainState, clips: Sequence[VideoClip], config: TrainConfig, lr: float, iteration: int = 0):
    """One optimisation step on the rotation task; returns (loss, train accuracy)."""
    x, y = rotated_batch(clips, config, iteration)
    if config.task == "pretext_regress":
        loss, pred = _step(state, x, lambda z: F.regression_loss(z, y, config.regression_norm), config, lr)
        return loss, float("nan")
    loss, logits = _step(state, x, lambda z: F.softmax_cross_entropy(z, y), config, lr)
    return loss, float(np.mean(logits.argmax(axis=1) == y))


def _emit(state: TrainState, log_: RunLog, config: TrainConfig, loss: float, lr: float, acc: float,
          t0: float, evaluate: Callable | None, done: bool) -> None:
    it = state.iteration
    ev = float("nan")
    if evaluate is not None and ((config.eval_every and it % config.eval_every == 0) or done):
        ev = float(evaluate(state.model))
    log_.append(LogRecord(it, loss, lr, acc, ev, time.perf_counter() - t0))
    if config.out_dir and config.checkpoint_every and (it % config.checkpoint_every == 0 or done):
        save_train_state(state, Path(config.out_dir) / f"ckpt_{it:07d}.rpck", config)
        save_train_state(state, Path(config.out_dir) / "last.rpck", config)


def init_pretext_state(config: TrainConfig, channels: int) -> TrainState:
    k = 1 if config.task == "pretext_regress" else config.rotations.k
    return TrainState(build_model(config.model_spec(channels, "pretext", k), seed=config.seed))


def pretrain(
    config: TrainConfig,
    dataset: UnlabeledDataset,
    state: TrainState | None = None,
    evaluate: Callable[[Model], float] | None = None,
    iterations: int | None = None,
) -> tuple[Model, RunLog]:
    """Self-supervised rotation training.

    Takes an ``UnlabeledDataset`` so that action labels are out of reach by
    construction. Pass ``state`` to resume; ``iterations`` overrides the stop
    point (absolute iteration count).
    """
    if not isinstance(dataset, UnlabeledDataset):
        raise TypeError("pretrain takes an UnlabeledDataset; call .unlabeled() on labelled data")
    if len(dataset) == 0:
        raise ValueError("pretrain needs a non-empty dataset")
    if config.task not in ("pretext_classify", "pretext_regress"):
        raise ValueError(f"pretrain needs a pretext task, got {config.task!r}")
    if state is None:
        state = init_pretext_state(config, dataset.load(0).channels)
    stop = config.total_iterations(len(dataset)) if iterations is None else iterations
    run_log = RunLog()
    t0 = time.perf_counter()
    while state.iteration < stop:
        it = state.iteration
        lr = lr_at_iteration(config, it)
        idx = batch_indices(len(dataset), config, it)
        clips = _augmented(dataset, idx, config, it)
        loss, acc = pretrain_step(state, clips, config, lr, it)
        state.iteration += 1
        _emit(state, run_log, config, loss, lr, acc, t0, evaluate, state.iteration == stop)
        if it % 50 == 0:
            log.info("pretrain it=%d loss=%.4f acc=%.3f lr=%g", it, loss, acc, lr)
    if config.out_dir:
        run_log.write_csv(Path(config.out_dir) / "pretrain_log.csv")
    return state.model, run_log


def transfer_model(config: TrainConfig, pretrained: Model | None, channels: int, num_classes: int) -> Model:
    """Scratch or pretrained trunk with a fresh action head and the configured frozen prefix."""
    spec = config.model_spec(channels, "transfer", num_classes)
    if pretrained is None:
        model = build_model(spec, seed=config.seed)
    else:
        trunk = pretrained.spec
        if (trunk.input_channels, trunk.input_frames, trunk.block_widths) != (
            spec.input_channels, spec.input_frames, spec.block_widths
        ):
            raise ValueError(
                f"pretrained trunk {trunk.input_channels}x{trunk.input_frames} widths {trunk.block_widths} "
                f"does not fit the transfer input {spec.input_channels}x{spec.input_frames}"
            )
        model = replace_head(pretrained.copy(), "transfer", num_classes, seed=config.seed)
        model.spec = dataclasses.replace(model.spec, input_size=spec.input_size)
    set_trainable_prefix(model, config.freeze_prefix)
    return model


def finetune(
    config: TrainConfig,
    pretrained: Model | None,
    dataset: LabeledDataset,
    evaluate: Callable[[Model], float] | None = None,
    state: TrainState | None = None,
) -> tuple[Model, RunLog]:
    """Supervised action training with a fresh single-layer head.

    ``pretrained=None`` trains from scratch. The pretrained model is copied,
    never mutated.
    """
    if not isinstance(dataset, LabeledDataset):
        raise TypeError("finetune needs a LabeledDataset")
    if len(dataset) == 0:
        raise ValueError("finetune needs a non-empty dataset")
    if state is None:
        channels = dataset.load(0).channels
        state = TrainState(transfer_model(config, pretrained, channels, dataset.class_count))
    elif state.model.spec.num_outputs != dataset.class_count:
        raise ValueError(
            f"model predicts {state.model.spec.num_outputs} classes, dataset has {dataset.class_count}"
        )
    labels = np.asarray(dataset.labels)
    stop = config.total_iterations(len(dataset))
    run_log = RunLog()
    t0 = time.perf_counter()
    while state.iteration < stop:
        it = state.iteration
        lr = lr_at_iteration(config, it)
        idx = batch_indices(len(dataset), config, it)
        x = np.stack([c.data for c in _augmented(dataset, idx, config, it)])
        y = labels[idx]
        loss, logits = _step(state, x, lambda z: F.softmax_cross_entropy(z, y), config, lr)
        state.iteration += 1
        acc = float(np.mean(logits.argmax(axis=1) == y))
        _emit(state, run_log, config, loss, lr, acc, t0, evaluate, state.iteration == stop)
    if config.out_dir:
        run_log.write_csv(Path(config.out_dir) / "finetune_log.csv")
    return state.model, run_log
