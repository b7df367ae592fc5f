"""Accuracy metrics, prediction fusion, data subsets, attention maps and kernel export."""
from __future__ import annotations

import csv
import logging
import math
import traceback
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .functional import softmax
from .network import Model, first_block_activations, forward
from .rng import make_rng
from .rotation import RotationSet
from .training import TrainConfig, finetune, prepare_clip, pretrain, rotated_batch
from .video import LabeledDataset, UnlabeledDataset, VideoClip, resize_bilinear

log = logging.getLogger(__name__)

FUSION_EPS = 1e-8
EVAL_BATCH = 64


@dataclass
class PredictionSet:
    probs: np.ndarray  # (N, K)
    labels: np.ndarray  # (N,)
    ids: tuple

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = tuple(self.ids)
        if self.probs.ndim != 2 or len(self.probs) != len(self.labels) or len(self.ids) != len(self.labels):
            raise ValueError("probs, labels and ids must describe the same samples")

    def accuracy(self) -> float:
        if not len(self.labels):
            return float("nan")
        return float(np.mean(self.probs.argmax(axis=1) == self.labels))


def _logits(model: Model, x: np.ndarray) -> np.ndarray:
    out = [forward(model, x[i : i + EVAL_BATCH], "eval").data for i in range(0, len(x), EVAL_BATCH)]
    return np.concatenate(out).astype(np.float64)


def predict_rotations(model: Model, dataset, config: TrainConfig) -> PredictionSet:
    """Every rotation of every clip, evaluation view (centre crop, no flip)."""
    if model.spec.head != "pretext" or model.spec.num_outputs != config.rotations.k:
        raise ValueError(
            f"model head ({model.spec.head}, {model.spec.num_outputs} outputs) does not match "
            f"{config.rotations.k} rotations"
        )
    probs, labels, ids = [], [], []
    for start in range(0, len(dataset), 16):
        idx = range(start, min(start + 16, len(dataset)))
        clips = [prepare_clip(dataset.load(i), config) for i in idx]
        x, y = rotated_batch(clips, config)
        probs.append(softmax(_logits(model, x)))
        labels.append(y)
        ids.extend((i, int(r)) for i in idx for r in range(config.rotations.k))
    return PredictionSet(np.concatenate(probs), np.concatenate(labels), ids)


def rotation_accuracy(model: Model, dataset, config: TrainConfig) -> float:
    return predict_rotations(model, dataset, config).accuracy()


def predict_actions(model: Model, dataset: LabeledDataset, config: TrainConfig) -> PredictionSet:
    if model.spec.head != "transfer" or model.spec.num_outputs != dataset.class_count:
        raise ValueError("model needs a transfer head matching the dataset's class count")
    x = np.stack([prepare_clip(dataset.load(i), config).data for i in range(len(dataset))])
    return PredictionSet(softmax(_logits(model, x)), np.asarray(dataset.labels), tuple(range(len(dataset))))


def top1_accuracy(model: Model, dataset: LabeledDataset, config: TrainConfig) -> float:
    return predict_actions(model, dataset, config).accuracy()


def fuse_predictions(a: PredictionSet, b: PredictionSet) -> PredictionSet:
    """Per-sample geometric mean ``sqrt(pa * pb + eps^2)``, renormalised."""
    if a.ids != b.ids:
        raise ValueError("prediction sets cover different samples")
    if a.probs.shape != b.probs.shape:
        raise ValueError(f"class counts differ: {a.probs.shape} vs {b.probs.shape}")
    g = np.sqrt(a.probs * b.probs + FUSION_EPS**2)
    return PredictionSet(g / g.sum(axis=1, keepdims=True), a.labels, a.ids)


# subsets


def few_shot_subset(dataset: LabeledDataset, shots_per_class: int, seed: int) -> LabeledDataset:
    """Exactly ``shots_per_class`` items of each class, chosen uniformly by ``seed``."""
    if shots_per_class < 1:
        raise ValueError("shots_per_class must be >= 1")
    by_class = defaultdict(list)
    for i, label in enumerate(dataset.labels):
        by_class[label].append(i)
    rng = make_rng(seed, 31)
    chosen = []
    for c in range(dataset.class_count):
        members = by_class.get(c, [])
        if len(members) < shots_per_class:
            raise ValueError(f"class {c} has {len(members)} items, fewer than {shots_per_class} shots")
        chosen.extend(int(i) for i in rng.choice(members, size=shots_per_class, replace=False))
    return dataset.subset(sorted(chosen))


def subsample_dataset(dataset, amount: float | int, seed: int):
    """Uniform sample without replacement; a float in (0, 1] is a fraction."""
    n = len(dataset)
    count = int(round(amount * n)) if isinstance(amount, float) else int(amount)
    if not 0 < count <= n:
        raise ValueError(f"cannot take {amount} of {n} items")
    idx = make_rng(seed, 32).choice(n, size=count, replace=False)
    return dataset.subset(sorted(int(i) for i in idx))


# attention and kernels


def _minmax(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    if hi <= lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def attention_map(model: Model, clip: VideoClip) -> list[np.ndarray]:
    """Channel-mean of the stem activations per frame, upsampled to the input size.

    Normalised to [0, 1] jointly over all frames of the clip.
    """
    act = first_block_activations(model, clip.data[None]).data[0]  # (C1, T', H', W')
    maps = act.mean(axis=0)[None].astype(np.float64)
    up = resize_bilinear(VideoClip(maps.astype(np.float32)), clip.height, clip.width).data[0]
    norm = _minmax(up.astype(np.float64))
    return [norm[t] for t in range(norm.shape[0])]


def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255) from an array already scaled to [0, 1]."""
    img = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a P5 PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def export_attention_pgm(model: Model, clip: VideoClip, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, m in enumerate(attention_map(model, clip)):
        p = out / f"attn_{t}.pgm"
        write_pgm(p, m)
        paths.append(p)
    return paths


def export_kernels_pgm(model: Model, out_dir) -> list[Path]:
    """One image per stem filter per temporal slice, ``kernel_<filter>_<t>.pgm``.

    Each filter is min-max normalised over all its slices and input channels
    (averaged across channels); a constant filter maps to black.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    w = model.params["b0.conv.w"].data.astype(np.float64)  # (C1, Cin, kT, kH, kW)
    paths = []
    for f in range(w.shape[0]):
        filt = _minmax(w[f].mean(axis=0))
        for t in range(filt.shape[0]):
            p = out / f"kernel_{f}_{t}.pgm"
            write_pgm(p, filt[t])
            paths.append(p)
    return paths


# ablation driver

RESULTS_HEADER = ("run_id", "task", "rotations", "clip_len", "modality", "pretext_acc", "transfer_acc", "seed")


@dataclass
class AblationRun:
    run_id: str
    pretext: TrainConfig
    transfer: TrainConfig | None = None


def _read_done(path: Path) -> set[str]:
    if not path.exists():
        return set()
    with path.open(newline="") as fh:
        return {row["run_id"] for row in csv.DictReader(fh)}


def ablate(
    runs: Sequence[AblationRun],
    pretrain_data: UnlabeledDataset,
    results_csv,
    transfer_train: LabeledDataset | None = None,
    transfer_test: LabeledDataset | None = None,
    pretext_eval: UnlabeledDataset | None = None,
) -> list[dict]:
    """Run each configuration sequentially and append one CSV row per run.

    Runs whose ``run_id`` already appears in ``results_csv`` are skipped, so
    an interrupted matrix resumes where it stopped. A failing run is logged
    and recorded with empty accuracies; the matrix carries on.
    """
    path = Path(results_csv)
    path.parent.mkdir(parents=True, exist_ok=True)
    done = _read_done(path)
    if not path.exists():
        with path.open("w", newline="") as fh:
            csv.writer(fh).writerow(RESULTS_HEADER)
    rows = []
    for run in runs:
        if run.run_id in done:
            log.info("skipping finished run %s", run.run_id)
            continue
        cfg = run.pretext
        row = {
            "run_id": run.run_id,
            "task": cfg.task,
            "rotations": str(cfg.rotations).replace(",", " "),
            "clip_len": cfg.clip_length,
            "modality": cfg.modality,
            "pretext_acc": "",
            "transfer_acc": "",
            "seed": cfg.seed,
        }
        try:
            model, _ = pretrain(cfg, pretrain_data)
            if cfg.task == "pretext_classify":
                row["pretext_acc"] = f"{rotation_accuracy(model, pretext_eval or pretrain_data, cfg):.6f}"
            if run.transfer is not None and transfer_train is not None:
                tuned, _ = finetune(run.transfer, model, transfer_train)
                row["transfer_acc"] = f"{top1_accuracy(tuned, transfer_test or transfer_train, run.transfer):.6f}"
        except Exception as e:  # one bad configuration must not sink the matrix
            log.error("run %s failed: %s", run.run_id, e)
            with path.with_suffix(".errors.log").open("a") as fh:
                fh.write(f"{run.run_id}\t{type(e).__name__}: {e}\n{traceback.format_exc()}\n")
        with path.open("a", newline="") as fh:
            csv.writer(fh).writerow([row[k] for k in RESULTS_HEADER])
        rows.append(row)
    return rows


def read_results(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def summarize(rows: Sequence[dict], key: str = "transfer_acc") -> str:
    """One line per run ordered by ``key``, for eyeballing directional claims."""
    def val(r):
        try:
            return float(r[key])
        except (TypeError, ValueError):
            return -math.inf

    ordered = sorted(rows, key=val, reverse=True)
    return "\n".join(f"{r['run_id']}: {key}={r[key] or 'n/a'}" for r in ordered)
