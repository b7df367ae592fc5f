"""Flat ``key=value`` run configuration.

One key per line, ``#`` starts a comment, blank lines are ignored. Every key
has a type, a default and a one-line description; unknown keys are rejected
so a typo never silently falls back to a default. Command-line overrides use
the same ``key=value`` syntax and win over the file.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from .rotation import RotationSet
from .synth import ACTIONS, SynthSpec
from .training import MODALITIES, TrainConfig

DATA_DIR_ENV = "ROTPRETEXT_DATA_DIR"
PRESETS = ("desk", "paper_scale")


class ConfigError(ValueError):
    """Base class; ``str(err)`` is a single line naming the source and key."""


class UnknownKeyError(ConfigError):
    pass


class MalformedValueError(ConfigError):
    pass


class MissingKeyError(ConfigError):
    pass


# value parsers


def _int(lo=None, hi=None):
    def parse(raw: str) -> int:
        v = int(raw)
        if (lo is not None and v < lo) or (hi is not None and v > hi):
            raise ValueError(f"must be in [{lo if lo is not None else '-inf'}, {hi if hi is not None else 'inf'}]")
        return v

    parse.kind = "int"
    return parse


def _float(lo=None, hi=None, lo_open=False):
    def parse(raw: str) -> float:
        v = float(raw)
        if v != v:
            raise ValueError("must be a number")
        if lo is not None and (v < lo or (lo_open and v == lo)):
            raise ValueError(f"must be {'>' if lo_open else '>='} {lo}")
        if hi is not None and v > hi:
            raise ValueError(f"must be <= {hi}")
        return v

    parse.kind = "float"
    return parse


def _choice(*options):
    def parse(raw: str) -> str:
        if raw not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return raw

    parse.kind = "|".join(options)
    return parse


def _optional_int(lo=0):
    inner = _int(lo)

    def parse(raw: str):
        return None if raw.lower() in ("", "none") else inner(raw)

    parse.kind = "int|none"
    return parse


def _widths(raw: str) -> tuple:
    vals = tuple(int(p) for p in raw.split(",") if p.strip())
    if len(vals) != 5 or min(vals) < 1:
        raise ValueError("needs five positive comma-separated widths")
    return vals


_widths.kind = "w0,w1,w2,w3,w4"


def _rotations(raw: str) -> RotationSet:
    return RotationSet.parse(raw)


_rotations.kind = "deg,deg,..."


def _path(raw: str) -> str:
    return raw


_path.kind = "path"


def _classes(raw: str) -> tuple:
    names = tuple(p.strip() for p in raw.split(",") if p.strip())
    bad = [n for n in names if n not in ACTIONS]
    if bad or not names:
        raise ValueError(f"unknown action classes {bad}; choose from {', '.join(ACTIONS)}")
    return names


_classes.kind = "name,name,..."


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], Any]
    default: str
    doc: str


def _keys(*specs) -> dict[str, Key]:
    return {s[0]: Key(*s) for s in specs}


# Defaults here are the desk preset; desk.cfg spells the same values out.
KEYS: dict[str, Key] = _keys(
    ("seed", _int(0), "0", "master seed for data order, augmentation and initialisation"),
    ("data_dir", _path, "", f"dataset root holding train/ and test/ (falls back to ${DATA_DIR_ENV})"),
    ("out_dir", _path, "runs", "where checkpoints, logs and exports are written"),
    # synthetic data
    ("synth_train_per_class", _int(1), "100", "training clips rendered per action class"),
    ("synth_test_per_class", _int(1), "25", "held-out clips rendered per action class"),
    ("synth_frames", _int(2), "20", "frames per rendered clip"),
    ("synth_size", _int(24), "40", "height and width of rendered frames"),
    ("synth_channels", _choice("1", "3"), "1", "channels of rendered clips"),
    ("synth_classes", _classes, ",".join(ACTIONS), "action classes to render"),
    ("synth_cue_strength", _float(0.0, 1.0), "0", "contrast of the static sky/ground orientation cue"),
    ("synth_particles", _int(0), "4", "falling particles per clip (motion orientation cue)"),
    ("synth_noise", _float(0.0), "0.03", "std of additive pixel noise"),
    # network and input pipeline
    ("scale", _choice("desk", "paper"), "desk", "network family: desk (small) or paper (full-size ResNet-18 style)"),
    ("block_widths", _widths, "8,8,16,32,64", "channel widths of the five convolution blocks"),
    ("modality", _choice(*MODALITIES), "rgb", "network input: raw frames or difference of frames"),
    ("clip_length", _int(1), "8", "consecutive frames sampled per clip"),
    ("resize", _int(1), "36", "frames are resized to resize x resize"),
    ("crop", _int(1), "32", "side of the random (train) or centre (eval) crop"),
    ("flip_probability", _float(0.0, 1.0), "0.5", "chance of a horizontal flip per training clip"),
    # pretext training
    ("task", _choice("pretext_classify", "pretext_regress"), "pretext_classify", "pretext objective"),
    ("rotations", _rotations, "0,90,180,270", "rotation set in degrees, counter-clockwise"),
    ("regression_norm", _choice("l1", "l2"), "l2", "loss for the angle regression task"),
    ("regress_samples", _int(1), "4", "random angles drawn per clip for regression"),
    ("batch_size", _int(1), "8", "clips per pretext step, before rotation expansion"),
    ("iterations", _int(0), "150", "pretext optimisation steps"),
    ("lr_initial", _float(0.0, lo_open=True), "0.1", "pretext initial learning rate"),
    ("lr_decay_factor", _float(0.0, 1.0, lo_open=True), "0.1", "pretext step-decay factor"),
    ("lr_decay_every", _int(1), "105", "pretext iterations between decays"),
    ("momentum", _float(0.0, 1.0), "0.9", "SGD momentum"),
    ("weight_decay", _float(0.0), "0.0001", "L2 weight decay"),
    ("checkpoint_every", _int(0), "0", "save a checkpoint every N iterations (0: only at the end)"),
    ("eval_every", _int(0), "0", "evaluate on held-out clips every N iterations (0: only at the end)"),
    # transfer
    ("ft_batch_size", _int(1), "8", "clips per fine-tuning step"),
    ("ft_iterations", _int(0), "100", "fine-tuning optimisation steps"),
    ("ft_epochs", _optional_int(1), "none", "optional cap on fine-tuning epochs"),
    ("ft_lr_initial", _float(0.0, lo_open=True), "0.05", "fine-tuning initial learning rate"),
    ("ft_lr_decay_factor", _float(0.0, 1.0, lo_open=True), "0.1", "fine-tuning step-decay factor"),
    ("ft_lr_decay_every", _int(1), "70", "fine-tuning iterations between decays"),
    ("freeze_prefix", _int(0, 5), "0", "blocks below this index stay frozen while fine-tuning"),
    ("shots_per_class", _int(0), "10", "labelled clips per class for fine-tuning (0: all)"),
    # introspection
    ("attention_clips", _int(1), "1", "held-out clips exported by the attention command"),
)

# keys each subcommand reads, in display order
_COMMON = ("seed", "out_dir")
_PIPELINE = ("scale", "block_widths", "modality", "clip_length", "resize", "crop", "flip_probability")
_PRETEXT = (
    "task", "rotations", "regression_norm", "regress_samples", "batch_size", "iterations", "lr_initial",
    "lr_decay_factor", "lr_decay_every", "momentum", "weight_decay", "checkpoint_every", "eval_every",
)
_TRANSFER = (
    "ft_batch_size", "ft_iterations", "ft_epochs", "ft_lr_initial", "ft_lr_decay_factor", "ft_lr_decay_every",
    "freeze_prefix", "shots_per_class", "momentum", "weight_decay", "checkpoint_every", "eval_every",
)
_SYNTH = (
    "synth_train_per_class", "synth_test_per_class", "synth_frames", "synth_size", "synth_channels",
    "synth_classes", "synth_cue_strength", "synth_particles", "synth_noise",
)


def _uniq(*groups) -> tuple:
    out = []
    for g in groups:
        for k in g:
            if k not in out:
                out.append(k)
    return tuple(out)


COMMAND_KEYS: dict[str, tuple] = {
    "gen-data": _uniq(("seed", "data_dir"), _SYNTH),
    "pretrain": _uniq(_COMMON, ("data_dir",), _PIPELINE, _PRETEXT),
    "finetune": _uniq(_COMMON, ("data_dir",), _PIPELINE, _TRANSFER),
    "eval": _uniq(("out_dir", "data_dir"), ("resize", "crop", "clip_length")),
    "ablate": _uniq(_COMMON, ("data_dir",), _PIPELINE, _PRETEXT, _TRANSFER),
    "attention": _uniq(("out_dir", "data_dir"), ("resize", "crop", "clip_length", "modality", "attention_clips")),
    "kernels": ("out_dir",),
}


@dataclass
class Config:
    values: dict = field(default_factory=dict)
    origin: dict = field(default_factory=dict)  # key -> "file:line" or "override"

    def __getitem__(self, key: str):
        if key not in KEYS:
            raise UnknownKeyError(f"unknown config key {key!r}")
        return self.values[key]

    def data_root(self) -> Path:
        root = self.values["data_dir"] or os.environ.get(DATA_DIR_ENV, "")
        if not root:
            raise MissingKeyError(f"data_dir: not set in the config and ${DATA_DIR_ENV} is empty")
        return Path(root)

    def synth_spec(self) -> SynthSpec:
        v = self.values
        return SynthSpec(
            seed=v["seed"],
            clips_per_class=v["synth_train_per_class"],
            frames=v["synth_frames"],
            height=v["synth_size"],
            width=v["synth_size"],
            classes=v["synth_classes"],
            cue_strength=v["synth_cue_strength"],
            channels=int(v["synth_channels"]),
            particles=v["synth_particles"],
            noise=v["synth_noise"],
        )

    def _shared(self) -> dict:
        v = self.values
        return dict(
            seed=v["seed"],
            modality=v["modality"],
            clip_length=v["clip_length"],
            resize=v["resize"],
            crop=v["crop"],
            flip_probability=v["flip_probability"],
            momentum=v["momentum"],
            weight_decay=v["weight_decay"],
            block_widths=v["block_widths"],
            scale=v["scale"],
            checkpoint_every=v["checkpoint_every"],
            eval_every=v["eval_every"],
            rotations=v["rotations"],
        )

    def pretext_config(self, out_dir: str | None = None) -> TrainConfig:
        v = self.values
        return TrainConfig(
            **self._shared(),
            task=v["task"],
            batch_size=v["batch_size"],
            iterations=v["iterations"],
            lr_initial=v["lr_initial"],
            lr_decay_factor=v["lr_decay_factor"],
            lr_decay_every=v["lr_decay_every"],
            regression_norm=v["regression_norm"],
            regress_samples=v["regress_samples"],
            out_dir=out_dir,
        )

    def transfer_config(self, out_dir: str | None = None) -> TrainConfig:
        v = self.values
        return TrainConfig(
            **self._shared(),
            task="transfer",
            batch_size=v["ft_batch_size"],
            iterations=v["ft_iterations"],
            epochs=v["ft_epochs"],
            lr_initial=v["ft_lr_initial"],
            lr_decay_factor=v["ft_lr_decay_factor"],
            lr_decay_every=v["ft_lr_decay_every"],
            freeze_prefix=v["freeze_prefix"],
            out_dir=out_dir,
        )


def _split(line: str, where: str) -> tuple[str, str]:
    key, sep, raw = line.partition("=")
    if not sep or not key.strip():
        raise MalformedValueError(f"{where}: expected key=value, got {line.strip()!r}")
    return key.strip(), raw.strip()


def _apply(values: dict, origin: dict, key: str, raw: str, where: str) -> None:
    spec = KEYS.get(key)
    if spec is None:
        raise UnknownKeyError(f"{where}: unknown key {key!r}")
    try:
        values[key] = spec.parse(raw)
    except ValueError as e:
        raise MalformedValueError(f"{where}: {key}={raw!r}: {e}") from None
    origin[key] = where


def _lines(text: str) -> Iterable[tuple[int, str]]:
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if line:
            yield lineno, line


def defaults() -> Config:
    values = {k: spec.parse(spec.default) for k, spec in KEYS.items()}
    return Config(values, {k: "default" for k in KEYS})


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return resources.files("rotpretext").joinpath("presets", f"{name}.cfg").read_text(encoding="utf-8")


def resolve_config_path(ref: str | os.PathLike | None):
    """A file path, or the bare name of a shipped preset."""
    if ref is None:
        return None
    p = Path(ref)
    if p.exists() or str(ref) not in PRESETS:
        return p
    return str(ref)


def parse_config_text(text: str, source: str = "<config>", overrides: Iterable[str] = ()) -> Config:
    cfg = defaults()
    for lineno, line in _lines(text):
        key, raw = _split(line, f"{source}:{lineno}")
        _apply(cfg.values, cfg.origin, key, raw, f"{source}:{lineno}")
    for i, item in enumerate(overrides, 1):
        key, raw = _split(item, f"override {i}")
        _apply(cfg.values, cfg.origin, key, raw, f"override {i}")
    _check_consistency(cfg)
    return cfg


def parse_config(path=None, overrides: Iterable[str] = ()) -> Config:
    """Defaults, then the file (a path or a preset name), then ``overrides``."""
    ref = resolve_config_path(path)
    if ref is None:
        return parse_config_text("", "<defaults>", overrides)
    if isinstance(ref, str):
        return parse_config_text(preset_text(ref), f"{ref}.cfg", overrides)
    try:
        text = ref.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"{ref}: cannot read config ({e.strerror})") from None
    return parse_config_text(text, str(ref), overrides)


def _check_consistency(cfg: Config) -> None:
    v = cfg.values
    if v["crop"] > v["resize"]:
        raise MalformedValueError(f"{cfg.origin['crop']}: crop={v['crop']} exceeds resize={v['resize']}")
    if v["task"] == "pretext_classify" and v["rotations"].k < 2:
        raise MalformedValueError(f"{cfg.origin['rotations']}: classification needs at least two rotations")


def render(cfg: Config, keys: Iterable[str] | None = None) -> str:
    """Config file text for ``keys`` (all by default), one documented line each."""
    out = []
    for k in keys or KEYS:
        val = cfg.values[k]
        if isinstance(val, tuple):
            text = ",".join(str(x) for x in val)
        elif val is None:
            text = "none"
        else:
            text = str(val)
        out.append(f"# {KEYS[k].doc}\n{k}={text}")
    return "\n".join(out) + "\n"


def describe_keys(command: str) -> str:
    lines = []
    for k in COMMAND_KEYS[command]:
        spec = KEYS[k]
        lines.append(f"  {k} ({spec.parse.kind if hasattr(spec.parse, 'kind') else 'str'}, default {spec.default or '-'}): {spec.doc}")
    return "\n".join(lines)


def as_mapping(cfg: Config) -> Mapping[str, Any]:
    return dict(cfg.values)
