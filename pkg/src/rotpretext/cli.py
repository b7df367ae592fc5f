"""``rotpretext`` command line.

Every subcommand reads the same flat config (``--config`` file or preset name,
then ``--set key=value`` overrides). Failures print one line to stderr::

    error: <kind>: <message>

with exit status 1 for runtime failures and 2 for usage or config mistakes.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import config as C
from .evaluation import (
    AblationRun,
    export_attention_pgm,
    export_kernels_pgm,
    few_shot_subset,
    fuse_predictions,
    predict_actions,
    predict_rotations,
    read_results,
    summarize,
    ablate,
)
from .network import load_model
from .synth import generate_synthetic_dataset
from .training import TrainConfig, TrainState, finetune, prepare_clip, pretrain, save_train_state
from .video import INDEX_NAME, LabeledDataset, read_index

log = logging.getLogger("rotpretext")

COMMANDS = ("gen-data", "pretrain", "finetune", "eval", "ablate", "attention", "kernels")

ROTATION_MATRIX = ("0,90", "0,90,180", "0,90,180,270", "90,180,270")
CLIP_MATRIX = tuple((n, m) for n in (8, 16) for m in ("rgb", "dif"))


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: usage: {message}", file=sys.stderr)
        sys.exit(2)


# data


def load_split(cfg: C.Config, split: str) -> LabeledDataset:
    path = cfg.data_root() / split / INDEX_NAME
    if not path.exists():
        raise FileNotFoundError(f"no dataset index at {path} (run gen-data or set data_dir)")
    return read_index(path, split=split)


def _maybe_split(cfg, split):
    try:
        return load_split(cfg, split)
    except FileNotFoundError:
        return None


def _out(cfg: C.Config, *parts) -> Path:
    p = Path(cfg["out_dir"]).joinpath(*parts)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _config_for_checkpoint(cfg: C.Config, meta: dict) -> TrainConfig:
    """Evaluation view for a saved model; input settings recorded in the file win over the config."""
    base = cfg.transfer_config()
    kw = {}
    if "modality" in meta:
        kw["modality"] = meta["modality"]
    if "clip_length" in meta:
        kw["clip_length"] = int(meta["clip_length"])
    if meta.get("task", "").startswith("pretext"):
        kw["task"] = meta["task"]
        kw["rotations"] = meta.get("rotations", str(base.rotations))
    return dataclasses.replace(base, **kw)


# subcommands


def cmd_gen_data(cfg: C.Config, args) -> int:
    spec = cfg.synth_spec()
    root = cfg.data_root()
    train = generate_synthetic_dataset(spec, root, "train")
    test = generate_synthetic_dataset(dataclasses.replace(spec, clips_per_class=cfg["synth_test_per_class"]), root, "test")
    print(f"wrote {len(train)} train and {len(test)} test clips under {root}")
    return 0


def _pretrain(cfg: C.Config, out: Path):
    train = load_split(cfg, "train")
    test = _maybe_split(cfg, "test")
    pcfg = cfg.pretext_config(str(out))
    evaluate = None
    if test is not None and pcfg.task == "pretext_classify":
        held_out = test.unlabeled()
        evaluate = lambda m: predict_rotations(m, held_out, pcfg).accuracy()  # noqa: E731
    model, run_log = pretrain(pcfg, train.unlabeled(), evaluate=evaluate)
    save_train_state(TrainState(model, iteration=pcfg.total_iterations(len(train))), out / "model.rpck", pcfg)
    return model, run_log


def cmd_pretrain(cfg: C.Config, args) -> int:
    out = _out(cfg, "pretrain")
    _, run_log = _pretrain(cfg, out)
    last = run_log.records[-1] if run_log.records else None
    msg = f"saved {out / 'model.rpck'}"
    if last is not None:
        msg += f" loss={last.loss:.4f} held_out_rotation_acc={last.eval_acc:.4f}"
    print(msg)
    return 0


def _finetune(cfg: C.Config, init, out: Path):
    train = load_split(cfg, "train")
    test = _maybe_split(cfg, "test")
    fcfg = cfg.transfer_config(str(out))
    data = few_shot_subset(train, cfg["shots_per_class"], cfg["seed"]) if cfg["shots_per_class"] else train
    evaluate = None
    if test is not None:
        evaluate = lambda m: predict_actions(m, test, fcfg).accuracy()  # noqa: E731
    model, run_log = finetune(fcfg, init, data, evaluate=evaluate)
    save_train_state(TrainState(model, iteration=fcfg.total_iterations(len(data))), out / "model.rpck", fcfg)
    return model, run_log


def cmd_finetune(cfg: C.Config, args) -> int:
    init = None
    if args.init:
        init, _, _ = load_model(args.init)
    out = _out(cfg, "finetune" if init is not None else "scratch")
    _, run_log = _finetune(cfg, init, out)
    last = run_log.records[-1] if run_log.records else None
    msg = f"saved {out / 'model.rpck'}"
    if last is not None:
        msg += f" loss={last.loss:.4f} held_out_top1={last.eval_acc:.4f}"
    print(msg)
    return 0


def _predictions(cfg, path, test):
    model, _, meta = load_model(path)
    tcfg = _config_for_checkpoint(cfg, meta)
    if model.spec.head == "pretext":
        return "rotation_accuracy", predict_rotations(model, test.unlabeled(), tcfg)
    return "top1_accuracy", predict_actions(model, test, tcfg)


def cmd_eval(cfg: C.Config, args) -> int:
    test = load_split(cfg, args.split)
    name, ps = _predictions(cfg, args.model, test)
    print(f"{name}={ps.accuracy():.6f} clips={len(test)}")
    if args.fuse:
        other_name, other = _predictions(cfg, args.fuse, test)
        if other_name != name or name != "top1_accuracy":
            raise UsageError("--fuse needs two action models")
        print(f"fused_top1_accuracy={fuse_predictions(ps, other).accuracy():.6f}")
    return 0


def ablation_runs(cfg: C.Config, matrix: str) -> list[AblationRun]:
    base_p, base_t = cfg.pretext_config(), cfg.transfer_config()
    runs = []
    if matrix == "rotations":
        for rot in ROTATION_MATRIX:
            p = dataclasses.replace(base_p, rotations=rot)
            t = dataclasses.replace(base_t, rotations=rot)
            runs.append(AblationRun(f"rot_{rot.replace(',', '-')}_s{cfg['seed']}", p, t))
    elif matrix == "clip_length":
        for length, modality in CLIP_MATRIX:
            p = dataclasses.replace(base_p, clip_length=length, modality=modality)
            t = dataclasses.replace(base_t, clip_length=length, modality=modality)
            runs.append(AblationRun(f"len{length}_{modality}_s{cfg['seed']}", p, t))
    else:
        raise UsageError(f"unknown matrix {matrix!r}")
    return runs


def cmd_ablate(cfg: C.Config, args) -> int:
    train = load_split(cfg, "train")
    test = _maybe_split(cfg, "test")
    few = few_shot_subset(train, cfg["shots_per_class"], cfg["seed"]) if cfg["shots_per_class"] else train
    out = _out(cfg) / f"ablation_{args.matrix}.csv"
    runs = ablation_runs(cfg, args.matrix)
    ablate(runs, train.unlabeled(), out, few, test, test.unlabeled() if test is not None else None)
    rows = read_results(out)
    print(summarize(rows, "pretext_acc"))
    print(summarize(rows, "transfer_acc"))
    print(f"results in {out}")
    return 0


def cmd_attention(cfg: C.Config, args) -> int:
    model, _, meta = load_model(args.model)
    tcfg = _config_for_checkpoint(cfg, meta)
    test = load_split(cfg, args.split)
    n = min(cfg["attention_clips"], len(test))
    for i in range(n):
        clip = prepare_clip(test.load(i), tcfg)
        paths = export_attention_pgm(model, clip, _out(cfg, "attention", f"clip_{i:03d}"))
        print(f"clip {i}: {len(paths)} maps in {paths[0].parent}")
    return 0


def cmd_kernels(cfg: C.Config, args) -> int:
    model, _, _ = load_model(args.model)
    paths = export_kernels_pgm(model, _out(cfg, "kernels"))
    print(f"{len(paths)} kernel slices in {paths[0].parent}")
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "attention": cmd_attention,
    "kernels": cmd_kernels,
}

SUMMARIES = {
    "gen-data": "render the synthetic action dataset (train and test splits)",
    "pretrain": "train the rotation pretext task on unlabelled clips",
    "finetune": "train an action classifier, from --init or from scratch",
    "eval": "score a saved model on held-out clips, optionally fused with a second one",
    "ablate": "run a rotation-set or clip-length matrix and append rows to a CSV",
    "attention": "export first-block attention maps of held-out clips as PGM",
    "kernels": "export first-layer kernels as PGM",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"config file, or a preset name ({', '.join(C.PRESETS)}); default: desk")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable, wins over the file)")
    common.add_argument("--seed", type=int, help="shortcut for --set seed=N")
    common.add_argument("--threads", type=int, default=None, help="cap BLAS threads; 1 gives bit-reproducible runs")
    common.add_argument("-v", "--verbose", action="store_true", help="log training progress")

    parser = _Parser(prog="rotpretext", description="Rotation-prediction pretraining for video clips.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name in COMMANDS:
        p = sub.add_parser(
            name,
            parents=[common],
            help=SUMMARIES[name],
            description=SUMMARIES[name],
            epilog="config keys read by this command:\n" + C.describe_keys(name),
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        if name == "finetune":
            p.add_argument("--init", help="pretrained checkpoint; omit to train from scratch")
        if name in ("eval", "attention", "kernels"):
            p.add_argument("--model", required=True, help="checkpoint to load")
        if name in ("eval", "attention"):
            p.add_argument("--split", default="test", help="dataset split to read (default: test)")
        if name == "eval":
            p.add_argument("--fuse", help="second action model whose probabilities are fused by geometric mean")
        if name == "ablate":
            p.add_argument("--matrix", required=True, choices=("rotations", "clip_length"))
    return parser


def load_config(args) -> C.Config:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return C.parse_config(args.config or "desk", overrides)


def _fail(kind: str, msg: str, code: int) -> int:
    print(f"error: {kind}: {' '.join(str(msg).split())}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads is not None and args.threads < 1:
        return _fail("usage", "--threads must be >= 1", 2)
    try:
        cfg = load_config(args)
    except C.UnknownKeyError as e:
        return _fail("unknown-key", e, 2)
    except C.MalformedValueError as e:
        return _fail("bad-value", e, 2)
    except C.ConfigError as e:
        return _fail("config", e, 2)
    limit = threadpool_limits(args.threads) if args.threads else nullcontext()
    try:
        with limit:
            return HANDLERS[args.command](cfg, args)
    except UsageError as e:
        return _fail("usage", e, 2)
    except C.MissingKeyError as e:
        return _fail("missing-key", e, 2)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        return _fail("io", e, 1)
    except Exception as e:  # surfaced as one line; --verbose keeps the traceback in the log
        log.info("traceback", exc_info=True)
        return _fail(type(e).__name__, e, 1)


if __name__ == "__main__":
    sys.exit(main())
