"""Pretext-initialised versus scratch fine-tuning over several seeds.

Renders the desk dataset (optionally with other synth settings), pretrains one
rotation model per seed, then fine-tunes it and a fresh network on the same
few-shot split with the same schedule. Prints one line per seed and the median
gain. Extra ``key=value`` arguments override the desk preset, e.g.::

    python scripts/transfer_seeds.py --seeds 0,1,2 synth_cue_strength=0.3
"""
import argparse
import dataclasses
import statistics
import tempfile
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from rotpretext import config as C
from rotpretext.evaluation import few_shot_subset, rotation_accuracy, top1_accuracy
from rotpretext.synth import generate_synthetic_dataset
from rotpretext.training import finetune, pretrain
from rotpretext.video import read_index


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("overrides", nargs="*", metavar="KEY=VALUE")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--data", help="reuse or create the dataset here instead of a temp dir")
    args = ap.parse_args()

    cfg = C.parse_config("desk", args.overrides)
    root = Path(args.data or tempfile.mkdtemp(prefix="rotpretext_"))
    spec = cfg.synth_spec()
    if not (root / "train" / "index.tsv").exists():
        generate_synthetic_dataset(spec, root, "train")
        generate_synthetic_dataset(dataclasses.replace(spec, clips_per_class=cfg["synth_test_per_class"]), root, "test")
    train = read_index(root / "train" / "index.tsv")
    test = read_index(root / "test" / "index.tsv", split="test")

    gains = []
    for seed in (int(s) for s in args.seeds.split(",")):
        t0 = time.perf_counter()
        pcfg = dataclasses.replace(cfg.pretext_config(), seed=seed)
        fcfg = dataclasses.replace(cfg.transfer_config(), seed=seed)
        model, _ = pretrain(pcfg, train.unlabeled())
        rot = rotation_accuracy(model, test.unlabeled(), pcfg)
        few = few_shot_subset(train, cfg["shots_per_class"], seed) if cfg["shots_per_class"] else train
        pre = top1_accuracy(finetune(fcfg, model, few)[0], test, fcfg)
        scratch = top1_accuracy(finetune(fcfg, None, few)[0], test, fcfg)
        gains.append(pre - scratch)
        print(f"seed {seed}: rotation {rot:.3f}  pretrained {pre:.3f}  scratch {scratch:.3f}  "
              f"gain {pre - scratch:+.3f}  ({time.perf_counter() - t0:.0f}s)", flush=True)
    print(f"median gain {statistics.median(gains):+.3f} over {len(gains)} seeds")


if __name__ == "__main__":
    with threadpool_limits(1):
        main()
