import csv
import re
import subprocess
import sys

import pytest

from rotpretext import cli
from rotpretext import config as C
from rotpretext.rotation import RotationSet
from rotpretext.video import read_index

TINY = [
    "synth_train_per_class=3", "synth_test_per_class=2", "synth_frames=10", "synth_size=24",
    "clip_length=8", "batch_size=2", "iterations=2", "ft_batch_size=2", "ft_iterations=2", "shots_per_class=2",
]


def sets(*items):
    out = []
    for it in items:
        out += ["--set", it]
    return out


def run(capsys, *argv):
    code = cli.main(list(argv))
    cap = capsys.readouterr()
    return code, cap.out, cap.err


# config parsing


def test_empty_file_equals_desk_preset(tmp_path):
    f = tmp_path / "empty.cfg"
    f.write_text("# nothing set\n\n")
    assert C.parse_config(f).values == C.parse_config("desk").values == C.defaults().values


def test_desk_preset_spells_out_every_key():
    keys = {line.split("=", 1)[0] for _, line in C._lines(C.preset_text("desk"))}
    assert keys == set(C.KEYS)


def test_full_scale_preset_parses():
    cfg = C.parse_config("paper_scale")
    assert cfg["scale"] == "paper" and cfg["crop"] == 112 and cfg["batch_size"] == 32
    assert cfg["lr_initial"] == 0.1 and cfg["ft_lr_initial"] == 0.008


def test_rotations_value_parses_to_set():
    cfg = C.parse_config_text("rotations=0,90,180,270\n")
    assert isinstance(cfg["rotations"], RotationSet) and cfg["rotations"].k == 4


@pytest.mark.parametrize(
    "text, err, where",
    [
        ("seed=1\nlr_intial=0.1\n", C.UnknownKeyError, "x.cfg:2"),
        ("lr_initial=-1\n", C.MalformedValueError, "x.cfg:1"),
        ("\n\nbatch_size=two\n", C.MalformedValueError, "x.cfg:3"),
        ("just some words\n", C.MalformedValueError, "x.cfg:1"),
        ("rotations=0,0\n", C.MalformedValueError, "x.cfg:1"),
        ("crop=40\n", C.MalformedValueError, "x.cfg:1"),
    ],
)
def test_diagnostics_name_line(text, err, where):
    with pytest.raises(err) as info:
        C.parse_config_text(text, "x.cfg")
    assert str(info.value).startswith(where)
    assert "\n" not in str(info.value)


def test_range_error_names_key():
    with pytest.raises(C.MalformedValueError, match="lr_initial"):
        C.parse_config_text("lr_initial=-1\n")


def test_missing_data_dir(monkeypatch):
    monkeypatch.delenv(C.DATA_DIR_ENV, raising=False)
    with pytest.raises(C.MissingKeyError, match="data_dir"):
        C.defaults().data_root()
    monkeypatch.setenv(C.DATA_DIR_ENV, "/some/where")
    assert str(C.defaults().data_root()) == "/some/where"


def test_overrides_win_over_file(tmp_path):
    f = tmp_path / "a.cfg"
    f.write_text("seed=3\niterations=7\n")
    cfg = C.parse_config(f, ["seed=9"])
    assert cfg["seed"] == 9 and cfg["iterations"] == 7
    assert cfg.origin["seed"] == "override 1" and cfg.origin["iterations"].endswith("a.cfg:2")


def test_unknown_override_is_rejected():
    with pytest.raises(C.UnknownKeyError, match="override 1"):
        C.parse_config(None, ["sede=3"])


def test_render_roundtrip():
    cfg = C.parse_config_text("seed=4\nft_epochs=3\nrotations=0,180\n")
    again = C.parse_config_text(C.render(cfg))
    assert again.values == cfg.values


def test_typed_views():
    cfg = C.parse_config_text("modality=dif\nfreeze_prefix=2\nft_lr_initial=0.02\n")
    p, t = cfg.pretext_config(), cfg.transfer_config()
    assert p.task == "pretext_classify" and p.modality == "dif" and p.lr_initial == cfg["lr_initial"]
    assert t.task == "transfer" and t.freeze_prefix == 2 and t.lr_initial == 0.02
    assert cfg.synth_spec().clips_per_class == cfg["synth_train_per_class"]


def test_every_consumed_key_is_documented():
    for cmd, keys in C.COMMAND_KEYS.items():
        assert set(keys) <= set(C.KEYS), cmd
    assert all(k.doc for k in C.KEYS.values())


# command line


@pytest.mark.parametrize("command", cli.COMMANDS)
def test_help_lists_consumed_keys(command, capsys):
    with pytest.raises(SystemExit) as info:
        cli.main([command, "--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    for key in C.COMMAND_KEYS[command]:
        assert re.search(rf"^\s+{key} \(", out, re.M), key


def test_unknown_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["frobnicate"])
    assert info.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_bad_config_is_one_line(capsys, tmp_path):
    code, _, err = run(capsys, "kernels", "--model", "x", *sets("bogus=1"))
    assert code == 2
    assert err.count("\n") == 1 and err.startswith("error: unknown-key: override 1")
    code, _, err = run(capsys, "kernels", "--model", "x", *sets("lr_initial=0"))
    assert code == 2 and err.startswith("error: bad-value:")


def test_missing_data_dir_exit_code(capsys, monkeypatch, tmp_path):
    monkeypatch.delenv(C.DATA_DIR_ENV, raising=False)
    code, _, err = run(capsys, "gen-data", *sets(f"out_dir={tmp_path}"))
    assert code == 2 and err.startswith("error: missing-key: data_dir")


def test_runtime_failure_exit_1(capsys, tmp_path):
    code, _, err = run(capsys, "kernels", "--model", str(tmp_path / "absent.rpck"), *sets(f"out_dir={tmp_path}"))
    assert code == 1 and err.startswith("error: ") and err.count("\n") == 1


def test_missing_dataset_exit_1(capsys, tmp_path):
    code, _, err = run(capsys, "pretrain", *sets(f"data_dir={tmp_path / 'nope'}", f"out_dir={tmp_path}"))
    assert code == 1 and "error: io:" in err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    args = sets(f"data_dir={root / 'data'}", f"out_dir={root / 'out'}", *TINY)
    assert cli.main(["gen-data", *args]) == 0
    assert cli.main(["pretrain", "--threads", "1", *args]) == 0
    return root, args


def test_gen_data_writes_index(workspace):
    root, _ = workspace
    train = read_index(root / "data" / "train" / "index.tsv")
    test = read_index(root / "data" / "test" / "index.tsv")
    assert len(train) == 12 and len(test) == 8
    assert all(train.path(i).exists() for i in range(len(train)))


def test_data_dir_from_environment(workspace, monkeypatch, capsys, tmp_path):
    monkeypatch.setenv(C.DATA_DIR_ENV, str(tmp_path))
    code, out, _ = run(capsys, "gen-data", *sets(*TINY))
    assert code == 0 and (tmp_path / "train" / "index.tsv").exists()


def test_pretrain_then_finetune(workspace, capsys):
    root, args = workspace
    ckpt = root / "out" / "pretrain" / "model.rpck"
    assert ckpt.exists() and (root / "out" / "pretrain" / "pretrain_log.csv").exists()
    code, out, _ = run(capsys, "finetune", "--init", str(ckpt), *args)
    assert code == 0 and "held_out_top1" in out
    log_path = root / "out" / "finetune" / "finetune_log.csv"
    with log_path.open() as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["iter"]) for r in rows] == [1, 2]


def test_eval_and_fuse(workspace, capsys):
    root, args = workspace
    code, out, _ = run(capsys, "eval", "--model", str(root / "out" / "pretrain" / "model.rpck"), *args)
    assert code == 0 and re.match(r"rotation_accuracy=\d\.\d{6} clips=8", out)
    assert run(capsys, "finetune", *args)[0] == 0
    scratch = root / "out" / "scratch" / "model.rpck"
    code, out, _ = run(capsys, "eval", "--model", str(scratch), "--fuse", str(scratch), *args)
    lines = out.splitlines()
    assert code == 0 and lines[0].startswith("top1_accuracy=")
    assert lines[1] == "fused_" + lines[0].split(" ")[0]
    code, _, err = run(capsys, "eval", "--model", str(scratch), "--fuse", str(root / "out" / "pretrain" / "model.rpck"), *args)
    assert code == 2 and err.startswith("error: usage:")


def test_seed_rerun_is_identical(workspace, capsys, tmp_path):
    root, args = workspace
    outs = []
    for name in ("a", "b"):
        code, _, _ = run(capsys, "pretrain", "--threads", "1", "--seed", "5", *args, *sets(f"out_dir={tmp_path / name}"))
        assert code == 0
        outs.append((tmp_path / name / "pretrain" / "model.rpck").read_bytes())
    assert outs[0] == outs[1]
    code, _, _ = run(capsys, "pretrain", "--threads", "1", "--seed", "6", *args, *sets(f"out_dir={tmp_path / 'c'}"))
    assert (tmp_path / "c" / "pretrain" / "model.rpck").read_bytes() != outs[0]


def test_introspection_exports(workspace, capsys):
    root, args = workspace
    ckpt = str(root / "out" / "pretrain" / "model.rpck")
    code, _, _ = run(capsys, "attention", "--model", ckpt, *args, *sets("attention_clips=2"))
    assert code == 0
    assert len(list((root / "out" / "attention").glob("clip_*/attn_*.pgm"))) == 2 * 8
    code, _, _ = run(capsys, "kernels", "--model", ckpt, *args)
    assert code == 0 and list((root / "out" / "kernels").glob("kernel_*.pgm"))


def test_ablate_rotation_matrix(workspace, capsys):
    root, args = workspace
    code, out, _ = run(capsys, "ablate", "--matrix", "rotations", *args, *sets("iterations=1", "ft_iterations=1"))
    assert code == 0
    with (root / "out" / "ablation_rotations.csv").open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["rotations"] for r in rows] == ["0 90", "0 90 180", "0 90 180 270", "90 180 270"]
    assert all(r["pretext_acc"] and r["transfer_acc"] for r in rows)


def test_ablate_rejects_unknown_matrix(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["ablate", "--matrix", "colours"])
    assert info.value.code == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "rotpretext", "--help"], capture_output=True, text=True, check=False)
    assert res.returncode == 0 and "pretrain" in res.stdout
