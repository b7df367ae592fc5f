import ast
import inspect
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rotpretext import training
from rotpretext.network import forward
from rotpretext.rotation import RotationSet
from rotpretext.training import (
    LogRecord,
    RunLog,
    TrainConfig,
    TrainState,
    batch_indices,
    finetune,
    init_pretext_state,
    load_train_state,
    lr_at_iteration,
    prepare_clip,
    pretrain,
    pretrain_step,
    save_train_state,
    steps_per_epoch,
)
from rotpretext.video import UnlabeledDataset, VideoClip, save_clip


def tiny(**kw):
    """Small fast desk configuration for loop tests."""
    base = dict(batch_size=2, iterations=4, clip_length=4, resize=20, crop=16, lr_initial=0.05)
    base.update(kw)
    return TrainConfig(**base)


def random_clips(n, seed=0, frames=4, size=16):
    g = np.random.default_rng(seed)
    return [VideoClip(g.uniform(size=(1, frames, size, size)).astype(np.float32)) for _ in range(n)]


def on_disk(root, clips):
    for i, c in enumerate(clips):
        save_clip(c, Path(root) / f"c{i}.rvc")
    return UnlabeledDataset(root, [f"c{i}.rvc" for i in range(len(clips))])


# schedule

def test_lr_schedule_examples():
    cfg = TrainConfig(lr_initial=0.1, lr_decay_factor=0.1, lr_decay_every=24000)
    assert lr_at_iteration(cfg, 0) == 0.1
    assert lr_at_iteration(cfg, 23999) == 0.1
    assert math.isclose(lr_at_iteration(cfg, 24000), 0.01)
    flat = TrainConfig(lr_decay_factor=1.0, lr_decay_every=5)
    assert {lr_at_iteration(flat, t) for t in range(50)} == {flat.lr_initial}


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-4, 1.0), st.floats(0.01, 1.0), st.integers(1, 500), st.integers(0, 5000))
def test_lr_schedule_is_step_function(lr, factor, every, t):
    cfg = TrainConfig(lr_initial=lr, lr_decay_factor=factor, lr_decay_every=every)
    assert math.isclose(lr_at_iteration(cfg, t), lr * factor ** (t // every), rel_tol=1e-12)
    assert lr_at_iteration(cfg, t + 1) <= lr_at_iteration(cfg, t)


@pytest.mark.parametrize(
    "kw", [dict(lr_initial=0), dict(lr_decay_factor=0), dict(lr_decay_factor=1.5), dict(batch_size=0),
           dict(modality="flow"), dict(task="other"), dict(rotations="0"), dict(crop=40, resize=36)],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_geometry():
    assert TrainConfig(modality="dif", clip_length=8).input_frames == 7
    assert TrainConfig(rotations="0,45,90,135,180,225,270,315").input_size == 22
    assert TrainConfig(task="pretext_regress").input_size == 22
    assert TrainConfig().input_size == 32
    assert TrainConfig(epochs=2, iterations=10**6, batch_size=8).total_iterations(20) == 6


# batching

@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(1, 9), st.integers(0, 3))
def test_each_epoch_visits_every_clip(n, bs, epoch):
    cfg = TrainConfig(batch_size=bs, seed=epoch)
    per = steps_per_epoch(n, bs)
    seen = [i for s in range(per) for i in batch_indices(n, cfg, epoch * per + s)]
    assert set(seen) == set(range(n))
    assert all(len(batch_indices(n, cfg, t)) == bs for t in range(per))


def test_eval_view_is_deterministic_and_centered():
    clip = random_clips(1, frames=10, size=24)[0]
    cfg = tiny(resize=24, crop=16)
    a = prepare_clip(clip, cfg)
    np.testing.assert_array_equal(a.data, clip.data[:, 3:7, 4:20, 4:20])
    dif = prepare_clip(clip, tiny(resize=24, crop=16, modality="dif"))
    assert dif.frames == 3


# loss at init

@pytest.mark.parametrize("rots", ["0,180", "0,90,180", "0,90,180,270", "0,45,90,135,180,225,270,315"])
def test_first_step_loss_is_near_log_k(rots):
    cfg = tiny(rotations=rots, resize=32, crop=32)
    clips = [prepare_clip(c, cfg) for c in random_clips(4, frames=4, size=32)]
    state = init_pretext_state(cfg, 1)
    loss, _ = pretrain_step(state, clips, cfg, lr=0.0)
    k = RotationSet.parse(rots).k
    assert abs(loss - math.log(k)) < 0.2


def test_zero_lr_keeps_loss_fixed():
    cfg = tiny()
    clips = [prepare_clip(c, cfg) for c in random_clips(2)]
    state = init_pretext_state(cfg, 1)
    # batch statistics drift the running stats but not the train-mode loss
    losses = [pretrain_step(state, clips, cfg, lr=0.0)[0] for _ in range(3)]
    assert losses[0] == losses[1] == losses[2]


# loops

def test_single_clip_overfits(tmp_path):
    ds = on_disk(tmp_path, random_clips(1, frames=4))
    cfg = tiny(batch_size=1, iterations=150, flip_probability=0.0, resize=16, crop=16, lr_initial=0.05)
    _, log_ = pretrain(cfg, ds)
    assert log_.records[-1].loss < 0.01


def test_loss_drops_on_small_set(small_synth):
    train, _ = small_synth
    cfg = tiny(batch_size=4, iterations=200, clip_length=8, resize=36, crop=32, lr_initial=0.05)
    sub = train.unlabeled().subset(range(0, 24, 1))
    _, log_ = pretrain(cfg, sub)
    assert log_.records[-1].loss < log_.records[0].loss


@pytest.mark.parametrize("task", ["pretext_classify", "pretext_regress"])
def test_overfit_capacity_per_task(task, tmp_path):
    ds = on_disk(tmp_path, random_clips(2, frames=4, size=16))
    cfg = tiny(task=task, batch_size=2, iterations=300, flip_probability=0.0, resize=16, crop=16,
               lr_initial=0.02, regress_samples=2, rotations="0,90,180,270")
    _, log_ = pretrain(cfg, ds)
    assert log_.records[-1].loss < 0.05


def test_transfer_overfit(small_synth):
    train, _ = small_synth
    few = train.subset([0, 6, 12, 18])
    cfg = tiny(task="transfer", batch_size=4, iterations=150, clip_length=8, resize=32, crop=32,
               flip_probability=0.0, lr_initial=0.05)
    _, log_ = finetune(cfg, None, few)
    assert log_.records[-1].loss < 0.05


def test_log_lr_matches_schedule(tmp_path):
    ds = on_disk(tmp_path, random_clips(3))
    cfg = tiny(iterations=7, lr_decay_every=3, lr_decay_factor=0.5)
    _, log_ = pretrain(cfg, ds)
    assert [r.iter for r in log_.records] == list(range(1, 8))
    for r in log_.records:
        assert r.lr == lr_at_iteration(cfg, r.iter - 1)


def test_same_config_gives_identical_checkpoints(tmp_path):
    ds = on_disk(tmp_path / "data", random_clips(5))
    for name in ("a", "b"):
        pretrain(tiny(iterations=3, out_dir=str(tmp_path / name), checkpoint_every=3), ds)
    assert (tmp_path / "a/last.rpck").read_bytes() == (tmp_path / "b/last.rpck").read_bytes()
    assert (tmp_path / "a/ckpt_0000003.rpck").exists()


def test_resume_matches_uninterrupted(tmp_path):
    ds = on_disk(tmp_path / "data", random_clips(5))
    cfg = tiny(iterations=6)
    full, _ = pretrain(cfg, ds)

    half_cfg = tiny(iterations=6, out_dir=str(tmp_path), checkpoint_every=3)
    pretrain(half_cfg, ds, iterations=3)
    state = load_train_state(tmp_path / "last.rpck")
    assert state.iteration == 3 and state.velocity
    resumed, _ = pretrain(cfg, ds, state=state)
    for k, v in full.state_dict().items():
        assert resumed.state_dict()[k].tobytes() == v.tobytes(), k


def test_train_state_roundtrip(tmp_path):
    cfg = tiny()
    state = init_pretext_state(cfg, 1)
    state.velocity = {"b0.conv.w": np.ones_like(state.model.params["b0.conv.w"].data)}
    state.iteration = 17
    save_train_state(state, tmp_path / "s.rpck", cfg)
    back = load_train_state(tmp_path / "s.rpck")
    assert back.iteration == 17
    np.testing.assert_array_equal(back.velocity["b0.conv.w"], state.velocity["b0.conv.w"])


def test_zero_iteration_finetune_only_swaps_head(small_synth):
    train, _ = small_synth
    cfg = tiny(clip_length=8, resize=36, crop=32)
    pre, _ = pretrain(cfg, train.unlabeled(), iterations=1)
    tuned, log_ = finetune(tiny(task="transfer", iterations=0, clip_length=8, resize=36, crop=32), pre, train)
    assert log_.records == []
    for k, v in pre.state_dict().items():
        if not k.startswith("head."):
            assert tuned.state_dict()[k].tobytes() == v.tobytes()
    assert set(n for n in tuned.params if n.startswith("head.")) == {"head.fc.w", "head.fc.b"}


def test_finetune_does_not_mutate_pretrained(small_synth):
    train, _ = small_synth
    cfg = tiny(clip_length=8, resize=36, crop=32)
    pre, _ = pretrain(cfg, train.unlabeled(), iterations=1)
    before = {k: v.copy() for k, v in pre.state_dict().items()}
    finetune(tiny(task="transfer", iterations=2, clip_length=8, resize=36, crop=32), pre, train)
    for k, v in pre.state_dict().items():
        assert v.tobytes() == before[k].tobytes()


def test_finetune_class_count_mismatch(small_synth):
    train, _ = small_synth
    cfg = tiny(task="transfer", clip_length=8, resize=36, crop=32)
    model, _ = finetune(cfg, None, train.subset([0, 6, 12, 18]), )
    state = TrainState(model)
    three = train.subset([0, 6, 12])
    three.class_count = 3
    with pytest.raises(ValueError, match="classes"):
        finetune(cfg, None, three, state=state)


# self-supervision purity

def test_pretrain_refuses_labelled_data(small_synth):
    train, _ = small_synth
    with pytest.raises(TypeError):
        pretrain(tiny(), train)


def test_unlabeled_view_has_no_labels(small_synth):
    train, _ = small_synth
    view = train.unlabeled()
    assert not hasattr(view, "labels") and not hasattr(view, "items")


def test_pretrain_path_never_names_labels():
    """Structural check: the pretext loop and its helpers never mention a label attribute."""
    funcs = [training.pretrain, training.pretrain_step, training._augmented, training.rotated_batch,
             training.batch_indices, training.prepare_clip, training.init_pretext_state]
    for fn in funcs:
        tree = ast.parse(inspect.cleandoc("\n" + inspect.getsource(fn)))
        names = {n.attr for n in ast.walk(tree) if isinstance(n, ast.Attribute)}
        names |= {n.id for n in ast.walk(tree) if isinstance(n, ast.Name)}
        assert not {"labels", "items", "LabeledDataset"} & names, fn.__name__


# run log

def test_runlog_invariants(tmp_path):
    log_ = RunLog()
    log_.append(LogRecord(1, 0.5, 0.1, 0.25, float("nan"), 0.1))
    with pytest.raises(ValueError):
        log_.append(LogRecord(1, 0.4, 0.1, 0.25, float("nan"), 0.2))
    with pytest.raises(FloatingPointError):
        log_.append(LogRecord(2, float("inf"), 0.1, 0.25, float("nan"), 0.2))
    log_.append(LogRecord(2, 0.25, 0.01, 0.5, 0.75, 0.3))
    log_.write_csv(tmp_path / "log.csv")
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == "iter,loss,lr,train_acc,eval_acc,seconds"
    back = RunLog.read_csv(tmp_path / "log.csv")
    assert [r.loss for r in back.records] == [0.5, 0.25]
    assert back.last_eval() == 0.75


def test_eval_callback_is_logged(tmp_path):
    ds = on_disk(tmp_path, random_clips(3))
    calls = []
    _, log_ = pretrain(tiny(iterations=4, eval_every=2), ds, evaluate=lambda m: calls.append(1) or 0.5)
    assert len(calls) == 2
    assert [r.eval_acc == 0.5 for r in log_.records] == [False, True, False, True]
