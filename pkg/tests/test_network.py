import numpy as np
import pytest

from rotpretext import functional as F
from rotpretext.gradcheck import finite_diff_grad, max_relative_error
from rotpretext.network import (
    ModelSpec,
    build_model,
    features,
    first_block_activations,
    forward,
    load_model,
    replace_head,
    residual_block,
    save_model,
    set_trainable_prefix,
)
from rotpretext.network import _stem
from rotpretext.optim import sgd_step
from rotpretext.tensor import Tensor, backward, precision


@pytest.fixture(scope="module")
def desk():
    return build_model(ModelSpec.desk(), seed=0)


def desk_batch(n, seed=0):
    return np.random.default_rng(seed).uniform(size=(n, 1, 8, 32, 32)).astype(np.float32)


def test_desk_shapes_and_size(desk):
    assert desk.spec.feature_dim == 64
    assert features(desk, desk_batch(2)).shape == (2, 64)
    assert forward(desk, desk_batch(2)).shape == (2, 4)
    assert desk.parameter_count() < 200_000


def test_full_scale_feature_dimension():
    spec = ModelSpec.paper()
    assert spec.feature_dim == 512
    assert spec.activation_extents()[-1] == (1, 4, 4)
    small = ModelSpec.paper(input_size=32, input_frames=8, block_widths=(4, 4, 8, 8, 512), input_channels=3)
    assert features(build_model(small), np.zeros((1, 3, 8, 32, 32), np.float32)).shape == (1, 512)


def test_heads():
    m = build_model(ModelSpec.desk())
    assert m.params["head.fc1.w"].shape == (64, 64)
    assert m.params["head.fc2.w"].shape == (4, 64)
    t = replace_head(m, "transfer", 7, seed=1)
    assert t.params["head.fc.w"].shape == (7, 64)
    assert not any(n.startswith("head.fc1") for n in t.params)
    assert t.params["b0.conv.w"] is m.params["b0.conv.w"]


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec(block_widths=(8, 8, 16, 32))
    with pytest.raises(ValueError):
        ModelSpec(head="other")
    with pytest.raises(ValueError):
        ModelSpec(input_frames=0)


def test_wrong_batch_shape_is_rejected(desk):
    with pytest.raises(ValueError, match="does not match"):
        forward(desk, np.zeros((1, 1, 8, 16, 16), np.float32))


def test_eval_is_batch_independent(desk):
    x = desk_batch(8, seed=3)
    one = forward(desk, x[:1]).data
    eight = forward(desk, x).data
    np.testing.assert_allclose(one[0], eight[0], atol=1e-5)


def test_zero_input_gives_uniform_logits(desk):
    logits = forward(desk, np.zeros((2, 1, 8, 32, 32), np.float32)).data
    np.testing.assert_allclose(logits, logits[:, :1].repeat(4, axis=1), atol=1e-6)


def test_stem_activations(desk):
    act = first_block_activations(desk, desk_batch(2)).data
    assert act.shape == (2, 8) + desk.spec.stem_shape()
    assert act.shape[2:] == (8, 16, 16)
    assert act.min() >= 0
    zero = first_block_activations(desk, np.zeros((1, 1, 8, 32, 32), np.float32)).data
    assert np.all(zero == 0)


def test_zeroed_residual_branch_is_identity():
    m = build_model(ModelSpec.desk(), seed=2)
    for n, p in m.params.items():
        if n.startswith("b1.") and (n.endswith("conv.w") or n.endswith("conv.b")):
            p.data[...] = 0
    x = Tensor(desk_batch(2))
    h = _stem(m, x, False)
    out = residual_block(m, h, 1, False)
    np.testing.assert_array_equal(out.data, h.data)


def test_save_load_is_bit_exact(tmp_path):
    m = build_model(ModelSpec.desk(), seed=5)
    for st in m.stats.values():
        st.mean[:] = np.random.default_rng(1).normal(size=st.mean.shape)
        st.var[:] = np.random.default_rng(2).uniform(0.5, 2, size=st.var.shape)
    set_trainable_prefix(m, 2)
    save_model(m, tmp_path / "m.rpck")
    back, extra, meta = load_model(tmp_path / "m.rpck")
    assert extra == {}
    assert back.spec == m.spec and back.trainable_from == 2
    for k, v in m.state_dict().items():
        assert back.state_dict()[k].tobytes() == v.tobytes()
    x = desk_batch(3)
    assert forward(back, x).data.tobytes() == forward(m, x).data.tobytes()


def test_parameter_names_are_stable():
    a = build_model(ModelSpec.desk(), seed=0)
    b = build_model(ModelSpec.desk(), seed=9)
    assert list(a.params) == list(b.params)
    assert len(set(a.params)) == len(a.params)


def test_freezing_flags():
    m = build_model(ModelSpec.desk())
    set_trainable_prefix(m, 0)
    assert all(p.requires_grad for p in m.params.values())
    set_trainable_prefix(m, 5)
    assert {n for n, p in m.params.items() if p.requires_grad} == {n for n in m.params if n.startswith("head.")}
    with pytest.raises(ValueError):
        set_trainable_prefix(m, 6)


def _train_steps(m, steps, seed=0):
    g = np.random.default_rng(seed)
    vel = {}
    for _ in range(steps):
        x = g.uniform(size=(4, 1, 8, 32, 32)).astype(np.float32)
        loss = F.softmax_cross_entropy(forward(m, x, "train"), g.integers(0, 4, size=4))
        backward(loss)
        vel = sgd_step(m.trainable(), 0.05, velocity=vel)


def test_frozen_prefix_stays_bit_identical():
    m = build_model(ModelSpec.desk(), seed=1)
    set_trainable_prefix(m, 2)
    before = {k: v.copy() for k, v in m.state_dict().items()}
    _train_steps(m, 100)
    after = m.state_dict()
    for k in before:
        block = int(k.split(".", 1)[0][1:]) if not k.startswith("head.") else 5
        if block < 2:
            assert after[k].tobytes() == before[k].tobytes(), k
    for b in (2, 3, 4):
        assert not np.array_equal(after[f"b{b}.u0.c1.conv.w"], before[f"b{b}.u0.c1.conv.w"])


def test_fully_frozen_changes_only_head():
    m = build_model(ModelSpec.desk(), seed=1)
    set_trainable_prefix(m, 5)
    before = {k: v.copy() for k, v in m.state_dict().items()}
    _train_steps(m, 3)
    changed = {k for k, v in m.state_dict().items() if not np.array_equal(v, before[k])}
    assert changed and all(k.startswith("head.") for k in changed)


def test_untrained_network_separates_rotations(desk):
    x = desk_batch(1, seed=7)
    rot = np.ascontiguousarray(np.rot90(x, 2, axes=(3, 4)))
    assert not np.allclose(forward(desk, x).data, forward(desk, rot).data)


def test_two_block_network_gradient():
    """Stem plus one residual block, pooled into a linear classifier, against central differences."""
    g = np.random.default_rng(0)
    with precision(np.float64):
        P = {
            "w0": g.normal(size=(3, 1, 3, 3, 3)) * 0.4, "g0": g.uniform(0.5, 1.5, 3), "b0": g.normal(size=3) * 0.1,
            "w1": g.normal(size=(3, 3, 3, 3, 3)) * 0.2, "g1": g.uniform(0.5, 1.5, 3), "b1": g.normal(size=3) * 0.1,
            "w2": g.normal(size=(3, 3, 3, 3, 3)) * 0.2, "g2": g.uniform(0.5, 1.5, 3), "b2": g.normal(size=3) * 0.1,
            "fc": g.normal(size=(4, 3)), "fb": g.normal(size=4) * 0.1,
        }
        P = {k: Tensor(v, requires_grad=True) for k, v in P.items()}
        x = Tensor(g.uniform(size=(2, 1, 3, 6, 6)))
        labels = [1, 3]
        stats = {k: F.BatchNormStats(3, dtype=np.float64) for k in "012"}

        def loss_fn():
            def cbr(h, w, gm, bt, st):
                return F.batchnorm3d(F.conv3d(h, P[w], None, 1, 1), P[gm], P[bt], stats[st], True, update_stats=False)
            h = F.relu(cbr(x, "w0", "g0", "b0", "0"))
            r = F.relu(cbr(h, "w1", "g1", "b1", "1"))
            r = cbr(r, "w2", "g2", "b2", "2")
            h = F.relu(r + h)
            return F.softmax_cross_entropy(F.linear(F.global_avg_pool(h), P["fc"], P["fb"]), labels)

        backward(loss_fn())
        for name, p in P.items():
            numeric = finite_diff_grad(lambda _t: loss_fn(), p)
            assert max_relative_error(p.grad, numeric, floor=1e-6) < 1e-4, name
