import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparnet import train
from sparnet.models import (BackboneConfig, ConfigError, ConvLSTMState, ModelConfig, MSHeadConfig, SparNet,
                            cam_attention, convlstm_step, load_checkpoint, multitask_action_prob, save_checkpoint)
from sparnet.tensor import ShapeError, Tensor, backward

from conftest import model_grad_errors, tiny_batch, tiny_model_config


@pytest.fixture(scope="module")
def desk_model():
    return SparNet(ModelConfig(), seed=1)


def frames_like(rng, b=2, n=3, size=64):
    return rng.random((b, n, 3, size, size)).astype(np.float32)


# ---------------------------------------------------------------- backbone

def test_backbone_tap_shapes(desk_model, rng):
    taps = desk_model.backbone_forward(Tensor(frames_like(rng)))
    assert taps["T5"].shape == (2, 3, 128, 4, 4)
    assert taps["T4"].shape == (2, 3, 64, 8, 8)
    assert taps["T3"].shape == (2, 3, 32, 16, 16)


def test_backbone_wrong_size(desk_model, rng):
    with pytest.raises(ShapeError):
        desk_model.backbone_forward(Tensor(frames_like(rng, size=32)))


def test_backbone_batch_permutation(desk_model, rng):
    x = frames_like(rng, b=3, n=2)
    a = desk_model.backbone_forward(Tensor(x))
    b = desk_model.backbone_forward(Tensor(x[[2, 0, 1]]))
    for k in a:
        assert np.array_equal(a[k].data[[2, 0, 1]], b[k].data)


def test_backbone_duplicated_frame(desk_model, rng):
    x = frames_like(rng, b=1, n=3)
    x[:, 2] = x[:, 0]
    t5 = desk_model.backbone_forward(Tensor(x))["T5"].data
    assert np.array_equal(t5[:, 0], t5[:, 2])


# ---------------------------------------------------------------- convlstm

def test_convlstm_zero_everything():
    st0 = ConvLSTMState.zeros(2, 4, 3, np.float64)
    z = lambda *s: Tensor(np.zeros(s))
    out = convlstm_step(z(2, 5, 3, 3), st0, z(16, 5, 3, 3), z(16, 4, 3, 3), z(16))
    assert np.all(out.h.data == 0) and np.all(out.c.data == 0)


def test_convlstm_shape(desk_model, rng):
    p = desk_model.params
    st0 = ConvLSTMState.zeros(2, 64, 4, np.float32)
    x = Tensor(rng.random((2, 128, 4, 4)).astype(np.float32))
    out = convlstm_step(x, st0, p["convlstm.gates.weight_x"], p["convlstm.gates.weight_h"], p["convlstm.gates.bias"])
    assert out.h.shape == (2, 64, 4, 4) and out.c.shape == (2, 64, 4, 4)


def test_convlstm_channel_mismatch(desk_model, rng):
    p = desk_model.params
    st0 = ConvLSTMState.zeros(1, 64, 4, np.float32)
    with pytest.raises(ShapeError):
        convlstm_step(Tensor(rng.random((1, 100, 4, 4))), st0, p["convlstm.gates.weight_x"],
                      p["convlstm.gates.weight_h"], p["convlstm.gates.bias"])


def test_convlstm_unrolled_gradient(rng):
    from sparnet.tensor import grad_check, tsum
    w_x = Tensor(rng.normal(0, 0.3, (8, 3, 3, 3)))
    w_h = Tensor(rng.normal(0, 0.3, (8, 2, 3, 3)))
    bias = Tensor(rng.normal(0, 0.1, 8))
    xs = rng.normal(size=(3, 1, 3, 3, 3))

    def fn(wx):
        st0 = ConvLSTMState.zeros(1, 2, 3, np.float64)
        for k in range(3):
            st0 = convlstm_step(Tensor(xs[k]), st0, wx, w_h, bias)
        return tsum(st0.h * st0.h)
    assert grad_check(fn, w_x.data, eps=1e-6) < 1e-3


# ---------------------------------------------------------------- heads

def test_classifier_logit_shape(desk_model, rng):
    out = desk_model(frames_like(rng))
    assert out.class_logits.shape == (2, 6)


def test_constant_hidden_pooling_identity(desk_model):
    h = Tensor(np.ones((1, 64, 4, 4), np.float32) * 0.3)
    logits = desk_model.classifier_forward(ConvLSTMState(h, h))
    p = desk_model.params
    expected = np.full(64, 0.3, np.float32) @ p["classifier.fc.weight"].data + p["classifier.fc.bias"].data
    assert np.allclose(logits.data[0], expected, atol=1e-6)


def test_ms_head_softmax_sums_to_one(desk_model, rng):
    out = desk_model(frames_like(rng))
    assert out.motion_probs.shape == (2, 3, 16)
    assert np.allclose(out.motion_probs.data.sum(-1), 1, atol=1e-6)


def test_ms_head_paper_geometry():
    cfg = ModelConfig(backbone=BackboneConfig(input_size=112, stage_channels=(8, 16, 32, 64)))
    assert cfg.motion_size ** 2 == 49


def test_ms_head_tap_mismatch(desk_model, rng):
    with pytest.raises(ConfigError):
        desk_model.ms_head_forward(Tensor(rng.random((1, 2, 64, 8, 8)).astype(np.float32)))


# ---------------------------------------------------------------- CAM

def test_cam_uniform(rng):
    feat = Tensor(np.ones((2, 4, 3, 3)) * rng.random((2, 4, 1, 1)))
    w = Tensor(np.zeros((4, 3)))
    att_feat, att = cam_attention(feat, w)
    assert np.allclose(att.data, 1 / 9)
    assert np.allclose(att_feat.data, feat.data / 9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_cam_sums_to_one(seed):
    r = np.random.default_rng(seed)
    _, att = cam_attention(Tensor(r.normal(size=(3, 5, 4, 4))), Tensor(r.normal(size=(5, 6))))
    a = att.data.reshape(3, -1)
    assert np.all(a >= 0) and np.allclose(a.sum(-1), 1, atol=1e-6)


def test_cam_dominant_location():
    feat = np.zeros((1, 2, 3, 3))
    feat[0, 0, 1, 2] = 20.0
    w = np.array([[1.0, 0.0], [0.0, 1.0]])
    _, att = cam_attention(Tensor(feat), Tensor(w))
    a = att.data.reshape(-1)
    assert a[5] > 0.999 and a[5] == pytest.approx(1 / (1 + 8 * np.exp(-20)), rel=1e-9)


def test_cam_missing_weights(rng):
    with pytest.raises(ConfigError):
        cam_attention(Tensor(rng.random((1, 4, 2, 2))), Tensor(rng.random((3, 2))))


def test_cam_on_needs_weights(rng):
    m = SparNet(tiny_model_config(cam_on=True), seed=0)
    del m.params["cam.fc.weight"]
    with pytest.raises(ConfigError):
        m(rng.random((1, 2, 3, 8, 8)))


# ---------------------------------------------------------------- composition

def test_ms_side_branch_leaves_action_logits(rng):
    x = frames_like(rng)
    a = SparNet(ModelConfig(ms_on=True), seed=5)(x)
    b = SparNet(ModelConfig(ms_on=False), seed=5)(x)
    assert a.class_logits.data.tobytes() == b.class_logits.data.tobytes()
    assert b.motion_logits is None


def test_ms_adds_exactly_head_params():
    on = SparNet(ModelConfig(ms_on=True), seed=0)
    off = SparNet(ModelConfig(ms_on=False), seed=0)
    extra = set(on.params) - set(off.params)
    assert extra and all(n.startswith("ms_head.") for n in extra)
    assert set(off.params) <= set(on.params)
    for n in off.params:
        assert np.array_equal(on.params[n].data, off.params[n].data)


def test_freeze_lower_zero_grads(rng):
    m = SparNet(tiny_model_config(ms_on=True), seed=0)
    m.config.freeze_lower = True
    f, y, mp = tiny_batch(rng)
    out = m(Tensor(f))
    backward(train.loss_combined(train.loss_classification(out.class_logits, y),
                                 train.loss_ms(out.motion_probs, mp)))
    m.fill_missing_grads()
    for layer in ("stem", "conv3", "conv4"):
        for kind in ("weight", "bias"):
            assert not m.params[f"backbone.{layer}.{kind}"].grad.any()
    assert m.params["backbone.conv5.weight"].grad.any()


def test_frame_order_matters(rng):
    m = SparNet(ModelConfig(ms_on=False), seed=2)
    x = frames_like(rng, b=1, n=4)
    a = m(x).class_logits.data
    b = m(x[:, ::-1].copy()).class_logits.data
    assert np.abs(a - b).max() > 1e-6


def test_full_model_gradient(rng):
    m = SparNet(tiny_model_config(), seed=3)
    f, y, mp = tiny_batch(rng)
    errs = model_grad_errors(m, f, y, mp)
    assert max(errs.values()) < 1e-3, errs


def test_invalid_configs():
    with pytest.raises(ConfigError):
        ModelConfig(ms=MSHeadConfig(tap="T9")).validate()
    with pytest.raises(ConfigError):
        ModelConfig(backbone=BackboneConfig(stage_channels=(8, 32, 16, 128))).validate()
    with pytest.raises(ConfigError):
        ModelConfig(cam_position="post_lstm").validate()


def test_checkpoint_roundtrip(tmp_path, rng):
    m = SparNet(tiny_model_config(), seed=4)
    save_checkpoint(m, tmp_path / "ck", {"seed": 4})
    m2, header = load_checkpoint(tmp_path / "ck")
    assert header["seed"] == 4
    x = rng.random((1, 2, 3, 8, 8))
    assert np.array_equal(m(x).class_logits.data, m2(x).class_logits.data)


def test_init_independent_of_heads():
    base = SparNet(ModelConfig(ms_on=False), seed=9)
    full = SparNet(ModelConfig(ms_on=True, cam_on=True), seed=9)
    assert base.params["convlstm.gates.weight_x"].data.tobytes() == \
        full.params["convlstm.gates.weight_x"].data.tobytes()


# ---------------------------------------------------------------- multitask

def test_multitask_pair_probability():
    v = np.log(np.array([[0.5, 0.3, 0.2]]))
    n = np.log(np.array([[0.4, 0.6]]))
    grid, _ = multitask_action_prob(v, n)
    assert grid[0, 0, 0] == pytest.approx(0.2)


def test_multitask_uniform():
    grid, best = multitask_action_prob(np.zeros((1, 3)), np.zeros((1, 2)))
    assert np.allclose(grid, 1 / 6)
    assert best.tolist() == [[0, 0]]


def test_multitask_tie_breaking():
    grid, best = multitask_action_prob(np.array([[0.0, 1.0, 1.0]]), np.array([[2.0, 0.0, 2.0]]))
    assert best.tolist() == [[1, 0]]


def test_multitask_model_outputs(rng):
    m = SparNet(tiny_model_config(multitask=True), seed=0)
    out = m(rng.random((2, 2, 3, 8, 8)))
    assert out.verb_logits.shape == (2, 2) and out.noun_logits.shape == (2, 2)
    assert out.class_logits is None
