import math

import numpy as np
import pytest

from sparnet import data, train
from sparnet.models import BackboneConfig, ModelConfig, SparNet
from sparnet.rng import RngStreams
from sparnet.tensor import ShapeError, Tensor

from conftest import TINY


def small_model(ms_on=True, **kw):
    return ModelConfig(backbone=BackboneConfig(stage_channels=(4, 8, 8, 16)), hidden=8, num_classes=4,
                       ms_on=ms_on, **kw)


def small_train(**kw):
    base = dict(epochs=2, batch_size=4, n_frames=TINY.n_frames, seeds=(11,), checkpoints=False)
    base.update(kw)
    return train.TrainConfig(**base)


@pytest.fixture(scope="module")
def stores(tiny_root):
    return data.ClipStore(tiny_root, "train"), data.ClipStore(tiny_root, "test")


# ---------------------------------------------------------------- losses

def test_loss_c_perfect():
    logits = Tensor(np.array([[0.0, 1e4], [1e4, 0.0]]))
    assert train.loss_classification(logits, [1, 0]).item() == pytest.approx(0.0, abs=1e-12)


def test_loss_c_uniform():
    assert train.loss_classification(Tensor(np.zeros((3, 4))), [0, 1, 3]).item() == pytest.approx(math.log(4))


def test_loss_c_oracle(rng):
    z = rng.normal(size=(5, 6))
    y = rng.integers(0, 6, 5)
    p = np.exp(z) / np.exp(z).sum(1, keepdims=True)
    direct = -np.mean(np.log(p[np.arange(5), y]))
    assert train.loss_classification(Tensor(z), y).item() == pytest.approx(direct, abs=1e-6)
    onehot = np.eye(6)[y]
    assert train.loss_classification(Tensor(z), onehot).item() == pytest.approx(direct, abs=1e-6)


def test_loss_c_range_error():
    with pytest.raises(train.RangeError):
        train.loss_classification(Tensor(np.zeros((1, 3))), [3])


def test_loss_ms_zero_maps(rng):
    probs = Tensor(rng.random((2, 3, 16)) + 0.01)
    assert train.loss_ms(probs, np.zeros((2, 3, 16))).item() == 0.0


def test_loss_ms_uniform_49():
    m = np.zeros((1, 1, 49))
    m[0, 0, :5] = 1
    assert train.loss_ms(Tensor(np.full((1, 1, 49), 1 / 49)), m).item() == pytest.approx(5 * math.log(49), abs=1e-9)


def test_loss_ms_oracle(rng):
    l = 0.05 + 0.95 * rng.random((2, 3, 4))
    m = rng.random((2, 3, 4))
    acc = 0.0
    for b in range(2):
        for n in range(3):
            for j in range(4):
                acc -= m[b, n, j] * math.log(l[b, n, j])
    assert train.loss_ms(Tensor(l), m).item() == pytest.approx(acc / 6, abs=1e-6)


def test_loss_ms_shape_error():
    with pytest.raises(ShapeError):
        train.loss_ms(Tensor(np.ones((1, 2, 4))), np.ones((1, 2, 9)))


def test_loss_combined_examples():
    a, b = Tensor(np.array(0.5)), Tensor(np.array(1.2))
    assert train.loss_combined(a, b, 1).item() == pytest.approx(1.7)
    assert train.loss_combined(a, b, 0) is a
    pair = (Tensor(np.array(0.3)), Tensor(np.array(0.7)))
    assert train.loss_combined(pair, None, 0).item() == pytest.approx(1.0)


# ---------------------------------------------------------------- adam

def test_adam_zero_gradient():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True, name="classifier.w")
    p.grad = np.zeros(2)
    train.adam_step({"classifier.w": p}, train.AdamState(), {"classifier": 0.1})
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adam_first_step():
    p = Tensor(np.array(1.0), requires_grad=True)
    p.grad = np.array(1.0)
    train.adam_step({"classifier.w": p}, train.AdamState(), {"classifier": 0.1})
    assert float(p.data) == pytest.approx(1 - 0.1 / (1 + 1e-8), abs=1e-12)


def test_adam_zero_lr_block_untouched(rng):
    bb = Tensor(rng.normal(size=3), requires_grad=True)
    cl = Tensor(rng.normal(size=3), requires_grad=True)
    before = bb.data.copy()
    bb.grad, cl.grad = np.ones(3), np.ones(3)
    train.adam_step({"backbone.w": bb, "classifier.w": cl}, train.AdamState(), {"backbone": 0.0, "classifier": 0.1})
    assert bb.data.tobytes() == before.tobytes()


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(3), requires_grad=True)
    p.grad = np.zeros(4)
    with pytest.raises(ShapeError):
        train.adam_step({"classifier.w": p}, train.AdamState(), {"classifier": 0.1})


def test_adam_weight_decay():
    p = Tensor(np.array(2.0), requires_grad=True)
    p.grad = np.array(0.0)
    train.adam_step({"classifier.w": p}, train.AdamState(), {"classifier": 0.1}, weight_decay=0.5)
    assert float(p.data) == pytest.approx(2.0 * (1 - 0.05))


# ---------------------------------------------------------------- metrics

def test_perfect_predictor():
    y = np.arange(6).repeat(2)
    scores = np.eye(6)[y]
    assert train.topk_hits(scores, y, 1).all() and train.topk_hits(scores, y, 5).all()
    p, r = train.precision_recall(scores.argmax(1), y, 6)
    assert np.all(p == 1) and np.all(r == 1)


def test_constant_predictor():
    y = np.arange(6).repeat(10)
    pred = np.zeros_like(y)
    assert np.mean(pred == y) == pytest.approx(1 / 6)
    p, r = train.precision_recall(pred, y, 6)
    assert r[0] == 1 and p[0] == pytest.approx(1 / 6)
    assert np.all(p[1:] == 0) and np.all(r[1:] == 0)


def test_top5_degenerate_and_ties():
    assert train.topk_hits(np.zeros((3, 4)), np.array([0, 1, 3]), 5).all()
    scores = np.zeros((1, 7))
    assert train.topk_hits(scores, np.array([4]), 5)[0]
    assert not train.topk_hits(scores, np.array([5]), 5)[0]
    assert train.topk_hits(scores, np.array([0]), 1)[0]


def test_map_iou():
    gt = np.array([[0, 0, 1, 1], [0, 0, 0, 0]], float)
    pred = np.array([[0, 0, 0.5, 0.5], [0.25] * 4])
    iou, n = train.map_iou(pred, gt)
    assert n == 1 and iou == pytest.approx(1.0)
    iou, _ = train.map_iou(np.array([[0.25] * 4]), gt[:1])
    assert iou == pytest.approx(1 / 3)


# ---------------------------------------------------------------- loop

def _snapshot(model):
    return {n: p.data.tobytes() for n, p in model.params.items()}


def test_zero_lr_epoch_is_noop(stores):
    cfg = small_train(lr={k: 0.0 for k in train.LR_BLOCKS})
    streams = RngStreams(1)
    model = SparNet(small_model(), streams=streams)
    before = _snapshot(model)
    b = train.Batcher(stores[0], cfg.n_frames, model.config.motion_size)
    train.train_epoch(model, b, cfg, streams, train.AdamState(), 1)
    assert _snapshot(model) == before


def test_backbone_lr_zero_freezes_backbone(stores):
    cfg = small_train(lr={"backbone": 0.0, "ms_head": 1e-3, "convlstm": 1e-3, "classifier": 1e-3})
    streams = RngStreams(1)
    model = SparNet(small_model(), streams=streams)
    before = _snapshot(model)
    b = train.Batcher(stores[0], cfg.n_frames, model.config.motion_size)
    train.train_epoch(model, b, cfg, streams, train.AdamState(), 1)
    after = _snapshot(model)
    assert all(after[n] == before[n] for n in before if n.startswith("backbone."))
    assert any(after[n] != before[n] for n in before if n.startswith("classifier."))


def test_divergence_aborts(stores):
    cfg = small_train()
    streams = RngStreams(1)
    model = SparNet(small_model(), streams=streams)
    model.params["classifier.fc.bias"].data[:] = np.nan
    b = train.Batcher(stores[0], cfg.n_frames, model.config.motion_size)
    with pytest.raises(train.DivergenceError) as exc:
        train.train_epoch(model, b, cfg, streams, train.AdamState(), 3)
    assert exc.value.epoch == 3 and exc.value.batch == 0 and exc.value.term == "loss_c"


def test_evaluate_empty_split(stores):
    b = train.Batcher(data.ClipStore.__new__(data.ClipStore), 3, 4)
    b.store.entries = []
    b.store.classes = ["a", "b"]
    with pytest.raises(train.ContractError):
        train.evaluate(SparNet(small_model()), b)


def test_run_experiment_outputs_and_determinism(tiny_root, stores, tmp_path):
    cfg = small_train(seeds=(11, 22))
    r1 = train.run_experiment(small_model(), cfg, tiny_root, tmp_path / "a", stores=stores)
    r2 = train.run_experiment(small_model(), cfg, tiny_root, tmp_path / "b", stores=stores)
    assert not r1.failed
    rows = train.read_csv(tmp_path / "a" / "metrics.csv")
    assert list(rows[0]) == list(train.METRIC_COLUMNS)
    assert {r["split"] for r in rows} == {"train", "train_eval", "test"}
    strip = lambda rs: [{k: v for k, v in r.items() if k not in train.TIMING_COLUMNS} for r in rs]
    assert strip(rows) == strip(train.read_csv(tmp_path / "b" / "metrics.csv"))
    summary = train.read_csv(tmp_path / "a" / "summary.csv")
    assert list(summary[0]) == list(train.SUMMARY_COLUMNS)
    a1, a2 = r1.aggregate(), r2.aggregate()
    assert a1["acc_mean"] == a2["acc_mean"] and a1["acc_std"] == a2["acc_std"]
    for run in r1.runs:
        assert run.test.top5 >= run.test.top1
        assert all(e.loss_c >= 0 and e.loss_ms >= 0 and e.loss_total >= 0 for e in run.epochs)


def test_aggregate_arithmetic():
    runs = [train.RunMetrics(s, [], train.EvalResult(a, 1.0, [], [], 0, 0, 0, float("nan"), 0.1))
            for s, a in ((1, 0.8), (2, 0.9), (3, 1.0))]
    agg = train.ExperimentResult("x", runs).aggregate()
    assert agg["acc_mean"] == pytest.approx(0.9)
    assert agg["acc_std"] == pytest.approx(0.0816, abs=1e-4)
    one = train.ExperimentResult("x", runs[:1]).aggregate()
    assert one["acc_mean"] == 0.8 and one["acc_std"] == 0.0


def test_failed_seed_keeps_partial_results(tiny_root, stores, tmp_path, monkeypatch):
    real = train.run_seed

    def flaky(model_cfg, cfg, tr, te, seed, *a, **kw):
        if seed == 22:
            raise FloatingPointError("boom")
        return real(model_cfg, cfg, tr, te, seed, *a, **kw)

    monkeypatch.setattr(train, "run_seed", flaky)
    res = train.run_experiment(small_model(), small_train(epochs=1, seeds=(11, 22)), tiny_root, tmp_path,
                               stores=stores)
    assert res.failed and len(res.ok_runs) == 1
    assert "boom" in res.runs[1].error
    assert (tmp_path / "metrics.csv").exists()


def test_ms_training_requires_maps(tmp_path):
    root = tmp_path / "nomaps"
    data.gen_dataset(TINY, 2, root)
    st = (data.ClipStore(root, "train"), data.ClipStore(root, "test"))
    with pytest.raises(train.ContractError):
        train.run_seed(small_model(), small_train(), *st, seed=1)


def test_train_config_validation():
    with pytest.raises(train.ContractError):
        small_train(epochs=0).validate()
    with pytest.raises(train.ContractError):
        small_train(lr={"backbone": 1e-3}).validate()
    with pytest.raises(train.ContractError):
        small_train(ms_weight=0.5).validate()


def test_checkpoint_written(tiny_root, stores, tmp_path):
    train.run_experiment(small_model(), small_train(epochs=1, checkpoints=True), tiny_root, tmp_path, stores=stores)
    assert (tmp_path / "checkpoints" / "seed11" / "header.json").exists()
