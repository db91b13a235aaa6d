"""Losses, ADAM with per-block learning rates, the epoch loop, evaluation and
the multi-seed experiment protocol."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as dsynth
from .models import ModelConfig, SparNet, multitask_action_prob, save_checkpoint
from .rng import RngStreams
from .tensor import Tensor, ShapeError, backward, mul, no_grad, safe_log, softmax, tsum

log = logging.getLogger(__name__)

LR_BLOCKS = ("backbone", "ms_head", "convlstm", "classifier")
# the auxiliary CAM classifier trains at the classifier rate
BLOCK_LR_KEY = {"backbone": "backbone", "ms_head": "ms_head", "convlstm": "convlstm",
                "classifier": "classifier", "cam": "classifier"}
METRIC_COLUMNS = ("run_id", "seed", "epoch", "split", "loss_c", "loss_ms", "loss_total",
                  "top1", "top5", "epoch_train_s", "eval_s")
TIMING_COLUMNS = ("epoch_train_s", "eval_s")
SUMMARY_COLUMNS = ("variant", "acc_mean", "acc_std", "top5_mean", "test_time_s_mean",
                   "train_time_per_epoch_s_mean")


class RangeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    def __init__(self, epoch, batch, term, value):
        super().__init__(f"non-finite {term}={value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.term = epoch, batch, term


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: dict = field(default_factory=lambda: {"backbone": 5e-4, "ms_head": 1e-3, "convlstm": 1e-3,
                                              "classifier": 1e-3})
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    ms_weight: float = 1.0
    n_frames: int = 7
    seeds: tuple = (11, 22, 33)
    augment: bool = True
    checkpoints: bool = True
    train_eval: bool = True

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1 or self.n_frames < 1:
            raise ContractError("epochs, batch_size and n_frames must be >= 1")
        if set(self.lr) != set(LR_BLOCKS):
            raise ContractError(f"need exactly one lr per block {LR_BLOCKS}, got {sorted(self.lr)}")
        if any(v < 0 for v in self.lr.values()):
            raise ContractError("learning rates must be >= 0")
        if self.ms_weight not in (0, 1):
            raise ContractError("ms_weight must be 0 or 1")
        if not self.seeds:
            raise ContractError("need at least one seed")


# ---------------------------------------------------------------- losses

def _one_hot(y, k, dtype):
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.size and (y.min() < 0 or y.max() >= k):
        raise RangeError(f"label outside [0, {k})")
    out = np.zeros((len(y), k), dtype=dtype)
    out[np.arange(len(y)), y] = 1
    return out


def loss_classification(logits: Tensor, y) -> Tensor:
    """Mean over the batch of -log softmax(logits)[y]. ``y`` holds indices or one-hot rows."""
    y = np.asarray(y)
    b, k = logits.shape
    target = y.astype(logits.dtype) if y.ndim == 2 else _one_hot(y, k, logits.dtype)
    if target.shape != (b, k):
        raise ShapeError(f"labels {y.shape} do not match logits {logits.shape}")
    logp = safe_log(softmax(logits, axis=-1))
    return tsum(mul(logp, Tensor(target))) * (-1.0 / b)


def loss_ms(probs: Tensor, maps) -> Tensor:
    """-sum(m * log l) over batch, frames and cells, divided by B*N."""
    m = np.asarray(maps.data if isinstance(maps, Tensor) else maps, dtype=probs.dtype)
    if m.shape != probs.shape:
        raise ShapeError(f"maps {m.shape} do not match predictions {probs.shape}")
    b, n = probs.shape[:2]
    return tsum(mul(safe_log(probs), Tensor(m))) * (-1.0 / (b * n))


def loss_combined(loss_c, loss_m, ms_weight=1.0):
    """L_c + ms_weight * L_ms. ``loss_c`` may be a (verb, noun) pair, which is summed."""
    if isinstance(loss_c, (tuple, list)):
        loss_c = loss_c[0] + loss_c[1]
    if ms_weight == 0 or loss_m is None:
        return loss_c
    return loss_c + loss_m * float(ms_weight)


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, state: AdamState, lrs: dict, beta1=0.9, beta2=0.999, eps=1e-8,
              weight_decay=0.0, block_of=None) -> AdamState:
    """One bias-corrected ADAM update in place; ``lrs`` maps block name to learning rate.

    Parameters whose block has lr 0 are skipped entirely, so they stay bitwise
    unchanged. Weight decay is decoupled (applied to the weights, not the moments).
    """
    block_of = block_of or (lambda name: BLOCK_LR_KEY.get(name.split(".")[0], name.split(".")[0]))
    state.step += 1
    t = state.step
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad {g.shape} vs param {p.shape}")
        lr = lrs[block_of(name)]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        if lr == 0:
            continue
        upd = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            p.data *= p.data.dtype.type(1 - lr * weight_decay)
        p.data -= (lr * upd).astype(p.data.dtype)
    return state


# ---------------------------------------------------------------- metrics

def topk_hits(logits: np.ndarray, y: np.ndarray, k: int) -> np.ndarray:
    """Label within the k best scores; ties go to the lower class index."""
    logits = np.asarray(logits)
    y = np.asarray(y)
    if logits.shape[1] < k:
        return np.ones(len(y), dtype=bool)
    mine = logits[np.arange(len(y)), y][:, None]
    idx = np.arange(logits.shape[1])[None]
    rank = (logits > mine).sum(axis=1) + ((logits == mine) & (idx < y[:, None])).sum(axis=1)
    return rank < k


def precision_recall(pred, y, k):
    pred, y = np.asarray(pred), np.asarray(y)
    prec, rec = np.zeros(k), np.zeros(k)
    for c in range(k):
        tp = np.sum((pred == c) & (y == c))
        fp = np.sum((pred == c) & (y != c))
        fn = np.sum((pred != c) & (y == c))
        prec[c] = tp / (tp + fp) if tp + fp else 0.0
        rec[c] = tp / (tp + fn) if tp + fn else 0.0
    return prec, rec


def map_iou(pred, gt, eps=1e-12):
    """Soft IoU (sum of minima over sum of maxima) of per-frame maps, each scaled
    to unit mass first. Frames whose ground truth is empty are skipped; returns
    (mean IoU, frames counted)."""
    pred = np.asarray(pred, np.float64).reshape(-1, np.shape(pred)[-1])
    gt = np.asarray(gt, np.float64).reshape(pred.shape)
    keep = gt.sum(axis=1) > eps
    if not keep.any():
        return float("nan"), 0
    p = pred[keep] / np.maximum(pred[keep].sum(axis=1, keepdims=True), eps)
    g = gt[keep] / gt[keep].sum(axis=1, keepdims=True)
    iou = np.minimum(p, g).sum(axis=1) / np.maximum(p, g).sum(axis=1)
    return float(iou.mean()), int(keep.sum())


@dataclass
class EpochMetrics:
    epoch: int
    loss_c: float
    loss_ms: float
    loss_total: float
    top1: float
    top5: float
    train_s: float


@dataclass
class EvalResult:
    top1: float
    top5: float
    precision: list
    recall: list
    loss_c: float
    loss_ms: float
    loss_total: float
    ms_iou: float
    eval_s: float
    predictions: list = field(default_factory=list)


@dataclass
class RunMetrics:
    seed: int
    epochs: list
    test: EvalResult | None = None
    error: str | None = None
    # central-crop pass over the training clips after the last epoch
    train_eval: EvalResult | None = None

    @property
    def avg_epoch_train_s(self) -> float:
        return float(np.mean([e.train_s for e in self.epochs])) if self.epochs else float("nan")


# ---------------------------------------------------------------- batches

class Batcher:
    """Turns clip indices into model-ready arrays, drawing sampling and
    augmentation from their own named streams."""

    def __init__(self, store: dsynth.ClipStore, n_frames: int, s: int, multitask=False,
                 resize_height=72, crop=64):
        self.store, self.n, self.s = store, n_frames, s
        self.multitask = multitask
        self.resize_height, self.crop = resize_height, crop
        self._cache = {}

    def _length(self, i):
        return self.store.entries[i]["T"]

    def build(self, idx, train: bool, streams: RngStreams | None = None, augment=True):
        frames, maps, labels, verbs, nouns = [], [], [], [], []
        for i in idx:
            if not train and i in self._cache:
                smp = self._cache[i]
            else:
                t = self._length(i)
                if train:
                    ids = dsynth.sample_frames(t, min(self.n, t), "train", streams.get("sample"))
                    view = None
                    if augment:
                        native = self.store._frames[self.store.entries[i]["clip_id"]].shape[2:]
                        view = dsynth.draw_view(native, streams.get("augment"), self.resize_height, self.crop)
                else:
                    ids = dsynth.sample_frames(t, min(self.n, t), "test")
                    view = None
                smp = self.store.sample(i, ids, view, self.s, self.resize_height, self.crop)
                if not train:
                    self._cache[i] = smp
            frames.append(smp.frames)
            maps.append(smp.maps.reshape(len(smp.maps), -1))
            labels.append(smp.label)
            verbs.append(smp.verb)
            nouns.append(smp.noun)
        return (np.stack(frames), np.stack(maps), np.array(labels), np.array(verbs), np.array(nouns))


def _forward_losses(model: SparNet, frames, maps, labels, verbs, nouns, ms_weight):
    cfg = model.config
    out = model(Tensor(frames.astype(model.dtype, copy=False)))
    if cfg.multitask:
        lc = loss_classification(out.verb_logits, verbs) + loss_classification(out.noun_logits, nouns)
        grid, _ = multitask_action_prob(out.verb_logits.data, out.noun_logits.data)
        scores = grid.reshape(len(labels), -1)
    else:
        lc = loss_classification(out.class_logits, labels)
        scores = out.class_logits.data
    lm = None
    if cfg.ms_on and ms_weight:
        lm = loss_ms(out.motion_probs, maps)
    total = loss_combined(lc, lm, ms_weight)
    return out, lc, lm, total, scores


def train_epoch(model: SparNet, batcher: Batcher, cfg: TrainConfig, streams: RngStreams,
                opt: AdamState, epoch: int = 0) -> EpochMetrics:
    """One pass over the training clips in a freshly shuffled order."""
    n = len(batcher.store)
    order = streams.get("shuffle").permutation(n)
    sums = np.zeros(3)
    hits1 = hits5 = 0
    compute_s = 0.0
    params = model.trainable()
    for bi, start in enumerate(range(0, n, cfg.batch_size)):
        idx = order[start:start + cfg.batch_size]
        frames, maps, labels, verbs, nouns = batcher.build(idx, True, streams, cfg.augment)
        t0 = time.perf_counter()
        model.zero_grad()
        out, lc, lm, total, scores = _forward_losses(model, frames, maps, labels, verbs, nouns, cfg.ms_weight)
        vals = (lc.item(), lm.item() if lm is not None else 0.0, total.item())
        for term, v in zip(("loss_c", "loss_ms", "loss_total"), vals):
            if not math.isfinite(v):
                raise DivergenceError(epoch, bi, term, v)
        backward(total)
        model.fill_missing_grads()
        adam_step(params, opt, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
        compute_s += time.perf_counter() - t0
        sums += np.array(vals) * len(idx)
        hits1 += int((scores.argmax(axis=1) == labels).sum())
        hits5 += int(topk_hits(scores, labels, 5).sum())
    return EpochMetrics(epoch, *(sums / n), hits1 / n, hits5 / n, compute_s)


def evaluate(model: SparNet, batcher: Batcher, batch_size: int = 8, ms_weight: float = 1.0) -> EvalResult:
    """Central-crop evaluation of every clip in the batcher's store."""
    n = len(batcher.store)
    if n == 0:
        raise ContractError("empty evaluation split")
    k = len(batcher.store.classes)
    sums = np.zeros(3)
    scores_all, labels_all, probs_all, maps_all = [], [], [], []
    eval_s = 0.0
    for start in range(0, n, batch_size):
        idx = list(range(start, min(n, start + batch_size)))
        frames, maps, labels, verbs, nouns = batcher.build(idx, False)
        t0 = time.perf_counter()
        with no_grad():
            out, lc, lm, total, scores = _forward_losses(model, frames, maps, labels, verbs, nouns, ms_weight)
        eval_s += time.perf_counter() - t0
        sums += np.array([lc.item(), lm.item() if lm is not None else 0.0, total.item()]) * len(idx)
        scores_all.append(scores)
        labels_all.append(labels)
        if out.motion_probs is not None:
            probs_all.append(out.motion_probs.data)
            maps_all.append(maps)
    scores = np.concatenate(scores_all)
    labels = np.concatenate(labels_all)
    pred = scores.argmax(axis=1)
    prec, rec = precision_recall(pred, labels, k)
    iou = map_iou(np.concatenate(probs_all), np.concatenate(maps_all))[0] if probs_all else float("nan")
    return EvalResult(float((pred == labels).mean()), float(topk_hits(scores, labels, 5).mean()),
                      prec.tolist(), rec.tolist(), *(sums / n), iou, eval_s, pred.tolist())


# ---------------------------------------------------------------- experiments

@dataclass
class ExperimentResult:
    variant: str
    runs: list
    model_params: int = 0

    @property
    def ok_runs(self):
        return [r for r in self.runs if r.error is None and r.test is not None]

    @property
    def failed(self) -> bool:
        return any(r.error is not None for r in self.runs)

    def aggregate(self) -> dict:
        ok = self.ok_runs
        acc = np.array([r.test.top1 for r in ok]) if ok else np.array([np.nan])
        return {
            "variant": self.variant,
            "acc_mean": float(acc.mean()),
            "acc_std": float(acc.std()),
            "top5_mean": float(np.mean([r.test.top5 for r in ok])) if ok else float("nan"),
            "test_time_s_mean": float(np.mean([r.test.eval_s for r in ok])) if ok else float("nan"),
            "train_time_per_epoch_s_mean": float(np.mean([r.avg_epoch_train_s for r in ok])) if ok else float("nan"),
            "ms_iou_mean": float(np.mean([r.test.ms_iou for r in ok])) if ok else float("nan"),
            "train_top1_mean": float(np.mean([r.train_eval.top1 for r in ok if r.train_eval]))
            if any(r.train_eval for r in ok) else float("nan"),
        }


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metric_rows(run: RunMetrics) -> list[dict]:
    rid = f"seed{run.seed}"
    rows = [{"run_id": rid, "seed": run.seed, "epoch": e.epoch, "split": "train", "loss_c": e.loss_c,
             "loss_ms": e.loss_ms, "loss_total": e.loss_total, "top1": e.top1, "top5": e.top5,
             "epoch_train_s": e.train_s, "eval_s": ""} for e in run.epochs]
    last = run.epochs[-1].epoch if run.epochs else 0
    for split, t in (("train_eval", run.train_eval), ("test", run.test)):
        if t is not None:
            rows.append({"run_id": rid, "seed": run.seed, "epoch": last, "split": split, "loss_c": t.loss_c,
                         "loss_ms": t.loss_ms, "loss_total": t.loss_total, "top1": t.top1, "top5": t.top5,
                         "epoch_train_s": "", "eval_s": t.eval_s})
    return rows


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in columns})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def run_seed(model_cfg: ModelConfig, cfg: TrainConfig, train_store, test_store, seed: int,
             out_dir: Path | None = None, progress=None) -> tuple[RunMetrics, SparNet]:
    streams = RngStreams(seed)
    model = SparNet(model_cfg, streams=streams)
    s = model_cfg.motion_size
    if model_cfg.ms_on and cfg.ms_weight and not train_store.has_motion():
        raise ContractError("MS training needs motion masks; run gen-motion-maps first")
    tr = Batcher(train_store, cfg.n_frames, s, model_cfg.multitask, crop=model_cfg.backbone.input_size)
    te = Batcher(test_store, cfg.n_frames, s, model_cfg.multitask, crop=model_cfg.backbone.input_size)
    opt = AdamState()
    run = RunMetrics(seed, [])
    for epoch in range(1, cfg.epochs + 1):
        em = train_epoch(model, tr, cfg, streams, opt, epoch)
        run.epochs.append(em)
        if progress:
            progress(f"seed {seed} epoch {epoch}: loss {em.loss_total:.4f} top1 {em.top1:.3f} ({em.train_s:.1f}s)")
    if cfg.train_eval:
        run.train_eval = evaluate(model, Batcher(train_store, cfg.n_frames, s, model_cfg.multitask,
                                                 crop=model_cfg.backbone.input_size), cfg.batch_size, cfg.ms_weight)
    run.test = evaluate(model, te, cfg.batch_size, cfg.ms_weight)
    if out_dir is not None and cfg.checkpoints:
        save_checkpoint(model, out_dir / "checkpoints" / f"seed{seed}",
                        {"seed": seed, "epochs": cfg.epochs, "adam_step": opt.step})
    return run, model


def run_experiment(model_cfg: ModelConfig, cfg: TrainConfig, data_root, out_dir=None, variant="sparnet",
                   progress=None, stores=None) -> ExperimentResult:
    """Train one model per seed, evaluate each, persist metrics and the aggregate."""
    cfg.validate()
    model_cfg.validate()
    if stores is None:
        stores = (dsynth.ClipStore(data_root, "train"), dsynth.ClipStore(data_root, "test"))
    train_store, test_store = stores
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = ExperimentResult(variant, [], SparNet(model_cfg, seed=0).num_params())
    for seed in cfg.seeds:
        try:
            run, _ = run_seed(model_cfg, cfg, train_store, test_store, seed, out, progress)
        except Exception as exc:  # keep partial results; the experiment is marked failed
            log.error("seed %s failed: %s", seed, exc)
            run = RunMetrics(seed, [], error=f"{type(exc).__name__}: {exc}")
        result.runs.append(run)
        if out is not None:
            write_csv(out / "metrics.csv", METRIC_COLUMNS, [r for x in result.runs for r in metric_rows(x)])
    if out is not None:
        write_csv(out / "summary.csv", SUMMARY_COLUMNS, [result.aggregate()])
    return result


def result_to_dict(res: ExperimentResult) -> tuple[dict, dict]:
    """(deterministic results, wall-clock timings) as JSON-ready dicts."""
    agg = res.aggregate()
    timed = ("test_time_s_mean", "train_time_per_epoch_s_mean")
    runs, timing = [], {"variant": res.variant, **{k: agg[k] for k in timed}, "runs": []}
    for r in res.runs:
        epochs = [{k: v for k, v in asdict(e).items() if k != "train_s"} for e in r.epochs]
        test = {k: v for k, v in asdict(r.test).items() if k != "eval_s"} if r.test else None
        tr_eval = {k: v for k, v in asdict(r.train_eval).items() if k != "eval_s"} if r.train_eval else None
        runs.append({"seed": r.seed, "error": r.error, "epochs": epochs, "train_eval": tr_eval, "test": test})
        timing["runs"].append({"seed": r.seed, "epoch_train_s": [e.train_s for e in r.epochs],
                               "eval_s": r.test.eval_s if r.test else None})
    result = {"variant": res.variant, "model_params": res.model_params,
              "aggregate": {k: v for k, v in agg.items() if k not in timed}, "runs": runs}
    return result, timing
