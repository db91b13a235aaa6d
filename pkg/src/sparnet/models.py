"""Backbone with named taps, ConvLSTM action head, motion-segmentation head,
CAM attention, and the verb/noun multitask variant."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import sptn
from .rng import RngStreams
from .tensor import (
    ShapeError,
    Tensor,
    avg_pool2d,
    concat,
    conv2d,
    conv_out_size,
    init_param,
    linear,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    tanh,
    transpose,
)

TAPS = ("T3", "T4", "T5")
BLOCKS = ("backbone", "convlstm", "classifier", "ms_head", "cam")


class ConfigError(ValueError):
    pass


@dataclass
class BackboneConfig:
    input_size: int = 64
    stage_channels: tuple = (8, 32, 64, 128)
    # fixed input standardisation (x - mean) / std applied before the stem
    input_mean: float = 0.5
    input_std: float = 0.25

    def tap_sizes(self) -> dict[str, int]:
        """Spatial extent at each tap (3x3 convs, stride 2, padding 1)."""
        s = conv_out_size(self.input_size, 3, 2, 1)
        out = {}
        for tap in TAPS:
            s = conv_out_size(s, 3, 2, 1)
            out[tap] = s
        return out

    def tap_channels(self) -> dict[str, int]:
        return dict(zip(TAPS, self.stage_channels[1:]))


@dataclass
class MSHeadConfig:
    tap: str = "T5"
    reduce_channels: int = 32
    final: str = "softmax"


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    hidden: int = 64
    num_classes: int = 6
    multitask: bool = False
    num_verbs: int = 3
    num_nouns: int = 2
    ms: MSHeadConfig = field(default_factory=MSHeadConfig)
    ms_on: bool = True
    cam_on: bool = False
    cam_position: str = "pre_lstm"
    freeze_lower: bool = False
    dtype: str = "float32"

    def validate(self):
        bb = self.backbone
        if bb.input_size < 1 or len(bb.stage_channels) != 4:
            raise ConfigError("backbone needs a positive input size and four stage widths")
        if list(bb.stage_channels) != sorted(bb.stage_channels) or min(bb.stage_channels) < 1:
            raise ConfigError("stage channels must be positive and non-decreasing")
        if self.ms.tap not in TAPS:
            raise ConfigError(f"unknown tap {self.ms.tap!r}")
        if self.ms.final not in ("softmax", "sigmoid"):
            raise ConfigError(f"unknown MS head nonlinearity {self.ms.final!r}")
        if self.cam_position != "pre_lstm":
            raise ConfigError("only cam_position=pre_lstm is implemented")
        if self.hidden < 1 or self.num_classes < 1:
            raise ConfigError("hidden and num_classes must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype}")

    @property
    def motion_size(self) -> int:
        return self.backbone.tap_sizes()[self.ms.tap]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        bb = d.pop("backbone", {})
        ms = d.pop("ms", {})
        bb = BackboneConfig(**{**bb, "stage_channels": tuple(bb.get("stage_channels", BackboneConfig.stage_channels))})
        return cls(backbone=bb, ms=MSHeadConfig(**ms), **d)


@dataclass
class ConvLSTMState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, batch, channels, size, dtype):
        z = np.zeros((batch, channels, size, size), dtype=dtype)
        return cls(Tensor(z), Tensor(z.copy()))


@dataclass
class ModelOutput:
    class_logits: Tensor | None = None
    verb_logits: Tensor | None = None
    noun_logits: Tensor | None = None
    motion_logits: Tensor | None = None
    motion_probs: Tensor | None = None
    attention: Tensor | None = None
    taps: dict | None = None


def convlstm_step(x: Tensor, state: ConvLSTMState, w_x: Tensor, w_h: Tensor, bias: Tensor,
                  weight: Tensor | None = None) -> ConvLSTMState:
    """One ConvLSTM update; gates are ordered input, forget, output, candidate.

    ``weight`` may carry ``concat([w_x, w_h], axis=1)`` precomputed by the caller.
    """
    ch = state.h.shape[1]
    if x.shape[1] != w_x.shape[1] or w_h.shape[1] != ch or w_x.shape[0] != 4 * ch:
        raise ShapeError(f"convlstm input {x.shape}, state {state.h.shape}, weights {w_x.shape}/{w_h.shape}")
    if weight is None:
        weight = concat([w_x, w_h], axis=1)
    z = conv2d(concat([x, state.h], axis=1), weight, bias, stride=1, padding=1)
    ifo = sigmoid(z[:, :3 * ch])
    g = tanh(z[:, 3 * ch:])
    i, f, o = ifo[:, :ch], ifo[:, ch:2 * ch], ifo[:, 2 * ch:]
    c = f * state.c + i * g
    h = o * tanh(c)
    return ConvLSTMState(h, c)


def cam_attention(features: Tensor, weight: Tensor, bias: Tensor | None = None):
    """Per-frame CAM of the top-scoring class used as a spatial softmax mask.

    ``features`` is [F, C, s, s], ``weight`` maps channels to classes [C, K].
    Returns (attended features, attention [F, 1, s, s]).
    """
    f, c, s, _ = features.shape
    if weight is None or weight.shape[0] != c:
        raise ConfigError("CAM needs classifier weights mapping feature channels to classes")
    pooled = reshape(avg_pool2d(features, global_pool=True), (f, c))
    with no_grad():
        scores = linear(pooled, weight, bias).data
    top = np.argmax(scores, axis=1)
    w_sel = transpose(weight)[top]
    cam = (features * reshape(w_sel, (f, c, 1, 1))).sum(axis=1)
    att = reshape(softmax(reshape(cam, (f, s * s)), axis=-1), (f, 1, s, s))
    return features * att, att


def multitask_action_prob(verb_logits, noun_logits):
    """p(action) = p(verb) * p(noun); returns the [B, V, Nn] grid and argmax (verb, noun).

    Ties go to the lowest verb index, then the lowest noun index.
    """
    v = np.asarray(getattr(verb_logits, "data", verb_logits), dtype=np.float64)
    n = np.asarray(getattr(noun_logits, "data", noun_logits), dtype=np.float64)
    pv = _np_softmax(v)
    pn = _np_softmax(n)
    grid = pv[:, :, None] * pn[:, None, :]
    flat = np.argmax(grid.reshape(grid.shape[0], -1), axis=1)
    return grid, np.stack(np.unravel_index(flat, grid.shape[1:]), axis=1)


def _np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class SparNet:
    """Single-stream action recogniser with an optional motion-segmentation side head.

    With ``ms_on=False`` this is the baseline (backbone + ConvLSTM + classifier).
    Each parameter block is initialised from its own named RNG stream, so the
    action branch starts from identical weights whatever heads are enabled.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, streams: RngStreams | None = None):
        config.validate()
        self.config = config
        self.streams = streams or RngStreams(seed)
        self.params: dict[str, Tensor] = {}
        self._build()

    # -- construction
    def _add(self, name, shape, scheme, **kw):
        block = name.split(".")[0]
        rng = None if scheme == "zeros" else self.streams.get(f"init.{block}")
        self.params[name] = init_param(shape, scheme, rng, dtype=self.dtype, name=name, **kw)

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def _build(self):
        cfg = self.config
        c0, c3, c4, c5 = cfg.backbone.stage_channels
        prev = 3
        for layer, ch in zip(("stem", "conv3", "conv4", "conv5"), (c0, c3, c4, c5)):
            self._add(f"backbone.{layer}.weight", (ch, prev, 3, 3), "kaiming")
            self._add(f"backbone.{layer}.bias", (ch,), "zeros")
            prev = ch
        hd = cfg.hidden
        fan_in, fan_out = (c5 + hd) * 9, 4 * hd * 9
        self._add("convlstm.gates.weight_x", (4 * hd, c5, 3, 3), "xavier", fan_in=fan_in, fan_out=fan_out)
        self._add("convlstm.gates.weight_h", (4 * hd, hd, 3, 3), "xavier", fan_in=fan_in, fan_out=fan_out)
        bias = np.zeros(4 * hd, dtype=self.dtype)
        bias[hd:2 * hd] = 1.0
        self.params["convlstm.gates.bias"] = Tensor(bias, requires_grad=True, name="convlstm.gates.bias")
        if cfg.multitask:
            for head, k in (("verb", cfg.num_verbs), ("noun", cfg.num_nouns)):
                self._add(f"classifier.{head}.weight", (hd, k), "xavier")
                self._add(f"classifier.{head}.bias", (k,), "zeros")
        else:
            self._add("classifier.fc.weight", (hd, cfg.num_classes), "xavier")
            self._add("classifier.fc.bias", (cfg.num_classes,), "zeros")
        if cfg.ms_on:
            tap_c = cfg.backbone.tap_channels()[cfg.ms.tap]
            s = cfg.motion_size
            r = cfg.ms.reduce_channels
            self._add("ms_head.conv.weight", (r, tap_c, 3, 3), "kaiming")
            self._add("ms_head.conv.bias", (r,), "zeros")
            self._add("ms_head.fc.weight", (r * s * s, s * s), "xavier")
            self._add("ms_head.fc.bias", (s * s,), "zeros")
        if cfg.cam_on:
            k = cfg.num_verbs * cfg.num_nouns if cfg.multitask else cfg.num_classes
            self._add("cam.fc.weight", (c5, k), "xavier")
            self._add("cam.fc.bias", (k,), "zeros")

    # -- parameter views
    def block_of(self, name: str) -> str:
        return name.split(".")[0]

    def blocks(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for name in self.params:
            out.setdefault(self.block_of(name), []).append(name)
        return out

    def frozen(self) -> set[str]:
        if not self.config.freeze_lower:
            return set()
        return {n for n in self.params if n.startswith("backbone.") and not n.startswith("backbone.conv5.")}

    def trainable(self) -> dict[str, Tensor]:
        frozen = self.frozen()
        return {n: p for n, p in self.params.items() if n not in frozen}

    def num_params(self, block: str | None = None) -> int:
        return sum(p.size for n, p in self.params.items() if block is None or self.block_of(n) == block)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def fill_missing_grads(self):
        """Parameters not reached by backward() get an explicit zero gradient."""
        for p in self.params.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)

    # -- forward pieces
    def _conv(self, x, layer, params=None):
        p = params or self.params
        return relu(conv2d(x, p[f"backbone.{layer}.weight"], p[f"backbone.{layer}.bias"], stride=2, padding=1))

    def backbone_forward(self, frames: Tensor) -> dict[str, Tensor]:
        """Per-frame taps, each shaped [B, N, C, s, s]."""
        size = self.config.backbone.input_size
        if frames.ndim != 5 or frames.shape[2] != 3 or frames.shape[3:] != (size, size):
            raise ShapeError(f"expected frames [B, N, 3, {size}, {size}], got {frames.shape}")
        b, n = frames.shape[:2]
        bb = self.config.backbone
        x = reshape(frames, (b * n, 3, size, size))
        x = (x - bb.input_mean) * (1.0 / bb.input_std)
        if self.config.freeze_lower:
            with no_grad():
                t3, t4 = self._lower(x)
            t3, t4 = Tensor(t3.data), Tensor(t4.data)
        else:
            t3, t4 = self._lower(x)
        t5 = self._conv(t4, "conv5")
        return {name: reshape(t, (b, n) + t.shape[1:]) for name, t in zip(TAPS, (t3, t4, t5))}

    def _lower(self, x):
        t3 = self._conv(self._conv(x, "stem"), "conv3")
        return t3, self._conv(t3, "conv4")

    def ms_head_forward(self, tap: Tensor):
        """Motion logits and probabilities [B, N, s*s] from one tap, frame by frame."""
        cfg = self.config
        if "ms_head.conv.weight" not in self.params:
            raise ConfigError("model was built without an MS head")
        p = self.params
        b, n, c, s, _ = tap.shape
        if c != p["ms_head.conv.weight"].shape[1] or s * s != p["ms_head.fc.bias"].shape[0]:
            raise ConfigError(f"MS head configured for tap {cfg.ms.tap}, got features {tap.shape}")
        x = reshape(tap, (b * n, c, s, s))
        x = relu(conv2d(x, p["ms_head.conv.weight"], p["ms_head.conv.bias"], stride=1, padding=1))
        logits = linear(reshape(x, (b * n, -1)), p["ms_head.fc.weight"], p["ms_head.fc.bias"])
        probs = softmax(logits, axis=-1) if cfg.ms.final == "softmax" else sigmoid(logits)
        return reshape(logits, (b, n, s * s)), reshape(probs, (b, n, s * s))

    def classifier_forward(self, state: ConvLSTMState):
        b, ch = state.h.shape[:2]
        pooled = reshape(avg_pool2d(state.h, global_pool=True), (b, ch))
        p = self.params
        if self.config.multitask:
            return (linear(pooled, p["classifier.verb.weight"], p["classifier.verb.bias"]),
                    linear(pooled, p["classifier.noun.weight"], p["classifier.noun.bias"]))
        return linear(pooled, p["classifier.fc.weight"], p["classifier.fc.bias"])

    def forward(self, frames, keep_taps: bool = False) -> ModelOutput:
        cfg = self.config
        if not isinstance(frames, Tensor):
            frames = Tensor(np.asarray(frames, dtype=self.dtype))
        taps = self.backbone_forward(frames)
        out = ModelOutput(taps=taps if keep_taps else None)
        if cfg.ms_on:
            out.motion_logits, out.motion_probs = self.ms_head_forward(taps[cfg.ms.tap])
        t5 = taps["T5"]
        b, n, c5, s, _ = t5.shape
        if cfg.cam_on:
            if "cam.fc.weight" not in self.params:
                raise ConfigError("cam_on requires CAM classifier weights")
            att_feat, att = cam_attention(reshape(t5, (b * n, c5, s, s)),
                                          self.params["cam.fc.weight"], self.params["cam.fc.bias"])
            t5 = reshape(att_feat, (b, n, c5, s, s))
            out.attention = reshape(att, (b, n, s, s))
        p = self.params
        w_x, w_h, bias = p["convlstm.gates.weight_x"], p["convlstm.gates.weight_h"], p["convlstm.gates.bias"]
        weight = concat([w_x, w_h], axis=1)
        state = ConvLSTMState.zeros(b, cfg.hidden, s, self.dtype)
        for k in range(n):
            state = convlstm_step(t5[:, k], state, w_x, w_h, bias, weight=weight)
        logits = self.classifier_forward(state)
        if cfg.multitask:
            out.verb_logits, out.noun_logits = logits
        else:
            out.class_logits = logits
        return out

    __call__ = forward

    # -- persistence
    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        missing = set(self.params) - set(state)
        if missing:
            raise ConfigError(f"checkpoint lacks {sorted(missing)}")
        for n, p in self.params.items():
            if state[n].shape != p.shape:
                raise ShapeError(f"{n}: checkpoint {state[n].shape} vs model {p.shape}")
            p.data = np.asarray(state[n], dtype=self.dtype).copy()


def save_checkpoint(model: SparNet, directory, extra: dict | None = None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, p in model.params.items():
        sptn.save(d / f"{name}.sptn", p.data)
    header = {"model": model.config.to_dict(), "rng": model.streams.cursors(), **(extra or {})}
    (d / "header.json").write_text(json.dumps(header, indent=1, sort_keys=True, default=_json_default) + "\n")


def load_checkpoint(directory) -> tuple[SparNet, dict]:
    d = Path(directory)
    header = json.loads((d / "header.json").read_text())
    model = SparNet(ModelConfig.from_dict(header["model"]))
    model.load_state_dict({n: sptn.load(d / f"{n}.sptn") for n in model.params})
    return model, header


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))
