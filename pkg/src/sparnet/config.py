"""Flat ``key = value`` run configuration.

One key per line, ``#`` starts a comment, keys are namespaced ``data.``,
``model.``, ``train.``, ``ablation.`` and ``gt.``. Unknown keys are an error.
Every key, its type and default live in :data:`KEYS`; docs/config.md mirrors it.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .data import DataConfig
from .models import BackboneConfig, ModelConfig, MSHeadConfig
from .motion_gt import GTConfig
from .train import TrainConfig

NAMESPACES = ("data", "model", "train", "ablation", "gt")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    kind: str          # int, float, bool, str, ints, floats, strs
    default: object
    doc: str


def _k(kind, default, doc):
    return Key(kind, default, doc)


KEYS: dict[str, Key] = {
    # data
    "data.seed": _k("int", 0, "dataset seed (scene draws, textures)"),
    "data.verbs": _k("strs", ("left", "right", "up"), "motion directions; each is a verb (left, right, up, down)"),
    "data.nouns": _k("strs", ("circle", "square"), "object shapes; each is a noun (circle, square, triangle)"),
    "data.train_per_class": _k("int", 40, "training clips per action class"),
    "data.test_per_class": _k("int", 10, "test clips per action class"),
    "data.height": _k("int", 72, "native frame height in px"),
    "data.width": _k("int", 96, "native frame width in px"),
    "data.length": _k("int", 30, "frames per clip (>= 11)"),
    "data.speed_min": _k("float", 1.2, "slowest object speed, px/frame"),
    "data.speed_max": _k("float", 1.5, "fastest object speed, px/frame"),
    "data.size_min": _k("float", 15.0, "smallest object diameter/side, px"),
    "data.size_max": _k("float", 18.0, "largest object diameter/side, px"),
    "data.cam_tx": _k("float", 0.5, "max camera drift in x, px/frame (<= 2)"),
    "data.cam_ty": _k("float", 0.2, "max camera drift in y, px/frame (<= 2)"),
    "data.cam_rot": _k("float", 0.15, "max camera roll, degrees/frame (<= 1)"),
    "data.resize_height": _k("int", 72, "frames are resized to this height before cropping"),
    # model
    "model.input_size": _k("int", 64, "network input side; also the crop size"),
    "model.stage_channels": _k("ints", (8, 32, 64, 128), "widths of stem, T3, T4, T5 stages"),
    "model.hidden": _k("int", 64, "ConvLSTM hidden channels"),
    "model.multitask": _k("bool", False, "separate verb and noun heads; action = p(verb) * p(noun)"),
    "model.ms_on": _k("bool", True, "build the motion-segmentation head"),
    "model.tap": _k("str", "T5", "backbone tap feeding the MS head (T3, T4, T5)"),
    "model.reduce_channels": _k("int", 32, "MS head conv width"),
    "model.ms_final": _k("str", "softmax", "MS head output nonlinearity (softmax, sigmoid)"),
    "model.cam_on": _k("bool", False, "modulate T5 features with CAM spatial attention"),
    "model.cam_position": _k("str", "pre_lstm", "where attention is applied; only pre_lstm exists"),
    "model.freeze_lower": _k("bool", False, "train only the last backbone stage (stem/T3/T4 frozen)"),
    "model.dtype": _k("str", "float32", "compute dtype (float32, float64)"),
    # train
    "train.epochs": _k("int", 30, "training epochs per seed"),
    "train.batch_size": _k("int", 8, "clips per batch"),
    "train.lr_backbone": _k("float", 5e-4, "ADAM learning rate for the backbone block"),
    "train.lr_ms_head": _k("float", 1e-3, "ADAM learning rate for the MS head"),
    "train.lr_convlstm": _k("float", 1e-3, "ADAM learning rate for the ConvLSTM"),
    "train.lr_classifier": _k("float", 1e-3, "ADAM learning rate for the classifier (and CAM classifier)"),
    "train.beta1": _k("float", 0.9, "ADAM beta1"),
    "train.beta2": _k("float", 0.999, "ADAM beta2"),
    "train.eps": _k("float", 1e-8, "ADAM epsilon"),
    "train.weight_decay": _k("float", 0.0, "decoupled L2 weight decay"),
    "train.ms_weight": _k("float", 1.0, "weight of the MS loss (0 or 1)"),
    "train.n_frames": _k("int", 7, "frames sampled per clip (N)"),
    "train.seeds": _k("ints", (11, 22, 33), "one run per seed"),
    "train.augment": _k("bool", True, "corner crop, scale jitter and flip at train time"),
    "train.checkpoints": _k("bool", True, "save a checkpoint per seed"),
    "train.train_eval": _k("bool", True, "central-crop pass over the training clips after the last epoch"),
    # ablation
    "ablation.grid": _k("str", "default", "variant grid name (default, minimal)"),
    "ablation.long_frames": _k("int", 25, "frame count of the long-sequence variants (clamped to clip length)"),
    # gt
    "gt.levels": _k("int", 3, "flow pyramid levels"),
    "gt.block": _k("int", 5, "flow block side for the GT pipeline, px"),
    "gt.radius": _k("int", 3, "flow search radius per level, px"),
    "gt.seed_step": _k("int", 2, "trajectory seed grid spacing, px"),
    "gt.seed_quality": _k("float", 0.001, "min-eigenvalue threshold for seeds and matches, relative to the frame max"),
    "gt.match_step": _k("int", 6, "grid spacing of homography matches, px"),
    "gt.ransac_iters": _k("int", 500, "RANSAC iterations"),
    "gt.inlier_px": _k("float", 1.5, "RANSAC inlier threshold, px"),
    "gt.traj_len": _k("int", 10, "trajectory length L in steps"),
    "gt.fb_thresh": _k("float", 1.0, "forward-backward error bound, px"),
    "gt.tau_move": _k("float", 0.8, "moving threshold on mean compensated step, px"),
    "gt.stamp": _k("int", 5, "side of the square stamped at each moving point"),
    "gt.rescale_height": _k("int", 0, "rescale frames to this height before GT (0 = native)"),
    "gt.seed": _k("int", 0, "RANSAC sampler seed"),
}


def _parse(kind, raw: str, key: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "str":
            return raw
        parts = tuple(p.strip() for p in raw.split(",") if p.strip())
        if kind == "ints":
            return tuple(int(p) for p in parts)
        if kind == "floats":
            return tuple(float(p) for p in parts)
        if kind == "strs":
            return parts
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    raise ConfigError(f"{key}: unknown kind {kind}")


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.values = {k: spec.default for k, spec in KEYS.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key, value):
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _parse(KEYS[key].kind, value, key) if isinstance(value, str) else value

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        rc = cls()
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key = value")
            key, val = (x.strip() for x in line.split("=", 1))
            try:
                rc.set(key, val)
            except ConfigError as e:
                raise ConfigError(f"line {n}: {e}") from None
        return rc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.parse(text)

    def override(self, pairs):
        for item in pairs or ():
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            k, v = item.split("=", 1)
            self.set(k.strip(), v)
        return self

    def dump(self) -> str:
        lines = [f"# sparnet {__version__}"]
        lines += [f"{k} = {format_value(v)}" for k, v in sorted(self.values.items())]
        return "\n".join(lines) + "\n"

    # -- typed views
    def data_config(self) -> DataConfig:
        v = self.values
        return DataConfig(
            verbs=tuple(v["data.verbs"]), nouns=tuple(v["data.nouns"]),
            train_per_class=v["data.train_per_class"], test_per_class=v["data.test_per_class"],
            height=v["data.height"], width=v["data.width"], length=v["data.length"],
            speed=(v["data.speed_min"], v["data.speed_max"]), object_size=(v["data.size_min"], v["data.size_max"]),
            cam_translation=(v["data.cam_tx"], v["data.cam_ty"]), cam_rotation=v["data.cam_rot"],
            n_frames=v["train.n_frames"], map_size=self.model_config().motion_size,
            resize_height=v["data.resize_height"], crop=v["model.input_size"])

    def model_config(self, num_verbs=None, num_nouns=None) -> ModelConfig:
        v = self.values
        nv = num_verbs or len(v["data.verbs"])
        nn = num_nouns or len(v["data.nouns"])
        return ModelConfig(
            backbone=BackboneConfig(v["model.input_size"], tuple(v["model.stage_channels"])),
            hidden=v["model.hidden"], num_classes=nv * nn, multitask=v["model.multitask"],
            num_verbs=nv, num_nouns=nn,
            ms=MSHeadConfig(v["model.tap"], v["model.reduce_channels"], v["model.ms_final"]),
            ms_on=v["model.ms_on"], cam_on=v["model.cam_on"], cam_position=v["model.cam_position"],
            freeze_lower=v["model.freeze_lower"], dtype=v["model.dtype"])

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            epochs=v["train.epochs"], batch_size=v["train.batch_size"],
            lr={b: v[f"train.lr_{b}"] for b in ("backbone", "ms_head", "convlstm", "classifier")},
            beta1=v["train.beta1"], beta2=v["train.beta2"], eps=v["train.eps"],
            weight_decay=v["train.weight_decay"], ms_weight=v["train.ms_weight"],
            n_frames=v["train.n_frames"], seeds=tuple(v["train.seeds"]), augment=v["train.augment"],
            checkpoints=v["train.checkpoints"], train_eval=v["train.train_eval"])

    def gt_config(self) -> GTConfig:
        v = self.values
        kw = {k[3:]: val for k, val in v.items() if k.startswith("gt.") and k != "gt.seed"}
        kw["rescale_height"] = kw["rescale_height"] or None
        return GTConfig(**kw)

    def validate(self):
        """Build every typed view so bad combinations surface before any work starts."""
        self.data_config()
        self.model_config().validate()
        self.train_config().validate()
        self.gt_config()
        if self.values["ablation.grid"] not in ("default", "minimal"):
            raise ConfigError(f"unknown ablation grid {self.values['ablation.grid']!r}")
        return self
