"""Synthetic egocentric-like clips, dataset layout, frame sampling and augmentation.

Classes are defined by motion: the verb is the direction an object travels
relative to the scene, the noun is its shape. A slowly panning and rolling
camera moves the background, so raw frame differences do not give the
answer away.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from . import motion_gt, sptn
from .rng import make_stream

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
VERB_DIRECTIONS = {"left": (-1.0, 0.0), "right": (1.0, 0.0), "up": (0.0, -1.0), "down": (0.0, 1.0)}
SHAPES = ("circle", "square", "triangle")
# each shape draws from its own colour family, so the noun is an appearance cue
# and only the motion separates the verbs
PALETTES = {
    "circle": np.array([[0.90, 0.20, 0.20], [0.95, 0.80, 0.15], [0.95, 0.55, 0.10]]),
    "square": np.array([[0.20, 0.35, 0.90], [0.15, 0.80, 0.85], [0.55, 0.30, 0.95]]),
    "triangle": np.array([[0.20, 0.75, 0.25], [0.85, 0.30, 0.85], [0.95, 0.95, 0.95]]),
}


class SpecError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


# ---------------------------------------------------------------- scene description

@dataclass
class ObjectSpec:
    shape: str
    color: tuple
    size: float            # diameter / side length in px
    start: tuple           # world (x, y) of the centre at frame 0
    velocity: tuple        # world px per frame
    texture_seed: int = 0  # object-attached noise pattern


@dataclass
class CameraPath:
    translation: tuple = (0.0, 0.0)   # camera drift, px per frame
    rotation: float = 0.0             # degrees per frame, about the image centre

    def homography(self, t: int, size) -> np.ndarray:
        """World (frame-0) coordinates -> frame-t pixel coordinates."""
        h, w = size
        cx, cy = (w - 1) / 2, (h - 1) / 2
        th = math.radians(self.rotation * t)
        c, s = math.cos(th), math.sin(th)
        rot = np.array([[c, -s, cx - c * cx + s * cy], [s, c, cy - s * cx - c * cy], [0, 0, 1]])
        shift = np.array([[1, 0, -self.translation[0] * t], [0, 1, -self.translation[1] * t], [0, 0, 1]])
        return rot @ shift


@dataclass
class SceneSpec:
    height: int = 72
    width: int = 96
    length: int = 30
    texture_seed: int = 0
    objects: list = field(default_factory=list)
    camera: CameraPath = field(default_factory=CameraPath)
    label: int = 0
    verb: str = ""
    noun: str = ""

    def validate(self):
        if self.length < 11:
            raise SpecError(f"clip length {self.length} < 11 frames")
        if abs(self.camera.translation[0]) > 2 or abs(self.camera.translation[1]) > 2:
            raise SpecError("camera translation exceeds 2 px/frame")
        if abs(self.camera.rotation) > 1:
            raise SpecError("camera rotation exceeds 1 degree/frame")
        for ob in self.objects:
            if ob.shape not in SHAPES:
                raise SpecError(f"unknown shape {ob.shape!r}")
            for t in range(self.length):
                x0, y0, x1, y1 = object_bbox(ob, t, self.camera, (self.height, self.width))
                if x0 < 2 or y0 < 2 or x1 > self.width - 1 - 2 or y1 > self.height - 1 - 2:
                    raise SpecError(f"{ob.shape} leaves the frame at t={t}")


@dataclass
class VideoClip:
    frames: np.ndarray         # [T, 3, H, W] uint8
    masks: np.ndarray          # [T, H, W] bool, exact object support
    homographies: np.ndarray   # [T, 3, 3] world -> frame
    spec: SceneSpec


def object_center(ob: ObjectSpec, t: int):
    return ob.start[0] + ob.velocity[0] * t, ob.start[1] + ob.velocity[1] * t


def object_bbox(ob, t, camera, size):
    cx, cy = object_center(ob, t)
    r = ob.size / 2 + 1
    corners = np.array([[cx - r, cy - r], [cx + r, cy - r], [cx - r, cy + r], [cx + r, cy + r]])
    p = motion_gt.project(camera.homography(t, size), corners)
    return p[:, 0].min(), p[:, 1].min(), p[:, 0].max(), p[:, 1].max()


def _sdf(shape, dx, dy, size):
    half = size / 2
    if shape == "circle":
        return np.hypot(dx, dy) - half
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) - half
    # upward equilateral triangle inscribed in the size x size box
    k = math.sqrt(3)
    d_base = dy - half / 2 * k / 1.5
    d_right = (k * dx + dy) / 2 - half / 2
    d_left = (-k * dx + dy) / 2 - half / 2
    return np.maximum(d_base, np.maximum(d_right, d_left))


def _texture(seed, shape):
    rng = make_stream(seed, "texture")
    tex = np.stack([ndimage.gaussian_filter(rng.random(shape), 1.2) for _ in range(3)])
    lo = tex.min(axis=(1, 2), keepdims=True)
    hi = tex.max(axis=(1, 2), keepdims=True)
    return 0.15 + 0.6 * (tex - lo) / (hi - lo)


def _object_texture(ob: ObjectSpec):
    side = int(math.ceil(ob.size)) + 8
    rng = make_stream(ob.texture_seed, "object-texture")
    tex = ndimage.gaussian_filter(rng.random((side, side)), 1.0)
    tex = (tex - tex.min()) / (tex.max() - tex.min())
    return 0.45 + 0.55 * tex, side / 2


def gen_clip(spec: SceneSpec) -> VideoClip:
    """Render frames, exact object masks and the per-frame camera homographies."""
    spec.validate()
    h, w, n = spec.height, spec.width, spec.length
    margin = int(math.ceil(2 * n + 0.02 * n * (h + w))) + 8
    tex = _texture(spec.texture_seed, (h + 2 * margin, w + 2 * margin))
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    pix = np.stack([xs.ravel(), ys.ravel()], axis=1)
    frames = np.empty((n, 3, h, w), dtype=np.uint8)
    masks = np.zeros((n, h, w), dtype=bool)
    homs = np.empty((n, 3, 3))
    otex = {id(ob): _object_texture(ob) for ob in spec.objects}
    for t in range(n):
        hom = spec.camera.homography(t, (h, w))
        homs[t] = hom
        q = motion_gt.project(np.linalg.inv(hom), pix)
        coords = np.stack([q[:, 1] + margin, q[:, 0] + margin])
        img = np.stack([ndimage.map_coordinates(c, coords, order=1, mode="nearest") for c in tex])
        for ob in spec.objects:
            cx, cy = object_center(ob, t)
            dx, dy = q[:, 0] - cx, q[:, 1] - cy
            cover = np.clip(0.5 - _sdf(ob.shape, dx, dy, ob.size), 0.0, 1.0)
            shade = ndimage.map_coordinates(otex[id(ob)][0], [dy + otex[id(ob)][1], dx + otex[id(ob)][1]],
                                            order=1, mode="nearest")
            col = np.asarray(ob.color)[:, None] * shade[None]
            img = img * (1 - cover) + col * cover
            masks[t] |= (cover >= 0.5).reshape(h, w)
        frames[t] = np.clip(np.rint(img.reshape(3, h, w) * 255), 0, 255).astype(np.uint8)
    return VideoClip(frames, masks, homs, spec)


# ---------------------------------------------------------------- dataset

@dataclass
class DataConfig:
    verbs: tuple = ("left", "right", "up")
    nouns: tuple = ("circle", "square")
    train_per_class: int = 40
    test_per_class: int = 10
    height: int = 72
    width: int = 96
    length: int = 30
    speed: tuple = (1.2, 1.5)
    object_size: tuple = (15.0, 18.0)
    cam_translation: tuple = (0.5, 0.2)
    cam_rotation: float = 0.15
    n_frames: int = 7
    map_size: int = 4
    resize_height: int = 72
    crop: int = 64

    def validate(self):
        bad = [v for v in self.verbs if v not in VERB_DIRECTIONS] + [n for n in self.nouns if n not in SHAPES]
        if bad:
            raise SpecError(f"unknown verbs/nouns {bad}")
        if len(self.classes) < 2:
            raise SpecError("need at least two classes")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise SpecError("need at least one train and one test clip per class")
        if self.length < 11:
            raise SpecError(f"clip length {self.length} < 11 frames")
        if not 1 <= self.n_frames <= self.length:
            raise SpecError(f"cannot sample {self.n_frames} frames from {self.length}")
        if self.crop > self.resize_height or self.crop > round(self.width * self.resize_height / self.height):
            raise SpecError(f"crop {self.crop} does not fit the resized frame")
        if not (self.speed[0] <= self.speed[1] and self.object_size[0] <= self.object_size[1]):
            raise SpecError("ranges must be (min, max)")
        if max(self.cam_translation) > 2 or self.cam_rotation > 1:
            raise SpecError("camera motion limits are 2 px/frame and 1 degree/frame")
        return self

    @property
    def classes(self):
        return [f"{v}_{n}" for v in self.verbs for n in self.nouns]


def random_scene(verb: str, noun: str, label: int, cfg: DataConfig, rng) -> SceneSpec:
    """Draw a scene whose single object stays in view for the whole clip."""
    direction = np.array(VERB_DIRECTIONS[verb])
    for _ in range(200):
        speed = rng.uniform(*cfg.speed)
        size = rng.uniform(*cfg.object_size)
        cam = CameraPath((rng.uniform(-1, 1) * cfg.cam_translation[0], rng.uniform(-1, 1) * cfg.cam_translation[1]),
                         rng.uniform(-1, 1) * cfg.cam_rotation)
        vel = direction * speed
        travel = vel * (cfg.length - 1)
        pad = size / 2 + 4
        lo = np.array([pad, pad]) - np.minimum(travel, 0)
        hi = np.array([cfg.width - 1 - pad, cfg.height - 1 - pad]) - np.maximum(travel, 0)
        if np.any(hi <= lo):
            continue
        start = rng.uniform(lo, hi)
        color = PALETTES[noun][rng.integers(len(PALETTES[noun]))]
        spec = SceneSpec(cfg.height, cfg.width, cfg.length, int(rng.integers(2**31)),
                         [ObjectSpec(noun, tuple(color), size, tuple(start), tuple(vel), int(rng.integers(2**31)))],
                         cam, label, verb, noun)
        try:
            spec.validate()
        except SpecError:
            continue
        return spec
    raise SpecError(f"could not place a {noun} moving {verb} inside the frame")


def clip_ids(cfg: DataConfig):
    """(clip_id, class index, split) in manifest order; the split is stratified per class."""
    out = []
    per = cfg.train_per_class + cfg.test_per_class
    for c in range(len(cfg.classes)):
        for k in range(per):
            out.append((f"c{c:02d}_{k:03d}", c, "train" if k < cfg.train_per_class else "test"))
    return out


def gen_dataset(cfg: DataConfig, seed: int, root) -> dict:
    """Render every clip and write ``manifest.json``; returns the manifest."""
    cfg.validate()
    root = Path(root)
    created = not root.exists()
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    try:
        for clip_id, c, split in clip_ids(cfg):
            verb = cfg.verbs[c // len(cfg.nouns)]
            noun = cfg.nouns[c % len(cfg.nouns)]
            rng = make_stream(seed, f"clip/{clip_id}")
            clip = gen_clip(random_scene(verb, noun, c, cfg, rng))
            write_clip(root / "clips" / clip_id, clip)
            entries.append({"clip_id": clip_id, "path": f"clips/{clip_id}", "label": c, "verb": verb,
                            "noun": noun, "split": split, "T": cfg.length})
    except OSError:
        if created:
            shutil.rmtree(root, ignore_errors=True)
        else:
            shutil.rmtree(root / "clips", ignore_errors=True)
        raise
    manifest = {"version": MANIFEST_VERSION, "classes": cfg.classes, "verbs": list(cfg.verbs),
                "nouns": list(cfg.nouns), "seed": seed, "entries": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest


def write_clip(d: Path, clip: VideoClip):
    d.mkdir(parents=True, exist_ok=True)
    sptn.save(d / "frames.sptn", clip.frames)
    motion_gt.write_pgm(d / "masks.pgm", clip.masks)
    with open(d / "camera.txt", "w") as f:
        for hom in clip.homographies:
            f.write(" ".join(f"{v:.10g}" for v in hom.ravel()) + "\n")


def read_camera(path) -> np.ndarray:
    rows = [list(map(float, line.split())) for line in Path(path).read_text().splitlines() if line.strip()]
    return np.array(rows).reshape(-1, 3, 3)


def load_manifest(root) -> dict:
    return json.loads((Path(root) / "manifest.json").read_text())


def manifest_hash(root) -> str:
    return hashlib.sha256((Path(root) / "manifest.json").read_bytes()).hexdigest()


def gen_motion_maps(root, gt_cfg: motion_gt.GTConfig | None = None, n_frames=7, map_size=4,
                    resize_height=72, crop=64, seed=0, progress=None) -> None:
    """Compute moving-pixel masks for every clip plus the test-view maps [N, s, s]."""
    root = Path(root)
    manifest = load_manifest(root)
    for k, e in enumerate(manifest["entries"]):
        if progress and k % 25 == 0:
            progress(f"motion GT {k}/{len(manifest['entries'])}")
        d = root / e["path"]
        frames = sptn.load(d / "frames.sptn")
        cm = motion_gt.clip_motion_masks(frames, gt_cfg, seed=seed, clip_key=e["clip_id"])
        sptn.save(d / "motion_masks.sptn", cm.masks.astype(np.uint8))
        idx = sample_frames(len(frames), n_frames, "test")
        view = CropView.center(frames.shape[2:], resize_height, crop)
        maps = np.stack([view.map_of(cm.masks[i], map_size) for i in idx]).astype(np.float32)
        sptn.save(d / "motion_maps.sptn", maps)


# ---------------------------------------------------------------- sampling and preprocessing

def sample_frames(length: int, n: int, mode: str = "test", rng=None) -> list[int]:
    """Segment-based sampling of ``n`` indices from a ``length``-frame clip."""
    if n < 1 or n > length:
        raise ValueError(f"cannot sample {n} frames from {length}")
    if mode == "test":
        return [(2 * k * length + length) // (2 * n) for k in range(n)]
    if mode != "train":
        raise ValueError(f"unknown sampling mode {mode!r}")
    if rng is None:
        raise ValueError("train sampling needs an rng")
    out = []
    for k in range(n):
        lo, hi = (k * length) // n, ((k + 1) * length) // n
        out.append(int(rng.integers(lo, hi)))
    return out


@dataclass(frozen=True)
class CropView:
    """Where a network input comes from: resize to ``resize_height``, crop a box, resize to ``out``, maybe flip."""
    native: tuple
    resize_height: int
    box: tuple        # (x0, y0, x1, y1) in resized coordinates
    out: int
    flip: bool = False

    @property
    def resized(self):
        h, w = self.native
        return self.resize_height, int(round(w * self.resize_height / h))

    @classmethod
    def center(cls, native, resize_height=72, crop=64):
        return cls.corner(native, resize_height, crop, "center", 1.0, False)

    @classmethod
    def corner(cls, native, resize_height, crop, position, scale, flip):
        h, w = native
        rw = int(round(w * resize_height / h))
        side = int(round(crop * scale))
        if side > resize_height or side > rw or crop > min(resize_height, rw):
            raise ValueError(f"crop {side} does not fit a {resize_height}x{rw} frame")
        xs = {"left": 0, "center": (rw - side) // 2, "right": rw - side}
        ys = {"top": 0, "center": (resize_height - side) // 2, "bottom": resize_height - side}
        if position == "center":
            x0, y0 = xs["center"], ys["center"]
        else:
            vert, horiz = position.split("_")
            x0, y0 = xs[horiz], ys[vert]
        return cls(tuple(native), resize_height, (x0, y0, x0 + side, y0 + side), crop, flip)

    def image(self, frame) -> np.ndarray:
        """[3, H, W] uint8 -> [3, out, out] float32 in [0, 1]."""
        rh, rw = self.resized
        img = np.moveaxis(np.asarray(frame), 0, -1).astype(np.float32) / 255.0
        if (rh, rw) != img.shape[:2]:
            img = cv2.resize(img, (rw, rh), interpolation=cv2.INTER_LINEAR)
        x0, y0, x1, y1 = self.box
        img = img[y0:y1, x0:x1]
        if img.shape[0] != self.out:
            img = cv2.resize(img, (self.out, self.out), interpolation=cv2.INTER_LINEAR)
        if self.flip:
            img = img[:, ::-1]
        return np.ascontiguousarray(np.moveaxis(img, -1, 0))

    def map_of(self, mask, s) -> np.ndarray:
        """Soft s x s motion map of a native-resolution mask seen through this view."""
        h, w = self.native
        rh, rw = self.resized
        sy, sx = h / rh, w / rw
        x0, y0, x1, y1 = self.box
        m = motion_gt.area_downsample(mask, s, (x0 * sx, y0 * sy, x1 * sx, y1 * sy))
        return m[:, ::-1].copy() if self.flip else m


def preprocess(frame, mode="test", rng=None, resize_height=72, crop=64) -> np.ndarray:
    """Resize to ``resize_height`` keeping aspect, crop ``crop`` x ``crop`` (centre at test)."""
    native = np.asarray(frame).shape[1:]
    if mode == "test":
        return CropView.center(native, resize_height, crop).image(frame)
    if rng is None:
        raise ValueError("train preprocessing needs an rng")
    rh = resize_height
    rw = int(round(native[1] * rh / native[0]))
    if crop > min(rh, rw):
        raise ValueError(f"crop {crop} does not fit a {rh}x{rw} frame")
    x0 = int(rng.integers(0, rw - crop + 1))
    y0 = int(rng.integers(0, rh - crop + 1))
    return CropView(tuple(native), rh, (x0, y0, x0 + crop, y0 + crop), crop).image(frame)


# ---------------------------------------------------------------- samples

POSITIONS = ("center", "top_left", "top_right", "bottom_left", "bottom_right")
SCALES = (1.0, 0.875, 0.75)


@dataclass
class Sample:
    frames: np.ndarray        # [N, 3, crop, crop] float32
    maps: np.ndarray          # [N, s, s] float32
    label: int
    verb: int
    noun: int
    clip_id: str
    split: str
    indices: tuple = ()
    raw: np.ndarray | None = field(default=None, repr=False)      # [N, 3, H, W] uint8
    raw_masks: np.ndarray | None = field(default=None, repr=False)  # [N, H, W]


MIRROR_VERB = {"left": "right", "right": "left", "up": "up", "down": "down"}


def mirror_labels(sample: Sample, verbs, nouns) -> Sample:
    """Labels of the mirrored clip: a leftward motion becomes a rightward one."""
    verb = verbs.index(MIRROR_VERB[verbs[sample.verb]])
    return replace(sample, verb=verb, label=verb * len(nouns) + sample.noun)


def can_mirror(verb: str, verbs) -> bool:
    return MIRROR_VERB[verb] in verbs


def hflip(sample: Sample, verbs=None, nouns=None) -> Sample:
    """Mirror frames and maps; with the class vocabulary given, labels follow the motion."""
    out = replace(sample, frames=np.ascontiguousarray(sample.frames[..., ::-1]),
                  maps=np.ascontiguousarray(sample.maps[..., ::-1]))
    return mirror_labels(out, verbs, nouns) if verbs is not None else out


def apply_view(sample: Sample, view: CropView, s: int, verbs=None, nouns=None) -> Sample:
    frames = np.stack([view.image(f) for f in sample.raw])
    maps = np.stack([view.map_of(m, s) for m in sample.raw_masks]).astype(np.float32)
    out = replace(sample, frames=frames, maps=maps)
    return mirror_labels(out, verbs, nouns) if view.flip and verbs is not None else out


def draw_view(native, rng, resize_height=72, crop=64) -> CropView:
    position = POSITIONS[int(rng.integers(len(POSITIONS)))]
    scale = SCALES[int(rng.integers(len(SCALES)))]
    flip = bool(rng.random() < 0.5)
    return CropView.corner(native, resize_height, crop, position, scale, flip)


def augment(sample: Sample, rng, s: int, verbs, nouns, resize_height=72, crop=64) -> Sample:
    """One corner/scale/flip draw shared by every frame and motion map of the sample.

    A flip mirrors the motion too, so the verb label is mirrored with it; clips
    whose mirrored verb is not a class keep the drawn crop but skip the flip.
    """
    if sample.split != "train":
        raise ContractError("augmentation applies to training samples only")
    view = draw_view(sample.raw.shape[2:], rng, resize_height, crop)
    if view.flip and not can_mirror(verbs[sample.verb], verbs):
        view = replace(view, flip=False)
    return apply_view(sample, view, s, verbs, nouns)


class ClipStore:
    """In-memory view of a generated dataset."""

    def __init__(self, root, split=None):
        self.root = Path(root)
        self.manifest = load_manifest(root)
        self.classes = self.manifest["classes"]
        self.verbs = self.manifest["verbs"]
        self.nouns = self.manifest["nouns"]
        self.entries = [e for e in self.manifest["entries"] if split is None or e["split"] == split]
        self._frames = {}
        self._masks = {}
        for e in self.entries:
            d = self.root / e["path"]
            self._frames[e["clip_id"]] = sptn.load(d / "frames.sptn")
            mpath = d / "motion_masks.sptn"
            self._masks[e["clip_id"]] = sptn.load(mpath) if mpath.exists() else None

    def __len__(self):
        return len(self.entries)

    def has_motion(self) -> bool:
        return all(m is not None for m in self._masks.values())

    def sample(self, i, indices, view: CropView | None, s, resize_height=72, crop=64) -> Sample:
        e = self.entries[i]
        frames = self._frames[e["clip_id"]][list(indices)]
        masks = self._masks[e["clip_id"]]
        masks = masks[list(indices)] if masks is not None else np.zeros((len(indices),) + frames.shape[2:], np.uint8)
        view = view or CropView.center(frames.shape[2:], resize_height, crop)
        if view.flip and not can_mirror(e["verb"], self.verbs):
            view = replace(view, flip=False)
        raw = Sample(None, None, e["label"], self.verbs.index(e["verb"]), self.nouns.index(e["noun"]),
                     e["clip_id"], e["split"], tuple(indices), frames, masks)
        return apply_view(raw, view, s, self.verbs, self.nouns)
