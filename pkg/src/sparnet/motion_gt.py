"""Unsupervised moving/static ground truth from video.

Dense flow by pyramidal block matching, Harris keypoints, RANSAC homography
between adjacent frames, forward-backward checked point tracks over a
10-frame window, and rasterisation of the tracks that move relative to the
camera into a full-resolution mask and an s x s soft map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy import ndimage

from .rng import make_stream


class ConfigError(ValueError):
    pass


class EstimationError(RuntimeError):
    pass


# ---------------------------------------------------------------- data types

@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        if self.valid is None:
            self.valid = np.ones(self.u.shape, dtype=bool)

    @property
    def shape(self):
        return self.u.shape

    def magnitude(self):
        return np.hypot(self.u, self.v)


@dataclass
class TrajectorySet:
    start: int
    points: np.ndarray  # [K, L+1, 2] as (x, y)
    valid: np.ndarray   # [K]

    @property
    def length(self) -> int:
        """Number of tracked steps."""
        return self.points.shape[1] - 1

    def __len__(self):
        return len(self.points)


@dataclass
class MotionMap:
    values: np.ndarray  # [s, s] in [0, 1]
    mask: np.ndarray    # [H, W] bool

    def vector(self) -> np.ndarray:
        return self.values.reshape(-1)


@dataclass
class GTConfig:
    levels: int = 3
    block: int = 5            # below the dense_flow default so object edges drag less background
    radius: int = 3
    seed_step: int = 2
    seed_quality: float = 0.001
    match_step: int = 6
    ransac_iters: int = 500
    inlier_px: float = 1.5
    traj_len: int = 10
    fb_thresh: float = 1.0
    tau_move: float = 0.8
    stamp: int = 5
    rescale_height: int | None = None


# ---------------------------------------------------------------- helpers

def to_gray(frame) -> np.ndarray:
    """[3, H, W] or [H, W, 3] RGB (uint8 or float) -> float32 [H, W] in [0, 1]."""
    f = np.asarray(frame)
    if f.ndim == 2:
        g = f.astype(np.float32)
    else:
        if f.shape[0] == 3 and f.shape[-1] != 3:
            f = np.moveaxis(f, 0, -1)
        g = f.astype(np.float32) @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
    if np.asarray(frame).dtype == np.uint8:
        g = g / 255.0
    return g.astype(np.float32)


def box_sum(x: np.ndarray, k: int) -> np.ndarray:
    """Sum over a k x k window centred on each pixel of the last two axes (edge-replicated)."""
    x = np.asarray(x, dtype=np.float32)
    flat = x.reshape((-1,) + x.shape[-2:])
    out = np.empty_like(flat)
    for i, img in enumerate(flat):
        out[i] = cv2.boxFilter(img, -1, (k, k), normalize=False, borderType=cv2.BORDER_REPLICATE)
    return out.reshape(x.shape)


def bilinear(img: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Sample [H, W] at (x, y) points with edge clamping."""
    h, w = img.shape
    x = np.clip(pts[:, 0], 0, w - 1)
    y = np.clip(pts[:, 1], 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(int), w - 2) if w > 1 else np.zeros(len(x), int)
    y0 = np.minimum(np.floor(y).astype(int), h - 2) if h > 1 else np.zeros(len(y), int)
    fx, fy = x - x0, y - y0
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _downsample2(img):
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    return img[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def _upsample_flow(u, shape):
    up = np.repeat(np.repeat(u, 2, axis=0), 2, axis=1) * 2
    out = np.zeros(shape, dtype=u.dtype)
    h, w = min(shape[0], up.shape[0]), min(shape[1], up.shape[1])
    out[:h, :w] = up[:h, :w]
    if h < shape[0]:
        out[h:, :w] = out[h - 1:h, :w]
    if w < shape[1]:
        out[:, w:] = out[:, w - 1:w]
    return out


def _offsets(r):
    # nearest displacement first, so flat regions resolve to zero motion
    offs = [(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
    offs.sort(key=lambda d: (d[0] * d[0] + d[1] * d[1], d[1], d[0]))
    return np.array(offs, dtype=int)


# ---------------------------------------------------------------- dense flow

def dense_flow(frame_a, frame_b, levels=3, block=7, radius=3) -> FlowField:
    """Coarse-to-fine block-matching flow from ``frame_a`` to ``frame_b``.

    ``frame_a(p)`` matches ``frame_b(p + flow(p))``. Integer search of
    +/-``radius`` at each pyramid level, parabolic sub-pixel refinement at the
    finest level.
    """
    a = to_gray(frame_a)
    b = to_gray(frame_b)
    if a.shape != b.shape:
        raise ValueError(f"frame sizes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < 16:
        raise ConfigError(f"frames must be at least 16x16, got {a.shape}")
    if min(a.shape) >> (levels - 1) < 4:
        raise ConfigError(f"{levels} pyramid levels too many for {a.shape}")
    pyr = [(a, b)]
    for _ in range(levels - 1):
        pa, pb = pyr[-1]
        pyr.append((_downsample2(pa), _downsample2(pb)))
    offs = _offsets(radius)
    u = v = None
    for lvl in range(levels - 1, -1, -1):
        la, lb = pyr[lvl]
        if u is None:
            u = np.zeros(la.shape, np.float32)
            v = np.zeros(la.shape, np.float32)
        else:
            # median filtering keeps coarse-level mismatches from propagating
            u = _upsample_flow(ndimage.median_filter(u, size=5, mode="nearest"), la.shape)
            v = _upsample_flow(ndimage.median_filter(v, size=5, mode="nearest"), la.shape)
        u, v = _match_level(la, lb, u, v, offs, radius, block, subpixel=(lvl == 0))
    return FlowField(u.astype(np.float32), v.astype(np.float32))


def _unique_pairs(x, y):
    x0, y0 = x.min(), y.min()
    span = int(y.max() - y0) + 1
    keys = np.unique((x - x0) * span + (y - y0))
    return np.stack([keys // span + x0, keys % span + y0], axis=1)


def _ssd_volumes(a, b, disp, block):
    """Block SSD between a(q) and b(q + d) for each absolute displacement d (edge-clamped)."""
    h, w = a.shape
    m = int(np.abs(disp).max()) if len(disp) else 0
    bp = np.pad(b, m, mode="edge")
    vols = np.empty((len(disp), h, w), dtype=np.float32)
    for i, (dx, dy) in enumerate(disp):
        d = a - bp[m + dy:m + dy + h, m + dx:m + dx + w]
        vols[i] = d * d
    return box_sum(vols, block)


def _match_level(a, b, u, v, offs, radius, block, subpixel):
    h, w = a.shape
    bu = np.rint(u).astype(int)
    bv = np.rint(v).astype(int)
    # every block is compared at the base displacement of its centre pixel, so
    # costs come from one volume per absolute displacement
    bases = _unique_pairs(bu.ravel(), bv.ravel())
    cand = (bases[:, None, :] + offs[None, :, :]).reshape(-1, 2)
    disp = _unique_pairs(cand[:, 0], cand[:, 1])
    vols = _ssd_volumes(a, b, disp, block).reshape(len(disp), -1)
    n_pix = h * w
    pix = np.arange(n_pix)
    lo = disp.min(axis=0)
    span = disp.max(axis=0) - lo + 1
    lut = np.full(span[1] * span[0], -1, dtype=np.int64)
    lut[(disp[:, 1] - lo[1]) * span[0] + disp[:, 0] - lo[0]] = np.arange(len(disp))
    pos0 = (bv.ravel() - lo[1]) * span[0] + (bu.ravel() - lo[0])
    flat_vols = vols.reshape(-1)

    def cost(dx, dy):
        return flat_vols[lut[pos0 + dy * span[0] + dx] * n_pix + pix]

    if len(bases) == 1:
        costs = vols[lut[pos0[0] + offs[:, 1] * span[0] + offs[:, 0]]]
    else:
        costs = cost(offs[:, :1], offs[:, 1:])
    best = np.argmin(costs, axis=0)
    bx, by = offs[best, 0], offs[best, 1]
    du, dv = bx.astype(np.float32), by.astype(np.float32)
    if subpixel:
        c0 = costs[best, pix]
        exact = c0 <= 1e-12
        for axis in (0, 1):
            base = bx if axis == 0 else by
            ok = np.abs(base) < radius
            step = np.where(ok, 1, 0)
            if axis == 0:
                cm, cp = cost(bx - step, by), cost(bx + step, by)
            else:
                cm, cp = cost(bx, by - step), cost(bx, by + step)
            denom = cm - 2 * c0 + cp
            ok &= (denom > 1e-12) & ~exact
            delta = np.where(ok, (cm - cp) / (2 * np.where(ok, denom, 1)), 0).clip(-0.5, 0.5)
            if axis == 0:
                du = du + delta
            else:
                dv = dv + delta
    return bu + du.reshape(h, w), bv + dv.reshape(h, w)


# ---------------------------------------------------------------- keypoints

def harris_response(frame, k=0.04, window=3) -> np.ndarray:
    g = to_gray(frame).astype(np.float64)
    ix = ndimage.sobel(g, axis=1, mode="nearest")
    iy = ndimage.sobel(g, axis=0, mode="nearest")
    sxx = ndimage.uniform_filter(ix * ix, window, mode="nearest")
    syy = ndimage.uniform_filter(iy * iy, window, mode="nearest")
    sxy = ndimage.uniform_filter(ix * iy, window, mode="nearest")
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def detect_corners(frame, k=0.04, window=3, nms_radius=4, max_corners=200, border=4,
                   rel_threshold=0.01) -> np.ndarray:
    """Harris corners as an [K, 2] array of (x, y), ordered by (response desc, row, col)."""
    r = harris_response(frame, k, window)
    peak = r.max()
    if not np.isfinite(peak) or peak <= 1e-10:
        return np.zeros((0, 2), dtype=np.float64)
    cand = (r > rel_threshold * peak) & (r == ndimage.maximum_filter(r, size=2 * nms_radius + 1, mode="nearest"))
    if border:
        cand[:border] = cand[-border:] = False
        cand[:, :border] = cand[:, -border:] = False
    ys, xs = np.nonzero(cand)
    resp = r[ys, xs]
    order = np.lexsort((xs, ys, -resp))
    ys, xs = ys[order], xs[order]
    kept_y, kept_x = [], []
    occupied = np.zeros(r.shape, dtype=bool)
    for y, x in zip(ys, xs):
        if occupied[y, x]:
            continue
        kept_y.append(y)
        kept_x.append(x)
        occupied[max(0, y - nms_radius):y + nms_radius + 1, max(0, x - nms_radius):x + nms_radius + 1] = True
        if len(kept_y) == max_corners:
            break
    return np.stack([np.array(kept_x, float), np.array(kept_y, float)], axis=1) if kept_y else np.zeros((0, 2))


def grid_seeds(frame, step=2, quality=0.001, border=4, window=3) -> np.ndarray:
    """Dense trajectory seeds: grid points every ``step`` px whose structure tensor
    minimum eigenvalue exceeds ``quality`` times the frame maximum. Row-major order."""
    g = to_gray(frame).astype(np.float64)
    ix = ndimage.sobel(g, axis=1, mode="nearest")
    iy = ndimage.sobel(g, axis=0, mode="nearest")
    sxx = ndimage.uniform_filter(ix * ix, window, mode="nearest")
    syy = ndimage.uniform_filter(iy * iy, window, mode="nearest")
    sxy = ndimage.uniform_filter(ix * iy, window, mode="nearest")
    eig = (sxx + syy) / 2 - np.sqrt(((sxx - syy) / 2) ** 2 + sxy ** 2)
    peak = eig.max()
    if peak <= 1e-12:
        return np.zeros((0, 2))
    h, w = g.shape
    ys, xs = np.mgrid[border:h - border:step, border:w - border:step]
    keep = eig[ys, xs] > quality * peak
    return np.stack([xs[keep], ys[keep]], axis=1).astype(np.float64)


# ---------------------------------------------------------------- homography

def _normalizer(pts):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2) / d if d > 1e-12 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1]])


def _dlt_rows(src, dst):
    """Stacked DLT equations; src/dst [..., n, 2] -> [..., 2n, 9]."""
    x, y = src[..., 0], src[..., 1]
    u, v = dst[..., 0], dst[..., 1]
    z, o = np.zeros_like(x), np.ones_like(x)
    r1 = np.stack([-x, -y, -o, z, z, z, u * x, u * y, u], axis=-1)
    r2 = np.stack([z, z, z, -x, -y, -o, v * x, v * y, v], axis=-1)
    return np.concatenate([r1, r2], axis=-2)


def _normalize_h(h):
    if abs(h[2, 2]) > 1e-12:
        h = h / h[2, 2]
    return h


def dlt_homography(src, dst) -> np.ndarray:
    """Normalised DLT over all given correspondences."""
    src, dst = np.asarray(src, float), np.asarray(dst, float)
    ts, td = _normalizer(src), _normalizer(dst)
    ps = _apply(ts, src)
    pd = _apply(td, dst)
    _, _, vt = np.linalg.svd(_dlt_rows(ps, pd), full_matrices=False)
    hn = vt[-1].reshape(3, 3)
    return _normalize_h(np.linalg.inv(td) @ hn @ ts)


def _apply(h, pts):
    p = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ h.T
    return p[:, :2] / p[:, 2:3]


def project(h, pts) -> np.ndarray:
    """Map (x, y) points through a homography; points sent to w~0 come back as nan."""
    pts = np.asarray(pts, float)
    p = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ np.asarray(h, float).T
    w = p[:, 2:3]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = p[:, :2] / w
    out[np.abs(w[:, 0]) < 1e-9] = np.nan
    return out


def transfer_error(h, src, dst) -> np.ndarray:
    e = np.linalg.norm(project(h, src) - dst, axis=1)
    return np.where(np.isfinite(e), e, np.inf)


def _degenerate(pts, eps=1e-6):
    """[S, 4, 2] -> bool [S]: any three of the four points (nearly) collinear."""
    bad = np.zeros(len(pts), dtype=bool)
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        a, b, c = pts[:, i], pts[:, j], pts[:, k]
        area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
        bad |= np.abs(area) < eps
    return bad


def estimate_homography(src, dst, iters=500, inlier_px=1.5, rng=None, seed=0):
    """RANSAC over 4-point DLT solves, refit on the winning consensus set.

    Returns ``(H, inlier_mask)``. The winner has the most inliers, ties broken
    by the lower summed inlier transfer error. The final mask is recomputed
    under the refitted homography.
    """
    src, dst = np.asarray(src, float), np.asarray(dst, float)
    n = len(src)
    if n < 4 or len(dst) != n:
        raise EstimationError(f"need at least 4 matches, got {n}")
    rng = rng if rng is not None else make_stream(seed, "ransac")
    ts, td = _normalizer(src), _normalizer(dst)
    ps, pd = _apply(ts, src), _apply(td, dst)
    samples = np.argpartition(rng.random((iters, n)), 3, axis=1)[:, :4]
    ok = ~(_degenerate(ps[samples]) | _degenerate(pd[samples]))
    if not ok.any():
        raise EstimationError("every RANSAC sample was degenerate")
    samples = samples[ok]
    _, _, vt = np.linalg.svd(_dlt_rows(ps[samples], pd[samples]))
    hs = vt[:, -1].reshape(-1, 3, 3)
    denorm = np.linalg.inv(td)[None] @ hs @ ts[None]
    hom = np.concatenate([src, np.ones((n, 1))], axis=1)
    proj = np.matmul(hom[None], denorm.transpose(0, 2, 1))
    with np.errstate(divide="ignore", invalid="ignore"):
        xy = proj[..., :2] / proj[..., 2:3]
        err = np.linalg.norm(xy - dst[None], axis=2)
    err = np.where(np.isfinite(err), err, np.inf)
    inl = err <= inlier_px
    counts = inl.sum(axis=1)
    total = np.where(inl, err, 0).sum(axis=1)
    best = np.lexsort((total, -counts))[0]
    if counts[best] < 4:
        raise EstimationError("no consensus set of 4 or more matches")
    mask = inl[best]
    h = _normalize_h(denorm[best])
    for _ in range(5):
        try:
            h_new = dlt_homography(src[mask], dst[mask])
        except np.linalg.LinAlgError:
            break
        new_mask = transfer_error(h_new, src, dst) <= inlier_px
        if new_mask.sum() < 4:
            break
        h = h_new
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    mask = transfer_error(h, src, dst) <= inlier_px
    if abs(np.linalg.det(h)) <= 1e-9:
        raise EstimationError("estimated homography is singular")
    return h, mask


# ---------------------------------------------------------------- camera and warp flow

def camera_flow(h, size) -> FlowField:
    """Per-pixel displacement induced by homography ``h`` on an (H, W) grid."""
    hgt, wid = size
    ys, xs = np.mgrid[0:hgt, 0:wid]
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
    q = project(h, pts)
    valid = np.isfinite(q).all(axis=1)
    d = np.where(valid[:, None], q - pts, 0.0)
    return FlowField(d[:, 0].reshape(size), d[:, 1].reshape(size), valid.reshape(size))


def warp_flow(flow: FlowField, cam: FlowField) -> FlowField:
    if flow.shape != cam.shape:
        raise ValueError(f"flow {flow.shape} vs camera flow {cam.shape}")
    valid = flow.valid & cam.valid
    return FlowField(np.where(valid, flow.u - cam.u, 0), np.where(valid, flow.v - cam.v, 0), valid)


# ---------------------------------------------------------------- trajectories

def track_trajectories(frames, seeds, length=10, flows=None, fb_thresh=1.0, start=0,
                       flow_kw=None) -> TrajectorySet:
    """Follow ``seeds`` (x, y) through ``length`` frame-to-frame steps.

    Each step moves a point by the block-matching flow at its position;
    the matching backward flow must bring it back within ``fb_thresh`` px,
    and the point must stay inside the image, or the track is invalid.
    ``flows`` may supply precomputed (forward, backward) pairs per step.
    """
    if flows is None:
        if len(frames) < length + 1:
            raise ValueError(f"need {length + 1} frames, got {len(frames)}")
        kw = flow_kw or {}
        flows = [(dense_flow(frames[k], frames[k + 1], **kw), dense_flow(frames[k + 1], frames[k], **kw))
                 for k in range(length)]
    if len(flows) < length:
        raise ValueError(f"need {length} flow pairs, got {len(flows)}")
    h, w = flows[0][0].shape
    seeds = np.asarray(seeds, float).reshape(-1, 2)
    pts = np.zeros((len(seeds), length + 1, 2))
    pts[:, 0] = seeds
    valid = np.ones(len(seeds), dtype=bool)
    for k in range(length):
        fwd, bwd = flows[k]
        p = pts[:, k]
        step = np.stack([bilinear(fwd.u, p), bilinear(fwd.v, p)], axis=1)
        q = p + step
        inside = (q[:, 0] >= 0) & (q[:, 0] <= w - 1) & (q[:, 1] >= 0) & (q[:, 1] <= h - 1)
        back = q + np.stack([bilinear(bwd.u, q), bilinear(bwd.v, q)], axis=1)
        valid &= inside & (np.linalg.norm(back - p, axis=1) < fb_thresh)
        pts[:, k + 1] = np.where(inside[:, None], q, p)
    return TrajectorySet(start=start, points=pts, valid=valid)


# ---------------------------------------------------------------- motion maps

def area_weights(n_in: int, n_out: int, lo: float = 0.0, hi: float | None = None) -> np.ndarray:
    """[n_out, n_in] matrix averaging the span [lo, hi) of an axis into n_out equal cells."""
    hi = float(n_in) if hi is None else float(hi)
    edges = np.linspace(lo, hi, n_out + 1)
    pix = np.arange(n_in)
    a0 = np.maximum(edges[:-1, None], pix[None, :])
    a1 = np.minimum(edges[1:, None], pix[None, :] + 1)
    wts = np.clip(a1 - a0, 0, None)
    return wts / (edges[1:] - edges[:-1])[:, None]


def area_downsample(mask, s, box=None) -> np.ndarray:
    """Area-average ``mask`` (or its ``box`` = (x0, y0, x1, y1) region) to s x s."""
    m = np.asarray(mask, dtype=np.float64)
    h, w = m.shape
    x0, y0, x1, y1 = box if box is not None else (0, 0, w, h)
    if s > min(y1 - y0, x1 - x0):
        raise ConfigError(f"map size {s} exceeds region {y1 - y0}x{x1 - x0}")
    return area_weights(h, s, y0, y1) @ m @ area_weights(w, s, x0, x1).T


def moving_tracks(traj: TrajectorySet, camera_flows, tau_move=0.8) -> np.ndarray:
    """Valid tracks whose mean per-step residual to camera motion exceeds ``tau_move``."""
    steps = traj.points[:, 1:] - traj.points[:, :-1]
    resid = np.zeros(steps.shape[:2])
    for k in range(traj.length):
        cam = camera_flows[k]
        p = traj.points[:, k]
        cf = np.stack([bilinear(cam.u, p), bilinear(cam.v, p)], axis=1)
        resid[:, k] = np.linalg.norm(steps[:, k] - cf, axis=1)
    return traj.valid & (resid.mean(axis=1) > tau_move)


def stamp_mask(points, size, stamp=5) -> np.ndarray:
    h, w = size
    mask = np.zeros(size, dtype=bool)
    r = stamp // 2
    for x, y in np.rint(np.asarray(points).reshape(-1, 2)).astype(int):
        mask[max(0, y - r):min(h, y + r + 1), max(0, x - r):min(w, x + r + 1)] = True
    return mask


def build_motion_map(traj: TrajectorySet, camera_flows, size, s, offset=0, tau_move=0.8,
                     stamp=5) -> MotionMap:
    """Stamp moving tracks (at their position ``offset`` steps into the window) and downsample."""
    if s > min(size):
        raise ConfigError(f"map size {s} larger than image {size}")
    moving = moving_tracks(traj, camera_flows, tau_move) if len(traj) else np.zeros(0, bool)
    mask = stamp_mask(traj.points[moving, offset] if len(traj) else [], size, stamp)
    return MotionMap(area_downsample(mask, s), mask)


# ---------------------------------------------------------------- flow encoding and export

def encode_flow_rgb(flow: FlowField, m_max: float) -> np.ndarray:
    """(cos, sin, magnitude) encoding in [0, 1], shape [H, W, 3]."""
    if m_max <= 0:
        raise ValueError("m_max must be positive")
    mag = np.hypot(flow.u, flow.v)
    safe = np.where(mag > 0, mag, 1.0)
    c = np.where(mag > 0, flow.u / safe, 0.0)
    s = np.where(mag > 0, flow.v / safe, 0.0)
    return np.stack([(c + 1) / 2, (s + 1) / 2, np.minimum(mag / m_max, 1.0)], axis=-1)


def decode_flow_rgb(rgb: np.ndarray, m_max: float) -> FlowField:
    c = rgb[..., 0] * 2 - 1
    s = rgb[..., 1] * 2 - 1
    mag = rgb[..., 2] * m_max
    return FlowField(c * mag, s * mag)


def write_pgm(path, masks) -> None:
    """Binary P5 images (0/255), one per mask, concatenated into one file."""
    masks = np.asarray(masks)
    if masks.ndim == 2:
        masks = masks[None]
    with open(path, "wb") as f:
        for m in masks:
            f.write(f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode("ascii"))
            f.write(np.where(np.asarray(m) > 0, 255, 0).astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    data = open(path, "rb").read()
    out, pos = [], 0
    while pos < len(data):
        fields = []
        while len(fields) < 4:
            while data[pos:pos + 1].isspace():
                pos += 1
            end = pos
            while not data[end:end + 1].isspace():
                end += 1
            fields.append(data[pos:end])
            pos = end
        pos += 1
        if fields[0] != b"P5":
            raise ValueError("not a P5 file")
        w, h = int(fields[1]), int(fields[2])
        out.append(np.frombuffer(data, np.uint8, w * h, pos).reshape(h, w))
        pos += w * h
    return np.stack(out)


def write_ppm(path, rgb01) -> None:
    img = np.clip(np.rint(np.asarray(rgb01) * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        f.write(img.tobytes())


# ---------------------------------------------------------------- per-clip pipeline

@dataclass
class ClipMotion:
    masks: np.ndarray                      # [T, H, W] bool
    homographies: list = field(default_factory=list)  # frame t -> t+1
    n_moving: list = field(default_factory=list)


def clip_motion_masks(frames, cfg: GTConfig | None = None, seed: int = 0, clip_key: str = "") -> ClipMotion:
    """Moving-pixel masks for every frame of a clip.

    Frame t uses the ``traj_len``-step window starting at t, clamped so the
    window ends on the last frame; the mask stamps each moving track where it
    sits in frame t.
    """
    cfg = cfg or GTConfig()
    frames = np.asarray(frames)
    grays = [to_gray(f) for f in frames]
    native = grays[0].shape
    if cfg.rescale_height and cfg.rescale_height != native[0]:
        scale = cfg.rescale_height / native[0]
        dsize = (int(round(native[1] * scale)), cfg.rescale_height)
        grays = [cv2.resize(g, dsize, interpolation=cv2.INTER_LINEAR) for g in grays]
    size = grays[0].shape
    t_len, L = len(grays), cfg.traj_len
    if t_len < L + 1:
        raise ConfigError(f"clip of {t_len} frames shorter than one {L}-step window")
    fkw = dict(levels=cfg.levels, block=cfg.block, radius=cfg.radius)
    flows = [(dense_flow(grays[k], grays[k + 1], **fkw), dense_flow(grays[k + 1], grays[k], **fkw))
             for k in range(t_len - 1)]
    rng = make_stream(seed, f"ransac/{clip_key}")
    homs, cams = [], []
    for k in range(t_len - 1):
        fwd, bwd = flows[k]
        corners = grid_seeds(grays[k], cfg.match_step, cfg.seed_quality)
        hmat = np.eye(3)
        if len(corners) >= 4:
            q = corners + np.stack([bilinear(fwd.u, corners), bilinear(fwd.v, corners)], axis=1)
            back = q + np.stack([bilinear(bwd.u, q), bilinear(bwd.v, q)], axis=1)
            good = np.linalg.norm(back - corners, axis=1) < cfg.fb_thresh
            if good.sum() >= 4:
                try:
                    hmat, _ = estimate_homography(corners[good], q[good], cfg.ransac_iters, cfg.inlier_px, rng=rng)
                except EstimationError:
                    hmat = np.eye(3)
        homs.append(hmat)
        cams.append(camera_flow(hmat, size))
    masks = np.zeros((t_len,) + size, dtype=bool)
    n_moving = []
    cache = {}
    for t in range(t_len):
        w0 = min(t, t_len - 1 - L)
        if w0 not in cache:
            seeds = grid_seeds(grays[w0], cfg.seed_step, cfg.seed_quality)
            traj = track_trajectories(None, seeds, L, flows=flows[w0:w0 + L], fb_thresh=cfg.fb_thresh, start=w0)
            cache[w0] = (traj, moving_tracks(traj, cams[w0:w0 + L], cfg.tau_move))
        traj, moving = cache[w0]
        masks[t] = stamp_mask(traj.points[moving, t - w0], size, cfg.stamp)
        n_moving.append(int(moving.sum()))
    if size != native:
        masks = np.stack([cv2.resize(m.astype(np.uint8), (native[1], native[0]),
                                     interpolation=cv2.INTER_NEAREST) > 0 for m in masks])
    return ClipMotion(masks, homs, n_moving)
