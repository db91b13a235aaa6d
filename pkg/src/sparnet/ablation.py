"""Variant grids, timing, and the ablation report."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

from .models import ModelConfig, MSHeadConfig, SparNet
from .train import TrainConfig, run_experiment

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("variant", "tap", "frames", "cam", "freeze_lower", "acc_mean", "acc_std",
                  "test_time_s", "train_time_per_epoch_s", "top5_mean", "ms_iou", "params", "status")
NUMERIC = {"frames": int, "acc_mean": float, "acc_std": float, "test_time_s": float,
           "train_time_per_epoch_s": float, "top5_mean": float, "ms_iou": float, "params": int}

# full-scale figures from the original study; not reproducible here
REFERENCE_NOTE = (
    "Full-scale reference (real egocentric video, ImageNet-pretrained ResNet-34; not reproducible "
    "at desk scale): baseline 73.85% top-1, with the MS task 80.88% (+7.03 points); "
    "training time overhead of the MS head 7.79% (3.24 s/epoch). Tap gaps there: "
    "conv5_x beats conv4_x by 0.58 points and conv3_x by 3.46 points."
)


@dataclass(frozen=True)
class VariantSpec:
    name: str
    ms_on: bool = False
    tap: str = "T5"
    n_frames: int = 7
    cam_on: bool = False
    freeze_lower: bool = False

    def validate(self):
        if self.tap not in ("T3", "T4", "T5"):
            raise ValueError(f"{self.name}: unknown tap {self.tap}")
        if self.n_frames < 1:
            raise ValueError(f"{self.name}: n_frames must be >= 1")

    @property
    def tap_label(self):
        return self.tap if self.ms_on else "-"


def default_grid(long_frames: int = 25) -> list[VariantSpec]:
    return [
        VariantSpec("baseline", False, "T5", 7),
        VariantSpec(f"baseline_n{long_frames}", False, "T5", long_frames),
        VariantSpec("sparnet_t3", True, "T3", 7),
        VariantSpec("sparnet_t4", True, "T4", 7),
        VariantSpec("sparnet_t5", True, "T5", 7),
        VariantSpec(f"sparnet_t5_n{long_frames}", True, "T5", long_frames),
        VariantSpec("sparnet_t5_cam", True, "T5", 7, cam_on=True),
        VariantSpec("sparnet_t5_cam_frozen", True, "T5", 7, cam_on=True, freeze_lower=True),
    ]


def minimal_grid(long_frames: int = 25) -> list[VariantSpec]:
    return [VariantSpec("baseline"), VariantSpec("sparnet_t5", True, "T5", 7)]


GRIDS = {"default": default_grid, "minimal": minimal_grid}


def variant_configs(v: VariantSpec, model: ModelConfig, train: TrainConfig, clip_length: int | None = None):
    frames = min(v.n_frames, clip_length) if clip_length else v.n_frames
    mc = replace(model, ms_on=v.ms_on, ms=replace(model.ms, tap=v.tap) if v.ms_on else model.ms,
                 cam_on=v.cam_on, freeze_lower=v.freeze_lower)
    tc = replace(train, n_frames=frames, ms_weight=1.0 if v.ms_on else 0.0)
    return mc, tc


def measure_timing(fn, *args, **kwargs) -> float:
    """Wall-clock seconds of one call (monotonic clock)."""
    t0 = time.perf_counter()
    fn(*args, **kwargs)
    return time.perf_counter() - t0


def run_grid(variants, model: ModelConfig, train: TrainConfig, data_root, out_dir=None, stores=None,
             clip_length=None, progress=None) -> list[dict]:
    """Run every variant over the configured seeds; a failing variant is recorded and skipped."""
    names = [v.name for v in variants]
    if len(set(names)) != len(names):
        raise ValueError("variant names must be unique")
    for v in variants:
        v.validate()
    rows = []
    for v in variants:
        mc, tc = variant_configs(v, model, train, clip_length)
        vdir = Path(out_dir) / "variants" / v.name if out_dir is not None else None
        row = {"variant": v.name, "tap": v.tap_label, "frames": tc.n_frames, "cam": v.cam_on,
               "freeze_lower": v.freeze_lower}
        try:
            res = run_experiment(mc, tc, data_root, vdir, v.name, progress=progress, stores=stores)
            agg = res.aggregate()
            row.update(acc_mean=agg["acc_mean"], acc_std=agg["acc_std"], test_time_s=agg["test_time_s_mean"],
                       train_time_per_epoch_s=agg["train_time_per_epoch_s_mean"], top5_mean=agg["top5_mean"],
                       ms_iou=agg["ms_iou_mean"], params=res.model_params,
                       status="failed" if res.failed else "ok")
        except Exception as exc:
            log.error("variant %s failed: %s", v.name, exc)
            nan = float("nan")
            row.update(acc_mean=nan, acc_std=nan, test_time_s=nan, train_time_per_epoch_s=nan, top5_mean=nan,
                       ms_iou=nan, params=SparNet(mc, seed=0).num_params(), status=f"failed: {exc}")
        rows.append(row)
    return rows


def _cell(col, v):
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([_cell(c, r[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def parse_csv(text: str) -> list[dict]:
    out = []
    for r in csv.DictReader(io.StringIO(text)):
        row = {}
        for c in REPORT_COLUMNS:
            v = r[c]
            if c in NUMERIC:
                row[c] = NUMERIC[c](v)
            elif c in ("cam", "freeze_lower"):
                row[c] = v == "yes"
            else:
                row[c] = v
        out.append(row)
    return out


def ordering_check(rows) -> str | None:
    """Soft check that deeper taps do at least as well: T5 >= T4 >= T3 (reported, never enforced)."""
    acc = {r["tap"]: r["acc_mean"] for r in rows
           if r["tap"] in ("T3", "T4", "T5") and r["frames"] == 7 and not r["cam"] and not r["freeze_lower"]}
    if not all(t in acc for t in ("T3", "T4", "T5")):
        return None
    holds = acc["T5"] >= acc["T4"] >= acc["T3"]
    return (f"tap ordering T5 >= T4 >= T3: {'holds' if holds else 'does not hold'} "
            f"(T3 {acc['T3']:.4f}, T4 {acc['T4']:.4f}, T5 {acc['T5']:.4f})")


def render_markdown(rows) -> str:
    def fmt(c, v):
        if isinstance(v, bool):
            return "yes" if v else "no"
        if c in ("acc_mean", "acc_std", "top5_mean", "ms_iou"):
            return f"{100 * v:.2f}" if v == v else "n/a"
        if c in ("test_time_s", "train_time_per_epoch_s"):
            return f"{v:.3f}" if v == v else "n/a"
        return str(v)

    lines = ["# Ablation report", "",
             "Accuracies are test top-1 in percent (mean and population std over seeds). "
             "Times are seconds: test time is one full pass over the test split, train time is the "
             "mean per-epoch forward+backward+update time (data loading excluded).", "",
             "| " + " | ".join(REPORT_COLUMNS) + " |",
             "|" + "---|" * len(REPORT_COLUMNS)]
    for r in rows:
        lines.append("| " + " | ".join(fmt(c, r[c]) for c in REPORT_COLUMNS) + " |")
    lines.append("")
    base = next((r for r in rows if r["tap"] == "-" and r["frames"] == 7), None)
    ms = next((r for r in rows if r["variant"] == "sparnet_t5"), None)
    if base and ms and base["train_time_per_epoch_s"] == base["train_time_per_epoch_s"]:
        over = ms["train_time_per_epoch_s"] - base["train_time_per_epoch_s"]
        pct = 100 * over / base["train_time_per_epoch_s"] if base["train_time_per_epoch_s"] else float("nan")
        lines.append(f"MS head training-time overhead: {over:+.3f} s/epoch ({pct:+.2f}%); "
                     f"accuracy change {100 * (ms['acc_mean'] - base['acc_mean']):+.2f} points.")
        lines.append("")
    check = ordering_check(rows)
    if check:
        lines += [check, ""]
    lines += [REFERENCE_NOTE, ""]
    return "\n".join(lines)


def render_report(rows, out_dir=None) -> tuple[str, str]:
    if not rows:
        raise ValueError("no result rows")
    md, text = render_markdown(rows), render_csv(rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation_report.md").write_text(md)
        (out / "ablation_report.csv").write_text(text)
    return md, text
