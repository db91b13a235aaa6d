"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad flags, config or inputs),
2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from . import ablation, data, gradsuite, train
from .config import RunConfig
from .models import load_checkpoint

COMMANDS = ("gen-data", "gen-motion-maps", "train", "eval", "ablate", "grad-check", "report")
log = logging.getLogger("sparnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="directory receiving every output")
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="seed override (dataset seed, or the single training seed)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    common.add_argument("-q", "--quiet", action="store_true", help="only print results")

    p = _Parser(prog="sparnet", description="motion-segmentation action recognition toolkit")
    p.add_argument("--version", action="version", version=f"sparnet {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    sub.add_parser("gen-data", parents=[common], help="render the synthetic dataset into --out")
    g = sub.add_parser("gen-motion-maps", parents=[common], help="compute motion GT for a dataset")
    g.add_argument("--data", help="dataset root (default: --out)")
    t = sub.add_parser("train", parents=[common], help="train over the configured seeds")
    t.add_argument("--data", required=True)
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    a = sub.add_parser("ablate", parents=[common], help="run a variant grid and write the report")
    a.add_argument("--data", required=True)
    a.add_argument("--grid", choices=sorted(ablation.GRIDS), help="overrides ablation.grid")
    sub.add_parser("grad-check", parents=[common], help="finite-difference check of every op")
    r = sub.add_parser("report", parents=[common], help="re-render an ablation report from its rows")
    r.add_argument("--rows", required=True, help="ablation_rows.json from an ablate run")
    return p


def _load_config(args) -> RunConfig:
    rc = RunConfig.load(args.config) if args.config else RunConfig()
    rc.override(args.set)
    if args.seed is not None:
        if args.command == "gen-data":
            rc.set("data.seed", args.seed)
        elif args.command == "gen-motion-maps":
            rc.set("gt.seed", args.seed)
        else:
            rc.set("train.seeds", (args.seed,))
    return rc.validate()


def _prepare_out(args, rc: RunConfig) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text(rc.dump())
    return out


def _require_dataset(root) -> Path:
    root = Path(root)
    if not (root / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset at {root} (manifest.json missing)")
    return root


def _model_config_for(rc: RunConfig, root: Path):
    manifest = data.load_manifest(root)
    return rc.model_config(len(manifest["verbs"]), len(manifest["nouns"]))


def cmd_gen_data(args, rc, out):
    cfg = rc.data_config()
    manifest = data.gen_dataset(cfg, rc["data.seed"], out)
    print(f"wrote {len(manifest['entries'])} clips to {out} (manifest {data.manifest_hash(out)[:12]})")
    return 0


def cmd_gen_motion_maps(args, rc, out):
    root = _require_dataset(args.data or out)
    mc = _model_config_for(rc, root)
    data.gen_motion_maps(root, rc.gt_config(), n_frames=rc["train.n_frames"], map_size=mc.motion_size,
                         resize_height=rc["data.resize_height"], crop=mc.backbone.input_size, seed=rc["gt.seed"],
                         progress=None if args.quiet else print)
    print(f"motion maps written under {root}")
    return 0


def _progress(args):
    return None if args.quiet else (lambda m: print(m, flush=True))


def cmd_train(args, rc, out):
    root = _require_dataset(args.data)
    mc = _model_config_for(rc, root)
    tc = rc.train_config()
    if not mc.ms_on:
        tc.ms_weight = 0.0
    res = train.run_experiment(mc, tc, root, out, "sparnet" if mc.ms_on else "baseline", _progress(args))
    result, timing = train.result_to_dict(res)
    (out / "result.json").write_text(json.dumps(result, indent=1) + "\n")
    (out / "timing.json").write_text(json.dumps(timing, indent=1) + "\n")
    agg = res.aggregate()
    print(f"{res.variant}: test top1 {agg['acc_mean']:.4f} +- {agg['acc_std']:.4f} over {len(res.runs)} seed(s)")
    return 2 if res.failed else 0


def cmd_eval(args, rc, out):
    root = _require_dataset(args.data)
    model, header = load_checkpoint(args.checkpoint)
    store = data.ClipStore(root, "test")
    b = train.Batcher(store, rc["train.n_frames"], model.config.motion_size, model.config.multitask,
                      rc["data.resize_height"], model.config.backbone.input_size)
    ev = train.evaluate(model, b, rc["train.batch_size"], rc["train.ms_weight"] if model.config.ms_on else 0.0)
    payload = {"checkpoint": str(args.checkpoint), "top1": ev.top1, "top5": ev.top5, "precision": ev.precision,
               "recall": ev.recall, "loss_c": ev.loss_c, "loss_ms": ev.loss_ms, "ms_iou": ev.ms_iou,
               "predictions": ev.predictions}
    (out / "eval.json").write_text(json.dumps(payload, indent=1) + "\n")
    (out / "eval_timing.txt").write_text(f"eval_s {ev.eval_s!r}\n")
    print(f"top1 {ev.top1:.4f} top5 {ev.top5:.4f}")
    return 0


def cmd_ablate(args, rc, out):
    root = _require_dataset(args.data)
    grid_name = args.grid or rc["ablation.grid"]
    variants = ablation.GRIDS[grid_name](rc["ablation.long_frames"])
    mc = _model_config_for(rc, root)
    tc = rc.train_config()
    stores = (data.ClipStore(root, "train"), data.ClipStore(root, "test"))
    length = min(e["T"] for e in data.load_manifest(root)["entries"])
    rows = ablation.run_grid(variants, mc, tc, root, out, stores, length, _progress(args))
    (out / "ablation_rows.json").write_text(json.dumps(rows, indent=1) + "\n")
    md, _ = ablation.render_report(rows, out)
    print(md)
    return 2 if any(r["status"] != "ok" for r in rows) else 0


def cmd_grad_check(args, rc, out):
    ok, lines, secs = gradsuite.report(seed=args.seed if args.seed is not None else 0)
    text = "\n".join(lines) + f"\nall ops < {gradsuite.TOLERANCE:g}: {'yes' if ok else 'no'}\n"
    (out / "grad_check.txt").write_text(text)
    print(text + f"({secs:.1f}s)")
    return 0 if ok else 2


def cmd_report(args, rc, out):
    rows = json.loads(Path(args.rows).read_text())
    md, _ = ablation.render_report(rows, out)
    print(md)
    return 0


HANDLERS = {"gen-data": cmd_gen_data, "gen-motion-maps": cmd_gen_motion_maps, "train": cmd_train,
            "eval": cmd_eval, "ablate": cmd_ablate, "grad-check": cmd_grad_check, "report": cmd_report}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = _load_config(args)
        out = _prepare_out(args, rc)
    except (ValueError, OSError) as e:
        print(f"sparnet {args.command}: {e}", file=sys.stderr)
        return 1
    try:
        return HANDLERS[args.command](args, rc, out)
    except (ValueError, FileNotFoundError, KeyError) as e:
        print(f"sparnet {args.command}: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"sparnet {args.command}: runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
