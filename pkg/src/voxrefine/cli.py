"""Command-line surface.

Subcommands: gen-scenes, train, eval, bench, gradcheck, ablate.  Every
subcommand accepts --config (flat key = value file), --seed, and --out.
Exit status: 0 success, 2 configuration errors, 3 contract violations
(including a failing gradient check), 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .bench import GRADCHECK_OVERRIDES, bench, gradcheck_run
from .config import Config, read_config_file
from .errors import ConfigError, ContractError, ShapeError
from .evaluate import evaluate
from .pipeline import RefinementModel
from .scenes import gen_scenes, load_scene_dir
from .train import DESK_OVERFIT_OVERRIDES, run_overfit, train

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_CONTRACT = 3


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--seed", type=int, default=0, help="base RNG seed (non-negative)")
    parser.add_argument("--out", help="output directory")


def _load_cfg(args, presets: dict | None = None) -> Config:
    # presets sit under the user's file: explicit config entries win
    merged = dict(presets or {})
    if args.config:
        merged.update(read_config_file(args.config))
    return Config(merged)


def _require_out(args) -> str:
    if not args.out:
        raise ConfigError("--out is required for this command")
    os.makedirs(args.out, exist_ok=True)
    return args.out


def cmd_gen_scenes(args) -> int:
    cfg = _load_cfg(args)
    out = _require_out(args)
    scenes = gen_scenes(cfg, args.count, args.seed, out_dir=out)
    total_boxes = sum(len(s.boxes) for s in scenes)
    print(f"wrote {len(scenes)} scenes ({total_boxes} boxes) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = _require_out(args)
    scenes = load_scene_dir(args.scenes)
    result = train(cfg, scenes, out, seed=args.seed, steps=args.steps, resume=args.resume)
    print(
        f"trained {result.steps_run} steps; final loss {result.final_loss:.6f}; "
        f"checkpoint {result.checkpoint_path}; trace {result.trace_path}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    out = _require_out(args)
    scenes = load_scene_dir(args.scenes)
    model = RefinementModel(cfg, seed=args.seed)
    model.load(args.checkpoint)
    report = evaluate(model, scenes, seed=args.seed)
    path = os.path.join(out, "report.json")
    report.to_json(path)
    for cls in sorted(report.ap):
        value = report.ap[cls]
        shown = "absent (no ground truth)" if value is None else f"{value:.2f}"
        print(f"class {cls}: AP@40 = {shown}")
    print(
        f"mean IoU: proposals {report.proposal_mean_iou:.4f} -> refined "
        f"{report.refined_mean_iou:.4f} (gain {report.refined_mean_iou - report.proposal_mean_iou:+.4f})"
    )
    print(f"report written to {path}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_cfg(args)
    out = _require_out(args)
    path = os.path.join(out, "bench.csv")
    ms = tuple(int(v) for v in args.rois.split(","))
    ns = tuple(int(v) for v in args.points.split(","))
    rows = bench(cfg, out_csv=path, ms=ms, ns=ns, reps=args.reps, seed=args.seed)
    for row in rows:
        print(
            f"{row.attention:9s} M={row.m_rois:4d} N_r={row.n_points:4d} "
            f"{row.seconds * 1e3:9.2f} ms  weights={row.weight_elements}"
        )
    print(f"csv written to {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load_cfg(args, presets=GRADCHECK_OVERRIDES)
    report = gradcheck_run(cfg, seed=args.seed)
    for name in sorted(report["groups"]):
        entry = report["groups"][name]
        print(f"{name:10s} params={entry['params']:6d} max_rel_err={entry['max_rel_err']:.3e}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "gradcheck.json"), "w") as fh:
            json.dump(report, fh, indent=2)
    if not report["passed"]:
        print(f"FAIL: some group exceeds tolerance {report['tolerance']}", file=sys.stderr)
        return EXIT_CONTRACT
    print(f"all groups within {report['tolerance']}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = _load_cfg(args, presets=DESK_OVERFIT_OVERRIDES)
    out = _require_out(args)
    results = []
    for pair_seed in range(args.seeds):
        per_seed = {}
        for attention in ("vector", "multihead"):
            cfg = base.updated({"rfe.attention": attention})
            run_dir = os.path.join(out, f"seed{pair_seed}_{attention}")
            report = run_overfit(
                cfg,
                run_dir,
                seed=args.seed + pair_seed,
                num_scenes=args.scenes,
                max_steps=args.steps,
            )
            per_seed[attention] = report["gain"]
            print(f"seed {args.seed + pair_seed} {attention:9s}: gain {report['gain']:+.4f}")
        results.append({"seed": args.seed + pair_seed, **per_seed})
    margins = [r["vector"] - r["multihead"] for r in results]
    summary = {
        "pairs": results,
        "mean_vector_gain": sum(r["vector"] for r in results) / len(results),
        "mean_multihead_gain": sum(r["multihead"] for r in results) / len(results),
        "min_margin": min(margins),
    }
    with open(os.path.join(out, "ablation.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    print(
        f"vector mean gain {summary['mean_vector_gain']:+.4f}, "
        f"multihead mean gain {summary['mean_multihead_gain']:+.4f}, "
        f"worst pairwise margin {summary['min_margin']:+.4f}"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxrefine",
        description="Attention-based proposal refinement over sparse voxel feature maps",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", help="generate synthetic scene files")
    _add_common(p)
    p.add_argument("--count", type=int, default=10, help="number of scenes")
    p.set_defaults(fn=cmd_gen_scenes)

    p = sub.add_parser("train", help="train on a directory of scene files")
    _add_common(p)
    p.add_argument("--scenes", required=True, help="directory of scene_*.json files")
    p.add_argument("--steps", type=int, default=None, help="override train.steps")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on scene files")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="attention throughput and allocation benchmark")
    _add_common(p)
    p.add_argument("--rois", default="10,100,512", help="comma-separated ROI counts")
    p.add_argument("--points", default="64,256", help="comma-separated pooled point counts")
    p.add_argument("--reps", type=int, default=5)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _add_common(p)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate", help="paired vector-vs-multihead overfit study")
    _add_common(p)
    p.add_argument("--seeds", type=int, default=3, help="number of paired seeds")
    p.add_argument("--scenes", type=int, default=2, help="scenes per run")
    p.add_argument("--steps", type=int, default=400, help="training steps per run")
    p.set_defaults(fn=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContractError, ShapeError) as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
