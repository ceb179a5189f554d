"""Command-line driver.

Exit codes: 0 ok, 1 usage or configuration error, 2 I/O or file-format error,
3 invariant or gradient-check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io as artifact_io
from .config import ConfigError, RunConfig, config_keys, config_snapshot, config_to_text, load_config
from .gradcheck import check_gradients
from .metrics import EvalFrame, evaluate
from .synth import CLASS_NAMES, generate_scene
from .voxel import PointCloud, voxelize

log = logging.getLogger("l2gfuse")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_FAILURE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(f"{self.prog}: {message}")


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration (each flag overrides the config key of the same name)")
    g.add_argument("--config", type=Path, help="key = value config file")
    for key in config_keys():
        dest = f"cfg_{key}"
        if key == "profile":
            g.add_argument("--profile", dest=dest, choices=["wod", "kitti"])
        else:
            g.add_argument(_flag(key), dest=dest, metavar="VALUE")
    g.add_argument("--toggle", action="append", default=[], metavar="NAME[=on|off]",
                   help="switch gof, lof or fda on or off (bare name means off)")


def _resolve_config(args) -> RunConfig:
    overrides = {}
    for key in config_keys():
        value = getattr(args, f"cfg_{key}", None)
        if value is not None:
            overrides[key] = str(value)
    for item in args.toggle:
        name, _, state = item.partition("=")
        name = name.strip().lower()
        if name not in ("gof", "lof", "fda"):
            raise UsageError(f"--toggle expects gof, lof or fda, got {name!r}")
        state = state.strip().lower() or "off"
        if state not in ("on", "off"):
            raise UsageError(f"--toggle state must be on or off, got {state!r}")
        overrides[f"enable_{name}"] = "true" if state == "on" else "false"
    return load_config(args.config, overrides)


def _write_manifest(path: Path | None, args, argv: Sequence[str], cfg: RunConfig | None, timings: dict,
                    outputs: dict, metrics: dict) -> None:
    if path is None:
        return
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "config": config_snapshot(cfg) if cfg else None,
        "config_text": config_to_text(cfg) if cfg else None,
        "seeds": ({"scene": cfg.generator.seed, "proposals": cfg.generator.proposal_seed,
                   "params": cfg.generator.param_seed} if cfg else {}),
        "toggles": ({"gof": cfg.fusion.enable_gof, "lof": cfg.fusion.enable_lof, "fda": cfg.fusion.enable_fda,
                     "pie_mode": cfg.fusion.pie_mode} if cfg else {}),
        "timings": {k: max(0.0, float(v)) for k, v in timings.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "metrics": metrics,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _default_manifest(args, output: Path | None) -> Path | None:
    if args.manifest is not None:
        return args.manifest
    return output.with_name(output.name + ".manifest.json") if output is not None else None


def _metric_table(metrics: dict) -> str:
    lines = [f"{'class':<12}{'AP':>10}{'APH':>10}{'n_gt':>7}{'n_det':>7}"]
    for label, m in metrics.items():
        lines.append(f"{CLASS_NAMES[label]:<12}{m['AP']:>10.4f}{m['APH']:>10.4f}{m['n_gt']:>7d}{m['n_det']:>7d}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args, argv):
    cfg = _resolve_config(args)
    g = cfg.generator
    t0 = time.perf_counter()
    scene = generate_scene(g.seed, g.n_objects, g.n_cameras, g.points_per_object, g.clutter_ratio, cfg.voxel,
                           image_channels=cfg.fusion.image_channels, extent=g.extent)
    elapsed = time.perf_counter() - t0
    artifact_io.save_scene(args.output, scene)
    print(f"scene: {len(scene.points)} points, {len(scene.gt_boxes)} objects, {len(scene.cameras)} cameras "
          f"-> {args.output}")
    _write_manifest(_default_manifest(args, args.output), args, argv, cfg, {"synth": elapsed},
                    {"scene": args.output}, {"n_points": len(scene.points), "n_objects": len(scene.gt_boxes)})
    return EXIT_OK


def cmd_run(args, argv):
    from .pipeline import build_params, run_scene

    cfg = _resolve_config(args)
    scene = artifact_io.load_scene(args.scene)
    params = artifact_io.load_params(args.params) if args.params else build_params(cfg)
    t0 = time.perf_counter()
    result = run_scene(scene, cfg, params)
    total = time.perf_counter() - t0
    dets = result.detections
    for d in dets:
        if not (np.isfinite(d.confidence) and np.all(np.isfinite(d.box.as_array()))):
            print("non-finite detection output", file=sys.stderr)
            return EXIT_FAILURE
    artifact_io.save_detections(args.output, dets)
    outputs = {"detections": args.output}
    if args.text:
        artifact_io.write_detections_text(args.text, dets)
        outputs["text"] = args.text
    if args.save_params:
        artifact_io.save_params(args.save_params, params)
        outputs["params"] = args.save_params
    refined_iou, proposal_iou = result.mean_iou(scene.gt_boxes)
    print(f"{len(dets)} detections -> {args.output}")
    print(f"mean IoU to GT: proposals {proposal_iou:.4f}, refined {refined_iou:.4f}")
    for stage, secs in result.timings.items():
        print(f"  {stage:<14} {secs * 1e3:9.2f} ms")
    timings = dict(result.timings, total=total)
    _write_manifest(_default_manifest(args, args.output), args, argv, cfg, timings, outputs,
                    {"mean_iou_refined": refined_iou, "mean_iou_proposals": proposal_iou, "n_detections": len(dets)})
    return EXIT_OK


def cmd_eval(args, argv):
    cfg = _resolve_config(args)
    dets = artifact_io.load_detections(args.detections)
    scene = artifact_io.load_scene(args.scene)
    frames = sorted({d.frame for d in dets} | {0})
    gt = list(zip(scene.gt_boxes, scene.gt_classes))
    eval_frames = [EvalFrame([d for d in dets if d.frame == f], gt if f == 0 else [], cfg.eval.thresholds())
                   for f in frames]
    metrics = evaluate(eval_frames)
    print(_metric_table(metrics))
    serial = {CLASS_NAMES[k]: v for k, v in metrics.items()}
    if args.json:
        args.json.write_text(json.dumps(serial, indent=2, sort_keys=True) + "\n")
    _write_manifest(args.manifest, args, argv, cfg, {}, {"json": args.json} if args.json else {}, serial)
    return EXIT_OK


def cmd_gradcheck(args, argv):
    t0 = time.perf_counter()
    reports = check_gradients(seed=args.seed, probes=args.probes, tol=args.tol, h=args.step)
    elapsed = time.perf_counter() - t0
    for r in reports:
        print(r.line())
    print(f"total {elapsed:.2f} s")
    outputs = {}
    if args.report:
        artifact_io.save_reports(args.report, reports)
        outputs["report"] = args.report
    ok = all(r.passed for r in reports)
    _write_manifest(args.manifest, args, argv, None, {"gradcheck": elapsed}, outputs,
                    {r.op: {"max_rel_err": r.max_rel_err, "passed": r.passed} for r in reports})
    return EXIT_OK if ok else EXIT_FAILURE


def cmd_ablate(args, argv):
    from .pipeline import ablate, build_params

    cfg = _resolve_config(args)
    scene = artifact_io.load_scene(args.scene)
    params = artifact_io.load_params(args.params) if args.params else build_params(cfg)
    t0 = time.perf_counter()
    rows = ablate(scene, cfg, params)
    elapsed = time.perf_counter() - t0
    print(f"{'GoF':<5}{'LoF':<5}{'FDA':<5}{'PIE':<9}{'mAP':>9}{'mAPH':>9}{'IoU':>9}{'conf':>9}")
    mark = lambda b: "x" if b else "-"
    for r in rows:
        print(f"{mark(r['gof']):<5}{mark(r['lof']):<5}{mark(r['fda']):<5}{r['pie_mode']:<9}"
              f"{r['mAP']:>9.4f}{r['mAPH']:>9.4f}{r['mean_iou']:>9.4f}{r['mean_conf']:>9.4f}")
    table = [{k: v for k, v in r.items() if k != "detections"} for r in rows]
    if args.json:
        args.json.write_text(json.dumps(table, indent=2) + "\n")
    _write_manifest(args.manifest, args, argv, cfg, {"ablate": elapsed},
                    {"json": args.json} if args.json else {}, {"rows": table})
    return EXIT_OK


def cmd_bench(args, argv):
    from .pipeline import build_params, run_scene

    cfg = _resolve_config(args)
    rng = np.random.default_rng(0)
    lo, hi = np.asarray(cfg.voxel.range_min), np.asarray(cfg.voxel.range_max)
    results = {}
    for n in args.points:
        cloud = PointCloud(rng.uniform(lo, hi, size=(n, 3)), rng.uniform(size=(n, 1)))
        voxelize(cloud, cfg.voxel, 1)  # warm-up
        t0 = time.perf_counter()
        vmap = voxelize(cloud, cfg.voxel, 1)
        dt = time.perf_counter() - t0
        results[f"voxelize_{n}"] = n / dt
        print(f"voxelize {n:>9d} points: {dt * 1e3:8.1f} ms  {n / dt:12.0f} points/s  ({len(vmap)} voxels)")
    g = cfg.generator
    scene = generate_scene(g.seed, args.proposals, max(g.n_cameras, 1), g.points_per_object, g.clutter_ratio,
                           cfg.voxel, image_channels=cfg.fusion.image_channels, extent=g.extent)
    params = build_params(cfg)
    res = run_scene(scene, cfg, params)
    per_prop = sum(v for k, v in res.timings.items() if k not in ("backbone", "proposals", "global_fuse"))
    rate = len(res.detections) / per_prop if per_prop > 0 else float("inf")
    results["proposals_per_s"] = rate
    print(f"fusion: {len(res.detections)} proposals, {rate:.1f} proposals/s "
          f"(global fusion {res.timings.get('global_fuse', 0) * 1e3:.1f} ms)")
    _write_manifest(args.manifest, args, argv, cfg, dict(res.timings), {}, results)
    return EXIT_OK


def cmd_replay(args, argv):
    manifest = json.loads(Path(args.manifest_file).read_text())
    replay_argv = manifest.get("argv")
    if not isinstance(replay_argv, list) or not replay_argv or replay_argv[0] == "replay":
        raise UsageError("manifest has no replayable command line")
    return main(replay_argv)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="l2gfuse", description=__doc__.splitlines()[0] if __doc__ else None)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a seeded synthetic scene")
    _add_config_flags(p)
    p.add_argument("-o", "--output", type=Path, required=True)
    p.add_argument("--manifest", type=Path)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="run the fusion pipeline on a scene")
    p.add_argument("scene", type=Path)
    _add_config_flags(p)
    p.add_argument("--params", type=Path, help="parameter file (default: seeded init from param_seed)")
    p.add_argument("-o", "--output", type=Path, required=True)
    p.add_argument("--text", type=Path, help="also write a line-per-detection text export")
    p.add_argument("--save-params", type=Path)
    p.add_argument("--manifest", type=Path)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="AP/APH per class")
    p.add_argument("detections", type=Path)
    p.add_argument("scene", type=Path)
    _add_config_flags(p)
    p.add_argument("--json", type=Path)
    p.add_argument("--manifest", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probes", type=int, default=32)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--report", type=Path)
    p.add_argument("--manifest", type=Path)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="metrics over the GoF/LoF/FDA toggle lattice and PIE input types")
    p.add_argument("scene", type=Path)
    _add_config_flags(p)
    p.add_argument("--params", type=Path)
    p.add_argument("--json", type=Path)
    p.add_argument("--manifest", type=Path)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="voxelization and fusion throughput")
    _add_config_flags(p)
    p.add_argument("--points", type=int, nargs="+", default=[100_000, 1_000_000])
    p.add_argument("--proposals", type=int, default=20)
    p.add_argument("--manifest", type=Path)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("replay", help="re-execute the command recorded in a manifest")
    p.add_argument("manifest_file", type=Path)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
        return args.func(args, argv)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, artifact_io.ArtifactError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, FloatingPointError) as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
