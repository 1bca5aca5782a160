"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 input format error,
4 internal invariant violation.  Logs go to stderr; machine-readable
output goes to files under --out only.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputFormatError, PartSegError
from .io_formats import load_scene_package, read_ply
from .pipeline import (
    PipelineConfig,
    evaluate,
    read_observations,
    run_ablation,
    run_pipeline,
    save_render,
    stage_fuse,
    stage_instances,
    stage_parts,
    write_manifest,
)
from .projection import median_nn_spacing
from .renderer import render
from .synth import CorruptionSpec, generate_scene, write_scene_package

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_INTERNAL = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvpartseg",
        description="Multi-view hierarchical 3D point cloud part segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scene=True, out=True):
        p.add_argument("--config", type=Path, help="pipeline config JSON")
        if scene:
            p.add_argument("--scene", type=Path, required=True, help="scene package directory")
        if out:
            p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int, default=1, help="worker threads over views")
        p.add_argument("--oracle-masks", action="store_true",
                       help="derive masks from package ground truth instead of mask files")
        return p

    common(sub.add_parser("render", help="render every package camera over the full cloud"))
    common(sub.add_parser("instances", help="stage 1: top-view instance assignment"))
    p = common(sub.add_parser("parts", help="stage 2: per-instance back-projected observations"))
    p.add_argument("--instances", type=Path, required=True, help="instances.npy from stage 1")
    p = common(sub.add_parser("fuse", help="stage 3: fuse observations into labels"))
    p.add_argument("--instances", type=Path, required=True)
    p.add_argument("--observations", type=Path, required=True)
    p = common(sub.add_parser("eval", help="score a labeled PLY against package ground truth"))
    p.add_argument("--pred", type=Path, required=True, help="labeled PLY to evaluate")
    p = common(sub.add_parser("synth", help="generate a synthetic scene package"), scene=False)
    p.add_argument("--n-objects", type=int, default=3)
    p.add_argument("--points-per-object", type=int, default=20000)
    common(sub.add_parser("ablate", help="three-strategy fusion comparison"))
    common(sub.add_parser("pipeline", help="full end-to-end run"))
    return parser


def _load_config(args) -> PipelineConfig:
    config = PipelineConfig.from_json(args.config) if args.config else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        config = PipelineConfig.from_dict({**config.to_dict(), "seed": args.seed})
    return config


def _cmd_render(args, config) -> int:
    package = load_scene_package(args.scene)
    radius = config.splat_radius_scale * median_nn_spacing(package.cloud.positions)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "render", config)
    rc = config.render_config()
    for vid in sorted(package.views):
        save_render(out / "renders", render(package.cloud, package.views[vid], radius, rc))
    return EXIT_OK


def _cmd_instances(args, config) -> int:
    package = load_scene_package(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "instances", config)
    stage_instances(package, config, out, oracle=args.oracle_masks)
    return EXIT_OK


def _cmd_parts(args, config) -> int:
    package = load_scene_package(args.scene)
    instances = np.load(args.instances)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "parts", config)
    stage_parts(package, instances, config, out,
                oracle=args.oracle_masks, threads=args.threads)
    return EXIT_OK


def _cmd_fuse(args, config) -> int:
    package = load_scene_package(args.scene)
    instances = np.load(args.instances)
    observations, weights = read_observations(args.observations)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "fuse", config)
    result, _ = stage_fuse(package, instances, observations, weights, config, out)
    evaluate(package, result, out)
    return EXIT_OK


def _cmd_eval(args, config) -> int:
    package = load_scene_package(args.scene)
    _, result = read_ply(args.pred)
    if result is None:
        raise InputFormatError(f"{args.pred} carries no label properties")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = evaluate(package, result, out)
    if metrics is None:
        raise InputFormatError("scene package has no ground truth to evaluate against")
    logging.getLogger("mvpartseg").info("mIoU %.4f", metrics["miou"])
    return EXIT_OK


def _cmd_synth(args, config) -> int:
    scene = generate_scene(config.seed, args.n_objects, args.points_per_object)
    write_scene_package(args.out, scene, n_ring=config.n_ring_views,
                        render_config=config.render_config(),
                        corruption=config.corruption)
    logging.getLogger("mvpartseg").info(
        "wrote %d-point scene package to %s", len(scene.cloud), args.out)
    return EXIT_OK


def _cmd_ablate(args, config) -> int:
    corruption = config.corruption or CorruptionSpec(
        occluder_views=0.4, label_flip_rate=0.2, dilation_px=1, seed=config.seed)
    metrics = run_ablation(args.scene, config, corruption,
                           out_dir=args.out, threads=args.threads)
    log = logging.getLogger("mvpartseg")
    for arm, m in metrics.items():
        log.info("%s mIoU %.4f", arm, m["miou"])
    return EXIT_OK


def _cmd_pipeline(args, config) -> int:
    _, metrics = run_pipeline(args.scene, config, args.out,
                              oracle=args.oracle_masks, threads=args.threads)
    if metrics is not None:
        logging.getLogger("mvpartseg").info("mIoU %.4f", metrics["miou"])
    return EXIT_OK


_COMMANDS = {
    "render": _cmd_render,
    "instances": _cmd_instances,
    "parts": _cmd_parts,
    "fuse": _cmd_fuse,
    "eval": _cmd_eval,
    "synth": _cmd_synth,
    "ablate": _cmd_ablate,
    "pipeline": _cmd_pipeline,
}


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        config = _load_config(args)
        return _COMMANDS[args.command](args, config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputFormatError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PartSegError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
