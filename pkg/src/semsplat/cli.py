"""Command-line front end: generate, run, eval, ablate.

Config files are plain text, one ``section.key = value`` per line, with
``#`` comments.  Sections name the config dataclasses: ``synth`` for the
generator, ``tracking`` / ``mapping`` / ``graph`` / ``pipeline`` for the
SLAM loop.  Unknown keys are rejected so typos fail loudly.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
Errors print as one line: ``error[kind]: message``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
import typing

import numpy as np

from .dataset_io import (BundleFormatError, load_bundle, load_map,
                         load_trajectory, save_bundle, save_map,
                         save_trajectory, write_pfm, write_png8, write_png16)
from .errors import InvalidArgumentError, UndefinedMetricError
from .mapper import MappingConfig
from .pipeline import (GraphConfig, PipelineConfig, PipelineState,
                       _slam_tracking_defaults, labels_from_render,
                       run_sequence, sequence_metrics)
from .renderer import render
from .synthetic import SynthConfig, generate_synthetic

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3

_KIND = {EXIT_USAGE: "usage", EXIT_DATA: "data", EXIT_RUNTIME: "runtime"}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    """argparse variant whose usage failures exit 1, printed on one line."""

    def error(self, message):
        _print_error(EXIT_USAGE, message)
        raise SystemExit(EXIT_USAGE)


def _print_error(code: int, message) -> None:
    flat = " ".join(str(message).split())
    print(f"error[{_KIND.get(code, 'runtime')}]: {flat}", file=sys.stderr)


# ---------------------------------------------------------------- config

def parse_config_file(path) -> dict:
    """Read ``section.key = value`` lines into nested string dicts."""
    if not os.path.exists(path):
        raise CliError(EXIT_USAGE, f"{path}: config file not found")
    sections: dict = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(EXIT_USAGE,
                               f"{path}:{lineno}: expected 'section.key = value'")
            key, value = line.split("=", 1)
            key = key.strip()
            if "." not in key:
                raise CliError(EXIT_USAGE,
                               f"{path}:{lineno}: key {key!r} needs a section prefix")
            section, name = key.split(".", 1)
            sections.setdefault(section.strip(), {})[name.strip()] = value.strip()
    return sections


def _coerce(raw: str, target_type, where: str):
    if target_type is bool:
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise CliError(EXIT_USAGE, f"{where}: expected a boolean, got {raw!r}")
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
    except ValueError:
        raise CliError(EXIT_USAGE,
                       f"{where}: expected {target_type.__name__}, got {raw!r}")
    return raw


def _apply_overrides(base, overrides: dict, section: str):
    """Rebuild a config dataclass with typed overrides from the file."""
    hints = typing.get_type_hints(type(base))
    valid = {f.name for f in dataclasses.fields(base)}
    kwargs = {}
    for name, raw in overrides.items():
        if name not in valid:
            raise CliError(EXIT_USAGE, f"unknown config key {section}.{name}")
        kwargs[name] = _coerce(raw, hints[name], f"{section}.{name}")
    try:
        return dataclasses.replace(base, **kwargs)
    except (InvalidArgumentError, ValueError, TypeError) as exc:
        raise CliError(EXIT_USAGE, f"invalid {section} config: {exc}")


_KNOWN_SECTIONS = ("synth", "tracking", "mapping", "graph", "pipeline")


def _check_sections(sections: dict) -> None:
    for name in sections:
        if name not in _KNOWN_SECTIONS:
            raise CliError(EXIT_USAGE,
                           f"unknown config section {name!r} "
                           f"(expected one of {', '.join(_KNOWN_SECTIONS)})")


def synth_config(sections: dict) -> SynthConfig:
    return _apply_overrides(SynthConfig(), sections.get("synth", {}), "synth")


def pipeline_config(sections: dict) -> PipelineConfig:
    tracking = _apply_overrides(_slam_tracking_defaults(),
                                sections.get("tracking", {}), "tracking")
    mapping = _apply_overrides(MappingConfig(), sections.get("mapping", {}), "mapping")
    graph = _apply_overrides(GraphConfig(), sections.get("graph", {}), "graph")
    scalars = sections.get("pipeline", {})
    cfg = PipelineConfig(tracking=tracking, mapping=mapping, graph=graph)
    return _apply_overrides(cfg, scalars, "pipeline")


# ---------------------------------------------------------------- output

def _jsonable(value):
    """Rewrite numpy scalars/arrays and NaN so json.dump emits strict JSON."""
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.generic):
        return _jsonable(value.item())
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_renders(out_dir, state, bundle) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for i, pose in enumerate(state.trajectory):
        frame = render(state.map, pose, bundle.intrinsics)
        write_png8(os.path.join(out_dir, f"{i:06d}.png"), frame.color)
        write_pfm(os.path.join(out_dir, f"{i:06d}.pfm"), frame.depth)
        write_png16(os.path.join(out_dir, f"{i:06d}_labels.png"),
                    labels_from_render(frame))


# -------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    sections = parse_config_file(args.config) if args.config else {}
    _check_sections(sections)
    cfg = synth_config(sections)
    bundle = generate_synthetic(cfg)
    save_bundle(bundle, args.out)
    print(f"wrote {bundle.frame_count} frames "
          f"({bundle.intrinsics.width}x{bundle.intrinsics.height}, "
          f"S={bundle.semantic_dim}) to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    bundle = load_bundle(args.bundle)
    sections = parse_config_file(args.config) if args.config else {}
    _check_sections(sections)
    cfg = pipeline_config(sections)
    state, metrics = run_sequence(bundle, cfg)
    os.makedirs(args.out, exist_ok=True)
    timestamps = [obs.timestamp for obs in bundle.frames]
    save_trajectory(os.path.join(args.out, "trajectory.txt"),
                    state.trajectory, timestamps)
    save_map(state.map, os.path.join(args.out, "map.npz"))
    _write_json(os.path.join(args.out, "report.json"),
                {"frames": state.reports, "final_gaussians": len(state.map)})
    if args.renders:
        _write_renders(os.path.join(args.out, "renders"), state, bundle)
    print(f"tracked {len(state.trajectory)} frames, "
          f"{len(state.map)} gaussians in the final map")
    print(metrics.table())
    return EXIT_OK


def cmd_eval(args) -> int:
    bundle = load_bundle(args.bundle)
    traj_path = os.path.join(args.result, "trajectory.txt")
    map_path = os.path.join(args.result, "map.npz")
    if not os.path.exists(traj_path):
        raise CliError(EXIT_DATA, f"{traj_path}: missing trajectory")
    if not os.path.exists(map_path):
        raise CliError(EXIT_DATA, f"{map_path}: missing map archive")
    poses, _ = load_trajectory(traj_path)
    gmap = load_map(map_path)
    if len(poses) != len(bundle.frames):
        raise CliError(EXIT_DATA,
                       f"result trajectory has {len(poses)} poses but the "
                       f"bundle has {len(bundle.frames)} frames")
    if gmap.semantic_dim != bundle.semantic_dim:
        raise CliError(EXIT_DATA,
                       f"map has {gmap.semantic_dim} semantic channels but the "
                       f"bundle declares {bundle.semantic_dim}")
    state = PipelineState(map=gmap, trajectory=poses)
    metrics = sequence_metrics(state, bundle)
    _write_json(os.path.join(args.result, "metrics.json"), metrics.to_dict())
    print(metrics.table())
    return EXIT_OK


ABLATION_VARIANTS = ("no-seg", "seg", "seg+consistency")


def cmd_ablate(args) -> int:
    bundle = load_bundle(args.bundle)
    sections = parse_config_file(args.config) if args.config else {}
    _check_sections(sections)
    base = pipeline_config(sections)
    configs = {
        "no-seg": dataclasses.replace(base, semantic_enabled=False,
                                      consistency_enabled=False),
        "seg": dataclasses.replace(base, semantic_enabled=True,
                                   consistency_enabled=False),
        "seg+consistency": dataclasses.replace(base, semantic_enabled=True,
                                               consistency_enabled=True),
    }
    rows = []
    for name in ABLATION_VARIANTS:
        _, metrics = run_sequence(bundle, configs[name])
        entry = metrics.to_dict()
        entry.pop("per_frame")
        rows.append({"variant": name, **entry})
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "ablation.json"), {"rows": rows})
    print(ablation_table(rows))
    return EXIT_OK


def ablation_table(rows) -> str:
    header = (f"{'variant':<16} {'ate_rmse':>10} {'psnr':>8} {'ssim':>8} "
              f"{'depth_l1':>10} {'seg_l1':>8} {'lpips':>6}")
    lines = [header, "-" * len(header)]
    for r in rows:
        ate = "n/a" if r["ate_rmse"] is None else f"{r['ate_rmse']:.6f}"
        lines.append(f"{r['variant']:<16} {ate:>10} {r['psnr']:>8.2f} "
                     f"{r['ssim']:>8.4f} {r['depth_l1']:>10.6f} "
                     f"{r['seg_l1']:>8.4f} {'n/a':>6}")
    return "\n".join(lines)


# ------------------------------------------------------------------ main

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="semsplat",
                     description="Semantic RGB-D SLAM on isotropic Gaussian splats")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("generate", help="synthesize a sequence bundle")
    p.add_argument("--config", help="synth.* overrides, one key = value per line")
    p.add_argument("--out", required=True, help="bundle directory to write")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("run", help="run SLAM over a bundle")
    p.add_argument("--bundle", required=True, help="input bundle directory")
    p.add_argument("--config", help="tracking/mapping/graph/pipeline overrides")
    p.add_argument("--out", required=True, help="result directory to write")
    p.add_argument("--renders", action="store_true",
                   help="also write per-frame renders of the final map")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score a result directory against its bundle")
    p.add_argument("--bundle", required=True, help="input bundle directory")
    p.add_argument("--result", required=True, help="directory written by run")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the three loss variants and compare")
    p.add_argument("--bundle", required=True, help="input bundle directory")
    p.add_argument("--config", help="shared overrides applied to every variant")
    p.add_argument("--out", required=True, help="directory for ablation.json")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.error("missing command (generate, run, eval, ablate)")
    try:
        return args.func(args)
    except CliError as exc:
        _print_error(exc.code, exc)
        return exc.code
    except (BundleFormatError, UndefinedMetricError) as exc:
        _print_error(EXIT_DATA, exc)
        return EXIT_DATA
    except InvalidArgumentError as exc:
        _print_error(EXIT_USAGE, exc)
        return EXIT_USAGE
    except Exception as exc:  # pragma: no cover - last-resort guard
        _print_error(EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
