"""Command-line entry point.

Example:
    surfelslam --synth desk --dataset /tmp/desk --out /tmp/desk_run \\
               --omega sidecar --eval ate,recon,iou,mem
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import DatasetError, SurfelSlamError, TrackingLostError
from .geometry import Intrinsics
from .pipeline import RunConfig, run_ablation, run_pipeline
from .synth import PRESETS, make_preset_dataset


def _parse_intrinsics(text: str, width: int = 640, height: int = 480) -> Intrinsics:
    parts = [float(v) for v in text.split(",")]
    if len(parts) == 4:
        fx, fy, cx, cy = parts
        return Intrinsics(fx, fy, cx, cy, width, height)
    if len(parts) == 6:
        fx, fy, cx, cy, w, h = parts
        return Intrinsics(fx, fy, cx, cy, int(w), int(h))
    raise argparse.ArgumentTypeError(
        "expected fx,fy,cx,cy or fx,fy,cx,cy,width,height"
    )


def _parse_frames(text: str) -> tuple[int, int]:
    try:
        a, b = text.split(":")
        return int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError("expected a:b (inclusive frame range)")


def _parse_omega(text: str):
    if text == "sidecar":
        return ("sidecar", 0.0)
    if text == "off":
        return ("off", 0.0)
    if text.startswith("const:"):
        return ("const", float(text.split(":", 1)[1]))
    raise argparse.ArgumentTypeError("expected const:<value>, sidecar, or off")


def _read_config_file(path: Path) -> dict:
    """Flat key=value configuration; '#' starts a comment line."""
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DatasetError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="surfelslam",
        description="Offline surfel-based RGB-D SLAM with instance-level "
        "semantic fusion.",
    )
    p.add_argument("--config", type=Path, help="key=value config file; flags override")
    p.add_argument("--dataset", type=Path, help="TUM-layout sequence directory")
    p.add_argument("--seg-dir", type=Path, help="segmentation sidecar root (default <dataset>/seg)")
    p.add_argument(
        "--intrinsics",
        help="fx,fy,cx,cy (optionally ,width,height); default: dataset "
        "intrinsics.txt or scaled TUM values",
    )
    p.add_argument(
        "--omega",
        default="sidecar",
        help="photometric weight source: const:<v>, sidecar, or off",
    )
    p.add_argument("--frames", help="inclusive frame range a:b")
    p.add_argument("--out", type=Path, help="output directory (default <dataset>_out)")
    p.add_argument(
        "--eval",
        default="ate,mem",
        help="comma list from {ate,recon,iou,mem}",
    )
    p.add_argument(
        "--ablate",
        help="comma list of omega values; runs the pipeline once per value "
        "and writes a comparison table",
    )
    p.add_argument("--refine-n", type=int, help="refinement window length")
    p.add_argument("--refine-sigma", type=int, help="refinement promotion threshold")
    p.add_argument(
        "--no-refine", action="store_true", help="disable segmentation refinement"
    )
    p.add_argument(
        "--synth",
        choices=sorted(PRESETS),
        help="render this synthetic preset into --dataset if it does not exist yet",
    )
    p.add_argument("--synth-frames", type=int, help="frame count for --synth")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.config:
        file_values = _read_config_file(args.config)
        # config supplies defaults; explicit flags win
        given = {a.replace("-", "_").lstrip("_") for a in (argv or sys.argv[1:]) if a.startswith("--")}
        given = {g.split("=", 1)[0] for g in given}
        for key, value in file_values.items():
            if key in given:
                continue
            if not hasattr(args, key):
                parser.error(f"unknown config key {key!r}")
            current = getattr(args, key)
            default = parser.get_default(key)
            if current == default:
                if key in ("dataset", "seg_dir", "out", "config"):
                    value = Path(value)
                elif key in ("refine_n", "refine_sigma", "synth_frames"):
                    value = int(value)
                elif key == "no_refine":
                    value = value.lower() in ("1", "true", "yes")
                setattr(args, key, value)

    if args.dataset is None:
        parser.error("--dataset is required (directly or via --config)")

    try:
        if args.synth and not (args.dataset / "rgb.txt").is_file():
            print(f"rendering synthetic preset {args.synth!r} into {args.dataset}")
            make_preset_dataset(args.synth, args.dataset, frames=args.synth_frames)

        omega_mode, omega_const = _parse_omega(args.omega)
        evals = tuple(v for v in args.eval.split(",") if v)
        for e in evals:
            if e not in ("ate", "recon", "iou", "mem"):
                parser.error(f"unknown eval {e!r}")

        cfg = RunConfig(
            dataset=args.dataset,
            out_dir=args.out if args.out else Path(str(args.dataset) + "_out"),
            seg_dir=args.seg_dir,
            intrinsics=_parse_intrinsics(args.intrinsics) if args.intrinsics else None,
            omega_mode=omega_mode,
            omega_const=omega_const,
            frame_range=_parse_frames(args.frames) if args.frames else None,
            evals=evals,
            refine_enabled=not args.no_refine,
        )
        if args.refine_n:
            cfg.refine.window = args.refine_n
        if args.refine_sigma:
            cfg.refine.sigma_object = args.refine_sigma

        if args.ablate:
            omegas = [float(v) for v in args.ablate.split(",") if v]
            rows = run_ablation(cfg, omegas)
            print((cfg.out_dir / "ablation.txt").read_text(), end="")
            return 0 if any(r["status"] == "ok" for r in rows) else 2

        result = run_pipeline(cfg)
        print(f"wrote {len(result.trajectory)} poses to {cfg.out_dir / 'trajectory.txt'}")
        for key in sorted(result.metrics):
            print(f"  {key} = {result.metrics[key]}")
        return 0
    except TrackingLostError as exc:
        print(f"error: tracking lost: {exc}", file=sys.stderr)
        return 2
    except DatasetError as exc:
        print(f"error: dataset: {exc}", file=sys.stderr)
        return 1
    except SurfelSlamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
