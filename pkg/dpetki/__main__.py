"""Command-line entry point for dpetki.

Run with: uv run -m dpetki [--seed N] [--threads N] [--out DIR] <command> [args]

Commands are dispatched here (via __main__.py rather than a submodule) so that
running a module that __init__.py already imports does not trigger runpy's
"found in sys.modules" RuntimeWarning.
"""
import argparse

from .pipeline import (
    cmd_fit_mcif,
    cmd_frame_select,
    cmd_idif,
    cmd_metrics,
    cmd_patlak,
    cmd_phantom,
    cmd_run,
    cmd_segment,
    cmd_zscore,
)


def build_parser():
    parser = argparse.ArgumentParser(prog="dpetki")
    parser.add_argument("--seed", type=int, help="Random seed (overrides the config)")
    parser.add_argument("--threads", type=int, help="Worker threads (results do not depend on it)")
    parser.add_argument("--out", help="Output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="Generate a synthetic dynamic PET phantom")
    p.add_argument("--config", help="PhantomConfig JSON (defaults if omitted)")

    p = sub.add_parser("run", help="Run the full pipeline")
    p.add_argument("config", help="PipelineConfig JSON")

    p = sub.add_parser("frame-select", help="Select the reference frame")
    p.add_argument("volume", help="Dynamic volume (.raw/.json base or .nii)")
    p.add_argument("--frames", type=int, default=10, help="Early frames to scan")
    p.add_argument("--crop-fraction", type=float, default=0.5, help="Central crop per axis")

    p = sub.add_parser("segment", help="Segment the carotids")
    p.add_argument("volume", help="Dynamic volume")
    p.add_argument("--frame", type=int, help="Frame to segment (auto-selected if omitted)")
    p.add_argument("--config", help="SegConfig JSON")

    p = sub.add_parser("idif", help="Extract IDIF and peri-carotid tissue curves")
    p.add_argument("volume", help="Dynamic volume")
    p.add_argument("mask", help="Carotid mask")
    p.add_argument("--config", help="IdifConfig JSON")

    p = sub.add_parser("fit-mcif", help="Fit the model-corrected input function")
    p.add_argument("idif", help="IDIF CSV")
    p.add_argument("tissue", help="Tissue CSV")
    p.add_argument("--config", help="FitConfig JSON")

    p = sub.add_parser("patlak", help="Voxelwise Patlak Ki map")
    p.add_argument("volume", help="Dynamic volume")
    p.add_argument("mcif", help="Input function CSV")
    p.add_argument("mask", help="Brain mask or atlas")
    p.add_argument("--t-star", type=float, default=10.0, help="Start of linear phase (min)")

    p = sub.add_parser("zscore", help="Regional z-scores of a Ki map")
    p.add_argument("kimap", help="Ki map")
    p.add_argument("atlas", help="Atlas label volume")
    p.add_argument("--cutoff", type=float, default=-2.0, help="Flag regions with z below this")
    p.add_argument("--expected-regions", type=int, default=36, help="Warn on other counts")

    p = sub.add_parser("metrics", help="Score predictions against truth")
    p.add_argument("--kind", choices=["mask", "tac"], default="mask")
    p.add_argument("--pred", action="append", required=True, help="Prediction (repeatable)")
    p.add_argument("--truth", action="append", required=True, help="Truth (repeatable)")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    common = {"out": args.out}

    if args.command == "phantom":
        return cmd_phantom(args.config, seed=args.seed, threads=args.threads, **common)
    if args.command == "run":
        return cmd_run(args.config, seed=args.seed, threads=args.threads, **common)
    if args.command == "frame-select":
        return cmd_frame_select(args.volume, n_frames=args.frames,
                                crop_fraction=args.crop_fraction, **common)
    if args.command == "segment":
        return cmd_segment(args.volume, frame=args.frame, config=args.config, **common)
    if args.command == "idif":
        return cmd_idif(args.volume, args.mask, config=args.config, **common)
    if args.command == "fit-mcif":
        return cmd_fit_mcif(args.idif, args.tissue, config=args.config,
                            seed=args.seed, threads=args.threads, **common)
    if args.command == "patlak":
        return cmd_patlak(args.volume, args.mcif, args.mask, t_star=args.t_star,
                          threads=args.threads, **common)
    if args.command == "zscore":
        return cmd_zscore(args.kimap, args.atlas, cutoff=args.cutoff,
                          expected_regions=args.expected_regions, **common)
    if args.command == "metrics":
        return cmd_metrics(args.pred, args.truth, args.kind, **common)

    parser.error(f"unknown command: {args.command}")  # pragma: no cover


if __name__ == "__main__":
    raise SystemExit(main())
