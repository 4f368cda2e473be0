"""Command line entry point: ``c2c process_3d INPUT_PATH /data``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import ConfigError, RootNotFound
from .pipeline import RunConfig, default_mask_root, run
from .seg_backend import (
    MASK_FILES,
    ONNX_RUNTIME,
    SPINE_MODEL,
    STANFORD_MODEL,
    ProviderConfig,
    available_providers,
)
from .spine import RoiSpec
from .tissue import PostProcessConfig

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


def _on_off(value: str) -> bool:
    v = value.lower()
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return v == "on"


def _positive_int(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="c2c", description="CT body composition analysis")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{process_3d,process_2d,providers}")
    for name, help_text in (("process_3d", "spine ROIs and T12-L5 muscle/fat metrics per series"),
                            ("process_2d", "muscle/fat metrics on every axial DICOM file")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("input", nargs="*", metavar="[INPUT_PATH] PATH",
                       help="input folder; the literal word INPUT_PATH may precede it")
        p.add_argument("--input-path", type=Path)
        p.add_argument("--output-root", type=Path, help="default: $C2C_OUTPUT_ROOT or ./outputs")
        p.add_argument("--roi-shape", choices=("sphere", "cube"), default="sphere")
        p.add_argument("--roi-diameter-mm", type=float, default=10.0)
        p.add_argument("--stat", choices=("median", "mean"), default="median")
        p.add_argument("--provider", choices=("mask_files", "onnx"), default="mask_files")
        p.add_argument("--mask-root", type=Path, help="default: <input>/masks")
        p.add_argument("--model-path", type=Path, help="ONNX model file for --provider onnx")
        p.add_argument("--model", default=STANFORD_MODEL, help="tissue model id")
        p.add_argument("--spine-model", default=SPINE_MODEL)
        p.add_argument("--workers", type=_positive_int, default=1)
        p.add_argument("--save-images", type=_on_off, default=True, metavar="on|off")
    p = sub.add_parser("providers", help="list segmentation providers and their readiness")
    p.add_argument("--model-path", type=Path)
    return parser


def _input_path(parser, args) -> Path:
    tokens = list(args.input)
    if tokens and tokens[0] == "INPUT_PATH":
        tokens = tokens[1:]
    if args.input_path is not None:
        if tokens:
            parser.error("give the input path either positionally or with --input-path")
        return args.input_path
    if len(tokens) != 1:
        parser.error("exactly one input path is required")
    return Path(tokens[0])


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "providers":
        cfg = ProviderConfig(kind=ONNX_RUNTIME, model_path=args.model_path) if args.model_path else None
        for st in available_providers(cfg):
            state = "ready" if st.ready else f"unavailable ({st.reason})"
            print(f"{st.kind}: {state}")
        return EXIT_OK

    input_path = _input_path(parser, args)
    try:
        if args.provider == "onnx":
            if args.model_path is None:
                parser.error("--provider onnx needs --model-path")
            provider = ProviderConfig(kind=ONNX_RUNTIME, model_path=args.model_path)
        else:
            provider = ProviderConfig(kind=MASK_FILES,
                                      mask_root=args.mask_root or default_mask_root(input_path.absolute()))
        cfg = RunConfig(
            mode=args.command,
            input_path=input_path,
            provider=provider,
            output_root=args.output_root,
            roi_spec=RoiSpec(args.roi_shape, args.roi_diameter_mm, args.stat),
            post=PostProcessConfig(),
            workers=args.workers,
            tissue_model=args.model,
            spine_model=args.spine_model,
            save_images=args.save_images,
        )
        manifest = run(cfg)
    except (ConfigError, RootNotFound, ValueError) as exc:
        print(f"c2c: error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    for rec in manifest.records:
        line = f"{rec.status:>16}  {rec.source}"
        if rec.reason:
            line += f"  ({rec.reason})"
        print(line)
    print(f"outputs: {manifest.run_dir}")
    return manifest.exit_code


if __name__ == "__main__":
    sys.exit(main())
