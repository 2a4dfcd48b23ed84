"""Command-line interface: encode an image folder into an XMAB bundle."""

from __future__ import annotations

import argparse
import json
import sys

from .encoders import EncoderUnavailableError
from .extract import extract
from .manifest import DEFAULT_TEMPLATE, ExtractionManifest, ManifestError

EXIT_OK = 0
EXIT_MISSING = 3
EXIT_INVALID = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xmab-extract",
        description="Encode an image-folder dataset (one subdirectory per "
        "class) into an XMAB embedding bundle.",
    )
    parser.add_argument("--manifest", help="JSON manifest; flags override it")
    parser.add_argument("--root", help="dataset root directory")
    parser.add_argument("--out", help="output bundle path")
    parser.add_argument("--encoder", help="encoder id (default: lite)")
    parser.add_argument(
        "--template",
        action="append",
        help=f"prompt template with [CLS] placeholder; repeatable "
        f"(default: {DEFAULT_TEMPLATE!r}); multiple templates are averaged",
    )
    parser.add_argument(
        "--test-fraction",
        type=float,
        dest="test_fraction",
        help="per-class tail fraction held out as the test split (default 0.25)",
    )
    parser.add_argument(
        "--write-manifest",
        help="also write the resolved manifest JSON to this path",
    )
    return parser


def _manifest_from_args(args) -> ExtractionManifest:
    base = {}
    if args.manifest:
        with open(args.manifest, "r", encoding="utf-8") as fh:
            base = json.load(fh)
    if args.root:
        base["dataset_root"] = args.root
    if args.out:
        base["output_path"] = args.out
    if args.encoder:
        base["encoder"] = args.encoder
    if args.template:
        base["prompt_templates"] = args.template
    if args.test_fraction is not None:
        base["test_fraction"] = args.test_fraction
    if "dataset_root" not in base or "output_path" not in base:
        raise ManifestError("--root and --out (or a manifest) are required")
    return ExtractionManifest(**base)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        manifest = _manifest_from_args(args)
        result = extract(manifest)
        if args.write_manifest:
            with open(args.write_manifest, "w", encoding="utf-8") as fh:
                fh.write(manifest.to_json())
                fh.write("\n")
    except FileNotFoundError as exc:
        print(json.dumps({"error": "missing-file", "message": str(exc)}),
              file=sys.stderr)
        return EXIT_MISSING
    except (ManifestError, EncoderUnavailableError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return EXIT_INVALID
    print(
        json.dumps(
            {
                "bundle": result.output_path,
                "classes": result.class_names,
                "train": result.num_train,
                "test": result.num_test,
                "skipped": len(result.skipped),
            }
        )
    )
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
