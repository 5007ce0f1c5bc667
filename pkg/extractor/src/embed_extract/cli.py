"""CLI: encode an image tree into CFF1 feature files."""

from __future__ import annotations

import argparse
import logging
import sys

from .encoders import EncoderUnavailable
from .extract import DEFAULT_TEMPLATE, ExtractJob, extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embed-extract",
        description="Encode an image directory tree (one subdirectory per class) "
        "and the class prompts into PREFIX.features.cff, PREFIX.text.cff and "
        "PREFIX.manifest.json.",
    )
    parser.add_argument("--root", required=True, help="image root directory")
    parser.add_argument(
        "--encoder",
        default="proj-64",
        help="encoder name: proj-<dim> (built-in, deterministic) or hf:<model>",
    )
    parser.add_argument(
        "--template",
        default=DEFAULT_TEMPLATE,
        help="prompt template containing [CLASS] (default: %(default)r)",
    )
    parser.add_argument("--out", required=True, help="output path prefix")
    parser.add_argument("--batch-size", type=int, default=16)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        job = ExtractJob(
            root=args.root,
            out_prefix=args.out,
            encoder=args.encoder,
            template=args.template,
            batch_size=args.batch_size,
        )
        result = extract(job)
    except (EncoderUnavailable, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    print(f"classes: {', '.join(result.class_names)}")
    print(f"samples: {result.num_samples} (skipped {len(result.skipped)})")
    for path in (result.features_path, result.text_path, result.manifest_path):
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
