"""featx command line: extract feature grids, verify emitted files."""

from __future__ import annotations

import argparse
import sys

from .extract import VARIANTS, ExtractorConfig, ExtractorError, extract
from .mrgf import FormatError
from .verify import format_report, verify


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="featx", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="featurize a directory of PNG/JPEG images")
    p.add_argument("--images", required=True, help="directory of images")
    p.add_argument("--out", required=True, help="output feature file")
    p.add_argument("--variant", default="dinov2-small", choices=VARIANTS)
    p.add_argument("--resize", type=int, default=224,
                   help="shorter-side resize / center-crop size (default 224)")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--device", default="cpu")

    p = sub.add_parser("verify", help="re-parse a feature file and summarize it")
    p.add_argument("file")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "extract":
            config = ExtractorConfig(variant=args.variant, resize=args.resize,
                                     device=args.device, batch_size=args.batch)
            count = extract(args.images, config, args.out)
            print(f"wrote {count} records to {args.out}")
        else:
            print(format_report(verify(args.file)))
        return 0
    except (ExtractorError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
