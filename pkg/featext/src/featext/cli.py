"""Command-line front end: `featext extract`."""

import argparse
import sys

from featext.extract import ExtractError, extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="featext",
        description="Extract per-example image region features for the translator.")
    sub = parser.add_subparsers(dest="command", required=True)

    ex = sub.add_parser(
        "extract", help="crop regions, run the conv trunk, write a feature file",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    ex.add_argument("--tsv", required=True, help="7-column corpus TSV")
    ex.add_argument("--images", required=True, help="directory holding the images")
    ex.add_argument("--out", required=True, help="feature file to write")
    ex.add_argument("--batch", type=int, default=32, help="images per forward pass")
    ex.add_argument("--weights", default=None,
                    help="local VGG19-bn state file; seeded random init when omitted")
    ex.add_argument("--seed", type=int, default=0,
                    help="initialization seed used without --weights")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        n = extract(args.tsv, args.images, args.out, batch_size=args.batch,
                    weights_path=args.weights, seed=args.seed)
    except (ExtractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {n} records (L=49, D=512) -> {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
