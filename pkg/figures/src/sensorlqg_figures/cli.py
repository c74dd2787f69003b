"""Command line wrapper: render --kind {fig2|fig3} --in CSV --out IMG."""

from __future__ import annotations

import argparse
import sys

from .render import PlotSpec, RenderError, render


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="render",
        description="Render a sensorlqg CSV artifact into a figure.",
    )
    parser.add_argument("--kind", choices=("fig2", "fig3"), required=True)
    parser.add_argument("--in", dest="input_csv", required=True, metavar="CSV")
    parser.add_argument("--out", dest="output_image", required=True, metavar="IMG")
    parser.add_argument("--title", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    spec = PlotSpec(
        input_csv=args.input_csv,
        output_image=args.output_image,
        kind=args.kind,
        title=args.title,
    )
    try:
        render(spec)
    except (RenderError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
