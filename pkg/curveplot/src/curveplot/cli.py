"""Command-line surface: `curveplot plot --x evals --out fig.png label=curve.csv ...`

Exit codes: 0 success, 1 runtime failure (unreadable or malformed CSV),
2 usage error (bad flags or a positional without `label=path` shape).
"""

from __future__ import annotations

import argparse
import sys

from . import __version__
from .plotting import X_AXES, plot_curves, read_curve_csv


class UsageError(ValueError):
    """Bad flag or positional shape; maps to exit code 2."""


def _parse_pairs(tokens) -> list[tuple[str, str]]:
    pairs = []
    for tok in tokens:
        if "=" not in tok:
            raise UsageError(f"expected label=path, got {tok!r}")
        label, path = tok.split("=", 1)
        if not label or not path:
            raise UsageError(f"expected label=path with both parts nonempty, got {tok!r}")
        pairs.append((label, path))
    return pairs


def cmd_plot(ns: argparse.Namespace) -> int:
    pairs = _parse_pairs(ns.curves)
    curves = [read_curve_csv(path, label) for label, path in pairs]
    out = plot_curves(curves, ns.x, ns.out, ref_ll=ns.ref_ll, title=ns.title)
    n_labels = len({label for label, _ in pairs})
    print(f"wrote {out}: {len(curves)} curves, {n_labels} labels, x={ns.x}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="curveplot",
        description="Render learning-curve CSVs into comparison figures.",
    )
    parser.add_argument("--version", action="version", version=f"curveplot {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plot", help="plot one figure from curve CSVs")
    p.add_argument("--x", choices=list(X_AXES), default="evals")
    p.add_argument("--ref-ll", type=float, default=None,
                   help="horizontal reference line at this log-likelihood")
    p.add_argument("--out", required=True, help="output image path")
    p.add_argument("--title", default=None)
    p.add_argument("curves", nargs="+", metavar="label=csv",
                   help="curve CSVs; repeated labels share a color and get a min-max band")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    ns = parser.parse_args(argv)
    try:
        return ns.func(ns)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
