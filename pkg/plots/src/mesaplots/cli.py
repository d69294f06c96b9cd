"""mesaplots render / reproduce-all.

render draws one figure from explicit inputs; reproduce-all walks a completed
experiment directory (as written by the mesalab sweep/train/flow commands)
and emits the full panel set: ab-dynamics, ratio and MSE curves, flow
overlays, and parameter heatmaps per run.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from mesaplots.figures import FigureSpec, RenderError, render


def cmd_render(args) -> int:
    spec = FigureSpec(
        kind=args.kind,
        inputs=tuple(args.inputs),
        output=args.out,
        reference=args.ref,
        labels=tuple(args.label or ()),
        title=args.title or "",
    )
    try:
        path = render(spec)
    except RenderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {path}")
    return 0


def _theory_reference(run_dir: Path) -> float | None:
    summary = run_dir / "sweep_summary.csv"
    if summary.exists():
        lines = summary.read_text().splitlines()
        header = lines[0].split(",")
        if "theory_ab" in header and len(lines) > 1:
            return float(lines[1].split(",")[header.index("theory_ab")])
    flow_summary = run_dir / "flow_summary.json"
    if flow_summary.exists():
        return float(json.loads(flow_summary.read_text())["theory_ab"])
    return None


def cmd_reproduce_all(args) -> int:
    run_dir = Path(args.run)
    out_dir = Path(args.out)
    if not run_dir.is_dir():
        print(f"error: {run_dir} is not a directory", file=sys.stderr)
        return 1
    ref = _theory_reference(run_dir)
    written: list[Path] = []

    def emit(spec: FigureSpec):
        written.append(render(spec))

    try:
        train_runs = sorted(p.parent for p in run_dir.glob("init_*/trajectory.csv"))
        if (run_dir / "trajectory.csv").exists():
            train_runs.insert(0, run_dir)
        if train_runs:
            trajs = tuple(str(p / "trajectory.csv") for p in train_runs)
            labels = tuple(p.name if p != run_dir else "run" for p in train_runs)
            emit(FigureSpec("ab_dynamics", trajs, str(out_dir / "ab_dynamics.png"),
                            reference=ref, labels=labels))
            evals = tuple(str(p / "eval.csv") for p in train_runs if (p / "eval.csv").exists())
            if evals:
                elabels = tuple(p.name if p != run_dir else "run" for p in train_runs if (p / "eval.csv").exists())
                emit(FigureSpec("ratio", evals, str(out_dir / "ratio.png"), labels=elabels))
                emit(FigureSpec("mse", evals, str(out_dir / "mse.png"), labels=elabels))
            for p in train_runs:
                heat = p / "heatmap.json"
                if heat.exists():
                    tag = p.name if p != run_dir else "run"
                    emit(FigureSpec("heatmap", (str(heat),), str(out_dir / f"heatmap_{tag}.png"),
                                    title=tag))
        flows = sorted(run_dir.glob("**/flow_*.csv"))
        if flows:
            emit(FigureSpec("flow_overlay", tuple(str(p) for p in flows),
                            str(out_dir / "flow_overlay.png"), reference=ref,
                            labels=tuple(p.stem for p in flows)))
    except RenderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if not written:
        print(f"error: no renderable artifacts found under {run_dir}", file=sys.stderr)
        return 1
    for path in written:
        print(f"wrote {path}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="mesaplots", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render one figure")
    p.add_argument("--kind", required=True,
                   choices=["ab_dynamics", "ratio", "mse", "heatmap", "flow_overlay"])
    p.add_argument("--in", dest="inputs", nargs="+", required=True, help="input CSV/JSON file(s)")
    p.add_argument("--ref", type=float, default=None, help="reference line value")
    p.add_argument("--out", required=True, help="output image path")
    p.add_argument("--label", nargs="*", help="legend labels, one per input")
    p.add_argument("--title", help="figure title")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("reproduce-all", help="render every panel for an experiment directory")
    p.add_argument("--run", required=True, help="experiment output directory")
    p.add_argument("--out", required=True, help="directory for the figures")
    p.set_defaults(func=cmd_reproduce_all)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
