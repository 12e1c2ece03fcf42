"""``qroute`` command-line entry point.

Every command is deterministic given its config and seed.  Failures print a
single ``qroute: error: <Kind>: <message>`` line on stderr and exit with 2.
Set ``QROUTE_LOG`` (DEBUG, INFO, WARNING, ...) for progress output.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import sys
from importlib import resources
from pathlib import Path
from typing import Sequence

from . import __version__
from .checkpoint import CheckpointError
from .config import Config, apply_overrides, config_to_text, load_config
from .env import ConfigError, ContractError, InstanceFormatError, generate_instance, load_csv, subsample, write_csv
from .hwplan import PlanError, build_run_plan, enumerate_line_placements, export_plan, load_graph
from .qsim import AngleSet
from .trainer import (
    METRICS_COLUMNS,
    checkpoint_name,
    evaluate,
    load_checkpoint,
    rng_stream,
    train,
)

log = logging.getLogger("qroute")

EXIT_ERROR = 2
_EXPECTED = (ConfigError, InstanceFormatError, ContractError, CheckpointError, PlanError, OSError, ValueError)


def default_graph_path() -> Path:
    return Path(str(resources.files("qroute") / "data" / "octagonal30.edges"))


# -- config plumbing ---------------------------------------------------------------


def _config(args, base: Config | None = None) -> Config:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    if getattr(args, "head", None) is not None:
        overrides.append(f"policy.head_type={args.head}")
    if getattr(args, "out", None) is not None:
        overrides.append(f"paths.out_dir={args.out}")
    if base is not None:
        return apply_overrides(base, overrides)
    return load_config(args.config, overrides)


def _instances(paths: Sequence[str]):
    files: list[Path] = []
    for p in map(Path, paths):
        files.extend(sorted(p.glob("*.csv")) if p.is_dir() else [p])
    if not files:
        raise ConfigError("no instance files given")
    return files, [load_csv(f) for f in files]


# -- commands ----------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pool_path = args.pool or cfg.env.pool_csv
    pool = load_csv(pool_path) if pool_path else None
    spec = cfg.env.generator_spec(cfg.train.seed)
    width = max(4, len(str(args.count - 1)))
    for i in range(args.count):
        rng = rng_stream(cfg.train.seed, 5, i)
        inst = subsample(pool, cfg.env.n_nodes - 1, rng) if pool is not None else generate_instance(spec, rng)
        write_csv(inst, out / f"instance_{i:0{width}d}.csv")
    print(f"wrote {args.count} instances to {out}")
    return 0


def cmd_train(args) -> int:
    # a checkpoint's config echo is enough to resume
    base = load_checkpoint(args.resume).cfg if args.resume and not args.config else None
    cfg = _config(args, base)
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(config_to_text(cfg), encoding="utf-8")
    result = train(cfg, out, resume=args.resume)
    last = result.metrics[-1] if result.metrics else None
    if last is not None:
        print(f"epoch={last.epoch} mean_cost={last.mean_cost!r} checkpoint={out / checkpoint_name(last.epoch)}")
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    files, instances = _instances(args.instances)
    report = evaluate(state.policy, instances, mode=args.mode, seed=args.seed or 0)
    text = report.to_text()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_rollout(args) -> int:
    state = load_checkpoint(args.checkpoint)
    inst = load_csv(args.instance)
    report = evaluate(state.policy, [inst], mode=args.mode, seed=args.seed or 0)
    print(f"route={'-'.join(map(str, report.routes[0]))}")
    print(f"cost={float(report.costs[0])!r}")
    return 0


def cmd_plan_hw(args) -> int:
    graph = load_graph(args.graph or default_graph_path())
    placements = enumerate_line_placements(graph)
    angles = None
    n_nodes, heads, layers = args.nodes, args.heads, args.layers
    if args.checkpoint:
        if not args.instance:
            raise ConfigError("--checkpoint needs --instance to compute circuit angles")
        state = load_checkpoint(args.checkpoint)
        inst = load_csv(args.instance)
        per_layer = state.policy.circuit_angles(inst)
        n_nodes, layers = inst.n, len(per_layer)
        heads = per_layer[0]["key_angles"].shape[0]
        angles = {}
        for layer, slot in enumerate(per_layer):
            ka, qa = slot["key_angles"], slot["query_angles"]
            for h in range(heads):
                for i in range(n_nodes):
                    for j in range(n_nodes):
                        angles[(layer, h, i, j)] = AngleSet.from_array(list(ka[h, i]) + list(qa[h, j]))
    if len(placements) < args.slots:
        raise PlanError(f"graph fits only {len(placements)} disjoint line placements, {args.slots} requested")
    plan = build_run_plan(n_nodes, heads, layers, args.slots, args.shots, placements, angles)
    out = Path(args.out or "hwplan")
    export_plan(plan, out)
    print(f"circuits={plan.circuit_count} basis_runs={plan.basis_run_count} calls={plan.call_count} out={out}")
    return 0


def _metrics_rows(path: Path) -> list[dict]:
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_COLUMNS:
            raise ConfigError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return list(reader)


def _metrics_file(path: str) -> Path:
    p = Path(path)
    return p / "metrics.csv" if p.is_dir() else p


def cmd_export_metrics(args) -> int:
    """Long-format CSV (epoch, batch, metric, value) for plotting tools."""
    rows = _metrics_rows(_metrics_file(args.run_dir))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("epoch", "batch", "metric", "value"))
    for r in rows:
        for key in METRICS_COLUMNS[2:]:
            w.writerow((r["epoch"], r["batch"], key, r[key]))
    if args.out:
        Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
    else:
        sys.stdout.write(buf.getvalue())
    return 0


def render_svg(rows: list[dict], width: int = 640, height: int = 400) -> str:
    epochs = [r for r in rows if r["batch"] == "-1"]
    series = {
        "mean_cost": [(int(r["epoch"]), float(r["mean_cost"])) for r in epochs],
        "baseline_mean_cost": [(int(r["epoch"]), float(r["baseline_mean_cost"])) for r in epochs],
    }
    pts = [p for s in series.values() for p in s if math.isfinite(p[1])]
    if not pts:
        raise ConfigError("metrics contain no finite epoch rows to plot")
    x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
    y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1
    pad = 50

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    colors = {"mean_cost": "#1f77b4", "baseline_mean_cost": "#d62728"}
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle" font-size="12">epoch</text>',
        f'<text x="{pad - 6}" y="{pad:.1f}" text-anchor="end" font-size="10">{y1:.3g}</text>',
        f'<text x="{pad - 6}" y="{height - pad:.1f}" text-anchor="end" font-size="10">{y0:.3g}</text>',
        f'<text x="{pad}" y="{height - pad + 14}" text-anchor="middle" font-size="10">{x0}</text>',
        f'<text x="{width - pad}" y="{height - pad + 14}" text-anchor="middle" font-size="10">{x1}</text>',
    ]
    for k, (name, s) in enumerate(series.items()):
        s = [p for p in s if math.isfinite(p[1])]
        if not s:
            continue
        path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in s)
        out.append(f'<polyline fill="none" stroke="{colors[name]}" stroke-width="2" points="{path}"/>')
        out.append(f'<text x="{width - pad}" y="{pad + 14 * k}" text-anchor="end" font-size="11" fill="{colors[name]}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_plot(args) -> int:
    svg = render_svg(_metrics_rows(_metrics_file(args.metrics)))
    out = Path(args.out or "metrics.svg")
    out.write_text(svg, encoding="utf-8")
    print(f"wrote {out}")
    return 0


# -- parser ---------------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value (repeatable)")
    if seed:
        p.add_argument("--seed", type=int, help="overrides train.seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qroute", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"qroute {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write random instances as CSV")
    _common(p)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--out", help="output directory (paths.out_dir)")
    p.add_argument("--pool", help="subsample suppliers from this instance CSV")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a policy")
    _common(p)
    p.add_argument("--out", help="run directory (paths.out_dir)")
    p.add_argument("--head", choices=("quantum", "classical"))
    p.add_argument("--resume", help="continue from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on instance files")
    p.add_argument("checkpoint")
    p.add_argument("instances", nargs="+", help="CSV files or directories")
    p.add_argument("--mode", choices=("sample", "greedy"), default="greedy")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="also write the report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rollout", help="decode one instance and print its route")
    p.add_argument("checkpoint")
    p.add_argument("instance")
    p.add_argument("--mode", choices=("sample", "greedy"), default="greedy")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("plan-hw", help="export a SWAP-free hardware run plan")
    p.add_argument("--nodes", type=int, default=5)
    p.add_argument("--heads", type=int, default=6)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--slots", type=int, default=5)
    p.add_argument("--shots", type=int, default=500)
    p.add_argument("--graph", help="edge-list file (default: bundled 30-qubit lattice)")
    p.add_argument("--checkpoint", help="take circuit angles from this checkpoint")
    p.add_argument("--instance", help="instance CSV for --checkpoint")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_plan_hw)

    p = sub.add_parser("export-metrics", help="long-format metrics CSV for plotting")
    p.add_argument("run_dir", help="run directory or metrics.csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_metrics)

    p = sub.add_parser("plot", help="SVG cost curves from a metrics CSV")
    p.add_argument("metrics", help="run directory or metrics.csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("QROUTE_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _EXPECTED as exc:
        message = " ".join(str(exc).split())
        print(f"qroute: error: {type(exc).__name__}: {message}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
