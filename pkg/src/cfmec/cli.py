"""Command-line entry point: ``cfmec {run,feasibility,compare,dump-snapshot}``.

Configuration is assembled from presets, then an optional JSON file, then
per-key flags (every config field has a ``--field-name`` flag).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import harness, propagation, scenario
from . import association as asc
from .config import ConfigError, SystemConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ALL_INFEASIBLE = 3

# fields with dedicated short flags
_ALIASES = {"rng_seed": "--seed"}


def _parse_value(kind: str, text: str):
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind.startswith("tuple"):
        parts = [float(x) for x in text.split(",")]
        if len(parts) != 2:
            raise argparse.ArgumentTypeError(f"expected LOW,HIGH, got {text!r}")
        return tuple(parts)
    return text


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with config keys")
    p.add_argument("--preset", action="append", choices=sorted(config_mod.PRESETS),
                   help="preset to apply (repeatable, applied in order; default desk)")
    p.add_argument("--workers", type=int, default=1, help="parallel snapshot workers")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    g = p.add_argument_group("config overrides")
    for f in dataclasses.fields(SystemConfig):
        if f.name == "preset":
            continue
        flag = _ALIASES.get(f.name, "--" + f.name.replace("_", "-"))
        kind = str(f.type)
        g.add_argument(flag, dest=f"cfg_{f.name}", default=None, metavar=kind.upper().split("[")[0],
                       type=lambda t, kind=kind: _parse_value(kind, t), help=f"override {f.name}")


def build_config(args: argparse.Namespace) -> SystemConfig:
    presets = args.preset or ["desk"]
    values: dict = {}
    for name in presets:
        values.update(config_mod.PRESETS[name])
    values["preset"] = "+".join(presets)
    if args.config is not None:
        try:
            loaded = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        values.update(loaded)
    for f in dataclasses.fields(SystemConfig):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            values[f.name] = v
    return config_mod.build(values)


def _cmd_run(cfg: SystemConfig, args) -> int:
    res = harness.run_campaign(cfg, args.workers)
    out = harness.write_outputs(res, args.out)
    config_mod.dump(cfg, out / "config.json")
    meta = res.metadata()
    print(f"{meta['feasible_realizations']}/{len(res.outcomes)} realizations feasible; "
          f"outputs in {out}")
    return EXIT_OK if res.feasible else EXIT_ALL_INFEASIBLE


def _cmd_feasibility(cfg: SystemConfig, args) -> int:
    rows = harness.run_feasibility(cfg, args.workers)
    args.out.mkdir(parents=True, exist_ok=True)
    harness.write_feasibility(rows, args.out / "feasibility.csv")
    n_rough = sum(r.rough == "likely-feasible" for r in rows)
    n_acc = sum(r.report.feasible for r in rows)
    print(f"rough pass {n_rough}/{len(rows)}, accurate feasible {n_acc}/{len(rows)}; "
          f"report in {args.out / 'feasibility.csv'}")
    return EXIT_OK if n_acc or n_rough else EXIT_ALL_INFEASIBLE


def _cmd_compare(cfg: SystemConfig, args) -> int:
    modes = tuple(args.modes.split(","))
    runs, table = harness.compare_modes(cfg, modes, args.workers)
    args.out.mkdir(parents=True, exist_ok=True)
    for mode, res in runs.items():
        harness.write_outputs(res, args.out / mode)
    harness.write_comparison(table, args.out / "compare.csv")
    sel = harness.selection_switch_off(cfg, tuple(args.selections.split(",")))
    with open(args.out / "selection.csv", "w") as fh:
        fh.write("snapshot," + ",".join(sel) + "\n")
        for i in range(cfg.n_snapshots):
            fh.write(f"{i}," + ",".join(repr(float(v[i])) for v in sel.values()) + "\n")
    for c in table:
        print(f"{c.metric:>13} {c.mode_a} vs {c.mode_b}: median {c.median_a:.4g} vs {c.median_b:.4g}, "
              f"a lower in {c.frac_a_lower:.0%} of {c.n_pairs} snapshots (sign test p={c.sign_test_p:.3g})")
    for name, v in sel.items():
        print(f"{name:>13} switched-off APs: mean {np.mean(v):.1%}")
    return EXIT_OK if any(r.feasible for r in runs.values()) else EXIT_ALL_INFEASIBLE


def _cmd_dump(cfg: SystemConfig, args) -> int:
    snap = scenario.build_snapshot(cfg, args.snapshot)
    args.out.mkdir(parents=True, exist_ok=True)
    propagation.dump_snapshot_csv(snap, args.out / "correlation.csv")
    if cfg.mode == "cellular":
        topo = asc.associate_cellular(snap.beta, cfg.tau_p)
    else:
        topo = asc.assign_pilots_dcc(snap.beta, cfg.tau_p)
        topo = asc.apply_selection(topo, snap.beta, *cfg.selection)
    topo.dump_csv(args.out / "topology.csv")
    info = {
        "snapshot": args.snapshot,
        "ap_positions": snap.ap_positions.tolist(),
        "user_positions": snap.user_positions.tolist(),
        "beta": snap.beta.tolist(),
        "f_sites": snap.f_ap.tolist(),
    }
    (args.out / "snapshot.json").write_text(json.dumps(info, indent=1) + "\n")
    print(f"snapshot {args.snapshot} written to {args.out}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfmec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="Monte-Carlo campaign")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_run)
    p = sub.add_parser("feasibility", help="feasibility checks only")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_feasibility)
    p = sub.add_parser("compare", help="matched-seed comparison of modes and AP selections")
    _add_config_flags(p)
    p.add_argument("--modes", default="cellfree,cellular,cran")
    p.add_argument("--selections", default="dcc,fcc:5,lsfbs:0.95")
    p.set_defaults(func=_cmd_compare)
    p = sub.add_parser("dump-snapshot", help="write one snapshot's geometry and correlations")
    _add_config_flags(p)
    p.add_argument("--snapshot", type=int, default=0)
    p.set_defaults(func=_cmd_dump)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        cfg = build_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return args.func(cfg, args)


if __name__ == "__main__":
    sys.exit(main())
