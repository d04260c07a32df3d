"""Command-line surface: simulate, fit, ranks, forecast, irf, select, diagnose.

Every command loads a flat key-value config, echoes the seed and config hash,
and writes its outputs atomically.  Module errors exit nonzero after printing
a single-line JSON error record to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import chainio
from .config import RunConfig, load_config
from .data import PanelDataset, PanelSchema, load_panel, make_periods, parse_period
from .ecm import rank_posterior
from .errors import AlignmentMismatch, SchemaError, SdsemError
from .forecasting import forecast_conditional, forecast_metrics, forecast_unconditional
from .mcmc import gelman_rubin, pick_draw_columns, run_chains
from .multipliers import multiplier_posterior
from .selection import grid_search
from .state_space import simulate
from .synthetic import make_true_params

DATASET_META = "dataset_meta.json"


def _echo(config: RunConfig) -> None:
    print(f"seed={config.seed} config_hash={config.config_hash()}")


def _rng_for(config: RunConfig, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([config.seed, purpose]))


def _read_all_chains(directory):
    ids = chainio.list_chain_ids(directory)
    if not ids:
        raise SchemaError(f"no chain files found under {directory}")
    return [chainio.read_draws(directory, cid) for cid in ids]


def _dataset_meta(directory) -> dict:
    path = Path(directory) / DATASET_META
    if not path.exists():
        raise SchemaError(f"missing {DATASET_META} next to the draw files")
    return json.loads(path.read_text())


def cmd_simulate(args) -> int:
    config = load_config(args.config)
    _echo(config)
    rng = _rng_for(config, 1)
    params, anchors, w = make_true_params(
        config.n_sites, config.m, config.l, rng,
        n_vars_x=config.n_vars_x, order=config.order)
    data, path = simulate(params, config.n_periods, rng, adjacency=w)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    chainio.write_frame(data.to_long_frame(), out / "panel.csv")
    edges = [{"site_a": data.sites[i], "site_b": data.sites[u]}
             for i in range(data.n_sites) for u in range(i + 1, data.n_sites)
             if w.entries[i, u]]
    chainio.write_frame(pd.DataFrame(edges), out / "adjacency.csv")
    chainio.write_true_params(params, out / "truth_params.json")
    chainio.write_frame(
        pd.DataFrame(path.values,
                     columns=[f"factor{j}" for j in range(path.values.shape[1])]),
        out / "truth_factors.csv")
    meta = {"anchors_y": list(anchors.y_rows), "anchors_x": list(anchors.x_rows)}
    chainio.atomic_write_text(out / "truth_anchors.json", json.dumps(meta, indent=1))
    print(f"wrote synthetic panel to {out}")
    return 0


def _load_dataset(args, config: RunConfig) -> PanelDataset:
    schema = PanelSchema(y_var=args.y_var, x_vars=args.x_vars.split(","))
    data = load_panel(args.data, args.adjacency, schema)
    if config.holdout:
        data, _ = data.split_holdout(config.holdout)
    return data


def cmd_fit(args) -> int:
    config = load_config(args.config)
    _echo(config)
    data = _load_dataset(args, config)
    chains = run_chains(data, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for draws in chains:
        chainio.write_draws(draws, out, config_hash=config.config_hash())
    meta = {"sites": data.sites, "periods": data.periods,
            "y_names": data.y_names, "x_names": data.x_names,
            "n_vars_y": data.n_vars_y, "n_vars_x": data.n_vars_x}
    chainio.atomic_write_text(out / DATASET_META, json.dumps(meta, indent=1,
                                                             sort_keys=True))
    for draws in chains:
        rates = {k: round(v, 3) for k, v in draws.meta.acceptance.items()
                 if k.startswith("coef")}
        print(f"chain {draws.meta.chain_id}: {draws.n_draws} draws, "
              f"coef acceptance {rates}")
    return 0


def cmd_ranks(args) -> int:
    config = load_config(args.config)
    _echo(config)
    chains = _read_all_chains(args.draws)
    blocks = [p.ecm for d in chains for p in d.params]
    table = rank_posterior(blocks, threshold=config.rank_threshold)
    chainio.write_frame(chainio.rank_table_frame(table), args.out)
    print(f"wrote rank posterior to {args.out}")
    return 0


def _next_period(label: str) -> str:
    return make_periods(label, 2)[1]


def cmd_forecast(args) -> int:
    config = load_config(args.config)
    _echo(config)
    if config.horizon <= 0:
        raise SchemaError("config must set a positive horizon for forecasting")
    chains = _read_all_chains(args.draws)
    meta = _dataset_meta(args.draws)
    rng = _rng_for(config, 2)
    if args.conditional:
        if not args.future_x:
            print(json.dumps({"error": "UsageError",
                              "message": "--conditional requires --future-x"}),
                  file=sys.stderr)
            return 2
        x_future = _read_future_x(args.future_x, meta, config.horizon)
        result = forecast_conditional(chains, x_future, rng,
                                      replicates=config.forecast_replicates,
                                      level=config.credible_level)
    else:
        result = forecast_unconditional(chains, config.horizon, rng,
                                        replicates=config.forecast_replicates,
                                        level=config.credible_level)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = _next_period(meta["periods"][-1])
    chainio.write_frame(chainio.forecast_frame(result, meta["sites"], start),
                        out / "forecast.csv")
    if args.truth:
        truth = _read_truth_panel(args.truth, meta, config.horizon)
        metrics = forecast_metrics(result, truth, level=config.credible_level)
        chainio.atomic_write_text(
            out / "metrics.json",
            chainio.metrics_json(metrics, {"conditional": bool(args.conditional),
                                           "n_excluded": result.n_excluded}))
    print(f"wrote forecast ({'conditional' if args.conditional else 'unconditional'}) "
          f"to {out}, excluded draws: {result.n_excluded}")
    return 0


def _pivot_long(path, meta, horizon, names_key):
    frame = pd.read_csv(path)
    required = {"site", "period", "variable", "value"}
    if not required.issubset(frame.columns):
        raise SchemaError(f"{path} must have columns {sorted(required)}")
    frame["site"] = frame["site"].astype(str)
    periods = sorted(frame["period"].unique(), key=parse_period)
    if len(periods) < horizon:
        raise AlignmentMismatch(
            f"{path} covers {len(periods)} periods, need {horizon}")
    periods = periods[:horizon]
    names = meta[names_key]
    n_vars = len(names)
    sites = meta["sites"]
    out = np.empty((len(sites) * n_vars, horizon))
    for vi, var in enumerate(names):
        sub = frame[frame["variable"] == var]
        table = sub.pivot_table(index="site", columns="period", values="value",
                                aggfunc="first").reindex(index=sites, columns=periods)
        if table.isna().any().any():
            raise AlignmentMismatch(f"{path} is incomplete for variable {var!r}")
        out[vi::n_vars] = table.to_numpy(dtype=float)
    return out


def _read_future_x(path, meta, horizon):
    return _pivot_long(path, meta, horizon, "x_names")


def _read_truth_panel(path, meta, horizon):
    return _pivot_long(path, meta, horizon, "y_names")


def cmd_irf(args) -> int:
    config = load_config(args.config)
    _echo(config)
    chains = _read_all_chains(args.draws)
    meta = _dataset_meta(args.draws)
    params = [p for d in chains for p in d.params]
    series = multiplier_posterior(params, horizon=config.horizon or 8)
    frame = chainio.irf_frame(series, meta["sites"], meta["sites"],
                              meta["n_vars_x"])
    chainio.write_frame(frame, args.out)
    print(f"wrote impulse responses to {args.out}")
    return 0


def cmd_select(args) -> int:
    config = load_config(args.config)
    _echo(config)
    data = _load_dataset(args, config)
    if args.points:
        points = []
        for token in args.points.split(","):
            m_str, l_str = token.split(":")
            points.append((int(m_str), int(l_str)))
        results = grid_search(data, [], [], config, points=points)
    else:
        m_values = [int(v) for v in args.m_values.split(",")]
        l_values = [int(v) for v in args.l_values.split(",")]
        results = grid_search(data, m_values, l_values, config)
    chainio.write_frame(chainio.grid_frame(results), args.out)
    best = results[0]
    print(f"best point m={best.m} l={best.l} PMCC={best.pmcc:.3f}")
    return 0


def cmd_diagnose(args) -> int:
    config = load_config(args.config)
    _echo(config)
    chains = _read_all_chains(args.draws)
    if len(chains) < 2:
        raise SchemaError("diagnose needs at least two chains")
    per_chain = [pick_draw_columns(d) for d in chains]
    common = sorted(set.intersection(*(set(c) for c in per_chain)))
    rows = []
    for name in common:
        series = [c[name] for c in per_chain]
        try:
            stat = gelman_rubin(series)
        except SdsemError:
            stat = float("nan")
        rows.append({"param": name, "rstat": stat})
    frame = pd.DataFrame(rows)
    chainio.write_frame(frame, args.out)
    finite = frame["rstat"].dropna()
    print(f"wrote {len(frame)} R statistics to {args.out}; "
          f"max finite R = {finite.max():.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdsem",
        description="Bayesian spatial dynamic factor models on lattice panels")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **flags):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        for flag, kwargs in flags.items():
            p.add_argument(flag, **kwargs)
        p.set_defaults(fn=fn)
        return p

    add("simulate", cmd_simulate, **{"--out": {"required": True}})
    add("fit", cmd_fit, **{
        "--data": {"required": True}, "--adjacency": {"required": True},
        "--out": {"required": True},
        "--y-var": {"default": "y0", "dest": "y_var"},
        "--x-vars": {"default": "x0", "dest": "x_vars"}})
    add("ranks", cmd_ranks, **{"--draws": {"required": True},
                               "--out": {"required": True}})
    add("forecast", cmd_forecast, **{
        "--draws": {"required": True}, "--out": {"required": True},
        "--conditional": {"action": "store_true"},
        "--future-x": {"dest": "future_x"},
        "--truth": {}})
    add("irf", cmd_irf, **{"--draws": {"required": True},
                           "--out": {"required": True}})
    add("select", cmd_select, **{
        "--data": {"required": True}, "--adjacency": {"required": True},
        "--out": {"required": True},
        "--y-var": {"default": "y0", "dest": "y_var"},
        "--x-vars": {"default": "x0", "dest": "x_vars"},
        "--points": {}, "--m-values": {"dest": "m_values", "default": "2"},
        "--l-values": {"dest": "l_values", "default": "2"}})
    add("diagnose", cmd_diagnose, **{"--draws": {"required": True},
                                     "--out": {"required": True}})
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SdsemError as exc:
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
