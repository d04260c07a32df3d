"""Flat-file persistence of chains, forecasts, rank tables and reports.

Draw files are columnar CSVs with one row per retained draw and stable
``param.block.index`` column names; each chain also writes a flattened
factor-path CSV and a JSON metadata sidecar (seed, config hash, acceptance
rates, shapes).  All writes go through a temp-file rename so readers never
observe partial files.
"""

from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path

import numpy as np
import pandas as pd

from .ecm import EcmBlocks
from .lattice import GmrfSpec, constant_mean_design
from .mcmc import AnchorSet, ChainMeta, PosteriorDraws, pick_draw_columns
from .params import SdSemParams
from .state_space import FactorPath, MeasurementModel


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def write_frame(frame: pd.DataFrame, path) -> None:
    atomic_write_text(path, frame.to_csv(index=False))


def chain_paths(directory, chain_id: int) -> dict:
    base = Path(directory)
    stem = f"chain{chain_id:02d}"
    return {"draws": base / f"{stem}_draws.csv",
            "factors": base / f"{stem}_factors.csv",
            "meta": base / f"{stem}_meta.json"}


def write_draws(draws: PosteriorDraws, directory, config_hash: str = "") -> dict:
    """Persist one chain; returns the paths written."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = chain_paths(directory, draws.meta.chain_id)

    columns = pick_draw_columns(draws)
    write_frame(pd.DataFrame(columns), paths["draws"])

    n_draws = draws.n_draws
    if n_draws:
        n_t, width = draws.factors[0].values.shape
        flat = np.stack([f.values.reshape(-1) for f in draws.factors])
        names = [f"factor.{t}.{j}" for t in range(n_t) for j in range(width)]
        write_frame(pd.DataFrame(flat, columns=names), paths["factors"])
    else:
        n_t, width = 0, 0
        write_frame(pd.DataFrame(), paths["factors"])

    first = draws.params[0] if n_draws else None
    meta = {
        "iterations": draws.meta.iterations,
        "burn_in": draws.meta.burn_in,
        "thinning": draws.meta.thinning,
        "seed": draws.meta.seed,
        "chain_id": draws.meta.chain_id,
        "acceptance": draws.meta.acceptance,
        "config_hash": config_hash or draws.meta.config_hash,
        "anchors_y": list(draws.meta.anchors.y_rows) if draws.meta.anchors else [],
        "anchors_x": list(draws.meta.anchors.x_rows) if draws.meta.anchors else [],
        "n_draws": n_draws,
        "n_periods": n_t,
        "shapes": _shape_record(first) if first is not None else {},
    }
    atomic_write_text(paths["meta"], json.dumps(meta, indent=1, sort_keys=True))
    return paths


def _shape_record(p: SdSemParams) -> dict:
    return {
        "m": p.m, "l": p.l,
        "n_obs_y": p.meas.n_obs_y, "n_obs_x": p.meas.n_obs_x,
        "n_vars_y": p.gmrf_y[0].n_vars, "n_vars_x": p.gmrf_x[0].n_vars,
        "n_sites": p.gmrf_y[0].n_sites,
        "mean_coef_dim_y": int(p.gmrf_y[0].mean_coef.size),
        "mean_coef_dim_x": int(p.gmrf_x[0].mean_coef.size),
        "r_joint": p.ecm.adjust_joint.shape[1],
        "r_exo": p.ecm.adjust_exo.shape[1],
        "order": p.ecm.order,
        "mean_design": "constant",
    }


def read_draws(directory, chain_id: int) -> PosteriorDraws:
    """Reconstruct a chain from its draw, factor and metadata files."""
    paths = chain_paths(directory, chain_id)
    meta_raw = json.loads(Path(paths["meta"]).read_text())
    table = pd.read_csv(paths["draws"], float_precision="round_trip") \
        if meta_raw["n_draws"] else pd.DataFrame()
    factors_tab = pd.read_csv(paths["factors"], float_precision="round_trip") \
        if meta_raw["n_draws"] else pd.DataFrame()

    shapes = meta_raw["shapes"]
    params, factor_paths = [], []
    for r in range(meta_raw["n_draws"]):
        row = table.iloc[r]
        params.append(_params_from_row(row, shapes))
        flat = factors_tab.iloc[r].to_numpy(dtype=float)
        values = flat.reshape(meta_raw["n_periods"], shapes["m"] + shapes["l"])
        factor_paths.append(FactorPath(values=values, m=shapes["m"]))

    meta = ChainMeta(
        iterations=meta_raw["iterations"], burn_in=meta_raw["burn_in"],
        thinning=meta_raw["thinning"], seed=meta_raw["seed"],
        chain_id=meta_raw["chain_id"],
        anchors=AnchorSet(y_rows=meta_raw["anchors_y"], x_rows=meta_raw["anchors_x"]),
        acceptance=meta_raw["acceptance"], config_hash=meta_raw["config_hash"])
    deviances = table["deviance"].to_numpy(dtype=float) \
        if "deviance" in table.columns else None
    return PosteriorDraws(params=params, factors=factor_paths, meta=meta,
                          deviances=deviances)


def _grid(row, name, shape):
    out = np.empty(shape)
    for a in range(shape[0]):
        for b in range(shape[1]):
            out[a, b] = row[f"{name}.{a}.{b}"]
    return out


def _params_from_row(row, shapes) -> SdSemParams:
    m, l = shapes["m"], shapes["l"]
    ny, nx = shapes["n_obs_y"], shapes["n_obs_x"]
    meas = MeasurementModel(
        loadings_y=_grid(row, "loadings_y", (ny, m)),
        loadings_x=_grid(row, "loadings_x", (nx, l)),
        mean_y=np.array([row[f"mean_y.{i}"] for i in range(ny)]),
        mean_x=np.array([row[f"mean_x.{i}"] for i in range(nx)]),
        obs_var_y=np.array([row[f"obs_var_y.{i}"] for i in range(ny)]),
        obs_var_x=np.array([row[f"obs_var_x.{i}"] for i in range(nx)]),
    )

    def specs(prefix, count, n_vars, q):
        design = constant_mean_design(shapes["n_sites"], n_vars)
        out = []
        for j in range(count):
            cov = _grid(row, f"{prefix}.{j}.cov", (n_vars, n_vars))
            coef = _grid(row, f"{prefix}.{j}.coef", (n_vars, n_vars))
            mean_coef = np.array([row[f"{prefix}.{j}.mean.{qi}"] for qi in range(q)])
            out.append(GmrfSpec.from_reparam(cov, coef, design, mean_coef))
        return out

    order = shapes["order"]
    r_joint, r_exo = shapes["r_joint"], shapes["r_exo"]
    ecm = EcmBlocks(
        adjust_joint=_grid(row, "ecm.adjust_joint", (m, r_joint)),
        coint_joint_endo=_grid(row, "ecm.coint_joint_endo", (m, r_joint)),
        coint_joint_exo=_grid(row, "ecm.coint_joint_exo", (l, r_joint)),
        adjust_cross=_grid(row, "ecm.adjust_cross", (m, r_exo)),
        adjust_exo=_grid(row, "ecm.adjust_exo", (l, r_exo)),
        coint_exo=_grid(row, "ecm.coint_exo", (l, r_exo)),
        shortrun_endo=[_grid(row, f"ecm.shortrun_endo.{i}", (m, m + l))
                       for i in range(order - 1)],
        shortrun_exo=[_grid(row, f"ecm.shortrun_exo.{i}", (l, l))
                      for i in range(order - 1)],
    )

    prec_endo = np.zeros((m, m))
    for i in range(m):
        for j in range(i, m):
            prec_endo[i, j] = row[f"state_prec_endo.{i}.{j}"]
    prec_exo = np.zeros((l, l))
    for i in range(l):
        for j in range(i, l):
            prec_exo[i, j] = row[f"state_prec_exo.{i}.{j}"]

    return SdSemParams(
        meas=meas,
        gmrf_y=specs("gmrf_y", m, shapes["n_vars_y"], shapes["mean_coef_dim_y"]),
        gmrf_x=specs("gmrf_x", l, shapes["n_vars_x"], shapes["mean_coef_dim_x"]),
        ecm=ecm, prec_factor_endo=prec_endo, prec_factor_exo=prec_exo)


def list_chain_ids(directory) -> list:
    ids = []
    for path in sorted(Path(directory).glob("chain*_meta.json")):
        ids.append(int(path.name[len("chain"):len("chain") + 2]))
    return ids


# ---------------------------------------------------------------------------
# derived-output tables

def rank_table_frame(table: dict) -> pd.DataFrame:
    names = list(table)
    n_rows = max(len(v) for v in table.values())
    rows = []
    for rank in range(n_rows):
        row = {"rank": rank}
        for name in names:
            probs = table[name]
            row[name] = float(probs[rank]) if rank < len(probs) else 0.0
        rows.append(row)
    return pd.DataFrame(rows, columns=["rank"] + names)


def forecast_frame(result, sites, start_period: str) -> pd.DataFrame:
    from .data import make_periods

    periods = make_periods(start_period, result.horizon)
    rows = []
    n_rows = result.mean.shape[1]
    n_vars = n_rows // len(sites)
    for step in range(result.horizon):
        for r in range(n_rows):
            rows.append({
                "site": sites[r // n_vars],
                "variable_index": r % n_vars,
                "step": step + 1,
                "period": periods[step],
                "median": result.median[step, r],
                "lower": result.lower[step, r],
                "upper": result.upper[step, r],
                "mean": result.mean[step, r],
                "n_draws": result.n_draws,
            })
    return pd.DataFrame(rows)


def irf_frame(series, sites_y, sites_x, n_vars_x: int) -> pd.DataFrame:
    rows = []
    mean = series.mean
    for k in series.horizons:
        for i in range(mean.shape[1]):
            for j in range(mean.shape[2]):
                rows.append({
                    "response_site": sites_y[i],
                    "shock_variable": j % n_vars_x,
                    "shock_site": sites_x[j // n_vars_x],
                    "horizon": int(k),
                    "mean": mean[k, i, j],
                    "p16": series.bands["p16"][k, i, j],
                    "p84": series.bands["p84"][k, i, j],
                    "p05": series.bands["p05"][k, i, j],
                    "p95": series.bands["p95"][k, i, j],
                })
    return pd.DataFrame(rows)


def grid_frame(results) -> pd.DataFrame:
    return pd.DataFrame([r.as_row() for r in results])


def metrics_json(metrics, extra: dict = None) -> str:
    payload = dataclasses.asdict(metrics)
    payload.update(extra or {})
    return json.dumps(payload, indent=1, sort_keys=True)


def write_true_params(params: SdSemParams, path) -> None:
    """Ground-truth parameter dump for synthetic-data workflows."""
    payload = {
        "loadings_y": params.meas.loadings_y.tolist(),
        "loadings_x": params.meas.loadings_x.tolist(),
        "mean_y": params.meas.mean_y.tolist(),
        "mean_x": params.meas.mean_x.tolist(),
        "obs_var_y": params.meas.obs_var_y.tolist(),
        "obs_var_x": params.meas.obs_var_x.tolist(),
        "state_cov_endo": params.state_cov_endo.tolist(),
        "state_cov_exo": params.state_cov_exo.tolist(),
        "ecm": {
            "adjust_joint": params.ecm.adjust_joint.tolist(),
            "coint_joint_endo": params.ecm.coint_joint_endo.tolist(),
            "coint_joint_exo": params.ecm.coint_joint_exo.tolist(),
            "adjust_cross": params.ecm.adjust_cross.tolist(),
            "adjust_exo": params.ecm.adjust_exo.tolist(),
            "coint_exo": params.ecm.coint_exo.tolist(),
            "shortrun_endo": [k.tolist() for k in params.ecm.shortrun_endo],
            "shortrun_exo": [k.tolist() for k in params.ecm.shortrun_exo],
        },
        "gmrf_y": [{"cond_cov": s.cond_cov.tolist(),
                    "coef_reparam": s.spatial_coef_reparam.tolist(),
                    "mean_coef": s.mean_coef.tolist()} for s in params.gmrf_y],
        "gmrf_x": [{"cond_cov": s.cond_cov.tolist(),
                    "coef_reparam": s.spatial_coef_reparam.tolist(),
                    "mean_coef": s.mean_coef.tolist()} for s in params.gmrf_x],
    }
    atomic_write_text(path, json.dumps(payload, indent=1, sort_keys=True))
