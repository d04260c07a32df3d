"""Panel ingestion, preprocessing transforms and dataset containers.

Panel files are long CSVs with header ``site,period,variable,value`` and an
optional ``region`` column; periods are quarters written ``YYYYQn``.  Sites
are ordered lexicographically, periods chronologically, and the time index
must be gap free.  Adjacency comes either as an undirected edge list
``site_a,site_b`` or as a full 0/1 matrix with a leading site column.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import (
    AlignmentMismatch,
    DimensionMismatch,
    GapInTimeIndex,
    NonPositiveValue,
    SchemaError,
    UnknownSiteInAdjacency,
)
from .lattice import AdjacencyMatrix

_PERIOD_RE = re.compile(r"^(\d{4})Q([1-4])$")


def parse_period(label: str) -> tuple:
    m = _PERIOD_RE.match(str(label))
    if not m:
        raise SchemaError(f"period {label!r} is not of the form YYYYQn")
    return int(m.group(1)), int(m.group(2))


def make_periods(start: str, count: int) -> list:
    """Consecutive quarter labels beginning at ``start``."""
    year, quarter = parse_period(start)
    out = []
    for _ in range(count):
        out.append(f"{year}Q{quarter}")
        quarter += 1
        if quarter == 5:
            year, quarter = year + 1, 1
    return out


def _is_contiguous(periods) -> bool:
    parsed = [parse_period(p) for p in periods]
    for (y0, q0), (y1, q1) in zip(parsed, parsed[1:]):
        if (y0 * 4 + q0) + 1 != y1 * 4 + q1:
            return False
    return True


@dataclass
class TransformRecord:
    """Invertible record of the preprocessing applied to one variable."""

    kind: str                      # "log" or "log_deflate"
    deflator: np.ndarray = None    # aligned with the transformed series

    def invert(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        out = np.exp(values)
        if self.kind == "log_deflate":
            out = out * self.deflator
        return out


def deflate_and_log(series, deflator=None):
    """log(series / deflator) with a record that inverts it exactly."""
    series = np.asarray(series, dtype=float)
    if deflator is None:
        if np.any(series <= 0):
            raise NonPositiveValue("series must be strictly positive for a log transform")
        return np.log(series), TransformRecord(kind="log")
    deflator = np.asarray(deflator, dtype=float)
    if series.shape != deflator.shape:
        raise AlignmentMismatch("series and deflator have different lengths")
    if np.any(series <= 0) or np.any(deflator <= 0):
        raise NonPositiveValue("series and deflator must be strictly positive")
    return np.log(series / deflator), TransformRecord(kind="log_deflate", deflator=deflator.copy())


def geometric_interpolate(annual, subperiods: int = 4) -> np.ndarray:
    """Expand an annual series to subperiods with constant within-year growth.

    The first subperiod of each year equals the annual value; the final year
    reuses the previous year's growth factor.
    """
    annual = np.asarray(annual, dtype=float)
    if np.any(annual <= 0):
        raise NonPositiveValue("geometric interpolation requires positive values")
    n = annual.shape[0]
    factors = np.ones(n)
    if n > 1:
        factors[:-1] = (annual[1:] / annual[:-1]) ** (1.0 / subperiods)
        factors[-1] = factors[-2]
    steps = np.arange(subperiods)
    return (annual[:, None] * factors[:, None] ** steps).reshape(-1)


@dataclass
class PanelSchema:
    """Names the response and predictor variables inside a long panel CSV."""

    y_var: str
    x_vars: list
    region_col: str = "region"
    log_vars: list = field(default_factory=list)
    deflator_var: str = None


@dataclass
class PanelDataset:
    """Lattice panel: stacked site-major rows by chronological columns.

    ``y`` is (n_sites * n_vars_y, T) and ``x`` is (n_sites * n_vars_x, T);
    within a site the variables keep the schema order.
    """

    sites: list
    periods: list
    y: np.ndarray
    x: np.ndarray
    adjacency: AdjacencyMatrix
    n_vars_y: int = 1
    n_vars_x: int = 1
    y_names: list = None
    x_names: list = None
    regions: list = None
    transforms: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        n = len(self.sites)
        if self.y.shape != (n * self.n_vars_y, len(self.periods)):
            raise DimensionMismatch("y panel shape disagrees with sites/periods")
        if self.x.shape != (n * self.n_vars_x, len(self.periods)):
            raise DimensionMismatch("x panel shape disagrees with sites/periods")
        if self.adjacency.n_sites != n:
            raise DimensionMismatch("adjacency size disagrees with site list")
        if self.y_names is None:
            self.y_names = [f"y{i}" for i in range(self.n_vars_y)]
        if self.x_names is None:
            self.x_names = [f"x{i}" for i in range(self.n_vars_x)]

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    @property
    def n_periods(self) -> int:
        return len(self.periods)

    def z_matrix(self) -> np.ndarray:
        """(T, n) observation matrix: y rows first, then x rows."""
        return np.vstack([self.y, self.x]).T.copy()

    def split_holdout(self, holdout: int):
        """(training dataset, held-out dataset) split at the end of the sample."""
        if not 0 < holdout < self.n_periods:
            raise DimensionMismatch("holdout must lie strictly inside the sample")
        head = PanelDataset(
            sites=self.sites, periods=self.periods[:-holdout],
            y=self.y[:, :-holdout], x=self.x[:, :-holdout],
            adjacency=self.adjacency, n_vars_y=self.n_vars_y, n_vars_x=self.n_vars_x,
            y_names=self.y_names, x_names=self.x_names, regions=self.regions,
            transforms=self.transforms)
        tail = PanelDataset(
            sites=self.sites, periods=self.periods[-holdout:],
            y=self.y[:, -holdout:], x=self.x[:, -holdout:],
            adjacency=self.adjacency, n_vars_y=self.n_vars_y, n_vars_x=self.n_vars_x,
            y_names=self.y_names, x_names=self.x_names, regions=self.regions,
            transforms=self.transforms)
        return head, tail

    def to_long_frame(self) -> pd.DataFrame:
        rows = []
        for vi, name in enumerate(self.y_names):
            for si, site in enumerate(self.sites):
                for ti, period in enumerate(self.periods):
                    rows.append((site, period, name, self.y[si * self.n_vars_y + vi, ti]))
        for vi, name in enumerate(self.x_names):
            for si, site in enumerate(self.sites):
                for ti, period in enumerate(self.periods):
                    rows.append((site, period, name, self.x[si * self.n_vars_x + vi, ti]))
        frame = pd.DataFrame(rows, columns=["site", "period", "variable", "value"])
        if self.regions is not None:
            frame["region"] = frame["site"].map(dict(zip(self.sites, self.regions)))
        return frame


def load_adjacency(path, sites) -> AdjacencyMatrix:
    """Read an edge list or a full matrix CSV and validate it against ``sites``."""
    frame = pd.read_csv(path, dtype=str)
    cols = [c.strip() for c in frame.columns]
    site_index = {s: i for i, s in enumerate(sites)}
    if cols[:2] == ["site_a", "site_b"]:
        edges = set()
        for _, row in frame.iterrows():
            a, b = row["site_a"].strip(), row["site_b"].strip()
            for s in (a, b):
                if s not in site_index:
                    raise UnknownSiteInAdjacency(f"adjacency references unknown site {s!r}")
            if a == b:
                raise SchemaError(f"self edge at site {a!r}")
            edges.add((site_index[a], site_index[b]))
        return AdjacencyMatrix.from_edges(sorted(edges), len(sites))
    # full-matrix layout: first column holds site ids, remaining columns sites
    head = cols[0]
    listed = [s.strip() for s in cols[1:]]
    for s in frame[head].astype(str).str.strip().tolist() + listed:
        if s not in site_index:
            raise UnknownSiteInAdjacency(f"adjacency references unknown site {s!r}")
    w = np.zeros((len(sites), len(sites)), dtype=int)
    for _, row in frame.iterrows():
        i = site_index[str(row[head]).strip()]
        for s, val in zip(listed, row[1:].tolist()):
            w[i, site_index[s]] = int(val)
    return AdjacencyMatrix(w)


def load_panel(data_path, adjacency_path, schema: PanelSchema) -> PanelDataset:
    """Read and validate a long panel CSV plus its adjacency file."""
    frame = pd.read_csv(data_path)
    required = {"site", "period", "variable", "value"}
    if not required.issubset(frame.columns):
        raise SchemaError(f"panel file must have columns {sorted(required)}")
    frame["site"] = frame["site"].astype(str)
    frame["variable"] = frame["variable"].astype(str)

    wanted = [schema.y_var] + list(schema.x_vars)
    missing = [v for v in wanted if v not in set(frame["variable"])]
    if missing:
        raise SchemaError(f"panel file lacks variables {missing}")
    deflator = None
    if schema.deflator_var is not None:
        if schema.deflator_var not in set(frame["variable"]):
            raise SchemaError(f"panel file lacks deflator {schema.deflator_var!r}")
        deflator = frame[frame["variable"] == schema.deflator_var]

    sites = sorted(frame["site"].unique())
    periods = sorted(frame["period"].unique(), key=parse_period)
    if not _is_contiguous(periods):
        raise GapInTimeIndex("panel periods are not consecutive quarters")

    regions = None
    if schema.region_col in frame.columns:
        region_map = frame.drop_duplicates("site").set_index("site")[schema.region_col]
        regions = [str(region_map.get(s, "")) for s in sites]

    def pivot(var):
        sub = frame[frame["variable"] == var]
        table = sub.pivot_table(index="site", columns="period", values="value",
                                aggfunc="first")
        for site in sites:
            if site not in table.index:
                raise GapInTimeIndex(f"site {site!r} has no rows for variable {var!r}")
        table = table.reindex(index=sites, columns=periods)
        if table.isna().any().any():
            site = table.index[table.isna().any(axis=1)][0]
            period = table.columns[table.isna().any(axis=0)][0]
            raise GapInTimeIndex(f"missing value for site {site!r} at {period}")
        return table.to_numpy(dtype=float)

    transforms = {}

    def maybe_log(var, values):
        if var not in schema.log_vars:
            return values
        defl = None
        if deflator is not None:
            dt = deflator.pivot_table(index="site", columns="period", values="value",
                                      aggfunc="first").reindex(index=sites, columns=periods)
            defl = dt.to_numpy(dtype=float)
        flat, record = deflate_and_log(values.reshape(-1),
                                       None if defl is None else defl.reshape(-1))
        transforms[var] = record
        return flat.reshape(values.shape)

    y_tables = [maybe_log(schema.y_var, pivot(schema.y_var))]
    x_tables = [maybe_log(v, pivot(v)) for v in schema.x_vars]

    n_y, n_x = 1, len(schema.x_vars)
    n_sites, n_periods = len(sites), len(periods)
    y = np.empty((n_sites * n_y, n_periods))
    for vi, table in enumerate(y_tables):
        y[vi::n_y] = table
    x = np.empty((n_sites * n_x, n_periods))
    for vi, table in enumerate(x_tables):
        x[vi::n_x] = table

    adjacency = load_adjacency(adjacency_path, sites)
    return PanelDataset(
        sites=sites, periods=periods, y=y, x=x, adjacency=adjacency,
        n_vars_y=n_y, n_vars_x=n_x,
        y_names=[schema.y_var], x_names=list(schema.x_vars),
        regions=regions, transforms=transforms)
