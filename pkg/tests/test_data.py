import numpy as np
import pandas as pd
import pytest

from sdsem.data import (
    PanelDataset,
    PanelSchema,
    deflate_and_log,
    geometric_interpolate,
    load_adjacency,
    load_panel,
    make_periods,
    parse_period,
)
from sdsem.errors import (
    AlignmentMismatch,
    GapInTimeIndex,
    NonPositiveValue,
    SchemaError,
    UnknownSiteInAdjacency,
)
from sdsem.lattice import AdjacencyMatrix


def write_panel(tmp_path, sites=("aa", "bb"), periods=("2001Q1", "2001Q2", "2001Q3"),
                variables=("price", "inc"), drop=None, region=None):
    rows = []
    for v in variables:
        for s in sites:
            for p in periods:
                if drop and (s, p, v) == drop:
                    continue
                entry = {"site": s, "period": p, "variable": v,
                         "value": hash((s, p, v)) % 97 / 10 + 1.0}
                if region:
                    entry["region"] = region[s]
                rows.append(entry)
    path = tmp_path / "panel.csv"
    pd.DataFrame(rows).to_csv(path, index=False)
    return path


def write_edges(tmp_path, edges):
    path = tmp_path / "adj.csv"
    pd.DataFrame(edges, columns=["site_a", "site_b"]).to_csv(path, index=False)
    return path


class TestPeriods:
    def test_parse_and_make(self):
        assert parse_period("1984Q1") == (1984, 1)
        assert make_periods("1999Q3", 4) == ["1999Q3", "1999Q4", "2000Q1", "2000Q2"]

    def test_bad_label(self):
        with pytest.raises(SchemaError):
            parse_period("1984-01")


class TestLoadPanel:
    def test_happy_path_two_x_vars(self, tmp_path):
        panel = write_panel(tmp_path, variables=("price", "inc", "ur"))
        adj = write_edges(tmp_path, [("aa", "bb")])
        data = load_panel(panel, adj, PanelSchema(y_var="price",
                                                  x_vars=["inc", "ur"]))
        assert data.y.shape == (2, 3)
        assert data.x.shape == (4, 3)  # 2 sites x 2 variables
        assert data.sites == ["aa", "bb"]
        # site-major ordering with variables inside the site block
        assert data.x_names == ["inc", "ur"]

    def test_missing_quarter_raises(self, tmp_path):
        panel = write_panel(tmp_path, drop=("bb", "2001Q2", "price"))
        adj = write_edges(tmp_path, [("aa", "bb")])
        with pytest.raises(GapInTimeIndex) as err:
            load_panel(panel, adj, PanelSchema(y_var="price", x_vars=["inc"]))
        assert "bb" in str(err.value)

    def test_unknown_site_in_adjacency(self, tmp_path):
        panel = write_panel(tmp_path)
        adj = write_edges(tmp_path, [("aa", "zz")])
        with pytest.raises(UnknownSiteInAdjacency):
            load_panel(panel, adj, PanelSchema(y_var="price", x_vars=["inc"]))

    def test_missing_variable(self, tmp_path):
        panel = write_panel(tmp_path)
        adj = write_edges(tmp_path, [("aa", "bb")])
        with pytest.raises(SchemaError):
            load_panel(panel, adj, PanelSchema(y_var="nope", x_vars=["inc"]))

    def test_region_labels(self, tmp_path):
        panel = write_panel(tmp_path, region={"aa": "west", "bb": "east"})
        adj = write_edges(tmp_path, [("aa", "bb")])
        data = load_panel(panel, adj, PanelSchema(y_var="price", x_vars=["inc"]))
        assert data.regions == ["west", "east"]

    def test_log_transform_recorded_and_invertible(self, tmp_path):
        panel = write_panel(tmp_path)
        adj = write_edges(tmp_path, [("aa", "bb")])
        schema = PanelSchema(y_var="price", x_vars=["inc"], log_vars=["price"])
        data = load_panel(panel, adj, schema)
        rec = data.transforms["price"]
        raw = rec.invert(data.y.reshape(-1))
        frame = pd.read_csv(panel)
        orig = frame[frame.variable == "price"].pivot_table(
            index="site", columns="period", values="value").to_numpy()
        np.testing.assert_allclose(raw.reshape(2, 3), orig, atol=1e-10)

    def test_round_trip_through_long_frame(self, tmp_path):
        panel = write_panel(tmp_path, variables=("price", "inc"))
        adj = write_edges(tmp_path, [("aa", "bb")])
        data = load_panel(panel, adj, PanelSchema(y_var="price", x_vars=["inc"]))
        out = tmp_path / "rt.csv"
        data.to_long_frame().to_csv(out, index=False)
        again = load_panel(out, adj, PanelSchema(y_var="price", x_vars=["inc"]))
        np.testing.assert_array_equal(again.y, data.y)
        np.testing.assert_array_equal(again.x, data.x)


class TestAdjacencyLoading:
    def test_full_matrix_layout(self, tmp_path):
        path = tmp_path / "full.csv"
        pd.DataFrame({"site": ["aa", "bb"], "aa": [0, 1], "bb": [1, 0]}).to_csv(
            path, index=False)
        w = load_adjacency(path, ["aa", "bb"])
        assert isinstance(w, AdjacencyMatrix)
        assert w.entries[0, 1] == 1

    def test_edge_duplicates_collapse(self, tmp_path):
        path = write_edges(tmp_path, [("aa", "bb"), ("bb", "aa")])
        w = load_adjacency(path, ["aa", "bb"])
        assert w.entries.sum() == 2


class TestGeometricInterpolation:
    def test_constant_series(self):
        np.testing.assert_allclose(geometric_interpolate([5.0, 5.0]), np.full(8, 5.0))

    def test_known_growth_factor(self):
        out = geometric_interpolate([100.0, 116.985856])
        np.testing.assert_allclose(out[:4], [100.0, 104.0, 108.16, 112.4864],
                                   rtol=1e-12)
        assert out[4] == pytest.approx(116.985856)

    def test_terminal_year_reuses_last_factor(self):
        out = geometric_interpolate([100.0, 116.985856])
        np.testing.assert_allclose(out[4:], 116.985856 * 1.04 ** np.arange(4),
                                   rtol=1e-12)

    def test_single_year_is_flat(self):
        np.testing.assert_allclose(geometric_interpolate([3.0]), np.full(4, 3.0))

    def test_nonpositive_rejected(self):
        with pytest.raises(NonPositiveValue):
            geometric_interpolate([1.0, 0.0])


class TestDeflateAndLog:
    def test_unit_deflator_of_e(self):
        out, rec = deflate_and_log(np.full(3, np.e), np.ones(3))
        np.testing.assert_allclose(out, 1.0)

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        series = np.exp(rng.standard_normal(10))
        deflator = np.exp(rng.standard_normal(10))
        out, rec = deflate_and_log(series, deflator)
        np.testing.assert_allclose(rec.invert(out), series, atol=1e-12)

    def test_arithmetic(self):
        out, _ = deflate_and_log(np.array([200.0]), np.array([2.0]))
        assert out[0] == pytest.approx(np.log(100.0))

    def test_misaligned(self):
        with pytest.raises(AlignmentMismatch):
            deflate_and_log(np.ones(3), np.ones(4))

    def test_nonpositive(self):
        with pytest.raises(NonPositiveValue):
            deflate_and_log(np.array([1.0, -2.0]), np.ones(2))


class TestHoldoutSplit:
    def test_split_shapes(self):
        data = PanelDataset(
            sites=["a", "b"], periods=make_periods("2000Q1", 10),
            y=np.arange(20.0).reshape(2, 10), x=np.arange(20.0).reshape(2, 10),
            adjacency=AdjacencyMatrix.from_edges([(0, 1)], 2))
        head, tail = data.split_holdout(3)
        assert head.n_periods == 7
        assert tail.n_periods == 3
        assert tail.periods[0] == "2001Q4"
        np.testing.assert_array_equal(tail.y, data.y[:, -3:])
