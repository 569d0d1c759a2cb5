import datetime as dt

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apportion import io as aio
from apportion.forward import DesignMatrix
from apportion.model import SamplerConfig
from apportion.pipeline import PipelineConfig, PrecomputedInputs, process_window
from apportion.preprocess import ConcentrationSeries
from apportion.site import MINUTE, Layout, SensorSpec, SourceSpec, TimeWindow, WindRecord, as_time

T0 = np.datetime64("2024-06-01T00:00:00")


class TestSiteTypes:
    @pytest.mark.parametrize("value", ["2024-06-01T00:00:00Z", "2024-06-01T00:00:00",
                                       dt.datetime(2024, 6, 1, 2, 0, tzinfo=dt.timezone(dt.timedelta(hours=2))),
                                       np.datetime64("2024-06-01T00:00:00.000", "ms")])
    def test_as_time(self, value):
        assert as_time(value) == T0

    def test_window_properties(self):
        w = TimeWindow(T0, T0 + 30 * MINUTE)
        assert w.n_minutes == 30 and w.hours == 0.5 and len(w.minutes) == 30
        assert w.id == int(T0.astype("datetime64[m]").astype(np.int64))

    @pytest.mark.parametrize("end", [T0 - MINUTE, T0 + np.timedelta64(90, "s")])
    def test_window_invalid(self, end):
        with pytest.raises(ValueError):
            TimeWindow(T0, end)

    @pytest.mark.parametrize("make", [lambda: SourceSpec("a", 0, 0, -1), lambda: SensorSpec("a", 0, 0, -1),
                                      lambda: WindRecord(T0, -1.0, 0.0), lambda: WindRecord(T0, 1.0, 360.0)])
    def test_invalid_specs(self, make):
        with pytest.raises(ValueError):
            make()

    def test_layout_equality(self):
        a = Layout(("x", "y"), T0 + MINUTE * np.arange(3))
        assert a == Layout(("x", "y"), T0 + MINUTE * np.arange(3))
        assert a != Layout(("y", "x"), T0 + MINUTE * np.arange(3))
        assert a != Layout(("x", "y"), T0 + MINUTE * np.arange(1, 4))
        assert a.n == 6 and a.rows()[3] == ("y", T0)


class TestSiteFiles:
    def test_sensors_and_sources_round_trip(self, tmp_path):
        sensors = [SensorSpec("c1", 1.5, -2.25, 2.0, True), SensorSpec("c2", 0.1, 0.2, 3.0)]
        sources = [SourceSpec("s1", 0.3, 0.7, 1.2)]
        aio.write_sensors(tmp_path / "sensors.csv", sensors)
        aio.write_sources(tmp_path / "sources.csv", sources)
        assert aio.read_sensors(tmp_path / "sensors.csv") == sensors
        assert aio.read_sources(tmp_path / "sources.csv") == sources

    def test_wind_and_concentration_round_trip(self, tmp_path):
        streams = {"c1": [WindRecord(T0 + k * MINUTE, 1.0 + k, 10.0 * k) for k in range(3)]}
        aio.write_wind(tmp_path / "wind.csv", streams)
        assert aio.read_wind(tmp_path / "wind.csv") == streams
        series = [ConcentrationSeries("c1", T0 + MINUTE * np.arange(4), [0.1, 0.2, 0.3, 1 / 3])]
        aio.write_concentrations(tmp_path / "conc.csv", series)
        (back,) = aio.read_concentrations(tmp_path / "conc.csv")
        np.testing.assert_array_equal(back.values, series[0].values)
        np.testing.assert_array_equal(back.timestamps, series[0].timestamps)

    def test_missing_file(self, tmp_path):
        with pytest.raises(aio.DataError, match="nope.csv"):
            aio.read_sensors(tmp_path / "nope.csv")

    def test_missing_column(self, tmp_path):
        pd.DataFrame({"id": ["a"], "x": [0.0], "y": [0.0]}).to_csv(tmp_path / "s.csv", index=False)
        with pytest.raises(aio.DataError, match="H"):
            aio.read_sources(tmp_path / "s.csv")

    def test_invalid_values(self, tmp_path):
        pd.DataFrame({"timestamp": ["2024-06-01T00:00:00Z"], "sensor_id": ["a"], "speed_mps": [-1.0],
                      "direction_deg": [0.0]}).to_csv(tmp_path / "w.csv", index=False)
        with pytest.raises(aio.DataError):
            aio.read_wind(tmp_path / "w.csv")

    def test_direction_wrapped(self, tmp_path):
        pd.DataFrame({"timestamp": ["2024-06-01T00:00:00Z"], "sensor_id": ["a"], "speed_mps": [1.0],
                      "direction_deg": [360.0]}).to_csv(tmp_path / "w.csv", index=False)
        assert aio.read_wind(tmp_path / "w.csv")["a"][0].direction == 0.0


class TestDesignFiles:
    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 1000), m=st.integers(1, 4), l=st.integers(1, 6), p=st.integers(1, 4))
    def test_round_trip_exact(self, tmp_path_factory, seed, m, l, p):
        rng = np.random.default_rng(seed)
        layout = Layout(tuple(f"c{k}" for k in range(m)), T0 + MINUTE * np.arange(l))
        X = DesignMatrix(rng.random((m * l, p)) * 10.0 ** rng.integers(-8, 3), tuple(f"s{i}" for i in range(p)),
                         layout, q=float(rng.uniform(0.5, 2.0)))
        y = rng.standard_normal(m * l)
        path = tmp_path_factory.mktemp("dm") / "X.csv"
        aio.write_design_matrix(path, X, y)
        X2, y2 = aio.read_design_matrix(path)
        np.testing.assert_array_equal(X2.values, X.values)
        np.testing.assert_array_equal(y2, y)
        assert X2.layout == X.layout and X2.source_ids == X.source_ids and X2.q == X.q

    def test_without_y(self, tmp_path):
        layout = Layout(("c0",), T0 + MINUTE * np.arange(2))
        aio.write_design_matrix(tmp_path / "X.csv", DesignMatrix(np.ones((2, 1)), ("s0",), layout))
        _, y = aio.read_design_matrix(tmp_path / "X.csv")
        assert y is None


class TestResultsArchive:
    def _results(self):
        w = [TimeWindow(T0 + k * 30 * MINUTE, T0 + (k + 1) * 30 * MINUTE) for k in range(3)]
        rng = np.random.default_rng(0)
        values = rng.gamma(0.5, 1.0, size=(60, 2))
        data = {}
        for k, win in enumerate(w):
            X = DesignMatrix(values, ("a", "b"), Layout(("c0", "c1"), win.minutes))
            y = np.zeros(60) if k == 1 else values @ [1.0, 0.5] + 0.1 * rng.standard_normal(60)
            data[win.id] = (y, X)
        inputs = PrecomputedInputs(("a", "b"), data)
        cfg = PipelineConfig(sampler=SamplerConfig(iterations=200, burn_in=50))
        return [process_window(win, inputs, cfg) for win in w]

    def test_round_trip(self, tmp_path):
        res = self._results()
        aio.write_results_archive(tmp_path, res, meta={"k": 1})
        back = aio.read_results_archive(tmp_path)
        for a, b in zip(res, back):
            assert a.window == b.window and a.status == b.status and a.seed == b.seed
            np.testing.assert_array_equal(a.rate_kghr, b.rate_kghr)
            np.testing.assert_array_equal(a.viable_mask, b.viable_mask)
            assert (a.draws is None) == (b.draws is None)
            if a.draws is not None:
                np.testing.assert_array_equal(a.draws.beta, b.draws.beta)
        assert back[1].zero_shortcut and back[1].draws is None

    def test_csv_columns(self, tmp_path):
        aio.write_results_archive(tmp_path, self._results())
        df = pd.read_csv(tmp_path / "results.csv")
        assert list(df.columns) == aio.RESULT_COLUMNS
        assert len(df) == 6

    def test_missing_archive(self, tmp_path):
        with pytest.raises(aio.DataError):
            aio.read_results_archive(tmp_path)
