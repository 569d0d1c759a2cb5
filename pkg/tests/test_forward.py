import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from apportion.dispersion import StabilityClass, classify_stability, dispersion
from apportion.forward import (PPM_PER_G_M3, MissingWind, PuffState, SimConfig, build_design_matrix,
                               downwind_frame, puff_concentration, puff_kernel, simulate_unit_source)
from apportion.site import MINUTE, Layout, SensorSpec, SourceSpec, TimeWindow, WindRecord, as_time

T0 = np.datetime64("2024-06-01T12:00:00")


def _winds(n, speed=3.0, direction=270.0, start=T0 - 20 * MINUTE):
    return [WindRecord(start + k * MINUTE, speed, direction) for k in range(n)]


def half_space_mass(Q, H, sy, sz):
    """Integral of the reflected kernel over R^2 x [0, inf).

    x and y on a trapezoid grid (spectrally accurate for Gaussians), z by
    adaptive quadrature.
    """
    g = np.linspace(-12 * sy, 12 * sy, 601)
    XX, YY = np.meshgrid(g, g, indexing="ij")

    def slab(z):
        K = puff_kernel(Q, XX, YY, z, H, sy, sz)
        return integrate.trapezoid(integrate.trapezoid(K, g, axis=1), g)

    val, _ = integrate.quad(slab, 0.0, H + 14 * sz, points=[H], limit=200, epsrel=1e-10)
    return val


class TestMassConservation:
    @pytest.mark.parametrize("seed", range(5))
    def test_reflected_puff_integrates_to_Q(self, seed):
        rng = np.random.default_rng(seed)
        cls = StabilityClass(int(rng.integers(0, 6)))
        traveled = float(rng.uniform(0.0, 400.0))
        H = float(rng.uniform(0.0, 5.0))
        Q = float(rng.uniform(0.1, 10.0))
        sy, sz = dispersion(cls, traveled)
        assert half_space_mass(Q, H, sy, sz) == pytest.approx(Q, rel=1e-3)

    def test_unreflected_term_over_full_space(self):
        # The reflected kernel is even in z and equals direct(z) + direct(-z),
        # so half its full-space integral is the integral of the direct term.
        sy, sz, H = 3.0, 2.0, 1.5
        K = lambda z: puff_kernel(1.0, 0.0, 0.0, z, H, sy, sz)  # noqa: E731
        assert K(0.7) == pytest.approx(K(-0.7), rel=1e-14)
        val, _ = integrate.quad(lambda z: 0.5 * K(z), -np.inf, np.inf, epsrel=1e-10)
        assert val * 2 * np.pi * sy**2 == pytest.approx(1.0, rel=1e-6)


class TestPuffKernel:
    def test_zero_mass(self):
        assert puff_kernel(0.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0) == 0.0

    @settings(max_examples=50, deadline=None)
    @given(Q=st.floats(0.01, 100), x=st.floats(-50, 50), y=st.floats(-50, 50), z=st.floats(0, 10),
           H=st.floats(0, 10), sy=st.floats(0.5, 50), sz=st.floats(0.5, 50))
    def test_linear_in_Q_and_symmetric_crosswind(self, Q, x, y, z, H, sy, sz):
        k = puff_kernel(Q, x, y, z, H, sy, sz)
        assert puff_kernel(2 * Q, x, y, z, H, sy, sz) == pytest.approx(2 * k, rel=1e-12, abs=0)
        assert puff_kernel(Q, x, -y, z, H, sy, sz) == pytest.approx(k, rel=1e-12, abs=0)
        assert k >= 0

    def test_ground_reflection_doubles(self):
        direct = np.exp(-4.0 / (2 * 9.0))
        k = puff_kernel(1.0, 0.0, 0.0, 0.0, 2.0, 1.0, 3.0)
        assert k == pytest.approx(2 * direct / ((2 * np.pi) ** 1.5 * 3.0), rel=1e-12)

    def test_ppm_conversion(self):
        assert PPM_PER_G_M3 == pytest.approx(1525.3, abs=0.5)

    def test_downwind_frame(self):
        # wind from the west (270) blows towards +x
        xr, yr = downwind_frame(10.0, 0.0, 270.0)
        assert xr == pytest.approx(10.0) and yr == pytest.approx(0.0, abs=1e-12)
        xr, _ = downwind_frame(0.0, 10.0, 180.0)  # from the south, towards +y
        assert xr == pytest.approx(10.0)

    def test_puff_concentration_linear(self):
        sensor = SensorSpec("s", 50.0, 0.0, 2.0)
        p1 = PuffState(1.0, 3.0, 270.0, T0, (0.0, 0.0, 2.0))
        p2 = PuffState(2.0, 3.0, 270.0, T0, (0.0, 0.0, 2.0))
        p0 = PuffState(0.0, 3.0, 270.0, T0, (0.0, 0.0, 2.0))
        c1 = puff_concentration(p1, sensor, 16.0, "D")
        assert puff_concentration(p2, sensor, 16.0, "D") == pytest.approx(2 * c1, rel=1e-14)
        assert puff_concentration(p0, sensor, 16.0, "D") == 0.0
        with pytest.raises(ValueError):
            puff_concentration(p1, sensor, -1.0, "D")


class TestStability:
    def test_examples(self):
        noon = np.datetime64("2024-06-01T12:00:00")
        night = np.datetime64("2024-06-01T02:00:00")
        assert classify_stability(1.0, noon) == StabilityClass.A
        assert classify_stability(6.0, night) == StabilityClass.D
        assert classify_stability(0.3, night, fixed_class="D") == StabilityClass.D
        assert classify_stability(3.0, noon, fixed_class=StabilityClass.F) == StabilityClass.F

    def test_utc_offset_moves_day(self):
        t = np.datetime64("2024-06-01T02:00:00")
        assert classify_stability(1.0, t, utc_offset_hours=10) == StabilityClass.A

    def test_parse(self):
        assert StabilityClass.parse("c") == StabilityClass.C
        assert StabilityClass.parse(5) == StabilityClass.F
        with pytest.raises(ValueError):
            StabilityClass.parse("G")


class TestDispersion:
    @pytest.mark.parametrize("cls", list(StabilityClass))
    def test_floor_at_zero_distance(self, cls):
        assert dispersion(cls, 0.0, 0.7) == (pytest.approx(0.7), pytest.approx(0.7))

    def test_increasing_sigma_y(self):
        sy, _ = dispersion("D", np.array([100.0, 200.0, 400.0]))
        assert np.all(np.diff(sy) > 0)

    def test_unstable_spreads_more(self):
        assert dispersion("A", 500.0)[0] >= dispersion("F", 500.0)[0]

    @pytest.mark.parametrize("cls", list(StabilityClass))
    def test_monotone_and_continuous(self, cls):
        d = np.geomspace(1.0, 50_000.0, 4000)
        sy, sz = dispersion(cls, d)
        assert np.all(np.diff(sy) > 0) and np.all(np.diff(sz) >= 0)
        assert np.max(np.abs(np.diff(np.log(sz)))) < 0.02  # no jumps at band edges

    def test_array_classes(self):
        sy, sz = dispersion(np.array([0, 5]), np.array([100.0, 100.0]))
        assert sy[0] > sy[1]

    def test_invalid(self):
        with pytest.raises(ValueError):
            dispersion("D", -1.0)
        with pytest.raises(ValueError):
            dispersion("D", 1.0, sigma_floor=0.0)


class TestSimulator:
    src = SourceSpec("a", 0.0, 0.0, 2.0)
    down = SensorSpec("down", 40.0, 0.0, 2.0)
    up = SensorSpec("up", -40.0, 0.0, 2.0)
    window = TimeWindow(T0, T0 + 30 * MINUTE)

    def test_zero_length_window(self):
        out = simulate_unit_source(self.src, [self.down], _winds(40), TimeWindow(T0, T0))
        assert out.shape == (1, 0)

    def test_downwind_exceeds_upwind(self):
        out = simulate_unit_source(self.src, [self.down, self.up], _winds(60), self.window)
        assert np.all(out[0] > out[1])
        assert out[0].min() > 0

    def test_calm_wind_is_finite(self):
        out = simulate_unit_source(self.src, [self.down, SensorSpec("at", 0.5, 0.0, 2.0)],
                                   _winds(60, speed=0.0), self.window)
        assert np.all(np.isfinite(out)) and np.all(out >= 0)
        assert out[1].max() > 0

    def test_linear_in_q(self):
        # exact only without the absolute truncation cutoff
        a = simulate_unit_source(self.src, [self.down], _winds(60), self.window, SimConfig(q=1.0, cutoff=0.0))
        b = simulate_unit_source(self.src, [self.down], _winds(60), self.window, SimConfig(q=2.5, cutoff=0.0))
        np.testing.assert_allclose(b, 2.5 * a, rtol=1e-12)

    def test_steady_state_against_single_puff_sum(self):
        # brute force: sum every live puff explicitly at the sample times of one minute
        cfg = SimConfig(dt=10.0, max_age=300.0, cutoff=0.0, fixed_class="D")
        winds = _winds(60)
        out = simulate_unit_source(self.src, [self.down], winds, self.window, cfg)
        minute0 = as_time(self.window.start)
        total = 0.0
        for step in range(6):
            t = minute0 + np.timedelta64(int(step * 10), "s")
            for age in np.arange(0.0, 300.0 + 1e-9, 10.0):
                puff = PuffState(cfg.q * cfg.dt, 3.0, 270.0, t, (0.0, 0.0, 2.0))
                total += puff_concentration(puff, self.down, age, "D")
        assert out[0, 0] == pytest.approx(total / 6, rel=1e-9)

    def test_missing_wind(self):
        winds = _winds(60)
        gap = winds[:25] + winds[36:]  # 11-minute hole inside the window
        with pytest.raises(MissingWind):
            simulate_unit_source(self.src, [self.down], gap, self.window)

    def test_short_gap_forward_filled(self):
        winds = _winds(60)
        a = simulate_unit_source(self.src, [self.down], winds, self.window)
        b = simulate_unit_source(self.src, [self.down], winds[:30] + winds[32:], self.window)
        np.testing.assert_allclose(a, b)  # constant wind, so the fill is exact

    def test_cutoff_only_removes_small_values(self):
        a = simulate_unit_source(self.src, [self.down, self.up], _winds(60), self.window, SimConfig(cutoff=0.0))
        b = simulate_unit_source(self.src, [self.down, self.up], _winds(60), self.window, SimConfig(cutoff=1e-6))
        assert np.max(np.abs(a - b)) < 1e-4


class TestDesignMatrix:
    def _site(self):
        rng = np.random.default_rng(0)
        sources = [SourceSpec(f"s{i}", *rng.uniform(-10, 10, 2), 2.0) for i in range(5)]
        ang = np.linspace(0, 2 * np.pi, 10, endpoint=False)
        sensors = [SensorSpec(f"c{k}", 40 * np.cos(a), 40 * np.sin(a), 2.0) for k, a in enumerate(ang)]
        winds = [WindRecord(T0 - 20 * MINUTE + k * MINUTE, 3.0, float((200 + 2 * k) % 360)) for k in range(60)]
        return sources, sensors, winds

    def test_shape_and_layout(self):
        sources, sensors, winds = self._site()
        w = TimeWindow(T0, T0 + 30 * MINUTE)
        X = build_design_matrix(sources, sensors, winds, w)
        assert X.shape == (300, 5)
        assert X.layout == Layout(tuple(s.id for s in sensors), w.minutes)
        assert X.source_ids == tuple(s.id for s in sources)

    def test_single_source_equals_unit_series(self):
        sources, sensors, winds = self._site()
        w = TimeWindow(T0, T0 + 30 * MINUTE)
        X = build_design_matrix(sources[:1], sensors, winds, w)
        unit = simulate_unit_source(sources[0], sensors, winds, w)
        np.testing.assert_array_equal(X.values[:, 0], unit.reshape(-1))

    def test_permuting_sources_permutes_columns(self):
        sources, sensors, winds = self._site()
        w = TimeWindow(T0, T0 + 30 * MINUTE)
        X = build_design_matrix(sources, sensors, winds, w)
        perm = [3, 1, 4, 0, 2]
        Xp = build_design_matrix([sources[i] for i in perm], sensors, winds, w)
        np.testing.assert_allclose(Xp.values, X.values[:, perm], rtol=1e-12, atol=0)

    def test_duplicate_ids_rejected(self):
        sources, sensors, winds = self._site()
        with pytest.raises(ValueError):
            build_design_matrix([sources[0], sources[0]], sensors, winds, TimeWindow(T0, T0 + 30 * MINUTE))
