import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nvlocate.coherence import (
    MAX_DENSE_DIM,
    CoherenceCurve,
    NoiseSpectrum,
    Scenario,
    coherence_curve,
    coherence_magnus,
    coherence_quantum_exact,
    coherence_semiclassical,
    coherence_values,
    dense_decay,
    dip_depth,
    dip_time,
    magnus_decay,
    semiclassical_decay,
    spectrum_from_model,
    su2_decay,
    target_noise_spectrum,
)
from nvlocate.nv import DephasingModel, FieldConfig, SensorConfig, TargetSpin, build_dephasing_model, effective_bystander_spin
from nvlocate.sequences import cpmg_times
from nvlocate.spin import GAMMA_E, TWO_PI, dipolar_components, spin_operators, to_angular

from .oracles import bifurcated_coherence

Z = (0.0, 0.0, 1.0)
FIELD = FieldConfig(0.1)
OMEGA_E = abs(GAMMA_E) * 0.1


def z_sensor(eps_mhz=3.0, sid="A", position=(0.0, 0.0, 0.0)):
    return SensorConfig(sid, position=position, axis=Z, strain=to_angular(eps_mhz))


def polar_target(r, theta_deg, phi_deg=0.0):
    th, ph = np.radians(theta_deg), np.radians(phi_deg)
    return TargetSpin((r * np.sin(th) * np.cos(ph), r * np.sin(th) * np.sin(ph), r * np.cos(th)))


def scenario(r, theta_deg, eps_mhz=3.0, phi_deg=0.0):
    return Scenario(z_sensor(eps_mhz), FIELD, polar_target(r, theta_deg, phi_deg))


def random_model(rng, n_spins=2):
    """Random pure-dephasing model on ``n_spins`` spin-1/2 with random fields."""
    sx, sy, sz = spin_operators(0.5)
    d = 2**n_spins
    h0 = np.zeros((d, d), complex)
    beta = np.zeros((d, d), complex)
    for k in range(n_spins):
        ops = [np.eye(2)] * n_spins
        for coef, target in ((rng.normal(size=3), "h0"), (0.3 * rng.normal(size=3), "beta")):
            op = coef[0] * sx + coef[1] * sy + coef[2] * sz
            ops_k = list(ops)
            ops_k[k] = op
            m = ops_k[0]
            for o in ops_k[1:]:
                m = np.kron(m, o)
            if target == "h0":
                h0 += m
            else:
                beta += m
    return h0, beta


# ---------------------------------------------------------------- spectra and closed forms


def test_spectrum_empty_without_transverse_coupling():
    assert len(target_noise_spectrum(1.0, 0.0, 0.1, OMEGA_E).frequencies) == 0


def test_spectrum_lines_at_larmor_when_az_zero():
    spec = target_noise_spectrum(0.0, 0.01, 0.1, OMEGA_E)
    np.testing.assert_allclose(sorted(spec.frequencies), [-OMEGA_E, OMEGA_E])
    np.testing.assert_allclose(spec.weights, np.pi / 4 * (0.1 * 0.01) ** 2)


def test_spectrum_shifted_frequency_fig3a():
    lam = 0.28 / np.sqrt(9 + 0.28**2)
    a_z, a_perp = dipolar_components(7.46, np.radians(19.56), GAMMA_E, GAMMA_E)
    spec = target_noise_spectrum(a_z, a_perp, lam, OMEGA_E)
    w = OMEGA_E + lam * a_z / 2  # arithmetic oracle
    assert spec.frequencies.max() == pytest.approx(w, rel=1e-14)
    assert dip_time(30, 1, OMEGA_E, lam, a_z) == pytest.approx(30 * np.pi / w, rel=1e-14)


def test_spectrum_validation():
    with pytest.raises(ValueError):
        NoiseSpectrum(np.array([1.0]), np.array([1.0]))  # not symmetric
    with pytest.raises(ValueError):
        NoiseSpectrum(np.array([1.0, -1.0]), np.array([-1.0, -1.0]))
    with pytest.warns(UserWarning):
        target_noise_spectrum(0.0, 10.0, 1.0, OMEGA_E)


def test_semiclassical_basics():
    seq = cpmg_times(30, 50.0)
    assert coherence_semiclassical(NoiseSpectrum.empty(), seq) == 1.0
    with pytest.raises(ValueError):
        coherence_semiclassical(NoiseSpectrum(np.array([0.0]), np.array([1.0])), seq)


@pytest.mark.parametrize("n", [1, 5, 30])
def test_semiclassical_at_dip(n):
    lam, a_perp, a_z = 0.1, 0.02, 0.01
    spec = target_noise_spectrum(a_z, a_perp, lam, OMEGA_E)
    w = OMEGA_E + lam * a_z / 2
    t = np.pi * n / w
    expected = np.exp(-(n**2) * (lam * a_perp) ** 2 / (2 * w**2))
    assert coherence_semiclassical(spec, cpmg_times(n, t)) == pytest.approx(expected, rel=1e-12)
    assert semiclassical_decay(spec, n, [t])[0] == pytest.approx(expected, rel=1e-12)


def test_semiclassical_off_resonance():
    lam, a_perp = 0.1, 0.3
    spec = target_noise_spectrum(0.0, a_perp, lam, OMEGA_E)
    t = 0.5 * np.pi * 30 / OMEGA_E  # halfway to the first dip
    assert abs(coherence_semiclassical(spec, cpmg_times(30, t)) - 1) < 1e-3


def test_magnus_closed_form():
    lam, a_z, a_perp, n = 0.1, 0.02, 0.05, 30
    w = OMEGA_E + lam * a_z / 2
    t = np.pi * n / w
    assert coherence_magnus(a_z, a_perp, lam, OMEGA_E, cpmg_times(n, t)) == pytest.approx(
        np.cos(lam * a_perp * n / w), rel=1e-12
    )
    # far off resonance the filter is small compared with 2N
    assert coherence_magnus(a_z, a_perp, lam, OMEGA_E, cpmg_times(n, 1e-3)) == pytest.approx(1.0, abs=1e-12)


def test_magnus_reaches_minus_one():
    n, lam = 30, 0.1
    a_perp = np.pi * OMEGA_E / (lam * n)
    t = np.pi * n / OMEGA_E
    assert magnus_decay(0.0, a_perp, lam, OMEGA_E, n, t) == pytest.approx(-1.0, abs=1e-12)


def test_dip_time_examples():
    assert dip_time(30, 1, OMEGA_E, 0.1, 0.0) == pytest.approx(np.pi * 30 / OMEGA_E)
    assert dip_time(30, 2, OMEGA_E, 0.1, 0.02) == pytest.approx(3 * dip_time(30, 1, OMEGA_E, 0.1, 0.02))
    assert dip_time(30, 1, TWO_PI * 0.28, 0.1, 0.0) == pytest.approx(53.57, abs=0.01)
    with pytest.raises(ValueError):
        dip_time(30, 1, OMEGA_E, 1.0, -3 * OMEGA_E)


def test_dip_depth_modes():
    assert dip_depth(30, 0.1, 0.0, 0.1, OMEGA_E, "quantum") == 1.0
    assert dip_depth(30, 0.1, 0.0, 0.1, OMEGA_E, "semiclassical") == 1.0
    with pytest.raises(ValueError):
        dip_depth(30, 0.1, 0.1, 0.1, OMEGA_E, "other")


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-4, 0.2))
def test_depth_modes_agree_to_fourth_order(x):
    # cos(x) - exp(-x^2/2) = -x^4/12 + O(x^6)
    n, lam = 1, 1.0
    a_perp = x * OMEGA_E
    q = dip_depth(n, 0.0, a_perp, lam, OMEGA_E, "quantum")
    s = dip_depth(n, 0.0, a_perp, lam, OMEGA_E, "semiclassical")
    assert abs(q - s) <= x**4 / 12 * 1.01 + 1e-15


# ---------------------------------------------------------------- exact engine


def test_exact_no_noise_is_one():
    m = build_dephasing_model(z_sensor(), FIELD)
    assert coherence_quantum_exact(m, cpmg_times(30, 40.0)) == 1.0
    s = Scenario(z_sensor(), FIELD)
    np.testing.assert_array_equal(coherence_values(s, 30, np.linspace(0, 80, 11)), 1.0)


@pytest.mark.parametrize("n", [1, 2, 5, 8])
def test_exact_engines_match_expm_oracle(n):
    rng = np.random.default_rng(n)
    for n_spins in (1, 2):
        h0, beta = random_model(rng, n_spins)
        for t in rng.uniform(0.1, 20, 3):
            ref = bifurcated_coherence(h0 + beta + 5.0 * np.eye(len(h0)), h0, n, t)
            m = DephasingModel(h0 + beta + 5.0 * np.eye(len(h0)), h0, beta, h0 + beta / 2, 5.0, 1.0)
            assert coherence_quantum_exact(m, cpmg_times(n, t)) == pytest.approx(ref, abs=1e-10)
            assert dense_decay(m, n, [t])[0] == pytest.approx(ref, abs=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 64))
def test_su2_engine_matches_dense(seed, n):
    rng = np.random.default_rng(seed)
    v0 = rng.normal(size=3)
    vp = v0 + 0.5 * rng.normal(size=3)
    sx, sy, sz = spin_operators(0.5)
    h = lambda v: v[0] * sx + v[1] * sy + v[2] * sz  # noqa: E731
    t = rng.uniform(0.1, 30)
    ref = bifurcated_coherence(h(vp), h(v0), n, t)
    assert su2_decay(vp, v0, n, [t])[0] == pytest.approx(ref, abs=1e-10)


def test_exact_vs_dense_full_scenario():
    a = z_sensor(3.0)
    b = z_sensor(2.0, "B", (6.5, 0.0, 0.0))
    sc = Scenario(a, FIELD, polar_target(7.46, 19.56), (b,))
    times = np.linspace(0, 90, 31)
    np.testing.assert_allclose(coherence_values(sc, 30, times), coherence_values(sc, 30, times, dense=True), atol=1e-10)


def test_dense_size_limit():
    d = MAX_DENSE_DIM * 2
    z = np.zeros((1, 1))
    m = DephasingModel(z, z, z, z, 1.0, 1.0)
    object.__setattr__(m, "h_zero", np.broadcast_to(np.zeros(1), (d, d)))
    with pytest.raises(ValueError, match="exceeds"):
        coherence_quantum_exact(m, cpmg_times(2, 1.0))


@pytest.mark.parametrize("r", [9.0, 15.0, 25.0])
def test_spectrum_from_model_matches_target_spectrum(r):
    sc = scenario(r, 40.0)
    m = sc.model()
    spec = spectrum_from_model(m)
    a_z, a_perp = dipolar_components(r, np.radians(40.0), GAMMA_E, GAMMA_E)
    ref = target_noise_spectrum(a_z, a_perp, m.lam, OMEGA_E)
    # exact and first-order spectra differ at first order in lam |A| / w
    coupling = m.lam * np.hypot(a_z, a_perp) / OMEGA_E
    assert abs(spec.weights.sum() / ref.weights.sum() - 1) < coupling
    assert abs(spec.frequencies.max() / ref.frequencies.max() - 1) < coupling


# ---------------------------------------------------------------- curves and scenarios


@pytest.mark.parametrize("engine", ["exact", "magnus", "semiclassical"])
def test_curve_starts_at_one(engine):
    c = coherence_curve(scenario(6.0, 30.0), 30, np.linspace(0, 80, 41), engine)
    assert c.values[0] == 1.0
    assert np.all(np.abs(c.values) <= 1 + 1e-9)


def test_curve_empty_scenario_flat():
    c = coherence_curve(Scenario(z_sensor(), FIELD), 30, np.linspace(0, 80, 41))
    np.testing.assert_array_equal(c.values, 1.0)


def test_curve_rejects_bad_grid_and_engine():
    with pytest.raises(ValueError):
        coherence_curve(scenario(6.0, 30.0), 30, [0.0, 2.0, 1.0])
    with pytest.raises(ValueError):
        coherence_values(scenario(6.0, 30.0), 30, [1.0], engine="bogus")


def test_curve_xy8_equals_cpmg():
    times = np.linspace(1, 200, 50)
    a = coherence_curve(scenario(8.0, 30.0), 40, times, family="XY8")
    b = coherence_curve(scenario(8.0, 30.0), 320, times)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.metadata["n_pulses"] == 320


@settings(max_examples=30, deadline=None)
@given(st.floats(5, 20), st.floats(1, 89), st.floats(0, 360))
def test_mirror_symmetry(r, theta, phi):
    times = np.linspace(0, 120, 61)
    up = coherence_values(scenario(r, theta, phi_deg=phi), 30, times)
    down = coherence_values(scenario(r, 180 - theta, phi_deg=phi), 30, times)
    assert np.max(np.abs(up - down)) < 1e-12


def test_fig1c_slice_mirror_symmetric():
    thetas = np.linspace(0, 180, 37)
    times = np.linspace(20, 80, 301)
    data = np.array([coherence_values(scenario(5.0, th), 30, times) for th in thetas])
    np.testing.assert_allclose(data, data[::-1], atol=1e-12)
    # on-axis and magic-angle-free slices show dips away from theta = 0, 180
    assert data[0].min() > 0.999 and data[6].min() < 0.5


def test_fig4a_slice_dips_at_13_15nm():
    radii = np.arange(10.0, 20.01, 0.5)
    times = np.linspace(120, 320, 2001)
    mins = {r: coherence_values(scenario(r, 30.0), 100, times).min() for r in radii}
    assert all(mins[r] < 0.9 for r in (13.0, 14.0, 15.0))
    assert mins[20.0] < 0.999


def test_product_of_independent_environments():
    a = z_sensor(3.0)
    b = z_sensor(2.0, "B", (6.5, 0.0, 0.0))
    times = np.linspace(0, 90, 31)
    target = polar_target(7.46, 19.56)
    full = coherence_values(Scenario(a, FIELD, target, (b,)), 30, times)
    only_t = coherence_values(Scenario(a, FIELD, target), 30, times)
    only_b = coherence_values(Scenario(a, FIELD, None, (b,)), 30, times)
    np.testing.assert_allclose(full, only_t * only_b, atol=1e-12)


def test_bystander_dip_position():
    a = z_sensor(3.0)
    b = z_sensor(2.0, "B", (0.0, 0.0, 6.5))  # on axis: largest zz coupling
    bs = effective_bystander_spin(a, b, FIELD)
    lam = 0.28 / np.sqrt(9 + 0.28**2)
    n = 30
    # first-order shifted frequency, as for the target
    t_pred = np.pi * n / (bs.frequency + lam * bs.a_z / 2)
    times = np.linspace(0.9 * t_pred, 1.1 * t_pred, 4001)
    vals = coherence_values(Scenario(a, FIELD, None, (b,)), n, times)
    t_num = times[np.argmin(vals)]
    assert abs(t_num / t_pred - 1) < 5e-3
    assert abs(np.pi * n / bs.frequency / t_pred - 1) < 5e-3
    assert t_pred < 0.2 * dip_time(n, 1, OMEGA_E, lam, 0.0)
    assert vals.min() < 0.99


def test_curve_csv_roundtrip(tmp_path):
    c = coherence_curve(scenario(6.0, 30.0), 30, np.linspace(0, 80, 21))
    c.metadata["config_hash"] = "abc"
    c.to_csv(tmp_path / "c.csv")
    back = CoherenceCurve.from_csv(tmp_path / "c.csv")
    np.testing.assert_array_equal(back.times, c.times)
    np.testing.assert_array_equal(back.values, c.values)
    assert back.metadata["config_hash"] == "abc" and back.engine == "exact"
    c.to_json(tmp_path / "c.json")
    assert (tmp_path / "c.json").read_text().count('"L"') == 1


# ---------------------------------------------------------------- cross-engine checks on the three-sensor layout, sensor A


def _fig3a():
    sc = scenario(7.46, 19.56)
    lam = sc.model().lam
    a_z, a_perp = dipolar_components(7.46, np.radians(19.56), GAMMA_E, GAMMA_E)
    t0 = dip_time(30, 1, OMEGA_E, lam, a_z)
    times = np.linspace(0.9 * t0, 1.1 * t0, 4001)
    return sc, lam, a_z, a_perp, times


def test_fig3a_closed_form_curve_minimum_near_depth_formula():
    sc, lam, a_z, a_perp, times = _fig3a()
    m = coherence_values(sc, 30, times, "magnus").min()
    # the filter peaks marginally above 2N just past the nominal dip time
    assert m == pytest.approx(dip_depth(30, a_z, a_perp, lam, OMEGA_E), rel=0.01)
    assert m <= dip_depth(30, a_z, a_perp, lam, OMEGA_E)


@pytest.mark.xfail(strict=True, reason="coupling is not weak here: the exact dip is ~12% deeper than the closed form")
def test_fig3a_exact_depth_within_2pct_of_closed_form():
    sc, lam, a_z, a_perp, times = _fig3a()
    exact = coherence_values(sc, 30, times, "exact").min()
    assert exact == pytest.approx(dip_depth(30, a_z, a_perp, lam, OMEGA_E), rel=0.02)


def test_fig3a_exact_and_closed_form_dips_coincide_in_time():
    sc, lam, a_z, a_perp, times = _fig3a()
    te = times[np.argmin(coherence_values(sc, 30, times, "exact"))]
    tm = times[np.argmin(coherence_values(sc, 30, times, "magnus"))]
    assert abs(te - tm) / tm < 2e-3
