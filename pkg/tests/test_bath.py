import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nvlocate.bath import (
    LATTICE_CONSTANT,
    BathRealization,
    PairSet,
    _chunk_product,
    cce2_coherence,
    cce2_decay,
    diamond_sites,
    enumerate_pairs,
    generate_bath,
    hyperfine_vectors,
    pair_cluster_coherence,
    pair_dephasing_model,
)
from nvlocate.nv import FieldConfig, SensorConfig
from nvlocate.spin import GAMMA_C13, TWO_PI, dipolar_prefactor, to_angular

from .oracles import bifurcated_coherence

SENSOR = SensorConfig("A", strain=to_angular(3.0))
FIELD = FieldConfig(0.1)


def two_spin_bath(p1, p2, field=FIELD):
    """A bath holding exactly two 13C spins at the given sensor-frame positions."""
    full = generate_bath(0, 1.0, 0.5, SENSOR, field)
    positions = np.array([p1, p2], dtype=float)
    hf = full.lam * hyperfine_vectors(positions, SENSOR.gamma, GAMMA_C13)
    return BathRealization(0, 1.0, 1.0, LATTICE_CONSTANT, positions, hf, full.lam, full.larmor)


def brute_force_pair(bath, n, t):
    """4x4 secular pair model written out with explicit Kronecker products."""
    sx = np.array([[0, 1], [1, 0]]) / 2
    sy = np.array([[0, -1j], [1j, 0]]) / 2
    sz = np.diag([0.5, -0.5])
    i2 = np.eye(2)
    d = bath.positions[1] - bath.positions[0]
    r = np.linalg.norm(d)
    d_zz = dipolar_prefactor(GAMMA_C13, GAMMA_C13) / r**3 * (1 - 3 * (d[2] / r) ** 2)
    z1, z2 = np.kron(sz, i2), np.kron(i2, sz)
    flipflop = np.kron(sx, sx) + np.kron(sy, sy)
    h0 = bath.larmor * (z1 + z2) + d_zz * (z1 @ z2 - flipflop / 2)
    a = bath.hyperfine[:, 2]
    return bifurcated_coherence(h0 + a[0] * z1 + a[1] * z2, h0, n, t)


def test_diamond_sites_geometry():
    sites = diamond_sites(1.0)
    r = np.sort(np.linalg.norm(sites, axis=1))
    # nearest carbons to the vacancy: three (the fourth neighbour is nitrogen)
    assert np.isclose(r[:3], LATTICE_CONSTANT * np.sqrt(3) / 4).all()
    assert not np.isclose(r[3], r[0])
    assert len(np.unique(np.round(sites, 9), axis=0)) == len(sites)


def test_site_count_matches_density():
    sites = diamond_sites(8.0)
    expected = 8 / LATTICE_CONSTANT**3 * 4 / 3 * np.pi * 8.0**3
    assert len(sites) == pytest.approx(expected, rel=0.01)


def test_spin_counts_poisson_consistent():
    n_sites = len(diamond_sites(8.0))
    mean = 0.011 * n_sites
    counts = [len(generate_bath(s, 0.011, 8.0, SENSOR, FIELD)) for s in range(5)]
    for c in counts:
        assert abs(c - mean) < 5 * np.sqrt(mean)


def test_zero_abundance_flat():
    bath = generate_bath(3, 0.0, 8.0, SENSOR, FIELD)
    assert len(bath) == 0
    np.testing.assert_array_equal(cce2_decay(bath, 30, np.linspace(0, 1000, 11)), 1.0)


def test_generate_bath_validation():
    with pytest.raises(ValueError):
        generate_bath(0, 1.5, 8.0)
    with pytest.raises(ValueError):
        generate_bath(0, 0.01, 0.0)


def test_same_seed_same_bath():
    a = generate_bath(11, 0.011, 5.0, SENSOR, FIELD)
    b = generate_bath(11, 0.011, 5.0, SENSOR, FIELD)
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.hyperfine, b.hyperfine)
    c = generate_bath(12, 0.011, 5.0, SENSOR, FIELD)
    assert len(c) != len(a) or not np.array_equal(c.positions, a.positions)


def test_bath_json_roundtrip(tmp_path):
    a = generate_bath(2, 0.011, 4.0, SENSOR, FIELD)
    a.to_json(tmp_path / "b.json")
    b = BathRealization.from_json(tmp_path / "b.json")
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.hyperfine, b.hyperfine)
    assert (b.seed, b.lam, b.larmor) == (a.seed, a.lam, a.larmor)


def test_pair_trivial_limits():
    times = np.linspace(0, 500, 26)
    np.testing.assert_allclose(pair_cluster_coherence(0.0, 0.3, 30, times), 1.0, atol=1e-14)
    np.testing.assert_allclose(pair_cluster_coherence(0.01, 0.0, 30, times), 1.0, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.floats(-0.6, 0.6), min_size=6, max_size=6),
    st.integers(1, 40),
    st.floats(1, 2000),
)
def test_pair_pseudospin_equals_brute_force(coords, n, t):
    p1 = np.array(coords[:3]) + np.array([0.0, 0.0, 1.0])
    p2 = np.array(coords[3:]) + np.array([0.3, 0.0, 1.5])
    if np.linalg.norm(p2 - p1) < 0.1:
        p2 = p2 + 0.2
    bath = two_spin_bath(p1, p2)
    ref = brute_force_pair(bath, n, t)
    got = cce2_decay(bath, n, [t], pairs=enumerate_pairs(bath, floor=0.0))[0]
    assert got == pytest.approx(ref, abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(
    st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1),
    st.lists(st.floats(-3e-2, 3e-2), min_size=2, max_size=2),
    st.integers(1, 40),
    st.floats(1, 3000),
)
def test_strong_pair_equals_brute_force(x, y, z, hf, n, t):
    # nearest-neighbour spacing and kHz-scale hyperfine values: O(1) pair dynamics
    d = np.array([x, y, z + 2.5])
    p1 = np.zeros(3) + np.array([0.0, 0.0, 1.0])
    p2 = p1 + 0.154 * d / np.linalg.norm(d)
    bath = two_spin_bath(p1, p2)
    bath.hyperfine[:, 2] = hf
    ref = brute_force_pair(bath, n, t)
    got = cce2_decay(bath, n, [t], pairs=enumerate_pairs(bath, floor=0.0))[0]
    assert got == pytest.approx(ref, abs=1e-10)


def test_strong_pair_decay_is_visible():
    p1 = np.array([0.0, 0.0, 1.0])
    bath = two_spin_bath(p1, p1 + [0.0, 0.0, 0.154])
    bath.hyperfine[:, 2] = [0.02, -0.02]
    assert brute_force_pair(bath, 4, 2000.0) < 0.9


def test_pair_model_helper_matches_brute_force():
    bath = two_spin_bath((0.2, 0.1, 0.9), (0.5, -0.1, 1.2))
    m = pair_dephasing_model(bath, 0, 1)
    for t in (10.0, 300.0, 1000.0):
        assert bifurcated_coherence(m.h_plus, m.h_zero, 30, t) == pytest.approx(brute_force_pair(bath, 30, t), abs=1e-12)


def test_pairs_sorted_and_above_floor():
    bath = generate_bath(1, 0.011, 5.0, SENSOR, FIELD)
    pairs = enumerate_pairs(bath)
    idx = pairs.index
    assert np.all(idx[:, 0] < idx[:, 1])
    order = np.lexsort((idx[:, 1], idx[:, 0]))
    np.testing.assert_array_equal(order, np.arange(len(idx)))
    assert np.all(4 * np.abs(pairs.b) > TWO_PI * 1e-6)
    assert np.all(2 * np.abs(pairs.delta) > TWO_PI * 1e-6)


def test_cce2_bounds_and_metadata():
    bath = generate_bath(1, 0.011, 5.0, SENSOR, FIELD)
    times = np.linspace(0, 1000, 21)
    c = cce2_coherence(bath, 30, times)
    assert c.values[0] == 1.0
    assert np.all(np.abs(c.values) <= 1 + 1e-9)
    assert c.metadata["n_pairs"] > 0
    assert 0 <= c.metadata["nearest_neighbour_deviation"] < 1


def test_cce2_thread_count_invariance():
    bath = generate_bath(4, 0.011, 6.0, SENSOR, FIELD)
    times = np.linspace(0, 1000, 11)
    one = cce2_decay(bath, 30, times, threads=1)
    four = cce2_decay(bath, 30, times, threads=4)
    assert one.tobytes() == four.tobytes()


def test_clamp_warns_on_vanishing_subcluster():
    pairs = PairSet(np.array([[0, 1]]), np.array([0.01]), np.array([0.02]))
    single = np.array([[0.0, 1.0], [1.0, 1.0]])
    times = np.array([0.0, 100.0])
    with pytest.warns(UserWarning, match="sub-cluster"):
        out = _chunk_product(pairs, single, 0, 1, 30, times)
    raw = pair_cluster_coherence(0.01, 0.02, 30, times)
    np.testing.assert_allclose(out, raw)
