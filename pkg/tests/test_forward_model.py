import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridinv.forward_model import (D_ISO, DESK_SEED, NoiseSpec, PopulationParams, Protocol, VoxelConfig,
                                     add_rician_noise, desk_protocol, get_protocol, mix_signal,
                                     large_protocol, population_signal, shell_protocol, signal_population)

EZ = (0.0, 0.0, 1.0)


def hand_signal(u, r, f, b, g):
    """Scalar re-evaluation of the closed form, one measurement at a time."""
    c = sum(ui * gi for ui, gi in zip(u, g))
    d_perp = 2.5e-5 * r * r
    return f * math.exp(-b * (2.0e-3 * c * c + d_perp * (1 - c * c))) + (1 - f) * math.exp(-b * 2.0e-3)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


@pytest.fixture(scope="module")
def proto():
    return desk_protocol()


class TestSignal:
    def test_b0_is_one(self, proto):
        p = PopulationParams(unit([1, 2, 3]), 3.3, 0.7)
        S = signal_population(p, proto)
        assert np.all(S[proto.bvals == 0] == 1.0)

    def test_zero_density_is_isotropic(self, proto):
        a = signal_population(PopulationParams(EZ, 1.0, 0.0), proto)
        b = signal_population(PopulationParams(unit([1, 1, 0]), 4.0, 0.0), proto)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_allclose(a, np.exp(-proto.bvals * D_ISO), rtol=1e-15)

    def test_parallel_measurement(self):
        pr = Protocol(np.array([0.0, 1000.0]), np.array([EZ, EZ]))
        S = signal_population(PopulationParams(EZ, 2.0, 0.6), pr)
        assert S[1] == pytest.approx(math.exp(-2.0), rel=1e-14)
        assert S[1] == pytest.approx(0.1353352832366127, rel=1e-12)

    def test_matches_hand_evaluation(self, proto):
        u = unit([0.3, -0.4, 0.8])
        S = signal_population(PopulationParams(u, 1.7, 0.45), proto)
        ref = [hand_signal(u, 1.7, 0.45, b, g) for b, g in zip(proto.bvals, proto.dirs)]
        np.testing.assert_allclose(S, ref, rtol=1e-13, atol=0)

    def test_values_in_unit_interval(self, proto):
        S = population_signal(unit([1, 0, 1]), np.linspace(0.5, 5, 7), np.linspace(0, 0.9, 7), proto)
        assert S.shape == (7, proto.M)
        assert np.all((S > 0) & (S <= 1))

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.5, 5.0), st.floats(0.0, 0.85), st.floats(0.01, 0.05))
    def test_perpendicular_signal_increases_with_density(self, r, f, df):
        # along a direction orthogonal to u the intra-axonal term decays slower
        # than the extra-axonal one (d_perp < d_iso), so raising f raises S
        pr = Protocol(np.array([0.0, 1000.0, 3000.0]), np.array([EZ, (1, 0, 0), (0, 1, 0)]))
        lo = signal_population(PopulationParams(EZ, r, f), pr)
        hi = signal_population(PopulationParams(EZ, r, f + df), pr)
        assert np.all(hi[1:] > lo[1:])


class TestMix:
    def test_single_population(self, proto):
        p = PopulationParams(unit([1, 0, 0]), 2.0, 0.5)
        np.testing.assert_array_equal(mix_signal(VoxelConfig((p,), (1.0,)), proto), signal_population(p, proto))

    def test_identical_populations(self, proto):
        p = PopulationParams(unit([0, 1, 1]), 2.5, 0.3)
        S = mix_signal(VoxelConfig((p, p), (0.35, 0.65)), proto)
        np.testing.assert_allclose(S, signal_population(p, proto), rtol=1e-15)

    def test_weighted_sum(self, proto):
        g = np.random.default_rng(8)
        p1 = PopulationParams(unit(g.normal(size=3)), 1.2, 0.4)
        p2 = PopulationParams(unit(g.normal(size=3)), 3.9, 0.8)
        S = mix_signal(VoxelConfig((p1, p2), (0.3, 0.7)), proto)
        ref = [0.3 * hand_signal(p1.u, 1.2, 0.4, b, d) + 0.7 * hand_signal(p2.u, 3.9, 0.8, b, d)
               for b, d in zip(proto.bvals, proto.dirs)]
        np.testing.assert_allclose(S, ref, rtol=1e-13)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
    def test_linear_in_fractions(self, seed, a):
        g = np.random.default_rng(seed)
        pops = tuple(PopulationParams(unit(g.normal(size=3)), g.uniform(0.5, 5), g.uniform(0, 0.9))
                     for _ in range(2))
        proto = desk_protocol()
        S = mix_signal(VoxelConfig(pops, (a, 1 - a)), proto)
        ref = a * signal_population(pops[0], proto) + (1 - a) * signal_population(pops[1], proto)
        np.testing.assert_allclose(S, ref, rtol=1e-14, atol=1e-15)


class TestNoise:
    def test_infinite_snr(self):
        S = np.array([0.2, 0.5, 1.0])
        np.testing.assert_array_equal(add_rician_noise(S, NoiseSpec(math.inf, 1)), S)

    def test_rayleigh_mean(self):
        y = add_rician_noise(np.zeros(100_000), NoiseSpec(50.0, 123))
        sigma = 1 / 50
        assert abs(y.mean() / (sigma * math.sqrt(math.pi / 2)) - 1) < 0.02

    def test_gaussian_regime(self):
        S = np.full(100_000, 0.3)
        y = add_rician_noise(S, NoiseSpec(100.0, 77))
        assert abs(y.mean() / 0.3 - 1) < 0.005

    def test_bitwise_reproducible(self, proto):
        S = signal_population(PopulationParams(EZ, 2.0, 0.5), proto)
        a = add_rician_noise(S, NoiseSpec(25.0, 99))
        b = add_rician_noise(S.copy(), NoiseSpec(25.0, 99))
        assert a.tobytes() == b.tobytes()
        assert not np.array_equal(a, add_rician_noise(S, NoiseSpec(25.0, 100)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**64 - 1), st.floats(1.0, 200.0))
    def test_positive(self, seed, snr):
        assert np.all(add_rician_noise(np.linspace(0, 1, 50), NoiseSpec(snr, seed)) >= 0)

    def test_invalid_snr(self):
        with pytest.raises(ValueError):
            NoiseSpec(0.0, 1)


class TestTypes:
    def test_population_ranges(self):
        with pytest.raises(ValueError):
            PopulationParams(EZ, 6.0, 0.5)
        with pytest.raises(ValueError):
            PopulationParams(EZ, 1.0, 0.95)
        with pytest.raises(ValueError):
            PopulationParams((0.0, 0.0, 2.0), 1.0, 0.5)

    def test_fractions_sum_to_one(self):
        p = PopulationParams(EZ, 1.0, 0.5)
        with pytest.raises(ValueError):
            VoxelConfig((p, p), (0.5, 0.6))
        with pytest.raises(ValueError):
            VoxelConfig((p,), (0.5, 0.5))


class TestProtocol:
    def test_desk_layout(self, proto):
        assert proto.M == 64
        assert np.sum(proto.bvals == 0) == 4
        assert np.sum(proto.bvals == 1000) == 30 and np.sum(proto.bvals == 3000) == 30

    def test_desk_matches_regeneration(self, proto):
        regen = shell_protocol(4, [(1000, 30), (3000, 30)], DESK_SEED)
        np.testing.assert_array_equal(regen.bvals, proto.bvals)
        np.testing.assert_allclose(regen.dirs, proto.dirs, atol=1e-12)

    def test_desk_directions_spread(self, proto):
        for b in (1000, 3000):
            g = proto.dirs[proto.bvals == b]
            cos = np.abs(g @ g.T)
            np.fill_diagonal(cos, 0)
            assert np.degrees(np.arccos(cos.max())) > 15

    def test_large_preset(self):
        p = large_protocol()
        assert p.M == 552
        assert get_protocol("large") is p

    def test_csv_roundtrip(self, proto, tmp_path):
        path = tmp_path / "p.csv"
        proto.save(path)
        assert path.read_text().splitlines()[0] == "b_value,gx,gy,gz"
        back = Protocol.load(path)
        assert np.array_equal(back.bvals, proto.bvals) and np.array_equal(back.dirs, proto.dirs)
        assert back.digest() == proto.digest()
        assert get_protocol(str(path)).digest() == proto.digest()

    def test_zero_direction_on_b0(self):
        p = Protocol.from_csv_text("b_value,gx,gy,gz\n0,0,0,0\n1000,1,0,0\n")
        np.testing.assert_array_equal(p.dirs[0], EZ)

    def test_validation(self):
        with pytest.raises(ValueError):
            Protocol(np.array([1000.0]), np.array([EZ]))
        with pytest.raises(ValueError):
            Protocol(np.array([0.0, 1000.0]), np.array([EZ, (1.0, 1.0, 0.0)]))
        with pytest.raises(ValueError):
            Protocol(np.array([0.0, -5.0]), np.array([EZ, EZ]))
