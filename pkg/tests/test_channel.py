import math

import numpy as np
import pytest

from dlrecon import channel as chan
from dlrecon import em
from dlrecon.channel import (
    ChannelVector, PathParams, Scene, SubcarrierGrid, channel_sample,
    doppler_projection, ground_truth_paths, load_channels_csv, path_mu,
    save_channels_csv, synthesize_measured,
)
from dlrecon.em import AntennaPose, MATERIALS, SignalConfig
from dlrecon.geometry import ReflectorPlane, vec

OMEGA = 2.0 * math.pi * 2.4e9
CFG = SignalConfig(omega=OMEGA)


def small_scene():
    tx = [AntennaPose(vec(0, 0, 1.2), vec(0, 1, 0)),
          AntennaPose(vec(0.1, 0, 1.2), vec(1, 0, 0))]
    rx = [AntennaPose(vec(0, 60, 20), vec(0, 0, 1)),
          AntennaPose(vec(0.3, 60, 20), vec(0, 0, 1))]
    ground = ReflectorPlane(point=vec(0, 0, 0), normal=vec(0, 0, 1),
                            material=MATERIALS["brick"])
    wall = ReflectorPlane(point=vec(25, 30, 0), normal=vec(-1, 0, 0),
                          material=MATERIALS["concrete"])
    return Scene(tx_poses=tx, tx_velocities=[np.zeros(3), np.zeros(3)],
                 rx_poses=rx, reflectors=[ground, wall], cfg=CFG)


class TestSubcarrierGrid:
    def test_frequency_ladder(self):
        grid = SubcarrierGrid(OMEGA, 15e3, 4)
        np.testing.assert_allclose(
            grid.angular_frequency([0, 1, 3]),
            [OMEGA, OMEGA + 2 * math.pi * 15e3, OMEGA + 6 * math.pi * 15e3])

    def test_split_evenly(self):
        grid = SubcarrierGrid.split_evenly(OMEGA, 15e3, 120, [0, 1])
        np.testing.assert_array_equal(grid.allocation[0], np.arange(60))
        np.testing.assert_array_equal(grid.allocation[1], np.arange(60, 120))

    def test_overlap_rejected(self):
        with pytest.raises(ValueError):
            SubcarrierGrid(OMEGA, 15e3, 10, {0: [0, 1], 1: [1, 2]})

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            SubcarrierGrid(OMEGA, 15e3, 10, {0: [9, 10]})

    def test_center_index(self):
        grid = SubcarrierGrid(OMEGA, 15e3, 10, {0: [2, 3, 4, 5]})
        assert grid.center_index(0) == 4
        assert grid.center_index() == 5


class TestDopplerProjection:
    def test_head_on(self):
        d, nu = doppler_projection(vec(3, 0, 0), vec(1, 0, 0), OMEGA)
        assert d == 3.0
        assert abs(nu - 3.0 * OMEGA / em.SPEED_OF_LIGHT) < 1e-12

    def test_transverse_motion(self):
        d, nu = doppler_projection(vec(0, 5, 0), vec(1, 0, 0), OMEGA)
        assert d == 0.0 and nu == 0.0

    def test_receding_sign(self):
        d, _ = doppler_projection(vec(-2, 0, 0), vec(1, 0, 0), OMEGA)
        assert d == -2.0

    def test_superluminal_rejected(self):
        with pytest.raises(ValueError):
            doppler_projection(vec(3.1e8, 0, 0), vec(1, 0, 0), OMEGA)


class TestChannelSample:
    def test_single_static_path(self):
        k = CFG.kappa
        got = channel_sample([PathParams(mu=2.0 + 1j, r=30.0)], k)
        want = (2.0 + 1j) * k * np.exp(-1j * k * 30.0)
        assert abs(got - want) < 1e-12 * abs(want)

    def test_superposition(self):
        k = CFG.kappa
        p1 = PathParams(mu=1.0, r=30.0)
        p2 = PathParams(mu=0.5j, r=45.0)
        got = channel_sample([p1, p2], k)
        assert abs(got - channel_sample([p1], k) -
                   channel_sample([p2], k)) < 1e-12 * abs(got)

    def test_doppler_stretches_distance(self):
        k = CFG.kappa
        d = 3.0
        got = channel_sample([PathParams(mu=1.0, r=30.0, doppler=d)], k)
        r_eff = 30.0 * (1.0 + d / em.SPEED_OF_LIGHT)
        want = k * np.exp(-1j * k * r_eff)
        assert abs(got - want) < 1e-12

    def test_vectorized_over_grid(self):
        grid = SubcarrierGrid(OMEGA, 15e3, 8)
        kappas = grid.kappa(grid.all_indices)
        got = channel_sample([PathParams(mu=1.0, r=30.0)], kappas)
        assert got.shape == (8,)
        for i, ki in enumerate(kappas):
            assert abs(got[i] - channel_sample([PathParams(mu=1.0, r=30.0)], ki)) < 1e-15

    def test_input_current_scales(self):
        k = CFG.kappa
        a = channel_sample([PathParams(mu=1.0, r=30.0)], k, i_in=2.0)
        b = channel_sample([PathParams(mu=1.0, r=30.0)], k, i_in=1.0)
        assert abs(a - 2.0 * b) < 1e-15


class TestPathMuConsistency:
    """mu is defined so the carrier-frequency channel equals the EM voltage."""

    def test_direct_path(self):
        tx = AntennaPose(vec(0, 0, 1.2), vec(0, 1, 0))
        rx = AntennaPose(vec(3, 60, 20), vec(0, 0, 1))
        mu = path_mu(tx, rx, None, CFG)
        h = channel_sample([PathParams(mu=mu, r=em.path_length(
            tx.position, rx.position, None))], CFG.kappa, CFG.i_in)
        v = em.direct_voltage_los(tx, rx, CFG)
        assert abs(h - v) <= 1e-9 * abs(v)

    def test_reflected_path(self):
        tx = AntennaPose(vec(0, 0, 1.2), vec(0, 1, 0))
        rx = AntennaPose(vec(3, 60, 20), vec(0, 0, 1))
        plane = ReflectorPlane(point=vec(0, 0, 0), normal=vec(0, 0, 1),
                               material=MATERIALS["brick"])
        mu = path_mu(tx, rx, plane, CFG)
        r = em.path_length(tx.position, rx.position, plane)
        h = channel_sample([PathParams(mu=mu, r=r)], CFG.kappa, CFG.i_in)
        m = em.nlos_matrix(tx.position, rx.position, plane, CFG)
        v = complex(rx.orientation @ m @ tx.orientation)
        assert abs(h - v) <= 1e-9 * abs(v)

    def test_full_sum_matches_total_voltage(self):
        scene = small_scene()
        for k in range(2):
            for n in range(2):
                paths = scene.paths_for(k, n)
                h = channel_sample(paths, CFG.kappa, CFG.i_in)
                tx, rx = scene.tx_poses[k], scene.rx_poses[n]
                los = em.los_matrix(tx.position, rx.position, CFG)
                nlos = [em.nlos_matrix(tx.position, rx.position, pl, CFG)
                        for pl in scene.reflectors]
                v = em.total_voltage(tx.orientation, rx.orientation, los, nlos)
                assert abs(h - v) <= 1e-9 * abs(v)


class TestGroundTruthPaths:
    def test_path_count(self):
        scene = small_scene()
        paths = scene.paths_for(0, 0)
        assert len(paths) == 3
        assert sum(p.is_los for p in paths) == 1

    def test_blocked_los_drops_direct(self):
        scene = small_scene()
        scene.blocked_los = True
        paths = scene.paths_for(0, 0)
        assert len(paths) == 2
        assert not any(p.is_los for p in paths)

    def test_invalid_reflector_skipped(self):
        tx = AntennaPose(vec(0, 0, 1.0), vec(0, 1, 0))
        rx = AntennaPose(vec(0, 60, 20), vec(0, 0, 1))
        # Endpoints straddle this plane: no specular bounce exists.
        mid = ReflectorPlane(point=vec(0, 0, 10), normal=vec(0, 0, 1),
                             material=MATERIALS["brick"])
        paths = ground_truth_paths(tx, rx, None, [mid], False, CFG)
        assert len(paths) == 1 and paths[0].is_los

    def test_doppler_uses_departure_direction(self):
        tx = AntennaPose(vec(0, 0, 1.0), vec(0, 1, 0))
        rx = AntennaPose(vec(0, 60, 1.0), vec(0, 0, 1))
        v = np.array([0.0, 2.0, 0.0])
        paths = ground_truth_paths(tx, rx, v, [], False, CFG)
        assert abs(paths[0].doppler - 2.0) < 1e-12

    def test_reflector_ids_preserved(self):
        scene = small_scene()
        scene.visible = lambda k, n: (True, [1])
        paths = scene.paths_for(0, 0)
        assert [p.reflector_id for p in paths] == [None, 1]


class TestSynthesizeMeasured:
    def test_noiseless_matches_model(self):
        scene = small_scene()
        grid = SubcarrierGrid.split_evenly(OMEGA, 15e3, 40, [0, 1])
        vectors = synthesize_measured(scene, grid, math.inf, seed=3)
        assert len(vectors) == 4
        for v in vectors:
            want = channel_sample(scene.paths_for(v.tx_index, v.rx_index),
                                  grid.kappa(v.subcarriers), CFG.i_in)
            np.testing.assert_allclose(v.samples, want, rtol=1e-12)

    def test_determinism(self):
        scene = small_scene()
        grid = SubcarrierGrid.split_evenly(OMEGA, 15e3, 40, [0, 1])
        a = synthesize_measured(scene, grid, 20.0, seed=5)
        b = synthesize_measured(scene, grid, 20.0, seed=5)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.samples, y.samples)

    def test_seed_changes_noise(self):
        scene = small_scene()
        grid = SubcarrierGrid.split_evenly(OMEGA, 15e3, 40, [0, 1])
        a = synthesize_measured(scene, grid, 20.0, seed=5)
        b = synthesize_measured(scene, grid, 20.0, seed=6)
        assert not np.allclose(a[0].samples, b[0].samples)

    def test_empirical_snr(self):
        """Realized noise power tracks the requested SNR within 0.2 dB."""
        tx = AntennaPose(vec(0, 0, 1.2), vec(0, 1, 0))
        rx = AntennaPose(vec(3, 60, 20), vec(0, 0, 1))
        scene = Scene(tx_poses=[tx], tx_velocities=[np.zeros(3)],
                      rx_poses=[rx], reflectors=[], cfg=CFG)
        n = 100_000
        grid = SubcarrierGrid(OMEGA, 1.0, n, {0: np.arange(n)})
        snr_db = 15.0
        noisy = synthesize_measured(scene, grid, snr_db, seed=11)[0]
        clean = channel_sample(scene.paths_for(0, 0), grid.kappa(noisy.subcarriers),
                               CFG.i_in)
        ref = chan.los_reference_magnitude(tx, rx, CFG)
        noise_power = np.mean(np.abs(noisy.samples - clean) ** 2)
        realized = 10.0 * math.log10(ref ** 2 / noise_power)
        assert abs(realized - snr_db) < 0.2

    def test_noise_moments(self):
        """Circularity: zero mean, zero pseudo-variance, equal I/Q power."""
        tx = AntennaPose(vec(0, 0, 1.2), vec(0, 1, 0))
        rx = AntennaPose(vec(3, 60, 20), vec(0, 0, 1))
        scene = Scene(tx_poses=[tx], tx_velocities=[np.zeros(3)],
                      rx_poses=[rx], reflectors=[], cfg=CFG)
        n = 50_000
        grid = SubcarrierGrid(OMEGA, 1.0, n, {0: np.arange(n)})
        noisy = synthesize_measured(scene, grid, 10.0, seed=23)[0]
        clean = channel_sample(scene.paths_for(0, 0), grid.kappa(noisy.subcarriers),
                               CFG.i_in)
        z = noisy.samples - clean
        power = np.mean(np.abs(z) ** 2)
        assert abs(np.mean(z)) < 4.0 * math.sqrt(power / n)
        assert abs(np.mean(z * z)) < 6.0 * power / math.sqrt(n)
        ratio = np.mean(z.real ** 2) / np.mean(z.imag ** 2)
        assert 0.95 < ratio < 1.05

    def test_blocked_los_still_uses_los_reference(self):
        scene = small_scene()
        grid = SubcarrierGrid.split_evenly(OMEGA, 1.0, 20_000, [0, 1])
        scene.blocked_los = True
        noisy = synthesize_measured(scene, grid, 0.0, seed=31)[0]
        clean = channel_sample(scene.paths_for(0, 0), grid.kappa(noisy.subcarriers),
                               CFG.i_in)
        ref = chan.los_reference_magnitude(scene.tx_poses[0], scene.rx_poses[0], CFG)
        noise_power = np.mean(np.abs(noisy.samples - clean) ** 2)
        assert abs(10.0 * math.log10(ref ** 2 / noise_power)) < 0.5


class TestCsvRoundTrip:
    def test_round_trip(self, tmp_path):
        scene = small_scene()
        grid = SubcarrierGrid.split_evenly(OMEGA, 15e3, 40, [0, 1])
        vectors = synthesize_measured(scene, grid, 20.0, seed=7)
        path = tmp_path / "uplink.csv"
        save_channels_csv(vectors, path)
        back = load_channels_csv(path)
        assert len(back) == len(vectors)
        for x, y in zip(sorted(vectors, key=lambda v: (v.tx_index, v.rx_index)), back):
            assert (x.tx_index, x.rx_index) == (y.tx_index, y.rx_index)
            np.testing.assert_array_equal(x.subcarriers, y.subcarriers)
            np.testing.assert_allclose(x.samples, y.samples, rtol=0, atol=1e-300)

    def test_header(self, tmp_path):
        path = tmp_path / "u.csv"
        save_channels_csv([ChannelVector(np.array([1 + 2j]), 0, 0, np.array([0]))],
                          path)
        header = path.read_text().splitlines()[0]
        assert header == "tx,rx,subcarrier_index,re,im"
