import math

import numpy as np
import pytest

from dlrecon import channel as chan
from dlrecon import em, geometry
from dlrecon.channel import ChannelVector, PathParams, SubcarrierGrid
from dlrecon.em import AntennaPose, MATERIALS, SignalConfig
from dlrecon.geometry import ReflectorPlane, rotation_matrix, vec
from dlrecon.reconstruction import (
    ReconstructionError, UELayout, UEState, antenna_pose, antenna_velocity,
    baseline_old_approach, build_path_params, epsilon_metric, estimate_velocity,
    infer_nontx_poses, infer_path_geometry, reconstruct_dl_channel,
)

OMEGA = 2.0 * math.pi * 2.4e9
CFG = SignalConfig(omega=OMEGA)


class TestUELayout:
    def test_phone_shape(self):
        lay = UELayout.phone()
        assert lay.n_antennas == 4
        np.testing.assert_array_equal(lay.tx_indices, [0, 1])
        np.testing.assert_array_equal(lay.nontx_indices, [2, 3])

    def test_mean_tx_offset(self):
        lay = UELayout.phone(length=0.12, width=0.07)
        np.testing.assert_allclose(lay.mean_tx_offset, [-0.03, -0.0175, 0.0])

    def test_parallel_pairing(self):
        assert UELayout.phone().parallel_pairing == {2: 0, 3: 1}

    def test_needs_a_transmitter(self):
        with pytest.raises(ValueError):
            UELayout(np.zeros((2, 3)), np.array([[0, 1, 0], [1, 0, 0]]),
                     np.array([False, False]))

    def test_orientations_normalized(self):
        lay = UELayout(np.zeros((2, 3)), np.array([[0, 2.0, 0], [3.0, 0, 0]]),
                       np.array([True, False]))
        np.testing.assert_allclose(np.linalg.norm(lay.orientations, axis=1),
                                   [1.0, 1.0])


class TestUEState:
    def test_rejects_improper_attitude(self):
        with pytest.raises(ValueError):
            UEState(cg=np.zeros(3), attitude=np.diag([1.0, 1.0, -1.0]))

    def test_rejects_non_orthogonal(self):
        with pytest.raises(ValueError):
            UEState(cg=np.zeros(3), attitude=np.eye(3) + 0.1)


class TestAntennaPose:
    def test_identity_attitude(self):
        lay = UELayout.phone()
        state = UEState(cg=vec(10, 20, 1.0), attitude=np.eye(3))
        pose = antenna_pose(state, lay, 2)
        lever = lay.offsets[2] - lay.mean_tx_offset
        np.testing.assert_allclose(pose.position, state.cg + lever)
        np.testing.assert_allclose(pose.orientation, [0, 1, 0])

    def test_rotated_attitude(self):
        lay = UELayout.phone()
        r = rotation_matrix(vec(0, 0, 1), math.pi / 2)
        state = UEState(cg=vec(0, 0, 1.0), attitude=r)
        pose = antenna_pose(state, lay, 3)
        lever = lay.offsets[3] - lay.mean_tx_offset
        np.testing.assert_allclose(pose.position, state.cg + r @ lever,
                                   atol=1e-15)
        np.testing.assert_allclose(pose.orientation, r @ lay.orientations[3],
                                   atol=1e-15)

    def test_infer_nontx_poses_keys(self):
        lay = UELayout.phone()
        state = UEState(cg=vec(0, 0, 1.0), attitude=np.eye(3))
        poses = infer_nontx_poses(state, lay)
        assert sorted(poses) == [2, 3]

    def test_tx_centroid_is_cg(self):
        """The mean of the transmitting antennas' world positions is the
        state's center position by construction."""
        lay = UELayout.phone()
        r = rotation_matrix(geometry.normalize(vec(1, 1, 0)), 0.4)
        state = UEState(cg=vec(5, 6, 1.5), attitude=r)
        mean = np.mean([antenna_pose(state, lay, int(k)).position
                        for k in lay.tx_indices], axis=0)
        np.testing.assert_allclose(mean, state.cg, atol=1e-12)


GROUND = ReflectorPlane(point=vec(0, 0, 0), normal=vec(0, 0, 1),
                        material=MATERIALS["brick"])
WALL = ReflectorPlane(point=vec(30, 30, 0), normal=vec(-1, 0, 0),
                      material=MATERIALS["concrete"])


class TestInferPathGeometry:
    tx = AntennaPose(vec(0, 0, 1.2), vec(0, 1, 0))
    rx = AntennaPose(vec(3, 60, 20), vec(0, 0, 1))

    def test_counts(self):
        geoms = infer_path_geometry(self.tx, self.rx, [GROUND, WALL], False)
        assert len(geoms) == 3
        assert geoms[0].plane is None

    def test_blocked_los(self):
        geoms = infer_path_geometry(self.tx, self.rx, [GROUND, WALL], True)
        assert len(geoms) == 2
        assert all(g.plane is not None for g in geoms)

    def test_reflected_length_via_image(self):
        geoms = infer_path_geometry(self.tx, self.rx, [GROUND], True)
        want = em.path_length(self.tx.position, self.rx.position, GROUND)
        assert abs(geoms[0].r - want) < 1e-12

    def test_matches_ground_truth_params(self):
        truth = chan.ground_truth_paths(self.tx, self.rx, None, [GROUND, WALL],
                                        False, CFG)
        geoms = infer_path_geometry(self.tx, self.rx, [GROUND, WALL], False)
        params = build_path_params(self.tx, self.rx, geoms, None, CFG)
        assert len(params) == len(truth)
        for got, want in zip(params, truth):
            assert abs(got.r - want.r) < 1e-10
            assert abs(got.mu - want.mu) < 1e-12 * abs(want.mu)


class TestVelocity:
    def test_translation(self):
        s1 = UEState(cg=vec(0, 0, 1.0), attitude=np.eye(3), timestamp=0.0)
        s2 = UEState(cg=vec(0.001, 0, 1.0), attitude=np.eye(3), timestamp=0.5e-3)
        est = estimate_velocity(s1, s2)
        np.testing.assert_allclose(est.v_cg, [2.0, 0, 0])
        np.testing.assert_allclose(est.angular_velocity, np.zeros(3), atol=1e-12)

    def test_rotation(self):
        dt = 0.5e-3
        axis = geometry.normalize(vec(0, 0, 1))
        rate = 3.0  # rad/s
        s1 = UEState(cg=np.zeros(3), attitude=np.eye(3), timestamp=0.0)
        s2 = UEState(cg=np.zeros(3),
                     attitude=rotation_matrix(axis, rate * dt), timestamp=dt)
        est = estimate_velocity(s1, s2)
        np.testing.assert_allclose(est.angular_velocity, rate * axis, atol=1e-9)

    def test_bad_timestamps(self):
        s = UEState(cg=np.zeros(3), attitude=np.eye(3), timestamp=0.0)
        with pytest.raises(ValueError):
            estimate_velocity(s, s)

    def test_antenna_velocity_lever_arm(self):
        est = estimate_velocity(
            UEState(cg=np.zeros(3), attitude=np.eye(3), timestamp=0.0),
            UEState(cg=vec(5e-4, 0, 0),
                    attitude=rotation_matrix(vec(0, 0, 1), 1e-3),
                    timestamp=0.5e-3))
        v = antenna_velocity(est, vec(0, 0.1, 0), np.zeros(3))
        # v = v_cg + omega x lever; omega ~ 2 rad/s z, lever 0.1 y -> -0.2 x.
        np.testing.assert_allclose(v, [1.0 - 0.2, 0.0, 0.0], atol=1e-6)


class TestReconstructDl:
    def test_full_grid_output(self):
        grid = SubcarrierGrid.split_evenly(OMEGA, 15e3, 40, [0, 1])
        paths = [PathParams(mu=1e-9, r=70.0)]
        out = reconstruct_dl_channel({(2, 0): paths}, grid)
        assert len(out) == 1
        assert out[0].samples.size == 40
        np.testing.assert_array_equal(out[0].subcarriers, np.arange(40))

    def test_matches_channel_model(self):
        grid = SubcarrierGrid.split_evenly(OMEGA, 15e3, 40, [0, 1])
        paths = [PathParams(mu=1e-9, r=70.0), PathParams(mu=2e-10, r=95.0)]
        out = reconstruct_dl_channel({(0, 0): paths}, grid)[0]
        want = chan.channel_sample(paths, grid.kappa(grid.all_indices))
        np.testing.assert_allclose(out.samples, want, rtol=1e-12)

    def test_empty_path_set_gives_zero_channel(self):
        grid = SubcarrierGrid.split_evenly(OMEGA, 15e3, 40, [0, 1])
        out = reconstruct_dl_channel({(3, 1): []}, grid)[0]
        assert np.all(out.samples == 0)

    def test_no_keys_rejected(self):
        grid = SubcarrierGrid.split_evenly(OMEGA, 15e3, 40, [0, 1])
        with pytest.raises(ReconstructionError):
            reconstruct_dl_channel({}, grid)


class TestEpsilonMetric:
    h = np.array([1 + 1j, 2 - 1j, -0.5 + 0.2j])

    def test_identical_is_zero(self):
        assert epsilon_metric(self.h, self.h) == 0.0

    def test_negated_is_two(self):
        assert abs(epsilon_metric(self.h, -self.h) - 2.0) < 1e-15

    def test_doubled_is_one(self):
        assert abs(epsilon_metric(self.h, 2.0 * self.h) - 1.0) < 1e-15

    def test_zero_prediction_is_one(self):
        assert abs(epsilon_metric(self.h, np.zeros(3)) - 1.0) < 1e-15

    def test_scale_invariance(self):
        a = epsilon_metric(self.h, 1.1 * self.h)
        b = epsilon_metric(7.0 * self.h, 7.7 * self.h)
        assert abs(a - b) < 1e-15

    def test_accepts_channel_vectors(self):
        cv = ChannelVector(self.h, 0, 0, np.arange(3))
        assert epsilon_metric(cv, cv) == 0.0

    def test_zero_reference_rejected(self):
        with pytest.raises(ValueError):
            epsilon_metric(np.zeros(3), self.h)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            epsilon_metric(self.h, self.h[:2])


class TestBaseline:
    def test_copies_parallel_partner(self):
        grid = SubcarrierGrid.split_evenly(OMEGA, 15e3, 40, [0, 1])
        measured = [
            ChannelVector(np.full(20, 1 + 0j), 0, 0, grid.allocation[0]),
            ChannelVector(np.full(20, 2 + 0j), 1, 0, grid.allocation[1]),
        ]
        out = baseline_old_approach(measured, {2: 0, 3: 1})
        by_tx = {v.tx_index: v for v in out}
        np.testing.assert_array_equal(by_tx[2].samples, measured[0].samples)
        np.testing.assert_array_equal(by_tx[3].samples, measured[1].samples)
        np.testing.assert_array_equal(by_tx[2].subcarriers, grid.allocation[0])

    def test_missing_partner_rejected(self):
        with pytest.raises(ReconstructionError):
            baseline_old_approach([], {2: 0})

    def test_perfect_when_antennas_colocated(self):
        """If the non-Tx antenna truly had the partner's channel, the
        baseline scores epsilon = 0; any difference shows up directly."""
        grid = SubcarrierGrid.split_evenly(OMEGA, 15e3, 40, [0])
        h = np.exp(1j * np.linspace(0, 1, 40))
        measured = [ChannelVector(h, 0, 0, grid.all_indices)]
        out = baseline_old_approach(measured, {2: 0})
        assert epsilon_metric(measured[0], out[0]) == 0.0
