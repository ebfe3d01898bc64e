import numpy as np
import pytest
from hypothesis import given, assume, settings
from hypothesis import strategies as st

from dlrecon import geometry
from dlrecon.geometry import (
    GeometryError, ReflectorPlane, incidence_plane_normal, mirror_point,
    plane_from_point_and_image, projection_matrix, reflection_point,
    rotation_matrix, theta_unit_vector, unit_radius, vec,
)

coords = st.floats(-100.0, 100.0, allow_nan=False)
vectors = st.tuples(coords, coords, coords).map(np.array)


def unit_vectors():
    return vectors.filter(lambda v: np.linalg.norm(v) > 1e-3).map(
        lambda v: v / np.linalg.norm(v))


class TestUnitRadius:
    def test_axis_aligned(self):
        np.testing.assert_allclose(unit_radius(vec(0, 0, 0), vec(2, 0, 0)),
                                   [1, 0, 0])

    def test_degenerate(self):
        with pytest.raises(GeometryError):
            unit_radius(vec(1, 1, 1), vec(1, 1, 1))

    def test_normalization(self):
        np.testing.assert_allclose(unit_radius(vec(0, 0, 0), vec(1, 1, 0)),
                                   [1 / np.sqrt(2), 1 / np.sqrt(2), 0])


class TestProjectionMatrix:
    def test_axis_case(self):
        np.testing.assert_allclose(projection_matrix(vec(1, 0, 0)),
                                   np.diag([0.0, -1.0, -1.0]))

    def test_annihilates_radial(self):
        e = geometry.normalize(vec(1, 2, 3))
        p = geometry.normalize(vec(0, 1, -1))
        assert abs(np.dot(projection_matrix(e) @ p, e)) < 1e-12

    def test_squared_is_negated(self):
        pr = projection_matrix(vec(0, 1, 0))
        np.testing.assert_allclose(pr @ pr, -pr, atol=1e-15)

    @given(unit_vectors())
    def test_properties(self, e):
        pr = projection_matrix(e)
        np.testing.assert_allclose(pr, pr.T, atol=1e-12)
        np.testing.assert_allclose(pr @ e, np.zeros(3), atol=1e-9)
        np.testing.assert_allclose(pr @ pr, -pr, atol=1e-9)

    @given(unit_vectors(), unit_vectors())
    def test_norm_is_sine(self, e, p):
        s = np.linalg.norm(np.cross(p, e))
        assert abs(np.linalg.norm(projection_matrix(e) @ p) - s) < 1e-9


class TestThetaUnitVector:
    def test_perpendicular_case(self):
        np.testing.assert_allclose(
            theta_unit_vector(vec(0, 0, 1), vec(1, 0, 0)), [0, 0, -1], atol=1e-15)

    def test_parallel_error(self):
        with pytest.raises(GeometryError):
            theta_unit_vector(vec(1, 0, 0), vec(1, 0, 0))

    def test_oblique(self):
        # ((p x e) x e) computed by hand: p=(1/sqrt2,0,1/sqrt2), e=(1,0,0)
        # p x e = (0, 1/sqrt2, 0); (p x e) x e = (0, 0, -1/sqrt2).
        p = vec(1, 0, 1) / np.sqrt(2)
        np.testing.assert_allclose(theta_unit_vector(p, vec(1, 0, 0)),
                                   [0, 0, -1], atol=1e-12)

    @given(unit_vectors(), unit_vectors())
    def test_matches_projected(self, p, e):
        assume(abs(np.dot(p, e)) < 1.0 - 1e-6)
        via_proj = projection_matrix(e) @ p
        via_proj = via_proj / np.linalg.norm(via_proj)
        np.testing.assert_allclose(theta_unit_vector(p, e), via_proj, atol=1e-9)


class TestRotationMatrix:
    def test_right_hand_quarter_turn(self):
        r = rotation_matrix(vec(0, 0, 1), np.pi / 2)
        np.testing.assert_allclose(r @ vec(1, 0, 0), [0, 1, 0], atol=1e-15)

    def test_zero_angle(self):
        np.testing.assert_allclose(rotation_matrix(vec(0, 0, 1), 0.0), np.eye(3))

    def test_half_turn(self):
        r = rotation_matrix(vec(0, 0, 1), np.pi)
        np.testing.assert_allclose(r @ vec(1, 0, 0), [-1, 0, 0], atol=1e-15)

    @given(unit_vectors(), st.floats(-10, 10))
    def test_proper_rotation(self, axis, angle):
        r = rotation_matrix(axis, angle)
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-9)
        assert abs(np.linalg.det(r) - 1.0) < 1e-9
        np.testing.assert_allclose(r @ axis, axis, atol=1e-9)


def planes():
    return st.tuples(vectors, unit_vectors()).map(
        lambda t: ReflectorPlane(point=t[0], normal=t[1]))


class TestMirrorPoint:
    def test_z_plane(self):
        plane = ReflectorPlane(point=vec(0, 0, 0), normal=vec(0, 0, 1))
        np.testing.assert_allclose(mirror_point(vec(1, 2, 3), plane), [1, 2, -3])

    def test_point_on_plane(self):
        plane = ReflectorPlane(point=vec(0, 0, 0), normal=vec(0, 0, 1))
        np.testing.assert_allclose(mirror_point(vec(5, -1, 0), plane), [5, -1, 0])

    def test_offset_plane(self):
        plane = ReflectorPlane(point=vec(0, 0, 2), normal=vec(0, 0, 1))
        np.testing.assert_allclose(mirror_point(vec(0, 0, 1), plane), [0, 0, 3])

    @given(vectors, planes())
    def test_involution(self, x, plane):
        np.testing.assert_allclose(mirror_point(mirror_point(x, plane), plane),
                                   x, atol=1e-9)


class TestPlaneFromPointAndImage:
    def test_symmetric_pair(self):
        plane = plane_from_point_and_image(vec(0, 0, 1), vec(0, 0, -1))
        np.testing.assert_allclose(plane.point, [0, 0, 0])
        np.testing.assert_allclose(plane.normal, [0, 0, 1])

    def test_offset_pair(self):
        plane = plane_from_point_and_image(vec(2, 0, 0), vec(0, 0, 0))
        np.testing.assert_allclose(plane.point, [1, 0, 0])
        np.testing.assert_allclose(plane.normal, [1, 0, 0])

    def test_coincident_error(self):
        with pytest.raises(GeometryError):
            plane_from_point_and_image(vec(1, 1, 1), vec(1, 1, 1))

    @given(vectors, planes())
    def test_round_trip_with_mirror(self, x, plane):
        image = mirror_point(x, plane)
        assume(np.linalg.norm(x - image) > 1e-6)
        rebuilt = plane_from_point_and_image(x, image)
        np.testing.assert_allclose(mirror_point(x, rebuilt), image, atol=1e-8)


class TestReflectionPoint:
    plane = ReflectorPlane(point=vec(0, 0, 0), normal=vec(0, 0, 1))

    def test_symmetric(self):
        K, alpha = reflection_point(vec(0, 0, 1), vec(2, 0, 1), self.plane)
        np.testing.assert_allclose(K, [1, 0, 0], atol=1e-12)
        assert abs(alpha - np.pi / 4) < 1e-12

    def test_normal_incidence(self):
        K, alpha = reflection_point(vec(0, 0, 1), vec(0, 0, 2), self.plane)
        np.testing.assert_allclose(K, [0, 0, 0], atol=1e-12)
        assert abs(alpha) < 1e-12

    def test_asymmetric(self):
        # Image (0,0,-1); the segment to (4,0,3) crosses z=0 at x=1.
        K, _ = reflection_point(vec(0, 0, 1), vec(4, 0, 3), self.plane)
        np.testing.assert_allclose(K, [1, 0, 0], atol=1e-12)

    def test_opposite_sides_error(self):
        with pytest.raises(GeometryError):
            reflection_point(vec(0, 0, 1), vec(0, 0, -1), self.plane)

    def test_on_plane_error(self):
        with pytest.raises(GeometryError):
            reflection_point(vec(0, 0, 0), vec(1, 0, 1), self.plane)

    @given(vectors, vectors, planes())
    @settings(max_examples=200)
    def test_reflection_law(self, tx, rx, plane):
        h_t = plane.signed_distance(tx)
        h_r = plane.signed_distance(rx)
        assume(abs(h_t) > 1e-3 and abs(h_r) > 1e-3 and h_t * h_r > 0)
        K, alpha = reflection_point(tx, rx, plane)
        assert abs(plane.signed_distance(K)) < 1e-6
        e_in = unit_radius(tx, K)
        e_out = unit_radius(K, rx)
        a_in = np.arccos(np.clip(abs(np.dot(e_in, plane.normal)), -1, 1))
        a_out = np.arccos(np.clip(abs(np.dot(e_out, plane.normal)), -1, 1))
        assert abs(a_in - alpha) < 1e-7
        assert abs(a_out - alpha) < 1e-7
        # Both rays lie in the plane of incidence.
        n2 = incidence_plane_normal(e_in, plane.normal)
        assert abs(np.dot(e_out, n2)) < 1e-7


class TestIncidencePlaneNormal:
    def test_cross_product_case(self):
        e_b = vec(1, 0, -1) / np.sqrt(2)
        n2 = incidence_plane_normal(e_b, vec(0, 0, 1))
        assert abs(abs(n2[1]) - 1.0) < 1e-12

    def test_normal_incidence_fallback(self):
        n2 = incidence_plane_normal(vec(0, 0, -1), vec(0, 0, 1))
        assert abs(np.linalg.norm(n2) - 1.0) < 1e-12
        assert abs(np.dot(n2, vec(0, 0, -1))) < 1e-12
        # Deterministic fallback.
        n2b = incidence_plane_normal(vec(0, 0, -1), vec(0, 0, 1))
        np.testing.assert_allclose(n2, n2b)

    @given(unit_vectors(), unit_vectors())
    def test_always_perpendicular(self, e_b, n1):
        n2 = incidence_plane_normal(e_b, n1)
        assert abs(np.dot(n2, e_b)) < 1e-7
        if np.linalg.norm(np.cross(e_b, n1)) > 1e-6:
            assert abs(np.dot(n2, n1)) < 1e-7
