"""Exact 3-D geometry for the propagation model.

Radius vectors, transverse projection matrices, axis rotations, mirror
images and specular reflection points on planar reflectors.  Everything
here is pure and operates on plain ``(3,)`` float arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# Relative tolerance for unit-vector and degeneracy checks.
UNIT_TOL = 1e-9
# Absolute tolerance (meters) for coincident points.
COINCIDENCE_TOL = 1e-12


class GeometryError(ValueError):
    """Degenerate or inconsistent geometric configuration."""


def vec(x, y, z) -> np.ndarray:
    return np.array([x, y, z], dtype=float)


def normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n < COINCIDENCE_TOL:
        raise GeometryError("cannot normalize a (near-)zero vector")
    return v / n


def is_unit(v, tol: float = UNIT_TOL) -> bool:
    return abs(np.linalg.norm(np.asarray(v, dtype=float)) - 1.0) <= tol


def perpendicular_unit(v) -> np.ndarray:
    """Deterministic unit vector perpendicular to ``v``.

    Built from the smallest-magnitude component of ``v`` so the choice is
    stable under small perturbations of the input.
    """
    v = normalize(v)
    k = int(np.argmin(np.abs(v)))
    e = np.zeros(3)
    e[k] = 1.0
    return normalize(np.cross(v, e))


def unit_radius(src, dst) -> np.ndarray:
    """Unit vector pointing from ``src`` toward ``dst``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    d = dst - src
    n = np.linalg.norm(d)
    if n < COINCIDENCE_TOL:
        raise GeometryError("source and destination points coincide")
    return d / n


def projection_matrix(e_r) -> np.ndarray:
    """Transverse projector ``e e^T - I`` for a unit propagation direction.

    Applied to an antenna orientation it yields the (negated) transverse
    component; the radial component along ``e_r`` is annihilated.
    """
    e = np.asarray(e_r, dtype=float)
    return np.outer(e, e) - np.eye(3)


def theta_unit_vector(p, e_r) -> np.ndarray:
    """Unit polarization vector ``((p x e_r) x e_r) / |...|``.

    Equals ``normalize(projection_matrix(e_r) @ p)``.  Undefined when the
    antenna orientation ``p`` is parallel to the propagation direction.
    """
    p = np.asarray(p, dtype=float)
    e = np.asarray(e_r, dtype=float)
    if abs(float(np.dot(p, e))) >= 1.0 - UNIT_TOL:
        raise GeometryError("antenna orientation parallel to propagation direction")
    w = np.cross(np.cross(p, e), e)
    return w / np.linalg.norm(w)


def rotation_matrix(axis, angle: float) -> np.ndarray:
    """Proper rotation about ``axis`` by ``angle`` (right-hand rule)."""
    a = np.asarray(axis, dtype=float)
    c, s = np.cos(angle), np.sin(angle)
    cross = np.array([[0.0, -a[2], a[1]],
                      [a[2], 0.0, -a[0]],
                      [-a[1], a[0], 0.0]])
    return c * np.eye(3) + s * cross + (1.0 - c) * np.outer(a, a)


@dataclass(frozen=True)
class ReflectorPlane:
    """Infinite planar reflector: a point on the plane, a unit normal and
    an optional material reference (resolved by the EM layer)."""

    point: np.ndarray
    normal: np.ndarray
    material: Optional[object] = None

    def __post_init__(self):
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float))
        object.__setattr__(self, "normal", normalize(self.normal))

    def signed_distance(self, x) -> float:
        return float(np.dot(np.asarray(x, dtype=float) - self.point, self.normal))


def mirror_point(x, plane: ReflectorPlane) -> np.ndarray:
    """Mirror image of ``x`` across the reflector plane (involution)."""
    x = np.asarray(x, dtype=float)
    return x - 2.0 * plane.signed_distance(x) * plane.normal


def mirror_vector(v, plane: ReflectorPlane) -> np.ndarray:
    """Mirror image of a free vector across the plane's direction."""
    v = np.asarray(v, dtype=float)
    return v - 2.0 * float(np.dot(v, plane.normal)) * plane.normal


def plane_from_point_and_image(x, image, material=None) -> ReflectorPlane:
    """Plane through the midpoint of ``[x, image]``, perpendicular to it.

    Inverse of :func:`mirror_point`: ``mirror_point(x, result) == image``.
    """
    x = np.asarray(x, dtype=float)
    image = np.asarray(image, dtype=float)
    if np.linalg.norm(x - image) < COINCIDENCE_TOL:
        raise GeometryError("point and image coincide; plane undetermined")
    return ReflectorPlane(point=(x + image) / 2.0, normal=x - image, material=material)


def reflection_point(tx, rx, plane: ReflectorPlane):
    """Specular reflection point via the image method.

    Returns ``(K, alpha)`` where ``K`` lies on the plane and ``alpha`` is
    the incidence angle measured from the surface normal, in ``[0, pi/2)``.
    Both endpoints must be strictly on the same side of the plane.
    """
    tx = np.asarray(tx, dtype=float)
    rx = np.asarray(rx, dtype=float)
    h_t = plane.signed_distance(tx)
    h_r = plane.signed_distance(rx)
    if abs(h_t) < COINCIDENCE_TOL or abs(h_r) < COINCIDENCE_TOL:
        raise GeometryError("endpoint lies on the reflector plane")
    if h_t * h_r < 0.0:
        raise GeometryError("endpoints on opposite sides of the reflector plane")
    image = mirror_point(tx, plane)
    seg = rx - image
    denom = float(np.dot(seg, plane.normal))
    if abs(denom) < COINCIDENCE_TOL:
        raise GeometryError("image-to-receiver segment parallel to the plane")
    t = -plane.signed_distance(image) / denom
    K = image + t * seg
    e_inc = unit_radius(tx, K)
    cos_alpha = abs(float(np.dot(e_inc, plane.normal)))
    alpha = float(np.arccos(np.clip(cos_alpha, -1.0, 1.0)))
    return K, alpha


def incidence_plane_normal(e_b, n1) -> np.ndarray:
    """Normal of the plane of incidence: ``unit(e_b x n1)``.

    At normal incidence the cross product vanishes and any unit vector
    perpendicular to ``e_b`` works (the polarization split is immaterial
    there); a deterministic fallback is used.
    """
    e_b = np.asarray(e_b, dtype=float)
    n1 = np.asarray(n1, dtype=float)
    c = np.cross(e_b, n1)
    n = np.linalg.norm(c)
    if n < UNIT_TOL:
        return perpendicular_unit(e_b)
    return c / n
