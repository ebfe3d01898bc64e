"""Electromagnetic core: dipole field, Fresnel coefficients and the
line-of-sight / reflected-path voltage transformation matrices.

All voltages come from the short-dipole model: the field transmitted with
effective length ``d sin(theta) e_theta`` induces a voltage through the
receiving antenna's effective length.  The matrix forms fold the angular
factors into transverse projectors so the induced voltage is bilinear in
the two antenna orientations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import geometry
from .geometry import GeometryError, ReflectorPlane

SPEED_OF_LIGHT = 299792458.0
AIR_IMPEDANCE = 376.730
VACUUM_PERMITTIVITY = 8.8541878128e-12


@dataclass(frozen=True)
class Material:
    """Lossy dielectric: relative permittivity and conductivity (S/m)."""

    rel_permittivity: float
    conductivity: float = 0.0

    def __post_init__(self):
        if self.rel_permittivity < 1.0:
            raise ValueError("relative permittivity must be >= 1")
        if self.conductivity < 0.0:
            raise ValueError("conductivity must be >= 0")


# Default material table (2.4 GHz values); configuration defaults only.
MATERIALS = {
    "vacuum": Material(1.0, 0.0),
    "brick": Material(3.75, 0.038),
    "concrete": Material(5.31, 0.066),
}


@dataclass(frozen=True)
class SignalConfig:
    """Carrier and antenna hardware parameters.

    omega   -- carrier angular frequency, rad/s
    i_in    -- input current amplitude, A
    d       -- dipole length, m (defaults to lambda/50, short-dipole regime)
    """

    omega: float
    i_in: float = 1.0
    d: Optional[float] = None

    def __post_init__(self):
        if self.omega <= 0.0:
            raise ValueError("omega must be positive")
        if self.i_in <= 0.0:
            raise ValueError("input current must be positive")
        if self.d is None:
            object.__setattr__(self, "d", self.wavelength / 50.0)
        if self.d <= 0.0:
            raise ValueError("dipole length must be positive")

    @property
    def kappa(self) -> float:
        return self.omega / SPEED_OF_LIGHT

    @property
    def wavelength(self) -> float:
        return 2.0 * math.pi * SPEED_OF_LIGHT / self.omega

    def at_omega(self, omega: float) -> "SignalConfig":
        """Same hardware parameters evaluated at a different frequency."""
        return SignalConfig(omega=omega, i_in=self.i_in, d=self.d)


@dataclass(frozen=True)
class AntennaPose:
    """Dipole position (m) and unit orientation vector."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "orientation", geometry.normalize(self.orientation))


def scalar_field(r: float, cfg: SignalConfig) -> complex:
    """Scalar field factor ``j k eta I_in exp(-j k r) / (4 pi r)``."""
    if r <= 0.0:
        raise ValueError("propagation distance must be positive")
    k = cfg.kappa
    return 1j * k * AIR_IMPEDANCE * cfg.i_in * np.exp(-1j * k * r) / (4.0 * math.pi * r)


def complex_permittivity(mat: Material, omega: float) -> complex:
    """Complex relative permittivity ``eps_r - j sigma / (omega eps0)``."""
    return mat.rel_permittivity - 1j * mat.conductivity / (omega * VACUUM_PERMITTIVITY)


def fresnel_coefficients(alpha: float, mat: Material, omega: float):
    """Reflection coefficients (perp, par) for air -> lossy dielectric.

    ``alpha`` is the incidence angle from the surface normal, in [0, pi/2).
    """
    if not 0.0 <= alpha < math.pi / 2.0:
        raise ValueError("incidence angle must be in [0, pi/2)")
    eps = complex_permittivity(mat, omega)
    cos_a = math.cos(alpha)
    root = np.sqrt(eps - math.sin(alpha) ** 2)
    gamma_perp = (cos_a - root) / (cos_a + root)
    gamma_par = (eps * cos_a - root) / (eps * cos_a + root)
    return complex(gamma_perp), complex(gamma_par)


def los_matrix(tx_position, rx_position, cfg: SignalConfig) -> np.ndarray:
    """Direct-path transformation matrix ``d^2 Pr_rx E(r) Pr_tx``.

    ``q^T M p`` is the voltage induced on a receiving dipole with
    orientation ``q`` by a transmitting dipole with orientation ``p``.
    """
    tx_position = np.asarray(tx_position, dtype=float)
    rx_position = np.asarray(rx_position, dtype=float)
    e_tx = geometry.unit_radius(tx_position, rx_position)
    r = float(np.linalg.norm(rx_position - tx_position))
    pr_tx = geometry.projection_matrix(e_tx)
    # For a direct path the receive-side radius vector is -e_tx; the
    # projector is even in its argument so it coincides with pr_tx.
    pr_rx = geometry.projection_matrix(-e_tx)
    return cfg.d ** 2 * scalar_field(r, cfg) * (pr_rx @ pr_tx)


def reflection_operator(plane: ReflectorPlane, e_b, e_a, alpha: float, omega: float,
                        material: Optional[Material] = None) -> np.ndarray:
    """Field transform at the reflection point.

    ``G_perp n2 n2^T + G_par W(n2, pi - 2 alpha) (I - n2 n2^T)`` with the
    rotation handedness fixed by requiring that the incoming propagation
    direction is carried onto the outgoing one.
    """
    mat = material if material is not None else plane.material
    if mat is None:
        raise ValueError("reflector has no material assigned")
    n2 = geometry.incidence_plane_normal(e_b, plane.normal)
    g_perp, g_par = fresnel_coefficients(alpha, mat, omega)
    ang = math.pi - 2.0 * alpha
    w_pos = geometry.rotation_matrix(n2, ang)
    w_neg = geometry.rotation_matrix(n2, -ang)
    e_a = np.asarray(e_a, dtype=float)
    if np.linalg.norm(w_pos @ e_b - e_a) <= np.linalg.norm(w_neg @ e_b - e_a):
        w = w_pos
    else:
        w = w_neg
    nn = np.outer(n2, n2)
    return g_perp * nn + g_par * (w @ (np.eye(3) - nn))


def nlos_matrix(tx_position, rx_position, plane: ReflectorPlane, cfg: SignalConfig,
                material: Optional[Material] = None) -> np.ndarray:
    """Single-bounce transformation matrix.

    ``d^2 Pr_a E(r_total) [G_perp n2 n2^T + G_par W (I - n2 n2^T)] Pr_b``
    where ``r_total`` is the full covered distance tx -> K -> rx.
    """
    tx_position = np.asarray(tx_position, dtype=float)
    rx_position = np.asarray(rx_position, dtype=float)
    K, alpha = geometry.reflection_point(tx_position, rx_position, plane)
    e_b = geometry.unit_radius(tx_position, K)
    e_a = geometry.unit_radius(K, rx_position)
    r_total = float(np.linalg.norm(K - tx_position) + np.linalg.norm(rx_position - K))
    refl = reflection_operator(plane, e_b, e_a, alpha, cfg.omega, material)
    pr_b = geometry.projection_matrix(e_b)
    pr_a = geometry.projection_matrix(-e_a)
    return cfg.d ** 2 * scalar_field(r_total, cfg) * (pr_a @ refl @ pr_b)


def direct_voltage_los(tx: AntennaPose, rx: AntennaPose, cfg: SignalConfig) -> complex:
    """Induced voltage ``d^2 E(r) sin(t_tx) sin(t_rx) (e_th_tx . e_th_rx)``.

    Computed through the transverse projectors, which carry the sine
    factors, so aligned-antenna geometries return an exact zero instead of
    hitting the undefined polarization vector.
    """
    e_tx = geometry.unit_radius(tx.position, rx.position)
    r = float(np.linalg.norm(rx.position - tx.position))
    a = geometry.projection_matrix(e_tx) @ tx.orientation
    b = geometry.projection_matrix(-e_tx) @ rx.orientation
    return complex(cfg.d ** 2 * scalar_field(r, cfg) * float(np.dot(a, b)))


def total_voltage(p, q, los: Optional[np.ndarray],
                  nlos_list: Sequence[np.ndarray] = ()) -> complex:
    """``q^T [LoS + sum NLoS_l] p``; a blocked direct path is ``None``."""
    total = np.zeros((3, 3), dtype=complex)
    if los is not None:
        total = total + los
    for m in nlos_list:
        total = total + m
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    return complex(q @ total @ p)


def path_matrix(tx_position, rx_position, plane: Optional[ReflectorPlane],
                cfg: SignalConfig, material: Optional[Material] = None) -> np.ndarray:
    """Transformation matrix for one path: direct if ``plane`` is None."""
    if plane is None:
        return los_matrix(tx_position, rx_position, cfg)
    return nlos_matrix(tx_position, rx_position, plane, cfg, material)


def path_length(tx_position, rx_position, plane: Optional[ReflectorPlane]) -> float:
    """Covered distance of one path (via the image for a reflection)."""
    tx_position = np.asarray(tx_position, dtype=float)
    rx_position = np.asarray(rx_position, dtype=float)
    if plane is None:
        return float(np.linalg.norm(rx_position - tx_position))
    image = geometry.mirror_point(tx_position, plane)
    return float(np.linalg.norm(rx_position - image))
