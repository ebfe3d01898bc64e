"""Closed-form antenna orientation recovery from stacked path rows.

Each base-station antenna contributes one complex row
``q_n^T [LoS_n + sum_l NLoS_ln]`` (optionally augmented with per-path
Doppler phase factors); the transmit orientation is the least-squares
solution of the stacked linear system against the measured voltages.
The rigid-body attitude of the handset follows from two or more antenna
orientations via the orthogonal Procrustes solution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import em, geometry
from .em import AntennaPose, Material, SignalConfig
from .geometry import GeometryError, ReflectorPlane


class OrientationError(RuntimeError):
    """Unusable geometry or rank-deficient reconstruction system."""


@dataclass(frozen=True)
class PathTerm:
    """One propagation path for row construction.

    ``plane`` is None for the direct path.  ``doppler`` and ``distance``
    feed the phase factor ``exp(-j D kappa r / c)``; with ``distance``
    None the geometric path length is used.
    """

    plane: Optional[ReflectorPlane] = None
    doppler: float = 0.0
    distance: Optional[float] = None
    material: Optional[Material] = None


@dataclass
class OrientationEstimate:
    direction: np.ndarray
    raw: np.ndarray
    residual: float


def build_path_rows(rx_poses: Sequence[AntennaPose], tx_location,
                    paths: Sequence[PathTerm], cfg: SignalConfig,
                    eval_kappa: Optional[float] = None,
                    ) -> Tuple[np.ndarray, List[int], List[Tuple[int, int, str]]]:
    """One complex 1x3 row per receiving antenna.

    Paths with invalid geometry for a given receiver are omitted from
    that receiver's sum and reported; receivers left with no usable path
    contribute no row.  Returns ``(rows, used_receiver_indices, dropped)``.

    ``eval_kappa`` evaluates the rows at a different subcarrier
    wavenumber while keeping the per-path transformation matrices at the
    carrier: the per-path attenuation is frequency-flat in the channel
    model, so only the linear-in-kappa amplitude and the propagation
    phase move with the subcarrier.
    """
    tx_location = np.asarray(tx_location, dtype=float)
    rows = []
    used: List[int] = []
    dropped: List[Tuple[int, int, str]] = []
    for n, rx in enumerate(rx_poses):
        total = np.zeros((3, 3), dtype=complex)
        n_terms = 0
        for j, term in enumerate(paths):
            try:
                m = em.path_matrix(tx_location, rx.position, term.plane, cfg,
                                   term.material)
            except (GeometryError, ValueError) as exc:
                dropped.append((n, j, str(exc)))
                continue
            kap = cfg.kappa if eval_kappa is None else float(eval_kappa)
            r = term.distance
            if r is None and (term.doppler != 0.0 or eval_kappa is not None):
                r = em.path_length(tx_location, rx.position, term.plane)
            if eval_kappa is not None:
                m = m * (kap / cfg.kappa) * np.exp(-1j * (kap - cfg.kappa) * r)
            if term.doppler != 0.0:
                phase = -1j * term.doppler * kap * r / em.SPEED_OF_LIGHT
                m = m * np.exp(phase)
            total = total + m
            n_terms += 1
        if n_terms == 0:
            continue
        rows.append(rx.orientation @ total)
        used.append(n)
    if not rows:
        raise OrientationError("no receiver has a usable path set")
    return np.array(rows), used, dropped


def reconstruct_orientation(voltages, rows, method: str = "real_ls",
                            ) -> OrientationEstimate:
    """Least-squares transmit orientation from measured voltages.

    ``real_ls`` solves the real-parameter least squares over the stacked
    real/imaginary system (QR based, well conditioned).  ``complex_normal``
    evaluates the literal normal-equations form
    ``Re{(Path^T Path)^-1 Path^T V}`` (plain transposes, no conjugation)
    for fidelity comparisons.  The returned direction is the raw solution
    normalized to unit length.
    """
    v = np.asarray(voltages, dtype=complex)
    a = np.asarray(rows, dtype=complex)
    if a.shape[0] < 3:
        raise OrientationError("need at least 3 path rows")
    if a.shape[0] != v.size:
        raise ValueError("row count and voltage count differ")
    if method == "real_ls":
        a_s = np.concatenate([a.real, a.imag])
        v_s = np.concatenate([v.real, v.imag])
        if np.linalg.cond(a_s) > 1e12:
            raise OrientationError("rank-deficient path matrix "
                                   f"(cond={np.linalg.cond(a_s):.3e})")
        raw, *_ = np.linalg.lstsq(a_s, v_s, rcond=None)
    elif method == "complex_normal":
        gram = a.T @ a
        if np.linalg.cond(gram) > 1e12:
            raise OrientationError("rank-deficient path matrix "
                                   f"(cond={np.linalg.cond(gram):.3e})")
        raw = np.real(np.linalg.solve(gram, a.T @ v))
    else:
        raise ValueError(f"unknown method {method!r}")
    norm = np.linalg.norm(raw)
    if norm == 0.0:
        raise OrientationError("degenerate zero solution")
    residual = float(np.linalg.norm(v - a @ raw))
    return OrientationEstimate(direction=raw / norm, raw=raw, residual=residual)


def angular_error(p_est, p_true) -> float:
    """Angle between two unit vectors, degrees."""
    c = float(np.clip(np.dot(np.asarray(p_est, float), np.asarray(p_true, float)),
                      -1.0, 1.0))
    return math.degrees(math.acos(c))


def ue_orientation(est_orientations: Sequence[np.ndarray],
                   layout_orientations: Sequence[np.ndarray]) -> np.ndarray:
    """Proper rotation mapping body-frame antenna orientations onto the
    estimated world-frame ones (Procrustes / SVD with det correction)."""
    est = np.asarray(est_orientations, dtype=float)
    lay = np.asarray(layout_orientations, dtype=float)
    if est.shape[0] < 2 or est.shape != lay.shape:
        raise OrientationError("need at least two orientation pairs")
    crosses = [np.linalg.norm(np.cross(lay[i], lay[j]))
               for i in range(len(lay)) for j in range(i + 1, len(lay))]
    if max(crosses) <= 1e-6:
        raise OrientationError("all layout orientations are parallel")
    b = est.T @ lay
    u, _, vt = np.linalg.svd(b)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt
