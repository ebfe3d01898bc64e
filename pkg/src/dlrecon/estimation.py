"""Inverse stage 1: multipath parameter extraction and localization.

From measured uplink channel vectors this module recovers per-path
complex attenuations and effective lengths ``r + D r / c`` by damped
nonlinear least squares, separates distance from Doppler using two
estimations a short gap apart, multilaterates transmitter and image
locations from per-receiver distances, and derives reflector planes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import least_squares

from . import geometry
from .channel import ChannelVector, SubcarrierGrid
from .em import SPEED_OF_LIGHT
from .geometry import GeometryError, ReflectorPlane


class EstimationError(RuntimeError):
    """Solver failure; carries the best-so-far result when available."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class EstimationConfig:
    """Nonlinear least-squares settings for path extraction."""

    max_iterations: int = 60
    residual_tolerance: float = 1e-10
    damping_init: float = 1e-3
    damping_scale: float = 10.0
    delay_grid_resolution: Optional[float] = None  # meters; default c/(2 B)
    r_min: float = 1.0
    r_max: float = 500.0
    refine_rounds: int = 1
    # A fit whose relative residual lands below this is a success even if
    # the solver has not reached a stationary point: near-degenerate path
    # pairs make the final approach arbitrarily slow.
    success_residual: float = 1e-8

    def __post_init__(self):
        if self.residual_tolerance <= 0 or self.damping_init <= 0:
            raise ValueError("tolerances and damping must be positive")


@dataclass(frozen=True)
class RawPathEstimate:
    """One extracted path: complex attenuation and the combined
    delay-equivalent length ``r_eff = r + D r / c``."""

    mu: complex
    r_eff: float

    def __post_init__(self):
        if self.r_eff <= 0.0:
            raise ValueError("effective path length must be positive")


@dataclass
class PathFit:
    """Extraction result for one (tx, rx) pair."""

    estimates: List[RawPathEstimate]
    residual: float
    iterations: int
    converged: bool


@dataclass
class LMResult:
    x: np.ndarray
    residual_norm: float
    iterations: int
    converged: bool
    cost_history: List[float] = field(default_factory=list)


def levenberg_marquardt(residual, jacobian, x0, max_iterations: int = 100,
                        damping_init: float = 1e-3, damping_scale: float = 10.0,
                        tolerance: float = 1e-14) -> LMResult:
    """Damped Gauss-Newton with Marquardt diagonal scaling.

    Steps that increase the residual norm are rejected and the damping
    raised, so the accepted objective sequence is non-increasing.
    """
    x = np.asarray(x0, dtype=float).copy()
    lam = damping_init
    r = residual(x)
    cost = float(np.dot(r, r))
    history = [cost]
    it = 0
    converged = False
    for it in range(1, max_iterations + 1):
        J = jacobian(x)
        g = J.T @ r
        # Scale-invariant first-order test: an absolute threshold would
        # declare victory early on tiny-residual but ill-conditioned fits.
        g_scale = float(np.max(np.abs(J), initial=0.0)) * math.sqrt(cost)
        if np.linalg.norm(g, np.inf) <= tolerance * g_scale:
            converged = True
            break
        JtJ = J.T @ J
        diag = np.clip(np.diag(JtJ), 1e-30, None)
        accepted = False
        for _ in range(25):
            try:
                step = np.linalg.solve(JtJ + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= damping_scale
                continue
            x_new = x + step
            r_new = residual(x_new)
            cost_new = float(np.dot(r_new, r_new))
            if cost_new <= cost:
                rel_drop = (cost - cost_new) / max(cost, 1e-300)
                step_small = np.linalg.norm(step) <= 1e-14 * (1.0 + np.linalg.norm(x))
                x, r, cost = x_new, r_new, cost_new
                lam = max(lam / damping_scale, 1e-14)
                accepted = True
                if rel_drop < tolerance or step_small:
                    converged = True
                break
            lam *= damping_scale
        if not accepted:
            # Damping exhausted without a downhill step: stationary point
            # within numerical precision.
            converged = True
            break
        history.append(cost)
        if converged:
            break
    return LMResult(x=x, residual_norm=math.sqrt(cost), iterations=it,
                    converged=converged, cost_history=history)


# ---------------------------------------------------------------------------
# Multipath extraction
# ---------------------------------------------------------------------------

def _model(x: np.ndarray, kappas: np.ndarray, i_in: float) -> np.ndarray:
    mu = x[0::3] + 1j * x[1::3]
    rho = x[2::3]
    basis = i_in * kappas[:, None] * np.exp(-1j * np.outer(kappas, rho))
    return basis @ mu


def fit_residual(x: np.ndarray, samples: np.ndarray, kappas: np.ndarray,
                 i_in: float) -> np.ndarray:
    """Stacked real/imaginary residual of the multipath channel model."""
    d = samples - _model(x, kappas, i_in)
    return np.concatenate([d.real, d.imag])


def fit_jacobian(x: np.ndarray, samples: np.ndarray, kappas: np.ndarray,
                 i_in: float) -> np.ndarray:
    """Analytic Jacobian of :func:`fit_residual` w.r.t. (Re mu, Im mu, r_eff)."""
    mu = x[0::3] + 1j * x[1::3]
    rho = x[2::3]
    a = i_in * kappas[:, None] * np.exp(-1j * np.outer(kappas, rho))
    n_paths = mu.size
    cols = np.empty((kappas.size, 3 * n_paths), dtype=complex)
    cols[:, 0::3] = -a
    cols[:, 1::3] = -1j * a
    cols[:, 2::3] = 1j * kappas[:, None] * mu[None, :] * a
    return np.concatenate([cols.real, cols.imag])


# Internal solver parametrization: the complex amplitude is referenced to
# the band-center phase, mu_c = mu exp(-j kc rho).  In the raw (mu, rho)
# coordinates a delay step whirls the carrier phase (~50 rad/m at 2.4 GHz),
# leaving a stiff valley the solver can only crawl along; centering removes
# that direction so convergence is quadratic.  The public residual /
# Jacobian keep the raw parametrization.

def _center(x: np.ndarray, kc: float) -> np.ndarray:
    mu = (x[0::3] + 1j * x[1::3]) * np.exp(-1j * kc * x[2::3])
    out = x.copy()
    out[0::3], out[1::3] = mu.real, mu.imag
    return out


def _uncenter(x: np.ndarray, kc: float) -> np.ndarray:
    mu = (x[0::3] + 1j * x[1::3]) * np.exp(1j * kc * x[2::3])
    out = x.copy()
    out[0::3], out[1::3] = mu.real, mu.imag
    return out


def _model_centered(x: np.ndarray, kappas: np.ndarray, kc: float,
                    i_in: float) -> np.ndarray:
    mu = x[0::3] + 1j * x[1::3]
    rho = x[2::3]
    basis = i_in * kappas[:, None] * np.exp(-1j * np.outer(kappas - kc, rho))
    return basis @ mu


def _resid_centered(x, samples, kappas, kc, i_in):
    d = samples - _model_centered(x, kappas, kc, i_in)
    return np.concatenate([d.real, d.imag])


def _jac_centered(x, samples, kappas, kc, i_in):
    mu = x[0::3] + 1j * x[1::3]
    rho = x[2::3]
    a = i_in * kappas[:, None] * np.exp(-1j * np.outer(kappas - kc, rho))
    cols = np.empty((kappas.size, x.size), dtype=complex)
    cols[:, 0::3] = -a
    cols[:, 1::3] = -1j * a
    cols[:, 2::3] = 1j * (kappas - kc)[:, None] * mu[None, :] * a
    return np.concatenate([cols.real, cols.imag])


def _grid_pick(resid: np.ndarray, kappas: np.ndarray, i_in: float,
               rho_grid: np.ndarray) -> Tuple[float, complex]:
    """Best single-path (rho, mu) on a coarse delay grid by correlation."""
    basis = i_in * kappas[:, None] * np.exp(-1j * np.outer(kappas, rho_grid))
    corr = basis.conj().T @ resid
    energy = np.sum(np.abs(basis) ** 2, axis=0)
    score = np.abs(corr) ** 2 / energy
    j = int(np.argmax(score))
    return float(rho_grid[j]), complex(corr[j] / energy[j])


def _two_stage_pick(resid, kappas, i_in, rho_grid,
                    coarse_step: float) -> Tuple[float, complex]:
    """Coarse envelope scan followed by a local scan at sub-wavelength
    spacing; the joint solver is only locally convergent in the delay
    because the carrier phase rotates on the wavelength scale."""
    rho0, _ = _grid_pick(resid, kappas, i_in, rho_grid)
    lam = 2.0 * math.pi / float(np.mean(kappas))
    fine = np.arange(rho0 - coarse_step, rho0 + coarse_step, lam / 8.0)
    fine = fine[fine > 0.0]
    return _grid_pick(resid, kappas, i_in, fine)


def _matrix_pencil_init(samples: np.ndarray, kappas: np.ndarray,
                        n_paths: int, i_in: float) -> Optional[np.ndarray]:
    """Closed-form delay initialization by the matrix-pencil method.

    ``samples / (i_in kappa_i)`` is a sum of complex exponentials on the
    uniform wavenumber ladder, so the delays follow from the shift
    invariance of the Hankel signal subspace; amplitudes then come from a
    linear solve.  Returns ``None`` when the ladder is not uniform or the
    sample count is too small.
    """
    n = samples.size
    dk = np.diff(kappas)
    if n < 4 * n_paths or dk.size == 0 or np.ptp(dk) > 1e-9 * abs(dk[0]):
        return None
    step = float(dk[0])
    g = samples / (i_in * kappas)
    p = n // 2
    if min(n - p, p + 1) <= n_paths:
        return None
    hank = np.lib.stride_tricks.sliding_window_view(g, p + 1)
    u, s, _ = np.linalg.svd(hank, full_matrices=False)
    basis = u[:, :n_paths]
    try:
        shift = np.linalg.lstsq(basis[:-1], basis[1:], rcond=None)[0]
    except np.linalg.LinAlgError:
        return None
    z = np.linalg.eigvals(shift)
    period = 2.0 * math.pi / abs(step)
    rho = (-np.angle(z) / step) % period
    if np.any(~np.isfinite(rho)) or np.any(rho <= 0.0):
        return None
    vand = z[None, :] ** np.arange(n)[:, None]
    b = np.linalg.lstsq(vand, g, rcond=None)[0]
    mu = b * np.exp(1j * kappas[0] * rho)
    x = np.empty(3 * n_paths)
    x[0::3], x[1::3], x[2::3] = mu.real, mu.imag, rho
    return x


def _single_refine(resid, kappas, i_in, rho0, mu0, cfg) -> Tuple[complex, float]:
    kc = float(np.mean(kappas))
    x0 = _center(np.array([mu0.real, mu0.imag, rho0]), kc)
    res = levenberg_marquardt(
        lambda x: _resid_centered(x, resid, kappas, kc, i_in),
        lambda x: _jac_centered(x, resid, kappas, kc, i_in),
        x0, max_iterations=40, damping_init=cfg.damping_init,
        damping_scale=cfg.damping_scale, tolerance=cfg.residual_tolerance)
    x = _uncenter(res.x, kc)
    return complex(x[0], x[1]), float(x[2])


def _practically_stationary(result: LMResult, window: int = 10,
                            rel_gain: float = 1e-3) -> bool:
    """True when the last ``window`` accepted steps improved the objective
    by less than ``rel_gain`` relative: the solver is at the (noise) floor
    even if the strict stationarity test has not fired."""
    h = result.cost_history
    if len(h) < window + 1:
        return False
    tail = h[-(window + 1):]
    return (tail[0] - tail[-1]) <= rel_gain * tail[0]


def fit_paths(samples: np.ndarray, kappas: np.ndarray, n_paths: int,
              i_in: float = 1.0, cfg: EstimationConfig = EstimationConfig(),
              init: Optional[Sequence[RawPathEstimate]] = None) -> PathFit:
    """Extract ``n_paths`` {mu, r_eff} pairs from one channel vector.

    Initialization is a successive-cancellation scan over a coarse delay
    grid unless warm-start estimates are supplied; the joint refinement is
    damped Gauss-Newton with the analytic Jacobian, followed by
    re-estimation rounds in which each path is peeled and re-fit against
    the residual of the others.
    """
    samples = np.asarray(samples, dtype=complex)
    kappas = np.asarray(kappas, dtype=float)
    if n_paths < 1:
        raise ValueError("need at least one path")
    if samples.size < 4 * n_paths:
        raise EstimationError(
            f"ill-posed fit: {samples.size} subcarriers for {n_paths} paths")
    scale = float(np.max(np.abs(samples)))
    if scale == 0.0:
        raise EstimationError("zero channel input; degenerate fit")
    y = samples / scale

    res_band = cfg.delay_grid_resolution
    if res_band is None:
        band = float(kappas.max() - kappas.min())
        res_band = math.pi / band if band > 0 else 1.0
    rho_grid = np.arange(cfg.r_min, cfg.r_max, res_band)

    if init is not None:
        x = np.empty(3 * n_paths)
        for l, est in enumerate(init):
            x[3 * l:3 * l + 3] = [est.mu.real / scale, est.mu.imag / scale, est.r_eff]
    else:
        x = _matrix_pencil_init(y, kappas, n_paths, i_in)
        if x is None:
            # Successive-cancellation scan over the delay grid.
            x = np.empty(3 * n_paths)
            resid = y.copy()
            for l in range(n_paths):
                rho0, mu0 = _two_stage_pick(resid, kappas, i_in, rho_grid,
                                            res_band)
                mu_l, rho_l = _single_refine(resid, kappas, i_in, rho0, mu0, cfg)
                x[3 * l:3 * l + 3] = [mu_l.real, mu_l.imag, rho_l]
                resid = y - _model(x[:3 * (l + 1)], kappas, i_in)

    kc = float(np.mean(kappas))
    total_iter = 0
    result = None
    for round_no in range(cfg.refine_rounds + 1):
        result = levenberg_marquardt(
            lambda v: _resid_centered(v, y, kappas, kc, i_in),
            lambda v: _jac_centered(v, y, kappas, kc, i_in),
            _center(x, kc), max_iterations=cfg.max_iterations,
            damping_init=cfg.damping_init, damping_scale=cfg.damping_scale,
            tolerance=cfg.residual_tolerance)
        x = _uncenter(result.x, kc)
        total_iter += result.iterations
        if round_no == cfg.refine_rounds:
            break
        if result.converged or _practically_stationary(result) or \
                result.residual_norm <= cfg.success_residual * np.linalg.norm(y):
            break
        # Peel-and-refit pass to escape merged-path initializations.
        for l in range(n_paths):
            others = np.delete(x, slice(3 * l, 3 * l + 3))
            resid = y - _model(others, kappas, i_in) if others.size else y.copy()
            rho0, mu0 = _two_stage_pick(resid, kappas, i_in, rho_grid, res_band)
            mu_l, rho_l = _single_refine(resid, kappas, i_in, rho0, mu0, cfg)
            x[3 * l:3 * l + 3] = [mu_l.real, mu_l.imag, rho_l]

    # Nearly coincident paths can drive one component's length negative
    # (the model order exceeds what the data can support).  Drop such
    # components and refit at reduced order instead of failing outright.
    keep = [l for l in range(n_paths) if float(x[3 * l + 2]) > 0.0]
    if not keep:
        raise EstimationError("fit produced no positive path length",
                              best=None)
    if len(keep) < n_paths:
        reduced = [RawPathEstimate(mu=complex(x[3 * l], x[3 * l + 1]) * scale,
                                   r_eff=float(x[3 * l + 2])) for l in keep]
        return fit_paths(samples, kappas, len(keep), i_in=i_in, cfg=cfg,
                         init=reduced)
    estimates = []
    for l in range(n_paths):
        rho = float(x[3 * l + 2])
        mu = complex(x[3 * l], x[3 * l + 1]) * scale
        estimates.append(RawPathEstimate(mu=mu, r_eff=rho))
    estimates.sort(key=lambda e: e.r_eff)
    ok = result.converged or _practically_stationary(result) or (
        result.residual_norm <= cfg.success_residual * np.linalg.norm(y))
    fit = PathFit(estimates=estimates, residual=result.residual_norm * scale,
                  iterations=total_iter, converged=ok)
    if not ok:
        raise EstimationError("path extraction did not converge", best=fit)
    return fit


def extract_raw_paths(measured: Sequence[ChannelVector], grid: SubcarrierGrid,
                      n_paths, cfg: EstimationConfig = EstimationConfig(),
                      i_in: float = 1.0,
                      warm_start: Optional[Dict[Tuple[int, int], PathFit]] = None,
                      ) -> Dict[Tuple[int, int], PathFit]:
    """Fit every measured (tx, rx) channel vector independently.

    ``n_paths`` is either a single model order or a mapping from
    (tx, rx) to the per-pair order.
    """
    out: Dict[Tuple[int, int], PathFit] = {}
    for vec in measured:
        key = (vec.tx_index, vec.rx_index)
        order = n_paths[key] if isinstance(n_paths, dict) else int(n_paths)
        kappas = grid.kappa(vec.subcarriers)
        init = None
        if warm_start is not None and key in warm_start:
            ws = warm_start[key].estimates
            if len(ws) == order:
                init = ws
        out[key] = fit_paths(vec.samples, kappas, order, i_in=i_in, cfg=cfg,
                             init=init)
    return out


# ---------------------------------------------------------------------------
# Doppler separation
# ---------------------------------------------------------------------------

def separate_doppler(est_t1: RawPathEstimate, est_t2: RawPathEstimate,
                     tau: float) -> Tuple[float, float]:
    """Split the combined estimate into (r, D).

    The second estimation, a gap ``tau`` later, differs by ``D tau``;
    the distance then solves ``r_eff = r (1 + D / c)``.
    """
    if tau <= 0.0:
        raise ValueError("time gap must be positive")
    d = (est_t1.r_eff - est_t2.r_eff) / tau
    r = est_t1.r_eff / (1.0 + d / SPEED_OF_LIGHT)
    return r, d


def pair_estimates(fit1: PathFit, fit2: PathFit) -> List[Tuple[RawPathEstimate, RawPathEstimate]]:
    """Associate the two estimations' paths by nearest effective length."""
    taken = [False] * len(fit2.estimates)
    pairs = []
    # Strongest paths claim their partners first; if the fits disagree on
    # the model order (a degenerate component was dropped), the weakest
    # leftovers simply stay unpaired.
    for e1 in sorted(fit1.estimates, key=lambda e: -abs(e.mu)):
        best, best_gap = None, math.inf
        for j, e2 in enumerate(fit2.estimates):
            if taken[j]:
                continue
            gap = abs(e1.r_eff - e2.r_eff)
            if gap < best_gap:
                best, best_gap = j, gap
        if best is None:
            break
        taken[best] = True
        pairs.append((e1, fit2.estimates[best]))
    if not pairs:
        raise EstimationError("cannot pair path estimates across estimations")
    return pairs


# ---------------------------------------------------------------------------
# Localization
# ---------------------------------------------------------------------------

def localize_point(distances, rx_positions, front_direction=None) -> np.ndarray:
    """Point minimizing ``sum (|x - a_n| - r_n)^2`` over the receivers.

    Seeded by the linearized difference-of-squares solution; with a planar
    receiver array the out-of-plane depth is recovered from the distance
    surplus and its sign fixed by ``front_direction`` (unit vector into
    the half-space in front of the array).
    """
    r = np.asarray(distances, dtype=float)
    a = np.asarray(rx_positions, dtype=float)
    if a.shape[0] < 4:
        raise EstimationError("localization needs at least 4 receivers")
    if a.shape[0] != r.size:
        raise ValueError("distances and receiver positions differ in length")

    A = 2.0 * (a[1:] - a[0])
    b = (np.sum(a[1:] ** 2, axis=1) - np.sum(a[0] ** 2)) - (r[1:] ** 2 - r[0] ** 2)
    U, S, Vt = np.linalg.svd(A, full_matrices=False)
    if S[0] <= 0 or S[1] / S[0] < 1e-12:
        raise EstimationError(
            f"ill-conditioned receiver geometry (singular values {S})")
    planar = S[2] / S[0] < 1e-8
    rank = 2 if planar else 3
    x0 = Vt[:rank].T @ ((U[:, :rank].T @ b) / S[:rank])

    if planar:
        n = Vt[2]
        c = np.mean(np.sum((x0 - a) ** 2, axis=1) - r ** 2)
        p = float(np.dot(n, x0 - np.mean(a, axis=0)))
        disc = p ** 2 - c
        t = math.sqrt(disc) if disc > 0 else 0.0
        if front_direction is not None and np.dot(n, front_direction) < 0:
            n = -n
        candidates = [x0 + t * n, x0 - t * n] if front_direction is None else [x0 + t * n]
    else:
        candidates = [x0]

    def resid(x):
        return np.linalg.norm(x[None, :] - a, axis=1) - r

    def jac(x):
        d = x[None, :] - a
        return d / np.linalg.norm(d, axis=1)[:, None]

    best = None
    for x_init in candidates:
        sol = least_squares(resid, x_init, jac=jac, method="lm",
                            xtol=1e-15, ftol=1e-15, gtol=1e-15)
        if best is None or sol.cost < best.cost:
            best = sol
    x = best.x
    if front_direction is not None:
        fd = np.asarray(front_direction, dtype=float)
        if np.dot(x - np.mean(a, axis=0), fd) < 0:
            # Mirror through the array plane and re-polish.
            n = Vt[2] if planar else fd / np.linalg.norm(fd)
            centroid = np.mean(a, axis=0)
            x_m = x - 2.0 * np.dot(x - centroid, n) * n
            sol = least_squares(resid, x_m, jac=jac, method="lm",
                                xtol=1e-15, ftol=1e-15, gtol=1e-15)
            if np.dot(sol.x - centroid, fd) > 0:
                x = sol.x
    return x


def derive_reflector(tx_loc, image_loc, material=None) -> ReflectorPlane:
    """Reflector plane bisecting the transmitter / image segment."""
    return geometry.plane_from_point_and_image(tx_loc, image_loc, material=material)


def incidence_angles(plane: ReflectorPlane, tx_loc, rx_positions) -> List[Optional[float]]:
    """Per-receiver incidence angle; ``None`` flags invalid geometry."""
    out: List[Optional[float]] = []
    for rx in rx_positions:
        try:
            _, alpha = geometry.reflection_point(tx_loc, rx, plane)
            out.append(alpha)
        except GeometryError:
            out.append(None)
    return out


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    z = 1.0 - 2.0 * i / n
    s = np.sqrt(1.0 - z ** 2)
    return np.column_stack([s * np.cos(phi), s * np.sin(phi), z])


def localize_tx_pair_from_images(images_a: Sequence[np.ndarray],
                                 images_b: Sequence[np.ndarray]):
    """Recover two transmitter locations from their per-reflector images.

    Used when no direct path exists: mirror images of the two antennas
    across the same (unknown) planes are available, and each plane must be
    the perpendicular bisector of both antenna/image segments at once.
    A search over the inter-antenna direction yields line intersections
    for both antennas; the best candidate is polished by nonlinear least
    squares on the joint mirror-consistency residual.

    Returns ``(x_a, x_b, residual_norm)``.
    """
    ya = np.asarray(images_a, dtype=float)
    yb = np.asarray(images_b, dtype=float)
    L = ya.shape[0]
    if L < 2 or yb.shape[0] != L:
        raise EstimationError("need at least two common reflections per antenna")
    d = ya - yb
    sep = float(np.mean(np.linalg.norm(d, axis=1)))
    if sep < 1e-9:
        raise EstimationError("image pairs coincide; antennas not separable")

    def lines_intersection(points, dirs):
        A = np.zeros((3, 3))
        b = np.zeros(3)
        for p, u in zip(points, dirs):
            P = np.eye(3) - np.outer(u, u)
            A += P
            b += P @ p
        return np.linalg.solve(A, b)

    best = None
    for u in _fibonacci_sphere(512):
        delta = sep * u
        w = delta[None, :] - d
        norms = np.linalg.norm(w, axis=1)
        if np.any(norms < 1e-6 * sep):
            continue
        normals = w / norms[:, None]
        try:
            xa = lines_intersection(ya, normals)
            xb = lines_intersection(yb, normals)
        except np.linalg.LinAlgError:
            continue
        # Line-fit residuals: each image must sit on its antenna's line.
        da = ya - xa
        db = yb - xb
        score = float(np.sum((xa - xb - delta) ** 2))
        score += float(np.sum((da - np.sum(da * normals, axis=1)[:, None] * normals) ** 2))
        score += float(np.sum((db - np.sum(db * normals, axis=1)[:, None] * normals) ** 2))
        if best is None or score < best[0]:
            best = (score, xa, xb)
    if best is None:
        raise EstimationError("no viable inter-antenna direction found")

    def resid(x):
        xa, xb = x[:3], x[3:]
        out = np.empty(6 * L)
        for l in range(L):
            try:
                pl = geometry.plane_from_point_and_image(xa, ya[l])
                out[6 * l:6 * l + 3] = geometry.mirror_point(xb, pl) - yb[l]
            except GeometryError:
                out[6 * l:6 * l + 3] = 1e3
            try:
                pl = geometry.plane_from_point_and_image(xb, yb[l])
                out[6 * l + 3:6 * l + 6] = geometry.mirror_point(xa, pl) - ya[l]
            except GeometryError:
                out[6 * l + 3:6 * l + 6] = 1e3
        return out

    x0 = np.concatenate([best[1], best[2]])
    sol = least_squares(resid, x0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15,
                        max_nfev=4000)
    return sol.x[:3], sol.x[3:], float(np.linalg.norm(sol.fun))


def save_estimates_csv(path, rows) -> None:
    """Estimation report: rows of
    (k, n, l, re_mu, im_mu, r_eff, r, D, residual, iterations, converged)."""
    header = ["k", "n", "l", "re_mu", "im_mu", "r_eff", "r", "D",
              "residual", "iterations", "converged"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(row)
