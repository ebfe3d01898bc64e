"""Ground-truth OFDM channel synthesis.

Per-path parameters {mu, r, D} are derived from the EM voltage model so
that the subcarrier channel ``I_in sum mu k_i exp(-j k_i r) exp(-j D k_i r/c)``
reproduces the induced voltage at the carrier.  Noise is injected relative
to the would-be direct-path strength, even when that path is blocked.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import em, geometry
from .em import AntennaPose, Material, SignalConfig
from .geometry import GeometryError, ReflectorPlane


@dataclass(frozen=True)
class SubcarrierGrid:
    """OFDM frequency plan: ``omega_i = omega + 2 pi delta_f i``.

    ``allocation`` maps a transmitting-antenna index to the (pairwise
    disjoint) subcarrier indices it occupies on the uplink.
    """

    omega: float
    delta_f: float
    n_subcarriers: int
    allocation: Dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        alloc = {k: np.asarray(v, dtype=int) for k, v in self.allocation.items()}
        seen = set()
        for k, idx in alloc.items():
            if idx.size and (idx.min() < 0 or idx.max() >= self.n_subcarriers):
                raise ValueError(f"allocation for antenna {k} outside the grid")
            s = set(idx.tolist())
            if seen & s:
                raise ValueError("subcarrier allocations overlap")
            seen |= s
        object.__setattr__(self, "allocation", alloc)

    def angular_frequency(self, index) -> np.ndarray:
        return self.omega + 2.0 * math.pi * self.delta_f * np.asarray(index, dtype=float)

    def kappa(self, index) -> np.ndarray:
        return self.angular_frequency(index) / em.SPEED_OF_LIGHT

    @property
    def all_indices(self) -> np.ndarray:
        return np.arange(self.n_subcarriers)

    def center_index(self, tx_index: Optional[int] = None) -> int:
        idx = self.all_indices if tx_index is None else self.allocation[tx_index]
        return int(idx[len(idx) // 2])

    @classmethod
    def split_evenly(cls, omega: float, delta_f: float, n_subcarriers: int,
                     tx_indices: Sequence[int]) -> "SubcarrierGrid":
        """Contiguous equal shares for the transmitting antennas."""
        m = len(tx_indices)
        share = n_subcarriers // m
        alloc = {k: np.arange(j * share, (j + 1) * share)
                 for j, k in enumerate(tx_indices)}
        return cls(omega, delta_f, n_subcarriers, alloc)


@dataclass(frozen=True)
class PathParams:
    """One propagation path: complex attenuation, length, Doppler speed.

    ``reflector_id`` is None (and ``alpha`` is None) for the direct path.
    """

    mu: complex
    r: float
    doppler: float = 0.0
    alpha: Optional[float] = None
    reflector_id: Optional[int] = None

    def __post_init__(self):
        if self.r <= 0.0:
            raise ValueError("path length must be positive")
        if abs(self.doppler) >= em.SPEED_OF_LIGHT:
            raise ValueError("Doppler projection speed must be below c")

    @property
    def is_los(self) -> bool:
        return self.reflector_id is None and self.alpha is None


@dataclass
class ChannelVector:
    """Complex channel samples of one (tx, rx) pair on a subcarrier set."""

    samples: np.ndarray
    tx_index: int
    rx_index: int
    subcarriers: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=complex)
        self.subcarriers = np.asarray(self.subcarriers, dtype=int)
        if self.samples.shape != self.subcarriers.shape:
            raise ValueError("samples and subcarrier index arrays differ in length")


def doppler_projection(v, e, omega: float) -> Tuple[float, float]:
    """Projection speed ``D = v . e`` and shift ``nu = D omega / c``."""
    v = np.asarray(v, dtype=float)
    if np.linalg.norm(v) >= em.SPEED_OF_LIGHT:
        raise ValueError("speed must be below c")
    d = float(np.dot(v, np.asarray(e, dtype=float)))
    return d, d * omega / em.SPEED_OF_LIGHT


def channel_sample(paths: Sequence[PathParams], kappa_i, i_in: float = 1.0):
    """Multipath channel at wavenumber(s) ``kappa_i``.

    ``I_in sum_l mu_l k_i exp(-j k_i r_l) exp(-j D_l k_i r_l / c)``.
    """
    kappa_i = np.asarray(kappa_i, dtype=float)
    if np.any(kappa_i <= 0.0):
        raise ValueError("wavenumber must be positive")
    out = np.zeros(kappa_i.shape, dtype=complex)
    for p in paths:
        r_eff = p.r * (1.0 + p.doppler / em.SPEED_OF_LIGHT)
        out = out + p.mu * kappa_i * np.exp(-1j * kappa_i * r_eff)
    out = i_in * out
    return complex(out) if out.shape == () else out


def path_mu(tx: AntennaPose, rx: AntennaPose, plane: Optional[ReflectorPlane],
            cfg: SignalConfig, material: Optional[Material] = None) -> complex:
    """Complex attenuation of one path, consistent with the voltage model.

    Defined so that ``I_in mu kappa exp(-j kappa r)`` equals the induced
    voltage ``q^T M p`` at the carrier.
    """
    m = em.path_matrix(tx.position, rx.position, plane, cfg, material)
    r = em.path_length(tx.position, rx.position, plane)
    v = complex(rx.orientation @ m @ tx.orientation)
    return v * np.exp(1j * cfg.kappa * r) / (cfg.i_in * cfg.kappa)


def ground_truth_paths(tx: AntennaPose, rx: AntennaPose, v_tx,
                       reflectors: Sequence[ReflectorPlane], blocked_los: bool,
                       cfg: SignalConfig,
                       reflector_ids: Optional[Sequence[int]] = None) -> List[PathParams]:
    """Per-path {mu, r, D} for one antenna pair.

    One direct path (unless blocked) plus one single-bounce path per
    reflector with valid reflection geometry; invalid reflectors are
    skipped.  The Doppler speed is the velocity projected on the departure
    direction of each path.
    """
    v_tx = np.zeros(3) if v_tx is None else np.asarray(v_tx, dtype=float)
    ids = list(reflector_ids) if reflector_ids is not None else list(range(len(reflectors)))
    paths: List[PathParams] = []
    if not blocked_los:
        e_tx = geometry.unit_radius(tx.position, rx.position)
        d, _ = doppler_projection(v_tx, e_tx, cfg.omega)
        paths.append(PathParams(
            mu=path_mu(tx, rx, None, cfg),
            r=em.path_length(tx.position, rx.position, None),
            doppler=d))
    for rid, plane in zip(ids, reflectors):
        try:
            K, alpha = geometry.reflection_point(tx.position, rx.position, plane)
            mu = path_mu(tx, rx, plane, cfg)
        except (GeometryError, ValueError):
            continue
        e_b = geometry.unit_radius(tx.position, K)
        d, _ = doppler_projection(v_tx, e_b, cfg.omega)
        paths.append(PathParams(
            mu=mu, r=em.path_length(tx.position, rx.position, plane),
            doppler=d, alpha=alpha, reflector_id=rid))
    return paths


def los_reference_magnitude(tx: AntennaPose, rx: AntennaPose, cfg: SignalConfig) -> float:
    """Would-be direct-path channel magnitude at the carrier.

    Used as the noise reference even when the direct path is blocked.
    """
    mu = path_mu(tx, rx, None, cfg)
    return abs(cfg.i_in * mu * cfg.kappa)


@dataclass
class Scene:
    """Inputs for synthesizing the measured uplink of one snapshot.

    ``visible(k, n) -> (include_los, reflector_ids)`` restricts the path
    set per antenna pair (reflector extent checks live in the scenario
    layer); by default every reflector contributes and the direct path
    follows ``blocked_los``.
    """

    tx_poses: Sequence[AntennaPose]
    tx_velocities: Sequence[np.ndarray]
    rx_poses: Sequence[AntennaPose]
    reflectors: Sequence[ReflectorPlane]
    cfg: SignalConfig
    blocked_los: bool = False
    visible: Optional[Callable[[int, int], Tuple[bool, Sequence[int]]]] = None

    def paths_for(self, k: int, n: int) -> List[PathParams]:
        if self.visible is not None:
            include_los, ids = self.visible(k, n)
        else:
            include_los, ids = (not self.blocked_los), range(len(self.reflectors))
        planes = [self.reflectors[i] for i in ids]
        return ground_truth_paths(self.tx_poses[k], self.rx_poses[n],
                                  self.tx_velocities[k], planes,
                                  not include_los, self.cfg, reflector_ids=ids)


def synthesize_measured(scene: Scene, grid: SubcarrierGrid, snr_db: float,
                        seed: int = 0) -> List[ChannelVector]:
    """Noisy uplink channels for every (tx, rx) pair on its allocation.

    Noise is i.i.d. circular complex Gaussian with variance
    ``|H_los_ref|^2 10^(-snr/10)``; ``snr_db = inf`` disables it.  The
    random stream is derived per (tx, rx) pair from ``seed`` so output is
    reproducible and order-independent.
    """
    if not math.isfinite(snr_db) and snr_db < 0:
        raise ValueError("snr_db must be finite or +inf")
    out: List[ChannelVector] = []
    for k in sorted(grid.allocation):
        idx = grid.allocation[k]
        kappas = grid.kappa(idx)
        for n in range(len(scene.rx_poses)):
            samples = channel_sample(scene.paths_for(k, n), kappas, scene.cfg.i_in)
            if math.isfinite(snr_db):
                ref = los_reference_magnitude(scene.tx_poses[k], scene.rx_poses[n],
                                              scene.cfg)
                sigma2 = ref ** 2 * 10.0 ** (-snr_db / 10.0)
                rng = np.random.default_rng(
                    np.random.SeedSequence(seed, spawn_key=(k, n)))
                noise = rng.normal(scale=math.sqrt(sigma2 / 2.0), size=(2, idx.size))
                samples = samples + noise[0] + 1j * noise[1]
            out.append(ChannelVector(samples, tx_index=k, rx_index=n, subcarriers=idx))
    return out


def save_channels_csv(vectors: Sequence[ChannelVector], path) -> None:
    """CSV with columns (tx, rx, subcarrier_index, re, im)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tx", "rx", "subcarrier_index", "re", "im"])
        for v in vectors:
            for i, s in zip(v.subcarriers, v.samples):
                w.writerow([v.tx_index, v.rx_index, int(i),
                            f"{s.real:.17g}", f"{s.imag:.17g}"])


def load_channels_csv(path) -> List[ChannelVector]:
    rows: Dict[Tuple[int, int], List[Tuple[int, complex]]] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            key = (int(rec["tx"]), int(rec["rx"]))
            rows.setdefault(key, []).append(
                (int(rec["subcarrier_index"]),
                 float(rec["re"]) + 1j * float(rec["im"])))
    out = []
    for (k, n), items in sorted(rows.items()):
        items.sort()
        out.append(ChannelVector(np.array([s for _, s in items]),
                                 tx_index=k, rx_index=n,
                                 subcarriers=np.array([i for i, _ in items])))
    return out
