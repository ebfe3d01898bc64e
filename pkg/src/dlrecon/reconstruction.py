"""Inverse stage 2: non-transmitting antenna inference and full downlink
channel synthesis.

Given the recovered handset state (center position and attitude) and the
a-priori antenna layout, poses, path geometry, attenuations and Doppler
speeds are inferred for every antenna; the full-grid downlink channel is
synthesized from them and scored against the measured one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from . import channel as chan
from . import em, geometry
from .channel import ChannelVector, PathParams, SubcarrierGrid
from .em import AntennaPose, SignalConfig
from .geometry import GeometryError, ReflectorPlane


class ReconstructionError(RuntimeError):
    """Missing parameters or invalid inputs for channel synthesis."""


@dataclass(frozen=True)
class UELayout:
    """A-priori handset antenna layout in the body frame."""

    offsets: np.ndarray        # (M, 3) meters
    orientations: np.ndarray   # (M, 3) unit vectors
    tx_mask: np.ndarray        # (M,) bool

    def __post_init__(self):
        object.__setattr__(self, "offsets", np.asarray(self.offsets, dtype=float))
        ori = np.asarray(self.orientations, dtype=float)
        ori = ori / np.linalg.norm(ori, axis=1)[:, None]
        object.__setattr__(self, "orientations", ori)
        object.__setattr__(self, "tx_mask", np.asarray(self.tx_mask, dtype=bool))
        if not self.tx_mask.any():
            raise ValueError("at least one antenna must transmit")

    @property
    def n_antennas(self) -> int:
        return self.offsets.shape[0]

    @property
    def tx_indices(self) -> np.ndarray:
        return np.flatnonzero(self.tx_mask)

    @property
    def nontx_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.tx_mask)

    @property
    def mean_tx_offset(self) -> np.ndarray:
        return self.offsets[self.tx_mask].mean(axis=0)

    @classmethod
    def phone(cls, length: float = 0.12, width: float = 0.07) -> "UELayout":
        """Four edge antennas in two parallel pairs; 0 and 1 transmit,
        2 is parallel to 0 and 3 is parallel to 1."""
        hl, hw = length / 2.0, width / 2.0
        offsets = np.array([[-hl, 0.0, 0.0], [0.0, -hw, 0.0],
                            [hl, 0.0, 0.0], [0.0, hw, 0.0]])
        orientations = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0],
                                 [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
        return cls(offsets, orientations, np.array([True, True, False, False]))

    @property
    def parallel_pairing(self) -> Dict[int, int]:
        """Map non-transmitting antenna -> parallel transmitting antenna."""
        pairing = {}
        for j in self.nontx_indices:
            for k in self.tx_indices:
                if abs(np.dot(self.orientations[j], self.orientations[k])) > 1.0 - 1e-9:
                    pairing[int(j)] = int(k)
                    break
        return pairing


@dataclass
class UEState:
    """Handset snapshot: transmit-antenna centroid, attitude, time."""

    cg: np.ndarray
    attitude: np.ndarray   # (3, 3) proper rotation, body -> world
    timestamp: float = 0.0

    def __post_init__(self):
        self.cg = np.asarray(self.cg, dtype=float)
        self.attitude = np.asarray(self.attitude, dtype=float)
        err = np.linalg.norm(self.attitude @ self.attitude.T - np.eye(3))
        if err > 1e-6 or np.linalg.det(self.attitude) < 0:
            raise ValueError("attitude is not a proper rotation")


@dataclass
class VelocityEstimate:
    v_cg: np.ndarray
    angular_velocity: np.ndarray


@dataclass
class PathGeometry:
    """Geometric parameters of one inferred path (no attenuation yet)."""

    r: float
    e_tx: np.ndarray
    alpha: Optional[float] = None
    point: Optional[np.ndarray] = None
    plane: Optional[ReflectorPlane] = None
    reflector_id: Optional[int] = None


def antenna_pose(state: UEState, layout: UELayout, index: int) -> AntennaPose:
    """World-frame pose of any antenna from the handset state."""
    lever = layout.offsets[index] - layout.mean_tx_offset
    return AntennaPose(position=state.cg + state.attitude @ lever,
                       orientation=state.attitude @ layout.orientations[index])


def infer_nontx_poses(state: UEState, layout: UELayout) -> Dict[int, AntennaPose]:
    """World-frame poses of the non-transmitting antennas."""
    return {int(j): antenna_pose(state, layout, int(j))
            for j in layout.nontx_indices}


def infer_path_geometry(pose: AntennaPose, rx: AntennaPose,
                        reflectors: Sequence[ReflectorPlane], blocked_los: bool,
                        reflector_ids: Optional[Sequence[int]] = None,
                        ) -> List[PathGeometry]:
    """Direct and image-method path geometry for one antenna pair.

    Reflectors with invalid reflection geometry are skipped.
    """
    ids = list(reflector_ids) if reflector_ids is not None else list(range(len(reflectors)))
    out: List[PathGeometry] = []
    if not blocked_los:
        out.append(PathGeometry(
            r=float(np.linalg.norm(rx.position - pose.position)),
            e_tx=geometry.unit_radius(pose.position, rx.position)))
    for rid, plane in zip(ids, reflectors):
        try:
            K, alpha = geometry.reflection_point(pose.position, rx.position, plane)
        except GeometryError:
            continue
        image = geometry.mirror_point(pose.position, plane)
        out.append(PathGeometry(
            r=float(np.linalg.norm(rx.position - image)),
            e_tx=geometry.unit_radius(pose.position, K),
            alpha=alpha, point=K, plane=plane, reflector_id=rid))
    return out


def infer_mu(pose: AntennaPose, rx: AntennaPose, geom: PathGeometry,
             cfg: SignalConfig, material=None) -> complex:
    """Complex attenuation for an inferred path, from the voltage model."""
    return chan.path_mu(pose, rx, geom.plane, cfg, material)


def estimate_velocity(state_t1: UEState, state_t2: UEState) -> VelocityEstimate:
    """Finite-difference translational and angular velocity.

    The angular velocity is the axis-angle of the relative rotation
    divided by the time gap (world frame).
    """
    dt = state_t2.timestamp - state_t1.timestamp
    if dt <= 0.0:
        raise ValueError("state timestamps must be increasing")
    v = (state_t2.cg - state_t1.cg) / dt
    rel = state_t2.attitude @ state_t1.attitude.T
    omega = Rotation.from_matrix(rel).as_rotvec() / dt
    return VelocityEstimate(v_cg=v, angular_velocity=omega)


def antenna_velocity(est: VelocityEstimate, antenna_position, cg) -> np.ndarray:
    """Rigid-body velocity ``v_cg + omega x (position - cg)``."""
    lever = np.asarray(antenna_position, dtype=float) - np.asarray(cg, dtype=float)
    return est.v_cg + np.cross(est.angular_velocity, lever)


def build_path_params(pose: AntennaPose, rx: AntennaPose,
                      geoms: Sequence[PathGeometry], velocity,
                      cfg: SignalConfig) -> List[PathParams]:
    """Full per-path parameter set {mu, r, D} from inferred geometry."""
    velocity = np.zeros(3) if velocity is None else np.asarray(velocity, dtype=float)
    params = []
    for g in geoms:
        mu = infer_mu(pose, rx, g, cfg)
        d = float(np.dot(velocity, g.e_tx))
        params.append(PathParams(mu=mu, r=g.r, doppler=d, alpha=g.alpha,
                                 reflector_id=g.reflector_id))
    return params


def reconstruct_dl_channel(path_sets: Dict[Tuple[int, int], Sequence[PathParams]],
                           grid: SubcarrierGrid, i_in: float = 1.0,
                           ) -> List[ChannelVector]:
    """Synthesize the downlink channel on the full subcarrier grid.

    Every (antenna, receiver) key in ``path_sets`` gets a vector over all
    subcarriers, matching the downlink where each antenna may occupy the
    whole radio resource.
    """
    if not path_sets:
        raise ReconstructionError("no path parameters supplied")
    idx = grid.all_indices
    kappas = grid.kappa(idx)
    out = []
    for (k, n) in sorted(path_sets):
        paths = path_sets[(k, n)]
        samples = (channel_zero(idx) if not paths
                   else chan.channel_sample(paths, kappas, i_in))
        out.append(ChannelVector(samples, tx_index=k, rx_index=n, subcarriers=idx))
    return out


def channel_zero(indices) -> np.ndarray:
    return np.zeros(np.asarray(indices).shape, dtype=complex)


def epsilon_metric(measured, reconstructed) -> float:
    """Normalized channel mismatch ``|H_meas - H_rec| / |H_meas|``."""
    h_meas = measured.samples if isinstance(measured, ChannelVector) else np.asarray(measured)
    h_rec = (reconstructed.samples if isinstance(reconstructed, ChannelVector)
             else np.asarray(reconstructed))
    if h_meas.shape != h_rec.shape:
        raise ValueError("channel vectors differ in length")
    norm = np.linalg.norm(h_meas)
    if norm == 0.0:
        raise ValueError("measured channel has zero norm")
    return float(np.linalg.norm(h_meas - h_rec) / norm)


def baseline_old_approach(measured: Sequence[ChannelVector],
                          pairing: Dict[int, int]) -> List[ChannelVector]:
    """Copy each transmitting antenna's measured channel as the prediction
    for its parallel non-transmitting partner (on the measured subcarriers
    only)."""
    by_tx: Dict[int, List[ChannelVector]] = {}
    for v in measured:
        by_tx.setdefault(v.tx_index, []).append(v)
    out = []
    for nontx, tx in sorted(pairing.items()):
        if tx not in by_tx:
            raise ReconstructionError(f"no measured channel for paired antenna {tx}")
        for v in by_tx[tx]:
            out.append(ChannelVector(v.samples.copy(), tx_index=nontx,
                                     rx_index=v.rx_index,
                                     subcarriers=v.subcarriers.copy()))
    return out
