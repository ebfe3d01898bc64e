"""Scenario construction and Monte-Carlo experiment driver.

Builds the base-station array, the handset trajectory and the reflector
set; enumerates single-bounce propagation paths with rectangular-extent
visibility; and runs the full measurement -> extraction -> localization ->
orientation -> downlink-reconstruction pipeline over repeated random
scenes and a list of SNR points, producing CSV result tables.
"""

from __future__ import annotations

import concurrent.futures
import configparser
import csv
import math
import statistics
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from . import channel as chan
from . import em, estimation, geometry, orientation, reconstruction
from .channel import ChannelVector, PathParams, Scene, SubcarrierGrid
from .em import AntennaPose, Material, SignalConfig
from .estimation import EstimationConfig, EstimationError, PathFit, RawPathEstimate
from .geometry import GeometryError, ReflectorPlane
from .orientation import OrientationError, PathTerm
from .reconstruction import ReconstructionError, UELayout, UEState, VelocityEstimate

EAST = np.array([1.0, 0.0, 0.0])
NORTH = np.array([0.0, 1.0, 0.0])
UP = np.array([0.0, 0.0, 1.0])
ORIENTATION_CYCLE = (EAST, NORTH, UP)


class PipelineFailure(RuntimeError):
    """A single Monte-Carlo iteration could not be completed."""


# ---------------------------------------------------------------------------
# Reflectors with rectangular extent
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Reflector:
    """Planar reflector restricted to a rectangle around its anchor point."""

    plane: ReflectorPlane
    half_u: float = 5.0
    half_v: float = 5.0
    is_ground: bool = False

    @property
    def axes(self) -> Tuple[np.ndarray, np.ndarray]:
        u = geometry.perpendicular_unit(self.plane.normal)
        v = np.cross(self.plane.normal, u)
        return u, v

    def contains(self, point) -> bool:
        rel = np.asarray(point, dtype=float) - self.plane.point
        u, v = self.axes
        return (abs(float(np.dot(rel, u))) <= self.half_u
                and abs(float(np.dot(rel, v))) <= self.half_v)


@dataclass(frozen=True)
class TracedPath:
    """One enumerated propagation path for an antenna pair."""

    kind: str                 # "los" | "reflection"
    length: float
    reflector_id: Optional[int] = None
    point: Optional[np.ndarray] = None
    alpha: Optional[float] = None


def trace_paths(tx_position, rx_position, reflectors: Sequence[Reflector],
                scenario: int) -> List[TracedPath]:
    """Direct path plus one single-bounce path per visible reflector.

    Scenario 2 removes the direct path and the ground reflection by
    construction; a reflection whose specular point falls outside the
    reflector's rectangular extent is absent.
    """
    tx = np.asarray(tx_position, dtype=float)
    rx = np.asarray(rx_position, dtype=float)
    out: List[TracedPath] = []
    if scenario != 2:
        out.append(TracedPath(kind="los", length=float(np.linalg.norm(rx - tx))))
    for i, refl in enumerate(reflectors):
        if scenario == 2 and refl.is_ground:
            continue
        try:
            point, alpha = geometry.reflection_point(tx, rx, refl.plane)
        except GeometryError:
            continue
        if not refl.contains(point):
            continue
        image = geometry.mirror_point(tx, refl.plane)
        out.append(TracedPath(kind="reflection",
                              length=float(np.linalg.norm(rx - image)),
                              reflector_id=i, point=point, alpha=alpha))
    return out


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioConfig:
    """Full experiment description (signal plan, geometry, sweep grid)."""

    # Signal plan
    carrier_frequency_hz: float = 2.4e9
    # The desk-scale default uses a wide subcarrier spacing: with 5x fewer
    # subcarriers per antenna than the full-scale setup, spacing them
    # farther apart keeps the total swept bandwidth -- and with it the
    # delay resolution that separates close path pairs -- usable.
    subcarrier_spacing_hz: float = 600e3
    n_subcarriers: int = 240
    input_current_a: float = 1.0
    ce_gap_s: float = 0.5e-3

    # Base-station array
    bs_rows: int = 8
    bs_cols: int = 8
    bs_spacing_wavelengths: float = 0.5
    bs_east: float = 0.0
    bs_north: float = 0.0
    bs_height_m: float = 20.0

    # Handset placement and motion
    ue_min_range_m: float = 50.0
    ue_max_range_m: float = 100.0
    ue_sector_deg: float = 45.0
    hand_height_m: float = 1.0
    speed_kmh: float = 5.0
    sway_amplitude_m: float = 0.5
    sway_frequency_hz: float = 0.08
    swing_amplitude_m: float = 0.05
    swing_attitude_deg: float = 15.0
    gait_frequency_hz: float = 2.0

    # Reflectors.  The desk-scale default keeps the wall count low: with
    # the shrunk array and per-antenna bandwidth, many simultaneous
    # sub-resolution paths make the noiseless extraction numerically
    # unidentifiable in double precision.
    n_reflectors: int = 3
    reflector_box_east_m: float = 120.0
    reflector_box_north_m: float = 120.0
    reflector_box_up_m: float = 30.0
    reflector_extent_m: float = 10.0
    reflector_jitter_deg: float = 3.0
    reflector_material: str = "concrete"
    ground_material: str = "brick"

    # Sweep
    scenario: int = 1
    snr_db: Tuple[float, ...] = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)
    iterations: int = 100
    seed: int = 1234

    def validate(self) -> None:
        if self.carrier_frequency_hz <= 0 or self.subcarrier_spacing_hz <= 0:
            raise ValueError("frequencies must be positive")
        if self.n_subcarriers < 8 or self.n_subcarriers % 2:
            raise ValueError("subcarrier count must be even and >= 8")
        if self.bs_rows < 1 or self.bs_cols < 1 or self.bs_spacing_wavelengths <= 0:
            raise ValueError("array shape must be positive")
        if self.scenario not in (1, 2):
            raise ValueError(f"scenario must be 1 or 2, got {self.scenario}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not (0 < self.ue_min_range_m <= self.ue_max_range_m):
            raise ValueError("handset range interval invalid")
        if self.ce_gap_s <= 0:
            raise ValueError("estimation gap must be positive")
        for name in (self.reflector_material, self.ground_material):
            if name not in em.MATERIALS:
                raise ValueError(f"unknown material {name!r} "
                                 f"(known: {sorted(em.MATERIALS)})")

    # -- derived objects ----------------------------------------------------

    @property
    def omega(self) -> float:
        return 2.0 * math.pi * self.carrier_frequency_hz

    def signal_config(self) -> SignalConfig:
        return SignalConfig(omega=self.omega, i_in=self.input_current_a)

    def grid(self) -> SubcarrierGrid:
        layout = UELayout.phone()
        return SubcarrierGrid.split_evenly(
            self.omega, self.subcarrier_spacing_hz, self.n_subcarriers,
            [int(k) for k in layout.tx_indices])

    def materials(self) -> Tuple[Material, Material]:
        return (em.MATERIALS[self.reflector_material],
                em.MATERIALS[self.ground_material])

    # -- presets and file I/O ----------------------------------------------

    @classmethod
    def desk_scale(cls) -> "ScenarioConfig":
        return cls()

    @classmethod
    def paper_scale(cls) -> "ScenarioConfig":
        return cls(subcarrier_spacing_hz=15e3, n_subcarriers=1200,
                   bs_rows=16, bs_cols=16, iterations=500, n_reflectors=6)

    _SCHEMA = {
        "signal": {
            "carrier_frequency_hz": ("carrier_frequency_hz", float),
            "subcarrier_spacing_hz": ("subcarrier_spacing_hz", float),
            "n_subcarriers": ("n_subcarriers", int),
            "input_current_a": ("input_current_a", float),
            "ce_gap_s": ("ce_gap_s", float),
        },
        "bs": {
            "rows": ("bs_rows", int),
            "cols": ("bs_cols", int),
            "spacing_wavelengths": ("bs_spacing_wavelengths", float),
            "east_m": ("bs_east", float),
            "north_m": ("bs_north", float),
            "height_m": ("bs_height_m", float),
        },
        "ue": {
            "min_range_m": ("ue_min_range_m", float),
            "max_range_m": ("ue_max_range_m", float),
            "sector_deg": ("ue_sector_deg", float),
            "hand_height_m": ("hand_height_m", float),
            "speed_kmh": ("speed_kmh", float),
            "sway_amplitude_m": ("sway_amplitude_m", float),
            "sway_frequency_hz": ("sway_frequency_hz", float),
            "swing_amplitude_m": ("swing_amplitude_m", float),
            "swing_attitude_deg": ("swing_attitude_deg", float),
            "gait_frequency_hz": ("gait_frequency_hz", float),
        },
        "reflectors": {
            "count": ("n_reflectors", int),
            "box_east_m": ("reflector_box_east_m", float),
            "box_north_m": ("reflector_box_north_m", float),
            "box_up_m": ("reflector_box_up_m", float),
            "extent_m": ("reflector_extent_m", float),
            "jitter_deg": ("reflector_jitter_deg", float),
            "material": ("reflector_material", str),
            "ground_material": ("ground_material", str),
        },
        "experiment": {
            "scenario": ("scenario", int),
            "snr_db": ("snr_db", "snr_list"),
            "iterations": ("iterations", int),
            "seed": ("seed", int),
        },
    }

    @classmethod
    def from_file(cls, path) -> "ScenarioConfig":
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise FileNotFoundError(f"config file not found: {path}")
        kwargs = {}
        for section in parser.sections():
            if section not in cls._SCHEMA:
                raise ValueError(f"unknown config section [{section}]")
            for key, raw in parser[section].items():
                if key not in cls._SCHEMA[section]:
                    raise ValueError(f"unknown key {key!r} in section [{section}]")
                name, conv = cls._SCHEMA[section][key]
                if conv == "snr_list":
                    kwargs[name] = tuple(float(s) for s in raw.split(","))
                else:
                    kwargs[name] = conv(raw)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def to_file(self, path) -> None:
        parser = configparser.ConfigParser()
        for section, keys in self._SCHEMA.items():
            parser[section] = {}
            for key, (name, conv) in keys.items():
                value = getattr(self, name)
                if conv == "snr_list":
                    parser[section][key] = ",".join(repr(v) for v in value)
                else:
                    parser[section][key] = repr(value) if not isinstance(value, str) else value
        with open(path, "w") as fh:
            parser.write(fh)


# ---------------------------------------------------------------------------
# Static scene pieces
# ---------------------------------------------------------------------------


def build_bs_array(cfg: ScenarioConfig) -> List[AntennaPose]:
    """Planar receive array in the East-Up plane, facing North.

    Element spacing is ``bs_spacing_wavelengths`` wavelengths in both
    directions; orientations cycle East -> North -> Up in row-major index
    order.
    """
    lam = em.SPEED_OF_LIGHT / cfg.carrier_frequency_hz
    spacing = cfg.bs_spacing_wavelengths * lam
    base = np.array([cfg.bs_east, cfg.bs_north, cfg.bs_height_m])
    poses = []
    for row in range(cfg.bs_rows):
        for col in range(cfg.bs_cols):
            index = row * cfg.bs_cols + col
            position = base + spacing * (col * EAST + row * UP)
            poses.append(AntennaPose(position=position,
                                     orientation=ORIENTATION_CYCLE[index % 3]))
    return poses


def bs_front_direction(cfg: ScenarioConfig) -> np.ndarray:
    """Unit normal of the array plane pointing into the service area."""
    return NORTH.copy()


def build_ue_layout(cfg: ScenarioConfig) -> UELayout:
    return UELayout.phone()


def make_reflectors(cfg: ScenarioConfig, rng: np.random.Generator,
                    bs_position, ue_position) -> List[Reflector]:
    """Ground plane plus randomly placed finite reflectors.

    Reflector anchors are uniform in a box centered between the array and
    the handset.  A finite plane only produces a specular path when its
    normal nearly bisects the directions to both ends of the link at the
    reflection point, so each normal is drawn as that bisector at the
    anchor plus an isotropic angular jitter; with purely random
    orientations virtually no draw would carry any wall reflection.
    """
    from scipy.spatial.transform import Rotation

    refl_mat, ground_mat = cfg.materials()
    out = [Reflector(plane=ReflectorPlane(point=np.zeros(3), normal=UP,
                                          material=ground_mat),
                     half_u=1e6, half_v=1e6, is_ground=True)]
    bs = np.asarray(bs_position, dtype=float)
    ue = np.asarray(ue_position, dtype=float)
    mid = (bs + ue) / 2.0
    half = np.array([cfg.reflector_box_east_m, cfg.reflector_box_north_m,
                     cfg.reflector_box_up_m]) / 2.0
    for _ in range(cfg.n_reflectors):
        center = mid + rng.uniform(-half, half)
        center[2] = max(center[2], 0.5)
        to_bs = bs - center
        to_ue = ue - center
        normal = (to_bs / np.linalg.norm(to_bs)
                  + to_ue / np.linalg.norm(to_ue))
        normal /= np.linalg.norm(normal)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        jitter = rng.uniform(0.0, math.radians(cfg.reflector_jitter_deg))
        normal = Rotation.from_rotvec(jitter * axis).apply(normal)
        out.append(Reflector(
            plane=ReflectorPlane(point=center, normal=normal, material=refl_mat),
            half_u=cfg.reflector_extent_m / 2.0,
            half_v=cfg.reflector_extent_m / 2.0))
    return out


# ---------------------------------------------------------------------------
# Handset trajectory
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    """Analytic walking motion of the handset.

    The body walks at constant mean speed along a fixed heading with a
    sinusoidal lateral sway; the hand adds a sinusoidal swing along the
    walking direction and an attitude oscillation about a fixed body axis.
    All velocities are available in closed form, so each antenna on the
    rigid handset gets its own exact velocity.
    """

    origin: np.ndarray          # hand position at t=0 (includes height)
    heading: np.ndarray         # horizontal walking direction, unit
    speed: float                # mean walking speed, m/s
    sway_amplitude: float
    sway_omega: float
    sway_phase: float
    swing_amplitude: float
    swing_omega: float
    swing_phase: float
    attitude0: np.ndarray       # base rotation, body -> world
    attitude_axis: np.ndarray   # oscillation axis, body frame, unit
    attitude_amplitude: float   # radians

    @classmethod
    def sample(cls, cfg: ScenarioConfig, rng: np.random.Generator) -> "Trajectory":
        azimuth = math.radians(rng.uniform(-cfg.ue_sector_deg, cfg.ue_sector_deg))
        rng_range = rng.uniform(cfg.ue_min_range_m, cfg.ue_max_range_m)
        front = bs_front_direction(cfg)
        lateral = np.cross(UP, front)
        horizontal = rng_range * (math.cos(azimuth) * front + math.sin(azimuth) * lateral)
        origin = np.array([cfg.bs_east, cfg.bs_north, 0.0]) + horizontal
        origin[2] = cfg.hand_height_m
        theta = rng.uniform(0.0, 2.0 * math.pi)
        heading = math.cos(theta) * EAST + math.sin(theta) * NORTH
        attitude0 = Rotation.random(random_state=np.random.default_rng(
            rng.integers(2 ** 32))).as_matrix()
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        return cls(
            origin=origin, heading=heading, speed=cfg.speed_kmh / 3.6,
            sway_amplitude=cfg.sway_amplitude_m,
            sway_omega=2.0 * math.pi * cfg.sway_frequency_hz,
            sway_phase=rng.uniform(0.0, 2.0 * math.pi),
            swing_amplitude=cfg.swing_amplitude_m,
            swing_omega=2.0 * math.pi * cfg.gait_frequency_hz,
            swing_phase=rng.uniform(0.0, 2.0 * math.pi),
            attitude0=attitude0, attitude_axis=axis,
            attitude_amplitude=math.radians(cfg.swing_attitude_deg))

    def _lateral(self) -> np.ndarray:
        return np.cross(UP, self.heading)

    def position(self, t: float) -> np.ndarray:
        sway = self.sway_amplitude * math.sin(self.sway_omega * t + self.sway_phase)
        swing = self.swing_amplitude * math.sin(self.swing_omega * t + self.swing_phase)
        return (self.origin + self.speed * t * self.heading
                + sway * self._lateral() + swing * self.heading)

    def attitude(self, t: float) -> np.ndarray:
        angle = self.attitude_amplitude * math.sin(self.swing_omega * t + self.swing_phase)
        return self.attitude0 @ geometry.rotation_matrix(self.attitude_axis, angle)

    def velocity(self, t: float) -> np.ndarray:
        sway_rate = (self.sway_amplitude * self.sway_omega
                     * math.cos(self.sway_omega * t + self.sway_phase))
        swing_rate = (self.swing_amplitude * self.swing_omega
                      * math.cos(self.swing_omega * t + self.swing_phase))
        return (self.speed * self.heading + sway_rate * self._lateral()
                + swing_rate * self.heading)

    def angular_velocity(self, t: float) -> np.ndarray:
        rate = (self.attitude_amplitude * self.swing_omega
                * math.cos(self.swing_omega * t + self.swing_phase))
        return self.attitude0 @ (rate * self.attitude_axis)

    def state(self, t: float) -> UEState:
        return UEState(cg=self.position(t), attitude=self.attitude(t), timestamp=t)

    def antenna_velocity(self, t: float, layout: UELayout, index: int) -> np.ndarray:
        pose = reconstruction.antenna_pose(self.state(t), layout, index)
        lever = pose.position - self.position(t)
        return self.velocity(t) + np.cross(self.angular_velocity(t), lever)


def generate_trajectory(cfg: ScenarioConfig, seed: int, duration: float,
                        sample_interval: float) -> List[Tuple[UEState, np.ndarray]]:
    """Sampled handset states and hand velocities over a time window."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    traj = Trajectory.sample(cfg, rng)
    times = np.arange(0.0, duration, sample_interval)
    return [(traj.state(float(t)), traj.velocity(float(t))) for t in times]


# ---------------------------------------------------------------------------
# Per-iteration scene assembly
# ---------------------------------------------------------------------------


@dataclass
class SceneDraw:
    """All random ingredients of one Monte-Carlo iteration."""

    trajectory: Trajectory
    reflectors: List[Reflector]
    t1: float

    @classmethod
    def sample(cls, cfg: ScenarioConfig, iteration: int) -> "SceneDraw":
        rng = np.random.default_rng(
            np.random.SeedSequence(cfg.seed, spawn_key=(iteration,)))
        traj = Trajectory.sample(cfg, rng)
        bs_center = np.array([cfg.bs_east, cfg.bs_north, cfg.bs_height_m])
        reflectors = make_reflectors(cfg, rng, bs_center, traj.position(0.0))
        t1 = rng.uniform(0.0, 1.0 / max(cfg.gait_frequency_hz, 1e-6))
        return cls(trajectory=traj, reflectors=reflectors, t1=t1)


def _antenna_states(draw: SceneDraw, layout: UELayout, t: float,
                    indices: Sequence[int]):
    """World poses and velocities of the selected antennas at time t."""
    state = draw.trajectory.state(t)
    poses = [reconstruction.antenna_pose(state, layout, int(i)) for i in indices]
    vels = [draw.trajectory.antenna_velocity(t, layout, int(i)) for i in indices]
    return state, poses, vels


def _visibility(tx_poses: Sequence[AntennaPose], bs_poses: Sequence[AntennaPose],
                reflectors: Sequence[Reflector], scenario: int,
                ) -> Dict[Tuple[int, int], Tuple[bool, List[int]]]:
    vis = {}
    for k, tx in enumerate(tx_poses):
        for n, rx in enumerate(bs_poses):
            traced = trace_paths(tx.position, rx.position, reflectors, scenario)
            include_los = any(p.kind == "los" for p in traced)
            ids = [p.reflector_id for p in traced if p.kind == "reflection"]
            vis[(k, n)] = (include_los, ids)
    return vis


def _measurement_scene(cfg: ScenarioConfig, draw: SceneDraw, layout: UELayout,
                       bs_poses: Sequence[AntennaPose], t: float,
                       vis: Dict[Tuple[int, int], Tuple[bool, List[int]]]) -> Scene:
    tx_idx = [int(i) for i in layout.tx_indices]
    _, poses, vels = _antenna_states(draw, layout, t, tx_idx)
    return Scene(tx_poses=poses, tx_velocities=vels, rx_poses=bs_poses,
                 reflectors=[r.plane for r in draw.reflectors],
                 cfg=cfg.signal_config(),
                 visible=lambda k, n: vis[(k, n)])


def _noise_seed(cfg: ScenarioConfig, iteration: int, snr_index: int,
                estimation_index: int) -> int:
    ss = np.random.SeedSequence(
        cfg.seed, spawn_key=(1000 + iteration, snr_index, estimation_index))
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------------------
# Path association and scene recovery
# ---------------------------------------------------------------------------


def _merge_coincident(fit: PathFit, samples, kappas, i_in: float,
                      est_cfg: EstimationConfig,
                      sep_gate: float = 0.1) -> PathFit:
    """Collapse fitted components closer than ``sep_gate`` into one.

    Two paths of nearly equal length are mutually unidentifiable and
    poison the conditioning of the whole fit; replacing them by their
    coherent sum and refitting at reduced order restores the accuracy of
    the remaining components.
    """
    while len(fit.estimates) > 1:
        est = sorted(fit.estimates, key=lambda e: e.r_eff)
        gaps = [(est[i + 1].r_eff - est[i].r_eff, i)
                for i in range(len(est) - 1)]
        gap, i = min(gaps)
        if gap >= sep_gate:
            break
        a, b = est[i], est[i + 1]
        wa, wb = abs(a.mu), abs(b.mu)
        total = wa + wb
        merged = RawPathEstimate(
            mu=a.mu + b.mu,
            r_eff=(a.r_eff * wa + b.r_eff * wb) / total if total > 0
            else 0.5 * (a.r_eff + b.r_eff))
        init = est[:i] + [merged] + est[i + 2:]
        try:
            fit = estimation.fit_paths(samples, kappas, len(init),
                                       i_in=i_in, cfg=est_cfg, init=init)
        except EstimationError as exc:
            if exc.best is None:
                break
            fit = exc.best
    return fit


def _fit_all(measured: Sequence[ChannelVector], grid: SubcarrierGrid,
             orders: Dict[Tuple[int, int], int], i_in: float,
             est_cfg: EstimationConfig,
             warm: Optional[Dict[Tuple[int, int], PathFit]] = None,
             ) -> Dict[Tuple[int, int], PathFit]:
    """Per-pair path extraction, keeping best-so-far fits on failure."""
    out: Dict[Tuple[int, int], PathFit] = {}
    for vec in measured:
        key = (vec.tx_index, vec.rx_index)
        order = orders[key]
        if order < 1:
            raise PipelineFailure(f"no propagation paths for pair {key}")
        init = None
        if warm is not None and key in warm and warm[key].estimates:
            # The warm fit may have merged unidentifiable components; its
            # own model order is the right one to carry forward.
            init = warm[key].estimates
            order = len(init)
        kappas = grid.kappa(vec.subcarriers)
        try:
            fit = estimation.fit_paths(vec.samples, kappas, order,
                                       i_in=i_in, cfg=est_cfg, init=init)
        except EstimationError as exc:
            fit = exc.best
        # A warm start can strand the solver in a flat region between the
        # old and new optimum.  If the warm refit failed, or landed
        # markedly above the fit it started from, redo it from a fresh
        # initialization and keep whichever sits lower.  (With noise both
        # residuals sit at the noise floor, so this rarely triggers.)
        suspicious = fit is None or (
            init is not None and fit.residual > 1e-15
            and fit.residual > 100.0 * warm[key].residual)
        if init is not None and suspicious:
            try:
                cold = estimation.fit_paths(vec.samples, kappas, order,
                                            i_in=i_in, cfg=est_cfg)
            except EstimationError as exc:
                cold = exc.best
            if cold is not None and (fit is None or cold.residual < fit.residual):
                fit = cold
        if fit is None:
            raise PipelineFailure(f"path extraction failed for pair {key}")
        out[key] = _merge_coincident(fit, vec.samples, kappas, i_in, est_cfg)
    return out


@dataclass
class PathCluster:
    """One propagation path of one transmit antenna, tracked across the
    receive array: per-receiver distances and Doppler speeds."""

    distances: Dict[int, float] = field(default_factory=dict)
    distances_t2: Dict[int, float] = field(default_factory=dict)
    dopplers: Dict[int, float] = field(default_factory=dict)
    amplitudes: Dict[int, complex] = field(default_factory=dict)
    amplitudes_t2: Dict[int, complex] = field(default_factory=dict)
    # As-fitted lengths, kept alongside the phase-refined ones: the
    # fitted amplitude's phase error cancels only against its own
    # fitted length, so amplitude-domain consumers need the raw value.
    raw_distances: Dict[int, float] = field(default_factory=dict)
    raw_distances_t2: Dict[int, float] = field(default_factory=dict)

    @property
    def median_distance(self) -> float:
        return float(np.median(list(self.distances.values())))

    @property
    def median_doppler(self) -> float:
        return float(np.median(list(self.dopplers.values())))


def _cluster_paths(fits1: Dict[Tuple[int, int], PathFit],
                   fits2: Dict[Tuple[int, int], PathFit],
                   tx_index: int, rx_coords: np.ndarray, tau: float,
                   bs_positions: Optional[np.ndarray] = None,
                   kappa0: Optional[float] = None,
                   gate_m: float = 2.0) -> List[PathCluster]:
    """Associate per-receiver path estimates into per-path clusters.

    The reference receiver's paths, sorted by length, define the cluster
    labels.  Because distinct paths can have nearly equal lengths while
    their lengths vary across the array aperture, matching by raw nearest
    length mis-associates; instead each cluster's length at the next
    receiver is predicted by an affine fit over the receivers assigned so
    far, and the per-receiver assignment is solved optimally.  Entries
    whose best cost exceeds ``gate_m`` stay unassigned.

    Estimates whose amplitude is negligible next to the strongest path at
    the same receiver are dropped: near a radiation or reflection null the
    length of the weak path is unidentifiable and would corrupt the
    cluster.  Pairs whose implied radial speed is beyond any plausible
    handset motion are dropped for the same reason.  The receiver keeping
    the most estimates (ties broken by the best weak-to-strong amplitude
    ratio) serves as the reference.
    """
    from scipy.optimize import linear_sum_assignment

    amp_gate = 1e-3
    speed_gate = 3000.0  # m/s; only rejects outright mispairings, since
    # measurement noise on the length difference is amplified by 1/tau
    sep_gate = 0.1       # m
    n_rx = rx_coords.shape[0]
    separated: List[List[Tuple[float, float]]] = []
    ratios: List[float] = []
    for n in range(n_rx):
        pairs = estimation.pair_estimates(fits1[(tx_index, n)], fits2[(tx_index, n)])
        strongest = max(min(abs(e1.mu), abs(e2.mu)) for e1, e2 in pairs)
        kept = [(e1, e2) for e1, e2 in pairs
                if min(abs(e1.mu), abs(e2.mu)) >= amp_gate * strongest]
        ratios.append(min(min(abs(e1.mu), abs(e2.mu)) for e1, e2 in kept)
                      / strongest if strongest > 0 else 0.0)
        vals = [estimation.separate_doppler(e1, e2, tau) + (e1.mu, e2.mu)
                for e1, e2 in kept]
        vals = [v for v in vals if abs(v[1]) <= speed_gate]
        # Two paths whose lengths nearly coincide at this receiver are
        # mutually unidentifiable and their association across the array
        # is ambiguous: drop both rather than risk swapping clusters.
        close = set()
        for i in range(len(vals)):
            for j in range(i + 1, len(vals)):
                if abs(vals[i][0] - vals[j][0]) < sep_gate:
                    close.update((i, j))
        separated.append([v for i, v in enumerate(vals) if i not in close])
    ref = max(range(n_rx), key=lambda n: (len(separated[n]), ratios[n]))
    n_clusters = len(separated[ref])
    clusters = [PathCluster() for _ in range(n_clusters)]
    assigned: List[List[Tuple[float, float, float]]] = [[] for _ in range(n_clusters)]

    def predict(l: int, coord) -> float:
        pts = assigned[l]
        if len(pts) >= 4:
            A = np.array([[1.0, c0, c1] for c0, c1, _ in pts])
            b = np.array([r for _, _, r in pts])
            coef, *_ = np.linalg.lstsq(A, b, rcond=None)
            return float(coef @ [1.0, coord[0], coord[1]])
        if pts:
            return float(np.mean([r for _, _, r in pts]))
        return math.inf

    for n in [ref] + [i for i in range(n_rx) if i != ref]:
        vals = separated[n]
        if n == ref:
            order = sorted(range(len(vals)), key=lambda j: vals[j][0])
            for l, j in enumerate(order):
                r, d, mu1, mu2 = vals[j]
                assigned[l].append((rx_coords[n, 0], rx_coords[n, 1], r))
                clusters[l].distances[n] = r
                clusters[l].distances_t2[n] = r - d * tau
                clusters[l].dopplers[n] = d
                clusters[l].amplitudes[n] = mu1
                clusters[l].amplitudes_t2[n] = mu2
            continue
        cost = np.full((n_clusters, len(vals)), 1e6)
        for l in range(n_clusters):
            pred = predict(l, rx_coords[n])
            for j, (r, *_) in enumerate(vals):
                cost[l, j] = abs(r - pred)
        rows, cols = linear_sum_assignment(cost)
        for l, j in zip(rows, cols):
            if cost[l, j] > gate_m:
                continue
            r, d, mu1, mu2 = vals[j]
            assigned[l].append((rx_coords[n, 0], rx_coords[n, 1], r))
            clusters[l].distances[n] = r
            # Positive projection on the departure direction shortens the
            # path, so the second-instant distance is r - D tau.
            clusters[l].distances_t2[n] = r - d * tau
            clusters[l].dopplers[n] = d
            clusters[l].amplitudes[n] = mu1
            clusters[l].amplitudes_t2[n] = mu2

    # Carrier-phase refinement of every cluster's lengths at both
    # instants; where both instants lock, the radial speeds are
    # recomputed from the refined lengths.
    for cl in clusters:
        cl.raw_distances = dict(cl.distances)
        cl.raw_distances_t2 = dict(cl.distances_t2)
    if bs_positions is not None and kappa0 is not None:
        for cl in clusters:
            r1 = _phase_refined_ranges(cl.distances, cl.amplitudes,
                                       bs_positions, kappa0)
            r2 = _phase_refined_ranges(cl.distances_t2, cl.amplitudes_t2,
                                       bs_positions, kappa0)
            if r1 is not None:
                cl.distances = r1
            if r2 is not None:
                cl.distances_t2 = r2
            if r1 is not None and r2 is not None:
                cl.dopplers = {n: (r1[n] - r2[n]) / tau
                               for n in set(r1) & set(r2)}

    # Per-cluster robust trim of the Doppler estimates: a bad fit at one
    # receiver implies a wild radial speed.  Only the second-instant and
    # Doppler entries are dropped; the first-instant length is unaffected
    # by the pairing and stays usable.
    for cl in clusters:
        if len(cl.dopplers) < 5:
            continue
        ds = np.array(list(cl.dopplers.values()))
        med = float(np.median(ds))
        mad = float(np.median(np.abs(ds - med)))
        lim = max(2.0, 8.0 * mad)
        for n in [n for n, d in cl.dopplers.items() if abs(d - med) > lim]:
            del cl.dopplers[n]
            del cl.distances_t2[n]
    return clusters


def _tangent_basis(u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = np.array([0.0, 0.0, 1.0]) if abs(float(u[2])) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(u, a)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(u, e1)


def _phase_refined_ranges(dist: Dict[int, float], mus: Dict[int, complex],
                          bs_positions: np.ndarray,
                          kappa0: float) -> Optional[Dict[int, float]]:
    """Carrier-phase refinement of a cluster's per-receiver ranges.

    The fitted complex amplitude of a path component carries the carrier
    phase: its argument equals a cluster-wide constant plus ``kappa0``
    times the error of the fitted length, modulo a wavelength (and
    modulo a sign that may alternate between receivers with different
    element orientations).  Length-only multilateration across a small
    aperture amplifies per-receiver length errors by the range-to-
    aperture ratio, so correcting the lengths with this phase tightens
    the source localization by orders of magnitude.

    Stages: a trimmed length-only solve for a coarse source position; a
    sign-agnostic coherent beam search over direction to resolve which
    wavelength lattice the phases live on; per-receiver sign fixing and
    phase-corrected lengths; and an iterated unwrap-and-trim
    multilateration.  Returns the refined per-receiver lengths for the
    receivers that are consistent at the few-millimetre level, or
    ``None`` when no reliable lock is found (the raw lengths then stay
    in use).
    """
    ns = sorted(set(dist) & set(mus))
    if len(ns) < 8:
        return None
    lam = 2.0 * math.pi / kappa0
    c_arr = bs_positions.mean(axis=0)

    def solve(d: Dict[int, float]) -> np.ndarray:
        keys = sorted(d)
        return estimation.localize_point([d[n] for n in keys],
                                         bs_positions[keys])

    # Coarse source position from lengths alone, iteratively trimmed.
    cur = {n: dist[n] for n in ns}
    try:
        x0 = solve(cur)
        for _ in range(3):
            res = {n: abs(float(np.linalg.norm(bs_positions[n] - x0)) - cur[n])
                   for n in cur}
            thr = float(np.percentile(list(res.values()), 70.0))
            keep = {n: v for n, v in cur.items() if res[n] <= thr}
            if len(keep) < 8:
                break
            cur = keep
            x0 = solve(cur)
    except (EstimationError, np.linalg.LinAlgError, ValueError):
        return None
    # Raw lengths already consistent below the level of the phase model's
    # own bias (the reflection coefficient's phase varies slightly across
    # the aperture): the correction could only make things worse.
    raw_rms = math.sqrt(np.mean([
        (float(np.linalg.norm(bs_positions[n] - x0)) - cur[n])**2
        for n in cur]))
    if raw_rms < 1e-4:
        return None

    pos = bs_positions[ns]
    w = np.array([abs(mus[n]) for n in ns])
    w /= w.max()
    data = np.array([float(np.angle(mus[n])) - kappa0 * dist[n] for n in ns])
    z = w * np.exp(2j * data)

    # Beam search over direction around the coarse solution.  Doubled
    # phases make the search immune to per-receiver sign flips; with
    # half-wavelength element spacing the doubled-phase ambiguity lies
    # outside the scanned cone.
    rho = float(np.linalg.norm(x0 - c_arr))
    if rho <= 0.0:
        return None
    u0 = (x0 - c_arr) / rho
    e1, e2 = _tangent_basis(u0)
    span, step = math.radians(50.0), math.radians(2.0)
    g = np.arange(-span, span + 1e-12, step)
    aa, bb = np.meshgrid(g, g, indexing="ij")
    sel = (aa**2 + bb**2) <= span**2
    dirs = (u0[None, :] + aa[sel, None] * e1[None, :]
            + bb[sel, None] * e2[None, :])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    cand = c_arr[None, :] + rho * dirs
    rr = np.linalg.norm(cand[:, None, :] - pos[None, :, :], axis=2)
    power = np.abs(np.exp(2j * kappa0 * rr) @ z)
    xb = cand[int(np.argmax(power))]

    # Per-receiver sign relative to the beam solution, then the
    # phase-corrected lengths (common phase removed; it absorbs any
    # reflection coefficient phase shared by the whole array).
    ph = data + kappa0 * np.linalg.norm(xb - pos, axis=1)
    beta2 = 0.5 * float(np.angle(np.sum(w * np.exp(2j * ph))))
    phs = np.where(np.cos(ph - beta2) >= 0.0, ph, ph + math.pi)
    raw_ph = np.array([float(np.angle(mus[n])) for n in ns]) + (phs - ph)
    beta = float(np.angle(np.sum(w * np.exp(1j * raw_ph))))
    dev = np.angle(np.exp(1j * (raw_ph - beta)))
    good = np.abs(dev) < 1.0
    if good.sum() >= 8:
        beta = float(np.angle(np.sum(w[good] * np.exp(1j * raw_ph[good]))))
        dev = np.angle(np.exp(1j * (raw_ph - beta)))
    rc = {n: dist[n] - float(dev[i]) / kappa0 for i, n in enumerate(ns)}

    # Unwrap onto the wavelength lattice against the evolving solution
    # and trim receivers that stay inconsistent.
    x = xb
    inliers: Optional[Dict[int, float]] = None
    try:
        for _ in range(6):
            if inliers is not None:
                x = solve(inliers)
            pred = {n: float(np.linalg.norm(bs_positions[n] - x)) for n in ns}
            src = inliers if inliers is not None else rc
            off = float(np.median([rc[n] - pred[n] for n in src]))
            new = {n: rc[n] + round((pred[n] + off - rc[n]) / lam) * lam
                   for n in ns}
            resid = {n: abs(new[n] - pred[n] - off) for n in ns}
            thr = max(0.004, float(np.percentile(list(resid.values()), 60.0)))
            keep = {n: new[n] for n in ns if resid[n] <= thr}
            if len(keep) < 8:
                return None
            inliers = keep
    except (EstimationError, np.linalg.LinAlgError, ValueError):
        return None
    if inliers is None or len(inliers) < max(8, len(ns) // 2):
        return None
    return inliers


def _localize_cluster(cluster: PathCluster, bs_positions: np.ndarray,
                      at_t2: bool = False,
                      front_direction=None) -> np.ndarray:
    dist = cluster.distances_t2 if at_t2 else cluster.distances
    used = sorted(dist)
    if len(used) < 4:
        raise PipelineFailure("path visible to fewer than 4 receivers")
    return estimation.localize_point([dist[n] for n in used],
                                     bs_positions[used],
                                     front_direction=front_direction)


def _mirror_across_array(point, cfg: ScenarioConfig) -> np.ndarray:
    """Mirror image across the (planar) receive-array plane.

    A planar array cannot distinguish a point from its mirror image by
    distances alone; candidate pairs generated here are disambiguated by
    scene-consistency checks.
    """
    plane = ReflectorPlane(
        point=np.array([cfg.bs_east, cfg.bs_north, cfg.bs_height_m]),
        normal=bs_front_direction(cfg))
    return geometry.mirror_point(point, plane)


def _classify_material(cfg: ScenarioConfig, point, normal) -> Material:
    """Material for a recovered plane: a near-horizontal plane at ground
    level is the ground, everything else is a generic reflector."""
    refl_mat, ground_mat = cfg.materials()
    point = np.asarray(point, dtype=float)
    normal = np.asarray(normal, dtype=float)
    n = normal / np.linalg.norm(normal)
    if abs(float(n[2])) > 0.99 and abs(float(np.dot(point, n))) < 1.0:
        return ground_mat
    return refl_mat


def _derive_plane(cfg: ScenarioConfig, location, image) -> ReflectorPlane:
    raw = geometry.plane_from_point_and_image(location, image)
    return ReflectorPlane(point=raw.point, normal=raw.normal,
                          material=_classify_material(cfg, raw.point, raw.normal))


def _plane_mismatch(p0: ReflectorPlane, p1: ReflectorPlane, scale: float) -> float:
    n0, n1 = p0.normal, p1.normal
    if np.dot(n0, n1) < 0:
        n1 = -n1
    return (scale * float(np.linalg.norm(n0 - n1))
            + abs(p0.signed_distance(p1.point))
            + abs(p1.signed_distance(p0.point)))


@dataclass
class RecoveredScene:
    """Estimated transmitter locations and reflector planes at both
    estimation instants."""

    tx_locations: List[np.ndarray]           # per tx antenna, at t1
    tx_locations_t2: List[np.ndarray]        # per tx antenna, at t2
    planes: List[Optional[ReflectorPlane]]   # shared merged planes
    tx_planes: List[List[Optional[ReflectorPlane]]]  # per-tx derived planes
    path_terms: List[List[Optional[PathTerm]]]  # per tx, aligned with clusters
    clusters: List[List[PathCluster]]        # per tx


def _recover_scenario1(cfg: ScenarioConfig, clusters, bs_positions, d_ab,
                       material: Material) -> RecoveredScene:
    front = bs_front_direction(cfg)
    tx_locs, tx_locs2, los_labels = [], [], []
    for k in range(2):
        localizable = [l for l in range(len(clusters[k]))
                       if len(clusters[k][l].distances) >= 4]
        if not localizable:
            raise PipelineFailure("no localizable path cluster")
        los = min(localizable, key=lambda l: clusters[k][l].median_distance)
        los_labels.append(los)
        tx_locs.append(_localize_cluster(clusters[k][los], bs_positions,
                                         front_direction=front))
        tx_locs2.append(_localize_cluster(clusters[k][los], bs_positions,
                                          at_t2=True, front_direction=front))
    # Image locations per non-direct cluster, both mirror candidates.
    images = []   # per tx: list of (label, [candidate, mirrored])
    for k in range(2):
        per_tx = []
        for l, cl in enumerate(clusters[k]):
            if l == los_labels[k]:
                continue
            # Fragments seen by only a handful of receivers are noise
            # artifacts more often than real paths; an image fitted to
            # them would corrupt the plane recovery.
            if len(cl.distances) < max(8, bs_positions.shape[0] // 8):
                continue
            try:
                x = _localize_cluster(cl, bs_positions)
            except PipelineFailure:
                continue    # too few receivers; the term stays dropped
            # A cluster whose ranges do not agree on any single source
            # point is contaminated (mixed paths); dropping it loses one
            # path's equations, keeping it corrupts the plane set.
            if _multilateration_rms(cl, bs_positions, x) > 0.3:
                continue
            cands = [c for c in (x, _mirror_across_array(x, cfg))
                     if np.dot(c - bs_center, front) > 1.0]
            if not cands:
                continue
            per_tx.append((l, cands))
        images.append(per_tx)

    # Match reflections across the two transmitters and pick the mirror
    # candidates that yield a single consistent plane.
    scale = float(np.linalg.norm(tx_locs[0] - bs_positions[0]))
    chosen: List[Tuple[int, int, ReflectorPlane, ReflectorPlane]] = []
    used_b = set()
    for l0, cands0 in images[0]:
        best = None
        for jb, (l1, cands1) in enumerate(images[1]):
            if jb in used_b:
                continue
            for c0 in cands0:
                for c1 in cands1:
                    gap = abs(float(np.linalg.norm(c0 - c1)) - d_ab)
                    try:
                        p0 = _derive_plane(cfg, tx_locs[0], c0)
                        p1 = _derive_plane(cfg, tx_locs[1], c1)
                    except GeometryError:
                        continue
                    score = gap * 10.0 + _plane_mismatch(p0, p1, scale)
                    # Physical prior: real surfaces sit in front of the
                    # array and not below the ground.
                    for p in (p0, p1):
                        if p.point[1] < -2.0:
                            score += 5.0
                        if p.point[2] < -1.0:
                            score += 5.0
                    if best is None or score < best[0]:
                        best = (score, jb, l1, p0, p1)
        if best is None:
            continue
        _, jb, l1, p0, p1 = best
        used_b.add(jb)
        chosen.append((l0, l1, p0, p1))

    planes: List[Optional[ReflectorPlane]] = []
    tx_planes: List[Dict[int, ReflectorPlane]] = [{}, {}]
    for l0, l1, p0, p1 in chosen:
        n0, n1 = p0.normal, p1.normal
        if np.dot(n0, n1) < 0:
            n1 = -n1
        point = (p0.point + p1.point) / 2.0
        merged = ReflectorPlane(point=point, normal=n0 + n1,
                                material=_classify_material(cfg, point, n0 + n1))
        planes.append(merged)
        tx_planes[0][l0] = p0
        tx_planes[1][l1] = p1

    path_terms, tx_plane_lists = [], []
    for k in range(2):
        terms: List[Optional[PathTerm]] = []
        plane_list: List[Optional[ReflectorPlane]] = []
        for l, cl in enumerate(clusters[k]):
            if l == los_labels[k]:
                terms.append(PathTerm(plane=None, doppler=cl.median_doppler))
                plane_list.append(None)
            elif l in tx_planes[k]:
                terms.append(PathTerm(plane=tx_planes[k][l],
                                      doppler=cl.median_doppler))
                plane_list.append(tx_planes[k][l])
            else:
                # Unmatched reflection: no usable plane, drop the term.
                terms.append(None)
                plane_list.append(None)
        path_terms.append(terms)
        tx_plane_lists.append(plane_list)
    return RecoveredScene(tx_locations=tx_locs, tx_locations_t2=tx_locs2,
                          planes=planes, tx_planes=tx_plane_lists,
                          path_terms=path_terms, clusters=clusters)


def _recover_scenario2(cfg: ScenarioConfig, clusters, bs_positions, d_ab,
                       material: Material) -> RecoveredScene:
    # Every cluster is a reflection; localize its image (mirror-ambiguous).
    images = []  # per tx: list of (label, candidates, candidates_t2)
    for k in range(2):
        per_tx = []
        for l, cl in enumerate(clusters[k]):
            if len(cl.distances) < max(8, bs_positions.shape[0] // 8):
                continue    # tiny fragments are usually noise artifacts
            try:
                x = _localize_cluster(cl, bs_positions)
                x2 = _localize_cluster(cl, bs_positions, at_t2=True)
            except PipelineFailure:
                continue    # too few receivers; the term stays dropped
            per_tx.append((l, [x, _mirror_across_array(x, cfg)],
                           [x2, _mirror_across_array(x2, cfg)]))
        images.append(per_tx)

    # Pair reflections across the two transmitters: images of the two
    # antennas in the same reflector are exactly the antenna separation
    # apart (mirroring is an isometry).
    matched = []  # (l0, l1, sign-consistent candidate pairs at t1 and t2)
    used_b = set()
    for l0, cands0, cands0_t2 in images[0]:
        best = None
        for jb, (l1, cands1, cands1_t2) in enumerate(images[1]):
            if jb in used_b:
                continue
            for s0 in range(2):
                for s1 in range(2):
                    gap = abs(float(np.linalg.norm(cands0[s0] - cands1[s1])) - d_ab)
                    if best is None or gap < best[0]:
                        best = (gap, jb, l1, s0, s1, cands1, cands1_t2)
        if best is None:
            continue
        gap, jb, l1, s0, s1, cands1, cands1_t2 = best
        used_b.add(jb)
        # Two jointly mirror-consistent versions: (chosen) and (both
        # flipped); the global pattern search below decides per reflector.
        pair_a = (cands0[s0], cands1[s1], cands0_t2[s0], cands1_t2[s1])
        pair_b = (cands0[1 - s0], cands1[1 - s1],
                  cands0_t2[1 - s0], cands1_t2[1 - s1])
        matched.append((l0, l1, [pair_a, pair_b]))
    if len(matched) < 2:
        raise PipelineFailure(
            "fewer than two common reflections; transmitters not localizable")

    # Global mirror-sign pattern search: each reflector's image pair is
    # either as found or mirrored across the array plane; the correct
    # pattern is the one admitting a consistent pair of transmitters.
    search = matched[:5]     # bound the pattern space
    best_fit = None
    for pattern in range(2 ** max(len(search) - 1, 0)):
        signs = [0] + [(pattern >> i) & 1 for i in range(len(search) - 1)]
        ia = [search[j][2][signs[j]][0] for j in range(len(search))]
        ib = [search[j][2][signs[j]][1] for j in range(len(search))]
        try:
            xa, xb, resid = estimation.localize_tx_pair_from_images(ia, ib)
        except EstimationError:
            continue
        if best_fit is None or resid < best_fit[0]:
            best_fit = (resid, signs, xa, xb)
    if best_fit is None:
        raise PipelineFailure("no consistent mirror-sign pattern found")
    _, signs, xa, xb = best_fit
    # The whole solution is still mirror-ambiguous as a block; the handset
    # is known to be in front of the array.
    flip_all = np.dot(xa - bs_positions.mean(axis=0), bs_front_direction(cfg)) < 0
    chosen_pairs = []
    for j, (l0, l1, pairs) in enumerate(matched):
        s = signs[j] if j < len(signs) else 0
        pair = pairs[s]
        if flip_all:
            pair = tuple(_mirror_across_array(p, cfg) for p in pair)
        chosen_pairs.append((l0, l1, pair))
    if flip_all:
        xa, xb = _mirror_across_array(xa, cfg), _mirror_across_array(xb, cfg)

    # Late reflectors beyond the pattern-search bound: pick the candidate
    # version whose implied planes agree best with the recovered antennas.
    for j in range(len(search), len(matched)):
        l0, l1, pairs = matched[j]
        scored = []
        for pair in pairs:
            if flip_all:
                pair = tuple(_mirror_across_array(p, cfg) for p in pair)
            try:
                p0 = geometry.plane_from_point_and_image(xa, pair[0])
                err = float(np.linalg.norm(geometry.mirror_point(xb, p0) - pair[1]))
            except GeometryError:
                continue
            scored.append((err, pair))
        if scored:
            chosen_pairs[j] = (l0, l1, min(scored, key=lambda t: t[0])[1])

    # Transmitter locations at t2 via the mirrored images at t2.
    xs2 = []
    for k, idx in ((0, 2), (1, 3)):
        refs = []
        for l0, l1, pair in chosen_pairs:
            img2 = pair[idx]
            img1 = pair[idx - 2]
            try:
                pl = geometry.plane_from_point_and_image(
                    xa if k == 0 else xb, img1)
                refs.append(geometry.mirror_point(img2, pl))
            except GeometryError:
                continue
        if not refs:
            raise PipelineFailure("no usable reflection for second-instant fix")
        xs2.append(np.mean(refs, axis=0))

    planes: List[Optional[ReflectorPlane]] = []
    tx_planes: List[Dict[int, ReflectorPlane]] = [{}, {}]
    for l0, l1, pair in chosen_pairs:
        try:
            p0 = _derive_plane(cfg, xa, pair[0])
            p1 = _derive_plane(cfg, xb, pair[1])
        except GeometryError:
            continue
        n0, n1 = p0.normal, p1.normal
        if np.dot(n0, n1) < 0:
            n1 = -n1
        point = (p0.point + p1.point) / 2.0
        planes.append(ReflectorPlane(point=point, normal=n0 + n1,
                                     material=_classify_material(cfg, point, n0 + n1)))
        tx_planes[0][l0] = p0
        tx_planes[1][l1] = p1

    path_terms, tx_plane_lists = [], []
    for k, cls_k in enumerate(clusters):
        terms: List[Optional[PathTerm]] = []
        plane_list: List[Optional[ReflectorPlane]] = []
        for l, cl in enumerate(cls_k):
            if l in tx_planes[k]:
                terms.append(PathTerm(plane=tx_planes[k][l],
                                      doppler=cl.median_doppler))
                plane_list.append(tx_planes[k][l])
            else:
                # Unmatched reflection: no usable plane, drop the term.
                terms.append(None)
                plane_list.append(None)
        path_terms.append(terms)
        tx_plane_lists.append(plane_list)
    return RecoveredScene(tx_locations=[xa, xb], tx_locations_t2=xs2,
                          planes=planes, tx_planes=tx_plane_lists,
                          path_terms=path_terms, clusters=clusters)


# ---------------------------------------------------------------------------
# Full pipeline for one iteration
# ---------------------------------------------------------------------------


@dataclass
class IterationOutcome:
    """Scores of one pipeline run at one SNR point."""

    iteration: int
    snr_db: float
    scenario: int
    angle_errors: Dict[int, float]                     # tx antenna -> degrees
    eps_recon: Dict[Tuple[int, int], float]            # (non-tx, rx) -> eps
    eps_baseline: Dict[Tuple[int, int], float]
    eps_tx: Dict[Tuple[int, int], float]               # re-synthesized tx
    location_errors: Dict[int, float]                  # tx antenna -> meters
    elapsed_s: float = 0.0
    reconstructed: Optional[List[ChannelVector]] = None
    truth: Optional[List[ChannelVector]] = None
    measured: Optional[List[ChannelVector]] = None


def _orientation_total_voltage(cfg: ScenarioConfig, grid: SubcarrierGrid,
                               bs_poses: Sequence[AntennaPose], measured_by_key,
                               recovered: RecoveredScene, k: int, tx_index: int,
                               at_t2: bool) -> np.ndarray:
    """Transmit-antenna orientation from one estimation's voltages."""
    sig = cfg.signal_config()
    center = grid.center_index(tx_index)
    tx_loc = (recovered.tx_locations_t2 if at_t2 else recovered.tx_locations)[k]
    terms = [t for t in recovered.path_terms[k] if t is not None]
    if not terms:
        raise PipelineFailure("no usable path terms for orientation")
    rows, used, _ = orientation.build_path_rows(
        bs_poses, tx_loc, terms, sig,
        eval_kappa=float(grid.kappa(center)))
    voltages = []
    for n in used:
        vec = measured_by_key[(tx_index, n)]
        pos = int(np.flatnonzero(vec.subcarriers == center)[0])
        voltages.append(vec.samples[pos])
    est = orientation.reconstruct_orientation(np.asarray(voltages), rows)
    return est.direction


def _orientation_for_tx(cfg: ScenarioConfig, grid: SubcarrierGrid,
                        bs_poses: Sequence[AntennaPose], measured_by_key,
                        recovered: RecoveredScene, k: int, tx_index: int,
                        at_t2: bool) -> np.ndarray:
    """Transmit-antenna orientation from the per-path fitted amplitudes.

    Solving against the total received voltage requires every path's
    absolute propagation phase to be right, which needs the recovered
    geometry at a small fraction of a wavelength: centimetre-level
    location errors already scramble the inter-path phase relations.
    Instead, each path contributes its own per-receiver equations
    ``amplitude = scale_l * row . p`` where the free complex scale of
    path ``l`` absorbs the common phase error of that path's recovered
    geometry; the fitted amplitude is rotated by its own fitted length
    so that the per-receiver fit error cancels.  The scales and the real
    direction ``p`` are solved by alternating least squares, seeded by
    the total-voltage solution (which also pins the overall sign).
    """
    sig = cfg.signal_config()
    center = grid.center_index(tx_index)
    kap_c = float(grid.kappa(center))
    tx_loc = (recovered.tx_locations_t2 if at_t2 else recovered.tx_locations)[k]
    systems = []   # (rows matrix, amplitude data vector) per usable path
    for l, term in enumerate(recovered.path_terms[k]):
        if term is None or l >= len(recovered.clusters[k]):
            continue
        cl = recovered.clusters[k][l]
        mus = cl.amplitudes_t2 if at_t2 else cl.amplitudes
        raw = cl.raw_distances_t2 if at_t2 else cl.raw_distances
        kept = cl.distances_t2 if at_t2 else cl.distances
        ns = sorted(set(mus) & set(raw) & set(kept))
        if len(ns) < 6:
            continue
        try:
            rows, used, _ = orientation.build_path_rows(
                [bs_poses[n] for n in ns], tx_loc, [term], sig,
                eval_kappa=kap_c)
        except (OrientationError, GeometryError):
            continue
        z = np.array([sig.i_in * kap_c * mus[ns[i]]
                      * np.exp(-1j * kap_c * raw[ns[i]]) for i in used])
        systems.append((np.asarray(rows, dtype=complex), z))
    if not systems:
        return _orientation_total_voltage(cfg, grid, bs_poses, measured_by_key,
                                          recovered, k, tx_index, at_t2)
    try:
        p_ref = _orientation_total_voltage(cfg, grid, bs_poses, measured_by_key,
                                           recovered, k, tx_index, at_t2)
    except (PipelineFailure, OrientationError, ValueError):
        p_ref = None
    # Seed: complex solve on the best-populated path, projected to the
    # real direction of maximal energy.
    a0, z0 = max(systems, key=lambda s: s[1].size)
    q, *_ = np.linalg.lstsq(a0, z0, rcond=None)
    b = np.stack([q.real, q.imag], axis=1)
    u, s, _ = np.linalg.svd(b, full_matrices=False)
    p = u[:, 0]
    for _ in range(20):
        scales = []
        for a, z in systems:
            m = a @ p
            denom = float(np.vdot(m, m).real)
            if denom <= 0.0:
                scales.append(0.0 + 0.0j)
                continue
            scales.append(complex(np.vdot(m, z) / denom))
        blocks_a, blocks_v = [], []
        for (a, z), c in zip(systems, scales):
            ca = c * a
            blocks_a.extend([ca.real, ca.imag])
            blocks_v.extend([z.real, z.imag])
        a_s = np.concatenate(blocks_a)
        v_s = np.concatenate(blocks_v)
        new, *_ = np.linalg.lstsq(a_s, v_s, rcond=None)
        norm = float(np.linalg.norm(new))
        if norm == 0.0:
            break
        new = new / norm
        if float(np.linalg.norm(new - p)) < 1e-12:
            p = new
            break
        p = new
    if p_ref is not None and float(np.dot(p, p_ref)) < 0.0:
        p = -p
    return p


def run_iteration(cfg: ScenarioConfig, draw: SceneDraw, snr_db: float,
                  iteration: int = 0, snr_index: int = 0,
                  bs_poses: Optional[List[AntennaPose]] = None,
                  layout: Optional[UELayout] = None,
                  grid: Optional[SubcarrierGrid] = None,
                  est_cfg: EstimationConfig = EstimationConfig(),
                  keep_channels: bool = False) -> IterationOutcome:
    """Measure, invert and score one random scene at one SNR point."""
    start = time.perf_counter()
    bs_poses = bs_poses if bs_poses is not None else build_bs_array(cfg)
    layout = layout if layout is not None else build_ue_layout(cfg)
    grid = grid if grid is not None else cfg.grid()
    sig = cfg.signal_config()
    tau = cfg.ce_gap_s
    t1, t2 = draw.t1, draw.t1 + tau
    tx_idx = [int(i) for i in layout.tx_indices]
    refl_mat, _ = cfg.materials()

    # Path visibility is evaluated once (the handset moves sub-millimeter
    # between the two estimations).
    state1_true, tx_poses1, _ = _antenna_states(draw, layout, t1, tx_idx)
    vis = _visibility(tx_poses1, bs_poses, draw.reflectors, cfg.scenario)
    orders = {key: int(los) + len(ids) for key, (los, ids) in vis.items()}
    if min(orders.values()) < 1:
        raise PipelineFailure("an antenna pair has no propagation path")

    scene1 = _measurement_scene(cfg, draw, layout, bs_poses, t1, vis)
    scene2 = _measurement_scene(cfg, draw, layout, bs_poses, t2, vis)
    measured1 = chan.synthesize_measured(scene1, grid, snr_db,
                                         seed=_noise_seed(cfg, iteration, snr_index, 0))
    measured2 = chan.synthesize_measured(scene2, grid, snr_db,
                                         seed=_noise_seed(cfg, iteration, snr_index, 1))
    by_key1 = {(v.tx_index, v.rx_index): v for v in measured1}
    by_key2 = {(v.tx_index, v.rx_index): v for v in measured2}

    fits1 = _fit_all(measured1, grid, orders, sig.i_in, est_cfg)
    fits2 = _fit_all(measured2, grid, orders, sig.i_in, est_cfg, warm=fits1)

    bs_positions = np.array([p.position for p in bs_poses])
    try:
        rx_coords = np.array([[p.position[0], p.position[2]] for p in bs_poses])
        clusters = [_cluster_paths(fits1, fits2, k, rx_coords, tau,
                                   bs_positions=bs_positions,
                                   kappa0=float(grid.kappa(grid.center_index(k))))
                    for k in tx_idx]
        if cfg.scenario == 1:
            recovered = _recover_scenario1(
                cfg, clusters, bs_positions,
                float(np.linalg.norm(layout.offsets[tx_idx[0]]
                                     - layout.offsets[tx_idx[1]])), refl_mat)
        else:
            recovered = _recover_scenario2(
                cfg, clusters, bs_positions,
                float(np.linalg.norm(layout.offsets[tx_idx[0]]
                                     - layout.offsets[tx_idx[1]])), refl_mat)

        # Orientation of each transmitting antenna at both instants.
        directions1, directions2 = [], []
        for k, tx_index in enumerate(tx_idx):
            directions1.append(_orientation_for_tx(cfg, grid, bs_poses, by_key1,
                                                   recovered, k, tx_index, False))
            directions2.append(_orientation_for_tx(cfg, grid, bs_poses, by_key2,
                                                   recovered, k, tx_index, True))

        layout_dirs = [layout.orientations[i] for i in tx_idx]
        att1 = orientation.ue_orientation(directions1, layout_dirs)
        att2 = orientation.ue_orientation(directions2, layout_dirs)
        est_state1 = UEState(cg=np.mean(recovered.tx_locations, axis=0),
                             attitude=att1, timestamp=t1)
        est_state2 = UEState(cg=np.mean(recovered.tx_locations_t2, axis=0),
                             attitude=att2, timestamp=t2)
        vel = reconstruction.estimate_velocity(est_state1, est_state2)

        # Downlink synthesis on the full grid for every antenna, using the
        # second-instant state.
        planes = [p for p in recovered.planes if p is not None]
        path_sets: Dict[Tuple[int, int], List[PathParams]] = {}
        for m in range(layout.n_antennas):
            pose = reconstruction.antenna_pose(est_state2, layout, m)
            v_m = reconstruction.antenna_velocity(vel, pose.position, est_state2.cg)
            for n, rx in enumerate(bs_poses):
                geoms = reconstruction.infer_path_geometry(
                    pose, rx, planes, blocked_los=(cfg.scenario == 2))
                if not geoms:
                    path_sets[(m, n)] = []
                    continue
                path_sets[(m, n)] = reconstruction.build_path_params(
                    pose, rx, geoms, v_m, sig)
        reconstructed = reconstruction.reconstruct_dl_channel(path_sets, grid,
                                                              i_in=sig.i_in)
    except (EstimationError, OrientationError, ReconstructionError,
            GeometryError, np.linalg.LinAlgError, ValueError) as exc:
        raise PipelineFailure(str(exc)) from exc

    # Ground truth at t2 on the full grid for every antenna.
    state2_true = draw.trajectory.state(t2)
    truth: Dict[Tuple[int, int], ChannelVector] = {}
    all_idx = grid.all_indices
    kappas = grid.kappa(all_idx)
    for m in range(layout.n_antennas):
        pose = reconstruction.antenna_pose(state2_true, layout, m)
        v_m = draw.trajectory.antenna_velocity(t2, layout, m)
        for n, rx in enumerate(bs_poses):
            traced = trace_paths(pose.position, rx.position, draw.reflectors,
                                 cfg.scenario)
            include_los = any(p.kind == "los" for p in traced)
            ids = [p.reflector_id for p in traced if p.kind == "reflection"]
            paths = chan.ground_truth_paths(
                pose, rx, v_m, [draw.reflectors[i].plane for i in ids],
                not include_los, sig, reflector_ids=ids)
            samples = (np.zeros(all_idx.shape, dtype=complex) if not paths
                       else chan.channel_sample(paths, kappas, sig.i_in))
            truth[(m, n)] = ChannelVector(samples, tx_index=m, rx_index=n,
                                          subcarriers=all_idx)

    recon_by_key = {(v.tx_index, v.rx_index): v for v in reconstructed}
    eps_recon, eps_tx = {}, {}
    for (m, n), vec in recon_by_key.items():
        eps = reconstruction.epsilon_metric(truth[(m, n)], vec)
        if m in tx_idx:
            eps_tx[(m, n)] = eps
        else:
            eps_recon[(m, n)] = eps

    # Baseline: copy the parallel transmitting antenna's measured channel.
    eps_baseline = {}
    for pred in reconstruction.baseline_old_approach(measured2,
                                                     layout.parallel_pairing):
        key = (pred.tx_index, pred.rx_index)
        ref = truth[key]
        pos = np.searchsorted(ref.subcarriers, pred.subcarriers)
        eps_baseline[key] = reconstruction.epsilon_metric(
            ref.samples[pos], pred.samples)

    # Orientation and location scores at the first instant.
    angle_errors, location_errors = {}, {}
    for k, tx_index in enumerate(tx_idx):
        true_pose = reconstruction.antenna_pose(state1_true, layout, tx_index)
        err = orientation.angular_error(directions1[k], true_pose.orientation)
        angle_errors[tx_index] = min(err, 180.0 - err)
        location_errors[tx_index] = float(
            np.linalg.norm(recovered.tx_locations[k] - true_pose.position))

    return IterationOutcome(
        iteration=iteration, snr_db=snr_db, scenario=cfg.scenario,
        angle_errors=angle_errors, eps_recon=eps_recon,
        eps_baseline=eps_baseline, eps_tx=eps_tx,
        location_errors=location_errors,
        elapsed_s=time.perf_counter() - start,
        reconstructed=reconstructed if keep_channels else None,
        truth=list(truth.values()) if keep_channels else None,
        measured=measured2 if keep_channels else None)


# ---------------------------------------------------------------------------
# Sweep driver
# ---------------------------------------------------------------------------


@dataclass
class SweepResult:
    """All per-iteration scores plus recorded failures for one sweep."""

    config: ScenarioConfig
    outcomes: List[IterationOutcome]
    failures: List[Tuple[int, float, str]]     # (iteration, snr_db, reason)
    elapsed_s: float

    def failure_rate(self) -> float:
        total = len(self.outcomes) + len(self.failures)
        return len(self.failures) / total if total else 0.0

    def aggregate(self) -> List[Dict[str, float]]:
        """Per-SNR medians and standard deviations over successes."""
        rows = []
        for snr in self.config.snr_db:
            ok = [o for o in self.outcomes if o.snr_db == snr]
            failed = sum(1 for it, s, _ in self.failures if s == snr)
            angles = [e for o in ok for e in o.angle_errors.values()]
            eps_r = [e for o in ok for e in o.eps_recon.values()]
            eps_b = [e for o in ok for e in o.eps_baseline.values()]
            rows.append({
                "scenario": self.config.scenario, "snr_db": snr,
                "n_iterations": len(ok) + failed, "n_failed": failed,
                "failure_rate": failed / (len(ok) + failed) if ok or failed else 0.0,
                "median_angle_deg": _median(angles),
                "std_angle_deg": _std(angles),
                "median_eps_recon": _median(eps_r),
                "std_eps_recon": _std(eps_r),
                "median_eps_baseline": _median(eps_b),
                "std_eps_baseline": _std(eps_b),
            })
        return rows


def _median(values: Sequence[float]) -> float:
    return float(statistics.median(values)) if values else math.nan


def _std(values: Sequence[float]) -> float:
    if len(values) < 2:
        return math.nan if not values else 0.0
    return float(statistics.pstdev(values))


def _sweep_one(cfg: ScenarioConfig, iteration: int,
               est_cfg: EstimationConfig) -> Tuple[List[IterationOutcome],
                                                   List[Tuple[int, float, str]]]:
    bs_poses = build_bs_array(cfg)
    layout = build_ue_layout(cfg)
    grid = cfg.grid()
    draw = SceneDraw.sample(cfg, iteration)
    outcomes, failures = [], []
    for snr_index, snr in enumerate(cfg.snr_db):
        try:
            outcomes.append(run_iteration(cfg, draw, snr, iteration=iteration,
                                          snr_index=snr_index, bs_poses=bs_poses,
                                          layout=layout, grid=grid,
                                          est_cfg=est_cfg))
        except PipelineFailure as exc:
            failures.append((iteration, snr, str(exc)))
    return outcomes, failures


def run_sweep(cfg: ScenarioConfig, workers: int = 1,
              est_cfg: EstimationConfig = EstimationConfig(),
              progress: Optional[Callable[[int, int], None]] = None) -> SweepResult:
    """Monte-Carlo sweep over iterations and SNR points.

    Per-iteration failures are recorded (with the reason) and excluded
    from aggregates; determinism flows from the config's master seed
    regardless of the worker count.
    """
    cfg.validate()
    start = time.perf_counter()
    outcomes: List[IterationOutcome] = []
    failures: List[Tuple[int, float, str]] = []
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_sweep_one, cfg, it, est_cfg): it
                       for it in range(cfg.iterations)}
            done = 0
            results = {}
            for fut in concurrent.futures.as_completed(futures):
                results[futures[fut]] = fut.result()
                done += 1
                if progress:
                    progress(done, cfg.iterations)
            for it in range(cfg.iterations):
                ok, bad = results[it]
                outcomes.extend(ok)
                failures.extend(bad)
    else:
        for it in range(cfg.iterations):
            ok, bad = _sweep_one(cfg, it, est_cfg)
            outcomes.extend(ok)
            failures.extend(bad)
            if progress:
                progress(it + 1, cfg.iterations)
    outcomes.sort(key=lambda o: (o.iteration, o.snr_db))
    failures.sort(key=lambda f: (f[0], f[1]))
    return SweepResult(config=cfg, outcomes=outcomes, failures=failures,
                       elapsed_s=time.perf_counter() - start)


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

EPSILON_HEADER = ["iteration", "snr_db", "scenario", "k", "n", "epsilon", "method"]
ANGLE_HEADER = ["iteration", "snr_db", "scenario", "k", "error_deg"]
AGGREGATE_HEADER = ["scenario", "snr_db", "n_iterations", "n_failed",
                    "failure_rate", "median_angle_deg", "std_angle_deg",
                    "median_eps_recon", "std_eps_recon",
                    "median_eps_baseline", "std_eps_baseline"]
PLOT_HEADER = ["snr_db", "scenario", "series", "value"]


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_epsilon_csv(result: SweepResult, path) -> None:
    """Raw per-(antenna, receiver) reconstruction scores."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EPSILON_HEADER)
        for o in result.outcomes:
            for (k, n), eps in sorted(o.eps_recon.items()):
                w.writerow([o.iteration, _fmt(o.snr_db), o.scenario, k, n,
                            _fmt(eps), "recon"])
            for (k, n), eps in sorted(o.eps_baseline.items()):
                w.writerow([o.iteration, _fmt(o.snr_db), o.scenario, k, n,
                            _fmt(eps), "baseline"])


def write_angle_csv(result: SweepResult, path) -> None:
    """Raw per-transmit-antenna orientation errors."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ANGLE_HEADER)
        for o in result.outcomes:
            for k, err in sorted(o.angle_errors.items()):
                w.writerow([o.iteration, _fmt(o.snr_db), o.scenario, k, _fmt(err)])


def write_aggregate_csv(result: SweepResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(AGGREGATE_HEADER)
        for row in result.aggregate():
            w.writerow([row["scenario"], _fmt(row["snr_db"]),
                        row["n_iterations"], row["n_failed"],
                        _fmt(row["failure_rate"]),
                        _fmt(row["median_angle_deg"]), _fmt(row["std_angle_deg"]),
                        _fmt(row["median_eps_recon"]), _fmt(row["std_eps_recon"]),
                        _fmt(row["median_eps_baseline"]),
                        _fmt(row["std_eps_baseline"])])


def write_plot_csv(result: SweepResult, path) -> None:
    """Long-format plot data: one row per (SNR, scenario, series)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PLOT_HEADER)
        for row in result.aggregate():
            for series, key in (("angle_median_deg", "median_angle_deg"),
                                ("eps_recon_median", "median_eps_recon"),
                                ("eps_baseline_median", "median_eps_baseline")):
                w.writerow([_fmt(row["snr_db"]), row["scenario"], series,
                            _fmt(row[key])])


def read_epsilon_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        return [dict(iteration=int(r["iteration"]), snr_db=float(r["snr_db"]),
                     scenario=int(r["scenario"]), k=int(r["k"]), n=int(r["n"]),
                     epsilon=float(r["epsilon"]), method=r["method"])
                for r in csv.DictReader(fh)]
