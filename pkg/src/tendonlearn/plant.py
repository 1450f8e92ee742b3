"""Planar tendon-driven joint simulator.

Geometry lives in the joint plane, millimeters. Each joint carries a wrap
cylinder at its axis; each muscle is a polyline from points on the parent link
to points on the child link. The segment that crosses the joint wraps the
cylinder (tangent lines + arc) when pulled against it; the straight-polyline
version of the same route is the geometric model used for synthetic training
data, so the wrap is exactly the plant/model mismatch online learning has to
absorb.

Actuation follows muscle stiffness control: each motor realizes
f = f_bias + k_stiff * max(0, l_measured - l_target) through a series elastic
element; the measured length is the wire the motor has paid out relative to
the zero posture at zero tension. Joints integrate semi-implicit Euler with
viscous damping and tanh-regularized Coulomb friction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import lru_cache

import numpy as np

from .sensors import SensorTriple
from .validation import as_vector, check_positive


class MuscleHealth(Enum):
    OK = "ok"
    WIRE_CUT = "cut"
    ENDPOINT_OFFSET = "offset"


class RuptureKind(Enum):
    WIRE_CUT = "wire-cut"
    ENDPOINT_OFFSET = "endpoint-offset"


@dataclass(frozen=True)
class MuscleRoute:
    """Attachment polyline: proximal points in the parent-link frame, distal
    points in the child-link frame (both mm, joint at the origin)."""

    joint: int
    proximal: tuple
    distal: tuple

    def __post_init__(self):
        if not self.proximal or not self.distal:
            raise ValueError("muscle route needs points on both links")


@dataclass(frozen=True)
class PlantConfig:
    joint_limits: tuple = ((0.0, 1.57),)
    muscles: tuple = ()
    cylinder_radius: float = 20.0   # mm
    inertia: float = 0.05           # kg m^2
    damping: float = 0.5            # N m s / rad
    coulomb: float = 0.2            # N m
    coulomb_vel: float = 0.01       # rad/s, tanh regularization scale
    link_mass: float = 1.0          # kg
    com_offset: float = 0.08        # m, along the link
    link_length: float = 0.25       # m, joint-to-joint (chains only)
    gravity: float = 9.81           # m/s^2
    k_wire: float = 1e-6            # mm stretch per mm*N
    k_nle: float = 15.0             # mm, elastic saturation
    f0: float = 50.0                # N, elastic knee
    f_bias: float = 20.0            # N
    k_stiff: float = 2.0            # N/mm
    f_max: float = 150.0            # N, static-sampling cap
    dl_max_verify: float = 100.0    # mm, overwind guard
    slack_speed: float = 30.0       # mm/s, free-wheel wind-in rate
    dt: float = 1e-3                # s
    noise_angle: float = 0.001      # rad, sensor sigma (measured() only)
    noise_tension: float = 0.2      # N
    noise_length: float = 0.2       # mm

    def __post_init__(self):
        for name in ("cylinder_radius", "inertia", "damping", "link_mass",
                     "gravity", "f0", "k_stiff", "f_max", "dl_max_verify",
                     "slack_speed", "dt"):
            check_positive(getattr(self, name), name)
        for name in ("noise_angle", "noise_tension", "noise_length"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        for lo, hi in self.joint_limits:
            if not lo < hi:
                raise ValueError("joint limit lo must be < hi")
        r = self.cylinder_radius
        for m, route in enumerate(self.muscles):
            if not 0 <= route.joint < self.n_joints:
                raise ValueError(f"muscle {m} references unknown joint")
            for pt in tuple(route.proximal) + tuple(route.distal):
                if np.hypot(*pt) <= r:
                    raise ValueError(
                        f"muscle {m} attachment {pt} lies inside the cylinder")

    @property
    def n_joints(self) -> int:
        return len(self.joint_limits)

    @property
    def n_muscles(self) -> int:
        return len(self.muscles)


def elbow_config(**overrides) -> PlantConfig:
    """Default profile: one joint, two flexors at different wrap depths and
    one extensor routed behind the joint."""
    muscles = (
        MuscleRoute(0, ((5.0, 80.0),), ((5.0, -90.0),)),
        MuscleRoute(0, ((18.0, 70.0),), ((14.0, -65.0),)),
        MuscleRoute(0, ((-6.0, 80.0),), ((-25.0, 5.0),)),
    )
    return replace(PlantConfig(muscles=muscles), **overrides)


def desk_config(n_joints: int, **overrides) -> PlantConfig:
    """Serial chain of elbow-style joints (3 muscles per joint)."""
    base = elbow_config()
    muscles = tuple(replace(m, joint=j)
                    for j in range(n_joints) for m in base.muscles)
    limits = tuple(base.joint_limits[0] for _ in range(n_joints))
    return replace(base, joint_limits=limits, muscles=muscles, **overrides)


# --- geometry ---

@lru_cache(maxsize=16)
def _route_arrays(config: PlantConfig):
    """Per-muscle bridge endpoints, constant polyline prefixes, joint index.

    Cached per config (configs are frozen); callers must not mutate results.
    """
    a = np.array([route.proximal[-1] for route in config.muscles])
    b = np.array([route.distal[0] for route in config.muscles])
    fixed = np.zeros(config.n_muscles)
    for i, route in enumerate(config.muscles):
        pts = np.array(route.proximal)
        fixed[i] += np.linalg.norm(np.diff(pts, axis=0), axis=1).sum()
        pts = np.array(route.distal)
        fixed[i] += np.linalg.norm(np.diff(pts, axis=0), axis=1).sum()
    joints = np.array([route.joint for route in config.muscles])
    return a, b, fixed, joints


def _bridge_lengths(config: PlantConfig, theta: np.ndarray, wrap: bool) -> np.ndarray:
    """Length of each muscle's joint-crossing segment at joint angles theta."""
    a, b, _, joints = _route_arrays(config)
    ang = theta[joints]
    c, s = np.cos(ang), np.sin(ang)
    bw = np.stack([c * b[:, 0] - s * b[:, 1],
                   s * b[:, 0] + c * b[:, 1]], axis=1)
    straight = np.linalg.norm(a - bw, axis=1)
    if not wrap:
        return straight
    r = config.cylinder_radius
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(bw, axis=1)
    cos_alpha = np.clip((a * bw).sum(axis=1) / (na * nb), -1.0, 1.0)
    # arc between the two tangent points; positive means the taut cable
    # cannot go straight and hugs the cylinder
    phi = np.arccos(cos_alpha) - np.arccos(r / na) - np.arccos(r / nb)
    wrapped = np.sqrt(na ** 2 - r ** 2) + np.sqrt(nb ** 2 - r ** 2) + r * phi
    return np.where(phi > 0.0, wrapped, straight)


def _lengths_abs(config: PlantConfig, theta, wrap: bool) -> np.ndarray:
    theta = as_vector(theta, config.n_joints, "theta")
    _, _, fixed, _ = _route_arrays(config)
    return fixed + _bridge_lengths(config, theta, wrap)


def geo_lengths_abs(config: PlantConfig, theta) -> np.ndarray:
    """Straight-polyline absolute path lengths (mm): the geometric model."""
    return _lengths_abs(config, theta, wrap=False)


def true_lengths_abs(config: PlantConfig, theta) -> np.ndarray:
    """Cylinder-wrapped absolute path lengths (mm): the simulated reality."""
    return _lengths_abs(config, theta, wrap=True)


@lru_cache(maxsize=16)
def _base_lengths(config: PlantConfig, wrap: bool) -> np.ndarray:
    return _lengths_abs(config, np.zeros(config.n_joints), wrap)


def geo_lengths(config: PlantConfig, theta) -> np.ndarray:
    """Relative geometric lengths: zero at the zero posture."""
    return geo_lengths_abs(config, theta) - _base_lengths(config, False)


def true_lengths(config: PlantConfig, theta) -> np.ndarray:
    return true_lengths_abs(config, theta) - _base_lengths(config, True)


def moment_arms(config: PlantConfig, theta, h: float = 1e-6) -> np.ndarray:
    """d(true length)/d(theta) as an (M, D) matrix, mm/rad.

    Each muscle spans a single joint, so perturbing every joint at once
    yields each muscle's own-joint derivative in one evaluation pair.
    """
    theta = as_vector(theta, config.n_joints, "theta")
    _, _, _, joints = _route_arrays(config)
    lo = _bridge_lengths(config, theta - h, wrap=True)
    hi = _bridge_lengths(config, theta + h, wrap=True)
    deriv = (hi - lo) / (2.0 * h)
    g = np.zeros((config.n_muscles, config.n_joints))
    g[np.arange(config.n_muscles), joints] = deriv
    return g


# --- elastic element ---

def elastic_stretch(config: PlantConfig, l_abs, tension) -> np.ndarray:
    """Series-elastic stretch (mm): wire strain + saturating element."""
    l_abs = np.asarray(l_abs, dtype=np.float64)
    f = np.asarray(tension, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("tension must be nonnegative")
    return config.k_wire * l_abs * f + config.k_nle * (1.0 - np.exp(-f / config.f0))


def _stretch_slope(config: PlantConfig, l_abs, f) -> np.ndarray:
    return config.k_wire * l_abs + (config.k_nle / config.f0) * np.exp(-f / config.f0)


def _invert_stretch(config: PlantConfig, l_abs, target, f_init) -> np.ndarray:
    """Solve elastic_stretch(f) = target for f >= 0 (vectorized Newton)."""
    target = np.maximum(np.asarray(target, dtype=np.float64), 0.0)
    f = np.maximum(np.asarray(f_init, dtype=np.float64), 0.0)
    for _ in range(30):
        val = config.k_wire * l_abs * f + config.k_nle * (1.0 - np.exp(-f / config.f0))
        f = np.clip(f - (val - target) / _stretch_slope(config, l_abs, f), 0.0, 1e5)
    return f


# --- gravity ---

def gravity_torque(config: PlantConfig, theta) -> np.ndarray:
    """Joint torques (N m) needed to hold the posture against gravity."""
    theta = as_vector(theta, config.n_joints, "theta")
    d = config.n_joints
    phi = np.cumsum(theta)  # absolute link angles; link hangs at zero
    dirs = np.stack([np.sin(phi), -np.cos(phi)], axis=1)
    joints = np.zeros((d, 2))
    for j in range(1, d):
        joints[j] = joints[j - 1] + config.link_length * dirs[j - 1]
    coms = joints + config.com_offset * dirs
    tau = np.zeros(d)
    w = config.link_mass * config.gravity
    for j in range(d):
        tau[j] = w * (coms[j:, 0] - joints[j, 0]).sum()
    return tau


# --- static sampling (geometric model; training data source) ---

def sample_static(config: PlantConfig, theta, tension) -> SensorTriple:
    """Synthetic consistent triple from the straight-line model."""
    theta = as_vector(theta, config.n_joints, "theta")
    f = as_vector(tension, config.n_muscles, "tension")
    lims = np.array(config.joint_limits)
    if np.any(theta < lims[:, 0] - 1e-9) or np.any(theta > lims[:, 1] + 1e-9):
        raise ValueError("theta outside joint limits")
    if np.any(f < 0) or np.any(f > config.f_max + 1e-9):
        raise ValueError(f"tension outside [0, f_max={config.f_max}]")
    length = geo_lengths(config, theta) - elastic_stretch(
        config, geo_lengths_abs(config, theta), f)
    return SensorTriple(theta, f, length)


def make_static_dataset(config: PlantConfig, n: int, rng) -> np.ndarray:
    """(n, D + 2M) physical rows sampled over the whole workspace."""
    rng = np.random.default_rng(rng)
    lims = np.array(config.joint_limits)
    rows = np.empty((n, config.n_joints + 2 * config.n_muscles))
    for i in range(n):
        theta = rng.uniform(lims[:, 0], lims[:, 1])
        f = rng.uniform(0.0, config.f_max, size=config.n_muscles)
        rows[i] = sample_static(config, theta, f).as_row()
    return rows


# --- simulator ---

@dataclass
class PlantState:
    theta: np.ndarray
    theta_dot: np.ndarray
    tension: np.ndarray
    length: np.ndarray          # reported reading (mm, includes any rebase)
    l_ref: np.ndarray
    health: list = field(default_factory=list)


class TendonPlant:
    """Stateful simulator; all randomness lives in callers.

    sensor_rng turns on measurement noise for measured() readings; the
    servo loop and the dynamics always see exact state.
    """

    def __init__(self, config: PlantConfig, theta0=None, sensor_rng=None):
        if config.n_muscles == 0:
            raise ValueError("config has no muscles")
        self.config = config
        self.sensor_rng = (None if sensor_rng is None
                           else np.random.default_rng(sensor_rng))
        lims = np.array(config.joint_limits)
        theta0 = (np.zeros(config.n_joints) if theta0 is None
                  else as_vector(theta0, config.n_joints, "theta0"))
        self.theta = np.clip(theta0, lims[:, 0], lims[:, 1])
        self.theta_dot = np.zeros(config.n_joints)
        self.time = 0.0
        self.health = [MuscleHealth.OK] * config.n_muscles
        self.origin_shift = np.zeros(config.n_muscles)  # path shortening (mm)
        self.rebase = np.zeros(config.n_muscles)        # sensor-side correction
        # start taut at bias tension with the command matching the reading
        self.tension = np.full(config.n_muscles, config.f_bias)
        path_rel = self._path_rel()
        self.wire_out = path_rel - elastic_stretch(
            config, self._path_abs(), self.tension)
        self.l_ref = self.wire_out + self.rebase
        self._lims = lims
        self._g_cache = None
        self._g_cache_step = -1
        self._step_count = 0

    # --- readings ---

    def _path_abs(self) -> np.ndarray:
        return true_lengths_abs(self.config, self.theta)

    def _path_rel(self) -> np.ndarray:
        return true_lengths(self.config, self.theta) - self.origin_shift

    @property
    def length(self) -> np.ndarray:
        return self.wire_out + self.rebase

    def measured(self) -> SensorTriple:
        theta = self.theta.copy()
        tension = self.tension.copy()
        length = self.length.copy()
        if self.sensor_rng is not None:
            cfg = self.config
            theta += self.sensor_rng.normal(0.0, cfg.noise_angle, theta.shape)
            tension = np.maximum(
                tension + self.sensor_rng.normal(
                    0.0, cfg.noise_tension, tension.shape), 0.0)
            length += self.sensor_rng.normal(0.0, cfg.noise_length,
                                             length.shape)
        return SensorTriple(theta, tension, length)

    def state(self) -> PlantState:
        return PlantState(self.theta.copy(), self.theta_dot.copy(),
                          self.tension.copy(), self.length.copy(),
                          self.l_ref.copy(), list(self.health))

    # --- commands and events ---

    def set_targets(self, l_ref) -> None:
        self.l_ref = as_vector(l_ref, self.config.n_muscles, "l_ref").copy()

    def inject_rupture(self, muscle: int, kind: RuptureKind,
                       offset: float = 0.0) -> None:
        if not 0 <= muscle < self.config.n_muscles:
            raise ValueError("unknown muscle index")
        if self.health[muscle] is not MuscleHealth.OK:
            raise ValueError(f"muscle {muscle} already injured")
        if kind is RuptureKind.WIRE_CUT:
            self.health[muscle] = MuscleHealth.WIRE_CUT
            self.tension[muscle] = 0.0
        elif kind is RuptureKind.ENDPOINT_OFFSET:
            if offset <= 0:
                raise ValueError("endpoint offset must be positive (mm)")
            self.health[muscle] = MuscleHealth.ENDPOINT_OFFSET
            self.origin_shift[muscle] += offset
        else:
            raise ValueError(f"unknown rupture kind {kind!r}")

    def rebase_length_origin(self, muscle: int, delta: float) -> None:
        """Shift the reported length of one muscle (sensor re-zeroing)."""
        if not 0 <= muscle < self.config.n_muscles:
            raise ValueError("unknown muscle index")
        self.rebase[muscle] += float(delta)

    # --- dynamics ---

    def _tension_and_winding(self):
        """Implicit per-step solve of the stiffness law through the elastic
        element; returns realized tensions and updates wire_out in place."""
        cfg = self.config
        path_abs = self._path_abs()
        path_rel = self._path_rel()
        w_min = self.l_ref - cfg.dl_max_verify - self.rebase
        cut = np.array([h is MuscleHealth.WIRE_CUT for h in self.health])

        # reading error at tension f (taut): path_rel - stretch(f) + rebase - l_ref
        e_bias = (path_rel - elastic_stretch(cfg, path_abs, np.full_like(
            path_rel, cfg.f_bias)) + self.rebase - self.l_ref)
        f = np.full(cfg.n_muscles, cfg.f_bias)
        active = e_bias > 0.0
        if np.any(active):
            hi = cfg.f_bias + cfg.k_stiff * e_bias
            fa = np.where(active, hi, f)
            for _ in range(12):
                err = (path_rel - elastic_stretch(cfg, path_abs, fa)
                       + self.rebase - self.l_ref)
                g = fa - cfg.f_bias - cfg.k_stiff * err
                gp = 1.0 + cfg.k_stiff * _stretch_slope(cfg, path_abs, fa)
                fa = np.clip(fa - g / gp, cfg.f_bias, np.maximum(hi, cfg.f_bias))
            f = np.where(active, fa, f)

        w_servo = path_rel - elastic_stretch(cfg, path_abs, f)
        taut0 = path_rel  # zero-tension taut winding
        slack = self.wire_out > taut0 + 1e-9

        # slack wire: free-wheel toward tautness at the slack winding rate
        w_slack = np.minimum(self.wire_out,
                             np.maximum(self.wire_out - cfg.slack_speed * cfg.dt,
                                        w_min))
        still_slack = w_slack > taut0 + 1e-9

        w = np.where(slack & still_slack, w_slack, w_servo)
        f = np.where(slack & still_slack, 0.0, f)

        # overwind guard: motor refuses to wind farther than dl_max past the
        # command; tension then follows from the clamped winding
        clamped = w < w_min
        if np.any(clamped):
            w = np.where(clamped, w_min, w)
            need = path_rel - w  # stretch the clamped winding would impose
            f_cl = np.where(need > 0.0,
                            _invert_stretch(cfg, path_abs, need, self.tension),
                            0.0)
            f = np.where(clamped, f_cl, f)

        # cut muscles transmit nothing and only ever wind in
        w_cut = np.minimum(self.wire_out,
                           np.maximum(self.wire_out - cfg.slack_speed * cfg.dt,
                                      w_min))
        w = np.where(cut, w_cut, w)
        f = np.where(cut, 0.0, f)

        self.wire_out = w
        return f

    def _moment_arms(self) -> np.ndarray:
        if self._g_cache_step < 0 or self._step_count - self._g_cache_step >= 5:
            self._g_cache = moment_arms(self.config, self.theta)
            self._g_cache_step = self._step_count
        return self._g_cache

    def step(self, n_steps: int = 1) -> None:
        cfg = self.config
        for _ in range(n_steps):
            f = self._tension_and_winding()
            self.tension = f
            g = self._moment_arms()  # mm/rad
            tau = (-(g * 1e-3).T @ f
                   - gravity_torque(cfg, self.theta)
                   - cfg.damping * self.theta_dot
                   - cfg.coulomb * np.tanh(self.theta_dot / cfg.coulomb_vel))
            self.theta_dot = self.theta_dot + cfg.dt * tau / cfg.inertia
            theta = self.theta + cfg.dt * self.theta_dot
            clipped = np.clip(theta, self._lims[:, 0], self._lims[:, 1])
            self.theta_dot = np.where(theta == clipped, self.theta_dot, 0.0)
            self.theta = clipped
            self.time += cfg.dt
            self._step_count += 1

    def run(self, duration: float) -> None:
        n = int(round(duration / self.config.dt))
        if abs(n * self.config.dt - duration) > 1e-9:
            raise ValueError("duration must be a multiple of config.dt")
        self.step(n)

    def run_until_settled(self, timeout: float = 5.0, vel_eps: float = 0.01,
                          hold_time: float = 0.2) -> bool:
        """Step until |theta_dot| < vel_eps sustained hold_time; False on timeout."""
        cfg = self.config
        needed = int(round(hold_time / cfg.dt))
        quiet = 0
        for _ in range(int(round(timeout / cfg.dt))):
            self.step()
            quiet = quiet + 1 if np.all(np.abs(self.theta_dot) < vel_eps) else 0
            if quiet >= needed:
                return True
        return False


# --- config (de)serialization ---

def config_to_dict(config: PlantConfig) -> dict:
    out = {}
    for name in PlantConfig.__dataclass_fields__:
        value = getattr(config, name)
        if name == "muscles":
            value = [{"joint": m.joint,
                      "proximal": [list(p) for p in m.proximal],
                      "distal": [list(p) for p in m.distal]} for m in value]
        elif name == "joint_limits":
            value = [list(lim) for lim in value]
        out[name] = value
    return out


def config_from_dict(data: dict) -> PlantConfig:
    data = dict(data)
    muscles = tuple(
        MuscleRoute(m["joint"],
                    tuple(tuple(p) for p in m["proximal"]),
                    tuple(tuple(p) for p in m["distal"]))
        for m in data.pop("muscles"))
    limits = tuple(tuple(lim) for lim in data.pop("joint_limits"))
    return PlantConfig(joint_limits=limits, muscles=muscles, **data)


def save_config(config: PlantConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(config), fh, indent=2, sort_keys=True)


def load_config(path) -> PlantConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))
