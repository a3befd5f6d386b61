"""Deterministic synthetic camera + IMU scenes with static and moving landmarks.

The body follows an analytic trajectory (linear drift plus per-axis
sinusoids, ZYX Euler attitude with sinusoidal angles), so velocities,
accelerations and body rates are exact. Dynamic objects are rigid point
sets moving with piecewise-constant velocity. Feature tracks use oracle
association by landmark id; a track that leaves the image is never
re-acquired. All randomness comes from named PCG64 streams derived from
the scenario seed.
"""
from __future__ import annotations

import copy
import dataclasses
import importlib.resources
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .geometry import CameraIntrinsics, Pose, Rotation
from .imu_preint import GRAVITY, ExtrinsicCalib, ImuNoiseParams, ImuSample
from .ba.states import FrameState

SCHEMA_VERSION = 1
DEFAULT_R_CB = np.array([[0.0, 0.0, 1.0],
                         [-1.0, 0.0, 0.0],
                         [0.0, -1.0, 0.0]])


class ConfigError(ValueError):
    """Scenario configuration failed validation; message names the field."""


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named sub-stream of ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class Sinusoid:
    amplitude: float = 0.0
    frequency: float = 0.0  # Hz
    phase: float = 0.0      # rad


@dataclass
class AngleProfile:
    initial: float = 0.0
    rate: float = 0.0
    sinusoids: list = field(default_factory=list)


@dataclass
class TrajectorySpec:
    origin: tuple = (0.0, 0.0, 1.5)
    velocity: tuple = (2.0, 0.0, 0.0)
    x: list = field(default_factory=list)
    y: list = field(default_factory=list)
    z: list = field(default_factory=list)
    yaw: AngleProfile = field(default_factory=AngleProfile)
    pitch: AngleProfile = field(default_factory=AngleProfile)
    roll: AngleProfile = field(default_factory=AngleProfile)


@dataclass
class StaticSpec:
    count: int = 3000
    bounds: tuple = ((-5.0, 60.0), (-10.0, 10.0), (-1.0, 7.0))
    corridor: float = 1.5


@dataclass
class DynamicObject:
    """Rigid point set; ``segments`` lists ``(t_start, velocity)`` overrides."""
    centroid: tuple
    velocity: tuple
    offsets: np.ndarray
    segments: list = field(default_factory=list)

    def __post_init__(self):
        self.centroid = np.asarray(self.centroid, dtype=float)
        self.velocity = np.asarray(self.velocity, dtype=float)
        self.offsets = np.asarray(self.offsets, dtype=float).reshape(-1, 3)
        self.segments = sorted((float(t), np.asarray(v, dtype=float)) for t, v in self.segments)

    def velocity_at(self, t: float) -> np.ndarray:
        v = self.velocity
        for ts, vs in self.segments:
            if t >= ts:
                v = vs
        return v

    def centroid_at(self, t: float) -> np.ndarray:
        pos = self.centroid.copy()
        t0, v = 0.0, self.velocity
        for ts, vs in self.segments:
            if ts >= t:
                break
            if ts > t0:
                pos += v * (ts - t0)
                t0 = ts
            v = vs
        return pos + v * (t - t0)

    def points_at(self, t: float) -> np.ndarray:
        return self.centroid_at(t) + self.offsets


@dataclass
class DynamicGenerator:
    """Random co-moving objects bobbing transverse to the viewing direction."""
    count: int = 0
    points_per_object: int = 40
    size: tuple = (2.0, 2.0, 1.5)
    depth: tuple = (7.0, 13.0)
    lateral: tuple = (2.0, 4.0)
    height: tuple = (-1.0, 1.0)
    speed: tuple = (1.0, 1.5)
    period: tuple = (1.5, 2.5)
    axis: tuple = (0.0, 0.0, 1.0)


@dataclass
class TrackerSpec:
    max_features: int = 120
    max_depth: float = 40.0
    min_depth: float = 0.5
    mean_lifetime: float = 0.0   # frames; 0 keeps tracks until they leave view


@dataclass
class ScenarioConfig:
    name: str = "custom"
    duration: float = 6.0
    frame_rate: float = 10.0
    imu_rate: float = 200.0
    seed: int = 0
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    static: StaticSpec = field(default_factory=StaticSpec)
    dynamic_objects: list = field(default_factory=list)
    dynamic_generator: DynamicGenerator = field(default_factory=DynamicGenerator)
    tracker: TrackerSpec = field(default_factory=TrackerSpec)
    pixel_noise: float = 1.0
    imu_noise: ImuNoiseParams = field(default_factory=ImuNoiseParams)
    accel_bias: tuple = (0.0, 0.0, 0.0)
    gyro_bias: tuple = (0.0, 0.0, 0.0)
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    extrinsics: ExtrinsicCalib = field(default_factory=lambda: ExtrinsicCalib(Rotation.from_matrix(DEFAULT_R_CB),
                                                                              np.array([0.05, 0.0, 0.02])))

    @property
    def imu_per_frame(self) -> int:
        return int(round(self.imu_rate / self.frame_rate))

    @property
    def n_frames(self) -> int:
        return int(math.floor(self.duration * self.frame_rate + 1e-9)) + 1

    def validate(self) -> "ScenarioConfig":
        def need(cond, fld, msg):
            if not cond:
                raise ConfigError(f"{fld}: {msg}")
        need(self.duration > 0, "duration", "must be positive")
        need(self.frame_rate > 0, "frame_rate", "must be positive")
        need(self.imu_rate > 0, "imu_rate", "must be positive")
        ratio = self.imu_rate / self.frame_rate
        need(abs(ratio - round(ratio)) < 1e-9 and round(ratio) >= 1, "imu_rate",
             "must be an integer multiple of frame_rate")
        need(self.static.count > 0, "static.count", "must be positive")
        need(self.tracker.max_features > 0, "tracker.max_features", "must be positive")
        need(self.tracker.mean_lifetime == 0 or self.tracker.mean_lifetime >= 1,
             "tracker.mean_lifetime", "must be 0 (unlimited) or at least 1 frame")
        need(self.pixel_noise >= 0, "pixel_noise", "must be non-negative")
        need(self.dynamic_generator.count >= 0, "dynamic_generator.count", "must be non-negative")
        if self.dynamic_generator.count:
            need(self.dynamic_generator.points_per_object > 0, "dynamic_generator.points_per_object",
                 "must be positive")
        for k, obj in enumerate(self.dynamic_objects):
            need(len(obj.offsets) > 0, f"dynamic_objects[{k}].offsets", "must hold at least one point")
        for name, (lo, hi) in zip("xyz", self.static.bounds):
            need(hi > lo, f"static.bounds.{name}", "upper bound must exceed lower bound")
        return self

    def to_dict(self) -> dict:
        """Plain nested representation (used for hashing and persistence)."""
        def conv(o):
            if isinstance(o, np.ndarray):
                return [conv(x) for x in o.tolist()]
            if isinstance(o, Rotation):
                return conv(o.matrix())
            if dataclasses.is_dataclass(o):
                if isinstance(o, CameraIntrinsics):
                    return {f.name: getattr(o, f.name) for f in dataclasses.fields(o)}
                return {f.name: conv(getattr(o, f.name)) for f in dataclasses.fields(o)}
            if isinstance(o, (list, tuple)):
                return [conv(x) for x in o]
            if isinstance(o, (np.floating, np.integer)):
                return o.item()
            return o
        d = conv(self)
        d["schema"] = SCHEMA_VERSION
        d["dynamic_objects"] = [{"centroid": conv(o.centroid), "velocity": conv(o.velocity),
                                 "offsets": conv(o.offsets),
                                 "segments": [[t, conv(v)] for t, v in o.segments]}
                                for o in self.dynamic_objects]
        return d


def _sinusoids(items, where) -> list:
    out = []
    for k, it in enumerate(items or []):
        if not isinstance(it, dict):
            raise ConfigError(f"{where}[{k}]: expected mapping with amplitude/frequency/phase")
        out.append(Sinusoid(float(it.get("amplitude", 0.0)), float(it.get("frequency", 0.0)),
                            float(it.get("phase", 0.0))))
    return out


def _angle(d, where) -> AngleProfile:
    d = d or {}
    return AngleProfile(float(d.get("initial", 0.0)), float(d.get("rate", 0.0)),
                        _sinusoids(d.get("sinusoids"), f"{where}.sinusoids"))


def _vec(v, where, n=3):
    try:
        a = np.asarray(v, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: not numeric ({exc})") from None
    if a.shape != (n,):
        raise ConfigError(f"{where}: expected {n} values, got shape {a.shape}")
    return a


def config_from_dict(d: dict) -> ScenarioConfig:
    """Build a validated :class:`ScenarioConfig` from its mapping form."""
    if not isinstance(d, dict):
        raise ConfigError("scenario: top level must be a mapping")
    schema = d.get("schema", SCHEMA_VERSION)
    if schema != SCHEMA_VERSION:
        raise ConfigError(f"schema: unsupported version {schema!r} (expected {SCHEMA_VERSION})")
    known = {"schema", "name", "duration", "frame_rate", "imu_rate", "seed", "trajectory", "static",
             "dynamic_objects", "dynamic_generator", "tracker", "pixel_noise", "imu_noise",
             "accel_bias", "gyro_bias", "intrinsics", "extrinsics"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown field")
    cfg = ScenarioConfig()
    try:
        for key in ("duration", "frame_rate", "imu_rate", "pixel_noise"):
            if key in d:
                setattr(cfg, key, float(d[key]))
        if "name" in d:
            cfg.name = str(d["name"])
        if "seed" in d:
            cfg.seed = int(d["seed"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scenario: {exc}") from None

    tr = d.get("trajectory") or {}
    cfg.trajectory = TrajectorySpec(
        origin=tuple(_vec(tr.get("origin", (0.0, 0.0, 1.5)), "trajectory.origin")),
        velocity=tuple(_vec(tr.get("velocity", (2.0, 0.0, 0.0)), "trajectory.velocity")),
        x=_sinusoids(tr.get("x"), "trajectory.x"),
        y=_sinusoids(tr.get("y"), "trajectory.y"),
        z=_sinusoids(tr.get("z"), "trajectory.z"),
        yaw=_angle(tr.get("yaw"), "trajectory.yaw"),
        pitch=_angle(tr.get("pitch"), "trajectory.pitch"),
        roll=_angle(tr.get("roll"), "trajectory.roll"))

    st = d.get("static") or {}
    bounds = st.get("bounds", StaticSpec().bounds)
    try:
        bounds = tuple((float(lo), float(hi)) for lo, hi in bounds)
    except (TypeError, ValueError):
        raise ConfigError("static.bounds: expected three [low, high] pairs") from None
    if len(bounds) != 3:
        raise ConfigError("static.bounds: expected three [low, high] pairs")
    cfg.static = StaticSpec(int(st.get("count", StaticSpec.count)), bounds, float(st.get("corridor", StaticSpec.corridor)))

    objs = []
    for k, o in enumerate(d.get("dynamic_objects") or []):
        where = f"dynamic_objects[{k}]"
        if "random_points" in o:
            rp = o["random_points"]
            rng = rng_stream(int(rp.get("seed", k)), "object-shape")
            size = _vec(rp.get("size", (1.0, 1.0, 1.0)), f"{where}.random_points.size")
            offsets = (rng.random((int(rp.get("count", 10)), 3)) - 0.5) * size
        else:
            offsets = np.asarray(o.get("offsets", [[0, 0, 0]]), dtype=float)
        if offsets.ndim != 2 or offsets.shape[1] != 3:
            raise ConfigError(f"{where}.offsets: expected list of 3-vectors")
        segs = [(float(s[0]), _vec(s[1], f"{where}.segments[{i}]")) for i, s in enumerate(o.get("segments") or [])]
        objs.append(DynamicObject(_vec(o.get("centroid"), f"{where}.centroid"),
                                  _vec(o.get("velocity", (0, 0, 0)), f"{where}.velocity"), offsets, segs))
    cfg.dynamic_objects = objs

    g = d.get("dynamic_generator") or {}
    gd = DynamicGenerator()
    cfg.dynamic_generator = DynamicGenerator(
        count=int(g.get("count", gd.count)),
        points_per_object=int(g.get("points_per_object", gd.points_per_object)),
        size=tuple(_vec(g.get("size", gd.size), "dynamic_generator.size")),
        depth=tuple(_vec(g.get("depth", gd.depth), "dynamic_generator.depth", 2)),
        lateral=tuple(_vec(g.get("lateral", gd.lateral), "dynamic_generator.lateral", 2)),
        height=tuple(_vec(g.get("height", gd.height), "dynamic_generator.height", 2)),
        speed=tuple(_vec(g.get("speed", gd.speed), "dynamic_generator.speed", 2)),
        period=tuple(_vec(g.get("period", gd.period), "dynamic_generator.period", 2)),
        axis=tuple(_vec(g.get("axis", gd.axis), "dynamic_generator.axis")))

    tk = d.get("tracker") or {}
    cfg.tracker = TrackerSpec(int(tk.get("max_features", TrackerSpec.max_features)),
                              float(tk.get("max_depth", TrackerSpec.max_depth)),
                              float(tk.get("min_depth", TrackerSpec.min_depth)),
                              float(tk.get("mean_lifetime", TrackerSpec.mean_lifetime)))

    n = d.get("imu_noise") or {}
    try:
        cfg.imu_noise = ImuNoiseParams(float(n.get("gyro_noise", 0.0)), float(n.get("accel_noise", 0.0)),
                                       float(n.get("gyro_bias_rw", 0.0)), float(n.get("accel_bias_rw", 0.0)))
    except ValueError as exc:
        raise ConfigError(f"imu_noise: {exc}") from None
    cfg.accel_bias = tuple(_vec(d.get("accel_bias", (0, 0, 0)), "accel_bias"))
    cfg.gyro_bias = tuple(_vec(d.get("gyro_bias", (0, 0, 0)), "gyro_bias"))

    if "intrinsics" in d:
        try:
            cfg.intrinsics = CameraIntrinsics(**{k: float(v) if k in ("fx", "fy", "cx", "cy") else int(v)
                                                 for k, v in d["intrinsics"].items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"intrinsics: {exc}") from None
    if "extrinsics" in d:
        e = d["extrinsics"]
        R = np.asarray(e.get("R_cb", DEFAULT_R_CB), dtype=float)
        if R.shape != (3, 3) or not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ConfigError("extrinsics.R_cb: expected a 3x3 rotation matrix")
        cfg.extrinsics = ExtrinsicCalib(Rotation.from_matrix(R), _vec(e.get("t_cb", (0, 0, 0)), "extrinsics.t_cb"))
    return cfg.validate()


PRESETS = ("static_easy", "city_high", "city_mid", "noise_free", "stop_and_go")


def preset_path(name: str) -> Path:
    return Path(str(importlib.resources.files("dynba") / "presets" / f"{name}.yaml"))


def load_scenario(path_or_name) -> ScenarioConfig:
    """Load a YAML scenario from a path or a bundled preset name."""
    p = Path(path_or_name)
    if not p.exists() and not p.suffix and str(path_or_name) in PRESETS:
        p = preset_path(str(path_or_name))
    if not p.exists():
        raise FileNotFoundError(f"scenario file not found: {path_or_name}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: invalid YAML ({exc})") from None
    return config_from_dict(data)


def with_overrides(cfg: ScenarioConfig, **kw) -> ScenarioConfig:
    """Copy with top-level or dotted (``tracker.max_features``) fields replaced."""
    out = copy.deepcopy(cfg)
    for key, val in kw.items():
        obj = out
        parts = key.replace("__", ".").split(".")
        for p in parts[:-1]:
            obj = getattr(obj, p)
        if not hasattr(obj, parts[-1]):
            raise ConfigError(f"{key}: unknown field")
        setattr(obj, parts[-1], val)
    return out.validate()


# ---------------------------------------------------------------------------
# trajectory
# ---------------------------------------------------------------------------

def _sin_terms(items, t, order):
    """Sum of sinusoids (order 0) or their time derivatives."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    for s in items:
        w = 2.0 * math.pi * s.frequency
        arg = w * t + s.phase
        if order == 0:
            out = out + s.amplitude * np.sin(arg)
        elif order == 1:
            out = out + s.amplitude * w * np.cos(arg)
        else:
            out = out - s.amplitude * w * w * np.sin(arg)
    return out


def _angle_terms(prof: AngleProfile, t, order):
    base = prof.initial + prof.rate * t if order == 0 else (prof.rate + 0 * t if order == 1 else 0 * t)
    return base + _sin_terms(prof.sinusoids, t, order)


def _euler_matrix(yaw, pitch, roll):
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    n = np.shape(yaw)
    R = np.empty(n + (3, 3))
    R[..., 0, 0] = cy * cp
    R[..., 0, 1] = cy * sp * sr - sy * cr
    R[..., 0, 2] = cy * sp * cr + sy * sr
    R[..., 1, 0] = sy * cp
    R[..., 1, 1] = sy * sp * sr + cy * cr
    R[..., 1, 2] = sy * sp * cr - cy * sr
    R[..., 2, 0] = -sp
    R[..., 2, 1] = cp * sr
    R[..., 2, 2] = cp * cr
    return R


class Trajectory:
    """Analytic body trajectory; all methods accept scalar or array time."""

    def __init__(self, spec: TrajectorySpec):
        self.spec = spec
        self._axes = (spec.x, spec.y, spec.z)

    def position(self, t):
        t = np.asarray(t, dtype=float)
        o, v = np.asarray(self.spec.origin), np.asarray(self.spec.velocity)
        return np.stack([o[i] + v[i] * t + _sin_terms(self._axes[i], t, 0) for i in range(3)], axis=-1)

    def velocity(self, t):
        t = np.asarray(t, dtype=float)
        v = np.asarray(self.spec.velocity)
        return np.stack([v[i] + _sin_terms(self._axes[i], t, 1) for i in range(3)], axis=-1)

    def acceleration(self, t):
        t = np.asarray(t, dtype=float)
        return np.stack([_sin_terms(self._axes[i], t, 2) for i in range(3)], axis=-1)

    def euler(self, t, order=0):
        s = self.spec
        return (_angle_terms(s.yaw, t, order), _angle_terms(s.pitch, t, order), _angle_terms(s.roll, t, order))

    def rotation_matrix(self, t):
        return _euler_matrix(*self.euler(np.asarray(t, dtype=float)))

    def rotation(self, t: float) -> Rotation:
        return Rotation.from_matrix(self.rotation_matrix(float(t)))

    def angular_velocity_body(self, t):
        t = np.asarray(t, dtype=float)
        _, p, r = self.euler(t)
        dy, dp, dr = self.euler(t, 1)
        sp, cp = np.sin(p), np.cos(p)
        sr, cr = np.sin(r), np.cos(r)
        return np.stack([dr - dy * sp,
                         dp * cr + dy * sr * cp,
                         -dp * sr + dy * cr * cp], axis=-1)

    def pose(self, t: float) -> Pose:
        return Pose(self.rotation(t), self.position(float(t)))


def generate_trajectory(config: ScenarioConfig) -> Trajectory:
    return Trajectory(config.trajectory)


# ---------------------------------------------------------------------------
# IMU
# ---------------------------------------------------------------------------

def imu_times(config: ScenarioConfig) -> np.ndarray:
    n = (config.n_frames - 1) * config.imu_per_frame + 1
    return np.arange(n) / config.imu_rate


def simulate_imu(traj: Trajectory, times, noise: ImuNoiseParams, accel_bias, gyro_bias, seed: int,
                 gravity=GRAVITY):
    """Sampled IMU stream plus the true bias at every sample.

    Returns ``(gyro (n,3), accel (n,3), bias_a (n,3), bias_g (n,3))``.
    White noise is drawn per sample with standard deviation
    ``density / sqrt(dt)``; biases follow a Gaussian random walk.
    """
    times = np.asarray(times, dtype=float)
    n = len(times)
    R = traj.rotation_matrix(times)
    a_w = traj.acceleration(times) - np.asarray(gravity)
    accel = np.einsum("nji,nj->ni", R, a_w)
    gyro = traj.angular_velocity_body(times)
    dt = times[1] - times[0] if n > 1 else 1.0
    rng = rng_stream(seed, "imu")
    ba = np.tile(np.asarray(accel_bias, dtype=float), (n, 1))
    bg = np.tile(np.asarray(gyro_bias, dtype=float), (n, 1))
    if noise.accel_bias_rw > 0:
        steps = rng.standard_normal((n, 3)) * noise.accel_bias_rw * math.sqrt(dt)
        steps[0] = 0.0
        ba = ba + np.cumsum(steps, axis=0)
    if noise.gyro_bias_rw > 0:
        steps = rng.standard_normal((n, 3)) * noise.gyro_bias_rw * math.sqrt(dt)
        steps[0] = 0.0
        bg = bg + np.cumsum(steps, axis=0)
    accel = accel + ba
    gyro = gyro + bg
    if noise.accel_noise > 0:
        accel = accel + rng.standard_normal((n, 3)) * noise.accel_noise / math.sqrt(dt)
    if noise.gyro_noise > 0:
        gyro = gyro + rng.standard_normal((n, 3)) * noise.gyro_noise / math.sqrt(dt)
    return gyro, accel, ba, bg


# ---------------------------------------------------------------------------
# world and observations
# ---------------------------------------------------------------------------

@dataclass
class World:
    static_ids: np.ndarray
    static_points: np.ndarray
    objects: list
    object_ids: list  # id arrays per object

    @property
    def dynamic_ids(self) -> np.ndarray:
        return np.concatenate(self.object_ids) if self.object_ids else np.zeros(0, dtype=np.int64)

    def points_at(self, t: float):
        ids = [self.static_ids] + list(self.object_ids)
        pts = [self.static_points] + [o.points_at(t) for o in self.objects]
        return np.concatenate(ids), np.concatenate(pts)

    def labels(self) -> dict[int, bool]:
        out = {int(i): False for i in self.static_ids}
        out.update({int(i): True for i in self.dynamic_ids})
        return out


def _static_points(spec: StaticSpec, rng) -> np.ndarray:
    lo = np.array([b[0] for b in spec.bounds])
    hi = np.array([b[1] for b in spec.bounds])
    pts = []
    need = spec.count
    while need > 0:
        cand = lo + (hi - lo) * rng.random((2 * need + 16, 3))
        cand = cand[np.abs(cand[:, 1]) >= spec.corridor]
        pts.append(cand[:need])
        need -= len(pts[-1])
    return np.concatenate(pts)


def _generated_objects(gen: DynamicGenerator, traj: Trajectory, duration: float, rng) -> list:
    if gen.count == 0:
        return []
    p0 = traj.position(0.0)
    R0 = traj.rotation_matrix(0.0)
    base_v = np.asarray(traj.spec.velocity, dtype=float)
    axis = np.asarray(gen.axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    objs = []
    for k in range(gen.count):
        side = 1.0 if k % 2 == 0 else -1.0
        depth = rng.uniform(*gen.depth)
        lat = side * rng.uniform(*gen.lateral)
        h = rng.uniform(*gen.height)
        centroid = p0 + R0 @ np.array([depth, lat, h])
        offsets = (rng.random((gen.points_per_object, 3)) - 0.5) * np.asarray(gen.size)
        speed = rng.uniform(*gen.speed)
        half = 0.5 * rng.uniform(*gen.period)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        v0 = base_v + sign * speed * axis
        segs = []
        t = rng.uniform(0.0, half)
        while t < duration:
            sign = -sign
            segs.append((t, base_v + sign * speed * axis))
            t += half
        objs.append(DynamicObject(centroid, v0, offsets, segs))
    return objs


def build_world(config: ScenarioConfig, traj: Trajectory | None = None) -> World:
    traj = traj or generate_trajectory(config)
    rng = rng_stream(config.seed, "world")
    static = _static_points(config.static, rng)
    objs = list(config.dynamic_objects) + _generated_objects(config.dynamic_generator, traj, config.duration, rng)
    static_ids = np.arange(len(static), dtype=np.int64)
    nxt = len(static)
    obj_ids = []
    for o in objs:
        obj_ids.append(np.arange(nxt, nxt + len(o.offsets), dtype=np.int64))
        nxt += len(o.offsets)
    return World(static_ids, static, objs, obj_ids)


def camera_pose(body: Pose, extr: ExtrinsicCalib) -> Pose:
    return body * extr.pose


def observe(ids, points_world, cam_pose: Pose, intr: CameraIntrinsics, sigma: float, rng=None,
            min_depth: float = 1e-6, max_depth: float = math.inf):
    """Project world points into a camera, cull, add iid pixel noise.

    Points behind the camera, outside the depth range or outside the image
    after noise are dropped. Returns ``(ids, pixels, depths)``.
    """
    ids = np.asarray(ids, dtype=np.int64)
    Pc = (np.asarray(points_world, dtype=float) - cam_pose.t) @ cam_pose.R
    z = Pc[:, 2]
    ok = (z > min_depth) & (z < max_depth)
    ids, Pc, z = ids[ok], Pc[ok], z[ok]
    uv = np.column_stack([intr.fx * Pc[:, 0] / z + intr.cx, intr.fy * Pc[:, 1] / z + intr.cy])
    if sigma > 0:
        if rng is None:
            raise ValueError("noisy observation needs a generator")
        uv = uv + sigma * rng.standard_normal(uv.shape)
    inside = intr.in_image(uv)
    return ids[inside], uv[inside], z[inside]


class Tracker:
    """Oracle-association feature tracker with a per-frame feature budget.

    Free slots are filled with the visible, never-tracked landmarks of
    highest fixed priority, so two runs that reject different features
    still share every other selection.
    """

    def __init__(self, max_features: int, priority, lifetime=None):
        self.max_features = max_features
        self.priority = np.asarray(priority, dtype=float)
        self.lifetime = None if lifetime is None else np.asarray(lifetime, dtype=np.int64)
        self.tracked: list[int] = []
        self.age: dict[int, int] = {}
        self.dead: set[int] = set()

    def _alive(self, i: int, vis) -> bool:
        if i not in vis:
            return False
        return self.lifetime is None or self.age[i] < self.lifetime[i]

    def step(self, visible_ids) -> np.ndarray:
        vis = set(int(i) for i in visible_ids)
        keep = [i for i in self.tracked if self._alive(i, vis)]
        self.dead.update(i for i in self.tracked if not self._alive(i, vis))
        room = self.max_features - len(keep)
        if room > 0:
            have = set(keep)
            cand = np.array(sorted(i for i in vis if i not in have and i not in self.dead), dtype=np.int64)
            if len(cand):
                pick = cand[np.argsort(-self.priority[cand], kind="stable")[:room]]
                keep.extend(int(i) for i in pick)
        for i in keep:
            self.age[i] = self.age.get(i, 0) + 1
        self.tracked = keep
        return np.array(keep, dtype=np.int64)

    def reject(self, ids):
        """Drop features the estimator discarded; their slots are refilled next frame."""
        ids = set(int(i) for i in ids)
        if ids:
            self.dead.update(ids)
            self.tracked = [i for i in self.tracked if i not in ids]


# ---------------------------------------------------------------------------
# scenario
# ---------------------------------------------------------------------------

@dataclass
class FrameObservations:
    frame_id: int
    timestamp: float
    ids: np.ndarray
    pixels: np.ndarray

    def __len__(self):
        return len(self.ids)

    def select(self, ids) -> "FrameObservations":
        """Subset in the order of ``ids`` (all must be present)."""
        order = np.argsort(self.ids, kind="stable")
        pos = order[np.searchsorted(self.ids, np.asarray(ids, dtype=np.int64), sorter=order)]
        return FrameObservations(self.frame_id, self.timestamp, self.ids[pos], self.pixels[pos])


@dataclass
class GroundTruth:
    frames: list          # FrameState per frame
    labels: dict          # landmark id -> is_dynamic
    world: World

    def landmark_position(self, landmark_id: int, t: float) -> np.ndarray:
        w = self.world
        if landmark_id < len(w.static_ids):
            return w.static_points[landmark_id]
        for o, ids in zip(w.objects, w.object_ids):
            if ids[0] <= landmark_id <= ids[-1]:
                return o.points_at(t)[landmark_id - ids[0]]
        raise KeyError(landmark_id)


@dataclass
class Scenario:
    """Simulated streams.

    ``views`` holds every landmark observable in each frame (noise
    included); ``frames`` are the tracks an open-loop tracker selects from
    them. A closed-loop consumer builds its own :meth:`new_tracker` and
    feeds rejected ids back so freed slots are refilled.
    """
    config: ScenarioConfig
    imu: list
    frames: list
    truth: GroundTruth
    views: list = field(default_factory=list)

    def new_tracker(self) -> Tracker:
        return make_tracker(self.config, len(self.truth.labels))

    def imu_between(self, k: int) -> list:
        """IMU samples spanning frame ``k`` to ``k + 1`` (both endpoints)."""
        m = self.config.imu_per_frame
        return self.imu[k * m:(k + 1) * m + 1]

    def dynamic_fraction(self) -> float:
        """Fraction of tracked observations that belong to dynamic landmarks."""
        lab = self.truth.labels
        total = sum(len(f) for f in self.frames)
        dyn = sum(sum(lab[int(i)] for i in f.ids) for f in self.frames)
        return dyn / total if total else 0.0


def tracker_priority(config: ScenarioConfig, n_landmarks: int) -> np.ndarray:
    return rng_stream(config.seed, "tracker").random(n_landmarks)


def track_lifetimes(config: ScenarioConfig, n_landmarks: int):
    """Fixed per-landmark track length in frames (geometric), or None when unlimited."""
    mean = config.tracker.mean_lifetime
    if mean <= 0:
        return None
    return rng_stream(config.seed, "track-loss").geometric(1.0 / mean, n_landmarks)


def make_tracker(config: ScenarioConfig, n_landmarks: int) -> Tracker:
    return Tracker(config.tracker.max_features, tracker_priority(config, n_landmarks),
                   track_lifetimes(config, n_landmarks))


def generate_scenario(config: ScenarioConfig) -> Scenario:
    """Simulate IMU, tracks and ground truth for a validated config."""
    config.validate()
    traj = generate_trajectory(config)
    world = build_world(config, traj)
    times = imu_times(config)
    gyro, accel, ba, bg = simulate_imu(traj, times, config.imu_noise, config.accel_bias,
                                       config.gyro_bias, config.seed)
    imu = [ImuSample(float(t), g, a) for t, g, a in zip(times, gyro, accel)]

    m = config.imu_per_frame
    obs_rng = rng_stream(config.seed, "pixel-noise")
    views, states = [], []
    for k in range(config.n_frames):
        t = float(times[k * m])
        body = traj.pose(t)
        states.append(FrameState(k, t, body.t, body.rotation, traj.velocity(t), ba[k * m], bg[k * m]))
        ids, pts = world.points_at(t)
        cam = camera_pose(body, config.extrinsics)
        o_ids, uv, _ = observe(ids, pts, cam, config.intrinsics, config.pixel_noise, obs_rng,
                               min_depth=config.tracker.min_depth, max_depth=config.tracker.max_depth)
        views.append(FrameObservations(k, t, o_ids, uv))
    tracker = make_tracker(config, len(world.labels()))
    frames = [v.select(tracker.step(v.ids)) for v in views]
    return Scenario(config, imu, frames, GroundTruth(states, world.labels(), world), views)
