"""IMU preintegration between camera frames.

Midpoint integration of the relative motion (Δp, Δv, Δq) expressed in the
body frame at the start of the interval, with gravity kept outside the
deltas. The 15x15 error covariance is ordered ``[δp, δθ, δv, δb_a, δb_g]``
and propagated step by step as ``Σ <- Φ Σ Φᵀ + Γ Q Γᵀ`` starting from zero.
A full first-order Jacobian w.r.t. the start-of-interval errors is carried
alongside so bias updates can be applied without re-integration.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geometry import Pose, Rotation, exp_so3, quat_exp, quat_multiply, quat_to_matrix, right_jacobian, skew

GRAVITY = np.array([0.0, 0.0, -9.81])
MAX_DT = 0.1

P, TH, V, BA, BG = 0, 3, 6, 9, 12


class NonMonotonicTimestamps(ValueError):
    pass


@dataclass(frozen=True)
class ImuSample:
    t: float
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float).reshape(3))
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float).reshape(3))


@dataclass(frozen=True)
class ImuNoiseParams:
    """Continuous-time noise densities.

    gyro_noise [rad/s/√Hz], accel_noise [m/s²/√Hz], gyro_bias_rw
    [rad/s²/√Hz], accel_bias_rw [m/s³/√Hz]. A sample taken every ``dt``
    seconds carries white noise of variance ``density² / dt``.
    """
    gyro_noise: float = 0.0
    accel_noise: float = 0.0
    gyro_bias_rw: float = 0.0
    accel_bias_rw: float = 0.0

    def __post_init__(self):
        for name in ("gyro_noise", "accel_noise", "gyro_bias_rw", "accel_bias_rw"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def is_zero(self) -> bool:
        return not (self.gyro_noise or self.accel_noise or self.gyro_bias_rw or self.accel_bias_rw)

    def discrete_q(self, dt: float) -> np.ndarray:
        d = np.repeat([self.accel_noise, self.gyro_noise, self.accel_bias_rw, self.gyro_bias_rw], 3) ** 2
        return np.diag(d / dt)


@dataclass(frozen=True)
class ExtrinsicCalib:
    """Camera pose in the body (IMU) frame."""
    R_cb: Rotation = field(default_factory=Rotation)
    t_cb: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "t_cb", np.asarray(self.t_cb, dtype=float).reshape(3))

    @property
    def pose(self) -> Pose:
        return Pose(self.R_cb, self.t_cb)


class Preintegration:
    """Integrated relative motion between two frames.

    Mutated only while integrating; afterwards treat as read-only.
    """

    def __init__(self, noise: ImuNoiseParams | None = None,
                 acc_bias=None, gyr_bias=None):
        self.noise = noise or ImuNoiseParams()
        self.acc_bias = np.zeros(3) if acc_bias is None else np.asarray(acc_bias, dtype=float).copy()
        self.gyr_bias = np.zeros(3) if gyr_bias is None else np.asarray(gyr_bias, dtype=float).copy()
        self.reset()

    def reset(self):
        self.dp = np.zeros(3)
        self.dv = np.zeros(3)
        self.dq = np.array([1.0, 0.0, 0.0, 0.0])
        self.cov = np.zeros((15, 15))
        self.jacobian = np.eye(15)
        self.duration = 0.0
        self.samples: list[ImuSample] = []

    # -- integration -----------------------------------------------------

    def integrate(self, s0: ImuSample, s1: ImuSample, noise: ImuNoiseParams | None = None) -> "Preintegration":
        """Advance by one midpoint step from ``s0`` to ``s1``."""
        if noise is not None:
            self.noise = noise
        dt = s1.t - s0.t
        if not dt > 0:
            raise NonMonotonicTimestamps(f"timestamps not increasing: {s0.t!r} -> {s1.t!r}")
        if not self.samples:
            self.samples.append(s0)
        elif self.samples[-1].t != s0.t:
            raise NonMonotonicTimestamps(f"sample at t={s0.t!r} does not continue the interval ending at {self.samples[-1].t!r}")
        self.samples.append(s1)
        self._step(s0.accel, s0.gyro, s1.accel, s1.gyro, dt)
        return self

    def integrate_samples(self, samples: Sequence[ImuSample]) -> "Preintegration":
        for s0, s1 in zip(samples[:-1], samples[1:]):
            self.integrate(s0, s1)
        return self

    def _step(self, a0, w0, a1, w1, dt):
        ba, bg = self.acc_bias, self.gyr_bias
        a0 = a0 - ba
        a1 = a1 - ba
        w = 0.5 * (w0 + w1) - bg
        wdt = w * dt

        R0 = quat_to_matrix(self.dq)
        dq1 = quat_multiply(self.dq, quat_exp(wdt))
        dq1 /= np.linalg.norm(dq1)
        R1 = quat_to_matrix(dq1)
        acc = 0.5 * (R0 @ a0 + R1 @ a1)

        self.dp = self.dp + self.dv * dt + 0.5 * acc * dt * dt
        self.dv = self.dv + acc * dt
        self.dq = dq1

        Jr = right_jacobian(wdt)
        A0x = R0 @ skew(a0)
        A1x = R1 @ skew(a1)
        E = exp_so3(-wdt)
        d_acc_dth = -0.5 * (A0x + A1x @ E)
        d_acc_dba = -0.5 * (R0 + R1)
        d_acc_dbg = 0.5 * A1x @ Jr * dt

        Phi = np.eye(15)
        Phi[P:P + 3, TH:TH + 3] = 0.5 * d_acc_dth * dt * dt
        Phi[P:P + 3, V:V + 3] = np.eye(3) * dt
        Phi[P:P + 3, BA:BA + 3] = 0.5 * d_acc_dba * dt * dt
        Phi[P:P + 3, BG:BG + 3] = 0.5 * d_acc_dbg * dt * dt
        Phi[TH:TH + 3, TH:TH + 3] = E
        Phi[TH:TH + 3, BG:BG + 3] = -Jr * dt
        Phi[V:V + 3, TH:TH + 3] = d_acc_dth * dt
        Phi[V:V + 3, BA:BA + 3] = d_acc_dba * dt
        Phi[V:V + 3, BG:BG + 3] = d_acc_dbg * dt

        # noise inputs [n_a, n_g, n_ba, n_bg]; n_a/n_g act like -δb over the step
        G = np.zeros((15, 12))
        G[:, 0:3] = -Phi[:, BA:BA + 3]
        G[:, 3:6] = -Phi[:, BG:BG + 3]
        G[BA:BA + 3, 0:3] = 0.0
        G[BG:BG + 3, 3:6] = 0.0
        G[BA:BA + 3, 6:9] = np.eye(3) * dt
        G[BG:BG + 3, 9:12] = np.eye(3) * dt

        self.jacobian = Phi @ self.jacobian
        if not self.noise.is_zero:
            Q = self.noise.discrete_q(dt)
            cov = Phi @ self.cov @ Phi.T + G @ Q @ G.T
            self.cov = 0.5 * (cov + cov.T)
        self.duration += dt

    def repropagate(self, acc_bias, gyr_bias) -> "Preintegration":
        """Re-integrate the stored samples around a new bias linearization point."""
        samples = list(self.samples)
        self.acc_bias = np.asarray(acc_bias, dtype=float).copy()
        self.gyr_bias = np.asarray(gyr_bias, dtype=float).copy()
        self.reset()
        return self.integrate_samples(samples)

    # -- accessors ------------------------------------------------------

    @property
    def dR(self) -> np.ndarray:
        return quat_to_matrix(self.dq)

    @property
    def rotation(self) -> Rotation:
        return Rotation(self.dq)

    @property
    def J_p_ba(self):
        return self.jacobian[P:P + 3, BA:BA + 3]

    @property
    def J_p_bg(self):
        return self.jacobian[P:P + 3, BG:BG + 3]

    @property
    def J_q_bg(self):
        return self.jacobian[TH:TH + 3, BG:BG + 3]

    @property
    def J_v_ba(self):
        return self.jacobian[V:V + 3, BA:BA + 3]

    @property
    def J_v_bg(self):
        return self.jacobian[V:V + 3, BG:BG + 3]

    def corrected(self, acc_bias, gyr_bias):
        """First-order bias-corrected (Δp, Δq, Δv) for the given biases."""
        dba = np.asarray(acc_bias) - self.acc_bias
        dbg = np.asarray(gyr_bias) - self.gyr_bias
        dp = self.dp + self.J_p_ba @ dba + self.J_p_bg @ dbg
        dv = self.dv + self.J_v_ba @ dba + self.J_v_bg @ dbg
        dq = quat_multiply(self.dq, quat_exp(self.J_q_bg @ dbg))
        return dp, dq, dv

    def predict(self, p_i, R_i, v_i, acc_bias=None, gyr_bias=None, gravity=GRAVITY):
        """Propagate a world-frame state across the interval."""
        ba = self.acc_bias if acc_bias is None else acc_bias
        bg = self.gyr_bias if gyr_bias is None else gyr_bias
        dp, dq, dv = self.corrected(ba, bg)
        dt = self.duration
        p_j = p_i + v_i * dt + 0.5 * gravity * dt * dt + R_i @ dp
        v_j = v_i + gravity * dt + R_i @ dv
        R_j = R_i @ quat_to_matrix(dq)
        return p_j, R_j, v_j


def integrate(preint: Preintegration, sample_pair, noise: ImuNoiseParams | None = None) -> Preintegration:
    s0, s1 = sample_pair
    return preint.integrate(s0, s1, noise)


def preintegrate(samples: Sequence[ImuSample], noise: ImuNoiseParams | None = None,
                 acc_bias=None, gyr_bias=None) -> Preintegration:
    return Preintegration(noise, acc_bias, gyr_bias).integrate_samples(samples)


def position_variance(preint: Preintegration) -> float:
    """Mean per-axis variance of the preintegrated position error [m²]."""
    return float(np.trace(preint.cov[P:P + 3, P:P + 3]) / 3.0)


def relative_camera_transform(extr: ExtrinsicCalib, body_displacement, body_rotation,
                              eq1b_approx: bool = False) -> Pose:
    """Pose of camera k+1 in camera k from the body-frame relative motion.

    ``body_displacement`` is the gravity-compensated position of body k+1
    in body k, ``body_rotation`` the rotation of body k+1 in body k. The
    default is the exact compound transform; ``eq1b_approx`` drops the
    lever-arm rotation term ``R_b t_cb`` from the translation.
    """
    R_cb = extr.R_cb.matrix()
    R_b = body_rotation.matrix() if isinstance(body_rotation, Rotation) else np.asarray(body_rotation)
    P_b = np.asarray(body_displacement, dtype=float)
    R = R_cb.T @ R_b @ R_cb
    if eq1b_approx:
        t = R_cb.T @ (P_b - extr.t_cb)
    else:
        t = R_cb.T @ (R_b @ extr.t_cb + P_b - extr.t_cb)
    return Pose(Rotation.from_matrix(R), t)


def body_motion_prior(preint: Preintegration, R_i, v_i, acc_bias=None, gyr_bias=None, gravity=GRAVITY):
    """Body k+1 relative to body k predicted from the IMU.

    Uses the start-of-interval orientation and velocity estimates to remove
    gravity; returns ``(displacement, Rotation)``.
    """
    ba = preint.acc_bias if acc_bias is None else acc_bias
    bg = preint.gyr_bias if gyr_bias is None else gyr_bias
    dp, dq, _ = preint.corrected(ba, bg)
    dt = preint.duration
    R_i = np.asarray(R_i)
    disp = R_i.T @ (np.asarray(v_i) * dt + 0.5 * gravity * dt * dt) + dp
    return disp, Rotation(dq)


def camera_motion_prior(preint: Preintegration, extr: ExtrinsicCalib, R_i, v_i,
                        acc_bias=None, gyr_bias=None, eq1b_approx: bool = False) -> Pose:
    disp, rot = body_motion_prior(preint, R_i, v_i, acc_bias, gyr_bias)
    return relative_camera_transform(extr, disp, rot, eq1b_approx=eq1b_approx)


def samples_to_arrays(samples: Iterable[ImuSample]):
    samples = list(samples)
    t = np.array([s.t for s in samples])
    g = np.array([s.gyro for s in samples]).reshape(-1, 3)
    a = np.array([s.accel for s in samples]).reshape(-1, 3)
    return t, g, a


def arrays_to_samples(t, gyro, accel) -> list[ImuSample]:
    return [ImuSample(float(ti), gi, ai) for ti, gi, ai in zip(t, gyro, accel)]


def check_stream(t) -> None:
    dt = np.diff(np.asarray(t, dtype=float))
    if np.any(dt <= 0):
        i = int(np.argmax(dt <= 0))
        raise NonMonotonicTimestamps(f"timestamp {i + 1} does not increase")
    if np.any(dt > MAX_DT):
        raise ValueError(f"IMU gap above {MAX_DT} s")

