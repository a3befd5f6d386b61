"""Residual blocks of the sliding-window objective.

Frame tangent ordering is ``[δp, δθ, δv, δb_a, δb_g]`` (15), rotations are
right-perturbed (``R <- R Exp(δθ)``) and landmarks are anchored inverse
depths. Visual residuals live on the normalized image plane and are
whitened with ``f / σ_v``; a dynamic-candidate observation additionally
divides by ``sqrt(σ_r)`` where ``σ_r`` is its minimum epipolar projection
error in pixels² (floored at 1).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..geometry import CameraIntrinsics, Pose, Rotation, log_so3, right_jacobian, right_jacobian_inv, skew
from ..imu_preint import GRAVITY, ExtrinsicCalib, Preintegration
from .states import FrameState, LandmarkState

MIN_TRANSLATION = 1e-9
DIM = 15


class NegativeDepthDuringLinearization(ValueError):
    pass


def huber(s):
    """Robust kernel on a whitened squared norm: ``s`` below 1, ``2 sqrt(s) - 1`` above."""
    s = np.asarray(s, dtype=float)
    out = np.where(s < 1.0, s, 2.0 * np.sqrt(np.maximum(s, 1.0)) - 1.0)
    return float(out) if out.ndim == 0 else out


def huber_weight(s):
    """First derivative of :func:`huber` (IRLS weight)."""
    s = np.asarray(s, dtype=float)
    return np.where(s < 1.0, 1.0, 1.0 / np.sqrt(np.maximum(s, 1.0)))


# ---------------------------------------------------------------------------
# factor records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StaticVisualFactor:
    landmark_id: int
    frame_id: int


@dataclass(frozen=True)
class CandidateVisualFactor:
    landmark_id: int
    frame_id: int
    sigma_r: float = 1.0


# ---------------------------------------------------------------------------
# visual
# ---------------------------------------------------------------------------

def visual_residual(landmark: LandmarkState, frame_id: int, states: dict[int, FrameState],
                    extr: ExtrinsicCalib, intr: CameraIntrinsics, sigma_px: float = 1.0,
                    sigma_r: float = 1.0, whiten: bool = True):
    """Reprojection residual of one non-anchor observation.

    Returns ``(r, J_anchor (2x6), J_obs (2x6), J_lambda (2,))``; Jacobian
    columns are ``[δp, δθ]`` of the respective frame.
    """
    if frame_id == landmark.anchor:
        raise ValueError("anchor observation carries no residual")
    fa, fj = states[landmark.anchor], states[frame_id]
    if whiten:
        wu = intr.fx / (sigma_px * math.sqrt(sigma_r))
        wv = intr.fy / (sigma_px * math.sqrt(sigma_r))
    else:
        wu = wv = 1.0
    Rwb = np.stack([fa.R.matrix(), fj.R.matrix()])
    pwb = np.stack([fa.p, fj.p])
    one = np.zeros(1, dtype=np.int64)
    r, Ja, Jj, Jl, z = kernels.visual_linearize(
        Rwb, pwb, extr.R_cb.matrix(), extr.t_cb, one, one + 1, one,
        np.asarray(landmark.obs[landmark.anchor], float).reshape(1, 2),
        np.asarray(landmark.obs[frame_id], float).reshape(1, 2),
        np.array([landmark.inv_depth], float), np.array([wu]), np.array([wv]))
    if not z[0] > 1e-6 or not landmark.inv_depth > 0:
        raise NegativeDepthDuringLinearization(f"landmark {landmark.landmark_id} behind frame {frame_id}")
    return r[0], Ja[0], Jj[0], Jl[0]


def camera_poses(frames, extr: ExtrinsicCalib) -> list[Pose]:
    return [Pose(f.R, f.p) * extr.pose for f in frames]


def relative_camera_pose(frame_a: FrameState, frame_j: FrameState, extr: ExtrinsicCalib) -> Pose:
    """Pose of camera j expressed in camera a."""
    Twa = Pose(frame_a.R, frame_a.p) * extr.pose
    Twj = Pose(frame_j.R, frame_j.p) * extr.pose
    return Twa.inverse() * Twj


def candidate_sigma(landmark: LandmarkState, frame_id: int, states: dict[int, FrameState],
                    intr: CameraIntrinsics, extr: ExtrinsicCalib) -> float:
    """Adaptive candidate scale from the anchor-to-j epipolar error [px²], floored at 1."""
    rel = relative_camera_pose(states[landmark.anchor], states[frame_id], extr)
    return float(candidate_sigma_batch(
        np.asarray(landmark.pix[landmark.anchor], float).reshape(1, 2),
        np.asarray(landmark.pix[frame_id], float).reshape(1, 2),
        rel.R[None], rel.t[None], intr)[0])


def candidate_sigma_batch(pa, pj, R_aj, t_aj, intr: CameraIntrinsics):
    """Vectorized :func:`candidate_sigma` over observations with per-row relative poses."""
    Kinv = intr.K_inv
    n = pa.shape[0]
    ha = np.column_stack([pa, np.ones(n)])
    hj = np.column_stack([pj, np.ones(n)])
    xa = ha @ Kinv.T
    # line coefficients [a,b,c] = xa^T [t]x R K^-1
    tx = np.zeros((n, 3, 3))
    tx[:, 0, 1] = -t_aj[:, 2]
    tx[:, 0, 2] = t_aj[:, 1]
    tx[:, 1, 0] = t_aj[:, 2]
    tx[:, 1, 2] = -t_aj[:, 0]
    tx[:, 2, 0] = -t_aj[:, 1]
    tx[:, 2, 1] = t_aj[:, 0]
    E = tx @ R_aj
    abc = np.einsum("ni,nij->nj", xa, E) @ Kinv
    e = np.einsum("ni,ni->n", abc, hj)
    nrm = abc[:, 0] ** 2 + abc[:, 1] ** 2
    degenerate = (np.linalg.norm(t_aj, axis=1) < MIN_TRANSLATION) | (nrm <= 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(degenerate, 1.0, e * e / np.where(nrm > 0, nrm, 1.0))
    return np.maximum(1.0, d)


# ---------------------------------------------------------------------------
# IMU
# ---------------------------------------------------------------------------

DEFAULT_COV_FLOOR = np.array([1e-10] * 9 + [1e-8] * 6)


class ImuFactor:
    """Preintegrated inertial constraint between consecutive frames."""

    def __init__(self, preint: Preintegration, frame_i: int, frame_j: int,
                 gravity=GRAVITY, cov_floor=DEFAULT_COV_FLOOR):
        self.preint = preint
        self.frame_i = frame_i
        self.frame_j = frame_j
        self.gravity = np.asarray(gravity, dtype=float)
        cov = preint.cov + np.diag(cov_floor)
        info = np.linalg.inv(cov)
        info = 0.5 * (info + info.T)
        self.sqrt_info = np.linalg.cholesky(info).T

    def residual(self, si: FrameState, sj: FrameState, whiten: bool = True, jacobians: bool = False):
        pre = self.preint
        dt = pre.duration
        g = self.gravity
        Ri = si.R.matrix()
        Rj = sj.R.matrix()
        dba = si.ba - pre.acc_bias
        dbg = si.bg - pre.gyr_bias
        phi = pre.J_q_bg @ dbg
        dp = pre.dp + pre.J_p_ba @ dba + pre.J_p_bg @ dbg
        dv = pre.dv + pre.J_v_ba @ dba + pre.J_v_bg @ dbg
        dR = pre.dR @ Rotation.exp(phi).matrix()

        dpw = sj.p - si.p - si.v * dt - 0.5 * g * dt * dt
        dvw = sj.v - si.v - g * dt
        E = dR.T @ Ri.T @ Rj
        r = np.empty(15)
        r[0:3] = Ri.T @ dpw - dp
        r[3:6] = log_so3(E)
        r[6:9] = Ri.T @ dvw - dv
        r[9:12] = sj.ba - si.ba
        r[12:15] = sj.bg - si.bg
        if not jacobians:
            return self.sqrt_info @ r if whiten else r

        Jri = right_jacobian_inv(r[3:6])
        I3 = np.eye(3)
        Ji = np.zeros((15, 15))
        Jj = np.zeros((15, 15))
        Ji[0:3, 0:3] = -Ri.T
        Ji[0:3, 3:6] = skew(Ri.T @ dpw)
        Ji[0:3, 6:9] = -Ri.T * dt
        Ji[0:3, 9:12] = -pre.J_p_ba
        Ji[0:3, 12:15] = -pre.J_p_bg
        Ji[3:6, 3:6] = -Jri @ Rj.T @ Ri
        Ji[3:6, 12:15] = -Jri @ E.T @ right_jacobian(phi) @ pre.J_q_bg
        Ji[6:9, 3:6] = skew(Ri.T @ dvw)
        Ji[6:9, 6:9] = -Ri.T
        Ji[6:9, 9:12] = -pre.J_v_ba
        Ji[6:9, 12:15] = -pre.J_v_bg
        Ji[9:12, 9:12] = -I3
        Ji[12:15, 12:15] = -I3
        Jj[0:3, 0:3] = Ri.T
        Jj[3:6, 3:6] = Jri
        Jj[6:9, 6:9] = Ri.T
        Jj[9:12, 9:12] = I3
        Jj[12:15, 12:15] = I3
        if whiten:
            L = self.sqrt_info
            return L @ r, L @ Ji, L @ Jj
        return r, Ji, Jj


def imu_residual(preint: Preintegration, frame_k: FrameState, frame_k1: FrameState,
                 gravity=GRAVITY, whiten: bool = True):
    """15-vector residual plus Jacobians w.r.t. both frames."""
    return ImuFactor(preint, frame_k.frame_id, frame_k1.frame_id, gravity).residual(
        frame_k, frame_k1, whiten=whiten, jacobians=True)


# ---------------------------------------------------------------------------
# prior
# ---------------------------------------------------------------------------

def state_difference(s: FrameState, lin: FrameState) -> np.ndarray:
    d = np.empty(15)
    d[0:3] = s.p - lin.p
    d[3:6] = (lin.R.inverse() * s.R).log()
    d[6:9] = s.v - lin.v
    d[9:12] = s.ba - lin.ba
    d[12:15] = s.bg - lin.bg
    return d


class PriorFactor:
    """Linear prior ``r_p + H_p (x ⊟ x_lin)`` over a set of frames.

    ``H_p`` and the linearization point stay fixed once created, which keeps
    the marginalized information consistent with its first estimates.
    """

    def __init__(self, frame_ids, lin_states, J, r):
        self.frame_ids = list(frame_ids)
        self.lin = {fid: s.copy() for fid, s in zip(self.frame_ids, lin_states)}
        self.J = np.asarray(J, dtype=float)
        self.r = np.asarray(r, dtype=float)

    @classmethod
    def anchor(cls, state: FrameState, sigmas) -> "PriorFactor":
        """Diagonal prior holding one frame near its current value."""
        sig = np.asarray(sigmas, dtype=float)
        return cls([state.frame_id], [state], np.diag(1.0 / sig), np.zeros(15))

    @property
    def is_empty(self) -> bool:
        return self.J.size == 0

    def residual(self, states: dict[int, FrameState], jacobians: bool = False):
        dx = np.concatenate([state_difference(states[f], self.lin[f]) for f in self.frame_ids])
        r = self.r + self.J @ dx
        if not jacobians:
            return r
        D = np.eye(DIM * len(self.frame_ids))
        for k in range(len(self.frame_ids)):
            o = DIM * k + 3
            D[o:o + 3, o:o + 3] = right_jacobian_inv(dx[o:o + 3])
        return r, self.J @ D
