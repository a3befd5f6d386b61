"""Sliding window container: frames, landmarks, IMU chain and prior."""
from __future__ import annotations

import logging
import math

import numpy as np

from ..classifier import LandmarkLabel
from ..geometry import CameraIntrinsics, GeometryError, Pose, triangulate_two_view
from ..imu_preint import GRAVITY, ExtrinsicCalib, Preintegration
from .factors import ImuFactor, PriorFactor, relative_camera_pose
from .marginalization import SingularMarginalization, marginalize_frame
from .problem import EmptyWindow, OptimizeResult, Problem, SolverConfig, optimize, problem_landmarks
from .states import FrameState, LandmarkState

log = logging.getLogger(__name__)

GAUGE_SIGMAS = np.array([1e-6] * 6 + [1e-3] * 3 + [1e-2] * 6)
MIN_DEPTH = 0.1
MAX_DEPTH = 200.0


class Window:
    """Ordered frames (oldest first) with their landmarks and factors."""

    def __init__(self, extr: ExtrinsicCalib, intr: CameraIntrinsics, size: int = 10,
                 solver: SolverConfig | None = None, gravity=GRAVITY, min_parallax_deg: float = 0.5):
        if size < 2:
            raise ValueError("window size must be at least 2")
        self.extr = extr
        self.intr = intr
        self.size = size
        self.solver = solver or SolverConfig()
        self.gravity = np.asarray(gravity, dtype=float)
        self.min_parallax_deg = min_parallax_deg
        self.frames: list[FrameState] = []
        self.imu: dict[int, ImuFactor] = {}
        self.landmarks: dict[int, LandmarkState] = {}
        self.prior: PriorFactor | None = None

    # -- bookkeeping ----------------------------------------------------

    @property
    def full(self) -> bool:
        return len(self.frames) >= self.size

    @property
    def frame_ids(self) -> list[int]:
        return [f.frame_id for f in self.frames]

    def frame(self, frame_id: int) -> FrameState:
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        raise KeyError(frame_id)

    def states(self) -> dict[int, FrameState]:
        return {f.frame_id: f for f in self.frames}

    def add_frame(self, state: FrameState, preint: Preintegration | None = None):
        if self.frames and preint is None:
            raise ValueError("IMU preintegration required to chain a new frame")
        if self.frames:
            prev = self.frames[-1]
            self.imu[state.frame_id] = ImuFactor(preint, prev.frame_id, state.frame_id, self.gravity,
                                                 self.solver.imu_cov_floor)
        self.frames.append(state)

    def fix_gauge(self, state: FrameState | None = None, sigmas=GAUGE_SIGMAS):
        state = state or self.frames[0]
        self.prior = PriorFactor.anchor(state, sigmas)

    def add_observation(self, landmark_id: int, frame_id: int, xy, uv,
                        label: LandmarkLabel = LandmarkLabel.STATIC) -> LandmarkState:
        lm = self.landmarks.get(landmark_id)
        if lm is None:
            lm = LandmarkState(landmark_id, label=label)
            self.landmarks[landmark_id] = lm
        lm.add_observation(frame_id, xy, uv)
        return lm

    def imu_factors(self) -> list[ImuFactor]:
        ids = self.frame_ids
        return [self.imu[j] for j in ids[1:]]

    # -- landmark geometry ----------------------------------------------

    def landmark_world(self, lm: LandmarkState) -> np.ndarray:
        fa = self.frame(lm.anchor)
        Pc = np.array([lm.obs[lm.anchor][0], lm.obs[lm.anchor][1], 1.0]) / lm.inv_depth
        return (Pose(fa.R, fa.p) * self.extr.pose).apply(Pc)

    def triangulate(self, lm: LandmarkState, allowed=(LandmarkLabel.STATIC, LandmarkLabel.DYNAMIC_CANDIDATE)) -> bool:
        """Initialize inverse depth from the anchor and the widest-baseline observation."""
        if lm.initialized or lm.label not in allowed or len(lm.obs) < 2:
            return lm.initialized
        fa = self.frame(lm.anchor)
        for fid in sorted(lm.obs, reverse=True):
            if fid == lm.anchor:
                continue
            rel = relative_camera_pose(fa, self.frame(fid), self.extr)
            try:
                lam = triangulate_two_view(lm.obs[lm.anchor], lm.obs[fid], rel, self.min_parallax_deg)
            except GeometryError:
                continue
            if MIN_DEPTH <= 1.0 / lam <= MAX_DEPTH:
                lm.inv_depth = lam
                return True
            return False
        return False

    def triangulate_all(self, allowed=(LandmarkLabel.STATIC, LandmarkLabel.DYNAMIC_CANDIDATE)) -> int:
        return sum(1 for lm in self.landmarks.values() if not lm.initialized and self.triangulate(lm, allowed))

    def reset_bad_depths(self) -> list[int]:
        """Uninitialize landmarks whose optimized depth left the sane range."""
        out = []
        for lm in self.landmarks.values():
            if lm.inv_depth is None:
                continue
            if not (lm.inv_depth > 0) or not (MIN_DEPTH <= 1.0 / lm.inv_depth <= MAX_DEPTH):
                lm.inv_depth = None
                out.append(lm.landmark_id)
        return out

    # -- optimization ---------------------------------------------------

    def problem(self, landmarks=None) -> Problem:
        if len(self.frames) < 1:
            raise EmptyWindow("window has no frames")
        lms = problem_landmarks(self.landmarks.values() if landmarks is None else landmarks, self.frame_ids)
        return Problem(self.frames, lms, self.imu_factors(), self.prior, self.extr, self.intr, self.solver)

    def optimize(self) -> OptimizeResult:
        problem = self.problem()
        result = optimize(problem, self.solver)
        if result.status != "diverged":
            problem.commit()
        return result

    # -- sliding --------------------------------------------------------

    def slide(self) -> tuple[FrameState, list[LandmarkState]]:
        """Marginalize the oldest frame.

        Returns the removed frame and the landmarks that no longer have any
        observation inside the window.
        """
        if not self.frames:
            raise EmptyWindow("window has no frames")
        old = self.frames[0]
        if len(self.frames) > 1:
            nxt = self.frames[1]
            anchored = [lm for lm in self.landmarks.values() if lm.anchor == old.frame_id]
            lms = problem_landmarks(anchored, self.frame_ids)
            factors = [self.imu[nxt.frame_id]]
            sub = Problem(self.frames, lms, factors, self.prior, self.extr, self.intr, self.solver)
            try:
                self.prior = marginalize_frame(sub, old.frame_id)
            except SingularMarginalization as exc:
                log.warning("marginalization of frame %d failed (%s); fixing gauge instead", old.frame_id, exc)
                self.prior = PriorFactor.anchor(nxt, GAUGE_SIGMAS)
            del self.imu[nxt.frame_id]
        else:
            self.prior = None
        self.frames.pop(0)

        departed = []
        for lid in list(self.landmarks):
            lm = self.landmarks[lid]
            if old.frame_id not in lm.obs:
                continue
            world = self.landmark_world_at(lm, old) if lm.anchor == old.frame_id and lm.initialized else None
            lm.remove_observation(old.frame_id)
            if not lm.obs:
                lm.anchor = None
                del self.landmarks[lid]
                lm.world = world
                departed.append(lm)
                continue
            if lm.anchor == old.frame_id:
                lm.anchor = min(lm.obs)
                lm.inv_depth = self._reanchor_depth(lm, world)
        return old, departed

    def landmark_world_at(self, lm: LandmarkState, anchor_state: FrameState) -> np.ndarray:
        Pc = np.array([lm.obs[lm.anchor][0], lm.obs[lm.anchor][1], 1.0]) / lm.inv_depth
        return (Pose(anchor_state.R, anchor_state.p) * self.extr.pose).apply(Pc)

    def _reanchor_depth(self, lm: LandmarkState, world):
        if world is None:
            return None
        fa = self.frame(lm.anchor)
        Pc = (Pose(fa.R, fa.p) * self.extr.pose).inverse().apply(world)
        if not Pc[2] > MIN_DEPTH or not math.isfinite(Pc[2]):
            return None
        return 1.0 / Pc[2]


def confirm_dynamic(window: Window, threshold_px: float = 2.0, min_obs: int = 2,
                    landmarks=None) -> set[int]:
    """Relabel dynamic candidates after optimization.

    A candidate whose mean pixel reprojection error over its non-anchor
    observations exceeds ``threshold_px`` becomes confirmed dynamic and
    leaves the window; otherwise it returns to static. Candidates that are
    not triangulated or have fewer than ``min_obs`` observations wait.
    """
    confirmed = set()
    pool = window.landmarks.values() if landmarks is None else landmarks
    for lm in list(pool):
        if lm.label is not LandmarkLabel.DYNAMIC_CANDIDATE:
            continue
        if not lm.initialized or len(lm.obs) < min_obs:
            continue
        err = mean_reprojection_px(window, lm)
        if err is None:
            continue
        if err > threshold_px:
            lm.label = LandmarkLabel.CONFIRMED_DYNAMIC
            window.landmarks.pop(lm.landmark_id, None)
            confirmed.add(lm.landmark_id)
        else:
            lm.label = LandmarkLabel.STATIC
    return confirmed


def mean_reprojection_px(window: Window, lm: LandmarkState) -> float | None:
    """Mean pixel error projecting the anchored point into its other observations (inf if behind)."""
    if not lm.initialized or lm.anchor is None:
        return None
    world = window.landmark_world(lm)
    errs = []
    for fid in sorted(lm.obs):
        if fid == lm.anchor:
            continue
        f = window.frame(fid)
        Pc = (Pose(f.R, f.p) * window.extr.pose).inverse().apply(world)
        if Pc[2] <= 1e-6:
            return math.inf
        du = window.intr.fx * (lm.obs[fid][0] - Pc[0] / Pc[2])
        dv = window.intr.fy * (lm.obs[fid][1] - Pc[1] / Pc[2])
        errs.append(math.hypot(du, dv))
    return float(np.mean(errs)) if errs else None
