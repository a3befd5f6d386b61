"""Frame-by-frame estimator: classify tracks, optimize the window, slide."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .ba.problem import SolverConfig
from .ba.states import FrameState, LandmarkState
from .ba.window import Window, confirm_dynamic
from .classifier import ClassifierConfig, FramePairResult, LandmarkLabel, preprocess_frame_pair
from .geometry import CameraIntrinsics, normalize
from .imu_preint import GRAVITY, ExtrinsicCalib, ImuNoiseParams, Preintegration

log = logging.getLogger(__name__)

BLACKLIST = (LandmarkLabel.DYNAMIC_ELIMINATED, LandmarkLabel.CONFIRMED_DYNAMIC)


@dataclass
class PipelineConfig:
    window: int = 10
    classify: bool = True
    candidate_residual: bool = True
    lambda_dy: float = 4.0
    lambda_dy_c: float = 1.0
    confirm_px: float = 2.0
    confirm_min_obs: int = 3
    eq1b_approx: bool = False
    triangulate_eliminated: bool = False
    sigma_px: float = 1.0
    robust: bool = True
    min_parallax_deg: float = 0.5
    sigma_max: float = 100.0
    marginalize: bool = True

    def validate(self) -> "PipelineConfig":
        if self.window < 2:
            raise ValueError("window: must be at least 2")
        if self.lambda_dy <= 0 or self.lambda_dy_c <= 0:
            raise ValueError("lambda_dy / lambda_dy_c: must be positive")
        if self.confirm_px <= 0:
            raise ValueError("confirm_px: must be positive")
        if self.sigma_px <= 0:
            raise ValueError("sigma_px: must be positive")
        return self

    def classifier(self) -> ClassifierConfig:
        return ClassifierConfig(self.lambda_dy, self.lambda_dy_c, self.sigma_max, eq1b_approx=self.eq1b_approx)

    def solver(self) -> SolverConfig:
        return SolverConfig(sigma_px=self.sigma_px, robust=self.robust,
                            candidate_residual=self.candidate_residual)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def config_hash(*parts) -> str:
    """Stable digest of JSON-serializable configuration parts."""
    blob = json.dumps(parts, sort_keys=True, separators=(",", ":"), default=float)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class MapPoint:
    landmark_id: int
    position: np.ndarray
    label: LandmarkLabel


@dataclass
class RunResult:
    trajectory: dict                 # frame id -> FrameState
    labels: dict                     # landmark id -> LandmarkLabel (landmarks with a decision)
    map_points: list                 # MapPoint, static and (optionally) dynamic
    cv_trace: list                   # (frame id, cv_pre, cv_post)
    classify_ms: list
    optimize_ms: list
    debug_rows: list
    diverged: bool = False
    final_cost: float = 0.0
    costs: list = field(default_factory=list)
    iterations: list = field(default_factory=list)

    def static_map(self) -> list:
        return [m for m in self.map_points if m.label is LandmarkLabel.STATIC]


class Estimator:
    """Sliding-window visual-inertial estimator with dynamic landmark handling."""

    def __init__(self, config: PipelineConfig, extr: ExtrinsicCalib, intr: CameraIntrinsics,
                 noise: ImuNoiseParams | None = None, gravity=GRAVITY):
        self.config = config.validate()
        self.extr = extr
        self.intr = intr
        self.noise = noise or ImuNoiseParams()
        self.gravity = np.asarray(gravity, dtype=float)
        self.window = Window(extr, intr, config.window, config.solver(), self.gravity, config.min_parallax_deg)
        self.labels: dict[int, LandmarkLabel] = {}
        self.decided: set[int] = set()
        self.blacklist: set[int] = set()
        self.verified: set[int] = set()
        self.rejected: list[int] = []
        self.last_obs: dict[int, tuple[int, np.ndarray]] = {}
        self.trajectory: dict[int, FrameState] = {}
        self.map_points: dict[int, MapPoint] = {}
        self.eliminated_tracks: dict[int, LandmarkState] = {}
        self.cv_trace: list = []
        self.classify_ms: list = []
        self.optimize_ms: list = []
        self.debug_rows: list = []
        self.costs: list = []
        self.iterations: list = []
        self.diverged = False
        self.final_cost = 0.0

    # -- frame handling -------------------------------------------------

    def initialize(self, state: FrameState, ids, pixels):
        """Start from a known first state (fixed by a gauge prior)."""
        self.window.add_frame(state.copy())
        self.window.fix_gauge()
        self._add_observations(state.frame_id, ids, pixels)

    def _add_observations(self, frame_id, ids, pixels):
        Kinv = self.intr.K_inv
        for lid, uv in zip(np.asarray(ids, dtype=np.int64), np.asarray(pixels, dtype=float)):
            lid = int(lid)
            self.last_obs[lid] = (frame_id, uv)
            if lid in self.blacklist:
                if self.config.triangulate_eliminated and lid in self.eliminated_tracks:
                    self.eliminated_tracks[lid].add_observation(frame_id, (Kinv @ [uv[0], uv[1], 1.0])[:2], uv)
                continue
            xy = normalize(uv, self.intr)
            lm = self.window.add_observation(lid, frame_id, xy, uv)
            self.labels.setdefault(lid, lm.label)

    def process(self, frame_id: int, timestamp: float, ids, pixels, imu_samples):
        """Consume IMU samples up to this frame and its feature observations."""
        prev = self.window.frames[-1]
        pre = Preintegration(self.noise, prev.ba, prev.bg).integrate_samples(imu_samples)
        if not math.isclose(pre.duration, timestamp - prev.timestamp, abs_tol=1e-6):
            raise ValueError(f"IMU span {pre.duration:.6f}s does not match frame gap "
                             f"{timestamp - prev.timestamp:.6f}s")
        p, R, v = pre.predict(prev.p, prev.R.matrix(), prev.v, gravity=self.gravity)
        state = FrameState(frame_id, timestamp, p, R, v, prev.ba, prev.bg)

        ids = np.asarray(ids, dtype=np.int64)
        pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        for lid in ids:
            last = self.last_obs.get(int(lid))
            if last is not None and last[0] == prev.frame_id:
                self.decided.add(int(lid))
        t0 = time.perf_counter()
        if self.config.classify:
            self._classify(prev, frame_id, ids, pixels, pre)
        self.classify_ms.append(1e3 * (time.perf_counter() - t0))

        if self.window.full:
            self._slide()
        self.window.add_frame(state, pre)
        self._add_observations(frame_id, ids, pixels)

        t0 = time.perf_counter()
        self.window.triangulate_all()
        result = self.window.optimize()
        self.costs.append(result.final_cost)
        self.iterations.append(result.iterations)
        if result.diverged:
            log.warning("solver diverged at frame %d", frame_id)
            self.diverged = True
        self.window.reset_bad_depths()
        if self.config.classify:
            self._confirm(confirm_dynamic(self.window, self.config.confirm_px, self.config.confirm_min_obs))
        self.optimize_ms.append(1e3 * (time.perf_counter() - t0))
        self.final_cost = result.final_cost

    def _classify(self, prev: FrameState, frame_id: int, ids, pixels, pre: Preintegration):
        sel, pk = [], []
        for k, lid in enumerate(ids):
            lid = int(lid)
            last = self.last_obs.get(lid)
            if lid in self.blacklist or last is None or last[0] != prev.frame_id:
                continue
            sel.append(k)
            pk.append(last[1])
        if not sel:
            return
        sel = np.array(sel)
        pair_ids = ids[sel]
        res: FramePairResult = preprocess_frame_pair(
            pair_ids, np.array(pk), pixels[sel], pre, self.extr, self.intr, self.config.classifier(),
            prev.R.matrix(), prev.v, prev.ba, prev.bg)
        if res.skipped:
            log.debug("frame %d classification skipped: %s", frame_id, res.skipped)
        if res.trace:
            self.cv_trace.append((frame_id, res.cv_pre, res.cv_post))
        for lid, label in res.labels.items():
            if label is LandmarkLabel.DYNAMIC_ELIMINATED:
                self._blacklist(lid, label)
            elif label is LandmarkLabel.DYNAMIC_CANDIDATE and lid not in self.verified:
                self.labels[lid] = label
                if lid in self.window.landmarks:
                    self.window.landmarks[lid].label = label
            else:
                self.labels.setdefault(lid, LandmarkLabel.STATIC)
        if res.scores is not None:
            b = res.scores
            for i, d, s in zip(b.ids, b.d_raw, b.d_s):
                lab = res.labels.get(int(i))
                self.debug_rows.append((frame_id, int(i), float(d), float(b.sigma), float(s),
                                        lab.value if lab else ""))

    def _blacklist(self, lid: int, label: LandmarkLabel):
        self.labels[lid] = label
        self.blacklist.add(lid)
        self.rejected.append(lid)
        lm = self.window.landmarks.pop(lid, None)
        if self.config.triangulate_eliminated and label is LandmarkLabel.DYNAMIC_ELIMINATED:
            if lm is None:
                lm = LandmarkState(lid, label=label)
                last = self.last_obs.get(lid)
                if last is not None:
                    uv = last[1]
                    lm.add_observation(last[0], normalize(uv, self.intr), uv)
            lm.label = label
            lm.inv_depth = None
            self.eliminated_tracks[lid] = lm

    def _confirm(self, confirmed):
        for lid in confirmed:
            self._blacklist(lid, LandmarkLabel.CONFIRMED_DYNAMIC)
        for lid, lm in self.window.landmarks.items():
            if lm.label is LandmarkLabel.STATIC and self.labels.get(lid) is LandmarkLabel.DYNAMIC_CANDIDATE:
                self.labels[lid] = LandmarkLabel.STATIC
                self.verified.add(lid)

    def _slide(self):
        w = self.window
        old_id = w.frames[0].frame_id
        if self.config.classify:
            # candidates about to lose their last constraint get decided now
            leaving = [lm for lm in w.landmarks.values()
                       if lm.label is LandmarkLabel.DYNAMIC_CANDIDATE and old_id in lm.obs and len(lm.obs) <= 2]
            self._confirm(confirm_dynamic(w, self.config.confirm_px, 2, leaving))
        self._finalize_eliminated(old_id)
        if not self.config.marginalize:
            w.prior = None
        old, departed = w.slide()
        if not self.config.marginalize:
            w.fix_gauge(w.frames[0])
        self.trajectory[old.frame_id] = old.copy()
        for lm in departed:
            self._finalize(lm)

    def _finalize(self, lm: LandmarkState):
        label = self.labels.get(lm.landmark_id, lm.label)
        if lm.landmark_id in self.blacklist:
            return
        if lm.world is not None and label is LandmarkLabel.STATIC:
            self.map_points[lm.landmark_id] = MapPoint(lm.landmark_id, np.asarray(lm.world), label)

    def _finalize_eliminated(self, old_id: int):
        """Triangulate eliminated tracks (map comparison only) before their frames leave."""
        if not self.config.triangulate_eliminated:
            return
        w = self.window
        for lid, lm in list(self.eliminated_tracks.items()):
            frames = [f for f in lm.obs if f in w.frame_ids]
            if old_id not in lm.obs or len(frames) < 2 or lid in self.map_points:
                continue
            probe = LandmarkState(lid, label=LandmarkLabel.STATIC)
            for f in sorted(frames):
                probe.add_observation(f, lm.obs[f], lm.pix[f])
            if w.triangulate(probe):
                self.map_points[lid] = MapPoint(lid, w.landmark_world(probe), self.labels[lid])
            del self.eliminated_tracks[lid]

    def pop_rejected(self) -> list[int]:
        """Landmark ids discarded since the last call (for tracker feedback)."""
        out, self.rejected = self.rejected, []
        return out

    def finish(self) -> RunResult:
        w = self.window
        if self.config.classify:
            self._confirm(confirm_dynamic(w, self.config.confirm_px, 2))
        for f in w.frames:
            self.trajectory[f.frame_id] = f.copy()
        for lm in list(w.landmarks.values()):
            if lm.initialized and lm.anchor in w.frame_ids:
                lm.world = w.landmark_world(lm)
                self._finalize(lm)
        if self.config.triangulate_eliminated and w.frames:
            for f in list(w.frame_ids):
                self._finalize_eliminated(f)
        labels = {lid: self.labels.get(lid, LandmarkLabel.STATIC) for lid in self.decided}
        return RunResult(dict(sorted(self.trajectory.items())), labels,
                         [self.map_points[k] for k in sorted(self.map_points)], self.cv_trace,
                         self.classify_ms, self.optimize_ms, self.debug_rows, self.diverged,
                         self.final_cost, self.costs, self.iterations)


def run_scenario(scenario, config: PipelineConfig | None = None, feedback: bool = True) -> RunResult:
    """Run the estimator over a simulated scenario, initialized at the true first state.

    With ``feedback`` the tracker is driven online and drops the features
    the estimator rejects, refilling its budget from the visible set.
    """
    config = config or PipelineConfig()
    sc = scenario.config
    est = Estimator(config, sc.extrinsics, sc.intrinsics, sc.imu_noise)
    if feedback and scenario.views:
        tracker = scenario.new_tracker()
        frames = (v.select(tracker.step(v.ids)) for v in scenario.views)
    else:
        tracker = None
        frames = iter(scenario.frames)
    f0 = next(frames)
    est.initialize(scenario.truth.frames[0], f0.ids, f0.pixels)
    for k, fr in enumerate(frames, start=1):
        est.process(fr.frame_id, fr.timestamp, fr.ids, fr.pixels, scenario.imu_between(k - 1))
        if tracker is not None:
            tracker.reject(est.pop_rejected())
    return est.finish()
