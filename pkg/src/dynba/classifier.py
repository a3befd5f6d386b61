"""Frame-pair dynamic landmark preprocessing.

For every landmark tracked from frame k to k+1 the IMU-predicted relative
camera pose gives an epipolar line for ``p_k`` in image k+1. The squared
pixel distance of ``p_k1`` from that line is the minimum projection error
``d_raw``; dividing by the motion-prior credibility factor gives ``d_s``.
Landmarks are then eliminated in descending ``d_s`` order while the
coefficient of variation keeps falling toward √2, and the survivors whose
``d_raw`` exceeds a second threshold are marked as dynamic candidates.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .geometry import CameraIntrinsics, Pose, essential_from_pose
from .imu_preint import ExtrinsicCalib, Preintegration, camera_motion_prior, position_variance

CV_TARGET = math.sqrt(2.0)
MIN_TRANSLATION = 1e-9


class ClassifierError(ValueError):
    pass


class DegenerateTranslation(ClassifierError):
    pass


class DegenerateLine(ClassifierError):
    pass


class ZeroTranslation(ClassifierError):
    pass


class InsufficientTracks(ClassifierError):
    pass


class LandmarkLabel(enum.Enum):
    STATIC = "static"
    DYNAMIC_CANDIDATE = "dynamic_candidate"
    DYNAMIC_ELIMINATED = "dynamic_eliminated"
    CONFIRMED_DYNAMIC = "confirmed_dynamic"

    @property
    def is_dynamic(self) -> bool:
        return self is not LandmarkLabel.STATIC


@dataclass(frozen=True)
class EpipolarLine:
    a: float
    b: float
    c: float
    e: float


@dataclass(frozen=True)
class TrackScore:
    landmark_id: int
    d_raw: float
    sigma: float
    d_s: float


@dataclass(frozen=True)
class EliminationStats:
    n: int
    mu: float
    var: float
    cv: float


@dataclass
class ClassifierConfig:
    lambda_dy: float = 4.0
    lambda_dy_c: float = 1.0
    sigma_max: float = 100.0
    min_tracks: int = 4
    eq1b_approx: bool = False


def pixel_essential(rel_pose: Pose, intr: CameraIntrinsics) -> np.ndarray:
    """``K^-T [t]x R K^-1``: maps pixel points of frame k+1 to lines of frame k's point."""
    return intr.K_inv.T @ essential_from_pose(rel_pose) @ intr.K_inv


def epipolar_precision(p_k, p_k1, rel_pose: Pose, intr: CameraIntrinsics) -> EpipolarLine:
    """Epipolar line of ``p_k`` in pixel coordinates and its value at ``p_k1``.

    ``[a, b, c] = [u_k, v_k, 1] K^-T [t]x R K^-1``, so ``e`` is linear in
    a displacement of ``p_k1`` with gradient ``(a, b)``.
    """
    if np.linalg.norm(rel_pose.translation) < MIN_TRANSLATION:
        raise DegenerateTranslation("relative translation too small for an epipolar line")
    abc, e, _ = kernels.epipolar_scores(np.atleast_2d(p_k), np.atleast_2d(p_k1), pixel_essential(rel_pose, intr))
    a, b, c = abc[0]
    return EpipolarLine(float(a), float(b), float(c), float(e[0]))


def min_projection_error(line: EpipolarLine) -> float:
    """Smallest ``du² + dv²`` with ``a du + b dv = e``: ``e² / (a² + b²)``."""
    nrm = line.a * line.a + line.b * line.b
    if nrm == 0.0:
        raise DegenerateLine("line has a = b = 0")
    return line.e * line.e / nrm


def credibility_factor(pos_var: float, t_norm: float) -> float:
    """``(1 + sqrt(pos_var) / |t|)²``; at least 1."""
    if pos_var < 0:
        raise ValueError("position variance must be non-negative")
    if t_norm < MIN_TRANSLATION:
        raise ZeroTranslation(f"translation norm {t_norm:g} m")
    return (1.0 + math.sqrt(pos_var) / t_norm) ** 2


@dataclass
class ScoreBatch:
    """Array form of a frame pair's track scores."""
    ids: np.ndarray
    d_raw: np.ndarray
    sigma: float
    d_s: np.ndarray
    e: np.ndarray
    abc: np.ndarray

    def __len__(self):
        return len(self.ids)

    def to_scores(self) -> list[TrackScore]:
        return [TrackScore(int(i), float(d), self.sigma, float(s))
                for i, d, s in zip(self.ids, self.d_raw, self.d_s)]


def score_arrays(ids, pk, pk1, rel_pose: Pose, intr: CameraIntrinsics, pos_var: float) -> ScoreBatch:
    t_norm = float(np.linalg.norm(rel_pose.translation))
    if t_norm < MIN_TRANSLATION:
        raise DegenerateTranslation(f"translation norm {t_norm:g} m")
    sigma = credibility_factor(pos_var, t_norm)
    abc, e, d_raw = kernels.epipolar_scores(np.asarray(pk, float).reshape(-1, 2),
                                            np.asarray(pk1, float).reshape(-1, 2),
                                            pixel_essential(rel_pose, intr))
    return ScoreBatch(np.asarray(ids, dtype=np.int64), d_raw, sigma, d_raw / sigma, e, abc)


def score_tracks(tracks: Sequence, rel_pose: Pose, intr: CameraIntrinsics, pos_var: float) -> list[TrackScore]:
    """Score ``(p_k, p_k1, landmark_id)`` tracks against the motion prior."""
    if not tracks:
        raise ValueError("no tracks to score")
    pk = np.array([t[0] for t in tracks], dtype=float)
    pk1 = np.array([t[1] for t in tracks], dtype=float)
    ids = [t[2] for t in tracks]
    return score_arrays(ids, pk, pk1, rel_pose, intr, pos_var).to_scores()


def removal_update(n: int, mu: float, var: float, x: float) -> tuple[float, float]:
    """Mean and population variance after removing ``x`` from ``n`` values.

    Evaluated in extended precision: removing a dominant value cancels
    most of the variance's digits.
    """
    if n < 2:
        raise ValueError("cannot remove from fewer than two values")
    n_, mu_, var_, x_ = np.longdouble(n), np.longdouble(mu), np.longdouble(var), np.longdouble(x)
    mu_n = (n_ * mu_ - x_) / (n_ - 1)
    var_n = n_ * var_ / (n_ - 1) - (x_ - mu_n) ** 2 / n_
    return mu_n, max(var_n, np.longdouble(0.0))


def _descending_order(ids, d_s):
    # descending d_s, ties by ascending id
    return np.lexsort((np.asarray(ids), -np.asarray(d_s)))


def eliminate_arrays(ids, d_s, lambda_dy: float = 4.0, min_tracks: int = 4):
    if lambda_dy <= 0:
        raise ValueError("lambda_dy must be positive")
    n = len(ids)
    if n < min_tracks:
        raise InsufficientTracks(f"{n} tracks, need at least {min_tracks}")
    order = _descending_order(ids, d_s)
    d_sorted = np.asarray(d_s, dtype=float)[order]
    n_removed, mu, var, cv = kernels.eliminate_sorted(d_sorted, lambda_dy, CV_TARGET, 2)
    removed = np.asarray(ids)[order[:n_removed]]
    trace = [EliminationStats(n - k, float(mu[k]), float(var[k]), float(cv[k])) for k in range(len(mu))]
    return removed, trace


def eliminate(scores: Sequence[TrackScore], lambda_dy: float = 4.0, min_tracks: int = 4):
    """Remove landmarks from the top of the ``d_s`` ranking.

    Returns ``(removed ids in removal order, statistics trace)``; the trace
    starts with the statistics of the full set.
    """
    ids = [s.landmark_id for s in scores]
    d_s = [s.d_s for s in scores]
    removed, trace = eliminate_arrays(ids, d_s, lambda_dy, min_tracks)
    return [int(i) for i in removed], trace


def mark_candidates(scores: Iterable[TrackScore], lambda_dy_c: float = 1.0) -> dict[int, LandmarkLabel]:
    if lambda_dy_c <= 0:
        raise ValueError("lambda_dy_c must be positive")
    return {s.landmark_id: (LandmarkLabel.DYNAMIC_CANDIDATE if s.sigma * s.d_s > lambda_dy_c
                            else LandmarkLabel.STATIC)
            for s in scores}


@dataclass
class FramePairResult:
    labels: dict[int, LandmarkLabel] = field(default_factory=dict)
    scores: ScoreBatch | None = None
    removed: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    trace: list[EliminationStats] = field(default_factory=list)
    skipped: str | None = None
    rel_pose: Pose | None = None

    @property
    def cv_pre(self):
        return self.trace[0].cv if self.trace else None

    @property
    def cv_post(self):
        return self.trace[-1].cv if self.trace else None


def classify_pair(ids, pk, pk1, rel_pose: Pose, pos_var: float, intr: CameraIntrinsics,
                  config: ClassifierConfig | None = None) -> FramePairResult:
    """Score, eliminate and mark one frame pair given the relative camera pose."""
    config = config or ClassifierConfig()
    ids = np.asarray(ids, dtype=np.int64)
    result = FramePairResult(rel_pose=rel_pose)
    if len(ids) == 0:
        result.skipped = "empty"
        return result
    t_norm = float(np.linalg.norm(rel_pose.translation))
    if t_norm < MIN_TRANSLATION:
        result.skipped = "degenerate_translation"
        return result
    batch = score_arrays(ids, pk, pk1, rel_pose, intr, pos_var)
    result.scores = batch
    if batch.sigma > config.sigma_max:
        result.skipped = "low_credibility"
        return result
    keep = np.ones(len(ids), dtype=bool)
    if len(ids) >= config.min_tracks:
        removed, trace = eliminate_arrays(ids, batch.d_s, config.lambda_dy, config.min_tracks)
        result.removed = removed
        result.trace = trace
        keep &= ~np.isin(ids, removed)
    for i in result.removed:
        result.labels[int(i)] = LandmarkLabel.DYNAMIC_ELIMINATED
    cand = batch.sigma * batch.d_s > config.lambda_dy_c
    for i, c, k in zip(ids, cand, keep):
        if k:
            result.labels[int(i)] = LandmarkLabel.DYNAMIC_CANDIDATE if c else LandmarkLabel.STATIC
    return result


def preprocess_frame_pair(ids, pk, pk1, preint: Preintegration, extr: ExtrinsicCalib,
                          intr: CameraIntrinsics, config: ClassifierConfig | None = None,
                          R_k=None, v_k=None, acc_bias=None, gyr_bias=None) -> FramePairResult:
    """Full preprocessing of tracks from frame k to k+1 using the IMU prior.

    ``R_k``/``v_k`` are the current world orientation and velocity estimates
    of body k, needed to remove gravity from the preintegrated displacement.
    """
    config = config or ClassifierConfig()
    R_k = np.eye(3) if R_k is None else R_k
    v_k = np.zeros(3) if v_k is None else v_k
    rel = camera_motion_prior(preint, extr, R_k, v_k, acc_bias, gyr_bias, eq1b_approx=config.eq1b_approx)
    return classify_pair(ids, pk, pk1, rel, position_variance(preint), intr, config)


DEBUG_FIELDS = ("frame", "landmark_id", "d_raw", "sigma", "d_s", "label")


def write_debug_rows(writer: "csv.writer", frame: int, result: FramePairResult) -> None:
    if result.scores is None:
        return
    b = result.scores
    for i, d, s in zip(b.ids, b.d_raw, b.d_s):
        label = result.labels.get(int(i))
        writer.writerow([frame, int(i), f"{d:.9g}", f"{b.sigma:.9g}", f"{s:.9g}",
                         label.value if label else ""])
