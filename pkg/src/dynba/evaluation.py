"""Trajectory, classification and map metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .classifier import LandmarkLabel


class TooFewPoses(ValueError):
    pass


class AssociationFailure(ValueError):
    pass


@dataclass
class Alignment:
    R: np.ndarray
    t: np.ndarray

    def apply(self, pts):
        return np.asarray(pts, dtype=float) @ self.R.T + self.t


@dataclass
class TrajectoryMetric:
    ate_rmse: float
    errors: np.ndarray
    alignment: Alignment


@dataclass
class ClassificationMetric:
    tp: int = 0   # dynamic predicted dynamic
    fp: int = 0   # static predicted dynamic
    tn: int = 0   # static predicted static
    fn: int = 0   # dynamic predicted static

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @staticmethod
    def _ratio(a, b):
        return a / b if b else math.nan

    @property
    def precision(self) -> float:
        """Dynamic precision."""
        return self._ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        """Dynamic recall."""
        return self._ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else math.nan

    @property
    def static_precision(self) -> float:
        return self._ratio(self.tn, self.tn + self.fn)

    @property
    def static_recall(self) -> float:
        return self._ratio(self.tn, self.tn + self.fp)

    def as_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "static_precision": self.static_precision, "static_recall": self.static_recall,
                "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


@dataclass
class MapReport:
    positions: np.ndarray
    labels: list
    ids: list = field(default_factory=list)
    ghost_fraction: float = 0.0
    n_ghosts: int = 0


def align_umeyama(est, gt) -> Alignment:
    """Rigid (SE3) least-squares alignment mapping ``est`` positions onto ``gt``."""
    est = np.asarray(est, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if est.shape != gt.shape or est.ndim != 2 or est.shape[1] != 3:
        raise ValueError("expected matching (n, 3) position arrays")
    if len(est) < 3:
        raise TooFewPoses(f"{len(est)} poses; alignment needs at least 3")
    me, mg = est.mean(axis=0), gt.mean(axis=0)
    C = (gt - mg).T @ (est - me) / len(est)
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return Alignment(R, mg - R @ me)


def associate(est_times, gt_times, tol: float = 1e-3):
    """Index pairs of nearest timestamps within ``tol`` seconds."""
    est_times = np.asarray(est_times, dtype=float)
    gt_times = np.asarray(gt_times, dtype=float)
    if len(gt_times) == 0:
        raise AssociationFailure("empty ground truth")
    order = np.argsort(gt_times)
    g = gt_times[order]
    pos = np.clip(np.searchsorted(g, est_times), 1, len(g) - 1) if len(g) > 1 else np.zeros(len(est_times), int)
    left = np.clip(pos - 1, 0, len(g) - 1)
    pick = np.where(np.abs(g[left] - est_times) <= np.abs(g[pos] - est_times), left, pos)
    ok = np.abs(g[pick] - est_times) <= tol
    if not np.any(ok):
        raise AssociationFailure("no timestamps associated within tolerance")
    return np.flatnonzero(ok), order[pick[ok]]


def trajectory_metric(est_pos, gt_pos, align: bool = True) -> TrajectoryMetric:
    est_pos = np.asarray(est_pos, dtype=float)
    gt_pos = np.asarray(gt_pos, dtype=float)
    al = align_umeyama(est_pos, gt_pos) if align else Alignment(np.eye(3), np.zeros(3))
    err = np.linalg.norm(al.apply(est_pos) - gt_pos, axis=1)
    return TrajectoryMetric(float(np.sqrt(np.mean(err ** 2))), err, al)


def ate_rmse(est, gt, align: bool = True, tol: float = 1e-3) -> float:
    """ATE RMSE between timestamped trajectories ``(times, positions)``.

    Plain position arrays of equal length are accepted as already associated.
    """
    if isinstance(est, tuple) and isinstance(gt, tuple):
        ie, ig = associate(est[0], gt[0], tol)
        est_pos = np.asarray(est[1], dtype=float)[ie]
        gt_pos = np.asarray(gt[1], dtype=float)[ig]
    else:
        est_pos, gt_pos = np.asarray(est, dtype=float), np.asarray(gt, dtype=float)
        if est_pos.shape != gt_pos.shape:
            raise AssociationFailure("trajectories differ in length and carry no timestamps")
    return trajectory_metric(est_pos, gt_pos, align).ate_rmse


def _is_dynamic(label) -> bool:
    if isinstance(label, LandmarkLabel):
        return label.is_dynamic
    return bool(label)


def classification_metrics(labels: dict, truth: dict) -> ClassificationMetric:
    """Confusion counts of predicted labels against ground-truth ``is_dynamic`` flags."""
    m = ClassificationMetric()
    for lid, lab in labels.items():
        if lid not in truth:
            raise KeyError(f"landmark {lid} missing from ground truth")
        pred, true = _is_dynamic(lab), bool(truth[lid])
        if pred and true:
            m.tp += 1
        elif pred:
            m.fp += 1
        elif true:
            m.fn += 1
        else:
            m.tn += 1
    return m


def cv_trace(trace) -> dict:
    """Per-frame CV before/after elimination plus summary means.

    ``trace`` holds ``(frame, cv_pre, cv_post)`` tuples; frames without
    statistics simply have no entry.
    """
    rows = [(int(f), float(a), float(b)) for f, a, b in trace if a is not None and b is not None]
    pre = np.array([r[1] for r in rows])
    post = np.array([r[2] for r in rows])
    return {
        "frames": [r[0] for r in rows],
        "pre": pre.tolist(),
        "post": post.tolist(),
        "pre_mean": float(pre.mean()) if len(rows) else math.nan,
        "post_mean": float(post.mean()) if len(rows) else math.nan,
        "fraction_decreased": float(np.mean(pre > post)) if len(rows) else math.nan,
    }


def map_report(map_points, truth: dict) -> MapReport:
    """Ghost fraction: share of retained map points that are truly dynamic."""
    pts = [m for m in map_points if m.label is LandmarkLabel.STATIC]
    ids = [m.landmark_id for m in pts]
    ghosts = sum(1 for i in ids if truth.get(i, False))
    pos = np.array([m.position for m in pts]).reshape(-1, 3)
    return MapReport(pos, [m.label for m in pts], ids, ghosts / len(ids) if ids else 0.0, ghosts)


def run_metrics(result, truth_frames, truth_labels, cfg_hash: str, seed: int) -> dict:
    """Metrics document for one run (timing in milliseconds)."""
    fids = sorted(result.trajectory)
    est = np.array([result.trajectory[i].p for i in fids])
    gt = {f.frame_id: f for f in truth_frames}
    gtp = np.array([gt[i].p for i in fids])
    ate = trajectory_metric(est, gtp).ate_rmse if len(fids) >= 3 else math.nan
    cls = classification_metrics(result.labels, truth_labels)
    cv = cv_trace(result.cv_trace)
    mp = map_report(result.map_points, truth_labels)

    def med(x):
        return float(np.median(x)) if len(x) else math.nan

    return {
        "ate_rmse_m": ate,
        "classifier": {"precision": cls.precision, "recall": cls.recall, "f1": cls.f1,
                       "static_precision": cls.static_precision, "tp": cls.tp, "fp": cls.fp,
                       "tn": cls.tn, "fn": cls.fn},
        "ghost_fraction": mp.ghost_fraction,
        "map_size": len(mp.ids),
        "cv": {"pre_mean": cv["pre_mean"], "post_mean": cv["post_mean"]},
        "timing_ms": {"classify_median": med(result.classify_ms), "optimize_median": med(result.optimize_ms)},
        "diverged": bool(result.diverged),
        "final_cost": float(result.final_cost),
        "config_hash": cfg_hash,
        "seed": int(seed),
    }
