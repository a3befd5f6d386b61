"""Assembly and Levenberg-Marquardt minimization of the window objective.

The objective sums the marginalization prior, whitened IMU terms and
Huber-robustified visual terms. Inverse depths are eliminated with a Schur
complement (their Hessian block is diagonal), the reduced frame system is
solved densely. Dynamic-candidate observations carry an adaptive scale
``σ_r`` that is refreshed in an outer loop around the inner LM solve.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .. import kernels
from ..classifier import LandmarkLabel
from ..geometry import CameraIntrinsics, Pose
from ..imu_preint import ExtrinsicCalib
from .factors import (DEFAULT_COV_FLOOR, DIM, CandidateVisualFactor, ImuFactor, PriorFactor,
                      StaticVisualFactor, candidate_sigma_batch, huber, huber_weight)
from .states import FrameState, LandmarkState

log = logging.getLogger(__name__)

Z_MIN = 1e-6
LAMBDA_MIN = 1.0 / 200.0   # depth 200 m
LAMBDA_MAX = 1.0 / 0.1     # depth 0.1 m
ACTIVE_LABELS = (LandmarkLabel.STATIC, LandmarkLabel.DYNAMIC_CANDIDATE)


class EmptyWindow(ValueError):
    pass


class SolverDiverged(RuntimeError):
    pass


@dataclass
class SolverConfig:
    sigma_px: float = 1.0
    robust: bool = True
    candidate_residual: bool = True
    mu_init: float = 1e-4
    max_inner: int = 25
    rel_tol: float = 1e-6
    abs_tol: float = 1e-16     # whitened cost treated as an exact fit
    max_outer: int = 5
    sigma_tol: float = 0.01
    max_rejects: int = 5
    imu_cov_floor: np.ndarray = field(default_factory=lambda: DEFAULT_COV_FLOOR.copy())


@dataclass
class OptimizeResult:
    initial_cost: float
    final_cost: float
    iterations: int = 0
    outer_iterations: int = 0
    status: str = "converged"
    state_change: float = 0.0

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"


class Problem:
    """Factor graph over a window snapshot.

    ``frames`` and ``landmarks`` are the live window objects; the problem
    reads them on construction and writes results back via :meth:`commit`.
    """

    def __init__(self, frames: list[FrameState], landmarks: list[LandmarkState],
                 imu_factors: list[ImuFactor], prior: PriorFactor | None,
                 extr: ExtrinsicCalib, intr: CameraIntrinsics, config: SolverConfig):
        if len(frames) < 1:
            raise EmptyWindow("window has no frames")
        self.frames = [f.copy() for f in frames]
        self._live_frames = frames
        self.index = {f.frame_id: i for i, f in enumerate(frames)}
        self.imu_factors = imu_factors
        self.prior = prior
        self.extr = extr
        self.intr = intr
        self.config = config
        self.R_cb = extr.R_cb.matrix()
        self.t_cb = extr.t_cb

        self.landmarks = landmarks
        self.lam = np.array([lm.inv_depth for lm in landmarks], dtype=float)
        a_idx, j_idx, l_idx, xa, xj, pa, pj, cand, sig = [], [], [], [], [], [], [], [], []
        self.factors: list = []
        if prior is not None and not prior.is_empty:
            self.factors.append(prior)
        self.factors.extend(imu_factors)
        for li, lm in enumerate(landmarks):
            is_cand = lm.label is LandmarkLabel.DYNAMIC_CANDIDATE and config.candidate_residual
            for fid in sorted(lm.obs):
                if fid == lm.anchor:
                    continue
                a_idx.append(self.index[lm.anchor])
                j_idx.append(self.index[fid])
                l_idx.append(li)
                xa.append(lm.obs[lm.anchor])
                xj.append(lm.obs[fid])
                pa.append(lm.pix[lm.anchor])
                pj.append(lm.pix[fid])
                cand.append(is_cand)
                s = lm.sigma_r.get(fid, 1.0) if is_cand else 1.0
                sig.append(s)
                self.factors.append(CandidateVisualFactor(lm.landmark_id, fid, s) if is_cand
                                    else StaticVisualFactor(lm.landmark_id, fid))
        n = len(a_idx)
        self.a_idx = np.array(a_idx, dtype=np.int64)
        self.j_idx = np.array(j_idx, dtype=np.int64)
        self.l_idx = np.array(l_idx, dtype=np.int64)
        self.xa = np.array(xa, dtype=float).reshape(n, 2)
        self.xj = np.array(xj, dtype=float).reshape(n, 2)
        self.pa = np.array(pa, dtype=float).reshape(n, 2)
        self.pj = np.array(pj, dtype=float).reshape(n, 2)
        self.is_candidate = np.array(cand, dtype=bool)
        self.sigma_r = np.array(sig, dtype=float)
        self.active = np.ones(n, dtype=bool)
        if n:
            z = self.visual_residuals(self.frames, self.lam)[4]
            self.active = (z > Z_MIN) & (self.lam[self.l_idx] > 0)

    # -- sizes ----------------------------------------------------------

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def n_landmarks(self) -> int:
        return len(self.landmarks)

    @property
    def n_visual(self) -> int:
        return len(self.a_idx)

    def states(self, frames=None) -> dict[int, FrameState]:
        return {f.frame_id: f for f in (frames or self.frames)}

    # -- residual evaluation --------------------------------------------

    def _weights(self):
        scale = self.intr.fx / (self.config.sigma_px * np.sqrt(self.sigma_r))
        return scale, scale * (self.intr.fy / self.intr.fx)

    def _frame_arrays(self, frames):
        Rwb = np.array([f.R.matrix() for f in frames])
        pwb = np.array([f.p for f in frames])
        return Rwb, pwb

    def visual_residuals(self, frames, lam, jacobians=False):
        wu, wv = self._weights()
        Rwb, pwb = self._frame_arrays(frames)
        return kernels.visual_linearize(Rwb, pwb, self.R_cb, self.t_cb, self.a_idx, self.j_idx,
                                        self.l_idx, self.xa, self.xj, lam, wu, wv, jacobians)

    def _robust(self, s):
        if self.config.robust:
            return huber(s), huber_weight(s)
        return s, np.ones_like(s)

    def cost(self, frames=None, lam=None, active=None) -> float:
        """Objective value; ``inf`` when an active visual factor loses positive depth."""
        frames = self.frames if frames is None else frames
        lam = self.lam if lam is None else lam
        active = self.active if active is None else active
        states = self.states(frames)
        total = 0.0
        if self.prior is not None and not self.prior.is_empty:
            total += float(np.sum(self.prior.residual(states) ** 2))
        for fac in self.imu_factors:
            r = fac.residual(states[fac.frame_i], states[fac.frame_j])
            total += float(r @ r)
        if self.n_visual:
            r, _, _, _, z = self.visual_residuals(frames, lam)
            if np.any(active & ~(z > Z_MIN)) or np.any(lam[self.l_idx[active]] <= 0):
                return math.inf
            s = np.einsum("ni,ni->n", r, r)
            rho, _ = self._robust(s)
            total += float(np.sum(rho[active]))
        return total

    def cost_breakdown(self) -> dict:
        states = self.states()
        out = {"prior": 0.0, "imu": 0.0, "visual_static": 0.0, "visual_candidate": 0.0}
        if self.prior is not None and not self.prior.is_empty:
            out["prior"] = float(np.sum(self.prior.residual(states) ** 2))
        for fac in self.imu_factors:
            r = fac.residual(states[fac.frame_i], states[fac.frame_j])
            out["imu"] += float(r @ r)
        if self.n_visual:
            r, _, _, _, _ = self.visual_residuals(self.frames, self.lam)
            rho, _ = self._robust(np.einsum("ni,ni->n", r, r))
            rho = np.where(self.active, rho, 0.0)
            out["visual_static"] = float(rho[~self.is_candidate].sum())
            out["visual_candidate"] = float(rho[self.is_candidate].sum())
        return out

    # -- linearization --------------------------------------------------

    def linearize(self):
        N, L = self.n_frames, self.n_landmarks
        Hpp = np.zeros((DIM * N, DIM * N))
        bp = np.zeros(DIM * N)
        Hpl = np.zeros((DIM * N, L))
        Hll = np.zeros(L)
        bl = np.zeros(L)
        states = self.states()

        if self.prior is not None and not self.prior.is_empty:
            r, J = self.prior.residual(states, jacobians=True)
            cols = np.concatenate([np.arange(DIM) + DIM * self.index[f] for f in self.prior.frame_ids])
            Hpp[np.ix_(cols, cols)] += J.T @ J
            bp[cols] -= J.T @ r
        for fac in self.imu_factors:
            r, Ji, Jj = fac.residual(states[fac.frame_i], states[fac.frame_j], jacobians=True)
            i, j = DIM * self.index[fac.frame_i], DIM * self.index[fac.frame_j]
            Hpp[i:i + DIM, i:i + DIM] += Ji.T @ Ji
            Hpp[j:j + DIM, j:j + DIM] += Jj.T @ Jj
            Hij = Ji.T @ Jj
            Hpp[i:i + DIM, j:j + DIM] += Hij
            Hpp[j:j + DIM, i:i + DIM] += Hij.T
            bp[i:i + DIM] -= Ji.T @ r
            bp[j:j + DIM] -= Jj.T @ r
        if self.n_visual:
            r, Ja, Jj, Jl, z = self.visual_residuals(self.frames, self.lam, jacobians=True)
            self.active = (z > Z_MIN) & (self.lam[self.l_idx] > 0)
            s = np.einsum("ni,ni->n", r, r)
            _, w = self._robust(s)
            w = np.where(self.active, w, 0.0)
            kernels.visual_accumulate(r, Ja, Jj, Jl, w, self.a_idx, self.j_idx, self.l_idx, DIM,
                                      Hpp, Hpl, Hll, bp, bl)
        return Hpp, bp, Hpl, Hll, bl

    def solve(self, system, mu: float):
        Hpp, bp, Hpl, Hll, bl = system
        d = np.diag(Hpp).copy()
        A = Hpp + np.diag(mu * np.maximum(d, 1e-9))
        Hll_d = Hll * (1.0 + mu)
        ok = Hll_d > 1e-12
        inv = np.where(ok, 1.0 / np.where(ok, Hll_d, 1.0), 0.0)
        S = A - (Hpl * inv) @ Hpl.T
        rhs = bp - Hpl @ (bl * inv)
        S = 0.5 * (S + S.T)
        try:
            dx = scipy.linalg.cho_solve(scipy.linalg.cho_factor(S, check_finite=False), rhs, check_finite=False)
        except (np.linalg.LinAlgError, ValueError):
            dx = np.linalg.lstsq(S, rhs, rcond=None)[0]
        dl = (bl - Hpl.T @ dx) * inv
        return dx, dl

    def retract(self, dx, dl):
        """Apply a step; inverse depths are projected onto ``[LAMBDA_MIN, LAMBDA_MAX]``."""
        frames = [f.retract(dx[DIM * i:DIM * (i + 1)]) for i, f in enumerate(self.frames)]
        return frames, np.clip(self.lam + dl, LAMBDA_MIN, LAMBDA_MAX)

    # -- candidate scales -----------------------------------------------

    def update_candidate_sigma(self) -> float:
        """Recompute ``σ_r`` for candidate observations; returns max relative change."""
        m = self.is_candidate
        if not np.any(m):
            return 0.0
        Tc = [Pose(f.R, f.p) * self.extr.pose for f in self.frames]
        a = self.a_idx[m]
        j = self.j_idx[m]
        # one relative pose per distinct frame pair, scattered back to observations
        pairs, inv = np.unique(np.stack([a, j], axis=1), axis=0, return_inverse=True)
        rels = [Tc[ia].inverse() * Tc[ij] for ia, ij in pairs]
        inv = inv.reshape(-1)
        R_aj = np.array([r.R for r in rels])[inv]
        t_aj = np.array([r.t for r in rels])[inv]
        new = candidate_sigma_batch(self.pa[m], self.pj[m], R_aj, t_aj, self.intr)
        old = self.sigma_r[m]
        change = float(np.max(np.abs(new - old) / old))
        self.sigma_r[m] = new
        return change

    # -- results --------------------------------------------------------

    def commit(self):
        for live, f in zip(self._live_frames, self.frames):
            live.p, live.R, live.v, live.ba, live.bg = f.p, f.R, f.v, f.ba, f.bg
        sig_by_lm: dict[int, dict[int, float]] = {}
        for k in np.flatnonzero(self.is_candidate):
            lm = self.landmarks[self.l_idx[k]]
            sig_by_lm.setdefault(lm.landmark_id, {})[self.frames[self.j_idx[k]].frame_id] = float(self.sigma_r[k])
        for lm, lam in zip(self.landmarks, self.lam):
            lm.inv_depth = float(lam)
            if lm.landmark_id in sig_by_lm:
                lm.sigma_r.update(sig_by_lm[lm.landmark_id])

    def normal_matrix(self):
        """Schur-reduced frame information (undamped) at the current state."""
        Hpp, _, Hpl, Hll, _ = self.linearize()
        ok = Hll > 1e-12
        inv = np.where(ok, 1.0 / np.where(ok, Hll, 1.0), 0.0)
        return Hpp - (Hpl * inv) @ Hpl.T


def problem_landmarks(landmarks, frame_ids) -> list[LandmarkState]:
    """Landmarks eligible for optimization: initialized, active label, two or more observations."""
    ids = set(frame_ids)
    out = []
    for lm in landmarks:
        if lm.label not in ACTIVE_LABELS or not lm.initialized or lm.anchor not in ids:
            continue
        if sum(1 for f in lm.obs if f in ids) < 2:
            continue
        out.append(lm)
    return out


def inner_lm(problem: Problem, config: SolverConfig) -> tuple[int, str]:
    cost = problem.cost()
    mu = config.mu_init
    its = 0
    status = "max_iterations"
    if not math.isfinite(cost):
        return 0, "diverged"
    while its < config.max_inner:
        if cost <= config.abs_tol:
            status = "converged"
            break
        system = problem.linearize()
        cost = problem.cost()  # active set may have changed
        rejects = 0
        accepted = False
        while rejects < config.max_rejects:
            dx, dl = problem.solve(system, mu)
            if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dl))):
                mu *= 10.0
                rejects += 1
                continue
            frames, lam = problem.retract(dx, dl)
            new_cost = problem.cost(frames, lam)
            if new_cost < cost:
                accepted = True
                break
            mu *= 10.0
            rejects += 1
        its += 1
        if not accepted:
            status = "stalled"
            break
        problem.frames, problem.lam = frames, lam
        mu = max(mu * 0.1, 1e-12)
        decrease = (cost - new_cost) / cost
        cost = new_cost
        if decrease < config.rel_tol:
            status = "converged"
            break
    return its, status


def optimize(problem: Problem, config: SolverConfig | None = None) -> OptimizeResult:
    """Outer loop over candidate scales around an inner LM solve."""
    config = config or problem.config
    x0 = [f.copy() for f in problem.frames]
    lam0 = problem.lam.copy()
    has_cand = bool(np.any(problem.is_candidate))
    if has_cand:
        problem.update_candidate_sigma()
    result = OptimizeResult(problem.cost(), math.nan)
    for outer in range(config.max_outer):
        its, status = inner_lm(problem, config)
        result.iterations += its
        result.outer_iterations = outer + 1
        result.status = status
        if status == "diverged" or not has_cand:
            break
        change = problem.update_candidate_sigma()
        if change < config.sigma_tol:
            break
    result.final_cost = problem.cost()
    if not math.isfinite(result.final_cost):
        result.status = "diverged"
    dx = [np.concatenate([f.p - g.p, (g.R.inverse() * f.R).log(), f.v - g.v]) for f, g in zip(problem.frames, x0)]
    change = float(np.max(np.abs(np.concatenate(dx)))) if dx else 0.0
    if len(lam0):
        change = max(change, float(np.max(np.abs(problem.lam - lam0))))
    result.state_change = change
    return result
