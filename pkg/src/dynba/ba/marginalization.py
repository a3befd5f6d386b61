"""Schur-complement marginalization into a linear prior."""
from __future__ import annotations

import logging

import numpy as np

from .factors import DIM, PriorFactor

log = logging.getLogger(__name__)

EIG_EPS = 1e-8


class SingularMarginalization(np.linalg.LinAlgError):
    pass


def marginalize_dense(H, b, m: int, eps: float = EIG_EPS):
    """Eliminate the first ``m`` variables of ``H x = b``.

    Returns the reduced ``(H*, b*)`` over the remaining variables. The
    marginalized block is inverted through its eigen decomposition with
    eigenvalues below ``eps * max`` treated as null directions.
    """
    H = np.asarray(H, dtype=float)
    b = np.asarray(b, dtype=float)
    if m == 0:
        return H.copy(), b.copy()
    Hmm = 0.5 * (H[:m, :m] + H[:m, :m].T)
    if not np.all(np.isfinite(Hmm)):
        raise SingularMarginalization("non-finite marginalized block")
    w, V = np.linalg.eigh(Hmm)
    if w[-1] <= 0:
        raise SingularMarginalization("marginalized block carries no information")
    keep = w > eps * w[-1]
    inv = (V[:, keep] / w[keep]) @ V[:, keep].T
    Hrm = H[m:, :m]
    Hs = H[m:, m:] - Hrm @ inv @ Hrm.T
    bs = b[m:] - Hrm @ inv @ b[:m]
    return 0.5 * (Hs + Hs.T), bs


def information_to_factor(H, b, eps: float = EIG_EPS):
    """Square-root form ``(J, r)`` with ``J^T J = H`` and ``J^T r = -b``."""
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    if w.size == 0 or w[-1] <= 0:
        return np.zeros((0, H.shape[0])), np.zeros(0)
    keep = w > eps * w[-1]
    sq = np.sqrt(w[keep])
    J = sq[:, None] * V[:, keep].T
    r = -(V[:, keep].T @ b) / sq
    return J, r


def marginalize_frame(problem, frame_id: int) -> PriorFactor:
    """Prior over retained frames after eliminating ``frame_id`` and every landmark of ``problem``.

    ``problem`` must contain only the factors touching the marginalized
    variables (plus the previous prior); the result is linearized at the
    problem's current estimates, which become the prior's fixed point.
    """
    Hpp, bp, Hpl, Hll, bl = problem.linearize()
    if Hll.size:
        ok = Hll > 1e-12
        inv = np.where(ok, 1.0 / np.where(ok, Hll, 1.0), 0.0)
        Hpp = Hpp - (Hpl * inv) @ Hpl.T
        bp = bp - Hpl @ (bl * inv)
    k = problem.index[frame_id]
    order = [k] + [i for i in range(problem.n_frames) if i != k]
    idx = np.concatenate([np.arange(DIM) + DIM * i for i in order])
    H = Hpp[np.ix_(idx, idx)]
    b = bp[idx]
    if not np.any(H[:DIM]):
        return PriorFactor([], [], np.zeros((0, 0)), np.zeros(0))
    Hs, bs = marginalize_dense(H, b, DIM)
    retained = [problem.frames[i] for i in order[1:]]
    touched = [i for i in range(len(retained)) if np.any(Hs[DIM * i:DIM * (i + 1)] != 0.0)]
    if not touched:
        return PriorFactor([], [], np.zeros((0, 0)), np.zeros(0))
    sel = np.concatenate([np.arange(DIM) + DIM * i for i in touched])
    J, r = information_to_factor(Hs[np.ix_(sel, sel)], bs[sel])
    frames = [retained[i] for i in touched]
    return PriorFactor([f.frame_id for f in frames], frames, J, r)
