"""Pure numpy implementations of the hot kernels.

Same signatures and semantics as the compiled ``_ckernels`` module; used
when the extension is unavailable or ``DYNBA_PURE_PYTHON=1``.
"""
from __future__ import annotations

import math

import numpy as np

BACKEND = "python"


def epipolar_scores(pk, pk1, M):
    """Line coefficients, epipolar precision and closed-form minimum error.

    ``M`` is the pixel-domain essential matrix ``K^-T [t]x R K^-1``. For each
    track the line is ``[a, b, c] = [u_k, v_k, 1] M`` and ``e`` its value at
    ``p_k1``. Returns ``(abc (n,3), e (n,), d_raw (n,))``.
    """
    pk = np.asarray(pk, dtype=float)
    pk1 = np.asarray(pk1, dtype=float)
    n = pk.shape[0]
    hk = np.empty((n, 3))
    hk[:, :2] = pk
    hk[:, 2] = 1.0
    abc = hk @ M
    e = abc[:, 0] * pk1[:, 0] + abc[:, 1] * pk1[:, 1] + abc[:, 2]
    nrm = abc[:, 0] ** 2 + abc[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(nrm > 0, e * e / nrm, np.inf)
    return abc, e, d


def eliminate_sorted(d_desc, lam, cv_target, min_remaining):
    """Coefficient-of-variation descent on values sorted in descending order.

    Removes the current maximum while it exceeds ``lam``, the current CV is
    above ``cv_target`` and removal strictly lowers the CV. Mean and
    population variance are updated with the removal recursions
    ``mu' = (n mu - d) / (n - 1)`` and
    ``var' = n var / (n - 1) - (d - mu')^2 / n``.

    Returns ``(n_removed, mu, var, cv)`` where the arrays hold the
    statistics before any removal followed by one entry per removal.
    """
    d = np.asarray(d_desc, dtype=float)
    n = d.shape[0]
    # extended precision: removing a dominant value cancels most digits of var
    dl = d.astype(np.longdouble)
    mu = dl.mean()
    var = np.mean((dl - mu) ** 2)
    cv = np.sqrt(var) / mu if mu > 0 else np.longdouble(0.0)
    mus, vars_, cvs = [mu], [var], [cv]
    removed = 0
    while n - 1 >= min_remaining and mu > 0:
        x = dl[removed]
        if not (x > lam and cv > cv_target):
            break
        mu_n = (n * mu - x) / (n - 1)
        var_n = n * var / (n - 1) - (x - mu_n) ** 2 / n
        if var_n < 0.0:
            var_n = np.longdouble(0.0)
        if mu_n <= 0:
            break
        cv_n = np.sqrt(var_n) / mu_n
        if not cv_n < cv:
            break
        removed += 1
        n -= 1
        mu, var, cv = mu_n, var_n, cv_n
        mus.append(mu)
        vars_.append(var)
        cvs.append(cv)
    return removed, np.array(mus, dtype=float), np.array(vars_, dtype=float), np.array(cvs, dtype=float)


def visual_linearize(Rwb, pwb, Rcb, tcb, a_idx, j_idx, l_idx, xa, xj, lam, wu, wv, jacobians=True):
    """Whitened inverse-depth reprojection residuals and Jacobians.

    Residual is ``w * (observed - predicted)`` on the normalized plane.
    Jacobian blocks are w.r.t. ``[δp, δθ]`` of the anchor and observing
    frames (right-perturbed rotations) and the anchor inverse depth.
    Returns ``(r (n,2), Ja (n,2,6), Jj (n,2,6), Jl (n,2), depth (n,))``;
    the Jacobian entries are ``None`` when ``jacobians`` is false.
    """
    n = len(a_idx)
    Ra = Rwb[a_idx]
    Rj = Rwb[j_idx]
    pa = pwb[a_idx]
    pj = pwb[j_idx]
    lm = lam[l_idx]
    fa = np.empty((n, 3))
    fa[:, :2] = xa
    fa[:, 2] = 1.0
    Pca = fa / lm[:, None]
    Pba = Pca @ Rcb.T + tcb
    Pw = np.einsum("nij,nj->ni", Ra, Pba) + pa
    Pbj = np.einsum("nji,nj->ni", Rj, Pw - pj)
    Pcj = (Pbj - tcb) @ Rcb
    z = Pcj[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        iz = 1.0 / z
    pred_u = Pcj[:, 0] * iz
    pred_v = Pcj[:, 1] * iz
    r = np.empty((n, 2))
    r[:, 0] = wu * (xj[:, 0] - pred_u)
    r[:, 1] = wv * (xj[:, 1] - pred_v)
    if not jacobians:
        return r, None, None, None, z

    D = np.zeros((n, 2, 3))
    D[:, 0, 0] = -wu * iz
    D[:, 0, 2] = wu * pred_u * iz
    D[:, 1, 1] = -wv * iz
    D[:, 1, 2] = wv * pred_v * iz
    # dPcj/dPw = Rcb^T Rj^T
    C = np.einsum("ki,nkj->nij", Rcb, np.transpose(Rj, (0, 2, 1)))
    DC = D @ C
    Ja = np.empty((n, 2, 6))
    Jj = np.empty((n, 2, 6))
    Ja[:, :, :3] = DC
    Ja[:, :, 3:] = -DC @ Ra @ _skew_batch(Pba)
    Jj[:, :, :3] = -DC
    Jj[:, :, 3:] = D @ (Rcb.T @ _skew_batch(Pbj))
    dPw_dl = -np.einsum("nij,nj->ni", Ra, fa @ Rcb.T) / (lm * lm)[:, None]
    Jl = np.einsum("nij,nj->ni", DC, dPw_dl)
    return r, Ja, Jj, Jl, z


def _skew_batch(v):
    n = v.shape[0]
    S = np.zeros((n, 3, 3))
    S[:, 0, 1] = -v[:, 2]
    S[:, 0, 2] = v[:, 1]
    S[:, 1, 0] = v[:, 2]
    S[:, 1, 2] = -v[:, 0]
    S[:, 2, 0] = -v[:, 1]
    S[:, 2, 1] = v[:, 0]
    return S


def visual_accumulate(r, Ja, Jj, Jl, scale, a_idx, j_idx, l_idx, stride, Hpp, Hpl, Hll, bp, bl):
    """Add visual factor contributions to the normal equations in place.

    ``scale`` multiplies each factor's information (robust weight, 0 for
    inactive factors); ``stride`` is the per-frame tangent dimension.
    Pose blocks occupy the first six columns of each frame block.
    """
    s = np.asarray(scale, dtype=float)
    Ja_s = Ja * s[:, None, None]
    Jj_s = Jj * s[:, None, None]
    Haa = np.einsum("nki,nkj->nij", Ja_s, Ja)
    Hjj = np.einsum("nki,nkj->nij", Jj_s, Jj)
    Haj = np.einsum("nki,nkj->nij", Ja_s, Jj)
    ia = a_idx * stride
    ij = j_idx * stride
    off = np.arange(6)
    rows_a = ia[:, None] + off
    rows_j = ij[:, None] + off
    np.add.at(Hpp, (rows_a[:, :, None], rows_a[:, None, :]), Haa)
    np.add.at(Hpp, (rows_j[:, :, None], rows_j[:, None, :]), Hjj)
    np.add.at(Hpp, (rows_a[:, :, None], rows_j[:, None, :]), Haj)
    np.add.at(Hpp, (rows_j[:, :, None], rows_a[:, None, :]), np.transpose(Haj, (0, 2, 1)))
    np.add.at(Hpl, (rows_a, l_idx[:, None]), np.einsum("nki,nk->ni", Ja_s, Jl))
    np.add.at(Hpl, (rows_j, l_idx[:, None]), np.einsum("nki,nk->ni", Jj_s, Jl))
    np.add.at(Hll, l_idx, s * np.einsum("nk,nk->n", Jl, Jl))
    np.add.at(bp, rows_a, -np.einsum("nki,nk->ni", Ja_s, r))
    np.add.at(bp, rows_j, -np.einsum("nki,nk->ni", Jj_s, r))
    np.add.at(bl, l_idx, -s * np.einsum("nk,nk->n", Jl, r))
