# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; semantics match ``_pykernels`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, sqrtl, INFINITY

cnp.import_array()

BACKEND = "cython"


def _f2(x, n, m):
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64).reshape(n, m))


def _i1(x):
    return np.ascontiguousarray(np.asarray(x, dtype=np.int64).reshape(-1))


def _w(x, n):
    return np.ascontiguousarray(np.broadcast_to(np.asarray(x, dtype=np.float64), (n,)))


def epipolar_scores(pk, pk1, M):
    """Line coefficients, epipolar precision and closed-form minimum error."""
    pk = np.asarray(pk, dtype=np.float64)
    cdef Py_ssize_t n = pk.shape[0], i
    cdef const double[:, ::1] a = _f2(pk, n, 2)
    cdef const double[:, ::1] b = _f2(pk1, n, 2)
    cdef const double[:, ::1] Mv = _f2(M, 3, 3)
    abc_a = np.empty((n, 3))
    e_a = np.empty(n)
    d_a = np.empty(n)
    cdef double[:, ::1] abc = abc_a
    cdef double[::1] e = e_a
    cdef double[::1] d = d_a
    cdef double la, lb, lc, ee, nrm
    for i in range(n):
        la = a[i, 0] * Mv[0, 0] + a[i, 1] * Mv[1, 0] + Mv[2, 0]
        lb = a[i, 0] * Mv[0, 1] + a[i, 1] * Mv[1, 1] + Mv[2, 1]
        lc = a[i, 0] * Mv[0, 2] + a[i, 1] * Mv[1, 2] + Mv[2, 2]
        abc[i, 0] = la
        abc[i, 1] = lb
        abc[i, 2] = lc
        ee = la * b[i, 0] + lb * b[i, 1] + lc
        e[i] = ee
        nrm = la * la + lb * lb
        d[i] = ee * ee / nrm if nrm > 0 else INFINITY
    return abc_a, e_a, d_a


def eliminate_sorted(d_desc, double lam, double cv_target, Py_ssize_t min_remaining):
    """Coefficient-of-variation descent on values sorted in descending order."""
    d_arr = np.ascontiguousarray(np.asarray(d_desc, dtype=np.float64))
    cdef double[::1] d = d_arr
    cdef Py_ssize_t n = d.shape[0], removed = 0, i
    # extended precision: removing a dominant value cancels most digits of var
    cdef long double mu = 0.0, var = 0.0, cv, x, mu_n, var_n, cv_n
    for i in range(n):
        mu += d[i]
    mu /= n
    for i in range(n):
        var += (d[i] - mu) * (d[i] - mu)
    var /= n
    cv = sqrtl(var) / mu if mu > 0 else 0.0
    mus = [<double>mu]
    vars_ = [<double>var]
    cvs = [<double>cv]
    while n - 1 >= min_remaining and mu > 0:
        x = d[removed]
        if not (x > lam and cv > cv_target):
            break
        mu_n = (n * mu - x) / (n - 1)
        var_n = n * var / (n - 1) - (x - mu_n) * (x - mu_n) / n
        if var_n < 0.0:
            var_n = 0.0
        if mu_n <= 0:
            break
        cv_n = sqrtl(var_n) / mu_n
        if not cv_n < cv:
            break
        removed += 1
        n -= 1
        mu = mu_n
        var = var_n
        cv = cv_n
        mus.append(<double>mu)
        vars_.append(<double>var)
        cvs.append(<double>cv)
    return removed, np.array(mus), np.array(vars_), np.array(cvs)


cdef inline void _matvec(const double[:, :, ::1] R, Py_ssize_t k, double* v, double* out) noexcept nogil:
    cdef int i
    for i in range(3):
        out[i] = R[k, i, 0] * v[0] + R[k, i, 1] * v[1] + R[k, i, 2] * v[2]


cdef inline void _matTvec(const double[:, :, ::1] R, Py_ssize_t k, double* v, double* out) noexcept nogil:
    cdef int i
    for i in range(3):
        out[i] = R[k, 0, i] * v[0] + R[k, 1, i] * v[1] + R[k, 2, i] * v[2]


def visual_linearize(Rwb, pwb, Rcb, tcb, a_idx, j_idx, l_idx, xa, xj, lam, wu, wv, jacobians=True):
    """Whitened inverse-depth reprojection residuals and Jacobians."""
    cdef Py_ssize_t n = len(a_idx), F = len(Rwb)
    cdef const double[:, :, ::1] R = np.ascontiguousarray(np.asarray(Rwb, dtype=np.float64).reshape(F, 3, 3))
    cdef const double[:, ::1] P = _f2(pwb, F, 3)
    cdef const double[:, ::1] Rc = _f2(Rcb, 3, 3)
    cdef const double[::1] tc = np.ascontiguousarray(np.asarray(tcb, dtype=np.float64).reshape(3))
    cdef const long long[::1] ai = _i1(a_idx)
    cdef const long long[::1] ji = _i1(j_idx)
    cdef const long long[::1] li = _i1(l_idx)
    cdef const double[:, ::1] XA = _f2(xa, n, 2)
    cdef const double[:, ::1] XJ = _f2(xj, n, 2)
    cdef const double[::1] L = np.ascontiguousarray(np.asarray(lam, dtype=np.float64).reshape(-1))
    cdef const double[::1] WU = _w(wu, n)
    cdef const double[::1] WV = _w(wv, n)
    cdef bint jac = bool(jacobians)

    r_a = np.empty((n, 2))
    z_a = np.empty(n)
    cdef double[:, ::1] r = r_a
    cdef double[::1] zz = z_a
    Ja_a = Jj_a = Jl_a = None
    cdef double[:, :, ::1] Ja
    cdef double[:, :, ::1] Jj
    cdef double[:, ::1] Jl
    if jac:
        Ja_a = np.empty((n, 2, 6))
        Jj_a = np.empty((n, 2, 6))
        Jl_a = np.empty((n, 2))
        Ja = Ja_a
        Jj = Jj_a
        Jl = Jl_a

    cdef Py_ssize_t k, a, j, q, c
    cdef double lm, iz, pu, pv, wuk, wvk
    cdef double fa[3]
    cdef double Pca[3]
    cdef double Pba[3]
    cdef double Pw[3]
    cdef double tmp[3]
    cdef double Pbj[3]
    cdef double Pcj[3]
    cdef double D[2][3]
    cdef double C[3][3]      # Rcb^T Rj^T
    cdef double DC[2][3]
    cdef double DCRa[2][3]
    cdef double Dr[2][3]     # D Rcb^T
    cdef double g[3]
    with nogil:
        for k in range(n):
            a = ai[k]
            j = ji[k]
            lm = L[li[k]]
            fa[0] = XA[k, 0]
            fa[1] = XA[k, 1]
            fa[2] = 1.0
            for q in range(3):
                Pca[q] = fa[q] / lm
            for q in range(3):
                Pba[q] = Rc[q, 0] * Pca[0] + Rc[q, 1] * Pca[1] + Rc[q, 2] * Pca[2] + tc[q]
            _matvec(R, a, Pba, Pw)
            for q in range(3):
                tmp[q] = Pw[q] + P[a, q] - P[j, q]
            _matTvec(R, j, tmp, Pbj)
            for q in range(3):
                tmp[q] = Pbj[q] - tc[q]
            for q in range(3):
                Pcj[q] = Rc[0, q] * tmp[0] + Rc[1, q] * tmp[1] + Rc[2, q] * tmp[2]
            zz[k] = Pcj[2]
            iz = 1.0 / Pcj[2]
            pu = Pcj[0] * iz
            pv = Pcj[1] * iz
            wuk = WU[k]
            wvk = WV[k]
            r[k, 0] = wuk * (XJ[k, 0] - pu)
            r[k, 1] = wvk * (XJ[k, 1] - pv)
            if not jac:
                continue
            D[0][0] = -wuk * iz
            D[0][1] = 0.0
            D[0][2] = wuk * pu * iz
            D[1][0] = 0.0
            D[1][1] = -wvk * iz
            D[1][2] = wvk * pv * iz
            for q in range(3):
                for c in range(3):
                    C[q][c] = Rc[0, q] * R[j, c, 0] + Rc[1, q] * R[j, c, 1] + Rc[2, q] * R[j, c, 2]
            for q in range(2):
                for c in range(3):
                    DC[q][c] = D[q][0] * C[0][c] + D[q][1] * C[1][c] + D[q][2] * C[2][c]
            for q in range(2):
                for c in range(3):
                    DCRa[q][c] = DC[q][0] * R[a, 0, c] + DC[q][1] * R[a, 1, c] + DC[q][2] * R[a, 2, c]
                    Dr[q][c] = D[q][0] * Rc[c, 0] + D[q][1] * Rc[c, 1] + D[q][2] * Rc[c, 2]
            for q in range(2):
                # position blocks
                for c in range(3):
                    Ja[k, q, c] = DC[q][c]
                    Jj[k, q, c] = -DC[q][c]
                # M [v]x row-wise equals (M_row x v)
                Ja[k, q, 3] = -(DCRa[q][1] * Pba[2] - DCRa[q][2] * Pba[1])
                Ja[k, q, 4] = -(DCRa[q][2] * Pba[0] - DCRa[q][0] * Pba[2])
                Ja[k, q, 5] = -(DCRa[q][0] * Pba[1] - DCRa[q][1] * Pba[0])
                Jj[k, q, 3] = Dr[q][1] * Pbj[2] - Dr[q][2] * Pbj[1]
                Jj[k, q, 4] = Dr[q][2] * Pbj[0] - Dr[q][0] * Pbj[2]
                Jj[k, q, 5] = Dr[q][0] * Pbj[1] - Dr[q][1] * Pbj[0]
            # dPw/dlam = -Ra Rcb fa / lam^2
            for q in range(3):
                tmp[q] = Rc[q, 0] * fa[0] + Rc[q, 1] * fa[1] + Rc[q, 2] * fa[2]
            _matvec(R, a, tmp, g)
            for q in range(2):
                Jl[k, q] = -(DC[q][0] * g[0] + DC[q][1] * g[1] + DC[q][2] * g[2]) / (lm * lm)
    return r_a, Ja_a, Jj_a, Jl_a, z_a


def visual_accumulate(r, Ja, Jj, Jl, scale, a_idx, j_idx, l_idx, Py_ssize_t stride,
                      Hpp, Hpl, Hll, bp, bl):
    """Add visual factor contributions to the normal equations in place."""
    cdef Py_ssize_t n = len(a_idx)
    cdef const double[:, ::1] rv = _f2(r, n, 2)
    cdef const double[:, :, ::1] A = np.ascontiguousarray(np.asarray(Ja, dtype=np.float64).reshape(n, 2, 6))
    cdef const double[:, :, ::1] B = np.ascontiguousarray(np.asarray(Jj, dtype=np.float64).reshape(n, 2, 6))
    cdef const double[:, ::1] Lv = _f2(Jl, n, 2)
    cdef const double[::1] s = _w(scale, n)
    cdef const long long[::1] ai = _i1(a_idx)
    cdef const long long[::1] ji = _i1(j_idx)
    cdef const long long[::1] li = _i1(l_idx)
    cdef double[:, :] H = Hpp
    cdef double[:, :] HL = Hpl
    cdef double[:] hl = Hll
    cdef double[:] gp = bp
    cdef double[:] gl = bl
    cdef Py_ssize_t k, p, q, ia, ij, l
    cdef double sk, haa, hjj, haj, hji
    with nogil:
        for k in range(n):
            sk = s[k]
            ia = ai[k] * stride
            ij = ji[k] * stride
            l = li[k]
            for p in range(6):
                for q in range(6):
                    haa = sk * (A[k, 0, p] * A[k, 0, q] + A[k, 1, p] * A[k, 1, q])
                    hjj = sk * (B[k, 0, p] * B[k, 0, q] + B[k, 1, p] * B[k, 1, q])
                    haj = sk * (A[k, 0, p] * B[k, 0, q] + A[k, 1, p] * B[k, 1, q])
                    hji = sk * (B[k, 0, p] * A[k, 0, q] + B[k, 1, p] * A[k, 1, q])
                    H[ia + p, ia + q] += haa
                    H[ij + p, ij + q] += hjj
                    H[ia + p, ij + q] += haj
                    H[ij + p, ia + q] += hji
                HL[ia + p, l] += sk * (A[k, 0, p] * Lv[k, 0] + A[k, 1, p] * Lv[k, 1])
                HL[ij + p, l] += sk * (B[k, 0, p] * Lv[k, 0] + B[k, 1, p] * Lv[k, 1])
                gp[ia + p] -= sk * (A[k, 0, p] * rv[k, 0] + A[k, 1, p] * rv[k, 1])
                gp[ij + p] -= sk * (B[k, 0, p] * rv[k, 0] + B[k, 1, p] * rv[k, 1])
            hl[l] += sk * (Lv[k, 0] * Lv[k, 0] + Lv[k, 1] * Lv[k, 1])
            gl[l] -= sk * (Lv[k, 0] * rv[k, 0] + Lv[k, 1] * rv[k, 1])
    return None
