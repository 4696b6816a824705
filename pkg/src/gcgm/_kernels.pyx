# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops; see ``_kernels_py`` for the reference implementation."""
from libc.math cimport log, fabs, sqrt

import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef enum:
    NOISE_EXACT = 0
    NOISE_GAUSSIAN = 1


cdef inline void _cell(long c, double y, int code, double param,
                       long *viol, double *ll) noexcept nogil:
    cdef double d, lc
    if code == NOISE_EXACT:
        viol[0] = <long>fabs(c - y)
        ll[0] = 0.0
    elif code == NOISE_GAUSSIAN:
        d = y - c
        viol[0] = 0
        ll[0] = -d * d / (2.0 * param)
    elif c == 0:
        viol[0] = 1 if y > 0 else 0
        ll[0] = 0.0
    else:
        lc = param * c
        viol[0] = 0
        ll[0] = y * log(lc) - lc


def mh_sweeps(
    cnp.int64_t[:, ::1] traj,
    cnp.int64_t[::1] order,
    cnp.int64_t[::1] parent,
    double[::1] root_cum,
    double[:, :, ::1] cond_cum,
    cnp.int64_t[:, ::1] node_counts,
    cnp.int64_t[:, :, ::1] edge_counts,
    double[:, ::1] y,
    cnp.uint8_t[::1] observed,
    int noise_code,
    double noise_param,
    double[:, :, ::1] uniforms,
    cnp.int64_t[::1] batch_of_sweep,
    double[:, :, ::1] node_acc,
    double[:, :, :, ::1] edge_acc,
):
    cdef Py_ssize_t S = uniforms.shape[0]
    cdef Py_ssize_t N = uniforms.shape[1]
    cdef Py_ssize_t n = traj.shape[1]
    cdef Py_ssize_t L = root_cum.shape[0]
    cdef Py_ssize_t s, m, k, v, idx, i, j
    cdef long root = order[0]
    cdef long a, b, p, pa, pb, ca, cb, slot
    cdef long va0, va1, vb0, vb1, d_viol
    cdef double la0, la1, lb0, lb1, d_ll, uu
    cdef bint accept
    cdef long accepted = 0
    cdef cnp.int64_t[::1] prop = np.zeros(n, dtype=np.int64)

    with nogil:
        for s in range(S):
            for m in range(N):
                for k in range(n):
                    v = order[k]
                    uu = uniforms[s, m, k]
                    idx = 0
                    if v == root:
                        while idx < L - 1 and uu >= root_cum[idx]:
                            idx += 1
                    else:
                        pa = prop[parent[v]]
                        while idx < L - 1 and uu >= cond_cum[v, pa, idx]:
                            idx += 1
                    prop[v] = idx
                d_viol = 0
                d_ll = 0.0
                for v in range(n):
                    a = traj[m, v]
                    b = prop[v]
                    if a == b or not observed[v]:
                        continue
                    ca = node_counts[v, a]
                    cb = node_counts[v, b]
                    _cell(ca, y[v, a], noise_code, noise_param, &va0, &la0)
                    _cell(ca - 1, y[v, a], noise_code, noise_param, &va1, &la1)
                    _cell(cb, y[v, b], noise_code, noise_param, &vb0, &lb0)
                    _cell(cb + 1, y[v, b], noise_code, noise_param, &vb1, &lb1)
                    d_viol += va1 + vb1 - va0 - vb0
                    d_ll += la1 + lb1 - la0 - lb0
                if d_viol < 0:
                    accept = True
                elif d_viol > 0:
                    accept = False
                else:
                    accept = d_ll >= 0.0 or log(uniforms[s, m, n]) < d_ll
                if accept:
                    accepted += 1
                    for v in range(n):
                        a = traj[m, v]
                        b = prop[v]
                        p = parent[v]
                        if p >= 0:
                            pa = traj[m, p]
                            pb = prop[p]
                            if pa != pb or a != b:
                                edge_counts[v, pa, a] -= 1
                                edge_counts[v, pb, b] += 1
                    for v in range(n):
                        a = traj[m, v]
                        b = prop[v]
                        if a != b:
                            node_counts[v, a] -= 1
                            node_counts[v, b] += 1
                            traj[m, v] = b
            slot = batch_of_sweep[s]
            if slot >= 0:
                for v in range(n):
                    for i in range(L):
                        node_acc[slot, v, i] += node_counts[v, i]
                        for j in range(L):
                            edge_acc[slot, v, i, j] += edge_counts[v, i, j]
    return accepted


# EP edge kernels -----------------------------------------------------------

from libc.stdlib cimport malloc, free
from libc.string cimport memcpy
from scipy.linalg.cython_blas cimport dgemm
from scipy.linalg.cython_lapack cimport dpotrf, dpotrs

cdef enum:
    FLAG_CONVERGED = 1
    FLAG_LINE_SEARCH = 2
    FLAG_NONMONOTONE = 4
    FLAG_PROFILE = 8


DEF SMALL = 40  # below this size LAPACK call overhead dominates the arithmetic
DEF ROUND_TOL = 1e-12  # relative rounding slack in the objective


cdef int _potrf(double *a, int n) noexcept nogil:
    """In-place Cholesky of a symmetric n x n array; 0 on success.

    The factor is the lower triangle in column-major order (LAPACK 'L'),
    which for a symmetric row-major input is the same memory either way.
    """
    cdef char uplo = b'L'
    cdef int info = 0, i, j, k
    cdef double s
    if n == 0:
        return 0
    if n > SMALL:
        dpotrf(&uplo, &n, a, &n, &info)
        return info
    for j in range(n):
        s = a[j + j * n]
        for k in range(j):
            s -= a[j + k * n] * a[j + k * n]
        if not s > 0.0:
            return j + 1
        s = sqrt(s)
        a[j + j * n] = s
        for i in range(j + 1, n):
            for k in range(j):
                a[i + j * n] -= a[i + k * n] * a[j + k * n]
            a[i + j * n] /= s
    return 0


cdef void _potrs(double *c, int n, double *b, int nrhs) noexcept nogil:
    """Solve with a factor from ``_potrf``; ``b`` holds ``nrhs`` contiguous vectors."""
    cdef char uplo = b'L'
    cdef int info = 0, i, k, r
    cdef double t
    cdef double *x
    if n == 0 or nrhs == 0:
        return
    if n > SMALL:
        dpotrs(&uplo, &n, &nrhs, c, &n, b, &n, &info)
        return
    for r in range(nrhs):
        x = b + r * n
        for i in range(n):
            t = x[i]
            for k in range(i):
                t -= c[i + k * n] * x[k]
            x[i] = t / c[i + i * n]
        for i in range(n - 1, -1, -1):
            t = x[i]
            for k in range(i + 1, n):
                t -= c[k + i * n] * x[k]
            x[i] = t / c[i + i * n]


cdef double _poisson_block(const double *x, int d, const double *y, const double *lf,
                           double lam, double eps, double N, double *grad, double *A,
                           int lda, long *clamped) noexcept nogil:
    """Add the extended Poisson term of one block: gradient into ``grad`` and
    the negated Hessian into the d x d block of ``A`` (row stride ``lda``)."""
    cdef int i, j
    cdef double s = 0.0, z, zc, dz, g1, h1, value = 0.0, gl, hl
    for i in range(d):
        s += x[i]
    # reference state (last active entry)
    z = N - s
    zc = z if z > eps else eps
    dz = z - eps if z < eps else 0.0
    g1 = y[d] / zc
    h1 = -g1 / zc
    if y[d] > 0:
        value += y[d] * log(lam * zc)
        if dz < 0:
            clamped[0] += 1
    value += -lf[d] + dz * (g1 + 0.5 * h1 * dz) - lam * z
    gl = g1 + h1 * dz - lam
    hl = h1
    for i in range(d):
        z = x[i]
        zc = z if z > eps else eps
        dz = z - eps if z < eps else 0.0
        g1 = y[i] / zc
        h1 = -g1 / zc
        if y[i] > 0:
            value += y[i] * log(lam * zc)
            if dz < 0:
                clamped[0] += 1
        value += -lf[i] + dz * (g1 + 0.5 * h1 * dz) - lam * z
        grad[i] += g1 + h1 * dz - lam - gl
        for j in range(d):
            A[i * lda + j] -= hl
        A[i * lda + i] -= h1
    return value


cdef struct Term:
    int off
    int d
    const double *y
    const double *lf


cdef double _evaluate(int m, const double *J, const double *h, Term *terms, int nterms,
                      double lam, double eps, double N, const double *x,
                      double *g, double *A, long *clamped) noexcept nogil:
    cdef int i, j, k
    cdef double f = 0.0, jx
    for i in range(m):
        jx = 0.0
        for j in range(m):
            jx += J[i * m + j] * x[j]
        f += x[i] * (h[i] - 0.5 * jx)
        g[i] = h[i] - jx
    memcpy(A, J, m * m * sizeof(double))
    clamped[0] = 0
    for k in range(nterms):
        f += _poisson_block(x + terms[k].off, terms[k].d, terms[k].y, terms[k].lf, lam, eps, N,
                            g + terms[k].off, A + terms[k].off * m + terms[k].off, m, clamped)
    return f


cdef int _newton(int m, const double *J, const double *h, Term *terms, int nterms,
                 double lam, double eps, double N, double *x, double *A,
                 int max_iters, double tol, int *iters, long *clamped) noexcept nogil:
    """Damped Newton ascent; ``x`` is updated in place, ``A`` receives the
    negated Hessian at the final iterate.  Returns flags."""
    cdef int flags = 0, it = 0, i, k, ok
    cdef double f, fn, slope, t, gmax, gnmax, fuzz
    cdef long cn = 0
    cdef double *g = <double *> malloc(m * sizeof(double))
    cdef double *gn = <double *> malloc(m * sizeof(double))
    cdef double *An = <double *> malloc(m * m * sizeof(double))
    cdef double *C = <double *> malloc(m * m * sizeof(double))
    cdef double *step = <double *> malloc(m * sizeof(double))
    cdef double *xn = <double *> malloc(m * sizeof(double))
    f = _evaluate(m, J, h, terms, nterms, lam, eps, N, x, g, A, clamped)
    while True:
        gmax = 0.0
        for i in range(m):
            if fabs(g[i]) > gmax:
                gmax = fabs(g[i])
        # a quadratic objective always gets its one exact Newton step
        if gmax < tol and (nterms > 0 or it > 0 or gmax == 0.0):
            flags |= FLAG_CONVERGED
            break
        if it >= max_iters:
            break
        it += 1
        memcpy(C, A, m * m * sizeof(double))
        memcpy(step, g, m * sizeof(double))
        if _potrf(C, m) == 0:
            _potrs(C, m, step, 1)
        slope = 0.0
        for i in range(m):
            slope += g[i] * step[i]
        if slope <= 0.0:
            slope = 0.0
            for i in range(m):
                step[i] = g[i]
                slope += g[i] * g[i]
        t = 1.0
        ok = 0
        fuzz = ROUND_TOL * (1.0 + fabs(f))
        for k in range(60):
            for i in range(m):
                xn[i] = x[i] + t * step[i]
            fn = _evaluate(m, J, h, terms, nterms, lam, eps, N, xn, gn, An, &cn)
            if fn >= f + 1e-4 * t * slope:
                ok = 1
                break
            # near the optimum the gain is below the rounding error of f
            if fabs(fn - f) <= fuzz:
                gnmax = 0.0
                for i in range(m):
                    if fabs(gn[i]) > gnmax:
                        gnmax = fabs(gn[i])
                if gnmax < gmax:
                    ok = 1
                    break
            t *= 0.5
        if not ok:
            flags |= FLAG_LINE_SEARCH
            break
        if fn < f - fuzz:
            flags |= FLAG_NONMONOTONE
        f = fn
        memcpy(x, xn, m * sizeof(double))
        memcpy(g, gn, m * sizeof(double))
        memcpy(A, An, m * m * sizeof(double))
        clamped[0] = cn
    iters[0] = it
    free(g); free(gn); free(An); free(C); free(step); free(xn)
    return flags


cdef int _chol_solve(int m, const double *A, double *b) noexcept nogil:
    """b <- A^{-1} b for positive definite A; nonzero if the factorization fails."""
    cdef double *C = <double *> malloc(m * m * sizeof(double))
    memcpy(C, A, m * m * sizeof(double))
    cdef int info = _potrf(C, m)
    if info == 0:
        _potrs(C, m, b, 1)
    free(C)
    return info


cdef int _laplace_core(int n, int dp, const double *J, const double *h,
                       const double *p_y, const double *p_lf, int np_,
                       const double *v_y, const double *v_lf, int nv,
                       double lam, double eps, double N, const double *prior,
                       const double *start, bint use_start, bint joint,
                       int max_iters, double tol, double *mode, double *H, double *Av_out,
                       int *it, long *clamped) noexcept nogil:
    """Mode and negated Hessian ``H`` of the tilted edge density.

    ``J``/``h`` include the contexts.  On the profile path the child block
    of the profile Hessian is copied to ``Av_out`` when it is not NULL; it
    equals the child's marginal precision.  Returns flags.
    """
    cdef int dv = n - dp
    cdef int i, j, r, flags = 0, nterms = 0
    cdef double acc
    cdef Term terms[2]
    cdef double *Cpp
    cdef double *R
    cdef double *P
    cdef double *hp
    cdef double *Av
    cdef bint profile = False
    if not joint and dp > 0:
        Cpp = <double *> malloc(dp * dp * sizeof(double))
        for i in range(dp):
            for j in range(dp):
                Cpp[i * dp + j] = J[i * n + j]
        profile = _potrf(Cpp, dp) == 0
        if not profile:
            free(Cpp)
    if profile:
        # R[c] = J[dp + c, :dp] for c < dv, R[dv] = h[:dp]; solving gives M^T
        R = <double *> malloc((dv + 1) * dp * sizeof(double))
        for j in range(dv):
            memcpy(R + j * dp, J + (dp + j) * n, dp * sizeof(double))
        for r in range(dp):
            R[dv * dp + r] = h[r]
        _potrs(Cpp, dp, R, dv + 1)
        free(Cpp)
        P = <double *> malloc(dv * dv * sizeof(double))
        hp = <double *> malloc(dv * sizeof(double))
        Av = <double *> malloc(dv * dv * sizeof(double))
        for i in range(dv):
            for j in range(i + 1):
                acc = 0.0
                for r in range(dp):
                    acc += J[(dp + i) * n + r] * R[j * dp + r]
                acc = 0.5 * (J[(dp + i) * n + dp + j] + J[(dp + j) * n + dp + i]) - acc
                P[i * dv + j] = acc
                P[j * dv + i] = acc
            acc = 0.0
            for r in range(dp):
                acc += J[(dp + i) * n + r] * R[dv * dp + r]
            hp[i] = h[dp + i] - acc
        if nv > 0:
            terms[0].off = 0
            terms[0].d = dv
            terms[0].y = v_y
            terms[0].lf = v_lf
            nterms = 1
        if use_start:
            for i in range(dv):
                mode[dp + i] = start[dp + i]
        else:
            for i in range(dv):
                mode[dp + i] = hp[i]
            if _chol_solve(dv, P, mode + dp) != 0:
                for i in range(dv):
                    mode[dp + i] = prior[dp + i]
        flags = _newton(dv, P, hp, terms, nterms, lam, eps, N, mode + dp, Av,
                        max_iters, tol, it, clamped)
        flags |= FLAG_PROFILE
        for r in range(dp):
            acc = R[dv * dp + r]
            for j in range(dv):
                acc -= R[j * dp + r] * mode[dp + j]
            mode[r] = acc
        memcpy(H, J, n * n * sizeof(double))
        for i in range(dv):
            for j in range(dv):
                H[(dp + i) * n + dp + j] += Av[i * dv + j] - P[i * dv + j]
        if Av_out != NULL:
            memcpy(Av_out, Av, dv * dv * sizeof(double))
        free(R); free(P); free(hp); free(Av)
        return flags
    if np_ > 0:
        terms[nterms].off = 0
        terms[nterms].d = dp
        terms[nterms].y = p_y
        terms[nterms].lf = p_lf
        nterms += 1
    if nv > 0:
        terms[nterms].off = dp
        terms[nterms].d = dv
        terms[nterms].y = v_y
        terms[nterms].lf = v_lf
        nterms += 1
    if use_start:
        for i in range(n):
            mode[i] = start[i]
    else:
        for i in range(n):
            mode[i] = h[i]
        if _chol_solve(n, J, mode) != 0:
            for i in range(n):
                mode[i] = prior[i]
    return _newton(n, J, h, terms, nterms, lam, eps, N, mode, H, max_iters, tol, it, clamped)


cdef inline const double *_ptr(double[::1] a) noexcept:
    return &a[0] if a.shape[0] else NULL


def laplace_edge(double[:, ::1] J, double[::1] h, int dp,
                 double[::1] p_y, double[::1] p_lf, double[::1] v_y, double[::1] v_lf,
                 double lam, double eps, double N, double[::1] prior, double[::1] start,
                 bint use_start, bint joint, int max_iters, double tol):
    cdef int n = J.shape[0]
    cdef int it = 0, flags = FLAG_CONVERGED
    cdef long clamped = 0
    mode_arr = np.zeros(n)
    H_arr = np.zeros((n, n))
    cdef double[::1] mode = mode_arr
    cdef double[:, ::1] H = H_arr
    cdef const double *py = _ptr(p_y)
    cdef const double *plf = _ptr(p_lf)
    cdef const double *vy = _ptr(v_y)
    cdef const double *vlf = _ptr(v_lf)
    if n == 0:
        return mode_arr, H_arr, 0, flags, 0
    with nogil:
        flags = _laplace_core(n, dp, &J[0, 0], &h[0], py, plf, p_y.shape[0],
                              vy, vlf, v_y.shape[0], lam, eps, N, &prior[0], &start[0],
                              use_start, joint, max_iters, tol, &mode[0], &H[0, 0], NULL,
                              &it, &clamped)
    return mode_arr, H_arr, it, flags, clamped


cdef int _schur(const double *H, int n, int a0, int da, int b0, int db,
                double *out) noexcept nogil:
    """out = H_aa - H_ab H_bb^{-1} H_ba for index ranges [a0, a0+da), [b0, b0+db)."""
    cdef int i, j, info
    cdef double acc
    cdef char ta = b'T'
    cdef char tb = b'N'
    cdef double one = 1.0
    cdef double minus_one = -1.0
    cdef double *C = <double *> malloc(db * db * sizeof(double))
    cdef double *R = <double *> malloc(da * db * sizeof(double))
    for i in range(db):
        for j in range(db):
            C[i * db + j] = H[(b0 + i) * n + b0 + j]
    info = _potrf(C, db)
    if info == 0:
        # R[c] = H[a0 + c, b0:b0+db]; solving gives rows of (H_bb^{-1} H_ba)^T
        for i in range(da):
            memcpy(R + i * db, H + (a0 + i) * n + b0, db * sizeof(double))
        _potrs(C, db, R, da)
        for i in range(da):
            memcpy(out + i * da, H + (a0 + i) * n + a0, da * sizeof(double))
        # read column-major, the H_ab block at stride n is its transpose
        dgemm(&ta, &tb, &da, &da, &db, &minus_one, <double *> H + a0 * n + b0, &n,
              R, &db, &one, out, &da)
        for i in range(da):
            for j in range(i):
                acc = 0.5 * (out[i * da + j] + out[j * da + i])
                out[i * da + j] = acc
                out[j * da + i] = acc
    free(C); free(R)
    return info


cdef int _messages(const double *H, int n, int dp, const double *mode, const double *Av,
                   const double *cpp, const double *csp, const double *cpv, const double *csv,
                   double *pp, double *sp, double *pv, double *sv) noexcept nogil:
    """Marginal precisions of ``H`` at both endpoints minus the contexts.

    ``Av``, when not NULL, is the child's marginal precision already known
    from the profile elimination.  Status bit 0: a diagonal block of ``H``
    is not positive definite; bits 1 and 2: the parent or child message
    precision is not positive definite.
    """
    cdef int dv = n - dp
    cdef int i, j, status = 0
    cdef double acc
    cdef double *W
    if dp and dv:
        if _schur(H, n, 0, dp, dp, dv, pp) != 0:
            return 1
        if Av != NULL:
            for i in range(dv):
                for j in range(dv):
                    pv[i * dv + j] = 0.5 * (Av[i * dv + j] + Av[j * dv + i])
        elif _schur(H, n, dp, dv, 0, dp, pv) != 0:
            return 1
    else:
        for i in range(dp):
            for j in range(dp):
                pp[i * dp + j] = 0.5 * (H[i * n + j] + H[j * n + i])
        for i in range(dv):
            for j in range(dv):
                pv[i * dv + j] = 0.5 * (H[(dp + i) * n + dp + j] + H[(dp + j) * n + dp + i])
    for i in range(dp):
        acc = 0.0
        for j in range(dp):
            acc += pp[i * dp + j] * mode[j]
        sp[i] = acc - csp[i]
    for i in range(dv):
        acc = 0.0
        for j in range(dv):
            acc += pv[i * dv + j] * mode[dp + j]
        sv[i] = acc - csv[i]
    for i in range(dp * dp):
        pp[i] -= cpp[i]
    for i in range(dv * dv):
        pv[i] -= cpv[i]
    if dp:
        W = <double *> malloc(dp * dp * sizeof(double))
        memcpy(W, pp, dp * dp * sizeof(double))
        if _potrf(W, dp) != 0:
            status |= 2
        free(W)
    if dv:
        W = <double *> malloc(dv * dv * sizeof(double))
        memcpy(W, pv, dv * dv * sizeof(double))
        if _potrf(W, dv) != 0:
            status |= 4
        free(W)
    return status


cdef inline double *_mat(a) except? NULL:
    cdef double[:, ::1] m = a
    return &m[0, 0] if m.shape[0] else NULL


cdef inline double *_vec(a) except? NULL:
    cdef double[::1] m = a
    return &m[0] if m.shape[0] else NULL


def edge_messages(H, mode, int dp, cpp, csp, cpv, csv):
    cdef int n = H.shape[0]
    cdef int dv = n - dp
    cdef int status
    pp_arr = np.empty((dp, dp))
    pv_arr = np.empty((dv, dv))
    sp_arr = np.empty(dp)
    sv_arr = np.empty(dv)
    cdef double *Hp = _mat(H)
    cdef double *m = _vec(mode)
    cdef double *a = _mat(cpp)
    cdef double *b = _vec(csp)
    cdef double *c = _mat(cpv)
    cdef double *d = _vec(csv)
    cdef double *o1 = _mat(pp_arr)
    cdef double *o2 = _vec(sp_arr)
    cdef double *o3 = _mat(pv_arr)
    cdef double *o4 = _vec(sv_arr)
    with nogil:
        status = _messages(Hp, n, dp, m, NULL, a, b, c, d, o1, o2, o3, o4)
    if status & 1:
        return None, None, None, None, status
    return pp_arr, sp_arr, pv_arr, sv_arr, status


def edge_update(J, h, int dp, cpp, csp, cpv, csv, p_y, p_lf, v_y, v_lf,
                double lam, double eps, double N, prior, start, bint use_start, bint joint,
                int max_iters, double tol):
    """One EP edge refresh: contexts in, Laplace solve, both messages out.

    Returns ``(mode, H, pp, sp, pv, sv, iterations, flags, clamped, status)``
    with the message entries None when bit 0 of ``status`` is set.
    """
    cdef int n = J.shape[0]
    cdef int dv = n - dp
    cdef int i, j, it = 0, flags = FLAG_CONVERGED, status = 0
    cdef long clamped = 0
    mode_arr = np.zeros(n)
    H_arr = np.zeros((n, n))
    pp_arr = np.empty((dp, dp))
    pv_arr = np.empty((dv, dv))
    sp_arr = np.empty(dp)
    sv_arr = np.empty(dv)
    if n == 0:
        return mode_arr, H_arr, pp_arr, sp_arr, pv_arr, sv_arr, 0, flags, 0, 0
    cdef double *Jp = _mat(J)
    cdef double *hp = _vec(h)
    cdef double *a = _mat(cpp)
    cdef double *b = _vec(csp)
    cdef double *c = _mat(cpv)
    cdef double *d = _vec(csv)
    cdef double *py = _vec(p_y)
    cdef double *plf = _vec(p_lf)
    cdef double *vy = _vec(v_y)
    cdef double *vlf = _vec(v_lf)
    cdef double *pr = _vec(prior)
    cdef double *st = _vec(start)
    cdef double *mo = _vec(mode_arr)
    cdef double *Hm = _mat(H_arr)
    cdef double *o1 = _mat(pp_arr)
    cdef double *o2 = _vec(sp_arr)
    cdef double *o3 = _mat(pv_arr)
    cdef double *o4 = _vec(sv_arr)
    cdef int npy = p_y.shape[0]
    cdef int nvy = v_y.shape[0]
    cdef double *Jc
    cdef double *hc
    cdef double *Av
    with nogil:
        Jc = <double *> malloc(n * n * sizeof(double))
        hc = <double *> malloc(n * sizeof(double))
        Av = <double *> malloc(dv * dv * sizeof(double) + 1)
        memcpy(Jc, Jp, n * n * sizeof(double))
        memcpy(hc, hp, n * sizeof(double))
        for i in range(dp):
            hc[i] += b[i]
            for j in range(dp):
                Jc[i * n + j] += a[i * dp + j]
        for i in range(dv):
            hc[dp + i] += d[i]
            for j in range(dv):
                Jc[(dp + i) * n + dp + j] += c[i * dv + j]
        flags = _laplace_core(n, dp, Jc, hc, py, plf, npy, vy, vlf, nvy, lam, eps, N, pr, st,
                              use_start, joint, max_iters, tol, mo, Hm, Av, &it, &clamped)
        status = _messages(Hm, n, dp, mo, Av if flags & FLAG_PROFILE else NULL,
                           a, b, c, d, o1, o2, o3, o4)
        free(Jc); free(hc); free(Av)
    if status & 1:
        return mode_arr, H_arr, None, None, None, None, it, flags, clamped, status
    return mode_arr, H_arr, pp_arr, sp_arr, pv_arr, sv_arr, it, flags, clamped, status


def message_change(double[:, ::1] new_prec, double[::1] new_shift,
                   double[:, ::1] old_prec, double[::1] old_shift,
                   double prec_floor, double shift_floor):
    cdef int d = new_shift.shape[0]
    cdef int i, j
    cdef double dp = 0.0, mp = 0.0, ds = 0.0, ms = 0.0
    if d == 0:
        return 0.0
    with nogil:
        for i in range(d):
            for j in range(d):
                dp = max(dp, fabs(new_prec[i, j] - old_prec[i, j]))
                mp = max(mp, fabs(new_prec[i, j]))
            ds = max(ds, fabs(new_shift[i] - old_shift[i]))
            ms = max(ms, fabs(new_shift[i]))
    return max(dp / (mp + prec_floor), ds / (ms + shift_floor))
