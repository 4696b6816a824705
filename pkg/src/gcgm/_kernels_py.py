"""Pure-Python implementations of the hot loops (fallback for ``_kernels``).

The MCMC sweep consumes pre-drawn uniforms, so both backends produce
bit-identical chains.  The EP edge kernels agree up to floating-point
rounding (different BLAS/LAPACK call patterns).
"""
import math

import numpy as np


NOISE_EXACT = 0
NOISE_GAUSSIAN = 1
NOISE_POISSON = 2


def _cell(c, y, code, param):
    """(violations, log-likelihood) contribution of one observed cell."""
    if code == NOISE_EXACT:
        return int(abs(c - y)), 0.0
    if code == NOISE_GAUSSIAN:
        d = y - c
        return 0, -d * d / (2.0 * param)
    if c == 0:
        return (1 if y > 0 else 0), 0.0
    lc = param * c
    return 0, y * math.log(lc) - lc


def mh_sweeps(
    traj,
    order,
    parent,
    root_cum,
    cond_cum,
    node_counts,
    edge_counts,
    y,
    observed,
    noise_code,
    noise_param,
    uniforms,
    batch_of_sweep,
    node_acc,
    edge_acc,
):
    """Run ``uniforms.shape[0]`` Metropolis-Hastings sweeps in place.

    Parameters
    ----------
    traj : (N, n) int64, current trajectories (updated)
    order : (n,) int64, root-first node order
    parent : (n,) int64, parent node, -1 at the root
    root_cum : (L,) cumulative root marginal
    cond_cum : (n, L, L) cumulative conditionals [child, x_parent, :]
    node_counts : (n, L) int64 (updated)
    edge_counts : (n, L, L) int64 indexed [child, x_parent, x_child] (updated)
    y : (n, L) float observations, observed : (n,) uint8
    uniforms : (S, N, n + 1) float; the last column drives acceptance
    batch_of_sweep : (S,) int64, accumulator slot or -1 to skip recording
    node_acc : (B, n, L) float, edge_acc : (B, n, L, L) float (updated)

    Returns
    -------
    int
        Number of accepted proposals.
    """
    S, N = uniforms.shape[0], uniforms.shape[1]
    n = traj.shape[1]
    L = root_cum.shape[0]
    root = int(order[0])
    prop = [0] * n
    accepted = 0
    for s in range(S):
        for m in range(N):
            u_row = uniforms[s, m]
            # ancestral proposal from the individual model
            for k in range(n):
                v = int(order[k])
                cum = root_cum if v == root else cond_cum[v, prop[int(parent[v])]]
                uu = u_row[k]
                idx = 0
                while idx < L - 1 and uu >= cum[idx]:
                    idx += 1
                prop[v] = idx
            d_viol = 0
            d_ll = 0.0
            for v in range(n):
                a = int(traj[m, v])
                b = prop[v]
                if a == b or not observed[v]:
                    continue
                ca = int(node_counts[v, a])
                cb = int(node_counts[v, b])
                va0, la0 = _cell(ca, y[v, a], noise_code, noise_param)
                va1, la1 = _cell(ca - 1, y[v, a], noise_code, noise_param)
                vb0, lb0 = _cell(cb, y[v, b], noise_code, noise_param)
                vb1, lb1 = _cell(cb + 1, y[v, b], noise_code, noise_param)
                d_viol += va1 + vb1 - va0 - vb0
                d_ll += la1 + lb1 - la0 - lb0
            if d_viol < 0:
                accept = True
            elif d_viol > 0:
                accept = False
            else:
                uacc = u_row[n]
                accept = d_ll >= 0.0 or uacc == 0.0 or math.log(uacc) < d_ll
            if accept:
                accepted += 1
                for v in range(n):
                    a = int(traj[m, v])
                    b = prop[v]
                    p = int(parent[v])
                    if p >= 0:
                        pa = int(traj[m, p])
                        pb = prop[p]
                        if pa != pb or a != b:
                            edge_counts[v, pa, a] -= 1
                            edge_counts[v, pb, b] += 1
                for v in range(n):
                    a = int(traj[m, v])
                    b = prop[v]
                    if a != b:
                        node_counts[v, a] -= 1
                        node_counts[v, b] += 1
                        traj[m, v] = b
        slot = batch_of_sweep[s]
        if slot >= 0:
            node_acc[slot] += node_counts
            edge_acc[slot] += edge_counts
    return accepted


# EP edge kernels -----------------------------------------------------------

FLAG_CONVERGED = 1
FLAG_LINE_SEARCH = 2
FLAG_NONMONOTONE = 4
FLAG_PROFILE = 8
ROUND_TOL = 1e-12  # relative rounding slack in the objective


def _poisson_block(x, y, lf, lam, eps, N):
    """Extended Poisson term of one node in reduced coordinates.

    Returns value, reduced gradient, full Hessian diagonal and clamp count.
    """
    z = np.append(x, N - x.sum())
    zc = np.maximum(z, eps)
    dz = np.minimum(z - eps, 0.0)
    g1 = y / zc
    h1 = -g1 / zc
    value = float(np.sum(y * np.log(lam * zc) - lf + dz * (g1 + 0.5 * h1 * dz) - lam * z))
    g = g1 + h1 * dz - lam
    clamped = int(np.count_nonzero((dz < 0.0) & (y > 0.0)))
    return value, g[:-1] - g[-1], h1, clamped


def _chol_solve(A, b):
    """Solve with a positive definite ``A``; None if the factorization fails."""
    try:
        c = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return None
    return np.linalg.solve(c.T, np.linalg.solve(c, b))


def _newton(J, h, terms, x, lam, eps, N, max_iters, tol):
    """Damped Newton ascent on -1/2 x'Jx + h'x + Poisson terms.

    ``terms`` holds (offset, y, logfact) per Poisson block.
    """

    def evaluate(x):
        Jx = J @ x
        f = -0.5 * x @ Jx + h @ x
        g = h - Jx
        A = J.copy()
        clamped = 0
        for off, y, lf in terms:
            d = y.size - 1
            v, gv, hv, c = _poisson_block(x[off:off + d], y, lf, lam, eps, N)
            f += v
            g[off:off + d] += gv
            blk = A[off:off + d, off:off + d]
            blk -= hv[-1]
            blk[np.diag_indices(d)] -= hv[:-1]
            clamped += c
        return f, g, A, clamped

    flags = 0
    f, g, A, clamped = evaluate(x)
    it = 0
    while True:
        gmax = np.abs(g).max() if g.size else 0.0
        # a quadratic objective always gets its one exact Newton step
        if gmax < tol and (terms or it > 0 or gmax == 0.0):
            flags |= FLAG_CONVERGED
            break
        if it >= max_iters:
            break
        it += 1
        step = _chol_solve(A, g)
        if step is None:
            step = g
        slope = g @ step
        if slope <= 0.0:
            step = g
            slope = g @ g
        t = 1.0
        for _ in range(60):
            xn = x + t * step
            fn, gn, An, cn = evaluate(xn)
            if fn >= f + 1e-4 * t * slope:
                break
            # near the optimum the gain is below the rounding error of f
            if abs(fn - f) <= ROUND_TOL * (1.0 + abs(f)) and np.abs(gn).max() < np.abs(g).max():
                break
            t *= 0.5
        else:
            flags |= FLAG_LINE_SEARCH
            break
        if fn < f - ROUND_TOL * (1.0 + abs(f)):
            flags |= FLAG_NONMONOTONE
        x, f, g, A, clamped = xn, fn, gn, An, cn
    return x, A, it, flags, clamped


def laplace_edge(J, h, dp, p_y, p_lf, v_y, v_lf, lam, eps, N, prior, start, use_start,
                 joint, max_iters, tol):
    """Mode and negated Hessian of one tilted edge density.

    ``J``/``h`` already include the contexts.  Empty ``p_y``/``v_y`` mean no
    Poisson term on that block.  Off the joint path the parent block is
    eliminated in closed form and Newton runs on the child's profile.

    Returns
    -------
    mode, H, iterations, flags, clamped
    """
    n = J.shape[0]
    dv = n - dp
    profile = False
    if not joint and dp > 0:
        try:
            cpp = np.linalg.cholesky(J[:dp, :dp])
            profile = True
        except np.linalg.LinAlgError:
            profile = False
    if profile:
        rhs = np.column_stack([J[:dp, dp:], h[:dp]])
        M = np.linalg.solve(cpp.T, np.linalg.solve(cpp, rhs))
        P = J[dp:, dp:] - J[dp:, :dp] @ M[:, :dv]
        P = 0.5 * (P + P.T)
        hp = h[dp:] - J[dp:, :dp] @ M[:, dv]
        terms = [(0, v_y, v_lf)] if v_y.size else []
        if use_start:
            x0 = start[dp:].copy()
        else:
            x0 = _chol_solve(P, hp)
            if x0 is None:
                x0 = prior[dp:].copy()
        zv, Av, it, flags, clamped = _newton(P, hp, terms, x0, lam, eps, N, max_iters, tol)
        mode = np.concatenate([M[:, dv] - M[:, :dv] @ zv, zv])
        H = J.copy()
        H[dp:, dp:] += Av - P
        return mode, H, it, flags | FLAG_PROFILE, clamped
    terms = []
    if p_y.size:
        terms.append((0, p_y, p_lf))
    if v_y.size:
        terms.append((dp, v_y, v_lf))
    if use_start:
        x0 = start.copy()
    else:
        x0 = _chol_solve(J, h)
        if x0 is None:
            x0 = prior.copy()
    mode, H, it, flags, clamped = _newton(J, h, terms, x0, lam, eps, N, max_iters, tol)
    return mode, H, it, flags, clamped


def edge_messages(H, mode, dp, cpp, csp, cpv, csv):
    """Messages to both endpoints: Laplace marginal divided by the context.

    Marginal precisions are Schur complements of ``H``.  The status code has
    bit 0 set if a diagonal block of ``H`` is not positive definite, and bits
    1 and 2 if the parent or child message precision is not positive definite.
    """
    n = H.shape[0]
    dv = n - dp
    status = 0
    try:
        if dp and dv:
            mp = H[:dp, :dp] - H[:dp, dp:] @ np.linalg.solve(H[dp:, dp:], H[dp:, :dp])
            mv = H[dp:, dp:] - H[dp:, :dp] @ np.linalg.solve(H[:dp, :dp], H[:dp, dp:])
            np.linalg.cholesky(H[:dp, :dp])
            np.linalg.cholesky(H[dp:, dp:])
        else:
            mp, mv = H[:dp, :dp].copy(), H[dp:, dp:].copy()
    except np.linalg.LinAlgError:
        return None, None, None, None, 1
    mp = 0.5 * (mp + mp.T)
    mv = 0.5 * (mv + mv.T)
    pp = mp - cpp
    pv = mv - cpv
    sp = mp @ mode[:dp] - csp
    sv = mv @ mode[dp:] - csv
    for bit, prec in ((2, pp), (4, pv)):
        if prec.shape[0]:
            try:
                np.linalg.cholesky(prec)
            except np.linalg.LinAlgError:
                status |= bit
    return pp, sp, pv, sv, status


def message_change(new_prec, new_shift, old_prec, old_shift, prec_floor, shift_floor):
    """Largest relative change between two messages, precision and shift separately."""
    if new_shift.shape[0] == 0:
        return 0.0
    dp = np.abs(new_prec - old_prec).max() / (np.abs(new_prec).max() + prec_floor)
    ds = np.abs(new_shift - old_shift).max() / (np.abs(new_shift).max() + shift_floor)
    return float(max(dp, ds))


def edge_update(J, h, dp, cpp, csp, cpv, csv, p_y, p_lf, v_y, v_lf, lam, eps, N, prior, start,
                use_start, joint, max_iters, tol):
    """One EP edge refresh: contexts in, Laplace solve, both messages out.

    Returns ``(mode, H, pp, sp, pv, sv, iterations, flags, clamped, status)``
    with the message entries None when bit 0 of ``status`` is set.
    """
    Jc = J.copy()
    hc = h.copy()
    Jc[:dp, :dp] += cpp
    Jc[dp:, dp:] += cpv
    hc[:dp] += csp
    hc[dp:] += csv
    mode, H, it, flags, clamped = laplace_edge(Jc, hc, dp, p_y, p_lf, v_y, v_lf, lam, eps, N,
                                               prior, start, use_start, joint, max_iters, tol)
    pp, sp, pv, sv, status = edge_messages(H, mode, dp, cpp, csp, cpv, csv)
    return mode, H, pp, sp, pv, sv, it, flags, clamped, status
