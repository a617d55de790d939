"""Quasi-Newton root finding and bracketed secant search.

Broyden's good method maintains an inverse-Jacobian estimate by
Sherman-Morrison rank-1 updates starting from the identity; nothing is
ever re-derived analytically. A batched variant solves many independent
3x3 systems simultaneously, which is the workhorse behind posed-space
correspondence searches.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from ..errors import NoCrossing

# plausible body extent is ~2 m; steps an order of magnitude beyond that
# mean the iteration left the scene
STEP_LIMIT = 20.0


class BroydenResult(NamedTuple):
    root: np.ndarray
    converged: bool
    residual: float
    iters: int
    status: str = "ok"


def broyden_solve(f, x0, tol=1e-5, max_iter=50):
    """Find x with f(x) = 0 near x0; f maps 3-vectors to 3-vectors.

    Returns the best iterate seen. converged means ||f(root)|| <= tol.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    fx = np.asarray(f(x), dtype=np.float64)
    if not np.all(np.isfinite(fx)):
        return BroydenResult(x, False, np.inf, 0, "non-finite residual at start")
    jinv = np.eye(x.size)
    best_x = x.copy()
    best_res = float(np.linalg.norm(fx))
    iters = 0
    status = "max iterations"
    for it in range(1, max_iter + 1):
        if best_res <= tol:
            status = "ok"
            break
        dx = -jinv @ fx
        step = float(np.linalg.norm(dx))
        if not np.isfinite(step) or step > STEP_LIMIT:
            status = "diverged (step too large)"
            break
        x_new = x + dx
        fx_new = np.asarray(f(x_new), dtype=np.float64)
        iters = it
        if not np.all(np.isfinite(fx_new)):
            status = "non-finite residual"
            break
        df = fx_new - fx
        u = jinv @ df
        denom = float(dx @ u)
        if abs(denom) > 1e-14:
            jinv = jinv + np.outer(dx - u, dx @ jinv) / denom
        x, fx = x_new, fx_new
        res = float(np.linalg.norm(fx))
        if res < best_res:
            best_res = res
            best_x = x.copy()
    else:
        if best_res <= tol:
            status = "ok"
    converged = best_res <= tol
    return BroydenResult(best_x, converged, best_res, iters, status if not converged else "ok")


def broyden_solve_batch(f, x0, tol=1e-5, max_iter=50):
    """Solve N independent 3-vector root problems at once.

    f(x_sub, rows) maps an (M, 3) sub-batch to (M, 3); `rows` carries the
    original row indices so per-row constants (e.g. targets) can be
    looked up. Returns (roots (N,3), converged (N,), residual (N,),
    iters (N,)). Each row keeps its best iterate; rows stop once
    converged, diverged, or non-finite.
    """
    x = np.array(x0, dtype=np.float64)
    n, d = x.shape
    fx = np.asarray(f(x, np.arange(n)), dtype=np.float64)
    bad = ~np.all(np.isfinite(fx), axis=1)
    fx[bad] = 0.0
    jinv = np.broadcast_to(np.eye(d), (n, d, d)).copy()
    res = np.linalg.norm(fx, axis=1)
    res[bad] = np.inf
    best_x = x.copy()
    best_res = res.copy()
    iters = np.zeros(n, dtype=np.int64)
    active = (best_res > tol) & ~bad
    for it in range(1, max_iter + 1):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        dx = -np.einsum("nij,nj->ni", jinv[idx], fx[idx])
        step = np.linalg.norm(dx, axis=1)
        diverged = ~np.isfinite(step) | (step > STEP_LIMIT)
        if diverged.any():
            active[idx[diverged]] = False
            keep = ~diverged
            idx, dx = idx[keep], dx[keep]
            if idx.size == 0:
                continue
        x_new = x[idx] + dx
        fx_new = np.asarray(f(x_new, idx), dtype=np.float64)
        iters[idx] = it
        finite = np.all(np.isfinite(fx_new), axis=1)
        if not finite.all():
            active[idx[~finite]] = False
            keep = finite
            idx, dx, x_new, fx_new = idx[keep], dx[keep], x_new[keep], fx_new[keep]
            if idx.size == 0:
                continue
        df = fx_new - fx[idx]
        u = np.einsum("nij,nj->ni", jinv[idx], df)
        denom = np.einsum("ni,ni->n", dx, u)
        ok = np.abs(denom) > 1e-14
        if ok.any():
            left = (dx - u)[ok] / denom[ok, None]
            right = np.einsum("ni,nij->nj", dx[ok], jinv[idx[ok]])
            jinv[idx[ok]] += left[:, :, None] * right[:, None, :]
        x[idx] = x_new
        fx[idx] = fx_new
        r = np.linalg.norm(fx_new, axis=1)
        improved = r < best_res[idx]
        bi = idx[improved]
        best_res[bi] = r[improved]
        best_x[bi] = x_new[improved]
        active[idx] = best_res[idx] > tol
    converged = best_res <= tol
    return best_x, converged, best_res, iters


def secant_find_crossing(g, t_lo, t_hi, tau=0.5, iters=16):
    """Locate t in [t_lo, t_hi] with g(t) = tau by bracketed secant steps.

    The bracket must straddle tau; each step replaces one end, so the
    returned value always lies inside the original interval. Falls back
    to bisection whenever the secant step leaves the bracket.
    """
    a, b = float(t_lo), float(t_hi)
    fa = float(g(a)) - tau
    fb = float(g(b)) - tau
    if fa == 0.0:
        return a
    if fb == 0.0:
        return b
    if fa * fb > 0.0:
        raise NoCrossing(f"no sign change of g-tau on [{t_lo}, {t_hi}] (got {fa:+.3e}, {fb:+.3e})")
    best_t, best_f = (a, abs(fa)) if abs(fa) < abs(fb) else (b, abs(fb))
    for _ in range(iters):
        denom = fb - fa
        t = b - fb * (b - a) / denom if denom != 0.0 else 0.5 * (a + b)
        if not (min(a, b) < t < max(a, b)):
            t = 0.5 * (a + b)
        ft = float(g(t)) - tau
        if abs(ft) < best_f:
            best_t, best_f = t, abs(ft)
        if ft == 0.0:
            return t
        if fa * ft < 0.0:
            b, fb = t, ft
        else:
            a, fa = t, ft
    return best_t
