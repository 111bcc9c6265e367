"""Per-instance AC-OPF reference solver (method of multipliers).

Each outer iteration minimizes the augmented Lagrangian

    w C(p) + 1/(2 gamma) (|[lam + gamma g]_+|^2 - |lam|^2) + mu.h + gamma/2 |h|^2

over the operating point with a damped Newton method (exact Hessian of the
quadratic flow forms, backtracking line search).  Then it updates
``lam <- [lam + gamma g]_+`` and ``mu <- mu + gamma h``.  ``gamma`` doubles when
infeasibility fails to halve.  Inequalities are tightened by a small margin, and
the final point is polished by a power-flow solve, so a certified label is
strictly feasible and balances to round-off.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import physics as ph
from .case_io import PowerSystem

__all__ = ["SolverOptions", "ReferenceSolution", "reference_solve", "certify"]


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-7
    margin: float = 1e-5
    gamma0: float = 10.0
    gamma_max: float = 1e10
    max_outer: int = 60
    max_inner: int = 200
    inner_tol: float = 1e-9
    polish: bool = True
    cert_tol: float = 1e-6


@dataclass
class ReferenceSolution:
    s_star: np.ndarray
    v_star: np.ndarray
    cost_star: float
    kkt_residual: float
    converged: bool
    outer_iterations: int = 0
    history: list = field(default_factory=list)
    lam: np.ndarray | None = None
    mu: np.ndarray | None = None


class _Problem:
    """Index bookkeeping and derivative evaluation for one system."""

    def __init__(self, sys: PowerSystem, opts: SolverOptions):
        A = sys.arrays
        n = sys.n_buses
        self.sys, self.n, self.opts = sys, n, opts
        ref = sys.ref_index
        lo = np.concatenate([A.s_min.real, A.s_min.imag])
        hi = np.concatenate([A.s_max.real, A.s_max.imag])
        # generation components with a degenerate box are fixed, not optimized
        fixed_s = hi - lo <= 2 * opts.margin
        free = np.concatenate([~fixed_s, np.ones(2 * n, bool)])
        free[3 * n + ref] = False  # reference angle: Im v_ref = 0
        self.free = free
        self.fixed_values = np.concatenate([(lo + hi) / 2, np.zeros(2 * n)])
        G = sys.n_ineq
        rows = np.ones(G, bool)
        rows[: 4 * n] = np.concatenate([~fixed_s[:n], ~fixed_s[:n], ~fixed_s[n:], ~fixed_s[n:]])
        self.rows = rows
        self.c1 = A.c1 * sys.base_mva
        self.c2 = A.c2 * sys.base_mva**2
        self.c0 = float(A.c0.sum())

    def split(self, x):
        n = self.n
        return x[:n], x[n : 2 * n], x[2 * n : 3 * n], x[3 * n :]

    def cost(self, p):
        return self.c0 + float(self.c1 @ p + self.c2 @ (p * p))

    def gh(self, r, x):
        p, q, e, f = self.split(x)
        G, H = self.sys.n_ineq, self.sys.n_eq
        g, h, _ = ph.constraint_vjp(self.sys, r, p, q, e, f, np.zeros(G), np.zeros(H))
        return g, h

    def infeasibility(self, g, h, margin=0.0):
        gv = np.max(np.maximum(g[self.rows] + margin, 0.0), initial=0.0)
        return max(float(gv), float(np.max(np.abs(h), initial=0.0)))


def _merit(prob, r, x, lam, mu, gamma, w):
    g, h = prob.gh(r, x)
    gm = np.where(prob.rows, g + prob.opts.margin, 0.0)
    t = np.where(prob.rows, np.maximum(lam + gamma * gm, 0.0), 0.0)
    val = w * prob.cost(prob.split(x)[0]) + (t @ t - lam @ lam) / (2 * gamma) + mu @ h + 0.5 * gamma * (h @ h)
    return val, g, h, t


def _grad_norm(prob, r, x, lam, mu, gamma, w, g, h, t):
    p, q, e, f = prob.split(x)
    _, _, grads = ph.constraint_vjp(prob.sys, r, p, q, e, f, t, mu + gamma * h)
    grad = np.concatenate(grads)
    grad[: prob.n] += w * (prob.c1 + 2 * prob.c2 * p)
    return float(np.max(np.abs(grad[prob.free])))


def _newton(prob: _Problem, r, x, lam, mu, gamma, w):
    """Minimize the augmented Lagrangian in the free coordinates of ``x``."""
    opts = prob.opts
    free = prob.free
    n = prob.n
    val, g, h, t = _merit(prob, r, x, lam, mu, gamma, w)
    for _ in range(opts.max_inner):
        p, q, e, f = prob.split(x)
        wh = mu + gamma * h
        _, _, grads = ph.constraint_vjp(prob.sys, r, p, q, e, f, t, wh)
        grad = np.concatenate(grads)
        grad[:n] += w * (prob.c1 + 2 * prob.c2 * p)
        gf = grad[free]
        if np.max(np.abs(gf)) <= opts.inner_tol:
            break
        Jg, Jh = ph.constraint_jacobian(prob.sys, p, q, e, f)
        act = t > 0
        H = gamma * (Jh.T @ Jh) + gamma * (Jg[act].T @ Jg[act])
        H[2 * n :, 2 * n :] += ph.constraint_hessian(prob.sys, p, q, e, f, t, wh)
        H[np.arange(n), np.arange(n)] += 2 * w * prob.c2
        Hf = H[np.ix_(free, free)]
        tau = 0.0
        scale = max(1.0, float(np.max(np.abs(np.diag(Hf)))))
        while True:
            try:
                L = np.linalg.cholesky(Hf + tau * np.eye(len(gf)))
                break
            except np.linalg.LinAlgError:
                tau = max(2 * tau, 1e-10 * scale)
        d = -np.linalg.solve(L.T, np.linalg.solve(L, gf))
        slope = float(gf @ d)
        if -slope <= 1e-13 * max(1.0, abs(val)):
            # predicted decrease is below merit round-off: trust the full step
            # while it keeps shrinking the gradient
            xn = x.copy()
            xn[free] += d
            vn, gn, hn, tn = _merit(prob, r, xn, lam, mu, gamma, w)
            if not np.isfinite(vn) or _grad_norm(prob, r, xn, lam, mu, gamma, w, gn, hn, tn) >= np.max(np.abs(gf)):
                break
            x, val, g, h, t = xn, vn, gn, hn, tn
            continue
        step = 1.0
        accepted = False
        while step > 1e-10:
            xn = x.copy()
            xn[free] += step * d
            vn, gn, hn, tn = _merit(prob, r, xn, lam, mu, gamma, w)
            if np.isfinite(vn) and vn <= val + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        x, val, g, h, t = xn, vn, gn, hn, tn
    return x, g, h


def _polish(prob: _Problem, r, x, max_iter=20, tol=1e-12):
    """Power-flow solve holding s except at the reference bus."""
    sys, n = prob.sys, prob.n
    ref = sys.ref_index
    mask = np.ones(2 * n, bool)
    mask[n + ref] = False  # f_ref pinned
    mask[ref] = False  # e_ref pinned
    x = x.copy()
    for _ in range(max_iter):
        _, h = prob.gh(r, x)
        if np.max(np.abs(h)) <= tol:
            return x
        p, q, e, f = prob.split(x)
        J = ph.balance_jacobian(sys, e, f)[:, mask]
        # reference bus injections float
        Jp = np.zeros((2 * n, 2))
        Jp[2 * ref, 0] = 1.0
        Jp[2 * ref + 1, 1] = 1.0
        dz = np.linalg.solve(np.hstack([J, Jp]), -h)
        ev = np.zeros(2 * n)
        ev[mask] = dz[:-2]
        x[2 * n :] += ev
        x[ref] += dz[-2]
        x[n + ref] += dz[-1]
    return x


def certify(sys: PowerSystem, r, s, v, tol: float = 1e-6) -> tuple[bool, float, float]:
    """Check a label with the physics module: ``(ok, max g, max |h|)``.

    Inequalities must hold to ``tol`` both absolutely and as a fraction of
    their feasible range; ``max g`` reports the larger of the two.
    """
    ev = ph.evaluate(sys, r, s, v)
    width = ph.slack_ranges(sys)
    rel = np.where(width > 0, ev.g / np.where(width > 0, width, 1.0), ev.g)
    gmax = float(max(np.max(ev.g), np.max(rel)))
    hmax = float(np.max(np.abs(ev.h)))
    return (gmax <= tol and hmax <= tol), gmax, hmax


def _initial_point(sys: PowerSystem, prob: _Problem):
    A = sys.arrays
    ref = sys.ref_index
    v0 = A.v_init * np.exp(-1j * np.angle(A.v_init[ref]))
    s0 = (A.s_min + A.s_max) / 2
    return np.concatenate([s0.real, s0.imag, v0.real, v0.imag])


def reference_solve(sys: PowerSystem, r, options: SolverOptions | None = None, warm_start=None) -> ReferenceSolution:
    """Solve the OPF for demand ``r`` (complex, length N).

    ``warm_start`` may be a previous :class:`ReferenceSolution` for the same
    system; its point and multipliers seed the iteration.
    """
    opts = options or SolverOptions()
    r = np.asarray(r, dtype=complex)
    prob = _Problem(sys, opts)
    n = prob.n
    G, H = sys.n_ineq, sys.n_eq
    if warm_start is not None:
        x = np.concatenate([warm_start.s_star.real, warm_start.s_star.imag, warm_start.v_star.real, warm_start.v_star.imag])
        lam = np.zeros(G) if warm_start.lam is None else warm_start.lam.copy()
        mu = np.zeros(H) if warm_start.mu is None else warm_start.mu.copy()
    else:
        x = _initial_point(sys, prob)
        lam, mu = np.zeros(G), np.zeros(H)
    x[~prob.free] = prob.fixed_values[~prob.free]
    mid = (sys.arrays.s_min + sys.arrays.s_max).real / 2
    w = 1.0 / max(abs(prob.cost(mid)), 1.0)
    gamma = opts.gamma0

    history: list[float] = []
    best = np.inf
    kkt = np.inf
    k = 0
    for k in range(1, opts.max_outer + 1):
        xn, g, h = _newton(prob, r, x, lam, mu, gamma, w)
        infeas = prob.infeasibility(g, h, opts.margin)
        if not np.isfinite(infeas) or infeas > best:
            # rejected: keep the last accepted point, stiffen the penalty
            gamma = min(2 * gamma, opts.gamma_max)
            continue
        x = xn
        gm = np.where(prob.rows, g + opts.margin, 0.0)
        lam = np.where(prob.rows, np.maximum(lam + gamma * gm, 0.0), 0.0)
        mu = mu + gamma * h
        p, q, e, f = prob.split(x)
        _, _, grads = ph.constraint_vjp(sys, r, p, q, e, f, lam, mu)
        grad = np.concatenate(grads)
        grad[:n] += w * (prob.c1 + 2 * prob.c2 * p)
        stat = float(np.max(np.abs(grad[prob.free])))
        comp = float(np.max(np.abs(lam * gm), initial=0.0))
        kkt = max(infeas, stat, comp)
        history.append(infeas)
        if kkt <= opts.tol:
            break
        if infeas > 0.5 * best:
            gamma = min(2 * gamma, opts.gamma_max)
        best = infeas

    if opts.polish:
        x = _polish(prob, r, x)
    p, q, e, f = prob.split(x)
    s, v = p + 1j * q, e + 1j * f
    ok, _, _ = certify(sys, r, s, v, opts.cert_tol)
    return ReferenceSolution(
        s_star=s,
        v_star=v,
        cost_star=prob.cost(p),
        kkt_residual=float(kkt),
        converged=bool(kkt <= opts.tol and ok),
        outer_iterations=k,
        history=history,
        lam=lam,
        mu=mu,
    )
