"""Branch flows, balance residuals, inequality slacks, cost and penalty.

Complex quantities are carried as separate real and imaginary arrays with the
bus or branch index on the last axis, so every function accepts leading batch
dimensions.  The functions built from :mod:`opf_duallearn.autodiff` ops work
on plain arrays and on tape variables alike.

Slack layout (violation-positive, ``g <= 0`` is feasible), block-major::

    Re(s_min - s), Re(s - s_max), Im(s_min - s), Im(s - s_max),
    v_min - |v|, |v| - v_max                                   (6 blocks of N)
    |f_from| - f_max_from, |f_to| - f_max_to,
    theta_min - angle(v_i conj(v_j)), angle(v_i conj(v_j)) - theta_max   (4 blocks of M)

Balance residuals are interleaved ``(Re h_0, Im h_0, Re h_1, ...)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .case_io import PowerSystem

__all__ = [
    "BranchConstants",
    "branch_constants",
    "branch_flows",
    "balance_residual",
    "inequality_slacks",
    "cost",
    "penalty",
    "Evaluation",
    "evaluate",
    "slack_blocks",
    "slack_ranges",
    "flow_partials",
    "constraint_vjp",
    "balance_jacobian",
    "constraint_jacobian",
    "constraint_hessian",
]


@dataclass(frozen=True, eq=False)
class BranchConstants:
    """Per-branch coefficients of the flow equations.

    ``f_from = a_f |v_i|^2 - k_f v_i conj(v_j)`` and
    ``f_to = a_t |v_j|^2 - k_t conj(v_i) v_j``.
    """

    a_f: np.ndarray
    k_f: np.ndarray
    a_t: np.ndarray
    k_t: np.ndarray


def branch_constants(sys: PowerSystem) -> BranchConstants:
    bc = sys.__dict__.get("_branch_constants")
    if bc is None:
        A = sys.arrays
        t = A.t
        yc = np.conj(A.y_line)
        bc = BranchConstants(
            a_f=np.conj(A.y_line + A.y_c_from) / np.abs(t) ** 2,
            k_f=yc / t,
            a_t=np.conj(A.y_line + A.y_c_to),
            k_t=yc / np.conj(t),
        )
        sys.__dict__["_branch_constants"] = bc
    return bc


def _products(sys, v_re, v_im):
    fi, ti = sys.from_idx, sys.to_idx
    ei, fi_ = ad.index(v_re, fi), ad.index(v_im, fi)
    ej, fj = ad.index(v_re, ti), ad.index(v_im, ti)
    # v_i conj(v_j)
    pr = ad.add(ad.mul(ei, ej), ad.mul(fi_, fj))
    pi = ad.sub(ad.mul(fi_, ej), ad.mul(ei, fj))
    vi2 = ad.add(ad.square(ei), ad.square(fi_))
    vj2 = ad.add(ad.square(ej), ad.square(fj))
    return pr, pi, vi2, vj2


def branch_flows(sys: PowerSystem, v_re, v_im):
    """Complex flows at both ends of every branch as ``(pf, qf, pt, qt)``."""
    bc = branch_constants(sys)
    pr, pi, vi2, vj2 = _products(sys, v_re, v_im)
    af, kf, at, kt = bc.a_f, bc.k_f, bc.a_t, bc.k_t
    pf = ad.sub(ad.mul(af.real, vi2), ad.sub(ad.mul(kf.real, pr), ad.mul(kf.imag, pi)))
    qf = ad.sub(ad.mul(af.imag, vi2), ad.add(ad.mul(kf.real, pi), ad.mul(kf.imag, pr)))
    # conj(v_i) v_j = pr - j pi
    pt = ad.sub(ad.mul(at.real, vj2), ad.add(ad.mul(kt.real, pr), ad.mul(kt.imag, pi)))
    qt = ad.sub(ad.mul(at.imag, vj2), ad.sub(ad.mul(kt.imag, pr), ad.mul(kt.real, pi)))
    return pf, qf, pt, qt


def _interleave(re, im):
    both = ad.stack([re, im], axis=-1)
    shape = ad.value_of(re).shape
    return ad.reshape(both, shape[:-1] + (2 * shape[-1],))


def balance_residual(sys: PowerSystem, r_re, r_im, s_re, s_im, v_re, v_im, flows=None):
    """Power-balance residual ``s - r - sum(f) + conj(y_shunt) |v|^2`` per bus."""
    n = sys.n_buses
    if flows is None:
        flows = branch_flows(sys, v_re, v_im)
    pf, qf, pt, qt = flows
    fi, ti = sys.from_idx, sys.to_idx
    out_p = ad.add(ad.segment_sum(pf, fi, n), ad.segment_sum(pt, ti, n))
    out_q = ad.add(ad.segment_sum(qf, fi, n), ad.segment_sum(qt, ti, n))
    ysh = sys.arrays.y_shunt
    v2 = ad.add(ad.square(v_re), ad.square(v_im))
    h_re = ad.add(ad.sub(ad.sub(s_re, r_re), out_p), ad.mul(ysh.real, v2))
    h_im = ad.sub(ad.sub(ad.sub(s_im, r_im), out_q), ad.mul(ysh.imag, v2))
    return _interleave(h_re, h_im)


def inequality_slacks(sys: PowerSystem, s_re, s_im, v_re, v_im, flows=None):
    """Violation-positive inequality slacks of length ``6N + 4M``."""
    A = sys.arrays
    if flows is None:
        flows = branch_flows(sys, v_re, v_im)
    pf, qf, pt, qt = flows
    vmag = ad.hypot(v_re, v_im)
    pr, pi, _, _ = _products(sys, v_re, v_im)
    ang = ad.atan2(pi, pr)
    blocks = [
        ad.sub(A.s_min.real, s_re),
        ad.sub(s_re, A.s_max.real),
        ad.sub(A.s_min.imag, s_im),
        ad.sub(s_im, A.s_max.imag),
        ad.sub(A.v_min, vmag),
        ad.sub(vmag, A.v_max),
        ad.sub(ad.hypot(pf, qf), A.f_max_from),
        ad.sub(ad.hypot(pt, qt), A.f_max_to),
        ad.sub(A.theta_min, ang),
        ad.sub(ang, A.theta_max),
    ]
    vals = [ad.value_of(b) for b in blocks]
    lead = np.broadcast_shapes(*[v.shape[:-1] for v in vals])
    blocks = [
        b if ad.value_of(b).shape[:-1] == lead else ad.broadcast_to(b, lead + ad.value_of(b).shape[-1:])
        for b in blocks
    ]
    return ad.concat(blocks, axis=-1)


def cost(sys: PowerSystem, s_re):
    """Generation cost with ``Re(s)`` converted to MW before applying the polynomial."""
    A = sys.arrays
    p_mw = ad.mul(s_re, sys.base_mva)
    per_bus = ad.add(ad.mul(A.c1, p_mw), ad.mul(A.c2, ad.square(p_mw)))
    return ad.add(ad.sum(per_bus, axis=-1), float(A.c0.sum()))


def penalty(g, h, gamma, gamma_h=None):
    """Quadratic penalty ``gamma/2 |max(0, g)|^2 + gamma_h/2 |h|^2``.

    ``gamma_h`` defaults to ``gamma``.
    """
    gh = gamma if gamma_h is None else gamma_h
    pg = ad.sum(ad.square(ad.max0(g)), axis=-1)
    ph = ad.sum(ad.square(h), axis=-1)
    return ad.add(ad.mul(0.5 * gamma, pg), ad.mul(0.5 * gh, ph))


def slack_blocks(sys: PowerSystem) -> dict:
    """Name -> slice of each slack block within ``g``."""
    n, m = sys.n_buses, sys.n_branches
    names = ["re_s_lower", "re_s_upper", "im_s_lower", "im_s_upper", "v_lower", "v_upper"]
    out = {nm: slice(k * n, (k + 1) * n) for k, nm in enumerate(names)}
    base = 6 * n
    for k, nm in enumerate(["f_from", "f_to", "angle_lower", "angle_upper"]):
        out[nm] = slice(base + k * m, base + (k + 1) * m)
    return out


def slack_ranges(sys: PowerSystem) -> np.ndarray:
    """Width of the feasible range behind each entry of ``g`` (0 when degenerate)."""
    A = sys.arrays
    ds = A.s_max - A.s_min
    dv = A.v_max - A.v_min
    dth = A.theta_max - A.theta_min
    return np.concatenate([ds.real, ds.real, ds.imag, ds.imag, dv, dv, A.f_max_from, A.f_max_to, dth, dth])


@dataclass
class Evaluation:
    """Numeric constraint evaluation of one operating point."""

    g: np.ndarray
    h: np.ndarray
    cost: float
    flows: tuple

    @property
    def max_violation(self) -> float:
        gv = float(np.max(self.g, initial=-np.inf))
        return max(gv, 0.0, float(np.max(np.abs(self.h), initial=0.0)))


def evaluate(sys: PowerSystem, r: np.ndarray, s: np.ndarray, v: np.ndarray) -> Evaluation:
    """Evaluate slacks, residuals and cost for complex arrays ``r``, ``s``, ``v``."""
    r, s, v = (np.asarray(x, dtype=complex) for x in (r, s, v))
    flows = branch_flows(sys, v.real, v.imag)
    h = balance_residual(sys, r.real, r.imag, s.real, s.imag, v.real, v.imag, flows)
    g = inequality_slacks(sys, s.real, s.imag, v.real, v.imag, flows)
    return Evaluation(g=g, h=h, cost=cost(sys, s.real), flows=flows)


# ---------------------------------------------------------------------------
# hand-derived derivatives for the numeric solvers (single operating point)

def flow_partials(sys: PowerSystem, e: np.ndarray, f: np.ndarray):
    """Flows and their partials with respect to ``(e_i, f_i, e_j, f_j)``.

    Returns ``(pf, qf, pt, qt, pr, pi, D)`` where ``D[a, b]`` is the partial of
    quantity ``a`` in (pf, qf, pt, qt, pr, pi) with respect to variable ``b``.
    """
    bc = branch_constants(sys)
    fi, ti = sys.from_idx, sys.to_idx
    ei, fi_, ej, fj = e[fi], f[fi], e[ti], f[ti]
    pr = ei * ej + fi_ * fj
    pi = fi_ * ej - ei * fj
    vi2 = ei * ei + fi_ * fi_
    vj2 = ej * ej + fj * fj
    zero = np.zeros_like(ei)
    d_pr = np.stack([ej, fj, ei, fi_])
    d_pi = np.stack([-fj, ej, fi_, -ei])
    d_vi2 = np.stack([2 * ei, 2 * fi_, zero, zero])
    d_vj2 = np.stack([zero, zero, 2 * ej, 2 * fj])
    A1, A2 = bc.a_f.real, bc.a_f.imag
    K1, K2 = bc.k_f.real, bc.k_f.imag
    B1, B2 = bc.a_t.real, bc.a_t.imag
    L1, L2 = bc.k_t.real, bc.k_t.imag
    pf = A1 * vi2 - (K1 * pr - K2 * pi)
    qf = A2 * vi2 - (K1 * pi + K2 * pr)
    pt = B1 * vj2 - (L1 * pr + L2 * pi)
    qt = B2 * vj2 - (L2 * pr - L1 * pi)
    D = np.stack(
        [
            A1 * d_vi2 - K1 * d_pr + K2 * d_pi,
            A2 * d_vi2 - K1 * d_pi - K2 * d_pr,
            B1 * d_vj2 - L1 * d_pr - L2 * d_pi,
            B2 * d_vj2 - L2 * d_pr + L1 * d_pi,
            d_pr,
            d_pi,
        ]
    )
    return pf, qf, pt, qt, pr, pi, D


def _ratio(num, den):
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den != 0)
    return out


def constraint_vjp(sys: PowerSystem, r, p, q, e, f, wg, wh):
    """Values of ``g`` and ``h`` plus the gradient of ``wg.g + wh.h``.

    All inputs are 1-D real arrays (``r`` complex).  The gradient is returned
    as ``(dp, dq, de, df)``.
    """
    A = sys.arrays
    n = sys.n_buses
    fi, ti = sys.from_idx, sys.to_idx
    pf, qf, pt, qt, pr, pi, D = flow_partials(sys, e, f)
    ysh = A.y_shunt
    v2 = e * e + f * f
    vmag = np.sqrt(v2)
    out_p = np.bincount(fi, pf, n) + np.bincount(ti, pt, n)
    out_q = np.bincount(fi, qf, n) + np.bincount(ti, qt, n)
    h_re = p - r.real - out_p + ysh.real * v2
    h_im = q - r.imag - out_q - ysh.imag * v2
    h = np.empty(2 * n)
    h[0::2], h[1::2] = h_re, h_im
    ff = np.hypot(pf, qf)
    ft = np.hypot(pt, qt)
    ang = np.arctan2(pi, pr)
    g = np.concatenate(
        [
            A.s_min.real - p,
            p - A.s_max.real,
            A.s_min.imag - q,
            q - A.s_max.imag,
            A.v_min - vmag,
            vmag - A.v_max,
            ff - A.f_max_from,
            ft - A.f_max_to,
            A.theta_min - ang,
            ang - A.theta_max,
        ]
    )
    m = sys.n_branches
    W = wg[: 6 * n].reshape(6, n)
    Wb = wg[6 * n :].reshape(4, m)
    wre, wim = wh[0::2], wh[1::2]
    dp = -W[0] + W[1] + wre
    dq = -W[2] + W[3] + wim
    dvm = -W[4] + W[5]
    de = _ratio(dvm * e, vmag) + 2 * e * (wre * ysh.real - wim * ysh.imag)
    df = _ratio(dvm * f, vmag) + 2 * f * (wre * ysh.real - wim * ysh.imag)
    dang = -Wb[2] + Wb[3]
    r2 = pr * pr + pi * pi
    adj = np.stack(
        [
            -wre[fi] + _ratio(Wb[0] * pf, ff),
            -wim[fi] + _ratio(Wb[0] * qf, ff),
            -wre[ti] + _ratio(Wb[1] * pt, ft),
            -wim[ti] + _ratio(Wb[1] * qt, ft),
            _ratio(-dang * pi, r2),
            _ratio(dang * pr, r2),
        ]
    )
    vb = np.einsum("am,abm->bm", adj, D)
    de = de + np.bincount(fi, vb[0], n) + np.bincount(ti, vb[2], n)
    df = df + np.bincount(fi, vb[1], n) + np.bincount(ti, vb[3], n)
    return g, h, (dp, dq, de, df)


def balance_jacobian(sys: PowerSystem, e: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Dense ``(2N, 2N)`` Jacobian of interleaved ``h`` with respect to ``[e, f]``.

    Columns ``0..N-1`` are ``e``, columns ``N..2N-1`` are ``f``.  The
    derivatives with respect to ``p``/``q`` are the identity on the Re/Im rows.
    """
    n = sys.n_buses
    fi, ti = sys.from_idx, sys.to_idx
    *_, D = flow_partials(sys, e, f)
    ysh = sys.arrays.y_shunt
    J = np.zeros((2 * n, 2 * n))
    k = np.arange(n)
    J[2 * k, k] = 2 * e * ysh.real
    J[2 * k, n + k] = 2 * f * ysh.real
    J[2 * k + 1, k] = -2 * e * ysh.imag
    J[2 * k + 1, n + k] = -2 * f * ysh.imag
    cols = [fi, n + fi, ti, n + ti]
    for a, (bus, comp) in enumerate([(fi, 0), (fi, 1), (ti, 0), (ti, 1)]):
        rows = 2 * bus + comp
        for b in range(4):
            np.add.at(J, (rows, cols[b]), -D[a, b])
    return J


def _branch_scatter(sys):
    n = sys.n_buses
    fi, ti = sys.from_idx, sys.to_idx
    return np.stack([fi, n + fi, ti, n + ti])  # (4, M) column of (e_i, f_i, e_j, f_j)


def constraint_jacobian(sys: PowerSystem, p, q, e, f):
    """Dense Jacobians of ``g`` (``G x 4N``) and ``h`` (``2N x 4N``).

    Columns are ordered ``[p, q, e, f]``, each block of length N.
    """
    A = sys.arrays
    n, m = sys.n_buses, sys.n_branches
    fi, ti = sys.from_idx, sys.to_idx
    pf, qf, pt, qt, pr, pi, D = flow_partials(sys, e, f)
    k = np.arange(n)
    bm = np.arange(m)
    cols = _branch_scatter(sys) + 2 * n  # shift past the p, q blocks

    Jh = np.zeros((2 * n, 4 * n))
    Jh[2 * k, k] = 1.0
    Jh[2 * k + 1, n + k] = 1.0
    ysh = A.y_shunt
    Jh[2 * k, 2 * n + k] = 2 * e * ysh.real
    Jh[2 * k, 3 * n + k] = 2 * f * ysh.real
    Jh[2 * k + 1, 2 * n + k] = -2 * e * ysh.imag
    Jh[2 * k + 1, 3 * n + k] = -2 * f * ysh.imag
    for a, rows in enumerate([2 * fi, 2 * fi + 1, 2 * ti, 2 * ti + 1]):
        for b in range(4):
            np.add.at(Jh, (rows, cols[b]), -D[a, b])

    G = 6 * n + 4 * m
    Jg = np.zeros((G, 4 * n))
    Jg[k, k] = -1.0
    Jg[n + k, k] = 1.0
    Jg[2 * n + k, n + k] = -1.0
    Jg[3 * n + k, n + k] = 1.0
    vmag = np.sqrt(e * e + f * f)
    de, df = _ratio(e, vmag), _ratio(f, vmag)
    Jg[4 * n + k, 2 * n + k] = -de
    Jg[4 * n + k, 3 * n + k] = -df
    Jg[5 * n + k, 2 * n + k] = de
    Jg[5 * n + k, 3 * n + k] = df
    ff, ft = np.hypot(pf, qf), np.hypot(pt, qt)
    d_ff = _ratio(pf, ff) * D[0] + _ratio(qf, ff) * D[1]
    d_ft = _ratio(pt, ft) * D[2] + _ratio(qt, ft) * D[3]
    r2 = pr * pr + pi * pi
    d_ang = _ratio(pr, r2) * D[5] - _ratio(pi, r2) * D[4]
    base = 6 * n
    for b in range(4):
        Jg[base + bm, cols[b]] += d_ff[b]
        Jg[base + m + bm, cols[b]] += d_ft[b]
        Jg[base + 2 * m + bm, cols[b]] -= d_ang[b]
        Jg[base + 3 * m + bm, cols[b]] += d_ang[b]
    return Jg, Jh


def _unit_hessians():
    H_vi2 = np.diag([2.0, 2.0, 0.0, 0.0])
    H_vj2 = np.diag([0.0, 0.0, 2.0, 2.0])
    H_pr = np.zeros((4, 4))
    H_pr[0, 2] = H_pr[2, 0] = H_pr[1, 3] = H_pr[3, 1] = 1.0
    H_pi = np.zeros((4, 4))
    H_pi[1, 2] = H_pi[2, 1] = 1.0
    H_pi[0, 3] = H_pi[3, 0] = -1.0
    return H_vi2, H_vj2, H_pr, H_pi


_H_VI2, _H_VJ2, _H_PR, _H_PI = _unit_hessians()


def constraint_hessian(sys: PowerSystem, p, q, e, f, wg, wh):
    """Dense Hessian of ``wg.g + wh.h`` over the voltage block ``[e, f]``.

    ``g`` and ``h`` are linear in ``p`` and ``q``, so this ``2N x 2N`` block is
    the only nonzero part of the full ``4N x 4N`` Hessian.
    """
    A = sys.arrays
    n, m = sys.n_buses, sys.n_branches
    fi, ti = sys.from_idx, sys.to_idx
    bc = branch_constants(sys)
    pf, qf, pt, qt, pr, pi, D = flow_partials(sys, e, f)
    wre, wim = wh[0::2], wh[1::2]
    Wb = wg[6 * n :].reshape(4, m)
    ff, ft = np.hypot(pf, qf), np.hypot(pt, qt)
    a, b = Wb[0], Wb[1]
    c_pf = -wre[fi] + _ratio(a * pf, ff)
    c_qf = -wim[fi] + _ratio(a * qf, ff)
    c_pt = -wre[ti] + _ratio(b * pt, ft)
    c_qt = -wim[ti] + _ratio(b * qt, ft)
    A1, A2 = bc.a_f.real, bc.a_f.imag
    K1, K2 = bc.k_f.real, bc.k_f.imag
    B1, B2 = bc.a_t.real, bc.a_t.imag
    L1, L2 = bc.k_t.real, bc.k_t.imag
    # second derivatives of the quadratic flow forms, combined per branch
    c_vi2 = c_pf * A1 + c_qf * A2
    c_vj2 = c_pt * B1 + c_qt * B2
    c_pr = -c_pf * K1 - c_qf * K2 - c_pt * L1 - c_qt * L2
    c_pi = c_pf * K2 - c_qf * K1 - c_pt * L2 + c_qt * L1
    # angle: theta = atan2(pi, pr)
    dang = -Wb[2] + Wb[3]
    r2 = pr * pr + pi * pi
    c_pr = c_pr - _ratio(dang * pi, r2)
    c_pi = c_pi + _ratio(dang * pr, r2)
    Hb = (
        c_vi2[:, None, None] * _H_VI2
        + c_vj2[:, None, None] * _H_VJ2
        + c_pr[:, None, None] * _H_PR
        + c_pi[:, None, None] * _H_PI
    )
    # rank-one pieces of |f| and theta
    Dt = np.transpose(D, (2, 0, 1))  # (M, 6, 4)
    gpf, gqf, gpt, gqt, gpr, gpi = (Dt[:, k, :] for k in range(6))
    inv_ff, inv_ft = _ratio(a, ff), _ratio(b, ft)
    gff = _ratio(pf, ff)[:, None] * gpf + _ratio(qf, ff)[:, None] * gqf
    gft = _ratio(pt, ft)[:, None] * gpt + _ratio(qt, ft)[:, None] * gqt
    outer = lambda u, w: u[:, :, None] * w[:, None, :]
    Hb += inv_ff[:, None, None] * (outer(gpf, gpf) + outer(gqf, gqf) - outer(gff, gff))
    Hb += inv_ft[:, None, None] * (outer(gpt, gpt) + outer(gqt, gqt) - outer(gft, gft))
    num = pr[:, None] * gpi - pi[:, None] * gpr
    skew = outer(gpi, gpr) - outer(gpr, gpi)
    Ha = _ratio(dang, r2)[:, None, None] * skew - _ratio(dang, r2 * r2)[:, None, None] * outer(
        num, 2 * pr[:, None] * gpr + 2 * pi[:, None] * gpi
    )
    Hb += 0.5 * (Ha + np.transpose(Ha, (0, 2, 1)))

    H = np.zeros((2 * n, 2 * n))
    cols = _branch_scatter(sys)
    for r in range(4):
        for c in range(4):
            np.add.at(H, (cols[r], cols[c]), Hb[:, r, c])
    # bus terms: shunt and |v|
    k = np.arange(n)
    ysh = A.y_shunt
    dsh = 2 * (wre * ysh.real - wim * ysh.imag)
    v2 = e * e + f * f
    vmag = np.sqrt(v2)
    dv = -wg[4 * n : 5 * n] + wg[5 * n : 6 * n]
    inv3 = _ratio(dv, vmag * v2)
    H[k, k] += dsh + inv3 * f * f
    H[n + k, n + k] += dsh + inv3 * e * e
    H[k, n + k] -= inv3 * e * f
    H[n + k, k] -= inv3 * e * f
    return H
