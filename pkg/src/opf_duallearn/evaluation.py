"""Evaluation of predicted operating points.

A prediction is first projected onto the power-flow manifold with a
Newton-Raphson solve that holds the predicted generation fixed everywhere but
the reference bus.  Inequality violations of the projected point are then
normalized by the width of the feasible range of each constrained quantity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import physics as ph
from .case_io import PowerSystem
from .data import MissingLabel

__all__ = [
    "PowerFlowDiverged",
    "MissingLabel",
    "EmptyInput",
    "Projection",
    "project_to_powerflow",
    "normalized_violations",
    "SampleMetrics",
    "sample_metrics",
    "evaluate_predictions",
    "AggregateRow",
    "aggregate",
    "REPORT_BLOCKS",
    "METRIC_NAMES",
]

# reported blocks -> slack block names (see physics.slack_blocks)
REPORT_BLOCKS = {
    "re_s": ("re_s_lower", "re_s_upper"),
    "im_s": ("im_s_lower", "im_s_upper"),
    "vm": ("v_lower", "v_upper"),
    "f_from": ("f_from",),
    "f_to": ("f_to",),
    "angle": ("angle_lower", "angle_upper"),
}


class PowerFlowDiverged(RuntimeError):
    def __init__(self, msg, iterations=0):
        super().__init__(msg)
        self.iterations = iterations


class EmptyInput(ValueError):
    pass


@dataclass
class Projection:
    s: np.ndarray
    v: np.ndarray
    iterations: int
    residual: float


def project_to_powerflow(sys: PowerSystem, r, s, v, tol: float = 1e-8, max_iter: int = 50) -> Projection:
    """Solve the balance equations for ``v`` given ``s``.

    The reference bus voltage stays at its predicted value and its complex
    generation floats.  Raises :class:`PowerFlowDiverged` when the residual
    does not reach ``tol`` within ``max_iter`` Newton steps.
    """
    n = sys.n_buses
    ref = sys.ref_index
    r = np.asarray(r, dtype=complex)
    s = np.array(s, dtype=complex)
    v = np.array(v, dtype=complex)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(v))):
        raise PowerFlowDiverged("non-finite prediction")
    mask = np.ones(2 * n, bool)
    mask[ref] = mask[n + ref] = False
    ref_cols = np.zeros((2 * n, 2))
    ref_cols[2 * ref, 0] = 1.0
    ref_cols[2 * ref + 1, 1] = 1.0
    for it in range(max_iter + 1):
        h = ph.balance_residual(sys, r.real, r.imag, s.real, s.imag, v.real, v.imag)
        res = float(np.max(np.abs(h)))
        if not math.isfinite(res):
            raise PowerFlowDiverged("residual became non-finite", it)
        if res <= tol:
            return Projection(s=s, v=v, iterations=it, residual=res)
        if it == max_iter:
            break
        J = np.hstack([ph.balance_jacobian(sys, v.real, v.imag)[:, mask], ref_cols])
        try:
            dz = np.linalg.solve(J, -h)
        except np.linalg.LinAlgError:
            raise PowerFlowDiverged("singular power-flow Jacobian", it) from None
        dv = np.zeros(2 * n)
        dv[mask] = dz[:-2]
        v = v + dv[:n] + 1j * dv[n:]
        s[ref] += dz[-2] + 1j * dz[-1]
    raise PowerFlowDiverged(f"no convergence in {max_iter} iterations (|h| = {res:.3e})", max_iter)


def normalized_violations(sys: PowerSystem, s, v, flows=None):
    """Violation of every inequality as a fraction of its feasible range.

    Returns ``(eps, zero_range)``; entries whose range is zero use the
    absolute violation and are flagged in the boolean ``zero_range`` mask.
    """
    s = np.asarray(s, dtype=complex)
    v = np.asarray(v, dtype=complex)
    g = ph.inequality_slacks(sys, s.real, s.imag, v.real, v.imag, flows)
    den = ph.slack_ranges(sys)
    zero = den <= 0
    scale = np.where(zero, 1.0, den)
    return np.maximum(g / scale, 0.0), zero


@dataclass
class SampleMetrics:
    optgap: float
    mean_violation: float
    max_violation: float
    invariant_metric: float
    blocks: dict = field(default_factory=dict)
    projected: bool = True
    nr_iterations: int = 0
    zero_range_hits: int = 0
    cost: float = float("nan")


def sample_metrics(sys: PowerSystem, r, s, v, label_cost: float | None = None, c_bar: float | None = None,
                   require_label: bool = False) -> SampleMetrics:
    """Metrics of one prediction ``(s, v)`` for demand ``r``.

    ``label_cost`` is the reference cost (``optgap`` is NaN without it unless
    ``require_label`` is set); ``c_bar`` is the mean training label cost used
    by the invariant metric.
    """
    if require_label and label_cost is None:
        raise MissingLabel(reason="optimality gap needs a reference label")
    r = np.asarray(r, dtype=complex)
    s = np.asarray(s, dtype=complex)
    v = np.asarray(v, dtype=complex)
    n = sys.n_buses
    raw = ph.evaluate(sys, r, s, v)
    try:
        proj = project_to_powerflow(sys, r, s, v)
        sp, vp, iters, ok = proj.s, proj.v, proj.iterations, True
    except PowerFlowDiverged as exc:
        sp, vp, iters, ok = s, v, exc.iterations, False
    eps, zero = normalized_violations(sys, sp, vp)
    n_g = sys.n_ineq
    cost_p = float(ph.cost(sys, sp.real))
    optgap = cost_p / label_cost - 1.0 if label_cost is not None else float("nan")
    if c_bar is not None:
        eh = np.abs(raw.h)
        eg = np.maximum(raw.g, 0.0)
        inv = float(raw.cost) / c_bar + 1e3 * float(eh.sum()) / (2 * n) + 1e3 * float(eg.sum()) / n_g
    else:
        inv = float("nan")
    sl = ph.slack_blocks(sys)
    blocks = {}
    for name, parts in REPORT_BLOCKS.items():
        vals = np.concatenate([eps[sl[p]] for p in parts])
        blocks[f"{name}_mean"] = float(vals.mean()) if vals.size else 0.0
        blocks[f"{name}_max"] = float(vals.max()) if vals.size else 0.0
    return SampleMetrics(
        optgap=float(optgap),
        mean_violation=float(eps.sum()) / n_g,
        max_violation=float(eps.max(initial=0.0)),
        invariant_metric=inv,
        blocks=blocks,
        projected=ok,
        nr_iterations=int(iters),
        zero_range_hits=int(np.count_nonzero(zero & (eps > 0))),
        cost=cost_p,
    )


def evaluate_predictions(sys: PowerSystem, r, s, v, label_costs=None, c_bar=None) -> list[SampleMetrics]:
    r = np.atleast_2d(r)
    s = np.atleast_2d(s)
    v = np.atleast_2d(v)
    out = []
    for k in range(len(r)):
        lc = None if label_costs is None else float(label_costs[k])
        out.append(sample_metrics(sys, r[k], s[k], v[k], lc, c_bar))
    return out


METRIC_NAMES = ("optgap", "mean_violation", "max_violation", "invariant_metric")


@dataclass(frozen=True)
class AggregateRow:
    case: str
    method: str
    metric: str
    mean: float
    std: float
    p95: float
    max: float


def _stats(vals: np.ndarray):
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        return (float("nan"),) * 4
    return float(vals.mean()), float(vals.std()), float(np.percentile(vals, 95)), float(vals.max())


def aggregate(metrics: list, case: str = "", method: str = "") -> list[AggregateRow]:
    """Population mean, std, linear-interpolated p95 and max of each metric.

    ``metrics`` may hold :class:`SampleMetrics` or plain dicts of numbers.
    """
    if not metrics:
        raise EmptyInput("no samples to aggregate")
    rows = [_as_dict(m) for m in metrics]
    names = list(rows[0].keys())
    out = []
    for name in names:
        vals = np.array([row[name] for row in rows], dtype=np.float64)
        out.append(AggregateRow(case, method, name, *_stats(vals)))
    return out


def _as_dict(m) -> dict:
    if isinstance(m, SampleMetrics):
        d = {
            "optgap": m.optgap,
            "mean_violation": m.mean_violation,
            "max_violation": m.max_violation,
            "invariant_metric": m.invariant_metric,
        }
        d.update(m.blocks)
        return d
    return dict(m)
