"""Constrained training of the GAT: Lagrangians, primal and dual steps.

Three multiplier layouts are supported.  ``pointwise`` keeps one pair
``(lam(r), mu(r))`` per training sample, ``shared`` keeps a single pair for all
samples, and ``hybrid`` stores a shared pair plus per-sample deviations whose
sum is the effective multiplier.  Primal parameters follow AdamW on the batch
Lagrangian.  Pointwise duals take projected SGD steps along the slacks;
shared duals take AdaMax steps along the negated mean slack.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import physics as ph
from .data import Dataset, MissingLabel, stream
from .gat import GatModel, init_parameters
from .optim import SGD, AdaMax, AdamW

__all__ = [
    "METHODS",
    "DUAL_METHODS",
    "EmptyBatch",
    "WrongMode",
    "NonFiniteLoss",
    "NonFiniteGradient",
    "MissingLabel",
    "TrainingConfig",
    "LossWeights",
    "MultiplierStore",
    "realization_lagrangian",
    "stochastic_lagrangian",
    "supervised_loss",
    "pointwise_update",
    "dual_step_pointwise",
    "dual_step_shared",
    "dual_step",
    "hybrid_recombine",
    "hybrid_decompose",
    "primal_step",
    "TrainState",
    "init_state",
    "train",
    "HISTORY_COLUMNS",
]

DUAL_METHODS = {"dual_p": "pointwise", "dual_s": "shared", "dual_h": "hybrid"}
METHODS = ("dual_p", "dual_s", "dual_h", "mse", "mse_penalty", "penalty")
HISTORY_COLUMNS = (
    "epoch",
    "train_loss",
    "val_optgap_mean",
    "val_mean_violation",
    "val_max_violation",
    "lambda_norm",
    "mu_norm",
)


class EmptyBatch(ValueError):
    pass


class WrongMode(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


class NonFiniteGradient(FloatingPointError):
    def __init__(self, block: str):
        super().__init__(f"non-finite gradient in parameter block {block!r}")
        self.block = block


@dataclass(frozen=True)
class TrainingConfig:
    method: str = "dual_p"
    epochs: int = 5000
    batch_size: int = 32
    eta_primal: float = 3e-4
    primal_betas: tuple = (0.9, 0.999)
    primal_eps: float = 1e-8
    omega_primal: float = 6.9e-15
    eta_sh: float = 1e-2
    shared_betas: tuple = (0.9, 0.999)
    omega_sh: float = 0.0
    shared_optimizer: str = "adamax"
    eta_pw: float = 5e3
    omega_pw: float = 0.0
    pw_step: str = "batch_mean"
    gamma: float = 1.0
    w_g: float | None = None
    w_h: float | None = None
    w_c: float | None = None
    aid_weight: float = 10.0
    aid_epochs: int = 500
    dual_warmup_epochs: int = 250
    hybrid_order: str = "shared_first"
    freeze_duals: bool = False
    clip_norm: float | None = None
    val_every: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        for name in ("eta_primal", "eta_sh", "gamma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.eta_pw < 0:
            raise ValueError("eta_pw must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.aid_epochs < 0 or (self.epochs > 0 and self.aid_epochs > self.epochs):
            raise ValueError("aid_epochs must lie in [0, epochs]")
        if self.shared_optimizer not in ("adamax", "sgd"):
            raise ValueError("shared_optimizer must be 'adamax' or 'sgd'")
        if self.hybrid_order not in ("shared_first", "pointwise_first"):
            raise ValueError("hybrid_order must be 'shared_first' or 'pointwise_first'")
        if self.pw_step not in ("batch_mean", "raw"):
            raise ValueError("pw_step must be 'batch_mean' or 'raw'")
        if self.val_every < 1:
            raise ValueError("val_every must be >= 1")

    @property
    def multiplier_mode(self) -> str:
        return DUAL_METHODS.get(self.method, "none")

    def penalty_weights(self) -> tuple[float, float]:
        default = 72.0 if self.method == "mse_penalty" else 5.0
        wg = default if self.w_g is None else self.w_g
        wh = default if self.w_h is None else self.w_h
        return self.gamma * wg, self.gamma * wh

    def to_dict(self) -> dict:
        d = asdict(self)
        d["primal_betas"] = list(self.primal_betas)
        d["shared_betas"] = list(self.shared_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        names = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in names}
        for k in ("primal_betas", "shared_betas"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)


@dataclass(frozen=True)
class LossWeights:
    w_c: float
    w_g: float
    w_h: float

    @classmethod
    def resolve(cls, cfg: TrainingConfig, c_bar: float) -> "LossWeights":
        wg, wh = cfg.penalty_weights()
        wc = cfg.w_c if cfg.w_c is not None else 0.1 / c_bar
        return cls(wc, wg, wh)


# ---------------------------------------------------------------------------
# multipliers

class MultiplierStore:
    """Multipliers keyed by dataset sample index.

    Per-sample rows hold ``[lam, mu]`` (pointwise) or ``[dlam, dmu]`` (hybrid)
    and may live in a memory-mapped ``.npy`` file.  All multipliers start at 0.
    """

    def __init__(self, mode: str, n_samples: int, n_ineq: int, n_eq: int, path=None):
        if mode not in ("none", "pointwise", "shared", "hybrid"):
            raise WrongMode(f"unknown multiplier mode {mode!r}")
        self.mode = mode
        self.n_ineq, self.n_eq = n_ineq, n_eq
        width = n_ineq + n_eq
        self.table = None
        if mode in ("pointwise", "hybrid"):
            if path is not None:
                self.table = np.lib.format.open_memmap(path, mode="w+", dtype=np.float64, shape=(n_samples, width))
                self.table[:] = 0.0
            else:
                self.table = np.zeros((n_samples, width))
        self.lam_bar = np.zeros(n_ineq)
        self.mu_bar = np.zeros(n_eq)

    def _require(self, *modes):
        if self.mode not in modes:
            raise WrongMode(f"operation needs mode {' or '.join(modes)}, store is {self.mode}")

    def materialize(self, ids):
        """Effective ``(lam, mu)`` of the given samples, shapes (B, G) and (B, H)."""
        ids = np.asarray(ids, dtype=np.intp)
        G = self.n_ineq
        if self.mode == "pointwise":
            rows = self.table[ids]
            return rows[:, :G].copy(), rows[:, G:].copy()
        if self.mode == "hybrid":
            rows = self.table[ids]
            return np.maximum(self.lam_bar + rows[:, :G], 0.0), self.mu_bar + rows[:, G:]
        b = len(ids)
        return np.tile(self.lam_bar, (b, 1)), np.tile(self.mu_bar, (b, 1))

    def write(self, ids, lam, mu) -> None:
        """Store effective multipliers (pointwise) or their deviations (hybrid)."""
        self._require("pointwise", "hybrid")
        ids = np.asarray(ids, dtype=np.intp)
        G = self.n_ineq
        if self.mode == "pointwise":
            self.table[ids, :G] = lam
            self.table[ids, G:] = mu
        else:
            self.table[ids, :G] = lam - self.lam_bar
            self.table[ids, G:] = mu - self.mu_bar

    def norms(self, ids=None) -> tuple[float, float]:
        """Mean L2 norm of the effective multipliers (over ``ids`` or all rows)."""
        if self.mode == "none":
            return 0.0, 0.0
        if self.mode == "shared":
            return float(np.linalg.norm(self.lam_bar)), float(np.linalg.norm(self.mu_bar))
        if ids is None:
            ids = np.arange(len(self.table))
        lam, mu = self.materialize(ids)
        return float(np.linalg.norm(lam, axis=1).mean()), float(np.linalg.norm(mu, axis=1).mean())

    def save(self, directory) -> None:
        d = Path(directory)
        np.save(d / "multipliers_shared.npy", np.concatenate([self.lam_bar, self.mu_bar]))
        if self.table is not None:
            np.save(d / "multipliers.npy", np.asarray(self.table))


def hybrid_recombine(store: MultiplierStore, ids):
    store._require("hybrid")
    return store.materialize(ids)


def hybrid_decompose(store: MultiplierStore, ids, lam, mu) -> None:
    store._require("hybrid")
    store.write(ids, lam, mu)


def pointwise_update(lam, mu, g, h, eta: float, omega: float = 0.0):
    """``[lam + eta (g - omega lam)]_+`` and ``mu + eta (h - omega mu)``."""
    if omega:
        g = g - omega * lam
        h = h - omega * mu
    return np.maximum(lam + eta * g, 0.0), mu + eta * h


def dual_step_pointwise(store: MultiplierStore, ids, g, h, eta: float, omega: float = 0.0) -> None:
    """Projected ascent of each sample's multipliers along its own slacks."""
    store._require("pointwise", "hybrid")
    lam, mu = store.materialize(ids)
    lam, mu = pointwise_update(lam, mu, g, h, eta, omega)
    store.write(ids, lam, mu)


def make_shared_optimizer(cfg: TrainingConfig):
    if cfg.shared_optimizer == "sgd":
        return SGD(lr=cfg.eta_sh, weight_decay=cfg.omega_sh)
    return AdaMax(lr=cfg.eta_sh, betas=tuple(cfg.shared_betas), weight_decay=cfg.omega_sh)


def dual_step_shared(store: MultiplierStore, g, h, optimizer) -> None:
    """Ascent of the shared pair along the batch-mean slack, then projection."""
    store._require("shared", "hybrid")
    g = np.atleast_2d(g)
    h = np.atleast_2d(h)
    if len(g) == 0:
        raise EmptyBatch("dual batch is empty")
    bars = {"lam": store.lam_bar, "mu": store.mu_bar}
    optimizer.step(bars, {"lam": -g.mean(axis=0), "mu": -h.mean(axis=0)})
    np.maximum(store.lam_bar, 0.0, out=store.lam_bar)


def dual_step(store: MultiplierStore, ids, g, h, cfg: TrainingConfig, shared_opt) -> None:
    """One full dual update of the batch ``ids`` for the store's mode.

    In hybrid mode the default order applies the shared step first and then
    moves each sample's multiplier from the new shared base; with
    ``hybrid_order = "pointwise_first"`` the pointwise step starts from the
    pre-update base instead.  Either way deviations are re-expressed against
    the new shared pair afterwards.
    """
    mode = store.mode
    # SGD on the batch-mean Lagrangian moves lam(r) by eta_pw g(r) / |batch|
    eta = cfg.eta_pw / len(ids) if cfg.pw_step == "batch_mean" else cfg.eta_pw
    if mode == "pointwise":
        dual_step_pointwise(store, ids, g, h, eta, cfg.omega_pw)
    elif mode == "shared":
        dual_step_shared(store, g, h, shared_opt)
    elif mode == "hybrid":
        if cfg.hybrid_order == "shared_first":
            dual_step_shared(store, g, h, shared_opt)
            dual_step_pointwise(store, ids, g, h, eta, cfg.omega_pw)
        else:
            lam, mu = hybrid_recombine(store, ids)
            lam, mu = pointwise_update(lam, mu, g, h, eta, cfg.omega_pw)
            dual_step_shared(store, g, h, shared_opt)
            hybrid_decompose(store, ids, lam, mu)
    else:
        raise WrongMode("no multipliers to update")


# ---------------------------------------------------------------------------
# losses

def _forward_terms(model: GatModel, params, r, rng=None):
    r = np.atleast_2d(np.asarray(r, dtype=complex))
    sys = model.sys
    outs = model.forward(params, r.real, r.imag, rng)
    s_re, s_im, v_re, v_im = outs
    flows = ph.branch_flows(sys, v_re, v_im)
    g = ph.inequality_slacks(sys, s_re, s_im, v_re, v_im, flows)
    h = ph.balance_residual(sys, r.real, r.imag, s_re, s_im, v_re, v_im, flows)
    return outs, g, h


def _lagrangian_terms(model, params, r, lam, mu, weights: LossWeights, with_duals=True, rng=None):
    """Per-sample Lagrangian values (B,) plus the outputs and slacks."""
    outs, g, h = _forward_terms(model, params, r, rng)
    cost = ph.cost(model.sys, outs[0])
    terms = ad.add(ad.mul(cost, weights.w_c), ph.penalty(g, h, weights.w_g, weights.w_h))
    if with_duals:
        lam = np.atleast_2d(lam)
        mu = np.atleast_2d(mu)
        dual = ad.add(ad.sum(ad.mul(g, lam), axis=-1), ad.sum(ad.mul(h, mu), axis=-1))
        terms = ad.add(terms, dual)
    return terms, outs, g, h


def realization_lagrangian(model: GatModel, params, r, lam, mu, weights: LossWeights):
    """``w_c C + P + lam.g + mu.h`` for one demand vector ``r`` (scalar Var)."""
    terms, _, _, _ = _lagrangian_terms(model, params, np.reshape(r, (1, -1)), lam, mu, weights)
    return ad.sum(terms)


def _mean(terms):
    b = ad.value_of(terms).shape[0]
    return ad.mul(ad.sum(terms), 1.0 / b)


def stochastic_lagrangian(model: GatModel, params, r_batch, lam, mu, weights: LossWeights):
    """Batch mean of the realization Lagrangians; ``lam``/``mu`` are per-sample rows."""
    r_batch = np.atleast_2d(r_batch)
    if r_batch.shape[0] == 0:
        raise EmptyBatch("primal batch is empty")
    terms, _, _, _ = _lagrangian_terms(model, params, r_batch, lam, mu, weights)
    return _mean(terms)


def _imitation(outs, s_label, v_label):
    s_label = np.atleast_2d(s_label)
    v_label = np.atleast_2d(v_label)
    targets = (s_label.real, s_label.imag, v_label.real, v_label.imag)
    err = None
    for o, t in zip(outs, targets):
        e = ad.sum(ad.square(ad.sub(o, t)), axis=-1)
        err = e if err is None else ad.add(err, e)
    return err


def supervised_loss(model: GatModel, params, r_batch, s_label, v_label, mode: str, weights: LossWeights | None = None):
    """Mean squared distance to the labels, plus the penalty when ``mode`` is ``mse_penalty``."""
    r_batch = np.atleast_2d(r_batch)
    if r_batch.shape[0] == 0:
        raise EmptyBatch("primal batch is empty")
    if s_label is None or v_label is None:
        raise MissingLabel()
    if mode not in ("mse", "mse_penalty"):
        raise ValueError(f"unknown supervised mode {mode!r}")
    outs, g, h = _forward_terms(model, params, r_batch)
    terms = _imitation(outs, s_label, v_label)
    if mode == "mse_penalty":
        if weights is None:
            raise ValueError("mse_penalty needs penalty weights")
        terms = ad.add(terms, ph.penalty(g, h, weights.w_g, weights.w_h))
    return _mean(terms)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainState:
    config: TrainingConfig
    weights: LossWeights
    params: dict
    store: MultiplierStore
    primal_opt: AdamW
    shared_opt: object
    c_bar: float
    epoch: int = 0
    history: list = field(default_factory=list)


def init_state(model: GatModel, dataset: Dataset, cfg: TrainingConfig, c_bar: float | None = None,
               multiplier_path=None) -> TrainState:
    sys = model.sys
    if c_bar is None:
        c_bar = dataset.mean_label_cost("train")
    if not (math.isfinite(c_bar) and c_bar > 0):
        raise ValueError(f"mean reference cost must be positive, got {c_bar}")
    params = init_parameters(model.cfg, stream(cfg.seed, "init"))
    store = MultiplierStore(cfg.multiplier_mode, dataset.n_samples, sys.n_ineq, sys.n_eq, multiplier_path)
    primal = AdamW(lr=cfg.eta_primal, betas=tuple(cfg.primal_betas), eps=cfg.primal_eps, weight_decay=cfg.omega_primal)
    return TrainState(cfg, LossWeights.resolve(cfg, c_bar), params, store, primal, make_shared_optimizer(cfg), c_bar)


def primal_step(state: TrainState, grads: dict) -> None:
    """AdamW update of all parameters; refuses non-finite gradients."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    clip = state.config.clip_norm
    if clip is not None:
        total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
        if total > clip:
            grads = {k: g * (clip / total) for k, g in grads.items()}
    state.primal_opt.step(state.params, grads)


def aid_weight(cfg: TrainingConfig, epoch: int) -> float:
    """Supervised-aid weight, decaying linearly from ``aid_weight`` to 0."""
    if cfg.method in ("mse", "mse_penalty") or epoch >= cfg.aid_epochs:
        return 0.0
    return cfg.aid_weight * (1.0 - epoch / cfg.aid_epochs)


def batch_loss(model: GatModel, state: TrainState, dataset: Dataset, ids, epoch: int):
    """Build the training loss of batch ``ids`` on a fresh tape.

    Returns ``(tape, leaves, loss)``.
    """
    cfg = state.config
    tape = ad.Tape()
    leaves = {k: tape.leaf(v) for k, v in state.params.items()}
    r = dataset.r[ids]
    method = cfg.method
    if method in ("mse", "mse_penalty"):
        dataset.require_labels(ids)
        L = dataset.labels
        loss = supervised_loss(model, leaves, r, L.s[ids], L.v[ids], method, state.weights)
        return tape, leaves, loss
    if method == "penalty":
        terms, outs, _, _ = _lagrangian_terms(model, leaves, r, None, None, state.weights, with_duals=False)
    else:
        lam, mu = state.store.materialize(ids)
        terms, outs, _, _ = _lagrangian_terms(model, leaves, r, lam, mu, state.weights)
    loss = _mean(terms)
    w = aid_weight(cfg, epoch)
    if w > 0:
        dataset.require_labels(ids)
        L = dataset.labels
        loss = ad.add(loss, ad.mul(_mean(_imitation(outs, L.s[ids], L.v[ids])), w))
    return tape, leaves, loss


def _validate(model, state: TrainState, dataset: Dataset):
    from .evaluation import evaluate_predictions

    ids = dataset.split["val"]
    if len(ids) == 0:
        return math.nan, math.nan, math.nan
    s, v = model.predict(state.params, dataset.r[ids])
    costs = None if dataset.labels is None else dataset.labels.cost[ids]
    rows = evaluate_predictions(model.sys, dataset.r[ids], s, v, costs)
    gap = float(np.mean([m.optgap for m in rows]))
    return gap, float(np.mean([m.mean_violation for m in rows])), float(np.mean([m.max_violation for m in rows]))


def train(model: GatModel, dataset: Dataset, cfg: TrainingConfig, state: TrainState | None = None,
          c_bar: float | None = None, multiplier_path=None, on_epoch=None) -> TrainState:
    """Run ``cfg.epochs`` epochs and return the final state.

    Each epoch shuffles the training split into batches.  Every batch takes
    one primal step, then (for dual methods past warmup, unless frozen) one
    dual step on slacks re-evaluated at the updated parameters.  ``on_epoch``
    is called with each history row.
    """
    supervised = cfg.method in ("mse", "mse_penalty")
    aided = cfg.epochs > 0 and cfg.aid_epochs > 0 and cfg.aid_weight > 0
    if dataset.labels is None and (supervised or aided):
        raise MissingLabel(reason=f"method {cfg.method} with aid_epochs={cfg.aid_epochs} needs labels")
    if state is None:
        state = init_state(model, dataset, cfg, c_bar, multiplier_path)
    train_ids = dataset.split["train"]
    if len(train_ids) == 0 and cfg.epochs > 0:
        raise EmptyBatch("training split is empty")
    shuffle = stream(cfg.seed, "shuffle")
    dual = cfg.multiplier_mode != "none" and not cfg.freeze_duals
    B = cfg.batch_size
    for epoch in range(state.epoch, cfg.epochs):
        order = shuffle.permutation(train_ids)
        total, count = 0.0, 0
        for bi, start in enumerate(range(0, len(order), B)):
            ids = order[start : start + B]
            tape, leaves, loss = batch_loss(model, state, dataset, ids, epoch)
            value = float(loss.value)
            if not math.isfinite(value):
                raise NonFiniteLoss(epoch, bi, value)
            grads = tape.backward(loss)
            primal_step(state, {k: grads[v] for k, v in leaves.items()})
            total += value * len(ids)
            count += len(ids)
            if dual and epoch >= cfg.dual_warmup_epochs:
                _, g, h = _forward_terms(model, state.params, dataset.r[ids])
                dual_step(state.store, ids, g, h, cfg, state.shared_opt)
        state.epoch = epoch + 1
        if (epoch + 1) % cfg.val_every == 0 or epoch + 1 == cfg.epochs:
            gap, mean_v, max_v = _validate(model, state, dataset)
        else:
            gap = mean_v = max_v = math.nan
        lam_n, mu_n = state.store.norms(train_ids)
        row = {
            "epoch": epoch + 1,
            "train_loss": total / max(count, 1),
            "val_optgap_mean": gap,
            "val_mean_violation": mean_v,
            "val_max_violation": max_v,
            "lambda_norm": lam_n,
            "mu_norm": mu_n,
        }
        state.history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return state


def with_overrides(cfg: TrainingConfig, **kw) -> TrainingConfig:
    return replace(cfg, **kw)
