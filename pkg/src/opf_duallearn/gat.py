"""Graph attention network mapping bus demand to generation and voltage.

Inputs per bus are the demand ``r_i`` and the static bus features ``w_i``;
inputs per directed edge are the static branch features ``w_ij`` plus a
direction flag.  Every bus attends over its incident branches and itself.
All arrays carry a leading batch axis ``B`` inside the model.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .case_io import PowerSystem

__all__ = [
    "GatConfig",
    "GatModel",
    "NodeState",
    "init_parameters",
    "parameter_shapes",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_FORMAT = "opf-duallearn-gat"
CHECKPOINT_VERSION = 1
N_NODE_INPUTS = 13  # Re r, Im r, y_shunt (2), s_min (2), s_max (2), v_min, v_max, c0, c1, c2
N_EDGE_INPUTS = 13  # t (2), y_c_from (2), y_c_to (2), y_line (2), f_max (2), theta (2), direction


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class GatConfig:
    n_layers: int = 20
    d_node: int = 64
    d_edge: int = 64
    d_attn: int = 128
    mlp_hidden: int = 64
    n_heads: int = 1
    dropout: float = 0.0
    v_offset: float = 1.0
    out_init_scale: float = 0.01
    normalize_inputs: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "d_node", "d_edge", "d_attn", "mlp_hidden", "n_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


def _mlp_shapes(prefix, d_in, hidden, d_out):
    return {
        f"{prefix}.W1": (hidden, d_in),
        f"{prefix}.b1": (hidden,),
        f"{prefix}.W2": (d_out, hidden),
        f"{prefix}.b2": (d_out,),
    }


def _head_prefix(cfg: GatConfig, layer: int, head: int) -> str:
    return f"L{layer}" if cfg.n_heads == 1 else f"L{layer}.h{head}"


def parameter_shapes(cfg: GatConfig) -> dict:
    """Canonical parameter names and shapes, in a fixed order."""
    dn, de, da, hid = cfg.d_node, cfg.d_edge, cfg.d_attn, cfg.mlp_hidden
    shapes = {}
    shapes.update(_mlp_shapes("A_NI", N_NODE_INPUTS, hid, dn))
    shapes.update(_mlp_shapes("A_EI", N_EDGE_INPUTS, hid, de))
    shapes["self_loop"] = (de,)
    for layer in range(cfg.n_layers):
        for head in range(cfg.n_heads):
            p = _head_prefix(cfg, layer, head)
            shapes[f"{p}.A_NF"] = (dn, dn)
            shapes[f"{p}.A_EF"] = (da, de + 2 * dn)
            shapes[f"{p}.a_ATT"] = (da,)
        if cfg.n_heads > 1:
            shapes[f"L{layer}.A_HEAD"] = (dn, cfg.n_heads * dn)
        shapes.update(_mlp_shapes(f"L{layer}.A_MLP", dn, hid, dn))
    shapes.update(_mlp_shapes("A_OUT_gen", dn, hid, 4))
    shapes.update(_mlp_shapes("A_OUT_load", dn, hid, 4))
    return shapes


def init_parameters(cfg: GatConfig, seed: int | None = None) -> dict:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("b"):
            params[name] = np.zeros(shape)
            continue
        if len(shape) == 2:
            fan_out, fan_in = shape
        else:
            fan_in, fan_out = shape[0], 1
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        if name.startswith("A_OUT_") and leaf == "W2":
            # start near the flat profile s = 0, v = v_offset
            bound *= cfg.out_init_scale
        params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def _standardize(x: np.ndarray) -> np.ndarray:
    """Zero mean, unit spread per column; constant columns become zero."""
    if x.shape[0] == 0:
        return x
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    return (x - mean) / np.where(std > 0, std, 1.0)


@dataclass
class NodeState:
    """Node embeddings ``x`` (B, N, d_n) and edge embeddings (E, d_e)."""

    x: object
    edges: object


class GatModel:
    """Static graph data for one system plus the forward computation."""

    def __init__(self, sys: PowerSystem, cfg: GatConfig | None = None):
        self.sys = sys
        self.cfg = cfg or GatConfig()
        A = sys.arrays
        n, m = sys.n_buses, sys.n_branches
        self.n = n
        self.node_static = np.column_stack(
            [A.y_shunt.real, A.y_shunt.imag, A.s_min.real, A.s_min.imag, A.s_max.real, A.s_max.imag,
             A.v_min, A.v_max, A.c0, A.c1, A.c2]
        )
        w = np.column_stack(
            [A.t.real, A.t.imag, A.y_c_from.real, A.y_c_from.imag, A.y_c_to.real, A.y_c_to.imag,
             A.y_line.real, A.y_line.imag, A.f_max_from, A.f_max_to, A.theta_min, A.theta_max]
        ).reshape(m, 12)
        self.r_scale = 1.0
        if self.cfg.normalize_inputs:
            # statistics over all buses / branches are permutation invariant
            self.node_static = _standardize(self.node_static)
            w = _standardize(w)
            self.r_scale = max(float(np.max(np.abs(A.demand.real))), float(np.max(np.abs(A.demand.imag))), 1e-12)
        self.edge_static = np.vstack([np.column_stack([w, np.ones(m)]), np.column_stack([w, -np.ones(m)])])
        loops = np.arange(n)
        # edge k: bus recv[k] attends to bus send[k]; branch edges first, then self-loops
        self.recv = np.concatenate([sys.from_idx, sys.to_idx, loops]).astype(np.intp)
        self.send = np.concatenate([sys.to_idx, sys.from_idx, loops]).astype(np.intp)
        self.n_edges = len(self.recv)
        self.gen_mask = A.gen_mask.astype(np.float64)

    # -- building blocks -------------------------------------------------

    def _dropout(self, h, rng):
        rate = self.cfg.dropout
        if rng is None or rate == 0.0:
            return h
        keep = rng.random(ad.value_of(h).shape) >= rate
        return ad.mul(h, keep / (1.0 - rate))

    def _linear(self, x, W, b=None):
        y = ad.matmul(x, ad.transpose(W))
        if b is None:
            return y
        return ad.add(y, ad.broadcast_to(b, ad.value_of(y).shape))

    def _mlp(self, params, prefix, x, rng=None):
        h = ad.relu(self._linear(x, params[f"{prefix}.W1"], params[f"{prefix}.b1"]))
        h = self._dropout(h, rng)
        return self._linear(h, params[f"{prefix}.W2"], params[f"{prefix}.b2"])

    def node_inputs(self, r_re, r_im) -> np.ndarray:
        r_re = np.atleast_2d(np.asarray(r_re, dtype=np.float64))
        r_im = np.atleast_2d(np.asarray(r_im, dtype=np.float64))
        r_re = r_re / self.r_scale
        r_im = r_im / self.r_scale
        b = r_re.shape[0]
        static = np.broadcast_to(self.node_static, (b,) + self.node_static.shape)
        return np.concatenate([r_re[..., None], r_im[..., None], static], axis=-1)

    def embed_inputs(self, params, r_re, r_im, rng=None) -> NodeState:
        x0 = self._mlp(params, "A_NI", self.node_inputs(r_re, r_im), rng)
        xe = self._mlp(params, "A_EI", self.edge_static, rng)
        loops = ad.broadcast_to(ad.reshape(params["self_loop"], (1, self.cfg.d_edge)), (self.n, self.cfg.d_edge))
        return NodeState(x=x0, edges=ad.concat([xe, loops], axis=0))

    def attention_logits(self, params, prefix, state: NodeState):
        """Unnormalized scores ``<a_ATT, relu(A_EF [x_ij; x_i; x_j])>`` per edge."""
        de, dn = self.cfg.d_edge, self.cfg.d_node
        A_EF = params[f"{prefix}.A_EF"]
        # split A_EF by the blocks of [x_ij; x_i; x_j]
        eye = np.eye(de + 2 * dn)
        A_e = ad.matmul(A_EF, eye[:, :de])
        A_r = ad.matmul(A_EF, eye[:, de : de + dn])
        A_s = ad.matmul(A_EF, eye[:, de + dn :])
        x = state.x
        b = ad.value_of(x).shape[0]
        pe = self._linear(state.edges, A_e)
        pr = ad.index(self._linear(x, A_r), self.recv, axis=1)
        ps = ad.index(self._linear(x, A_s), self.send, axis=1)
        pre = ad.add(ad.add(pr, ps), ad.broadcast_to(pe, (b,) + ad.value_of(pe).shape))
        return ad.matmul(ad.relu(pre), params[f"{prefix}.a_ATT"])

    def attention_coeffs(self, params, prefix, state: NodeState):
        """Softmax-normalized attention weights per edge, shape (B, E)."""
        return ad.segment_softmax(self.attention_logits(params, prefix, state), self.recv, self.n, axis=1)

    def _aggregate(self, params, prefix, state: NodeState):
        x = state.x
        b, n, dn = ad.value_of(x).shape
        alpha = self.attention_coeffs(params, prefix, state)
        alpha = ad.broadcast_to(ad.reshape(alpha, (b, self.n_edges, 1)), (b, self.n_edges, dn))
        msg = ad.mul(ad.index(x, self.send, axis=1), alpha)
        agg = ad.segment_sum(msg, self.recv, n, axis=1)
        return self._linear(agg, params[f"{prefix}.A_NF"])

    def layer_forward(self, params, layer: int, state: NodeState, rng=None) -> NodeState:
        cfg = self.cfg
        if cfg.n_heads == 1:
            z = self._aggregate(params, _head_prefix(cfg, layer, 0), state)
        else:
            zs = [self._aggregate(params, _head_prefix(cfg, layer, h), state) for h in range(cfg.n_heads)]
            z = self._linear(ad.concat(zs, axis=-1), params[f"L{layer}.A_HEAD"])
        upd = self._mlp(params, f"L{layer}.A_MLP", ad.add(state.x, z), rng)
        return NodeState(x=ad.add(state.x, upd), edges=state.edges)

    def forward(self, params, r_re, r_im, rng=None):
        """Predict ``(s_re, s_im, v_re, v_im)``, each of shape (B, N) or (N,).

        ``params`` values may be arrays or tape variables.  ``rng`` enables
        dropout when the configured rate is positive.
        """
        squeeze = np.ndim(r_re) == 1
        state = self.embed_inputs(params, r_re, r_im, rng)
        for layer in range(self.cfg.n_layers):
            state = self.layer_forward(params, layer, state, rng)
        out_g = self._mlp(params, "A_OUT_gen", state.x, rng)
        out_l = self._mlp(params, "A_OUT_load", state.x, rng)
        mask = self.gen_mask[:, None]
        out = ad.add(ad.mul(out_g, mask), ad.mul(out_l, 1.0 - mask))
        eye = np.eye(4)
        s_re = ad.mul(ad.matmul(out, eye[0]), self.gen_mask)
        s_im = ad.mul(ad.matmul(out, eye[1]), self.gen_mask)
        v_re = ad.add(ad.matmul(out, eye[2]), self.cfg.v_offset)
        v_im = ad.matmul(out, eye[3])
        outs = (s_re, s_im, v_re, v_im)
        if squeeze:
            outs = tuple(ad.reshape(o, (self.n,)) for o in outs)
        return outs

    def predict(self, params, r: np.ndarray, batch: int = 256):
        """Numeric forward pass for complex demand ``r`` (S, N) -> complex ``(s, v)``."""
        r = np.atleast_2d(np.asarray(r, dtype=complex))
        s = np.empty_like(r)
        v = np.empty_like(r)
        for k in range(0, len(r), batch):
            rb = r[k : k + batch]
            sr, si, vr, vi = self.forward(params, rb.real, rb.imag)
            s[k : k + batch] = sr + 1j * si
            v[k : k + batch] = vr + 1j * vi
        return s, v


def _system_signature(sys: PowerSystem) -> dict:
    return {"name": sys.name, "n_buses": sys.n_buses, "n_branches": sys.n_branches}


def save_checkpoint(path, cfg: GatConfig, params: dict, sys: PowerSystem, extra: dict | None = None) -> None:
    """Write a versioned JSON checkpoint with flat row-major parameter arrays."""
    shapes = parameter_shapes(cfg)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(cfg),
        "seed": cfg.seed,
        "system": _system_signature(sys),
        "params": {
            name: {"shape": list(shape), "data": [float(x) for x in np.asarray(params[name]).ravel()]}
            for name, shape in shapes.items()
        },
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n")


def load_checkpoint(path, sys: PowerSystem | None = None):
    """Read a checkpoint; returns ``(config, params, doc)``.

    Raises :class:`CheckpointError` on a format/version problem or when
    ``sys`` does not match the system the checkpoint was trained on.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc})") from None
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format/version")
    cfg = GatConfig(**doc["config"])
    if sys is not None:
        sig = doc.get("system", {})
        mine = _system_signature(sys)
        if sig.get("n_buses") != mine["n_buses"] or sig.get("n_branches") != mine["n_branches"]:
            raise CheckpointError(
                f"checkpoint was trained on {sig.get('name')} (N={sig.get('n_buses')}, M={sig.get('n_branches')}),"
                f" not {mine['name']} (N={mine['n_buses']}, M={mine['n_branches']})"
            )
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        entry = doc["params"].get(name)
        if entry is None or tuple(entry["shape"]) != shape:
            raise CheckpointError(f"{path}: parameter {name} missing or misshapen")
        params[name] = np.array(entry["data"], dtype=np.float64).reshape(shape)
    return cfg, params, doc
