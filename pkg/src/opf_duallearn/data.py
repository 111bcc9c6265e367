"""Demand sampling, labelled datasets and their JSON-Lines persistence.

Every random quantity is drawn from a named stream derived from one integer
seed, so the dataset, the parameter initialization and the batch shuffling
never share random numbers.
"""

from __future__ import annotations

import json
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .case_io import PowerSystem
from .refsolve import ReferenceSolution, SolverOptions, certify, reference_solve

__all__ = [
    "DATASET_FORMAT",
    "DATASET_VERSION",
    "ResampleCapExceeded",
    "VersionMismatch",
    "CorruptRecord",
    "MissingLabel",
    "Labels",
    "Dataset",
    "stream",
    "generate_loads",
    "split_indices",
    "make_dataset",
    "save_dataset",
    "load_dataset",
]

DATASET_FORMAT = "opf-duallearn-dataset"
DATASET_VERSION = 1
SPLITS = ("train", "val", "test")


class ResampleCapExceeded(RuntimeError):
    pass


class VersionMismatch(ValueError):
    pass


class CorruptRecord(ValueError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line


class MissingLabel(KeyError):
    def __init__(self, sample_id=None, reason: str = "missing reference label"):
        super().__init__(reason if sample_id is None else f"{reason} for sample {sample_id}")
        self.sample_id = sample_id

    def __str__(self):
        return self.args[0]


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for the component ``name`` of run ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(zlib.crc32(name.encode()),))
    return np.random.default_rng(ss)


def generate_loads(sys: PowerSystem, n: int, seed=0) -> np.ndarray:
    """``n`` demand vectors, each component scaled by an independent U(0.8, 1.2).

    ``seed`` may be an integer (the ``"dataset"`` stream is used) or a
    :class:`numpy.random.Generator`.  Returns a complex array (n, N).
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else stream(seed, "dataset")
    ref = sys.arrays.demand
    u = rng.uniform(0.8, 1.2, size=(n, 2, sys.n_buses))
    return ref.real * u[:, 0] + 1j * (ref.imag * u[:, 1])


def split_indices(n: int, seed: int) -> dict:
    """Seeded 8:1:1 partition of ``range(n)``, each part sorted."""
    perm = stream(seed, "split").permutation(n)
    n_val = n // 10
    n_test = n // 10
    n_train = n - n_val - n_test
    parts = (perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :])
    return {name: np.sort(p).astype(np.int64) for name, p in zip(SPLITS, parts)}


@dataclass
class Labels:
    s: np.ndarray
    v: np.ndarray
    cost: np.ndarray
    kkt: np.ndarray


@dataclass
class Dataset:
    case: str
    n_buses: int
    n_branches: int
    seed: int
    r: np.ndarray
    split: dict
    labels: Labels | None = None
    resampled: int = 0

    @property
    def n_samples(self) -> int:
        return len(self.r)

    def mean_label_cost(self, part: str = "train") -> float:
        if self.labels is None:
            raise MissingLabel(reason="dataset has no labels")
        return float(np.mean(self.labels.cost[self.split[part]]))

    def require_labels(self, ids) -> None:
        if self.labels is None:
            raise MissingLabel(int(ids[0]) if len(ids) else None)
        bad = ~np.isfinite(self.labels.cost[ids])
        if np.any(bad):
            raise MissingLabel(int(np.asarray(ids)[bad][0]))


def _solve_one(args):
    sys, r, opts, warm = args
    sol = reference_solve(sys, r, opts, warm_start=warm)
    ok = sol.converged and certify(sys, r, sol.s_star, sol.v_star, opts.cert_tol)[0]
    return sol, ok


def _solve_many(sys, loads, opts, warm, threads):
    jobs = [(sys, r, opts, warm) for r in loads]
    if threads <= 1 or len(jobs) < 2:
        return [_solve_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(_solve_one, jobs, chunksize=max(1, len(jobs) // (4 * threads))))


def make_dataset(sys: PowerSystem, n: int, seed: int, with_labels: bool = False, threads: int = 1,
                 options: SolverOptions | None = None, warm_start: bool = True, progress=None) -> Dataset:
    """Draw ``n`` demand samples and optionally label them.

    Samples whose reference solve does not converge to a certified point are
    replaced by fresh draws; at most ``3 n`` draws are made in total.  The
    result does not depend on ``threads``.
    """
    if n < 10:
        raise ValueError("a dataset needs at least 10 samples")
    rng = stream(seed, "dataset")
    if not with_labels:
        r = generate_loads(sys, n, rng)
        return Dataset(sys.name, sys.n_buses, sys.n_branches, int(seed), r, split_indices(n, seed))

    opts = options or SolverOptions()
    warm = None
    if warm_start:
        nominal = reference_solve(sys, sys.arrays.demand, opts)
        warm = nominal if nominal.converged else None
    cap = 3 * n
    drawn = 0
    loads, sols = [], []
    while len(loads) < n:
        k = min(n - len(loads), cap - drawn)
        if k <= 0:
            raise ResampleCapExceeded(f"only {len(loads)} of {n} samples converged after {drawn} draws")
        batch = generate_loads(sys, k, rng)
        drawn += k
        for r, (sol, ok) in zip(batch, _solve_many(sys, batch, opts, warm, threads)):
            if ok:
                loads.append(r)
                sols.append(sol)
        if progress is not None:
            progress(len(loads), drawn)
    labels = _labels_from(sols)
    return Dataset(sys.name, sys.n_buses, sys.n_branches, int(seed), np.array(loads), split_indices(n, seed),
                   labels, resampled=drawn - n)


def _labels_from(sols: list[ReferenceSolution]) -> Labels:
    return Labels(
        s=np.array([x.s_star for x in sols]),
        v=np.array([x.v_star for x in sols]),
        cost=np.array([x.cost_star for x in sols], dtype=np.float64),
        kkt=np.array([x.kkt_residual for x in sols], dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# persistence

def _pairs(z: np.ndarray) -> list:
    return [[float(a), float(b)] for a, b in zip(z.real, z.imag)]


def _complex(rows, n: int, line: int, key: str) -> np.ndarray:
    arr = np.asarray(rows, dtype=np.float64)
    if arr.shape != (n, 2):
        raise CorruptRecord(line, f"field {key!r} must be {n} [re, im] pairs")
    return arr[:, 0] + 1j * arr[:, 1]


def save_dataset(ds: Dataset, path) -> None:
    """Write ``ds`` as JSON Lines: one header record, then one per sample."""
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "case": ds.case,
        "n_buses": ds.n_buses,
        "n_branches": ds.n_branches,
        "seed": ds.seed,
        "n_samples": ds.n_samples,
        "has_labels": ds.labels is not None,
        "resampled": ds.resampled,
        "split": {k: [int(i) for i in ds.split[k]] for k in SPLITS},
    }
    lines = [json.dumps(header, separators=(",", ":"))]
    for k in range(ds.n_samples):
        rec = {"id": k, "r": _pairs(ds.r[k])}
        if ds.labels is not None:
            L = ds.labels
            rec.update(s=_pairs(L.s[k]), v=_pairs(L.v[k]), cost=float(L.cost[k]), kkt=float(L.kkt[k]))
        lines.append(json.dumps(rec, separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path, sys: PowerSystem | None = None) -> Dataset:
    """Read a dataset file; ``sys``, when given, must match its dimensions."""
    text = Path(path).read_text()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise CorruptRecord(1, "empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorruptRecord(1, f"bad header ({exc.msg})") from None
    if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
        raise VersionMismatch(f"{path}: unsupported dataset format/version")
    n = int(header["n_buses"])
    if sys is not None and (n != sys.n_buses or header.get("n_branches") != sys.n_branches):
        raise VersionMismatch(
            f"{path}: dataset has N={n}, M={header.get('n_branches')}; system has N={sys.n_buses}, M={sys.n_branches}"
        )
    count = int(header["n_samples"])
    labelled = bool(header["has_labels"])
    r = np.empty((count, n), complex)
    if labelled:
        s, v = np.empty((count, n), complex), np.empty((count, n), complex)
        cost, kkt = np.empty(count), np.empty(count)
    for k in range(count):
        line = k + 2
        if line > len(lines):
            raise CorruptRecord(line, f"expected {count} samples, file ends after {k}")
        try:
            rec = json.loads(lines[line - 1])
            if rec["id"] != k:
                raise CorruptRecord(line, f"sample id {rec['id']} out of order")
            r[k] = _complex(rec["r"], n, line, "r")
            if labelled:
                s[k] = _complex(rec["s"], n, line, "s")
                v[k] = _complex(rec["v"], n, line, "v")
                cost[k] = float(rec["cost"])
                kkt[k] = float(rec["kkt"])
        except json.JSONDecodeError as exc:
            raise CorruptRecord(line, f"invalid JSON ({exc.msg})") from None
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, CorruptRecord):
                raise
            raise CorruptRecord(line, f"malformed record ({exc})") from None
    if len(lines) > count + 1:
        raise CorruptRecord(count + 2, "trailing records after the declared sample count")
    split = {k: np.asarray(header["split"][k], dtype=np.int64) for k in SPLITS}
    labels = Labels(s, v, cost, kkt) if labelled else None
    return Dataset(header["case"], n, int(header["n_branches"]), int(header["seed"]), r, split, labels,
                   int(header.get("resampled", 0)))
