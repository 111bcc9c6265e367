"""MATPOWER case files: parsing and conversion to a per-unit grid model."""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

__all__ = [
    "CaseError",
    "MissingBlock",
    "MalformedRow",
    "UnsupportedCostModel",
    "InvalidCase",
    "ZeroImpedanceBranch",
    "DuplicateBranchDirection",
    "RawCase",
    "Bus",
    "Branch",
    "PowerSystem",
    "parse_case",
    "build_system",
    "load_case",
    "builtin_cases",
    "FLOW_LIMIT_SENTINEL",
]

# Limit assigned to branches whose file rating is 0 ("unlimited").
FLOW_LIMIT_SENTINEL = 100.0


class CaseError(ValueError):
    """Base class for case-file problems."""


class MissingBlock(CaseError):
    def __init__(self, name: str):
        super().__init__(f"missing block mpc.{name}")
        self.name = name


class MalformedRow(CaseError):
    def __init__(self, line: int, detail: str = ""):
        super().__init__(f"malformed row at line {line}" + (f": {detail}" if detail else ""))
        self.line = line


class UnsupportedCostModel(CaseError):
    pass


class InvalidCase(CaseError):
    pass


class ZeroImpedanceBranch(CaseError):
    pass


class DuplicateBranchDirection(CaseError):
    pass


# MATPOWER column indices (0-based)
BUS_I, BUS_TYPE, PD, QD, GS, BS, _AREA, VM, VA, _BASE_KV, _ZONE, VMAX, VMIN = range(13)
GEN_BUS, PG, QG, QMAX, QMIN, VG, _MBASE, GEN_STATUS, PMAX, PMIN = range(10)
F_BUS, T_BUS, BR_R, BR_X, BR_B, RATE_A, _RATE_B, _RATE_C, TAP, SHIFT, BR_STATUS, ANGMIN, ANGMAX = range(13)
REF = 3

_MIN_COLS = {"bus": 13, "gen": 10, "branch": 11, "gencost": 4}


@dataclass
class RawCase:
    """Tables exactly as read from a case file (MATPOWER units)."""

    base_mva: float
    bus: np.ndarray
    gen: np.ndarray
    branch: np.ndarray
    gencost: np.ndarray
    name: str = "case"

    def __post_init__(self):
        if not self.base_mva > 0:
            raise InvalidCase(f"baseMVA must be positive, got {self.base_mva}")
        ids = set(self.bus[:, BUS_I].astype(int).tolist())
        for k, b in enumerate(self.gen[:, GEN_BUS].astype(int)):
            if b not in ids:
                raise InvalidCase(f"gen row {k} references unknown bus {b}")
        for k, (f, t) in enumerate(self.branch[:, [F_BUS, T_BUS]].astype(int)):
            if f not in ids or t not in ids:
                raise InvalidCase(f"branch row {k} references unknown bus ({f}, {t})")


_ASSIGN = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")


def _strip_comment(line: str) -> str:
    pos = line.find("%")
    return line if pos < 0 else line[:pos]


def parse_case(text: str, name: str = "case") -> RawCase:
    """Parse the text of a MATPOWER case file."""
    lines = text.splitlines()
    scalars: dict[str, str] = {}
    tables: dict[str, list[tuple[int, list[float]]]] = {}
    k = 0
    while k < len(lines):
        m = _ASSIGN.match(_strip_comment(lines[k]))
        k += 1
        if not m:
            continue
        key, rhs = m.group(1), m.group(2).strip()
        if not rhs.startswith("["):
            scalars[key] = rhs.rstrip(";").strip()
            continue
        rows: list[tuple[int, list[float]]] = []
        body = rhs[1:]
        lineno = k
        while True:
            done = "]" in body
            chunk = body.split("]", 1)[0]
            for piece in chunk.split(";"):
                toks = piece.split()
                if not toks:
                    continue
                try:
                    rows.append((lineno, [float(tok) for tok in toks]))
                except ValueError:
                    raise MalformedRow(lineno, piece.strip()) from None
            if done:
                break
            if k >= len(lines):
                raise MalformedRow(lineno, f"unterminated block mpc.{key}")
            body = _strip_comment(lines[k])
            k += 1
            lineno = k
        tables[key] = rows

    if "baseMVA" not in scalars:
        raise MissingBlock("baseMVA")
    try:
        base_mva = float(scalars["baseMVA"])
    except ValueError:
        raise MalformedRow(0, f"baseMVA = {scalars['baseMVA']!r}") from None

    arrays = {}
    for block in ("bus", "gen", "branch", "gencost"):
        if block not in tables:
            raise MissingBlock(block)
        rows = tables[block]
        width = max((len(r) for _, r in rows), default=_MIN_COLS[block])
        out = np.zeros((len(rows), width))
        for i, (lineno, r) in enumerate(rows):
            if len(r) != width and block != "gencost":
                raise MalformedRow(lineno, f"expected {width} columns, got {len(r)}")
            if len(r) < _MIN_COLS[block]:
                raise MalformedRow(lineno, f"{block} rows need at least {_MIN_COLS[block]} columns")
            out[i, : len(r)] = r
        arrays[block] = out

    gc = arrays["gencost"]
    for i, (lineno, r) in enumerate(tables["gencost"]):
        model, ncost = int(r[0]), int(r[3])
        if model != 2:
            raise UnsupportedCostModel(f"line {lineno}: gencost model {model} (only polynomial model 2)")
        if ncost > 3:
            raise UnsupportedCostModel(f"line {lineno}: polynomial of degree {ncost - 1} (at most 2)")
        if len(r) < 4 + ncost:
            raise MalformedRow(lineno, f"gencost declares {ncost} coefficients, has {len(r) - 4}")
    if gc.shape[0] < arrays["gen"].shape[0]:
        raise InvalidCase("fewer gencost rows than generators")
    return RawCase(base_mva, arrays["bus"], arrays["gen"], arrays["branch"], gc, name=name)


@dataclass(frozen=True)
class Bus:
    """Per-unit bus parameters.

    ``y_shunt`` carries the sign convention of the balance residual
    ``h = s - r - sum(f) + conj(y_shunt) |v|^2``: a MATPOWER shunt ``Gs + jBs``
    (MW/MVAr consumed at 1 p.u.) is stored as ``-(Gs + jBs) / baseMVA``.
    """

    id: int
    y_shunt: complex
    s_min: complex
    s_max: complex
    v_min: float
    v_max: float
    c0: float
    c1: float
    c2: float
    has_generator: bool
    is_reference: bool
    demand: complex = 0j
    v_init: complex = 1 + 0j


@dataclass(frozen=True)
class Branch:
    """Per-unit pi-section branch between bus ids ``from_bus`` and ``to_bus``."""

    from_bus: int
    to_bus: int
    t: complex
    y_line: complex
    y_c_from: complex
    y_c_to: complex
    f_max_from: float
    f_max_to: float
    theta_min: float
    theta_max: float


@dataclass(frozen=True, eq=False)
class PowerSystem:
    """Immutable grid model with vectorized views used by the numeric code."""

    name: str
    base_mva: float
    buses: tuple
    branches: tuple

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise InvalidCase("duplicate bus ids")
        if sum(b.is_reference for b in self.buses) != 1:
            raise InvalidCase("exactly one reference bus required")
        pos = {b: k for k, b in enumerate(ids)}
        for br in self.branches:
            if br.from_bus not in pos or br.to_bus not in pos:
                raise InvalidCase(f"branch ({br.from_bus}, {br.to_bus}) references unknown bus")

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    @property
    def n_ineq(self) -> int:
        return 6 * self.n_buses + 4 * self.n_branches

    @property
    def n_eq(self) -> int:
        return 2 * self.n_buses

    @cached_property
    def bus_index(self) -> dict:
        return {b.id: k for k, b in enumerate(self.buses)}

    @cached_property
    def ref_index(self) -> int:
        return next(k for k, b in enumerate(self.buses) if b.is_reference)

    @cached_property
    def from_idx(self) -> np.ndarray:
        return np.array([self.bus_index[b.from_bus] for b in self.branches], dtype=np.intp)

    @cached_property
    def to_idx(self) -> np.ndarray:
        return np.array([self.bus_index[b.to_bus] for b in self.branches], dtype=np.intp)

    @cached_property
    def adjacency(self) -> tuple:
        """Neighbor lists n(i): bus i itself first, then one entry per incident branch."""
        nbrs = [[k] for k in range(self.n_buses)]
        for f, t in zip(self.from_idx, self.to_idx):
            nbrs[f].append(int(t))
            nbrs[t].append(int(f))
        return tuple(tuple(n) for n in nbrs)

    def _bus_attr(self, name, dtype=np.float64):
        arr = np.array([getattr(b, name) for b in self.buses], dtype=dtype)
        arr.setflags(write=False)
        return arr

    def _branch_attr(self, name, dtype=np.float64):
        arr = np.array([getattr(b, name) for b in self.branches], dtype=dtype).reshape(-1)
        arr.setflags(write=False)
        return arr

    @cached_property
    def arrays(self) -> "SystemArrays":
        return SystemArrays.build(self)

    def permuted(self, perm) -> "PowerSystem":
        """Same grid with bus ``k`` moved to position ``perm.index(k)``.

        ``perm[new] = old``; bus ids are unchanged so branches stay valid.
        """
        perm = [int(p) for p in perm]
        if sorted(perm) != list(range(self.n_buses)):
            raise ValueError("not a permutation")
        return PowerSystem(self.name, self.base_mva, tuple(self.buses[p] for p in perm), self.branches)

    def with_branch_order(self, order) -> "PowerSystem":
        return PowerSystem(self.name, self.base_mva, self.buses, tuple(self.branches[k] for k in order))


@dataclass(frozen=True, eq=False)
class SystemArrays:
    """Column views of bus and branch fields as read-only numpy arrays."""

    y_shunt: np.ndarray
    s_min: np.ndarray
    s_max: np.ndarray
    v_min: np.ndarray
    v_max: np.ndarray
    c0: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    gen_mask: np.ndarray
    demand: np.ndarray
    v_init: np.ndarray
    t: np.ndarray
    y_line: np.ndarray
    y_c_from: np.ndarray
    y_c_to: np.ndarray
    f_max_from: np.ndarray
    f_max_to: np.ndarray
    theta_min: np.ndarray
    theta_max: np.ndarray

    @classmethod
    def build(cls, sys: PowerSystem) -> "SystemArrays":
        c = complex
        return cls(
            y_shunt=sys._bus_attr("y_shunt", c),
            s_min=sys._bus_attr("s_min", c),
            s_max=sys._bus_attr("s_max", c),
            v_min=sys._bus_attr("v_min"),
            v_max=sys._bus_attr("v_max"),
            c0=sys._bus_attr("c0"),
            c1=sys._bus_attr("c1"),
            c2=sys._bus_attr("c2"),
            gen_mask=sys._bus_attr("has_generator"),
            demand=sys._bus_attr("demand", c),
            v_init=sys._bus_attr("v_init", c),
            t=sys._branch_attr("t", c),
            y_line=sys._branch_attr("y_line", c),
            y_c_from=sys._branch_attr("y_c_from", c),
            y_c_to=sys._branch_attr("y_c_to", c),
            f_max_from=sys._branch_attr("f_max_from"),
            f_max_to=sys._branch_attr("f_max_to"),
            theta_min=sys._branch_attr("theta_min"),
            theta_max=sys._branch_attr("theta_max"),
        )


def _angle_bound(deg: float, sign: float) -> float:
    """Convert a file angle bound (degrees) to radians within [-pi/2, pi/2]."""
    if not np.isfinite(deg) or abs(deg) >= 360.0:
        return sign * np.pi / 2
    return float(np.clip(np.deg2rad(deg), -np.pi / 2, np.pi / 2))


def build_system(raw: RawCase, allow_parallel: bool = True) -> PowerSystem:
    """Convert a :class:`RawCase` to per-unit and aggregate generators per bus.

    Parallel branches are kept as separate entries; pass
    ``allow_parallel=False`` to reject a repeated ordered (from, to) pair.
    """
    base = float(raw.base_mva)
    bus_tab, gen_tab = raw.bus, raw.gen
    ids = bus_tab[:, BUS_I].astype(int)

    smin = {b: 0j for b in ids}
    smax = {b: 0j for b in ids}
    coef = {b: np.zeros(3) for b in ids}  # c0, c1, c2
    has_gen = {b: False for b in ids}
    for k, row in enumerate(gen_tab):
        if row[GEN_STATUS] <= 0:
            continue
        b = int(row[GEN_BUS])
        has_gen[b] = True
        smin[b] += complex(row[PMIN], row[QMIN]) / base
        smax[b] += complex(row[PMAX], row[QMAX]) / base
        cost = raw.gencost[k]
        n = int(cost[3])
        poly = cost[4 : 4 + n][::-1]  # ascending: c0, c1, c2
        coef[b][: len(poly)] += poly

    buses = []
    for row in bus_tab:
        b = int(row[BUS_I])
        vmag, vang = float(row[VM]), np.deg2rad(float(row[VA]))
        buses.append(
            Bus(
                id=b,
                y_shunt=-complex(row[GS], row[BS]) / base,
                s_min=smin[b],
                s_max=smax[b],
                v_min=float(row[VMIN]),
                v_max=float(row[VMAX]),
                c0=float(coef[b][0]),
                c1=float(coef[b][1]),
                c2=float(coef[b][2]),
                has_generator=has_gen[b],
                is_reference=int(row[BUS_TYPE]) == REF,
                demand=complex(row[PD], row[QD]) / base,
                v_init=complex(vmag * np.cos(vang), vmag * np.sin(vang)),
            )
        )
        if buses[-1].v_min > buses[-1].v_max:
            raise InvalidCase(f"bus {b}: Vmin > Vmax")

    branches = []
    seen = set()
    ncol = raw.branch.shape[1]
    for k, row in enumerate(raw.branch):
        if row[BR_STATUS] <= 0:
            continue
        f, t = int(row[F_BUS]), int(row[T_BUS])
        if not allow_parallel and (f, t) in seen:
            raise DuplicateBranchDirection(f"branch row {k}: ({f}, {t}) repeated")
        seen.add((f, t))
        z = complex(row[BR_R], row[BR_X])
        if z == 0:
            raise ZeroImpedanceBranch(f"branch row {k} ({f}, {t}) has r = x = 0")
        tap = float(row[TAP]) or 1.0
        ratio = tap * np.exp(1j * np.deg2rad(float(row[SHIFT])))
        ych = 0.5j * float(row[BR_B])
        rate = float(row[RATE_A]) / base if row[RATE_A] > 0 else FLOW_LIMIT_SENTINEL
        amin = float(row[ANGMIN]) if ncol > ANGMIN else -360.0
        amax = float(row[ANGMAX]) if ncol > ANGMAX else 360.0
        if amin == 0.0 and amax == 0.0:
            amin, amax = -360.0, 360.0
        branches.append(
            Branch(
                from_bus=f,
                to_bus=t,
                t=complex(ratio),
                y_line=1.0 / z,
                y_c_from=ych,
                y_c_to=ych,
                f_max_from=rate,
                f_max_to=rate,
                theta_min=_angle_bound(amin, -1.0),
                theta_max=_angle_bound(amax, 1.0),
            )
        )
    return PowerSystem(raw.name, base, tuple(buses), tuple(branches))


def builtin_cases() -> list[str]:
    """Names of the PGLib case files shipped with the package."""
    root = resources.files("opf_duallearn") / "cases"
    return sorted(p.name[:-2] for p in root.iterdir() if p.name.endswith(".m"))


def _resolve(case: str | Path) -> tuple[str, str]:
    p = Path(case)
    if p.is_file():
        return p.stem, p.read_text()
    name = str(case)
    for cand in (name, f"pglib_opf_{name}", f"pglib_opf_case{name}_ieee"):
        res = resources.files("opf_duallearn") / "cases" / f"{cand}.m"
        if res.is_file():
            return cand, res.read_text()
    raise FileNotFoundError(f"no case file or shipped case named {case!r}")


def load_case(case: str | Path) -> PowerSystem:
    """Load a case from a path or a shipped name such as ``pglib_opf_case30_ieee``."""
    name, text = _resolve(case)
    return build_system(parse_case(text, name=name))
