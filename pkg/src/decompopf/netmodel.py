"""Power-network cases in per-unit: data model, parsers and writers.

Two input formats are accepted:

* a strict MATPOWER subset (``mpc.baseMVA``, ``mpc.bus``, ``mpc.gen``,
  ``mpc.branch``, ``mpc.gencost`` with polynomial costs of degree <= 2);
* a native JSON document whose numeric fields are already per-unit.

Branches keep their series admittance ``(g, b)`` together with the line
charging ``b_ch``, the off-nominal tap ratio and the phase shift. These are
folded into four per-arc coefficients (see :meth:`Branch.arc_coefficients`)
so every directed arc obeys

    p = gii*vi**2 + vi*vj*(gij*cos(d) + bij*sin(d))
    q = -bii*vi**2 + vi*vj*(gij*sin(d) - bij*cos(d))

with ``d = theta_i - theta_j``. A plain series branch (no charging, unit
tap, no shift) gives ``gii = g, bii = b, gij = -g, bij = -b``, which is the
textbook polar flow model.
"""
from __future__ import annotations

import hashlib
import json
import math
import re
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

__all__ = [
    "Bus", "Branch", "Generator", "CostCurve", "Load", "NetworkCase",
    "CaseError", "CaseParseError", "CaseValidationError",
    "parse_case", "load_case", "builtin_case", "case_stats",
    "to_json", "to_matpower",
]

DATA_DIR = Path(__file__).parent / "data"


class CaseError(ValueError):
    pass


class CaseParseError(CaseError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class CaseValidationError(CaseError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    v_min: float
    v_max: float
    region_hint: int | None = None
    g_sh: float = 0.0
    b_sh: float = 0.0
    is_ref: bool = False


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    g: float
    b: float
    s_max: float = math.inf
    b_ch: float = 0.0
    tap: float = 1.0
    shift: float = 0.0

    def arc_coefficients(self) -> tuple[tuple[float, float, float, float], tuple[float, float, float, float]]:
        """(gii, bii, gij, bij) for the forward and the reverse arc."""
        ys = complex(self.g, self.b)
        tap = self.tap * complex(math.cos(self.shift), math.sin(self.shift))
        ytt = ys + 0.5j * self.b_ch
        yff = ytt / (self.tap * self.tap)
        yft = -ys / tap.conjugate()
        ytf = -ys / tap
        return ((yff.real, yff.imag, yft.real, yft.imag),
                (ytt.real, ytt.imag, ytf.real, ytf.imag))


@dataclass(frozen=True)
class CostCurve:
    c2: float = 0.0
    c1: float = 0.0
    c0: float = 0.0

    def __call__(self, p):
        return (self.c2 * p + self.c1) * p + self.c0


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    cost: CostCurve = field(default_factory=CostCurve)


@dataclass(frozen=True)
class Load:
    bus: int
    p_nom: float
    q_nom: float


@dataclass(frozen=True, eq=False)
class NetworkCase:
    """An immutable, validated network in per-unit on ``base_mva``.

    Index-based arrays used by the numerical code are derived lazily
    (``bus_index``, ``arc_from`` ...) and cached on the instance.
    Buses are indexed in their listed order, branches likewise; arc ``k``
    for ``k < n_branch`` is the forward orientation of branch ``k`` and arc
    ``k + n_branch`` its reverse.
    """

    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...]
    name: str = "case"

    def __post_init__(self):
        _validate(self)

    def __eq__(self, other):
        if not isinstance(other, NetworkCase):
            return NotImplemented
        return (self.base_mva == other.base_mva and self.buses == other.buses
                and self.branches == other.branches and self.generators == other.generators
                and self.loads == other.loads)

    __hash__ = object.__hash__

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def n_load(self) -> int:
        return len(self.loads)

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def bus_ids(self) -> np.ndarray:
        return np.array([b.id for b in self.buses], dtype=np.int64)

    @cached_property
    def ref_bus(self) -> int:
        """Index of the angle reference bus (first flagged, else first generator bus)."""
        for i, b in enumerate(self.buses):
            if b.is_ref:
                return i
        return self.bus_index[self.generators[0].bus] if self.generators else 0

    @cached_property
    def branch_from(self) -> np.ndarray:
        return np.array([self.bus_index[br.from_bus] for br in self.branches], dtype=np.int64)

    @cached_property
    def branch_to(self) -> np.ndarray:
        return np.array([self.bus_index[br.to_bus] for br in self.branches], dtype=np.int64)

    @cached_property
    def arc_from(self) -> np.ndarray:
        return np.concatenate([self.branch_from, self.branch_to])

    @cached_property
    def arc_to(self) -> np.ndarray:
        return np.concatenate([self.branch_to, self.branch_from])

    @cached_property
    def arc_sign(self) -> np.ndarray:
        """+1 for forward arcs, -1 for reverse: the arc angle is sign * branch dtheta."""
        nb = self.n_branch
        return np.concatenate([np.ones(nb), -np.ones(nb)])

    @cached_property
    def arc_coef(self) -> np.ndarray:
        """(2*n_branch, 4) array of (gii, bii, gij, bij)."""
        out = np.zeros((2 * self.n_branch, 4))
        for k, br in enumerate(self.branches):
            fwd, rev = br.arc_coefficients()
            out[k] = fwd
            out[k + self.n_branch] = rev
        return out

    @cached_property
    def arc_smax(self) -> np.ndarray:
        s = np.array([br.s_max for br in self.branches], dtype=float)
        return np.concatenate([s, s])

    @cached_property
    def gen_bus(self) -> np.ndarray:
        return np.array([self.bus_index[g.bus] for g in self.generators], dtype=np.int64)

    @cached_property
    def load_bus(self) -> np.ndarray:
        return np.array([self.bus_index[ld.bus] for ld in self.loads], dtype=np.int64)

    @cached_property
    def v_min(self) -> np.ndarray:
        return np.array([b.v_min for b in self.buses])

    @cached_property
    def v_max(self) -> np.ndarray:
        return np.array([b.v_max for b in self.buses])

    @cached_property
    def g_sh(self) -> np.ndarray:
        return np.array([b.g_sh for b in self.buses])

    @cached_property
    def b_sh(self) -> np.ndarray:
        return np.array([b.b_sh for b in self.buses])

    @cached_property
    def p_min(self) -> np.ndarray:
        return np.array([g.p_min for g in self.generators])

    @cached_property
    def p_max(self) -> np.ndarray:
        return np.array([g.p_max for g in self.generators])

    @cached_property
    def q_min(self) -> np.ndarray:
        return np.array([g.q_min for g in self.generators])

    @cached_property
    def q_max(self) -> np.ndarray:
        return np.array([g.q_max for g in self.generators])

    @cached_property
    def cost_coef(self) -> np.ndarray:
        """(n_gen, 3) array of (c2, c1, c0)."""
        return np.array([[g.cost.c2, g.cost.c1, g.cost.c0] for g in self.generators]).reshape(-1, 3)

    @cached_property
    def nominal_pd(self) -> np.ndarray:
        out = np.zeros(self.n_bus)
        for ld in self.loads:
            out[self.bus_index[ld.bus]] += ld.p_nom
        return out

    @cached_property
    def nominal_qd(self) -> np.ndarray:
        out = np.zeros(self.n_bus)
        for ld in self.loads:
            out[self.bus_index[ld.bus]] += ld.q_nom
        return out

    @cached_property
    def content_hash(self) -> str:
        return hashlib.sha256(to_json(self).encode()).hexdigest()[:16]


def _validate(case: NetworkCase) -> None:
    if not case.base_mva > 0:
        raise CaseValidationError(f"base_mva must be positive, got {case.base_mva}")
    if not case.buses:
        raise CaseValidationError("case has no buses")
    if not case.branches:
        raise CaseValidationError("case has no branches")
    ids = set()
    for b in case.buses:
        if b.id in ids:
            raise CaseValidationError(f"bus {b.id}: duplicate id")
        ids.add(b.id)
        if not (0 < b.v_min <= b.v_max):
            raise CaseValidationError(f"bus {b.id}: voltage bounds must satisfy 0 < v_min <= v_max")
    for k, br in enumerate(case.branches):
        for end in (br.from_bus, br.to_bus):
            if end not in ids:
                raise CaseValidationError(f"branch {k} ({br.from_bus}-{br.to_bus}): unknown bus {end}")
        if br.from_bus == br.to_bus:
            raise CaseValidationError(f"branch {k}: self loop at bus {br.from_bus}")
        if not br.s_max > 0:
            raise CaseValidationError(f"branch {k} ({br.from_bus}-{br.to_bus}): s_max must be positive")
        if not br.tap > 0:
            raise CaseValidationError(f"branch {k}: tap ratio must be positive")
    for k, g in enumerate(case.generators):
        if g.bus not in ids:
            raise CaseValidationError(f"generator {k}: unknown bus {g.bus}")
        if g.p_min > g.p_max or g.q_min > g.q_max:
            raise CaseValidationError(f"generator {k} at bus {g.bus}: inverted bounds")
        if g.cost.c2 < 0:
            raise CaseValidationError(f"generator {k} at bus {g.bus}: negative quadratic cost")
    seen = set()
    for ld in case.loads:
        if ld.bus not in ids:
            raise CaseValidationError(f"load at unknown bus {ld.bus}")
        if ld.bus in seen:
            raise CaseValidationError(f"load at bus {ld.bus}: more than one load record")
        seen.add(ld.bus)
    # connectivity
    adj: dict[int, list[int]] = {i: [] for i in ids}
    for br in case.branches:
        adj[br.from_bus].append(br.to_bus)
        adj[br.to_bus].append(br.from_bus)
    start = case.buses[0].id
    reached = {start}
    todo = deque([start])
    while todo:
        for j in adj[todo.popleft()]:
            if j not in reached:
                reached.add(j)
                todo.append(j)
    if len(reached) != len(ids):
        missing = sorted(ids - reached)
        raise CaseValidationError(f"network is disconnected; unreachable buses {missing[:10]}")


# --------------------------------------------------------------------------- parsing


def parse_case(text: str, name: str = "case") -> NetworkCase:
    """Parse MATPOWER-subset or native JSON case text."""
    if text.lstrip().startswith("{"):
        return _from_json(text, name)
    return _from_matpower(text, name)


def load_case(path) -> NetworkCase:
    path = Path(path)
    return parse_case(path.read_text(), name=path.stem)


def builtin_case(name: str) -> NetworkCase:
    """Load one of the bundled cases: case2, toy6, case9, case30, case118, case300."""
    for suffix in (".json", ".m"):
        p = DATA_DIR / f"{name}{suffix}"
        if p.exists():
            return load_case(p)
    raise FileNotFoundError(f"no bundled case named {name!r}")


def _from_matpower(text: str, name: str) -> NetworkCase:
    lines = text.splitlines()
    tables: dict[str, list[tuple[int, list[float]]]] = {}
    base_mva = None
    i = 0
    while i < len(lines):
        raw = lines[i].split("%", 1)[0].strip()
        i += 1
        m = re.match(r"mpc\.(\w+)\s*=\s*(.*)$", raw)
        if not m:
            continue
        key, rhs = m.group(1), m.group(2).strip()
        if key == "baseMVA":
            try:
                base_mva = float(rhs.rstrip(";"))
            except ValueError:
                raise CaseParseError(f"bad baseMVA value {rhs!r}", i) from None
            continue
        if not rhs.startswith("["):
            if rhs.startswith("{"):  # cell arrays such as bus_name are skipped
                while "}" not in rhs and i < len(lines):
                    rhs = lines[i].split("%", 1)[0]
                    i += 1
            continue
        rows: list[tuple[int, list[float]]] = []
        body = rhs[1:]
        start_line = i
        while True:
            done = "]" in body
            chunk = body.split("]", 1)[0]
            for piece in chunk.split(";"):
                piece = piece.strip()
                if not piece:
                    continue
                try:
                    rows.append((start_line, [float(x) for x in piece.replace(",", " ").split()]))
                except ValueError:
                    raise CaseParseError(f"malformed row in mpc.{key}: {piece!r}", start_line) from None
            if done:
                break
            if i >= len(lines):
                raise CaseParseError(f"unterminated table mpc.{key}", start_line)
            body = lines[i].split("%", 1)[0]
            i += 1
            start_line = i
        tables[key] = rows

    if base_mva is None:
        raise CaseParseError("missing mpc.baseMVA")
    for key in ("bus", "gen", "branch", "gencost"):
        if key not in tables:
            raise CaseParseError(f"missing table mpc.{key}")
    return _from_tables(base_mva, tables, name)


def _need(row: tuple[int, list[float]], n: int, table: str) -> list[float]:
    line, vals = row
    if len(vals) < n:
        raise CaseParseError(f"mpc.{table} row has {len(vals)} columns, need {n}", line)
    return vals


def _from_tables(base: float, tables, name: str) -> NetworkCase:
    buses, loads = [], []
    for row in tables["bus"]:
        r = _need(row, 13, "bus")
        bid, btype = int(r[0]), int(r[1])
        if btype == 4:
            raise CaseParseError(f"isolated bus {bid} (type 4) is not supported", row[0])
        buses.append(Bus(id=bid, v_min=r[12], v_max=r[11], region_hint=int(r[6]),
                         g_sh=r[4] / base, b_sh=r[5] / base, is_ref=btype == 3))
        if r[2] != 0 or r[3] != 0:
            loads.append(Load(bus=bid, p_nom=r[2] / base, q_nom=r[3] / base))

    gen_rows = tables["gen"]
    cost_rows = tables["gencost"]
    if len(cost_rows) < len(gen_rows):
        raise CaseParseError("mpc.gencost has fewer rows than mpc.gen", cost_rows[-1][0] if cost_rows else None)
    gens = []
    for row, crow in zip(gen_rows, cost_rows):
        r = _need(row, 10, "gen")
        c = _need(crow, 4, "gencost")
        if int(c[0]) != 2:
            raise CaseParseError("only polynomial gencost (model 2) is supported", crow[0])
        n = int(c[3])
        if n > 3 or len(c) < 4 + n:
            raise CaseParseError(f"polynomial cost of degree {n - 1} not supported", crow[0])
        coef = [0.0, 0.0, 0.0]
        for k, val in enumerate(c[4:4 + n]):
            coef[3 - n + k] = val
        if r[7] <= 0:  # out of service
            continue
        gens.append(Generator(
            bus=int(r[0]), p_min=r[9] / base, p_max=r[8] / base, q_min=r[4] / base, q_max=r[3] / base,
            cost=CostCurve(c2=coef[0] * base * base, c1=coef[1] * base, c0=coef[2])))

    branches = []
    for row in tables["branch"]:
        r = _need(row, 11, "branch")
        if r[10] <= 0:
            continue
        z = complex(r[2], r[3])
        if z == 0:
            raise CaseParseError("branch with zero impedance", row[0])
        y = 1 / z
        branches.append(Branch(
            from_bus=int(r[0]), to_bus=int(r[1]), g=y.real, b=y.imag,
            s_max=r[5] / base if r[5] > 0 else math.inf, b_ch=r[4],
            tap=r[8] if r[8] != 0 else 1.0, shift=math.radians(r[9])))
    return NetworkCase(base_mva=base, buses=tuple(buses), branches=tuple(branches),
                       generators=tuple(gens), loads=tuple(loads), name=name)


def _num(x, default=None):
    if x is None:
        return default
    return float(x)


def _from_json(text: str, name: str) -> NetworkCase:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseParseError(f"invalid JSON: {exc.msg}", exc.lineno) from None
    try:
        buses = tuple(Bus(id=int(b["id"]), v_min=float(b["v_min"]), v_max=float(b["v_max"]),
                          region_hint=b.get("region_hint"), g_sh=float(b.get("g_sh", 0.0)),
                          b_sh=float(b.get("b_sh", 0.0)), is_ref=bool(b.get("is_ref", False)))
                      for b in doc["buses"])
        branches = tuple(Branch(from_bus=int(br["from_bus"]), to_bus=int(br["to_bus"]),
                                g=float(br["g"]), b=float(br["b"]),
                                s_max=_num(br.get("s_max"), math.inf),
                                b_ch=float(br.get("b_ch", 0.0)), tap=float(br.get("tap", 1.0)),
                                shift=float(br.get("shift", 0.0)))
                         for br in doc["branches"])
        gens = tuple(Generator(bus=int(g["bus"]), p_min=float(g["p_min"]), p_max=float(g["p_max"]),
                               q_min=float(g["q_min"]), q_max=float(g["q_max"]),
                               cost=CostCurve(**{k: float(v) for k, v in g.get("cost", {}).items()}))
                     for g in doc["generators"])
        raw_loads: dict[int, list[float]] = {}
        for ld in doc["loads"]:
            acc = raw_loads.setdefault(int(ld["bus"]), [0.0, 0.0])
            acc[0] += float(ld["p_nom"])
            acc[1] += float(ld["q_nom"])
        loads = tuple(Load(bus=b, p_nom=pq[0], q_nom=pq[1]) for b, pq in raw_loads.items())
        base = float(doc["base_mva"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CaseParseError(f"bad case document: {exc!r}") from None
    return NetworkCase(base_mva=base, buses=buses, branches=branches, generators=gens,
                       loads=loads, name=doc.get("name", name))


# --------------------------------------------------------------------------- writing


def _finite_or_none(x: float):
    return None if math.isinf(x) else x


def to_json(case: NetworkCase) -> str:
    """Canonical native JSON (per-unit). Infinite thermal limits are written as null."""
    doc = {
        "base_mva": case.base_mva,
        "buses": [{"id": b.id, "v_min": b.v_min, "v_max": b.v_max, "region_hint": b.region_hint,
                   "g_sh": b.g_sh, "b_sh": b.b_sh, "is_ref": b.is_ref} for b in case.buses],
        "branches": [{"from_bus": br.from_bus, "to_bus": br.to_bus, "g": br.g, "b": br.b,
                      "s_max": _finite_or_none(br.s_max), "b_ch": br.b_ch, "tap": br.tap,
                      "shift": br.shift} for br in case.branches],
        "generators": [{"bus": g.bus, "p_min": g.p_min, "p_max": g.p_max, "q_min": g.q_min,
                        "q_max": g.q_max, "cost": {"c2": g.cost.c2, "c1": g.cost.c1, "c0": g.cost.c0}}
                       for g in case.generators],
        "loads": [{"bus": ld.bus, "p_nom": ld.p_nom, "q_nom": ld.q_nom} for ld in case.loads],
    }
    return json.dumps(doc, indent=1)


def to_matpower(case: NetworkCase) -> str:
    """Re-emit a case in MATPOWER units (MW, MVAr, ohmic r/x)."""
    base = case.base_mva
    load_at = {ld.bus: ld for ld in case.loads}
    gen_buses = {g.bus for g in case.generators}
    out = [f"function mpc = {case.name}", "mpc.version = '2';", f"mpc.baseMVA = {base!r};", "mpc.bus = ["]
    for b in case.buses:
        ld = load_at.get(b.id)
        pd, qd = (ld.p_nom * base, ld.q_nom * base) if ld else (0.0, 0.0)
        btype = 3 if b.is_ref else (2 if b.id in gen_buses else 1)
        area = b.region_hint if b.region_hint is not None else 1
        out.append(f"\t{b.id}\t{btype}\t{pd!r}\t{qd!r}\t{b.g_sh * base!r}\t{b.b_sh * base!r}\t{area}"
                   f"\t1\t0\t0\t1\t{b.v_max!r}\t{b.v_min!r};")
    out += ["];", "mpc.gen = ["]
    for g in case.generators:
        out.append(f"\t{g.bus}\t0\t0\t{g.q_max * base!r}\t{g.q_min * base!r}\t1\t{base!r}\t1"
                   f"\t{g.p_max * base!r}\t{g.p_min * base!r};")
    out += ["];", "mpc.branch = ["]
    for br in case.branches:
        z = 1 / complex(br.g, br.b)
        rate = 0.0 if math.isinf(br.s_max) else br.s_max * base
        tap = 0.0 if br.tap == 1.0 and br.shift == 0.0 else br.tap
        out.append(f"\t{br.from_bus}\t{br.to_bus}\t{z.real!r}\t{z.imag!r}\t{br.b_ch!r}\t{rate!r}\t0\t0"
                   f"\t{tap!r}\t{math.degrees(br.shift)!r}\t1\t-360\t360;")
    out += ["];", "mpc.gencost = ["]
    for g in case.generators:
        out.append(f"\t2\t0\t0\t3\t{g.cost.c2 / base / base!r}\t{g.cost.c1 / base!r}\t{g.cost.c0!r};")
    out.append("];")
    return "\n".join(out) + "\n"


def case_stats(case: NetworkCase) -> dict[str, int]:
    """Cardinalities (|N|, |E|, |L|, |G|) as a dict."""
    return {"n_bus": case.n_bus, "n_branch": case.n_branch, "n_load": case.n_load, "n_gen": case.n_gen}
