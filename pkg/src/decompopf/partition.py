"""Spatial decomposition of a network into regions and the coupling sets
induced by a region assignment.

Regions are numbered ``0 .. K-1``. All set members are case indices
(bus index, branch index, arc index, load index, generator index), sorted
ascending. A coupling line is stored once; its two directed arcs are
materialised only in ``region_coupling_arcs`` (the arc leaving region k).
"""
from __future__ import annotations

import hashlib
import json
import warnings
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .netmodel import NetworkCase

__all__ = ["RegionAssignment", "Partition", "PartitionError", "induce_partition",
           "auto_partition", "partition_stats", "read_assignment", "write_assignment"]


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class RegionAssignment:
    region_of: dict[int, int]
    K: int

    def __post_init__(self):
        regions = set(self.region_of.values())
        if any(not 0 <= r < self.K for r in regions):
            raise PartitionError(f"region index outside [0, {self.K})")
        if len(regions) != self.K:
            missing = sorted(set(range(self.K)) - regions)
            raise PartitionError(f"empty region(s) {missing}")

    @classmethod
    def single(cls, case: NetworkCase) -> "RegionAssignment":
        return cls({b.id: 0 for b in case.buses}, 1)

    @classmethod
    def from_hints(cls, case: NetworkCase) -> "RegionAssignment":
        """Regions from the ``region_hint`` field (MATPOWER area column)."""
        hints = sorted({b.region_hint for b in case.buses})
        if None in hints:
            raise PartitionError("some buses carry no region hint")
        relabel = {h: k for k, h in enumerate(hints)}
        return cls({b.id: relabel[b.region_hint] for b in case.buses}, len(hints))

    def to_json(self) -> str:
        return json.dumps({str(b): r for b, r in sorted(self.region_of.items())}, indent=1)

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def read_assignment(path) -> RegionAssignment:
    doc = json.loads(Path(path).read_text())
    region_of = {int(b): int(r) for b, r in doc.items()}
    return RegionAssignment(region_of, max(region_of.values()) + 1)


def write_assignment(assignment: RegionAssignment, path) -> None:
    Path(path).write_text(assignment.to_json() + "\n")


@dataclass(frozen=True, eq=False)
class Partition:
    assignment: RegionAssignment
    bus_region: np.ndarray                      # region per bus index
    region_buses: tuple[np.ndarray, ...]        # N^k
    internal_branches: tuple[np.ndarray, ...]   # E^k
    coupling_branches: np.ndarray               # E<->
    coupling_buses: np.ndarray                  # N<->
    region_coupling_branches: tuple[np.ndarray, ...]  # E->k
    region_coupling_buses: tuple[np.ndarray, ...]     # N->k
    region_coupling_arcs: tuple[np.ndarray, ...]      # arcs of E->k leaving region k
    region_loads: tuple[np.ndarray, ...]        # L^k
    region_generators: tuple[np.ndarray, ...]   # G^k
    case_hash: str

    @property
    def K(self) -> int:
        return self.assignment.K

    def __eq__(self, other):
        if not isinstance(other, Partition):
            return NotImplemented
        fields = ("region_buses", "internal_branches", "region_coupling_branches",
                  "region_coupling_buses", "region_coupling_arcs", "region_loads", "region_generators")
        return (self.assignment == other.assignment and self.case_hash == other.case_hash
                and np.array_equal(self.coupling_branches, other.coupling_branches)
                and np.array_equal(self.coupling_buses, other.coupling_buses)
                and all(len(getattr(self, f)) == len(getattr(other, f))
                        and all(np.array_equal(a, b) for a, b in zip(getattr(self, f), getattr(other, f)))
                        for f in fields))

    __hash__ = object.__hash__

    def coupling_arcs(self, n_branch: int) -> np.ndarray:
        """Both orientations of every coupling line: forward arcs then reverse arcs."""
        return np.concatenate([self.coupling_branches, self.coupling_branches + n_branch])


def _components(nodes: set[int], adj: dict[int, list[int]]) -> int:
    seen: set[int] = set()
    count = 0
    for s in sorted(nodes):
        if s in seen:
            continue
        count += 1
        seen.add(s)
        todo = deque([s])
        while todo:
            for j in adj[todo.popleft()]:
                if j in nodes and j not in seen:
                    seen.add(j)
                    todo.append(j)
    return count


def _adjacency(case: NetworkCase) -> dict[int, list[int]]:
    adj: dict[int, list[int]] = {i: [] for i in range(case.n_bus)}
    for f, t in zip(case.branch_from, case.branch_to):
        adj[int(f)].append(int(t))
        adj[int(t)].append(int(f))
    return adj


def induce_partition(case: NetworkCase, assignment: RegionAssignment) -> Partition:
    missing = [b.id for b in case.buses if b.id not in assignment.region_of]
    if missing:
        raise PartitionError(f"buses without a region: {missing[:10]}")
    extra = set(assignment.region_of) - set(case.bus_index)
    if extra:
        raise PartitionError(f"assignment names unknown buses {sorted(extra)[:10]}")
    K = assignment.K
    region = np.array([assignment.region_of[b.id] for b in case.buses], dtype=np.int64)
    rf, rt = region[case.branch_from], region[case.branch_to]
    coupling = np.flatnonzero(rf != rt)
    coupling_buses = np.unique(np.concatenate([case.branch_from[coupling], case.branch_to[coupling]]))
    is_cbus = np.zeros(case.n_bus, dtype=bool)
    is_cbus[coupling_buses] = True
    nb = case.n_branch
    adj = _adjacency(case)
    region_buses, internal, rc_br, rc_bus, rc_arcs, rloads, rgens = [], [], [], [], [], [], []
    for k in range(K):
        buses_k = np.flatnonzero(region == k)
        if len(buses_k) == 0:
            raise PartitionError(f"region {k} is empty")
        region_buses.append(buses_k)
        internal.append(np.flatnonzero((rf == k) & (rt == k)))
        touches = coupling[(rf[coupling] == k) | (rt[coupling] == k)]
        rc_br.append(touches)
        rc_bus.append(buses_k[is_cbus[buses_k]])
        # orientation leaving region k: forward arc if from-end is in k, else reverse arc
        rc_arcs.append(np.where(rf[touches] == k, touches, touches + nb))
        rloads.append(np.flatnonzero(region[case.load_bus] == k) if case.n_load else np.zeros(0, np.int64))
        rgens.append(np.flatnonzero(region[case.gen_bus] == k) if case.n_gen else np.zeros(0, np.int64))
        if _components(set(int(i) for i in buses_k), adj) > 1:
            warnings.warn(f"region {k} does not induce a connected subgraph", stacklevel=2)
    return Partition(assignment=assignment, bus_region=region, region_buses=tuple(region_buses),
                     internal_branches=tuple(internal), coupling_branches=coupling,
                     coupling_buses=coupling_buses, region_coupling_branches=tuple(rc_br),
                     region_coupling_buses=tuple(rc_bus), region_coupling_arcs=tuple(rc_arcs),
                     region_loads=tuple(rloads), region_generators=tuple(rgens),
                     case_hash=case.content_hash)


def partition_stats(p: Partition) -> dict:
    sizes = [int(len(b)) for b in p.region_buses]
    n_bus = sum(sizes)
    n_branch = sum(len(e) for e in p.internal_branches) + len(p.coupling_branches)
    return {
        "K": p.K,
        "region_sizes": sizes,
        "n_coupling_branches": int(len(p.coupling_branches)),
        "n_coupling_buses": int(len(p.coupling_buses)),
        "coupling_fraction": len(p.coupling_branches) / n_branch,
        "max_region_fraction": max(sizes) / n_bus,
    }


# --------------------------------------------------------------------------- automatic partitioning


def _bfs_dist(adj, sources, n):
    dist = np.full(n, np.iinfo(np.int64).max)
    todo = deque()
    for s in sources:
        dist[s] = 0
        todo.append(s)
    while todo:
        i = todo.popleft()
        for j in adj[i]:
            if dist[j] > dist[i] + 1:
                dist[j] = dist[i] + 1
                todo.append(j)
    return dist


def auto_partition(case: NetworkCase, K: int, seed: int = 0, balance: float = 1.5) -> RegionAssignment:
    """Connected K-way partition with a greedily minimised coupling-line count.

    Seeds are spread by farthest-point sampling from a random first bus;
    regions then grow in round-robin order, each absorbing the frontier bus
    with most lines into it. Refinement passes move single boundary buses
    (lowest bus index first) whenever that strictly lowers the number of
    coupling lines, keeps both regions connected and nonempty, and keeps the
    receiving region within ``balance * |N| / K`` buses.
    """
    n = case.n_bus
    if not 1 <= K <= n:
        raise PartitionError(f"K must lie in [1, {n}], got {K}")
    ids = [b.id for b in case.buses]
    if K == 1:
        return RegionAssignment({i: 0 for i in ids}, 1)
    adj = _adjacency(case)
    rng = np.random.default_rng(seed)
    seeds = [int(rng.integers(n))]
    while len(seeds) < K:
        d = _bfs_dist(adj, seeds, n)
        d[seeds] = -1
        seeds.append(int(np.argmax(d)))  # argmax takes the lowest index on ties
    region = np.full(n, -1, dtype=np.int64)
    for k, s in enumerate(seeds):
        region[s] = k
    cap = limit = max(int(np.ceil(balance * n / K)), 1)
    sizes = np.ones(K, dtype=np.int64)
    unassigned = n - K
    while unassigned:
        progressed = False
        for k in range(K):
            if sizes[k] >= cap and np.any(sizes < cap):
                continue
            best, best_links = -1, 0
            for i in np.flatnonzero(region == k):
                for j in adj[int(i)]:
                    if region[j] == -1:
                        links = sum(1 for m in adj[j] if region[m] == k)
                        if links > best_links or (links == best_links and j < best):
                            best, best_links = j, links
            if best >= 0:
                region[best] = k
                sizes[k] += 1
                unassigned -= 1
                progressed = True
                if not unassigned:
                    break
        if not progressed:  # every region at cap with frontier left: lift the cap
            cap = n
    _refine(region, adj, K, limit)
    return RegionAssignment({ids[i]: int(region[i]) for i in range(n)}, K)


def _refine(region: np.ndarray, adj, K: int, cap: int) -> None:
    n = len(region)
    sizes = np.bincount(region, minlength=K)
    moved = True
    while moved:
        moved = False
        for i in range(n):
            a = int(region[i])
            counts = np.zeros(K, dtype=np.int64)
            for j in adj[i]:
                counts[region[j]] += 1
            gains = counts - counts[a]
            gains[a] = 0
            order = [b for b in np.argsort(-gains, kind="stable") if gains[b] > 0]
            for b in order:
                if sizes[a] <= 1 or sizes[b] >= cap:
                    continue
                rest = set(int(m) for m in np.flatnonzero(region == a)) - {i}
                if _components(rest, adj) > 1:
                    continue
                region[i] = b
                sizes[a] -= 1
                sizes[b] += 1
                moved = True
                break
