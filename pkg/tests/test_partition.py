import itertools

import numpy as np
import pytest

from decompopf.partition import (PartitionError, RegionAssignment, auto_partition, induce_partition,
                                 partition_stats, read_assignment, write_assignment)


def brute_force(case, region_of):
    """Classify every branch by looking at its two endpoint regions."""
    ids = [b.id for b in case.buses]
    K = max(region_of.values()) + 1
    internal = {k: [] for k in range(K)}
    coupling, cbus = [], set()
    for e, br in enumerate(case.branches):
        a, b = region_of[br.from_bus], region_of[br.to_bus]
        if a == b:
            internal[a].append(e)
        else:
            coupling.append(e)
            cbus.update((br.from_bus, br.to_bus))
    per_region = {k: [e for e in coupling if k in (region_of[case.branches[e].from_bus],
                                                    region_of[case.branches[e].to_bus])] for k in range(K)}
    cb_region = {k: sorted(ids.index(b) for b in cbus if region_of[b] == k) for k in range(K)}
    return internal, coupling, sorted(ids.index(b) for b in cbus), per_region, cb_region


def test_toy6_coupling(toy6, toy6_partition):
    p = toy6_partition
    ids = toy6.bus_ids
    assert sorted(ids[p.coupling_buses]) == [3, 4]
    (e,) = p.coupling_branches
    assert (toy6.branches[e].from_bus, toy6.branches[e].to_bus) == (3, 4)
    st = partition_stats(p)
    assert st["region_sizes"] == [3, 3]
    assert st["n_coupling_branches"] == 1


def test_single_region(case30):
    p = induce_partition(case30, RegionAssignment.single(case30))
    assert len(p.coupling_branches) == 0 and len(p.coupling_buses) == 0
    assert np.array_equal(p.internal_branches[0], np.arange(case30.n_branch))
    assert partition_stats(p)["coupling_fraction"] == 0.0


@pytest.mark.filterwarnings("ignore:region")
def test_random_assignments_match_brute_force(case118):
    rng = np.random.default_rng(7)
    ids = [b.id for b in case118.buses]
    for _ in range(20):
        regions = rng.permutation(np.arange(118) % 4)
        ra = RegionAssignment(dict(zip(ids, regions.tolist())), 4)
        p = induce_partition(case118, ra)
        internal, coupling, cbus, per_region, cb_region = brute_force(case118, ra.region_of)
        assert p.coupling_branches.tolist() == coupling
        assert p.coupling_buses.tolist() == cbus
        for k in range(4):
            assert p.internal_branches[k].tolist() == internal[k]
            assert p.region_coupling_branches[k].tolist() == per_region[k]
            assert p.region_coupling_buses[k].tolist() == cb_region[k]
        assert sum(len(e) for e in p.internal_branches) + len(p.coupling_branches) == case118.n_branch


def test_outgoing_arcs_leave_region(case118):
    ra = auto_partition(case118, 4, seed=1)
    p = induce_partition(case118, ra)
    for k in range(4):
        for a in p.region_coupling_arcs[k]:
            assert p.bus_region[case118.arc_from[a]] == k
            assert p.bus_region[case118.arc_to[a]] != k


def test_pure(case30):
    ra = auto_partition(case30, 3, seed=0)
    assert induce_partition(case30, ra) == induce_partition(case30, ra)


def test_unassigned_bus(toy6):
    with pytest.raises(PartitionError, match="without a region"):
        induce_partition(toy6, RegionAssignment({1: 0, 2: 0, 3: 0, 4: 1, 5: 1}, 2))


def test_empty_region():
    with pytest.raises(PartitionError, match="empty"):
        RegionAssignment({1: 0, 2: 0}, 2)


def test_disconnected_region_warns(toy6):
    ra = RegionAssignment({1: 0, 2: 1, 3: 1, 4: 1, 5: 1, 6: 0}, 2)
    with pytest.warns(UserWarning, match="connected"):
        induce_partition(toy6, ra)


def test_auto_k1(case30):
    ra = auto_partition(case30, 1, seed=3)
    assert set(ra.region_of.values()) == {0}


def test_auto_k_equals_n(toy6):
    p = induce_partition(toy6, auto_partition(toy6, 6, seed=0))
    assert len(p.coupling_branches) == toy6.n_branch


def test_auto_k_too_large(toy6):
    with pytest.raises(PartitionError):
        auto_partition(toy6, 7, seed=0)


def _connected(case, buses):
    buses = set(buses)
    adj = {b: set() for b in buses}
    for br in case.branches:
        if br.from_bus in buses and br.to_bus in buses:
            adj[br.from_bus].add(br.to_bus)
            adj[br.to_bus].add(br.from_bus)
    start = next(iter(buses))
    seen, todo = {start}, [start]
    while todo:
        for j in adj[todo.pop()] - seen:
            seen.add(j)
            todo.append(j)
    return seen == buses


def test_toy6_exhaustive_optimum(toy6):
    ids = [b.id for b in toy6.buses]
    best = min(
        len(induce_partition(toy6, RegionAssignment({b: int(b in side) for b in ids}, 2)).coupling_branches)
        for r in range(1, 6) for side in itertools.combinations(ids, r)
        if _connected(toy6, side) and _connected(toy6, set(ids) - set(side)))
    assert best == 1
    for seed in range(10):
        p = induce_partition(toy6, auto_partition(toy6, 2, seed=seed))
        assert len(p.coupling_branches) <= 2


@pytest.mark.parametrize("K", [2, 4, 8])
def test_auto_regions_connected_and_deterministic(case118, K):
    a = auto_partition(case118, K, seed=5)
    assert a == auto_partition(case118, K, seed=5)
    for k in range(K):
        assert _connected(case118, [b for b, r in a.region_of.items() if r == k])


def test_auto_stats_recount(case118):
    p = induce_partition(case118, auto_partition(case118, 4, seed=0))
    st = partition_stats(p)
    counts = np.bincount(list(p.assignment.region_of.values()), minlength=4)
    assert st["region_sizes"] == counts.tolist()
    cut = sum(p.assignment.region_of[b.from_bus] != p.assignment.region_of[b.to_bus] for b in case118.branches)
    assert st["n_coupling_branches"] == cut


def test_assignment_file_round_trip(tmp_path, case30):
    ra = auto_partition(case30, 3, seed=2)
    write_assignment(ra, tmp_path / "a.json")
    assert read_assignment(tmp_path / "a.json") == ra
