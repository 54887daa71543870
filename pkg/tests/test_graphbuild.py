import itertools

import numpy as np
import pytest

from jointpt.core import AtomicSystem
from jointpt.errors import GeometryError, GraphError
from jointpt.graphbuild import build_radius_graph, degree_histogram, merge_graphs, recompute_edge_geometry

from conftest import random_molecule, random_rotation


def edge_set(g):
    return {(int(s), int(d), tuple(int(x) for x in sh)) for s, d, sh in zip(g.edge_src, g.edge_dst, g.edge_shift)}


def test_two_atoms():
    g = build_radius_graph(AtomicSystem("p", [1, 1], [[0, 0, 0], [1, 0, 0]]), 12.0, 30)
    assert g.num_edges == 2
    units = {(int(s), tuple(u)) for s, u in zip(g.edge_src, g.edge_unit)}
    assert units == {(0, (1.0, 0.0, 0.0)), (1, (-1.0, 0.0, 0.0))}


def brute_supercell(system, cutoff, reach=3):
    pos, cell = system.positions, system.cell
    out = set()
    for i, j in itertools.product(range(system.num_atoms), repeat=2):
        for sh in itertools.product(range(-reach, reach + 1), repeat=3):
            if i == j and sh == (0, 0, 0):
                continue
            d = np.linalg.norm(pos[j] + np.array(sh) @ cell - pos[i])
            if d <= cutoff:
                out.add((i, j, sh))
    return out


def test_single_atom_cubic_cell():
    s = AtomicSystem("c", [6], [[0.5, 0.5, 0.5]], cell=np.eye(3) * 3.0, pbc=(True, True, True))
    g = build_radius_graph(s, 4.0, 30)
    assert g.num_edges == 6
    assert np.allclose(g.edge_dist, 3.0)
    assert edge_set(g) == brute_supercell(s, 4.0)


def test_periodic_matches_brute_force(mini_periodic):
    for s in mini_periodic:
        assert edge_set(build_radius_graph(s, 3.0, None)) == brute_supercell(s, 3.0)


def test_cell_list_equals_brute(mini_periodic, rng):
    for s in list(mini_periodic)[:10]:
        a = build_radius_graph(s, 3.0, None, method="brute")
        b = build_radius_graph(s, 3.0, None, method="cell_list")
        assert edge_set(a) == edge_set(b)
    big = random_molecule(rng, n=300, spread=6.0, min_dist=0.7)
    a = build_radius_graph(big, 2.5, None, method="brute")
    b = build_radius_graph(big, 2.5, None, method="auto")
    assert edge_set(a) == edge_set(b)
    assert np.array_equal(a.edge_dist, b.edge_dist)


def test_tie_rule():
    s = AtomicSystem("line", [1, 1, 1], [[0, 0, 0], [1, 0, 0], [2, 0, 0]])
    g = build_radius_graph(s, 3.0, 1)
    mid = g.edge_dst[g.edge_src == 1]
    assert mid.tolist() == [0]
    # oracle: nearest by (distance, dst index)
    for i in range(3):
        cands = sorted((abs(i - j), j) for j in range(3) if j != i)
        assert g.edge_dst[g.edge_src == i].tolist() == [cands[0][1]]


def test_invariants(rng):
    for _ in range(10):
        s = random_molecule(rng, n=8)
        g = build_radius_graph(s, 2.5, 4)
        assert np.all(g.edge_dist > 0) and np.all(g.edge_dist <= 2.5)
        assert np.allclose(np.linalg.norm(g.edge_unit, axis=1), 1.0, atol=1e-12, rtol=0)
        assert np.allclose(g.edge_vec, g.edge_dist[:, None] * g.edge_unit, atol=1e-14, rtol=0)
        assert g.neighbor_counts.max() <= 4
        full = build_radius_graph(s, 2.5, None)
        pairs = {(a, b) for a, b, _ in edge_set(full)}
        assert all((b, a) in pairs for a, b in pairs)


def test_wide_cell_equals_open(rng):
    s = random_molecule(rng, n=6)
    cell = np.eye(3) * 20.0
    p = s.replace(positions=s.positions + 10.0, cell=cell, pbc=(True, True, True))
    a = build_radius_graph(s, 3.0, None)
    b = build_radius_graph(p, 3.0, None)
    assert {(x, y) for x, y, _ in edge_set(a)} == {(x, y) for x, y, _ in edge_set(b)}
    assert np.allclose(np.sort(a.edge_dist), np.sort(b.edge_dist), atol=1e-12)


def test_rotation_rotates_units(rng):
    s = random_molecule(rng, n=7)
    rot = random_rotation(rng)
    a = build_radius_graph(s, 3.0, None)
    b = recompute_edge_geometry(a, s.positions @ rot.T)
    assert np.max(np.abs(a.edge_unit @ rot.T - b.edge_unit)) < 1e-10


def test_recompute_geometry(rng):
    s = random_molecule(rng, n=6)
    g = build_radius_graph(s, 3.0, 30)
    same = recompute_edge_geometry(g, s.positions)
    assert np.array_equal(same.edge_vec, g.edge_vec)
    moved = recompute_edge_geometry(g, s.positions + np.array([1.0, -2.0, 0.5]))
    assert np.allclose(moved.edge_vec, g.edge_vec, atol=1e-14, rtol=0)
    new = s.positions + rng.normal(scale=0.05, size=s.positions.shape)
    pert = recompute_edge_geometry(g, new)
    oracle = np.array([new[d] - new[i] for i, d in zip(g.edge_src, g.edge_dst)])
    assert np.max(np.abs(pert.edge_vec - oracle)) < 1e-14
    collapsed = np.zeros_like(new)
    with pytest.raises(GeometryError):
        recompute_edge_geometry(g, collapsed)


def test_errors():
    with pytest.raises(GraphError):
        build_radius_graph(AtomicSystem("one", [1], [[0, 0, 0]]), 3.0)
    flat = AtomicSystem("flat", [1], [[0, 0, 0]], cell=np.diag([1.0, 1.0, 1e-10]), pbc=(True, True, True))
    with pytest.raises(GraphError):
        build_radius_graph(flat, 3.0)


def test_merge_and_histogram(rng):
    graphs = [build_radius_graph(random_molecule(rng, n=4), 3.0, 30) for _ in range(3)]
    merged = merge_graphs(graphs, [0, 4, 8])
    assert merged.num_edges == sum(g.num_edges for g in graphs)
    assert merged.edge_src.max() < 12
    hist = degree_histogram(graphs)
    assert sum(hist.values()) == 12
