"""Radius graphs with neighbor capping and explicit periodic images."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import AtomicSystem
from .errors import GeometryError, GraphError

CELL_LIST_THRESHOLD = 256


@dataclass(frozen=True, eq=False)
class Graph:
    """Directed edges src -> dst; ``edge_vec = R[dst] + shift @ cell - R[src]``."""

    num_nodes: int
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_shift: np.ndarray  # (E, 3) integer image shifts
    edge_vec: np.ndarray
    edge_dist: np.ndarray
    edge_unit: np.ndarray
    cutoff: float
    cell: Optional[np.ndarray] = None

    @property
    def num_edges(self) -> int:
        return int(self.edge_src.size)

    @property
    def neighbor_counts(self) -> np.ndarray:
        return np.bincount(self.edge_src, minlength=self.num_nodes)

    @property
    def offset_vec(self) -> np.ndarray:
        """Cartesian image offset per edge (zeros for non-periodic graphs)."""
        if self.cell is None:
            return np.zeros((self.num_edges, 3))
        return self.edge_shift.astype(np.float64) @ self.cell


def _image_counts(system: AtomicSystem, cutoff: float) -> np.ndarray:
    if not system.periodic:
        return np.zeros(3, dtype=np.int64)
    cell = system.cell
    volume = abs(float(np.linalg.det(cell)))
    if volume < 1e-9:
        raise GraphError(f"{system.id}: degenerate cell (volume {volume:.3g} Å^3)")
    counts = np.zeros(3, dtype=np.int64)
    for k in range(3):
        if not system.pbc[k]:
            continue
        i, j = [a for a in range(3) if a != k]
        width = volume / np.linalg.norm(np.cross(cell[i], cell[j]))
        counts[k] = int(math.ceil(cutoff / width))
    return counts


def _shift_list(counts) -> np.ndarray:
    ranges = [range(-int(c), int(c) + 1) for c in counts]
    return np.array(list(itertools.product(*ranges)), dtype=np.int64)


def _pairs_brute(pos, shifts, cell, cutoff):
    n = len(pos)
    src, dst, sh = [], [], []
    offsets = shifts @ cell if cell is not None else np.zeros((len(shifts), 3))
    for s, off in zip(shifts, offsets):
        vec = pos[None, :, :] + off - pos[:, None, :]
        d2 = np.einsum("ijk,ijk->ij", vec, vec)
        mask = d2 <= cutoff * cutoff
        if not s.any():
            np.fill_diagonal(mask, False)
        i, j = np.nonzero(mask)
        src.append(i)
        dst.append(j)
        sh.append(np.broadcast_to(s, (i.size, 3)))
    return (
        np.concatenate(src).astype(np.int64),
        np.concatenate(dst).astype(np.int64),
        np.concatenate(sh).astype(np.int64).reshape(-1, 3),
    )


def _pairs_cell_list(pos, shifts, cell, cutoff):
    n = len(pos)
    offsets = shifts @ cell if cell is not None else np.zeros((len(shifts), 3))
    img_pos = (pos[None, :, :] + offsets[:, None, :]).reshape(-1, 3)
    img_atom = np.tile(np.arange(n), len(shifts))
    img_shift = np.repeat(np.arange(len(shifts)), n)

    origin = img_pos.min(axis=0)
    img_bin = np.floor((img_pos - origin) / cutoff).astype(np.int64)
    own_bin = np.floor((pos - origin) / cutoff).astype(np.int64)

    buckets = {}
    for k, b in enumerate(map(tuple, img_bin)):
        buckets.setdefault(b, []).append(k)
    buckets = {b: np.array(v, dtype=np.int64) for b, v in buckets.items()}

    atoms_by_bin = {}
    for i, b in enumerate(map(tuple, own_bin)):
        atoms_by_bin.setdefault(b, []).append(i)

    zero_shift = int(np.flatnonzero(~shifts.any(axis=1))[0])
    src, dst, sh = [], [], []
    neigh = list(itertools.product((-1, 0, 1), repeat=3))
    for b, atoms in atoms_by_bin.items():
        cand = [buckets[c] for c in ((b[0] + dx, b[1] + dy, b[2] + dz) for dx, dy, dz in neigh) if c in buckets]
        if not cand:
            continue
        cand = np.concatenate(cand)
        atoms = np.array(atoms, dtype=np.int64)
        vec = img_pos[cand][None, :, :] - pos[atoms][:, None, :]
        d2 = np.einsum("ijk,ijk->ij", vec, vec)
        mask = d2 <= cutoff * cutoff
        mask &= ~((img_atom[cand][None, :] == atoms[:, None]) & (img_shift[cand][None, :] == zero_shift))
        i, j = np.nonzero(mask)
        src.append(atoms[i])
        dst.append(img_atom[cand][j])
        sh.append(shifts[img_shift[cand][j]])
    if not src:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3), np.int64)
    return np.concatenate(src), np.concatenate(dst), np.concatenate(sh).reshape(-1, 3)


def build_radius_graph(
    system: AtomicSystem,
    cutoff: float = 12.0,
    max_neighbors: Optional[int] = 30,
    method: str = "auto",
) -> Graph:
    """All (image) pairs within ``cutoff``, capped to the nearest ``max_neighbors`` per source.

    Ties are broken by (distance, dst index, image shift), giving a total order.
    ``method`` is "auto", "brute" or "cell_list".
    """
    if cutoff <= 0:
        raise GraphError("cutoff must be positive")
    if not system.periodic and system.num_atoms < 2:
        raise GraphError(f"{system.id}: non-periodic system needs at least 2 atoms")
    counts = _image_counts(system, cutoff)
    shifts = _shift_list(counts)
    pos = np.asarray(system.positions)
    cell = system.cell if system.periodic else None

    if method == "auto":
        method = "cell_list" if system.num_atoms > CELL_LIST_THRESHOLD else "brute"
    if method == "brute":
        src, dst, sh = _pairs_brute(pos, shifts, cell, cutoff)
    elif method == "cell_list":
        src, dst, sh = _pairs_cell_list(pos, shifts, cell, cutoff)
    else:
        raise GraphError(f"unknown neighbor search method {method!r}")

    off = sh.astype(np.float64) @ cell if cell is not None else np.zeros((src.size, 3))
    vec = pos[dst] + off - pos[src]
    dist = np.sqrt(np.einsum("ij,ij->i", vec, vec))
    if np.any(dist == 0.0):
        raise GraphError(f"{system.id}: coincident atoms")

    order = np.lexsort((sh[:, 2], sh[:, 1], sh[:, 0], dst, dist, src))
    src, dst, sh, vec, dist = src[order], dst[order], sh[order], vec[order], dist[order]
    if max_neighbors is not None and src.size:
        first = np.searchsorted(src, src, side="left")
        rank = np.arange(src.size) - first
        keep = rank < max_neighbors
        src, dst, sh, vec, dist = src[keep], dst[keep], sh[keep], vec[keep], dist[keep]

    return Graph(
        num_nodes=system.num_atoms,
        edge_src=src,
        edge_dst=dst,
        edge_shift=sh,
        edge_vec=vec,
        edge_dist=dist,
        edge_unit=vec / dist[:, None],
        cutoff=float(cutoff),
        cell=None if cell is None else np.array(cell),
    )


def recompute_edge_geometry(graph: Graph, positions: np.ndarray) -> Graph:
    """Same topology and image shifts, geometry from ``positions``."""
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (graph.num_nodes, 3):
        raise GeometryError(f"positions shape {pos.shape} != ({graph.num_nodes}, 3)")
    vec = pos[graph.edge_dst] + graph.offset_vec - pos[graph.edge_src]
    dist = np.sqrt(np.einsum("ij,ij->i", vec, vec))
    if np.any(dist == 0.0):
        raise GeometryError("zero-length edge after moving atoms")
    return Graph(
        num_nodes=graph.num_nodes,
        edge_src=graph.edge_src,
        edge_dst=graph.edge_dst,
        edge_shift=graph.edge_shift,
        edge_vec=vec,
        edge_dist=dist,
        edge_unit=vec / dist[:, None],
        cutoff=graph.cutoff,
        cell=graph.cell,
    )


@dataclass(frozen=True, eq=False)
class BatchedGraph:
    """Per-system graphs merged into one disconnected graph over batch nodes."""

    edge_src: np.ndarray
    edge_dst: np.ndarray
    offset_vec: np.ndarray
    edge_system: np.ndarray
    cutoff: float

    @property
    def num_edges(self) -> int:
        return int(self.edge_src.size)


def merge_graphs(graphs: Sequence[Graph], node_offsets: Sequence[int]) -> BatchedGraph:
    cutoffs = {g.cutoff for g in graphs}
    if len(cutoffs) != 1:
        raise GraphError(f"graphs built with different cutoffs {sorted(cutoffs)}")
    src = [g.edge_src + off for g, off in zip(graphs, node_offsets)]
    dst = [g.edge_dst + off for g, off in zip(graphs, node_offsets)]
    sys_idx = [np.full(g.num_edges, b, dtype=np.int64) for b, g in enumerate(graphs)]
    return BatchedGraph(
        edge_src=np.concatenate(src).astype(np.int64),
        edge_dst=np.concatenate(dst).astype(np.int64),
        offset_vec=np.concatenate([g.offset_vec for g in graphs]).reshape(-1, 3),
        edge_system=np.concatenate(sys_idx),
        cutoff=cutoffs.pop(),
    )


def degree_histogram(graphs: Sequence[Graph]) -> dict:
    counts = np.concatenate([g.neighbor_counts for g in graphs]) if graphs else np.zeros(0, int)
    values, freq = np.unique(counts, return_counts=True)
    return {int(v): int(f) for v, f in zip(values, freq)}
