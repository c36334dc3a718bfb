"""Multilevel k-way graph partitioning and fixed-size subgraph extraction.

The partitioner follows the usual three phases: heavy-edge matching to
coarsen, recursive greedy graph growing for the initial split, and greedy
boundary refinement (positive-gain moves plus zero-gain balancing moves)
while projecting back to the original graph.

Node ids, not positions, drive every tie-break, so relabelling the input
graph does not change the result.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .graph import SensorGraph, TransitionPair, transition_matrices

logger = logging.getLogger(__name__)

__all__ = [
    "PartitionError",
    "PartitionAssignment",
    "Subgraph",
    "PaddedSubgraph",
    "kway_partition",
    "edge_cut",
    "extract_subgraph",
    "pad_to",
    "max_part_size",
    "write_assignment",
    "read_assignment",
]


class PartitionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PartitionAssignment:
    part_of: np.ndarray
    k: int
    node_ids: tuple[str, ...]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.part_of, minlength=self.k)

    def members(self, part: int) -> tuple[str, ...]:
        """Node ids in ``part``, sorted by id."""
        return tuple(sorted(self.node_ids[i] for i in np.flatnonzero(self.part_of == part)))

    def as_dict(self) -> dict[str, int]:
        return {n: int(p) for n, p in zip(self.node_ids, self.part_of)}


def max_part_size(n_nodes: int, k: int, balance_tol: float) -> int:
    return int(math.floor(math.ceil(n_nodes / k) * (1.0 + balance_tol) + 1e-9))


def _symmetric(adj: sp.spmatrix) -> sp.csr_matrix:
    a = sp.csr_matrix(adj, dtype=np.float64)
    w = a.maximum(a.T).tolil()
    w.setdiag(0)
    w = w.tocsr()
    w.eliminate_zeros()
    w.sort_indices()
    return w


def edge_cut(graph: SensorGraph | sp.spmatrix, part_of: np.ndarray) -> float:
    """Weighted cut of the symmetrized graph, each undirected edge counted once."""
    adj = graph.adjacency if isinstance(graph, SensorGraph) else graph
    w = sp.triu(_symmetric(adj), k=1).tocoo()
    return float(w.data[part_of[w.row] != part_of[w.col]].sum())


class _Level:
    __slots__ = ("indptr", "indices", "weights", "vwgt", "cmap")

    def __init__(self, w: sp.csr_matrix, vwgt: np.ndarray):
        self.indptr = w.indptr
        self.indices = w.indices
        self.weights = w.data
        self.vwgt = vwgt
        self.cmap = None

    @property
    def n(self) -> int:
        return self.vwgt.size

    def neighbors(self, v: int):
        lo, hi = self.indptr[v], self.indptr[v + 1]
        return self.indices[lo:hi], self.weights[lo:hi]

    def matrix(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.weights, self.indices, self.indptr), shape=(self.n, self.n))

    def cut(self, part: np.ndarray) -> float:
        m = sp.triu(self.matrix(), k=1).tocoo()
        return float(m.data[part[m.row] != part[m.col]].sum())


def _coarsen(level: _Level, rng: np.random.Generator, max_vwgt: float) -> _Level | None:
    """Heavy-edge matching; returns None when the graph barely shrinks."""
    n = level.n
    match = np.full(n, -1)
    for v in rng.permutation(n):
        if match[v] >= 0:
            continue
        nb, ew = level.neighbors(v)
        best, best_w = -1, 0.0
        for u, wt in zip(nb, ew):
            if match[u] < 0 and u != v and wt > best_w and level.vwgt[u] + level.vwgt[v] <= max_vwgt:
                best, best_w = u, wt
        if best >= 0:
            match[v], match[best] = best, v
        else:
            match[v] = v
    cmap = np.full(n, -1)
    nc = 0
    for v in range(n):
        if cmap[v] < 0:
            cmap[v] = nc
            cmap[match[v]] = nc
            nc += 1
    if nc > 0.95 * n:
        return None
    proj = sp.csr_matrix((np.ones(n), (np.arange(n), cmap)), shape=(n, nc))
    wc = (proj.T @ level.matrix() @ proj).tolil()
    wc.setdiag(0)
    wc = wc.tocsr()
    wc.eliminate_zeros()
    wc.sort_indices()
    vwgt = np.bincount(cmap, weights=level.vwgt, minlength=nc)
    level.cmap = cmap
    return _Level(wc, vwgt)


def _grow_bisection(level: _Level, verts: np.ndarray, k1: int, k2: int, rng, trials: int = 6):
    """Greedy graph growing: returns the boolean 'side 1' membership over ``verts``."""
    local = {int(v): i for i, v in enumerate(verts)}
    total = level.vwgt[verts].sum()
    target = total * k1 / (k1 + k2)
    best_side, best_cut = None, math.inf
    for _ in range(trials):
        inside = np.zeros(verts.size, dtype=bool)
        gain = np.zeros(verts.size)
        frontier: set[int] = set()
        weight, count = 0.0, 0
        seed = int(rng.integers(verts.size))
        while True:
            if count >= verts.size - k2:
                break
            if count >= k1 and weight + 0.5 * level.vwgt[verts[seed]] > target:
                break
            inside[seed] = True
            weight += level.vwgt[verts[seed]]
            count += 1
            frontier.discard(seed)
            nb, ew = level.neighbors(int(verts[seed]))
            for u, wt in zip(nb, ew):
                j = local.get(int(u))
                if j is not None and not inside[j]:
                    gain[j] += 2 * wt
                    frontier.add(j)
            if frontier:
                seed = max(frontier, key=lambda j: (gain[j] - _ext(level, verts, local, inside, j), -j))
            else:
                outside = np.flatnonzero(~inside)
                if outside.size == 0:
                    break
                seed = int(outside[rng.integers(outside.size)])
        sub_part = inside.astype(int)
        cut = _local_cut(level, verts, local, sub_part)
        if cut < best_cut:
            best_cut, best_side = cut, inside.copy()
    return best_side


def _ext(level, verts, local, inside, j) -> float:
    nb, ew = level.neighbors(int(verts[j]))
    return float(sum(wt for u, wt in zip(nb, ew) if int(u) in local))


def _local_cut(level, verts, local, side) -> float:
    cut = 0.0
    for i, v in enumerate(verts):
        nb, ew = level.neighbors(int(v))
        for u, wt in zip(nb, ew):
            j = local.get(int(u))
            if j is not None and side[j] != side[i]:
                cut += wt
    return cut / 2


def _initial_partition(level: _Level, k: int, rng) -> np.ndarray:
    part = np.zeros(level.n, dtype=int)

    def recurse(verts: np.ndarray, k_here: int, offset: int):
        if k_here == 1:
            part[verts] = offset
            return
        k1 = k_here // 2
        k2 = k_here - k1
        side = _grow_bisection(level, verts, k1, k2, rng)
        recurse(verts[side], k1, offset)
        recurse(verts[~side], k2, offset + k1)

    recurse(np.arange(level.n), k, 0)
    return part


def _connectivity(level: _Level, part: np.ndarray, v: int, k: int) -> np.ndarray:
    nb, ew = level.neighbors(v)
    return np.bincount(part[nb], weights=ew, minlength=k).astype(np.float64)


def _refine(level: _Level, part: np.ndarray, k: int, max_w: float, rng, passes: int = 12) -> np.ndarray:
    """Greedy k-way boundary refinement; the cut never increases across a pass."""
    pw = np.bincount(part, weights=level.vwgt, minlength=k)
    cut = level.cut(part)
    for _ in range(passes):
        before = cut
        moved = 0
        for v in rng.permutation(level.n):
            a = part[v]
            vw = level.vwgt[v]
            if pw[a] - vw <= 0:
                continue
            conn = _connectivity(level, part, v, k)
            internal = conn[a]
            conn[a] = -np.inf
            candidates = np.flatnonzero(conn > 0)
            if candidates.size == 0:
                continue
            # highest connectivity, ties to lighter part then lower index
            b = min(candidates, key=lambda p: (-conn[p], pw[p], p))
            gain = conn[b] - internal
            if pw[b] + vw > max_w:
                continue
            if gain > 0 or (gain == 0 and pw[b] + vw < pw[a]):
                part[v] = b
                pw[a] -= vw
                pw[b] += vw
                cut -= gain
                moved += 1
        cut = level.cut(part)
        assert cut <= before + 1e-9 * max(1.0, abs(before)), "refinement increased the edge cut"
        if moved == 0:
            break
    return part


def _balance(level: _Level, part: np.ndarray, k: int, max_w: float) -> np.ndarray:
    """Move vertices out of overweight parts with the least cut damage."""
    pw = np.bincount(part, weights=level.vwgt, minlength=k)
    guard = 0
    while pw.max() > max_w and guard < 4 * level.n:
        guard += 1
        a = int(np.argmax(pw))
        best = None
        for v in np.flatnonzero(part == a):
            vw = level.vwgt[v]
            conn = _connectivity(level, part, int(v), k)
            for b in range(k):
                if b == a or pw[b] + vw > max_w:
                    continue
                key = (conn[a] - conn[b], pw[b], vw, b)
                if best is None or key < best[0]:
                    best = (key, int(v), b)
        if best is None:
            break
        _, v, b = best
        part[v] = b
        pw[a] -= level.vwgt[v]
        pw[b] += level.vwgt[v]
    return part


def _fill_empty(level: _Level, part: np.ndarray, k: int) -> np.ndarray:
    sizes = np.bincount(part, minlength=k)
    for p in np.flatnonzero(sizes == 0):
        donor = int(np.argmax(np.bincount(part, minlength=k)))
        verts = np.flatnonzero(part == donor)
        losses = [(_connectivity(level, part, int(v), k)[donor], int(v)) for v in verts]
        part[min(losses)[1]] = p
    return part


def kway_partition(
    graph: SensorGraph, k: int, balance_tol: float = 0.10, seed: int = 0
) -> PartitionAssignment:
    """Partition into ``k`` parts minimizing weighted edge cut under a balance bound.

    Parts hold at most ``floor(ceil(N/k) * (1 + balance_tol))`` nodes.
    Isolated nodes are dealt to the lightest parts at the end.
    """
    n = graph.n_nodes
    if k < 1:
        raise PartitionError(f"k must be positive, got {k}")
    if k > n:
        raise PartitionError(f"cannot split {n} nodes into k={k} parts")
    if balance_tol < 0:
        raise PartitionError("balance_tol must be non-negative")
    order = np.array(sorted(range(n), key=lambda i: graph.node_ids[i]), dtype=int)
    w = _symmetric(graph.adjacency)[order][:, order].tocsr()
    w.sort_indices()
    rng = np.random.default_rng(seed)
    max_w = max_part_size(n, k, balance_tol)
    if k == 1:
        return PartitionAssignment(np.zeros(n, dtype=int), 1, graph.node_ids)

    levels = [_Level(w, np.ones(n))]
    stop_at = max(4 * k, 64)
    while levels[-1].n > stop_at:
        cap = 1.5 * n / stop_at
        nxt = _coarsen(levels[-1], rng, max(cap, 2.0))
        if nxt is None:
            break
        levels.append(nxt)

    part = _initial_partition(levels[-1], k, rng)
    for depth in range(len(levels) - 1, -1, -1):
        level = levels[depth]
        if depth < len(levels) - 1:
            part = part[level.cmap]
        part = _balance(level, part, k, max_w)
        part = _refine(level, part, k, max_w, rng)

    fine = levels[0]
    degree = np.diff(fine.indptr)
    isolated = np.flatnonzero(degree == 0)
    if isolated.size:
        part[isolated] = -1
        pw = np.bincount(part[part >= 0], minlength=k)
        for v in isolated:
            p = int(np.argmin(pw))
            part[v] = p
            pw[p] += 1
    part = _fill_empty(fine, part, k)
    part = _balance(fine, part, k, max_w)

    result = np.empty(n, dtype=int)
    result[order] = part
    sizes = np.bincount(result, minlength=k)
    if sizes.max() > max_w or sizes.min() == 0:
        logger.warning("partition balance not met: sizes %s, bound %d", sizes.tolist(), max_w)
    return PartitionAssignment(result, k, graph.node_ids)


# -- subgraphs ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Subgraph:
    """Induced subgraph of one part; core nodes first, then overlap context nodes."""

    node_ids: tuple[str, ...]
    adjacency: sp.csr_matrix
    n_core: int

    @property
    def real_count(self) -> int:
        return len(self.node_ids)


@dataclass(frozen=True, eq=False)
class PaddedSubgraph:
    """A subgraph embedded top-left in an ``n x n`` zero-padded adjacency.

    ``mask`` marks genuine nodes (``index < real_count``); ``loss_mask``
    further drops overlap context nodes, which are inputs only.
    """

    adjacency: sp.csr_matrix
    real_count: int
    node_map: tuple[str, ...]
    mask: np.ndarray
    loss_mask: np.ndarray

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def core_ids(self) -> tuple[str, ...]:
        return self.node_map[: int(self.loss_mask.sum())]

    def supports(self) -> TransitionPair:
        return transition_matrices(self.adjacency)


def _hop_neighbors(graph: SensorGraph, core: np.ndarray, hops: int) -> np.ndarray:
    sym = _symmetric(graph.adjacency)
    seen = np.zeros(graph.n_nodes, dtype=bool)
    seen[core] = True
    frontier = seen.copy()
    for _ in range(hops):
        reach = np.asarray(sym[frontier].sum(axis=0)).ravel() > 0
        frontier = reach & ~seen
        seen |= frontier
    seen[core] = False
    return np.flatnonzero(seen)


def extract_subgraph(
    graph: SensorGraph, assignment: PartitionAssignment, part: int, overlap_hops: int = 0
) -> Subgraph:
    """Induced directed subgraph on one part; edges leaving the part are dropped.

    With ``overlap_hops > 0`` nodes within that many (undirected) hops are
    appended as context.
    """
    if not 0 <= part < assignment.k:
        raise PartitionError(f"part {part} out of range for k={assignment.k}")
    if overlap_hops < 0:
        raise PartitionError("overlap_hops must be non-negative")
    pos = graph.index_of()
    core_ids = assignment.members(part)
    core = np.array([pos[n] for n in core_ids], dtype=int)
    ids = list(core_ids)
    if overlap_hops:
        extra = _hop_neighbors(graph, core, overlap_hops)
        ids += sorted(graph.node_ids[i] for i in extra)
    sub = graph.subgraph(ids)
    return Subgraph(sub.node_ids, sub.adjacency, len(core_ids))


def pad_to(subgraph: Subgraph, n: int) -> PaddedSubgraph:
    real = subgraph.real_count
    if real > n:
        raise PartitionError(
            f"subgraph has {real} nodes but padded size is {n}; use a larger n or more parts"
        )
    adj = sp.csr_matrix(subgraph.adjacency)
    if real < n:
        adj = sp.block_diag([adj, sp.csr_matrix((n - real, n - real))], format="csr")
    adj.sort_indices()
    mask = np.arange(n) < real
    loss_mask = np.arange(n) < subgraph.n_core
    return PaddedSubgraph(adj, real, subgraph.node_ids, mask, loss_mask)


def write_assignment(path, assignment: PartitionAssignment) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "part"])
        for nid, p in zip(assignment.node_ids, assignment.part_of):
            w.writerow([nid, int(p)])


def read_assignment(path, node_ids: Sequence[str] | None = None) -> PartitionAssignment:
    with open(path, newline="") as fh:
        rows = [(r["node_id"], int(r["part"])) for r in csv.DictReader(fh)]
    lookup = dict(rows)
    ids = tuple(node_ids) if node_ids is not None else tuple(n for n, _ in rows)
    missing = [n for n in ids if n not in lookup]
    if missing:
        raise PartitionError(f"assignment lacks node(s) {missing[:5]}")
    part_of = np.array([lookup[n] for n in ids], dtype=int)
    return PartitionAssignment(part_of, int(part_of.max()) + 1, ids)
