"""Sensor graph construction and random-walk transition matrices."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .autodiff import SparseMatrix


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class KernelConfig:
    sigma: float
    tau: float = 0.1

    def __post_init__(self):
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise GraphError(f"kernel sigma must be positive, got {self.sigma}")
        if not 0 <= self.tau < 1:
            raise GraphError(f"kernel tau must lie in [0, 1), got {self.tau}")


@dataclass(frozen=True)
class SensorGraph:
    """Directed weighted sensor graph; ``adjacency[i, j]`` weighs edge i -> j."""

    node_ids: tuple[str, ...]
    adjacency: sp.csr_matrix
    coords: np.ndarray | None = field(default=None, compare=False)

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    def index_of(self) -> dict[str, int]:
        return {nid: i for i, nid in enumerate(self.node_ids)}

    def subgraph(self, node_ids: Sequence[str]) -> "SensorGraph":
        """Induced subgraph on ``node_ids``, in that order."""
        pos = self.index_of()
        try:
            idx = np.array([pos[n] for n in node_ids], dtype=int)
        except KeyError as exc:
            raise GraphError(f"unknown node id {exc.args[0]!r}") from None
        adj = self.adjacency[idx][:, idx].tocsr()
        coords = None if self.coords is None else self.coords[idx]
        return SensorGraph(tuple(node_ids), adj, coords)


@dataclass(frozen=True)
class TransitionPair:
    forward: SparseMatrix
    reverse: SparseMatrix

    @property
    def n_nodes(self) -> int:
        return self.forward.rows

    @cached_property
    def stacked(self) -> SparseMatrix:
        """``[forward; reverse]``, shape [2n, n]: first walk step in both directions."""
        return SparseMatrix(sp.vstack([self.forward.to_scipy(), self.reverse.to_scipy()]))

    @cached_property
    def block(self) -> SparseMatrix:
        """``diag(forward, reverse)``, shape [2n, 2n]: advances both walks one step."""
        return SparseMatrix(sp.block_diag([self.forward.to_scipy(), self.reverse.to_scipy()]))


def sigma_from_distances(distances: Iterable[float]) -> float:
    """Population standard deviation of the finite distances."""
    d = np.asarray([x for x in distances], dtype=float)
    d = d[np.isfinite(d)]
    if d.size == 0:
        raise GraphError("cannot derive sigma from an empty distance list")
    return float(d.std())


def build_adjacency(
    distances: Iterable[tuple[str, str, float]],
    nodes: Sequence[str],
    cfg: KernelConfig | None = None,
    coords: np.ndarray | None = None,
) -> SensorGraph:
    """Thresholded Gaussian kernel ``exp(-d^2 / sigma^2)`` over road distances.

    Pairs absent from ``distances`` get weight 0. The diagonal is fixed to 1.
    With ``cfg=None`` sigma defaults to the std of the supplied distances.
    """
    nodes = tuple(str(n) for n in nodes)
    if len(set(nodes)) != len(nodes):
        raise GraphError("duplicate node ids")
    pos = {n: i for i, n in enumerate(nodes)}
    triples = [(str(s), str(t), float(d)) for s, t, d in distances]
    if cfg is None:
        cfg = KernelConfig(sigma=sigma_from_distances([d for _, _, d in triples]))
    weights: dict[tuple[int, int], float] = {}
    for src, dst, dist in triples:
        if src not in pos:
            raise GraphError(f"unknown node id {src!r}")
        if dst not in pos:
            raise GraphError(f"unknown node id {dst!r}")
        if not dist >= 0:
            raise GraphError(f"negative or invalid distance {dist} for {src}->{dst}")
        w = math.exp(-(dist * dist) / (cfg.sigma * cfg.sigma))
        key = (pos[src], pos[dst])
        # repeated pairs keep the shortest distance
        if w >= cfg.tau and w > 0 and w > weights.get(key, 0.0):
            weights[key] = w
    n = len(nodes)
    for i in range(n):
        weights[(i, i)] = 1.0
    (rows, cols), vals = zip(*weights.keys()), list(weights.values())
    adj = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    adj.sort_indices()
    return SensorGraph(nodes, adj, coords)


def _row_normalize(m: sp.csr_matrix) -> sp.csr_matrix:
    deg = np.asarray(m.sum(axis=1)).ravel()
    inv = np.zeros_like(deg)
    nz = deg > 0
    inv[nz] = 1.0 / deg[nz]
    return (sp.diags(inv) @ m).tocsr()


def transition_matrices(graph: SensorGraph | sp.spmatrix | np.ndarray) -> TransitionPair:
    """Forward walk ``D_out^-1 A`` and reverse walk ``D_in^-1 A^T``.

    Zero-degree rows stay zero.
    """
    adj = graph.adjacency if isinstance(graph, SensorGraph) else graph
    adj = sp.csr_matrix(adj, dtype=np.float64)
    forward = _row_normalize(adj)
    reverse = _row_normalize(adj.T.tocsr())
    return TransitionPair(SparseMatrix(forward), SparseMatrix(reverse))


# -- file interfaces ----------------------------------------------------------


def read_distances(path) -> list[tuple[str, str, float]]:
    """Read ``src_id,dst_id,distance_meters`` rows (header required)."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["src_id", "dst_id", "distance_meters"]:
            raise GraphError(f"{path}: expected header src_id,dst_id,distance_meters")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                out.append((row[0].strip(), row[1].strip(), float(row[2])))
            except (IndexError, ValueError):
                raise GraphError(f"{path}:{lineno}: malformed distance row {row!r}") from None
    return out


def write_distances(path, distances: Iterable[tuple[str, str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["src_id", "dst_id", "distance_meters"])
        for s, t, d in distances:
            w.writerow([s, t, repr(float(d))])


def export_graph(graph: SensorGraph, directory) -> tuple[Path, Path]:
    """Write ``nodes.csv`` and ``edges.csv`` (COO triplets) under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nodes_path, edges_path = directory / "nodes.csv", directory / "edges.csv"
    with open(nodes_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "node_id", "lat", "lon"])
        for i, nid in enumerate(graph.node_ids):
            if graph.coords is not None:
                w.writerow([i, nid, repr(float(graph.coords[i, 0])), repr(float(graph.coords[i, 1]))])
            else:
                w.writerow([i, nid, "", ""])
    coo = graph.adjacency.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(edges_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["src_id", "dst_id", "weight"])
        for k in order:
            w.writerow([graph.node_ids[coo.row[k]], graph.node_ids[coo.col[k]], repr(float(coo.data[k]))])
    return nodes_path, edges_path


def import_graph(directory) -> SensorGraph:
    directory = Path(directory)
    ids, coords = [], []
    with open(directory / "nodes.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            ids.append(row["node_id"])
            if row.get("lat"):
                coords.append((float(row["lat"]), float(row["lon"])))
    pos = {n: i for i, n in enumerate(ids)}
    rows, cols, vals = [], [], []
    with open(directory / "edges.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                rows.append(pos[row["src_id"]])
                cols.append(pos[row["dst_id"]])
            except KeyError as exc:
                raise GraphError(f"edges.csv names unknown node {exc.args[0]!r}") from None
            vals.append(float(row["weight"]))
    n = len(ids)
    adj = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    adj.sort_indices()
    return SensorGraph(tuple(ids), adj, np.array(coords) if len(coords) == n and n else None)
