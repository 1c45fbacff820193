"""Graph, feature and label containers plus their plain-text loaders.

File formats
------------
Edge list  : one "u v" pair per line (whitespace separated, non-negative
             integers), optional "#nodes N" header, "#" comment lines ignored.
Features   : sparse triplets "node feature_index value", one nonzero per line.
Labels     : "node l1,l2,..." lines, one per labeled node.
Name map   : optional "name<TAB>id" lines for string-named datasets.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import stream

logger = logging.getLogger(__name__)

GIVEN_FIXED = "given-fixed"
LEARNED = "learned"

_TAG_FEATURE_INIT = 901


def _iter_lines(source):
    """Yield (line_number, line) from a path, a string of text, or a file object."""
    if isinstance(source, (str, Path)) and "\n" not in str(source):
        with open(source, "r", encoding="utf-8") as fh:
            yield from enumerate(fh, start=1)
    elif isinstance(source, str):
        yield from enumerate(source.splitlines(), start=1)
    else:
        yield from enumerate(source, start=1)


@dataclass
class Graph:
    """Undirected graph over dense integer node ids.

    Adjacency lists are sorted, deduplicated and symmetric; arrays are
    frozen after construction so a loaded graph is safe to share across
    worker threads.
    """

    num_nodes: int
    adjacency: list = field(repr=False)

    def __post_init__(self):
        self.adjacency = [np.asarray(a, dtype=np.int64) for a in self.adjacency]
        for a in self.adjacency:
            a.flags.writeable = False

    @property
    def num_edges(self) -> int:
        return sum(len(a) for a in self.adjacency) // 2

    def neighbors(self, v: int) -> np.ndarray:
        return self.adjacency[v]

    def degree(self, v: int) -> int:
        return len(self.adjacency[v])

    def degrees(self) -> np.ndarray:
        return np.array([len(a) for a in self.adjacency], dtype=np.int64)

    def validate(self):
        """Check adjacency symmetry, sortedness, and absence of loops/duplicates."""
        if len(self.adjacency) != self.num_nodes:
            raise ValueError("adjacency length does not match num_nodes")
        neighbor_sets = [set(a.tolist()) for a in self.adjacency]
        for u, a in enumerate(self.adjacency):
            if len(a) != len(neighbor_sets[u]):
                raise ValueError(f"duplicate neighbor entries at node {u}")
            if np.any(a[:-1] >= a[1:]):
                raise ValueError(f"adjacency of node {u} is not sorted")
            if u in neighbor_sets[u]:
                raise ValueError(f"self-loop at node {u}")
            for v in a:
                if v < 0 or v >= self.num_nodes:
                    raise ValueError(f"neighbor {v} of node {u} out of range")
                if u not in neighbor_sets[v]:
                    raise ValueError(f"asymmetric edge ({u}, {v})")


@dataclass
class FeatureTable:
    """Dense per-node feature vectors; `source` is "given-fixed" or "learned"."""

    rows: np.ndarray
    source: str = GIVEN_FIXED

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise ValueError("feature rows must be a 2-d array")
        if self.source not in (GIVEN_FIXED, LEARNED):
            raise ValueError(f"unknown feature source {self.source!r}")
        if self.source == GIVEN_FIXED:
            self.rows.flags.writeable = False

    @property
    def num_nodes(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


class LabelTable:
    """Per-node label sets; single-label datasets store exactly one per node."""

    def __init__(self, assignment: dict, num_classes: int | None = None):
        self._assignment = {int(v): tuple(sorted(set(int(l) for l in ls)))
                            for v, ls in assignment.items()}
        max_label = max((l for ls in self._assignment.values() for l in ls), default=-1)
        if num_classes is None:
            num_classes = max_label + 1
        elif max_label >= num_classes:
            raise ValueError(f"label {max_label} outside [0, {num_classes})")
        self.num_classes = num_classes
        for v, ls in self._assignment.items():
            if not ls:
                raise ValueError(f"node {v} listed without labels")
            if any(l < 0 for l in ls):
                raise ValueError(f"negative label id for node {v}")

    def labels_of(self, v: int) -> tuple:
        """Label set of node v; empty tuple when v is unlabeled."""
        return self._assignment.get(int(v), ())

    def labeled_ids(self) -> np.ndarray:
        return np.array(sorted(self._assignment), dtype=np.int64)

    @property
    def num_labeled(self) -> int:
        return len(self._assignment)

    @property
    def is_multilabel(self) -> bool:
        return any(len(ls) > 1 for ls in self._assignment.values())

    def single_labels(self, ids) -> np.ndarray:
        """Labels of `ids` as a flat int array; requires single-label data."""
        out = np.empty(len(ids), dtype=np.int64)
        for i, v in enumerate(ids):
            ls = self.labels_of(v)
            if len(ls) != 1:
                raise ValueError(f"node {v} does not carry exactly one label")
            out[i] = ls[0]
        return out

    def indicator(self, ids) -> np.ndarray:
        """Binary (len(ids), num_classes) membership matrix."""
        out = np.zeros((len(ids), self.num_classes), dtype=np.float64)
        for i, v in enumerate(ids):
            for l in self.labels_of(v):
                out[i, l] = 1.0
        return out


def load_edge_list(source) -> Graph:
    """Parse an undirected graph from edge-list text.

    Edges are symmetrized and deduplicated regardless of the direction they
    are listed in. `num_nodes` is 1 + the largest id seen unless a larger
    "#nodes N" header is present.
    """
    header_nodes = None
    edges = set()
    max_id = -1
    for lineno, raw in _iter_lines(source):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.lower().startswith("nodes"):
                try:
                    header_nodes = int(body.split()[1])
                except (IndexError, ValueError):
                    raise ValueError(f"line {lineno}: malformed '#nodes N' header: {line!r}")
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"line {lineno}: expected 'u v', got {line!r}")
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise ValueError(f"line {lineno}: non-integer node id in {line!r}")
        if u < 0 or v < 0:
            raise ValueError(f"line {lineno}: negative node id in {line!r}")
        if u == v:
            raise ValueError(f"line {lineno}: self-loop at node {u}")
        max_id = max(max_id, u, v)
        edges.add((min(u, v), max(u, v)))

    num_nodes = max_id + 1
    if header_nodes is not None:
        if header_nodes < num_nodes:
            raise ValueError(f"'#nodes {header_nodes}' header below largest id {max_id}")
        num_nodes = header_nodes

    adjacency = [[] for _ in range(num_nodes)]
    for u, v in edges:
        adjacency[u].append(v)
        adjacency[v].append(u)
    return Graph(num_nodes, [np.sort(np.array(a, dtype=np.int64)) for a in adjacency])


def write_edge_list(graph: Graph, path):
    """Write a graph back to edge-list text (one line per undirected edge)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#nodes {graph.num_nodes}\n")
        for u in range(graph.num_nodes):
            for v in graph.neighbors(u):
                if u < v:
                    fh.write(f"{u} {v}\n")


def load_features(source, dim: int, num_nodes: int) -> FeatureTable:
    """Load a dense FeatureTable from sparse "node feature_index value" triplets.

    Entries not present in the stream are zero; rows are fixed after load.
    """
    rows = np.zeros((num_nodes, dim), dtype=np.float64)
    for lineno, raw in _iter_lines(source):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"line {lineno}: expected 'node feat value', got {line!r}")
        try:
            v, j = int(parts[0]), int(parts[1])
            x = float(parts[2])
        except ValueError:
            raise ValueError(f"line {lineno}: malformed triplet {line!r}")
        if not 0 <= v < num_nodes:
            raise ValueError(f"line {lineno}: node id {v} outside [0, {num_nodes})")
        if not 0 <= j < dim:
            raise ValueError(f"line {lineno}: feature index {j} outside [0, {dim})")
        rows[v, j] = x
    return FeatureTable(rows, source=GIVEN_FIXED)


def init_learned_features(num_nodes: int, dim: int, seed: int) -> FeatureTable:
    """Trainable feature rows drawn i.i.d. uniform on [-sqrt(6/dim), +sqrt(6/dim)]."""
    if dim <= 0:
        raise ValueError("feature dim must be positive")
    bound = np.sqrt(6.0 / dim)
    rows = stream(seed, _TAG_FEATURE_INIT).uniform(-bound, bound, size=(num_nodes, dim))
    return FeatureTable(rows, source=LEARNED)


def load_labels(source) -> LabelTable:
    """Load per-node label sets from "node l1,l2,..." lines."""
    assignment = {}
    for lineno, raw in _iter_lines(source):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"line {lineno}: expected 'node labels', got {line!r}")
        try:
            v = int(parts[0])
            labels = [int(tok) for tok in parts[1].split(",") if tok]
        except ValueError:
            raise ValueError(f"line {lineno}: malformed labels {line!r}")
        if v in assignment:
            raise ValueError(f"line {lineno}: duplicate label line for node {v}")
        if not labels:
            raise ValueError(f"line {lineno}: node {v} given no labels")
        assignment[v] = labels
    return LabelTable(assignment)


def write_labels(labels: LabelTable, path):
    """Write a LabelTable back to "node l1,l2,..." text."""
    with open(path, "w", encoding="utf-8") as fh:
        for v in labels.labeled_ids():
            fh.write(f"{v} {','.join(str(l) for l in labels.labels_of(v))}\n")


def load_name_map(source) -> dict:
    """Load an optional "name<TAB>id" mapping for string-named datasets."""
    mapping = {}
    for lineno, raw in _iter_lines(source):
        line = raw.rstrip("\n")
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"line {lineno}: expected 'name<TAB>id', got {line!r}")
        name, sid = parts
        try:
            node = int(sid)
        except ValueError:
            raise ValueError(f"line {lineno}: non-integer id in {line!r}")
        if name in mapping:
            raise ValueError(f"line {lineno}: duplicate name {name!r}")
        mapping[name] = node
    return mapping
