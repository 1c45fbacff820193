"""Uniform random walks and (context, target) pair extraction.

Every (start node, walk index) pair draws from an independent counter-based
Philox stream keyed by (seed, node, walk index), so the generated corpus is
identical no matter how generation is scheduled across workers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .rng import stream

logger = logging.getLogger(__name__)

# spawn-key tags for derived streams; trainer/inductive tags live with their users
_TAG_WALK = 0
_TAG_TARGET = 1

RANDOM_ONE = "random-one"
ROTATE_ALL = "rotate-all"
FIXED_INDEXES = "fixed-indexes"


@dataclass
class WalkConfig:
    """Walk corpus parameters: T walks of length q from every node."""

    walks_per_node: int = 8
    walk_length: int = 10
    target_strategy: str = ROTATE_ALL
    fixed_indexes: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.walk_length < 2:
            raise ValueError("walk_length must be >= 2")
        if self.walks_per_node < 1:
            raise ValueError("walks_per_node must be >= 1")
        if isinstance(self.target_strategy, (list, tuple)):
            self.fixed_indexes = tuple(self.target_strategy)
            self.target_strategy = FIXED_INDEXES
        if self.target_strategy not in (RANDOM_ONE, ROTATE_ALL, FIXED_INDEXES):
            raise ValueError(f"unknown target strategy {self.target_strategy!r}")
        if self.target_strategy == FIXED_INDEXES:
            self.fixed_indexes = tuple(int(i) for i in self.fixed_indexes)
            if not self.fixed_indexes:
                raise ValueError("fixed-indexes strategy needs at least one index")
            if any(not 0 <= i < self.walk_length for i in self.fixed_indexes):
                raise ValueError(f"fixed indexes {self.fixed_indexes} outside [0, {self.walk_length})")

    @property
    def context_size(self) -> int:
        return self.walk_length - 1

    def pairs_per_walk(self) -> int:
        if self.target_strategy == RANDOM_ONE:
            return 1
        if self.target_strategy == ROTATE_ALL:
            return self.walk_length
        return len(self.fixed_indexes)


@dataclass
class ContextPair:
    """A target node and the ordered remainder of its walk."""

    target: int
    context: np.ndarray

    def __post_init__(self):
        self.context = np.asarray(self.context, dtype=np.int64)


def single_walk(graph, start: int, length: int, rng: np.random.Generator) -> np.ndarray:
    """One uniform random walk; an isolated start repeats itself."""
    walk = np.empty(length, dtype=np.int64)
    walk[0] = start
    if graph.degree(start) == 0:
        walk[:] = start
        return walk
    draws = rng.random(length - 1)
    cur = start
    for t in range(1, length):
        nbrs = graph.neighbors(cur)
        idx = min(int(draws[t - 1] * len(nbrs)), len(nbrs) - 1)
        cur = nbrs[idx]
        walk[t] = cur
    return walk


def sample_walks(graph, cfg: WalkConfig, nodes=None):
    """Yield (node, walk_index, walk) records, node-major then walk-index order.

    Isolated start nodes produce degenerate self-repeating walks (counted and
    reported through a single warning) so every node receives updates.
    """
    if nodes is None:
        nodes = range(graph.num_nodes)
    isolated = 0
    for node in nodes:
        if graph.degree(node) == 0:
            isolated += 1
        for widx in range(cfg.walks_per_node):
            rng = stream(cfg.seed, _TAG_WALK, node, widx)
            yield node, widx, single_walk(graph, node, cfg.walk_length, rng)
    if isolated:
        logger.warning("%d isolated start node(s) produced degenerate self-walks", isolated)


def _pair_at(walk: np.ndarray, position: int) -> ContextPair:
    context = np.concatenate([walk[:position], walk[position + 1:]])
    return ContextPair(int(walk[position]), context)


def extract_pairs(walk, cfg: WalkConfig, rng: np.random.Generator = None):
    """Turn one walk into training pairs according to the target strategy.

    `rng` is only consulted by the random-one strategy; pass the stream keyed
    by the walk's identity to keep corpora reproducible.
    """
    walk = np.asarray(walk, dtype=np.int64)
    if len(walk) != cfg.walk_length:
        raise ValueError(f"walk length {len(walk)} != configured {cfg.walk_length}")
    if cfg.target_strategy == ROTATE_ALL:
        positions = range(cfg.walk_length)
    elif cfg.target_strategy == FIXED_INDEXES:
        positions = cfg.fixed_indexes
    else:
        if rng is None:
            rng = stream(cfg.seed, _TAG_TARGET)
        positions = (int(rng.integers(cfg.walk_length)),)
    return [_pair_at(walk, p) for p in positions]


def pair_arrays(graph, cfg: WalkConfig, nodes=None):
    """Materialize the full pair corpus as (targets, contexts) arrays.

    Streamed and materialized corpora agree because pair extraction for each
    walk uses a stream keyed by (seed, node, walk index).
    """
    targets, contexts = [], []
    for node, widx, walk in sample_walks(graph, cfg, nodes=nodes):
        rng = None
        if cfg.target_strategy == RANDOM_ONE:
            rng = stream(cfg.seed, _TAG_TARGET, node, widx)
        for pair in extract_pairs(walk, cfg, rng):
            targets.append(pair.target)
            contexts.append(pair.context)
    targets = np.array(targets, dtype=np.int64)
    contexts = np.array(contexts, dtype=np.int64).reshape(len(targets), cfg.context_size)
    return targets, contexts


def write_corpus(path, graph, cfg: WalkConfig):
    """Materialize the walk corpus to disk, one walk per line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"q={cfg.walk_length} T={cfg.walks_per_node} seed={cfg.seed}\n")
        for _, _, walk in sample_walks(graph, cfg):
            fh.write(" ".join(str(int(v)) for v in walk) + "\n")


def read_corpus(path):
    """Read a corpus file back as (header dict, walk matrix)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        meta = {}
        for tok in header.split():
            key, _, val = tok.partition("=")
            meta[key] = int(val)
        for expected in ("q", "T", "seed"):
            if expected not in meta:
                raise ValueError(f"corpus header missing {expected}: {header!r}")
        walks = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            row = [int(tok) for tok in line.split()]
            if len(row) != meta["q"]:
                raise ValueError(f"line {lineno}: walk length {len(row)} != header q={meta['q']}")
            walks.append(row)
    return meta, np.array(walks, dtype=np.int64).reshape(len(walks), meta["q"])
