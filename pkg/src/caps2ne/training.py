"""Sampled-softmax training of the capsule model over walk-pair corpora.

The per-target loss scores the target's output-table row against the rows of
uniformly sampled negative nodes, normalized over the positive plus the
sampled set so the loss is a proper cross-entropy (>= 0). One Adam step is
applied per mini-batch; all epoch-level randomness (pair shuffling, negative
draws) comes from streams keyed by (seed, tag, epoch), which makes training
resumable from a checkpoint with a bitwise-identical trajectory.
"""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from .capsule import (CapsuleParams, RoutingConfig, backward, forward_batch,
                      init_params)
from .graph import GIVEN_FIXED, LEARNED, FeatureTable
from .rng import stream
from .walks import WalkConfig, pair_arrays

logger = logging.getLogger(__name__)

_TAG_NEGATIVES = 3
_TAG_SHUFFLE = 4

UNIFORM = "uniform"
UNIGRAM = "unigram-0.75"

CHECKPOINT_MAGIC = b"C2NE"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Hyper-parameters of one training run."""

    walk: WalkConfig = field(default_factory=WalkConfig)
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    embedding_dim: int = 128
    feature_dim: int | None = None      # used when no fixed features are given
    num_negatives: int = 256
    batch_size: int = 128
    learning_rate: float = 1e-4
    epochs: int = 10
    exclude_positive: bool = False
    negative_distribution: str = UNIFORM
    dtype: str = "float64"
    deterministic: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.num_negatives < 1:
            raise ValueError("num_negatives must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if self.negative_distribution not in (UNIFORM, UNIGRAM):
            raise ValueError(f"unknown negative distribution {self.negative_distribution!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["walk"] = WalkConfig(**d["walk"])
        d["routing"] = RoutingConfig(**d["routing"])
        return cls(**d)


def sample_negatives(num, target, num_nodes, rng) -> np.ndarray:
    """`num` distinct ids drawn uniformly from all nodes except `target`."""
    if num >= num_nodes:
        raise ValueError(f"cannot draw {num} distinct negatives from {num_nodes} nodes")
    draw = rng.choice(num_nodes - 1, size=num, replace=False)
    return draw + (draw >= target)


def sample_negatives_weighted(num, target, probs, rng) -> np.ndarray:
    """Distinct negatives drawn without replacement from `probs` (target masked)."""
    p = np.asarray(probs, dtype=np.float64).copy()
    p[target] = 0.0
    total = p.sum()
    if total <= 0 or np.count_nonzero(p) < num:
        raise ValueError("not enough positive-probability nodes to sample negatives")
    return rng.choice(len(p), size=num, replace=False, p=p / total)


def unigram_probs(targets, contexts, num_nodes, power=0.75) -> np.ndarray:
    """Walk-visit counts of the pair corpus raised to `power`, normalized."""
    counts = np.bincount(np.concatenate([targets, contexts.ravel()]),
                         minlength=num_nodes).astype(np.float64)
    weights = counts ** power
    total = weights.sum()
    if total == 0:
        raise ValueError("empty corpus")
    return weights / total


def sampled_softmax_loss(output, target, negatives, embeddings, exclude_positive=False):
    """Loss and gradients for one output vector against its node id.

    Returns (loss, d_output, (candidate_ids, d_rows)); the candidate ids are
    the target followed by the negatives. With no negatives the loss and all
    gradients are zero.
    """
    output = np.asarray(output, dtype=np.float64)
    negatives = np.asarray(negatives, dtype=np.int64)
    if negatives.ndim != 1:
        raise ValueError("negatives must be a flat id list")
    if np.any(negatives == target):
        raise ValueError("target appears among negatives")
    if len(np.unique(negatives)) != len(negatives):
        raise ValueError("negatives must be distinct")
    ids = np.concatenate([[target], negatives]).astype(np.int64)
    if len(negatives) == 0:
        return 0.0, np.zeros_like(output), (ids, np.zeros((1, len(output))))
    loss, d_out, d_rows = _sampled_softmax_batch(
        output[None, :], np.array([target]), negatives[None, :],
        embeddings, exclude_positive=exclude_positive, mean=False)
    return float(loss[0]), d_out[0], (ids, d_rows.reshape(len(ids), -1))


def _sampled_softmax_batch(outputs, targets, negatives, embeddings,
                           exclude_positive=False, mean=True):
    """Batched loss; returns (per-pair loss, d_outputs, dense d_embeddings).

    When `mean` is set the gradients are divided by the batch size (the
    per-batch objective is the mean pair loss); per-pair losses are returned
    unscaled either way. With mean=False and a single pair, the embedding
    gradient comes back as the (C, k) candidate rows instead of a dense table.
    """
    batch, k = outputs.shape
    cand = np.concatenate([targets[:, None], negatives], axis=1)    # (B, C)
    logits_full = outputs @ embeddings.T                            # (B, N)
    logits = np.take_along_axis(logits_full, cand, axis=1)
    if exclude_positive:
        neg = logits[:, 1:]
        zmax = neg.max(axis=1, keepdims=True)
        ez = np.exp(neg - zmax)
        denom = ez.sum(axis=1, keepdims=True)
        loss = (np.log(denom) + zmax - logits[:, :1]).ravel()
        dlogits = np.concatenate([-np.ones((batch, 1)), ez / denom], axis=1)
    else:
        zmax = logits.max(axis=1, keepdims=True)
        ez = np.exp(logits - zmax)
        denom = ez.sum(axis=1, keepdims=True)
        loss = (np.log(denom) + zmax - logits[:, :1]).ravel()
        dlogits = ez / denom
        dlogits[:, 0] -= 1.0
    if mean:
        dlogits = dlogits / batch

    num_cand = cand.shape[1]
    if not mean and batch == 1:
        d_rows = dlogits[0][:, None] * outputs[0][None, :]          # (C, k)
        d_out = dlogits[0] @ embeddings[cand[0]]
        return loss, d_out[None, :], d_rows
    rows = cand.ravel()
    cols = np.repeat(np.arange(batch), num_cand)
    mat = sp.coo_matrix((dlogits.ravel(), (rows, cols)),
                        shape=(embeddings.shape[0], batch)).tocsr()
    d_out = mat.T @ embeddings                                      # (B, k)
    d_emb = mat @ outputs                                           # (N, k)
    return loss, np.asarray(d_out), np.asarray(d_emb)


def adam_step(param, grad, moment1, moment2, step, lr,
              beta1=0.9, beta2=0.999, eps=1e-8, scratch=None):
    """In-place Adam update with bias correction; `step` counts this update (1-based)."""
    checksum = float(np.sum(grad))
    if not np.isfinite(checksum):
        bad = int(np.count_nonzero(~np.isfinite(grad)))
        raise FloatingPointError(
            f"non-finite gradient at step {step}: {bad} bad entries of shape {grad.shape}")
    if scratch is None:
        scratch = (np.empty_like(param), np.empty_like(param))
    s1, s2 = scratch
    moment1 *= beta1
    np.multiply(grad, 1.0 - beta1, out=s1)
    moment1 += s1
    np.multiply(grad, grad, out=s1)
    moment2 *= beta2
    s1 *= 1.0 - beta2
    moment2 += s1
    np.divide(moment2, 1.0 - beta2 ** step, out=s1)
    np.sqrt(s1, out=s1)
    s1 += eps
    np.divide(moment1, 1.0 - beta1 ** step, out=s2)
    s2 /= s1
    s2 *= lr
    param -= s2


class AdamOptimizer:
    """Adam over a named set of tensors, with preallocated scratch buffers."""

    def __init__(self, shapes: dict, lr, beta1=0.9, beta2=0.999, eps=1e-8, dtype=np.float64):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.moments = {name: (np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype))
                        for name, shape in shapes.items()}
        self._scratch = {name: (np.empty(shape, dtype=dtype), np.empty(shape, dtype=dtype))
                         for name, shape in shapes.items()}

    def step(self, tensors: dict, grads: dict):
        self.step_count += 1
        for name in sorted(grads):
            m, v = self.moments[name]
            adam_step(tensors[name], grads[name], m, v, self.step_count, self.lr,
                      self.beta1, self.beta2, self.eps, scratch=self._scratch[name])


@dataclass
class TrainResult:
    params: CapsuleParams
    optimizer: AdamOptimizer
    config: TrainConfig
    loss_log: list                       # (epoch, mean_loss, wall_seconds)
    epochs_done: int


def _draw_negatives(targets, num, num_nodes, rng, probs=None) -> np.ndarray:
    out = np.empty((len(targets), num), dtype=np.int64)
    for i, t in enumerate(targets):
        if probs is None:
            out[i] = sample_negatives(num, int(t), num_nodes, rng)
        else:
            out[i] = sample_negatives_weighted(num, int(t), probs, rng)
    return out


def train(graph, cfg: TrainConfig, features: FeatureTable = None,
          on_epoch_end=None, resume=None) -> TrainResult:
    """Run the full learning loop and return trained parameters plus the loss log.

    `features` supplies fixed input vectors; omit it to learn a feature table
    of cfg.feature_dim. Pass a loaded checkpoint as `resume` to continue an
    interrupted run (bitwise-identical to an uninterrupted one).
    """
    dtype = np.dtype(cfg.dtype)
    num_nodes = graph.num_nodes
    targets, contexts = pair_arrays(graph, cfg.walk)
    if len(targets) == 0:
        raise ValueError("empty training corpus")
    if cfg.num_negatives >= num_nodes:
        raise ValueError("num_negatives must be below num_nodes")

    if resume is not None:
        params = resume.params
        optimizer = resume.optimizer
        start_epoch = resume.epoch_next
        loss_log = list(resume.loss_log)
    else:
        if features is not None and features.rows.dtype != dtype:
            features = FeatureTable(np.asarray(features.rows, dtype=dtype),
                                    source=features.source)
        params = init_params(num_nodes, cfg.walk.context_size, cfg.embedding_dim,
                             cfg.seed, features=features, feature_dim=cfg.feature_dim,
                             dtype=dtype)
        optimizer = AdamOptimizer({n: t.shape for n, t in params.trainable().items()},
                                  lr=cfg.learning_rate, dtype=dtype)
        start_epoch = 0
        loss_log = []

    probs = None
    if cfg.negative_distribution == UNIGRAM:
        probs = unigram_probs(targets, contexts, num_nodes)

    learned = params.features.source == LEARNED
    num_pairs = len(targets)
    for epoch in range(start_epoch, cfg.epochs):
        tic = time.perf_counter()
        perm = stream(cfg.seed, _TAG_SHUFFLE, epoch).permutation(num_pairs)
        neg_rng = stream(cfg.seed, _TAG_NEGATIVES, epoch)
        total = 0.0
        for lo in range(0, num_pairs, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            batch_targets = targets[idx]
            trace = forward_batch(contexts[idx], params, cfg.routing)
            negs = _draw_negatives(batch_targets, cfg.num_negatives, num_nodes,
                                   neg_rng, probs)
            losses, d_out, d_emb = _sampled_softmax_batch(
                trace.output, batch_targets, negs, params.embeddings,
                exclude_positive=cfg.exclude_positive)
            batch_sum = float(np.sum(losses))
            if not np.isfinite(batch_sum):
                raise FloatingPointError(f"non-finite loss in epoch {epoch}")
            total += batch_sum
            grads = backward(trace, params, d_out)
            grad_dict = {"transforms": grads.transforms, "embeddings": d_emb}
            if learned:
                grad_dict["features"] = grads.scatter_features(trace.contexts, num_nodes)
            optimizer.step(params.trainable(), grad_dict)
        mean_loss = total / num_pairs
        seconds = time.perf_counter() - tic
        loss_log.append((epoch, mean_loss, seconds))
        logger.info("epoch %d: mean loss %.6f (%.1fs)", epoch, mean_loss, seconds)
        if on_epoch_end is not None:
            on_epoch_end(epoch, params, mean_loss)
    return TrainResult(params, optimizer, cfg, loss_log, cfg.epochs)


# ---------------------------------------------------------------------------
# checkpoint container (versioned binary, little-endian 64-bit tensors)

@dataclass
class Checkpoint:
    params: CapsuleParams
    optimizer: AdamOptimizer
    config: TrainConfig
    epoch_next: int
    degrees: np.ndarray                  # training-graph degrees, for new-id checks
    loss_log: list


def _write_tensor(fh, name: str, arr: np.ndarray):
    data = np.ascontiguousarray(arr)
    code = b"i" if data.dtype.kind in "iu" else b"f"
    data = data.astype("<i8" if code == b"i" else "<f8")
    enc = name.encode("utf-8")
    fh.write(struct.pack("<I", len(enc)))
    fh.write(enc)
    fh.write(code)
    fh.write(struct.pack("<I", data.ndim))
    fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
    fh.write(data.tobytes())


def _read_tensor(fh):
    (name_len,) = struct.unpack("<I", fh.read(4))
    name = fh.read(name_len).decode("utf-8")
    code = fh.read(1)
    (ndim,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    dt = "<i8" if code == b"i" else "<f8"
    arr = np.frombuffer(fh.read(8 * count), dtype=dt).reshape(shape).copy()
    return name, arr


def save_checkpoint(path, params: CapsuleParams, optimizer: AdamOptimizer,
                    cfg: TrainConfig, epoch_next: int, degrees, loss_log=()):
    """Serialize model, optimizer and config to the versioned binary container."""
    meta = {
        "config": cfg.to_dict(),
        "epoch_next": int(epoch_next),
        "step_count": int(optimizer.step_count),
        "feature_source": params.features.source,
        "loss_log": [[int(e), float(l), float(s)] for e, l, s in loss_log],
    }
    tensors = {"transforms": params.transforms,
               "embeddings": params.embeddings,
               "features": params.features.rows,
               "degrees": np.asarray(degrees, dtype=np.int64)}
    for name, (m, v) in optimizer.moments.items():
        tensors[f"moment1_{name}"] = m
        tensors[f"moment2_{name}"] = v
    blob = json.dumps(meta).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", len(tensors)))
        for name in sorted(tensors):
            _write_tensor(fh, name, tensors[name])


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint container back into live objects."""
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        meta = json.loads(fh.read(blob_len).decode("utf-8"))
        (count,) = struct.unpack("<Q", fh.read(8))
        tensors = dict(_read_tensor(fh) for _ in range(count))

    cfg = TrainConfig.from_dict(meta["config"])
    dtype = np.dtype(cfg.dtype)
    features = FeatureTable(tensors["features"].astype(dtype),
                            source=meta["feature_source"])
    params = CapsuleParams(tensors["transforms"].astype(dtype), features,
                           tensors["embeddings"].astype(dtype))
    optimizer = AdamOptimizer({n: t.shape for n, t in params.trainable().items()},
                              lr=cfg.learning_rate, dtype=dtype)
    optimizer.step_count = int(meta["step_count"])
    for name in optimizer.moments:
        m, v = optimizer.moments[name]
        m[...] = tensors[f"moment1_{name}"]
        v[...] = tensors[f"moment2_{name}"]
    return Checkpoint(params, optimizer, cfg, int(meta["epoch_next"]),
                      tensors["degrees"], [tuple(r) for r in meta.get("loss_log", [])])


# ---------------------------------------------------------------------------
# text artifacts: embedding snapshots and the loss log

def write_embeddings(path, matrix, ids=None):
    """Write embeddings as text: header "N k", then "id v1 ... vk" rows."""
    matrix = np.asarray(matrix)
    if ids is None:
        ids = np.arange(matrix.shape[0])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{matrix.shape[0]} {matrix.shape[1]}\n")
        for i, row in zip(ids, matrix):
            fh.write(str(int(i)) + " " + " ".join(f"{x:.9g}" for x in row) + "\n")


def read_embeddings(path):
    """Read an embedding file back as (ids, matrix)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}: malformed embedding header")
        n, k = int(header[0]), int(header[1])
        ids = np.empty(n, dtype=np.int64)
        mat = np.empty((n, k), dtype=np.float64)
        for i in range(n):
            parts = fh.readline().split()
            if len(parts) != k + 1:
                raise ValueError(f"{path}: row {i} has {len(parts) - 1} values, expected {k}")
            ids[i] = int(parts[0])
            mat[i] = [float(tok) for tok in parts[1:]]
    return ids, mat


def write_loss_log(path, loss_log):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,mean_loss,wall_seconds\n")
        for epoch, loss, seconds in loss_log:
            fh.write(f"{epoch},{loss:.9g},{seconds:.3f}\n")
