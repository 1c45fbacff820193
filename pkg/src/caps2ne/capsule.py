"""The differentiable model: squash, per-position transforms, dynamic routing.

Context features pass through a norm-limiting squash, one linear transform
per context position, and an iterative routing loop that softmax-weights the
transformed vectors into a single output capsule. Two logit update rules are
supported: replacing the logits with the agreement ("ours") and accumulating
agreements onto the logits ("sabour"). Gradients are exact reverse-mode
derivatives through the fully unrolled loop; a stop-gradient variant detaches
the coupling coefficients for ablation.

Batch layout: routing state is (batch, positions); capsule vectors are kept
position-major, i.e. u and u_hat are (positions, batch, dim), which makes the
per-position transform a plain stack of matrix products.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import LEARNED, FeatureTable, init_learned_features
from .rng import stream
from .walks import ContextPair

SQUASH_EPS = 1e-12

RULE_OURS = "ours"
RULE_SABOUR = "sabour"

_TAG_TRANSFORM_INIT = 2


def squash(x, axis=-1):
    """Scale x to norm |x|^2 / (1 + |x|^2) < 1 along `axis`, keeping direction."""
    x = np.asarray(x)
    r = np.linalg.norm(x, axis=axis, keepdims=True)
    return x * (r * r / ((1.0 + r * r) * (r + SQUASH_EPS)))


def squash_vjp(x, grad, axis=-1):
    """Vector-Jacobian product of `squash` at x applied to `grad`.

    Uses the exact derivative of the implemented function, epsilon included,
    so finite differences of `squash` reproduce it to roundoff.
    """
    x = np.asarray(x)
    grad = np.asarray(grad)
    r = np.linalg.norm(x, axis=axis, keepdims=True)
    g = (1.0 + r * r) * (r + SQUASH_EPS)
    gp = 3.0 * r * r + 2.0 * SQUASH_EPS * r + 1.0
    phi = r * r / g
    psi = (2.0 * g - r * gp) / (g * g)    # phi'(r) / r
    inner = np.sum(x * grad, axis=axis, keepdims=True)
    return phi * grad + psi * inner * x


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


@dataclass
class RoutingConfig:
    """Number of routing iterations and the logit update rule."""

    iterations: int = 1
    rule: str = RULE_OURS
    stop_gradient: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("routing iterations must be >= 1")
        if self.rule not in (RULE_OURS, RULE_SABOUR):
            raise ValueError(f"unknown routing rule {self.rule!r}")


@dataclass
class CapsuleParams:
    """Model parameters: position transforms, input features, output table.

    transforms[i] is the (k, d) matrix applied to the i-th context position;
    it is shared across all pairs and targets. embeddings holds one k-vector
    per node and is the table exported for downstream evaluation.
    """

    transforms: np.ndarray           # (positions, k, d)
    features: FeatureTable
    embeddings: np.ndarray           # (num_nodes, k)

    def __post_init__(self):
        self.transforms = np.asarray(self.transforms)
        self.embeddings = np.asarray(self.embeddings)
        if self.transforms.ndim != 3:
            raise ValueError("transforms must be (positions, k, d)")
        if self.transforms.shape[2] != self.features.dim:
            raise ValueError("transform input dim does not match feature dim")
        if self.embeddings.shape != (self.features.num_nodes, self.transforms.shape[1]):
            raise ValueError("embedding table shape mismatch")

    @property
    def context_size(self) -> int:
        return self.transforms.shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.transforms.shape[1]

    @property
    def num_nodes(self) -> int:
        return self.features.num_nodes

    def trainable(self) -> dict:
        """Name -> array mapping of tensors updated by the optimizer."""
        out = {"transforms": self.transforms, "embeddings": self.embeddings}
        if self.features.source == LEARNED:
            out["features"] = self.features.rows
        return out


def init_params(num_nodes, context_size, embedding_dim, seed,
                features: FeatureTable = None, feature_dim=None,
                dtype=np.float64) -> CapsuleParams:
    """Fresh parameters: uniform transforms, zero output table.

    When `features` is None a trainable table of `feature_dim` is created.
    """
    if features is None:
        if feature_dim is None:
            raise ValueError("feature_dim required when no fixed features are given")
        features = init_learned_features(num_nodes, feature_dim, seed)
    if features.num_nodes != num_nodes:
        raise ValueError("feature table rows do not match num_nodes")
    d = features.dim
    bound = np.sqrt(6.0 / (d + embedding_dim))
    transforms = stream(seed, _TAG_TRANSFORM_INIT).uniform(
        -bound, bound, size=(context_size, embedding_dim, d)).astype(dtype)
    embeddings = np.zeros((num_nodes, embedding_dim), dtype=dtype)
    if features.source == LEARNED and features.rows.dtype != dtype:
        features = FeatureTable(features.rows.astype(dtype), source=LEARNED)
    return CapsuleParams(transforms, features, embeddings)


@dataclass
class ForwardTrace:
    """All intermediates of a batched forward pass, kept for exact backprop.

    Shapes: contexts (B, n); u / u_hat (n, B, d|k); per-iteration routing
    state (iterations, B, n) for logits/coupling and (iterations, B, k) for
    the weighted sums and outputs. `output` is the final capsule vector.
    """

    contexts: np.ndarray
    u: np.ndarray
    u_hat: np.ndarray
    route_logits: np.ndarray
    coupling: np.ndarray
    weighted_sum: np.ndarray
    iter_outputs: np.ndarray
    config: RoutingConfig

    @property
    def output(self) -> np.ndarray:
        return self.iter_outputs[-1]

    @property
    def batch_size(self) -> int:
        return self.contexts.shape[0]


def route(u_hat, cfg: RoutingConfig):
    """Route a single stack of (positions, k) transformed vectors.

    Returns the final output capsule vector and the per-iteration trace
    (coupling coefficients sum to one at every iteration).
    """
    u_hat = np.asarray(u_hat)
    if u_hat.ndim != 2 or u_hat.shape[0] < 1:
        raise ValueError("expected (positions, k) with at least one position")
    out, logits, coupling, sums, outs = _route_batch(u_hat[:, None, :], cfg)
    trace = ForwardTrace(
        contexts=np.zeros((1, u_hat.shape[0]), dtype=np.int64),
        u=np.zeros((u_hat.shape[0], 1, 0)),
        u_hat=u_hat[:, None, :],
        route_logits=logits, coupling=coupling,
        weighted_sum=sums, iter_outputs=outs, config=cfg)
    return out[0], trace


def _route_batch(u_hat, cfg: RoutingConfig):
    """Routing loop over u_hat (n, B, k); returns output plus stacked state."""
    n, batch, k = u_hat.shape
    logits = np.zeros((batch, n), dtype=u_hat.dtype)
    logits_hist, coupling_hist, sum_hist, out_hist = [], [], [], []
    e = None
    for it in range(cfg.iterations):
        if it > 0:
            agreement = np.einsum("nbk,bk->bn", u_hat, e)
            logits = agreement if cfg.rule == RULE_OURS else logits + agreement
        c = _softmax(logits)
        s = np.einsum("bn,nbk->bk", c, u_hat)
        e = squash(s)
        logits_hist.append(logits)
        coupling_hist.append(c)
        sum_hist.append(s)
        out_hist.append(e)
    return e, np.array(logits_hist), np.array(coupling_hist), np.array(sum_hist), np.array(out_hist)


def forward_batch(contexts, params: CapsuleParams, cfg: RoutingConfig) -> ForwardTrace:
    """Forward pass over a (B, n) batch of context id rows."""
    contexts = np.asarray(contexts, dtype=np.int64)
    if contexts.ndim != 2:
        raise ValueError("contexts must be (batch, positions)")
    if contexts.shape[1] != params.context_size:
        raise ValueError(
            f"context length {contexts.shape[1]} != {params.context_size} transforms")
    if contexts.min(initial=0) < 0 or contexts.max(initial=-1) >= params.num_nodes:
        raise ValueError("context ids outside feature table")
    x = params.features.rows[contexts.T]            # (n, B, d)
    u = squash(x)
    u_hat = u @ params.transforms.transpose(0, 2, 1)  # (n, B, k)
    _, logits, coupling, sums, outs = _route_batch(u_hat, cfg)
    return ForwardTrace(contexts, u, u_hat, logits, coupling, sums, outs, cfg)


def forward(pair: ContextPair, params: CapsuleParams, cfg: RoutingConfig) -> ForwardTrace:
    """Forward pass for one (context, target) pair; batch dimension is 1."""
    return forward_batch(pair.context[None, :], params, cfg)


@dataclass
class CapsuleGradients:
    """Gradients mirroring CapsuleParams; feature_rows is (n, B, d) or None."""

    transforms: np.ndarray
    feature_rows: np.ndarray | None = None

    def scatter_features(self, contexts, num_nodes) -> np.ndarray:
        """Accumulate per-context feature gradients into a dense table."""
        d = self.feature_rows.shape[2]
        table = np.zeros((num_nodes, d), dtype=self.feature_rows.dtype)
        flat_ids = np.asarray(contexts).T.reshape(-1)
        np.add.at(table, flat_ids, self.feature_rows.reshape(-1, d))
        return table


def _route_backward(trace: ForwardTrace, output_grad):
    """Gradient of the routing loop w.r.t. u_hat, unrolled in reverse."""
    cfg = trace.config
    u_hat = trace.u_hat
    coupling = trace.coupling
    sums = trace.weighted_sum
    outs = trace.iter_outputs
    m = cfg.iterations
    d_u_hat = np.zeros_like(u_hat)

    if cfg.stop_gradient:
        ds = squash_vjp(sums[m - 1], output_grad)
        d_u_hat += coupling[m - 1].T[:, :, None] * ds[None, :, :]
        return d_u_hat

    de = output_grad
    carry = None
    for it in range(m - 1, -1, -1):
        ds = squash_vjp(sums[it], de)
        dc = np.einsum("nbk,bk->bn", u_hat, ds)
        d_u_hat += coupling[it].T[:, :, None] * ds[None, :, :]
        db = coupling[it] * (dc - np.sum(coupling[it] * dc, axis=1, keepdims=True))
        if cfg.rule == RULE_SABOUR and carry is not None:
            db = db + carry
        if it == 0:
            break                                   # initial logits are constant
        de = np.einsum("bn,nbk->bk", db, u_hat)
        d_u_hat += db.T[:, :, None] * outs[it - 1][None, :, :]
        carry = db
    return d_u_hat


def backward(trace: ForwardTrace, params: CapsuleParams, output_grad) -> CapsuleGradients:
    """Exact reverse-mode gradients for a forward trace.

    `output_grad` is dLoss/dOutput, shape (B, k) or (k,) for a single pair.
    Feature gradients are produced only for trainable feature tables.
    """
    output_grad = np.asarray(output_grad)
    if output_grad.ndim == 1:
        output_grad = output_grad[None, :]
    n, batch, _ = trace.u_hat.shape
    if trace.u_hat.shape[2] != params.embedding_dim or n != params.context_size:
        raise ValueError("trace does not match params shapes")
    if output_grad.shape != (batch, params.embedding_dim):
        raise ValueError(f"output_grad must be ({batch}, {params.embedding_dim})")

    d_u_hat = _route_backward(trace, output_grad)
    d_transforms = np.einsum("nbk,nbd->nkd", d_u_hat, trace.u)
    feature_rows = None
    if params.features.source == LEARNED:
        du = d_u_hat @ params.transforms                   # (n, B, d)
        x = params.features.rows[trace.contexts.T]
        feature_rows = squash_vjp(x, du)
    return CapsuleGradients(d_transforms, feature_rows)
