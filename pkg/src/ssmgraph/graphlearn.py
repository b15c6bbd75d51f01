"""Dynamic graph structure learning and graph regularization.

One adjacency matrix is learned per time interval of length ``r``: pooled
embeddings feed a self-attention layer whose attention weights become edge
weights, a cosine-similarity KNN graph is mixed in, weak edges are pruned,
and the result is symmetrized. Three regularizers (Dirichlet smoothness,
log-degree connectivity, Frobenius sparsity) shape the learned graphs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ContractError, ShapeError, Tensor

DEG_EPS = 1e-8  # substitute degree for isolated nodes (guards 1/sqrt and log)

FULL_INTERVAL = "full"  # one graph spanning each record's true length


@dataclass
class RegWeights:
    """Nonnegative weights for (smoothness, degree, sparsity) regularizers."""
    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ContractError(f"reg weight {name} must be finite and >= 0, got {v}")


@dataclass
class GslConfig:
    r: int | str = FULL_INTERVAL   # interval length in timesteps, or "full"
    knn_k: int = 2
    epsilon: float = 0.6
    kappa: float = 0.1
    heads: int = 4

    def __post_init__(self):
        if self.r != FULL_INTERVAL:
            if not isinstance(self.r, int) or self.r < 1:
                raise ContractError(f"r must be a positive int or '{FULL_INTERVAL}', got {self.r!r}")
        if not 0.0 <= self.epsilon < 1.0:
            raise ContractError(f"epsilon must be in [0, 1), got {self.epsilon}")
        if self.kappa < 0.0:
            raise ContractError(f"kappa must be >= 0, got {self.kappa}")
        if self.knn_k < 1:
            raise ContractError(f"knn_k must be >= 1, got {self.knn_k}")
        if self.heads < 1:
            raise ContractError(f"heads must be >= 1, got {self.heads}")


@dataclass
class DynamicGraphSet:
    """Learned adjacency matrices for one record: (n_d, N, N), entries in [0,1]."""
    adjacency: np.ndarray

    def __post_init__(self):
        if self.adjacency.ndim != 3 or self.adjacency.shape[1] != self.adjacency.shape[2]:
            raise ShapeError(f"adjacency must be (n_d, N, N), got {self.adjacency.shape}")

    @property
    def n_d(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[1]


def num_intervals(t_len: int, r) -> int:
    if r == FULL_INTERVAL:
        return 1
    if t_len % r != 0:
        raise ContractError(f"sequence length {t_len} not divisible by interval r={r}")
    return t_len // r


def interval_mean_pool(h: Tensor, r, mask: np.ndarray | None = None) -> Tensor:
    """Mean of valid timesteps per interval: (B, N, T, D) -> (B, n_d, N, D).

    Padded timesteps (mask == 0) are excluded from numerator and denominator;
    an interval with no valid step is a contract error.
    """
    if h.ndim != 4:
        raise ShapeError(f"expected (B, N, T, D), got {h.shape}")
    batch, n_sensors, t_len, d = h.shape
    n_d = num_intervals(t_len, r)
    r_eff = t_len // n_d
    if mask is None:
        mask_arr = np.ones((batch, t_len), dtype=h.dtype)
    else:
        mask_arr = np.asarray(mask, dtype=h.dtype)
        if mask_arr.shape != (batch, t_len):
            raise ShapeError(f"mask shape {mask_arr.shape} != {(batch, t_len)}")
    counts = mask_arr.reshape(batch, n_d, r_eff).sum(axis=-1)   # (B, n_d)
    if np.any(counts < 1):
        raise ContractError("an interval contains no valid timesteps; "
                            "size r against each record's true length")
    masked = h * Tensor(mask_arr[:, None, :, None])
    blocks = masked.reshape((batch, n_sensors, n_d, r_eff, d)).sum(axis=3)  # (B, N, n_d, D)
    pooled = blocks.transpose((0, 2, 1, 3))                                 # (B, n_d, N, D)
    return pooled / Tensor(counts[:, :, None, None])


def attention_adjacency(h: Tensor, mq: Tensor, mk: Tensor, heads: int = 1) -> Tensor:
    """Self-attention edge weights: softmax(Q K^T / sqrt(d_head)) per head,
    averaged over heads. ``h`` is (..., N, D); output rows sum to 1.

    ``mq`` and ``mk`` are (D, D); head ``i`` uses its own column block, so the
    parameter count stays 2*D^2 regardless of the head count.
    """
    d = h.shape[-1]
    if mq.shape != (d, d) or mk.shape != (d, d):
        raise ShapeError(f"projection shapes must be ({d}, {d})")
    if d % heads != 0:
        raise ContractError(f"width {d} not divisible by heads {heads}")
    d_head = d // heads
    q = h @ mq
    k = h @ mk
    acc = None
    for i in range(heads):
        sl = slice(i * d_head, (i + 1) * d_head)
        scores = (q[..., sl] @ T.swap_last2(k[..., sl])) / float(np.sqrt(d_head))
        attn = T.softmax_lastdim(scores)
        acc = attn if acc is None else acc + attn
    return acc / float(heads)


def knn_graph_cosine(h: np.ndarray, k: int) -> np.ndarray:
    """Binary union-symmetrized KNN graph from cosine similarity: (..., N, N).

    Entry (i, j) is 1 iff j is among i's top-k most cosine-similar peers
    (self excluded) or vice versa. Ties break toward the lower index;
    zero-norm rows have all similarities defined as 0.
    """
    h = np.asarray(h, dtype=np.float64)
    n = h.shape[-2]
    if not 1 <= k < n:
        raise ContractError(f"knn_k must satisfy 1 <= k < N={n}, got {k}")
    norms = np.linalg.norm(h, axis=-1, keepdims=True)
    unit = np.divide(h, norms, out=np.zeros_like(h), where=norms > 0)
    sim = unit @ np.swapaxes(unit, -1, -2)
    idx = np.arange(n)
    sim[..., idx, idx] = -np.inf  # exclude self
    # stable sort on -sim ranks by descending similarity, lower index first on ties
    order = np.argsort(-sim, axis=-1, kind="stable")[..., :k]
    w = np.zeros(sim.shape)
    np.put_along_axis(w, order, 1.0, axis=-1)
    return np.maximum(w, np.swapaxes(w, -1, -2))


def finalize_adjacency(w_bar: Tensor, w_knn: np.ndarray, epsilon: float, kappa: float) -> Tensor:
    """Mix attention and KNN graphs, prune weak edges, then symmetrize.

    W = eps*W_knn + (1-eps)*W_bar; entries < kappa are zeroed (and receive no
    gradient); finally W <- (W + W^T)/2. Output entries stay in [0, 1].
    """
    if w_bar.shape != np.shape(w_knn):
        raise ShapeError(f"shape mismatch: {w_bar.shape} vs {np.shape(w_knn)}")
    mixed = Tensor(np.asarray(w_knn, dtype=w_bar.dtype) * epsilon) + w_bar * (1.0 - epsilon)
    pruned = T.prune_below(mixed, kappa)
    return (pruned + T.swap_last2(pruned)) * 0.5


def _guarded_degree(w: Tensor) -> Tensor:
    """Row-sum degrees with isolated nodes bumped to DEG_EPS (values only)."""
    deg = w.sum(axis=-1)
    bump = (deg.data == 0.0) * DEG_EPS
    return deg + Tensor(bump.astype(w.dtype))


def smoothness_loss(h: Tensor, w: Tensor) -> Tensor:
    """Dirichlet energy under the normalized Laplacian, scaled by 1/N^2.

    tr(h^T L_hat h) with L_hat = D^{-1/2} (D - W) D^{-1/2}; isolated nodes use
    degree DEG_EPS in the normalization. Works on (..., N, D) / (..., N, N)
    stacks, returning one value per graph.
    """
    n = w.shape[-1]
    deg = w.sum(axis=-1)                                  # raw degrees
    inv_sqrt = T.power_scalar(_guarded_degree(w), -0.5)   # (..., N)
    y = h * inv_sqrt.reshape(inv_sqrt.shape + (1,))
    term_deg = (deg * (y * y).sum(axis=-1)).sum(axis=-1)
    term_adj = (w * (y @ T.swap_last2(y))).sum(axis=(-1, -2))
    return (term_deg - term_adj) / float(n * n)


def degree_loss(w: Tensor) -> Tensor:
    """Connectivity penalty -(1/N) sum_i log(degree_i); isolated nodes
    contribute -log(DEG_EPS), keeping the value finite."""
    n = w.shape[-1]
    return T.neg(T.log(_guarded_degree(w)).sum(axis=-1)) / float(n)


def sparsity_loss(w: Tensor) -> Tensor:
    """Squared Frobenius norm over N^2; discourages dense, heavy rows."""
    n = w.shape[-1]
    return (w * w).sum(axis=(-1, -2)) / float(n * n)


def reg_loss_total(w: Tensor, pooled: Tensor, weights: RegWeights) -> Tensor:
    """Weighted regularizer sum, averaged over dynamic graphs (and batch).

    ``w`` is (..., n_d, N, N) aligned with pooled embeddings (..., n_d, N, D).
    """
    if w.shape[:-2] != pooled.shape[:-2]:
        raise ContractError(f"graphs {w.shape[:-2]} and pooled {pooled.shape[:-2]} misaligned")
    per_graph = (smoothness_loss(pooled, w) * weights.alpha
                 + degree_loss(w) * weights.beta
                 + sparsity_loss(w) * weights.gamma)
    return per_graph.mean()


class GslLayer:
    """Attention-based graph learner over pooled interval embeddings."""

    def __init__(self, d_model: int, cfg: GslConfig, rng: np.random.Generator, dtype=np.float64):
        if d_model % cfg.heads != 0:
            raise ContractError(f"d_model {d_model} not divisible by heads {cfg.heads}")
        self.cfg = cfg
        sd = d_model ** -0.5
        self.mq = Tensor(rng.normal(0.0, sd, (d_model, d_model)), requires_grad=True, dtype=dtype)
        self.mk = Tensor(rng.normal(0.0, sd, (d_model, d_model)), requires_grad=True, dtype=dtype)

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [(prefix + "mq", self.mq), (prefix + "mk", self.mk)]

    def build_graphs(self, pooled: Tensor) -> Tensor:
        """Pooled embeddings (..., n_d, N, D) -> final adjacencies (..., n_d, N, N)."""
        w_bar = attention_adjacency(pooled, self.mq, self.mk, self.cfg.heads)
        w_knn = knn_graph_cosine(pooled.data, self.cfg.knn_k)
        return finalize_adjacency(w_bar, w_knn, self.cfg.epsilon, self.cfg.kappa)


def write_adjacency_csv(matrix: np.ndarray, path) -> None:
    """Row-major N x N CSV with 6 decimal places."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ShapeError(f"expected a square matrix, got {matrix.shape}")
    with open(path, "w") as fh:
        for row in matrix:
            fh.write(",".join(f"{v:.6f}" for v in row) + "\n")
