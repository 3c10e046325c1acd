"""
Two-layer GCN encoders and attention pooling with explicit backward passes.

Layout is nodes-by-features everywhere: a view's features X are N x d_in and
its embeddings Z are N x d_out. One GcnParams/AttentionParams pair exists per
feature family and is shared by both augmentations of that family.
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import softmax

from config import EncoderConfig
from numerics import ContractViolation, Matrix, RngState, require
from views import FAMILIES, GraphView

SOFTMAX_TOL = 1e-9


# ============================================================================
# PARAMETERS
# ============================================================================

def glorot_uniform(fan_in: int, fan_out: int, rng: RngState) -> Matrix:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class GcnParams:
    """Weights of one family's encoder.

    ``version`` is bumped by whoever mutates W1/W2 in place; forward caches
    remember the version they were computed at.
    """
    W1: Matrix
    W2: Matrix
    family: str
    version: int = 0

    def __post_init__(self):
        require(self.family in FAMILIES, f"unknown feature family {self.family!r}")
        require(self.W1.ndim == 2 and self.W2.ndim == 2 and self.W1.shape[1] == self.W2.shape[0],
                f"W1 {self.W1.shape} and W2 {self.W2.shape} do not chain")

    @property
    def d_out(self) -> int:
        return self.W2.shape[1]

    def bump(self) -> None:
        self.version += 1


@dataclass
class AttentionParams:
    """Scoring vector M (d_out x 1) of one family."""
    M: Matrix
    family: str

    def __post_init__(self):
        require(self.M.ndim == 2 and self.M.shape[1] == 1, f"M must be d_out x 1, got {self.M.shape}")


def init_encoder(family: str, d_in: int, cfg: EncoderConfig, rng: RngState):
    """Glorot-initialized (GcnParams, AttentionParams) for one family."""
    params = GcnParams(W1=glorot_uniform(d_in, cfg.hidden_dim, rng),
                       W2=glorot_uniform(cfg.hidden_dim, cfg.output_dim, rng),
                       family=family)
    attention = AttentionParams(M=glorot_uniform(cfg.output_dim, 1, rng), family=family)
    return params, attention


# ============================================================================
# GCN
# ============================================================================

@dataclass
class GcnCache:
    params: GcnParams
    version: int
    A_hat: Matrix
    AX: Matrix
    P1: Matrix
    H1: Matrix
    P2: Matrix


@dataclass
class NodeEmbeddings:
    Z: Matrix
    view_id: int
    cache: Optional[GcnCache] = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.Z.shape[0]


@dataclass
class GcnGrads:
    W1: Matrix
    W2: Matrix
    X: Matrix


def relu(x: Matrix) -> Matrix:
    return np.maximum(x, 0.0)


def gcn_forward(view: GraphView, p: GcnParams, view_id: int = 1) -> NodeEmbeddings:
    """Z = ReLU(A_hat ReLU(A_hat X W1) W2), with intermediates cached."""
    X = view.features
    if X.shape[1] != p.W1.shape[0]:
        raise ContractViolation(
            f"view features have {X.shape[1]} columns but W1 expects {p.W1.shape[0]}")
    A_hat = view.norm_adjacency

    AX = A_hat @ X
    P1 = AX @ p.W1
    H1 = relu(P1)
    P2 = A_hat @ (H1 @ p.W2)
    Z = relu(P2)

    cache = GcnCache(params=p, version=p.version, A_hat=A_hat, AX=AX, P1=P1, H1=H1, P2=P2)
    return NodeEmbeddings(Z=Z, view_id=view_id, cache=cache)


def gcn_backward(grad_Z: Matrix, cache: Optional[GcnCache]) -> GcnGrads:
    """Gradients of a scalar loss wrt W1, W2 and X given dL/dZ.

    ReLU's subgradient at 0 is taken as 0.
    """
    if cache is None:
        raise ContractViolation("gcn_backward needs the cache of a forward pass")
    if cache.version != cache.params.version:
        raise ContractViolation(
            f"stale forward cache: computed at parameter version {cache.version}, "
            f"parameters are now at version {cache.params.version}")
    require(grad_Z.shape == cache.P2.shape,
            f"grad_Z shape {grad_Z.shape} does not match embeddings {cache.P2.shape}")

    A_t = cache.A_hat.T
    dP2 = grad_Z * (cache.P2 > 0)
    dHW = A_t @ dP2
    gW2 = cache.H1.T @ dHW
    dP1 = (dHW @ cache.params.W2.T) * (cache.P1 > 0)
    gW1 = cache.AX.T @ dP1
    gX = A_t @ (dP1 @ cache.params.W1.T)
    return GcnGrads(W1=gW1, W2=gW2, X=gX)


# ============================================================================
# POOLING
# ============================================================================

@dataclass
class PoolCache:
    Z: Matrix
    M: Optional[Matrix]
    t: Optional[np.ndarray]
    alpha: np.ndarray
    perm: Optional[np.ndarray]


@dataclass
class GraphRepresentation:
    S: np.ndarray
    alpha: np.ndarray
    cache: Optional[PoolCache] = field(default=None, repr=False)


@dataclass
class PoolGrads:
    M: Optional[Matrix]
    Z: Matrix


def _as_matrix(Z) -> Matrix:
    return Z.Z if isinstance(Z, NodeEmbeddings) else np.asarray(Z, dtype=np.float64)


def _pooled(Z: Matrix, alpha: np.ndarray, perm: Optional[np.ndarray]) -> np.ndarray:
    values = Z if perm is None else Z[perm]
    return alpha @ values


def attention_pool(Z, a: AttentionParams, perm: Optional[np.ndarray] = None) -> GraphRepresentation:
    """
    Attention-weighted global representation.

    alpha = softmax(tanh(Z M)) over nodes and S = sum_i alpha_i z_i. With
    ``perm`` the scores still come from Z but the weighted sum runs over the
    rows Z[perm], which is how corrupted representations are formed.
    """
    Z = _as_matrix(Z)
    require(Z.ndim == 2 and Z.shape[0] >= 1, "attention_pool needs at least one node")
    require(Z.shape[1] == a.M.shape[0], f"embedding dim {Z.shape[1]} does not match M {a.M.shape}")

    t = np.tanh(Z @ a.M[:, 0])
    alpha = softmax(t)
    if abs(alpha.sum() - 1.0) > SOFTMAX_TOL:
        raise ContractViolation("attention weights do not sum to 1")
    return GraphRepresentation(S=_pooled(Z, alpha, perm), alpha=alpha,
                               cache=PoolCache(Z=Z, M=a.M, t=t, alpha=alpha, perm=perm))


def mean_pool(Z, perm: Optional[np.ndarray] = None) -> GraphRepresentation:
    """Uniform pooling used when attention is switched off."""
    Z = _as_matrix(Z)
    alpha = np.full(Z.shape[0], 1.0 / Z.shape[0])
    return GraphRepresentation(S=_pooled(Z, alpha, perm), alpha=alpha,
                               cache=PoolCache(Z=Z, M=None, t=None, alpha=alpha, perm=perm))


def attention_pool_backward(grad_S: np.ndarray, cache: Optional[PoolCache]) -> PoolGrads:
    """Gradients wrt M and Z through the weighted sum, softmax and tanh."""
    if cache is None:
        raise ContractViolation("attention_pool_backward needs the cache of a forward pass")
    grad_S = np.asarray(grad_S, dtype=np.float64)
    require(grad_S.shape == (cache.Z.shape[1],),
            f"grad_S shape {grad_S.shape} does not match embedding dim {cache.Z.shape[1]}")

    alpha = cache.alpha
    d_values = np.outer(alpha, grad_S)
    grad_Z = np.zeros_like(cache.Z)
    if cache.perm is None:
        grad_Z += d_values
    else:
        grad_Z[cache.perm] += d_values

    if cache.M is None:
        return PoolGrads(M=None, Z=grad_Z)

    values = cache.Z if cache.perm is None else cache.Z[cache.perm]
    d_alpha = values @ grad_S
    d_t = alpha * (d_alpha - alpha @ d_alpha)
    d_u = d_t * (1.0 - cache.t ** 2)
    grad_Z += np.outer(d_u, cache.M[:, 0])
    grad_M = (cache.Z.T @ d_u)[:, None]
    return PoolGrads(M=grad_M, Z=grad_Z)
