"""
Softmax fusion of per-family node embeddings and the self-expression layer.

The fused matrix F_s (N x d) is transposed into the features-by-nodes
dictionary X = F_s^T, propagated with the normalized adjacency A_bar and
reconstructed through the coefficient matrix C whose diagonal is pinned to 0.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from scipy.special import softmax
from sklearn.preprocessing import normalize

from contrastive import LossValue
from logging_config import get_logger
from numerics import InvariantViolation, Matrix, check_finite, require, ridge_solve
from views import SPECTRAL_SPATIAL, TEXTURE, GraphView, normalize_adjacency

logger = get_logger('fusion_sx')

ORACLE_MAX_NODES = 200


# ============================================================================
# FUSION
# ============================================================================

@dataclass
class FusionOutput:
    """Fused embeddings plus the per-family weights (K x N x d)."""
    weights: np.ndarray
    fused: Matrix
    granularity: str = 'coordinate'
    inputs: List[Matrix] = field(default_factory=list, repr=False)


def fuse_families(embeddings: Sequence[Matrix], granularity: str = 'coordinate') -> FusionOutput:
    """
    Softmax-weighted sum over any number of families.

    ``coordinate`` takes the softmax across families for every node and
    coordinate separately; ``node`` uses one weight per node and family,
    computed from the mean coordinate.
    """
    require(len(embeddings) >= 1, "fusion needs at least one family")
    stack = np.stack([np.asarray(Z, dtype=np.float64) for Z in embeddings])
    require(all(Z.shape == stack.shape[1:] for Z in stack), "fused embeddings must share a shape")

    require(granularity in ('coordinate', 'node'), f"unknown fusion granularity {granularity!r}")
    if granularity == 'coordinate':
        weights = softmax(stack, axis=0)
    else:
        weights = np.broadcast_to(softmax(stack.mean(axis=2), axis=0)[:, :, None], stack.shape).copy()

    fused = np.sum(weights * stack, axis=0)
    return FusionOutput(weights=weights, fused=fused, granularity=granularity, inputs=list(stack))


def fuse(Z_spec: Matrix, Z_tex: Matrix, granularity: str = 'coordinate') -> FusionOutput:
    """Two-family fusion: spectral-spatial first, texture second."""
    Z_spec = np.asarray(Z_spec, dtype=np.float64)
    Z_tex = np.asarray(Z_tex, dtype=np.float64)
    require(Z_spec.shape == Z_tex.shape,
            f"fusion inputs differ in shape: {Z_spec.shape} vs {Z_tex.shape}")
    return fuse_families([Z_spec, Z_tex], granularity)


def fuse_backward(grad_F: Matrix, out: FusionOutput) -> List[Matrix]:
    """Gradient wrt each family's embeddings, in input order."""
    grads = []
    for m_k, Z_k in zip(out.weights, out.inputs):
        through_logits = grad_F * m_k * (Z_k - out.fused)
        if out.granularity == 'node':
            through_logits = np.broadcast_to(
                through_logits.mean(axis=1, keepdims=True), Z_k.shape)
        grads.append(grad_F * m_k + through_logits)
    return grads


# ============================================================================
# SELF-EXPRESSION
# ============================================================================

@dataclass
class SelfExpressionState:
    """Trainable coefficients C (N x N, zero diagonal) and the ridge weight."""
    C: Matrix
    lam: float
    dictionary: Optional[Matrix] = field(default=None, repr=False)
    target: Optional[Matrix] = field(default=None, repr=False)

    def __post_init__(self):
        require(self.lam > 0, f"self-expression lambda must be > 0, got {self.lam}")
        require(self.C.ndim == 2 and self.C.shape[0] == self.C.shape[1], "C must be square")
        self.check_diagonal()

    @classmethod
    def all_ones(cls, n: int, lam: float) -> 'SelfExpressionState':
        C = np.ones((n, n))
        np.fill_diagonal(C, 0.0)
        return cls(C=C, lam=lam)

    @property
    def n_nodes(self) -> int:
        return self.C.shape[0]

    def check_diagonal(self) -> None:
        if np.any(np.diag(self.C) != 0):
            raise InvariantViolation("self-expression matrix C has a nonzero diagonal")

    def zero_diagonal(self) -> None:
        np.fill_diagonal(self.C, 0.0)


def sx_adjacency(views: Sequence[GraphView], mode: str = 'spectral') -> Matrix:
    """
    A_bar for the dictionary: normalized (I + A) of an unaugmented graph.

    Falls back to whichever family is present when only one is.
    """
    bases = {}
    for view in views:
        bases.setdefault(view.feature_family, view.base_adjacency)
    require(bases, "no views to take an adjacency from")

    if mode == 'mean' and len(bases) == 2:
        return 0.5 * (normalize_adjacency(bases[SPECTRAL_SPATIAL]) + normalize_adjacency(bases[TEXTURE]))
    preferred = TEXTURE if mode == 'texture' else SPECTRAL_SPATIAL
    family = preferred if preferred in bases else next(iter(bases))
    if family != preferred:
        logger.warning(f"sx_adjacency={mode} unavailable, using the {family} graph")
    return normalize_adjacency(bases[family])


def self_expression_loss(F_s: Matrix, A_bar: Matrix, C: SelfExpressionState) -> LossValue:
    """
    L_SE = 1/2 ||Z C - X||_F^2 + lambda/2 ||C||_F^2 with X = F_s^T, Z = X A_bar.

    The C gradient has its diagonal zeroed so updates keep the mask.
    """
    C.check_diagonal()
    F_s = np.asarray(F_s, dtype=np.float64)
    n = C.n_nodes
    require(F_s.ndim == 2 and F_s.shape[0] == n, f"F_s has {F_s.shape[0]} rows for {n} coefficients")
    require(A_bar.shape == (n, n), f"A_bar shape {A_bar.shape} does not match {n} nodes")

    X = F_s.T
    Z = X @ A_bar
    C.dictionary, C.target = Z, X
    R = Z @ C.C - X
    value = 0.5 * float(np.sum(R * R)) + 0.5 * C.lam * float(np.sum(C.C * C.C))

    grad_C = Z.T @ R + C.lam * C.C
    np.fill_diagonal(grad_C, 0.0)
    grad_X = (R @ C.C.T) @ A_bar.T - R
    return LossValue(value=value, gradients={'C': grad_C, 'F_s': grad_X.T})


# Dictionary rows have unit length; row scale receives no self-expression gradient.

def unit_rows(F_s: Matrix) -> Tuple[Matrix, np.ndarray]:
    """Rows scaled to unit L2 norm plus the norms used; zero rows stay zero."""
    return normalize(np.asarray(F_s, dtype=np.float64), norm='l2', axis=1, return_norm=True)


def unit_rows_backward(grad_U: Matrix, U: Matrix, norms: np.ndarray) -> Matrix:
    """(g - u (u . g)) / ||f|| per row; the result is orthogonal to every row."""
    radial = np.sum(grad_U * U, axis=1, keepdims=True)
    return (grad_U - U * radial) / norms[:, None]


def coefficient_step(C: SelfExpressionState) -> float:
    """
    One projected gradient step on L_SE at the last evaluated dictionary.

    The step is 1 / (sigma_max(Z)^2 + lambda), the inverse Lipschitz constant
    of the C gradient, so each step shrinks the distance to the zero-diagonal
    ridge optimum by a factor of at most 1 - lambda / (sigma_max(Z)^2 + lambda).
    Returns the step size.
    """
    require(C.dictionary is not None and C.target is not None,
            "coefficient_step needs a self-expression loss evaluated first")
    Z, X = C.dictionary, C.target
    grad = Z.T @ (Z @ C.C - X) + C.lam * C.C
    np.fill_diagonal(grad, 0.0)
    top = float(scipy.linalg.eigvalsh(Z @ Z.T)[-1]) if Z.shape[0] else 0.0
    step = 1.0 / (max(top, 0.0) + C.lam)
    C.C -= step * grad
    C.zero_diagonal()
    return step


# ============================================================================
# REFERENCE SOLVERS
# ============================================================================

def masked_ridge_oracle(Z: Matrix, X: Matrix, lam: float) -> Matrix:
    """Column-by-column solve of the zero-diagonal ridge problem (small N only)."""
    Z = np.asarray(Z, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    n = Z.shape[1]
    require(n <= ORACLE_MAX_NODES, f"masked_ridge_oracle is capped at {ORACLE_MAX_NODES} nodes, got {n}")
    require(X.shape == Z.shape, f"Z {Z.shape} and X {X.shape} must match")

    C = np.zeros((n, n))
    for j in range(n):
        others = np.delete(np.arange(n), j)
        if others.size:
            C[others, j] = ridge_solve(Z[:, others], X[:, [j]], lam)[:, 0]
    return C


def masked_ridge_closed_form(Z: Matrix, X: Matrix, lam: float) -> Matrix:
    """
    All columns of the zero-diagonal ridge problem in one factorization.

    With P = (Z^T Z + lam I)^-1 and B = P Z^T X, the constrained solution is
    C = B - P diag(mu) where mu_j = B_jj / P_jj.
    """
    require(lam > 0, f"ridge lambda must be > 0, got {lam}")
    Z = np.asarray(Z, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    require(X.shape == Z.shape, f"Z {Z.shape} and X {X.shape} must match")

    gram = Z.T @ Z
    gram[np.diag_indices_from(gram)] += lam
    factor = scipy.linalg.cho_factor(gram)
    B = scipy.linalg.cho_solve(factor, Z.T @ X)
    P = scipy.linalg.cho_solve(factor, np.eye(gram.shape[0]))

    mu = np.diag(B) / np.diag(P)
    C = B - P * mu[None, :]
    np.fill_diagonal(C, 0.0)
    check_finite('closed-form coefficients', C)
    return C


def coefficients_from_features(F_s: Matrix, A_bar: Matrix, lam: float, unit: bool = False) -> Matrix:
    """Closed-form C for fused features under the dictionary X A_bar; ``unit`` normalizes rows first."""
    F_s = unit_rows(F_s)[0] if unit else np.asarray(F_s, dtype=np.float64)
    X = F_s.T
    return masked_ridge_closed_form(X @ A_bar, X, lam)
