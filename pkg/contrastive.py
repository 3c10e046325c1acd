"""
Node-level and graph-level contrastive losses with analytic gradients.

Similarity is cosine scaled by 1/tau. Every loss returns a LossValue whose
``gradients`` dict is keyed by input name and holds arrays shaped like the
inputs.
"""
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp, softmax

from config import ContrastiveConfig
from encoder import AttentionParams, GraphRepresentation, attention_pool, mean_pool
from numerics import DegenerateInputError, Matrix, RngState, check_finite, require

ZERO_NORM = 1e-12


@dataclass
class LossValue:
    value: float
    gradients: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        check_finite('loss value', self.value)


# ============================================================================
# NORMALIZATION
# ============================================================================

def _unit_rows(Z: Matrix, policy: str, name: str) -> Tuple[Matrix, np.ndarray]:
    norms = np.linalg.norm(Z, axis=1)
    small = norms < ZERO_NORM
    if np.any(small):
        if policy == 'error':
            row = int(np.flatnonzero(small)[0])
            raise DegenerateInputError(f"{name} row {row} has zero norm; cosine similarity is undefined")
        norms = np.maximum(norms, ZERO_NORM)
    return Z / norms[:, None], norms


def _unit_rows_backward(U: Matrix, norms: np.ndarray, dU: Matrix) -> Matrix:
    dZ = (dU - U * np.sum(U * dU, axis=1, keepdims=True)) / norms[:, None]
    # clamped zero rows have no direction to move
    dZ[norms <= ZERO_NORM] = 0.0
    return dZ


# ============================================================================
# NODE LEVEL
# ============================================================================

def _masked_diagonal(S: Matrix) -> Matrix:
    out = S.copy()
    np.fill_diagonal(out, -np.inf)
    return out


def node_contrast(Z_a: Matrix, Z_b: Matrix, cfg: ContrastiveConfig) -> LossValue:
    """
    Symmetrized InfoNCE between two aligned embedding sets.

    For anchor z_i of one view the positive is its counterpart in the other
    view; negatives are every other node of both views. The loss is
    (1/2N) * sum_i [l(z_i, z'_i) + l(z'_i, z_i)].
    """
    Z_a = np.asarray(Z_a, dtype=np.float64)
    Z_b = np.asarray(Z_b, dtype=np.float64)
    require(Z_a.ndim == 2 and Z_a.shape == Z_b.shape,
            f"node_contrast needs equal shapes, got {Z_a.shape} and {Z_b.shape}")
    n = Z_a.shape[0]
    tau = cfg.tau

    U_a, norm_a = _unit_rows(Z_a, cfg.zero_norm_policy, 'Z_a')
    U_b, norm_b = _unit_rows(Z_b, cfg.zero_norm_policy, 'Z_b')

    S_ab = U_a @ U_b.T / tau
    S_aa = U_a @ U_a.T / tau
    S_bb = U_b @ U_b.T / tau

    logits_a = np.hstack([S_ab, _masked_diagonal(S_aa)])
    logits_b = np.hstack([S_ab.T, _masked_diagonal(S_bb)])
    positives = np.diag(S_ab)
    loss_a = logsumexp(logits_a, axis=1) - positives
    loss_b = logsumexp(logits_b, axis=1) - positives
    value = float((loss_a.sum() + loss_b.sum()) / (2 * n))

    P = softmax(logits_a, axis=1)
    Q = softmax(logits_b, axis=1)
    eye = np.eye(n)
    c = 1.0 / (2 * n)
    G_ab = c * ((P[:, :n] - eye) + (Q[:, :n] - eye).T)
    G_aa = c * P[:, n:]
    G_bb = c * Q[:, n:]

    dU_a = (G_ab @ U_b + (G_aa + G_aa.T) @ U_a) / tau
    dU_b = (G_ab.T @ U_a + (G_bb + G_bb.T) @ U_b) / tau

    return LossValue(value=value, gradients={
        'Z_a': _unit_rows_backward(U_a, norm_a, dU_a),
        'Z_b': _unit_rows_backward(U_b, norm_b, dU_b),
    })


def cnode_loss(pairs: Dict[str, Tuple[Matrix, Matrix]], cfg: ContrastiveConfig) -> LossValue:
    """Intra-view loss: each family's two augmentations contrasted, averaged over families."""
    require(len(pairs) >= 1, "cnode_loss needs at least one family")
    weight = 1.0 / len(pairs)
    value = 0.0
    gradients = {}
    for family, (Z0, Z1) in pairs.items():
        loss = node_contrast(Z0, Z1, cfg)
        value += weight * loss.value
        gradients[family] = (weight * loss.gradients['Z_a'], weight * loss.gradients['Z_b'])
    return LossValue(value=value, gradients=gradients)


def dnode_loss(spectral: Tuple[Matrix, Matrix], texture: Tuple[Matrix, Matrix],
               cfg: ContrastiveConfig, pairing: str = 'mean') -> LossValue:
    """
    Inter-view loss between the spectral-spatial and texture embeddings.

    ``mean`` contrasts the two family means; ``all_pairs`` averages the four
    cross-family augmentation pairs.
    """
    if pairing == 'mean':
        loss = node_contrast(0.5 * (spectral[0] + spectral[1]), 0.5 * (texture[0] + texture[1]), cfg)
        g_s, g_t = 0.5 * loss.gradients['Z_a'], 0.5 * loss.gradients['Z_b']
        return LossValue(value=loss.value, gradients={
            'spectral_spatial': (g_s, g_s.copy()), 'texture': (g_t, g_t.copy())})

    require(pairing == 'all_pairs', f"unknown inter_view_pairing {pairing!r}")
    g_spec = [np.zeros_like(spectral[0]), np.zeros_like(spectral[1])]
    g_tex = [np.zeros_like(texture[0]), np.zeros_like(texture[1])]
    value = 0.0
    for i in range(2):
        for j in range(2):
            loss = node_contrast(spectral[i], texture[j], cfg)
            value += 0.25 * loss.value
            g_spec[i] += 0.25 * loss.gradients['Z_a']
            g_tex[j] += 0.25 * loss.gradients['Z_b']
    return LossValue(value=value, gradients={
        'spectral_spatial': tuple(g_spec), 'texture': tuple(g_tex)})


# ============================================================================
# GRAPH LEVEL
# ============================================================================

def graph_contrast(S_pos_pairs: Sequence[Tuple[np.ndarray, np.ndarray]],
                   S_negatives: Sequence[np.ndarray], cfg: ContrastiveConfig) -> LossValue:
    """
    InfoNCE over global representations.

    Each pair (s_i, s_j) scores -log(exp(s_i.s_j/tau) / (exp(s_i.s_j/tau) +
    sum_n exp(s_i.n/tau))) on L2-normalized vectors; the loss is the mean over
    pairs. Gradients come back as ``pairs`` (list of (g_i, g_j)) and
    ``negatives`` (list).
    """
    require(len(S_pos_pairs) >= 1, "graph_contrast needs at least one positive pair")
    tau = cfg.tau
    policy = cfg.zero_norm_policy

    pair_units = [(_unit_rows(np.atleast_2d(si), policy, f'pair {k} first'),
                   _unit_rows(np.atleast_2d(sj), policy, f'pair {k} second'))
                  for k, (si, sj) in enumerate(S_pos_pairs)]
    dims = {u[0].shape[1] for pair in pair_units for u in pair}
    if S_negatives:
        N_raw = np.vstack([np.atleast_2d(n) for n in S_negatives])
        N_unit, N_norms = _unit_rows(N_raw, policy, 'negatives')
        dims.add(N_unit.shape[1])
    require(len(dims) == 1, "graph_contrast vectors must all have equal length")

    n_pairs = len(pair_units)
    value = 0.0
    pair_grads: List[Tuple[np.ndarray, np.ndarray]] = []
    dN = np.zeros_like(N_unit) if S_negatives else None

    for (U_i, norm_i), (U_j, norm_j) in pair_units:
        u_i, u_j = U_i[0], U_j[0]
        positive = u_i @ u_j / tau
        if S_negatives:
            logits = np.concatenate([[positive], N_unit @ u_i / tau])
            value += (logsumexp(logits) - positive) / n_pairs
            q = softmax(logits)
            d_pos = (q[0] - 1.0) / n_pairs
            d_neg = q[1:] / n_pairs
            du_i = (d_pos * u_j + d_neg @ N_unit) / tau
            dN += np.outer(d_neg, u_i) / tau
        else:
            d_pos = 0.0
            du_i = np.zeros_like(u_i)
        du_j = d_pos * u_i / tau
        pair_grads.append((_unit_rows_backward(U_i, norm_i, du_i[None, :])[0],
                           _unit_rows_backward(U_j, norm_j, du_j[None, :])[0]))

    negative_grads = []
    if S_negatives:
        negative_grads = list(_unit_rows_backward(N_unit, N_norms, dN))
    return LossValue(value=float(value), gradients={'pairs': pair_grads, 'negatives': negative_grads})


def corrupt_graph_representation(Z, a: Optional[AttentionParams], rng: RngState) -> GraphRepresentation:
    """
    Global representation of a row-shuffled embedding set.

    Attention scores are taken from the unshuffled rows and applied to the
    shuffled ones, so each weight lands on the wrong node. ``a=None`` uses
    uniform pooling. The corrupted vector is ``result.S``.
    """
    Z = getattr(Z, 'Z', Z)
    require(Z.shape[0] >= 2, "corruption needs at least two nodes")
    perm = rng.permutation(Z.shape[0])
    if a is None:
        return mean_pool(Z, perm=perm)
    return attention_pool(Z, a, perm=perm)
