"""
Affinity construction, normalized spectral clustering and evaluation metrics.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Union

import numpy as np
from sklearn.metrics import cohen_kappa_score, normalized_mutual_info_score
from sklearn.metrics.cluster import contingency_matrix
from sklearn.preprocessing import normalize

from logging_config import get_logger, log_function_call
from numerics import InvariantViolation, Matrix, RngState, hungarian_best_match, kmeans, require, sym_eig

logger = get_logger('clustering')

DEGREE_FLOOR = 1e-12


@dataclass
class AffinityMatrix:
    """Symmetric, nonnegative, zero-diagonal affinity."""
    W: Matrix

    def __post_init__(self):
        W = self.W
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise InvariantViolation(f"affinity must be square, got {W.shape}")
        if not np.array_equal(W, W.T) or np.any(W < 0) or np.any(np.diag(W) != 0):
            raise InvariantViolation("affinity must be symmetric, nonnegative and zero on the diagonal")


@dataclass
class ClusteringResult:
    labels: np.ndarray
    k: int
    empty_clusters: List[int] = field(default_factory=list)


@dataclass
class MetricsReport:
    oa: float
    nmi: float
    kappa: float
    confusion: Matrix
    matched_permutation: np.ndarray
    class_ids: np.ndarray
    per_class_accuracy: Dict[int, float] = field(default_factory=dict)

    def to_text(self) -> str:
        """key = value lines: oa, nmi, kappa, then one line per class."""
        lines = [f"oa = {self.oa:.6f}", f"nmi = {self.nmi:.6f}", f"kappa = {self.kappa:.6f}"]
        lines.extend(f"class_{cls} = {acc:.6f}" for cls, acc in self.per_class_accuracy.items())
        return '\n'.join(lines) + '\n'


# ============================================================================
# AFFINITY
# ============================================================================

def _keep_top_per_column(absC: Matrix, q: int) -> Matrix:
    n = absC.shape[0]
    if q >= n:
        return absC
    order = np.argsort(-absC, axis=0, kind='stable')[:q]
    kept = np.zeros_like(absC)
    cols = np.broadcast_to(np.arange(n), order.shape)
    kept[order, cols] = absC[order, cols]
    return kept


def affinity_from_C(C: Matrix, topq: Optional[int] = None) -> AffinityMatrix:
    """W = (|C| + |C|^T) / 2, optionally after keeping the q largest |c_ij| per column."""
    C = np.asarray(C, dtype=np.float64)
    require(C.ndim == 2 and C.shape[0] == C.shape[1], f"C must be square, got {C.shape}")
    require(np.all(np.diag(C) == 0), "C must have a zero diagonal")
    absC = np.abs(C)
    if topq is not None:
        absC = _keep_top_per_column(absC, topq)
    return AffinityMatrix(W=0.5 * (absC + absC.T))


# ============================================================================
# SPECTRAL CLUSTERING
# ============================================================================

@log_function_call
def spectral_cluster(W: Union[AffinityMatrix, Matrix], k: int, rng: RngState,
                     n_init: int = 10, max_iter: int = 300) -> ClusteringResult:
    """
    Normalized symmetric spectral clustering.

    Eigenvectors of the k smallest eigenvalues of I - D^-1/2 W D^-1/2 are
    row-normalized (zero rows stay zero) and grouped with k-means.
    """
    W = W.W if isinstance(W, AffinityMatrix) else np.asarray(W, dtype=np.float64)
    n = W.shape[0]
    require(k >= 2, f"spectral clustering needs k >= 2, got {k}")
    require(k <= n, f"k={k} exceeds the {n} nodes")

    degrees = W.sum(axis=1)
    if not np.any(degrees > 0):
        logger.warning("Affinity is all zero; cluster labels will be arbitrary")
    inv_sqrt = 1.0 / np.sqrt(np.maximum(degrees, DEGREE_FLOOR))
    laplacian = np.eye(n) - inv_sqrt[:, None] * W * inv_sqrt[None, :]
    laplacian = 0.5 * (laplacian + laplacian.T)

    _, vectors = sym_eig(laplacian, n_smallest=k)
    embedding = normalize(vectors, norm='l2', axis=1)
    result = kmeans(embedding, k, rng, n_init=n_init, max_iter=max_iter)

    empty = [c for c in range(k) if not np.any(result.labels == c)]
    if empty:
        logger.warning(f"Spectral clustering left clusters {empty} empty")
    return ClusteringResult(labels=result.labels, k=k, empty_clusters=empty)


# ============================================================================
# METRICS
# ============================================================================

def evaluate(pred: Union[ClusteringResult, np.ndarray], truth: np.ndarray,
             nmi_norm: str = 'arithmetic') -> MetricsReport:
    """
    OA after optimal cluster-to-class matching, NMI, and Kappa on aligned labels.

    The confusion matrix is classes x clusters, zero-padded to square before
    matching; clusters left unmatched count as errors.
    """
    pred = np.asarray(pred.labels if isinstance(pred, ClusteringResult) else pred)
    truth = np.asarray(truth)
    require(pred.shape == truth.shape and pred.ndim == 1,
            f"prediction length {pred.shape} does not match truth {truth.shape}")
    require(truth.size > 0, "cannot evaluate an empty labeling")

    class_ids = np.unique(truth)
    cluster_ids = np.unique(pred)
    table = contingency_matrix(truth, pred)
    size = max(table.shape)
    confusion = np.zeros((size, size))
    confusion[:table.shape[0], :table.shape[1]] = table

    perm, matched = hungarian_best_match(confusion)
    oa = matched / truth.size

    # cluster id -> class index it was matched to; -1 when unmatched
    cluster_to_class = np.full(cluster_ids.size, -1)
    for class_index in range(class_ids.size):
        if perm[class_index] < cluster_ids.size:
            cluster_to_class[perm[class_index]] = class_index
    aligned = cluster_to_class[np.searchsorted(cluster_ids, pred)]
    truth_index = np.searchsorted(class_ids, truth)

    if np.array_equal(aligned, truth_index):
        kappa = 1.0
    else:
        kappa = float(cohen_kappa_score(truth_index, aligned))
        if not np.isfinite(kappa):
            kappa = 0.0

    nmi = float(normalized_mutual_info_score(truth, pred, average_method=nmi_norm))
    per_class = {}
    for class_index, cls in enumerate(class_ids):
        row_total = table[class_index].sum()
        per_class[int(cls)] = float(confusion[class_index, perm[class_index]] / row_total)

    return MetricsReport(oa=float(oa), nmi=nmi, kappa=kappa, confusion=confusion,
                         matched_permutation=perm, class_ids=class_ids, per_class_accuracy=per_class)
