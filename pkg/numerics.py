"""
Dense numerical kernels shared by every pipeline stage.

Matrices are float64 numpy arrays throughout. Randomness always flows through
an explicit ``numpy.random.Generator`` built on PCG64 so that a seed plus a call
sequence fixes every output.
"""
import warnings
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import scipy.linalg
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans
from sklearn.decomposition import PCA
from sklearn.exceptions import ConvergenceWarning

from logging_config import get_logger

logger = get_logger('numerics')

Matrix = np.ndarray
RngState = np.random.Generator

SYMMETRY_TOL = 1e-9


# ============================================================================
# ERRORS
# ============================================================================

class MLGSCError(Exception):
    """Base class for every error raised by the toolkit."""
    exit_code = 3


class ContractViolation(MLGSCError, ValueError):
    """A precondition on shapes, ranges or arguments does not hold."""


class InvariantViolation(MLGSCError):
    """An internal invariant was found broken."""
    exit_code = 4


class NumericFailure(MLGSCError, ArithmeticError):
    """A computation diverged, failed to converge or produced non-finite values."""
    exit_code = 4


class DegenerateInputError(MLGSCError, ValueError):
    """Input is valid in shape but degenerate for the requested operation."""


def require(condition: bool, message: str) -> None:
    """Raise ContractViolation unless ``condition`` holds."""
    if not condition:
        raise ContractViolation(message)


def check_finite(name: str, array) -> None:
    """Raise NumericFailure when ``array`` holds NaN or Inf."""
    if not np.all(np.isfinite(array)):
        raise NumericFailure(f"{name} contains non-finite values")


# ============================================================================
# RANDOMNESS
# ============================================================================

def make_rng(seed: int) -> RngState:
    """Seeded PCG64 generator; the only generator family used in the repo."""
    return np.random.Generator(np.random.PCG64(seed))


def split_rng(rng: RngState, count: int) -> List[RngState]:
    """Independent child generators drawn deterministically from a parent."""
    seeds = rng.integers(0, 2 ** 63, size=count, dtype=np.uint64)
    return [make_rng(int(seed)) for seed in seeds]


RNG_STREAMS = {'scene': 0, 'views': 1, 'train': 2, 'cluster': 3}


def stream_rng(seed: int, stream: str) -> RngState:
    """Generator for one stage of a run; streams of the same seed are independent."""
    sequence = np.random.SeedSequence(seed, spawn_key=(RNG_STREAMS[stream],))
    return np.random.Generator(np.random.PCG64(sequence))


def draw_seed(rng: RngState) -> int:
    """Integer seed for libraries that take ``random_state``."""
    return int(rng.integers(0, 2 ** 31 - 1))


# ============================================================================
# LINEAR ALGEBRA
# ============================================================================

def _fix_signs(vectors: Matrix) -> Matrix:
    # largest-magnitude entry of each column made positive (first one on ties)
    pivots = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivots, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def sym_eig(m: Matrix, n_smallest: Optional[int] = None) -> Tuple[np.ndarray, Matrix]:
    """
    Eigendecomposition of a symmetric matrix.

    Args:
        m: square matrix, symmetric within 1e-9
        n_smallest: when given, only the eigenpairs of the n smallest eigenvalues

    Returns:
        (eigenvalues ascending, column-orthonormal eigenvectors) with a
        deterministic sign per eigenvector

    Raises:
        ContractViolation: non-square or asymmetric input
        NumericFailure: the LAPACK driver did not converge
    """
    m = np.asarray(m, dtype=np.float64)
    require(m.ndim == 2 and m.shape[0] == m.shape[1], f"sym_eig needs a square matrix, got shape {m.shape}")
    check_finite('sym_eig input', m)
    asymmetry = np.max(np.abs(m - m.T)) if m.size else 0.0
    require(asymmetry <= SYMMETRY_TOL, f"sym_eig needs a symmetric matrix (max asymmetry {asymmetry:.3g})")

    n = m.shape[0]
    subset = None
    if n_smallest is not None:
        require(1 <= n_smallest <= n, f"n_smallest must lie in [1, {n}], got {n_smallest}")
        subset = (0, n_smallest - 1)

    sym = 0.5 * (m + m.T)
    try:
        values, vectors = scipy.linalg.eigh(sym, subset_by_index=subset)
    except np.linalg.LinAlgError as e:
        logger.error(f"Eigensolver failed on a {n}x{n} matrix: {e}")
        raise NumericFailure(
            f"symmetric eigensolver did not converge within the LAPACK iteration cap (n={n})") from e

    return values, _fix_signs(vectors)


def ridge_solve(Z: Matrix, X: Matrix, lam: float) -> Matrix:
    """Solve min_C 1/2||ZC - X||_F^2 + lam/2 ||C||_F^2, i.e. C = (Z^T Z + lam I)^-1 Z^T X."""
    require(lam > 0, f"ridge lambda must be > 0, got {lam}")
    Z = np.asarray(Z, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    require(Z.ndim == 2 and X.ndim == 2 and Z.shape[0] == X.shape[0],
            f"ridge_solve shapes do not conform: Z {Z.shape}, X {X.shape}")

    gram = Z.T @ Z
    gram[np.diag_indices_from(gram)] += lam
    return scipy.linalg.solve(gram, Z.T @ X, assume_a='pos')


@dataclass
class PcaResult:
    """Projection of samples on their leading principal axes."""
    scores: Matrix
    components: Matrix
    explained_variance: np.ndarray
    mean: np.ndarray

    def reconstruct(self) -> Matrix:
        return self.scores @ self.components + self.mean


def pca_fit_transform(X: Matrix, n_components: int) -> PcaResult:
    """PCA with a deterministic full SVD; zero-variance input reports zero variance."""
    X = np.asarray(X, dtype=np.float64)
    require(X.ndim == 2, f"PCA input must be 2-D, got shape {X.shape}")
    require(1 <= n_components <= min(X.shape),
            f"n_components must lie in [1, {min(X.shape)}], got {n_components}")
    check_finite('PCA input', X)

    pca = PCA(n_components=n_components, svd_solver='full')
    with warnings.catch_warnings(), np.errstate(divide='ignore', invalid='ignore'):
        warnings.simplefilter('ignore', RuntimeWarning)
        scores = pca.fit_transform(X)

    explained = np.clip(np.nan_to_num(pca.explained_variance_, nan=0.0), 0.0, None)
    return PcaResult(scores=scores, components=pca.components_,
                     explained_variance=explained, mean=pca.mean_)


# ============================================================================
# COMBINATORIAL KERNELS
# ============================================================================

@dataclass
class KMeansResult:
    labels: np.ndarray
    inertia: float
    centers: Matrix


def kmeans(X: Matrix, k: int, rng: RngState, n_init: int = 10, max_iter: int = 300) -> KMeansResult:
    """Lloyd k-means with k-means++ seeding, best of ``n_init`` restarts."""
    X = np.asarray(X, dtype=np.float64)
    require(X.ndim == 2, f"k-means input must be 2-D, got shape {X.shape}")
    require(1 <= k <= X.shape[0], f"k-means needs 1 <= k <= n, got k={k}, n={X.shape[0]}")
    require(n_init >= 1 and max_iter >= 1, "n_init and max_iter must be >= 1")

    model = KMeans(n_clusters=k, init='k-means++', n_init=n_init, max_iter=max_iter,
                   algorithm='lloyd', random_state=draw_seed(rng))
    with warnings.catch_warnings():
        # duplicate points leave fewer distinct clusters than k; labels stay valid
        warnings.simplefilter('ignore', ConvergenceWarning)
        labels = model.fit_predict(X)

    return KMeansResult(labels=labels.astype(np.int64), inertia=float(model.inertia_),
                        centers=model.cluster_centers_)


def hungarian_best_match(confusion: Matrix) -> Tuple[np.ndarray, float]:
    """
    Optimal assignment maximizing the trace of a square count matrix.

    Returns:
        (perm, score) where perm[i] is the column matched to row i
    """
    confusion = np.asarray(confusion, dtype=np.float64)
    require(confusion.ndim == 2 and confusion.shape[0] == confusion.shape[1],
            f"confusion matrix must be square, got shape {confusion.shape}")
    require(np.all(confusion >= 0), "confusion matrix must be nonnegative")

    rows, cols = linear_sum_assignment(confusion, maximize=True)
    perm = np.empty(confusion.shape[0], dtype=np.int64)
    perm[rows] = cols
    return perm, float(confusion[rows, cols].sum())
