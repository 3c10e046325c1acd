"""
Feature views and their kNN graphs.

Two feature families are extracted from a cube: a morphological texture
profile and flattened spectral-spatial patches. Each family gets a kNN graph,
and two independent edge-drop augmentations of every graph give the four
GraphViews the encoders train on.
"""
from dataclasses import dataclass
from typing import List

import numpy as np
from scipy.spatial.distance import cdist
from skimage.morphology import closing, diamond, opening

from config import ViewConfig
from hsi_data import HsiCube, LabelMap
from logging_config import get_logger, log_function_call
from numerics import Matrix, RngState, InvariantViolation, pca_fit_transform, require, split_rng

logger = get_logger('views')

SPECTRAL_SPATIAL = 'spectral_spatial'
TEXTURE = 'texture'
FAMILIES = (SPECTRAL_SPATIAL, TEXTURE)

_KNN_CHUNK = 512


@dataclass
class GraphView:
    """One augmented view: node features plus its graph."""
    features: Matrix
    adjacency: Matrix
    norm_adjacency: Matrix
    feature_family: str
    augmentation_id: int
    base_adjacency: Matrix

    def __post_init__(self):
        require(self.feature_family in FAMILIES, f"unknown feature family {self.feature_family!r}")
        require(self.augmentation_id in (0, 1), "augmentation_id must be 0 or 1")
        n = self.features.shape[0]
        require(self.adjacency.shape == (n, n) and self.base_adjacency.shape == (n, n),
                f"adjacency shape does not match {n} nodes")
        check_graph(self.adjacency)

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]


def check_graph(A: Matrix) -> None:
    """Symmetric, zero-diagonal adjacency or InvariantViolation."""
    if not np.array_equal(A, A.T):
        raise InvariantViolation("adjacency matrix is not symmetric")
    if np.any(np.diag(A) != 0):
        raise InvariantViolation("adjacency matrix has a nonzero diagonal")


def _pca_images(cube: HsiCube, n_components: int) -> np.ndarray:
    result = pca_fit_transform(cube.pixels(), n_components)
    return result.scores.reshape(cube.height, cube.width, n_components)


# ============================================================================
# FEATURE FAMILIES
# ============================================================================

def morphological_profile(image: np.ndarray, radii) -> np.ndarray:
    """
    Grayscale opening and closing of a 2-D image for each radius.

    Uses city-block disks (diamonds) as structuring elements. Output has shape
    (height, width, 2 * len(radii)) ordered opening, closing per radius.
    """
    half_extent = min(image.shape) // 2
    responses = []
    for radius in radii:
        require(radius <= half_extent,
                f"structuring element radius {radius} exceeds the image half-extent {half_extent}")
        footprint = diamond(radius)
        responses.append(opening(image, footprint))
        responses.append(closing(image, footprint))
    return np.stack(responses, axis=-1).astype(np.float64)


def _unit_max_columns(features: Matrix) -> Matrix:
    scale = np.abs(features).max(axis=0)
    return features / np.where(scale > 0, scale, 1.0)


def build_texture_view(cube: HsiCube, cfg: ViewConfig) -> Matrix:
    """Per-pixel texture features, shape (height*width, pcs * radii * 2)."""
    require(cfg.pca_components_texture >= 1, "pca_components_texture must be >= 1")
    images = _pca_images(cube, cfg.pca_components_texture)
    profiles = [morphological_profile(images[:, :, c], cfg.se_radii) for c in range(images.shape[2])]
    features = np.concatenate(profiles, axis=-1).reshape(cube.height * cube.width, -1)
    return _unit_max_columns(features)


def extract_patches(image: np.ndarray, window_w: int) -> Matrix:
    """Flattened w x w x channels patches around every pixel, reflect-padded."""
    require(window_w >= 1 and window_w % 2 == 1, f"window_w must be odd, got {window_w}")
    pad = window_w // 2
    padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)), mode='reflect')
    windows = np.lib.stride_tricks.sliding_window_view(padded, (window_w, window_w), axis=(0, 1))
    # windows: (height, width, channels, w, w) -> (height, width, w, w, channels)
    windows = np.moveaxis(windows, 2, -1)
    height, width = image.shape[:2]
    return np.ascontiguousarray(windows).reshape(height * width, -1)


def build_spectral_spatial_view(cube: HsiCube, cfg: ViewConfig) -> Matrix:
    """Per-pixel spectral-spatial patches, shape (height*width, w*w*pcs)."""
    images = _pca_images(cube, cfg.pca_components_spectral)
    return extract_patches(images, cfg.window_w)


# ============================================================================
# GRAPHS
# ============================================================================

def knn_adjacency(features: Matrix, k: int) -> Matrix:
    """Binary kNN graph symmetrized by union; ties go to the lower index."""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    require(1 <= k < n, f"knn k must satisfy 1 <= k < N, got k={k}, N={n}")

    A = np.zeros((n, n), dtype=np.float64)
    for start in range(0, n, _KNN_CHUNK):
        stop = min(start + _KNN_CHUNK, n)
        distances = cdist(features[start:stop], features, metric='sqeuclidean')
        rows = np.arange(stop - start)
        distances[rows, rows + start] = np.inf
        neighbors = np.argsort(distances, axis=1, kind='stable')[:, :k]
        A[np.repeat(rows + start, k), neighbors.ravel()] = 1.0

    return np.maximum(A, A.T)


def augment_drop_edges(A: Matrix, delta: float, rng: RngState) -> Matrix:
    """Drop every undirected edge independently with probability ``delta``."""
    require(0.0 <= delta < 1.0, f"delta must lie in [0, 1), got {delta}")
    n = A.shape[0]
    rows, cols = np.triu_indices(n, k=1)
    present = A[rows, cols] > 0
    rows, cols = rows[present], cols[present]
    dropped = rng.random(rows.size) < delta

    out = A.copy()
    out[rows[dropped], cols[dropped]] = 0.0
    out[cols[dropped], rows[dropped]] = 0.0
    return out


def normalize_adjacency(A: Matrix) -> Matrix:
    """Symmetric GCN propagation matrix D^-1/2 (I + A) D^-1/2."""
    check_graph(A)
    with_loops = A + np.eye(A.shape[0])
    inv_sqrt = 1.0 / np.sqrt(with_loops.sum(axis=1))
    return inv_sqrt[:, None] * with_loops * inv_sqrt[None, :]


def augmented_pair(features: Matrix, base: Matrix, family: str, delta: float,
                   rngs: List[RngState]) -> List[GraphView]:
    """The two edge-dropped views of one feature family."""
    views = []
    for augmentation_id, rng in enumerate(rngs):
        adjacency = augment_drop_edges(base, delta, rng)
        views.append(GraphView(features=features, adjacency=adjacency,
                               norm_adjacency=normalize_adjacency(adjacency),
                               feature_family=family, augmentation_id=augmentation_id,
                               base_adjacency=base))
    return views


@log_function_call
def build_views(cube: HsiCube, labels: LabelMap, cfg: ViewConfig, rng: RngState) -> List[GraphView]:
    """
    Four views over the labeled pixels (row-major order).

    Views 1-2 are the spectral-spatial family, views 3-4 the texture family;
    the two members of a family differ only in their edge-drop draw.
    """
    require(labels.matches(cube), "label map and cube dimensions differ")
    index = labels.labeled_index()
    require(index.size >= 2, "at least two labeled pixels are needed to build graphs")

    spectral = build_spectral_spatial_view(cube, cfg)[index]
    texture = build_texture_view(cube, cfg)[index]
    augment_rngs = split_rng(rng, 4)

    views: List[GraphView] = []
    for family, features, pair_rngs in ((SPECTRAL_SPATIAL, spectral, augment_rngs[:2]),
                                        (TEXTURE, texture, augment_rngs[2:])):
        base = knn_adjacency(features, cfg.knn_k)
        views.extend(augmented_pair(features, base, family, cfg.drop_prob_delta, pair_rngs))
        logger.info(f"Built {family} views", extra={'extra_fields': {
            'n_nodes': int(index.size), 'feature_dim': int(features.shape[1]),
            'edges': int(base.sum() // 2)}})
    return views
