"""
Shared builders for small training fixtures.
"""
from typing import List

import numpy as np

from config import EncoderConfig, TrainConfig
from numerics import make_rng, split_rng
from views import SPECTRAL_SPATIAL, TEXTURE, GraphView, augmented_pair, knn_adjacency


def random_views(seed: int, n: int = 10, d_spec: int = 6, d_tex: int = 4, k: int = 3,
                 delta: float = 0.2) -> List[GraphView]:
    """Four views over two random clustered feature families."""
    rng = make_rng(seed)
    centers = rng.normal(0.0, 3.0, size=(2, d_spec + d_tex))
    members = np.arange(n) % 2
    features = centers[members] + rng.normal(0.0, 0.5, size=(n, d_spec + d_tex))
    views: List[GraphView] = []
    for family, block in ((SPECTRAL_SPATIAL, features[:, :d_spec]), (TEXTURE, features[:, d_spec:])):
        views.extend(augmented_pair(block, knn_adjacency(block, k), family, delta, split_rng(rng, 2)))
    return views


def small_train_config(**overrides) -> TrainConfig:
    """Few epochs, tiny encoders; keyword overrides go straight to TrainConfig."""
    values = dict(epochs=5, encoder=EncoderConfig(hidden_dim=8, output_dim=4),
                  contrastive={'tau': 0.5}, log_every=1)
    values.update(overrides)
    return TrainConfig(**values)
