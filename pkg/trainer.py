"""
Joint training of encoders, attention, self-expression coefficients and
uncertainty weights.

One epoch is one full-graph step: forward every view, pool, evaluate the
enabled loss components, combine them with the uncertainty-weighted total,
backpropagate and apply an adaptive-moment update to every trainable tensor.
By default C instead takes one exact-step projected gradient update per
epoch (see ``fusion_sx.coefficient_step``).
"""
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from config import TrainConfig
from contrastive import LossValue, cnode_loss, corrupt_graph_representation, dnode_loss, graph_contrast
from encoder import (AttentionParams, GcnParams, attention_pool, attention_pool_backward, gcn_backward,
                     gcn_forward, init_encoder, mean_pool)
from fusion_sx import (FusionOutput, SelfExpressionState, coefficient_step, fuse_backward, fuse_families,
                       self_expression_loss, sx_adjacency, unit_rows, unit_rows_backward)
from logging_config import get_logger, get_performance_logger, log_function_call
from numerics import Matrix, NumericFailure, RngState, draw_seed, make_rng, require, split_rng, stream_rng
from views import SPECTRAL_SPATIAL, TEXTURE, GraphView, augmented_pair

logger = get_logger('trainer')
perf_logger = get_performance_logger('trainer')

COMPONENTS = ('cnode', 'dnode', 'graph', 'se')
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
# totals above this are reported once per run; aborting is left to the relative guard
ABSOLUTE_LOSS_LIMIT = 1e6


class TrainingDivergedError(NumericFailure):
    """Total loss became non-finite or crossed the divergence threshold."""

    def __init__(self, epoch: int, components: Mapping[str, float], total: float):
        detail = ', '.join(f"{name}={value:.6g}" for name, value in components.items())
        super().__init__(f"training diverged at epoch {epoch}: total={total:.6g} ({detail})")
        self.epoch = epoch
        self.components = dict(components)
        self.total = total


# ============================================================================
# UNCERTAINTY-WEIGHTED TOTAL
# ============================================================================

@dataclass
class UncertaintyWeights:
    """alpha_i = log(sigma_i) for the four components, in COMPONENTS order."""
    log_sigma: np.ndarray = field(default_factory=lambda: np.zeros(len(COMPONENTS)))

    def __post_init__(self):
        self.log_sigma = np.asarray(self.log_sigma, dtype=np.float64)
        require(self.log_sigma.shape == (len(COMPONENTS),), "log_sigma must hold one value per component")

    def effective(self) -> np.ndarray:
        """1 / (2 sigma_i^2)."""
        return 0.5 * np.exp(-2.0 * self.log_sigma)

    def reported(self) -> np.ndarray:
        """exp(-alpha_i), the weight recorded in the loss history."""
        return np.exp(-self.log_sigma)


def total_loss(components: Mapping[str, float], u: UncertaintyWeights) -> LossValue:
    """
    sum_i L_i / (2 sigma_i^2) + sum_i log sigma_i over the components present.

    Components missing from the mapping are disabled: they add neither a loss
    term nor a log-sigma term and receive zero gradient.
    """
    effective = u.effective()
    value = 0.0
    d_components = np.zeros(len(COMPONENTS))
    d_log_sigma = np.zeros(len(COMPONENTS))
    for i, name in enumerate(COMPONENTS):
        if name not in components:
            continue
        L = float(components[name])
        if not np.isfinite(L):
            raise NumericFailure(f"loss component {name} is not finite ({L})")
        value += effective[i] * L + u.log_sigma[i]
        d_components[i] = effective[i]
        d_log_sigma[i] = -2.0 * effective[i] * L + 1.0
    return LossValue(value=float(value), gradients={'components': d_components, 'log_sigma': d_log_sigma})


# ============================================================================
# ADAPTIVE MOMENTS
# ============================================================================

Moments = Dict[str, Tuple[Matrix, Matrix]]


def adam_step(params: Mapping[str, Matrix], grads: Mapping[str, Matrix], moments: Moments,
              lr: Union[float, Mapping[str, float]], step_index: int) -> Tuple[Dict[str, Matrix], Moments]:
    """
    One bias-corrected adaptive-moment update; inputs are not modified.

    For each name: m = 0.9 m + 0.1 g, v = 0.999 v + 0.001 g^2,
    p = p - lr * (m / (1 - 0.9^t)) / (sqrt(v / (1 - 0.999^t)) + 1e-8) with
    t = step_index (1-based). Parameters without a gradient pass through.
    """
    require(step_index >= 1, f"step_index is 1-based, got {step_index}")
    bc1 = 1.0 - ADAM_BETA1 ** step_index
    bc2 = 1.0 - ADAM_BETA2 ** step_index

    new_params = dict(params)
    new_moments = dict(moments)
    for name, g in grads.items():
        p = params[name]
        require(g.shape == p.shape, f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m, v = moments.get(name, (np.zeros_like(p), np.zeros_like(p)))
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * (g * g)
        rate = lr[name] if isinstance(lr, Mapping) else lr
        new_params[name] = p - rate * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        new_moments[name] = (m, v)
    return new_params, new_moments


def clip_by_global_norm(grads: Dict[str, Matrix], max_norm: Optional[float]) -> Tuple[Dict[str, Matrix], float]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is None or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


# ============================================================================
# STATE
# ============================================================================

@dataclass
class TrainState:
    gcn: Dict[str, GcnParams]
    attention: Dict[str, AttentionParams]
    sx: SelfExpressionState
    uncertainty: UncertaintyWeights = field(default_factory=UncertaintyWeights)
    moments: Moments = field(default_factory=dict)
    epoch: int = 0
    history: List[Dict[str, float]] = field(default_factory=list)
    reference_total: Optional[float] = None

    @property
    def families(self) -> List[str]:
        return list(self.gcn)

    @property
    def n_nodes(self) -> int:
        return self.sx.n_nodes

    def parameters(self) -> Dict[str, Matrix]:
        """Live references to every trainable tensor, keyed by block name."""
        table: Dict[str, Matrix] = {}
        for family, p in self.gcn.items():
            table[f'gcn.{family}.W1'] = p.W1
            table[f'gcn.{family}.W2'] = p.W2
        for family, a in self.attention.items():
            table[f'attention.{family}.M'] = a.M
        table['sx.C'] = self.sx.C
        table['uncertainty.log_sigma'] = self.uncertainty.log_sigma
        return table

    def assign(self, updated: Mapping[str, Matrix]) -> None:
        """Copy new values into the live tensors and restore the C mask."""
        live = self.parameters()
        for name, value in updated.items():
            np.copyto(live[name], value)
        for p in self.gcn.values():
            p.bump()
        self.sx.zero_diagonal()


def init_state(views_by_family: Mapping[str, Sequence[GraphView]], cfg: TrainConfig, rng: RngState) -> TrainState:
    """Glorot encoders per family, all-ones C, sigma = 1."""
    gcn, attention = {}, {}
    for family, views in views_by_family.items():
        gcn[family], attention[family] = init_encoder(family, views[0].features.shape[1], cfg.encoder, rng)
    n = next(iter(views_by_family.values()))[0].n_nodes
    return TrainState(gcn=gcn, attention=attention, sx=SelfExpressionState.all_ones(n, cfg.fusion.sx_lambda))


def group_views(views: Sequence[GraphView], cfg: TrainConfig) -> Dict[str, List[GraphView]]:
    """Enabled families mapped to their two augmentations, ordered by augmentation id."""
    grouped: Dict[str, List[GraphView]] = {}
    for family in cfg.families():
        members = sorted((v for v in views if v.feature_family == family), key=lambda v: v.augmentation_id)
        require(len(members) == 2, f"family {family} needs exactly two augmented views, got {len(members)}")
        grouped[family] = members
    sizes = {v.n_nodes for members in grouped.values() for v in members}
    require(len(sizes) == 1, f"views disagree on the node count: {sorted(sizes)}")
    return grouped


def active_components(cfg: TrainConfig, families: Sequence[str]) -> List[str]:
    active = []
    if cfg.enable_cnode:
        active.append('cnode')
    if cfg.enable_dnode and len(families) == 2:
        active.append('dnode')
    if cfg.enable_graph:
        active.append('graph')
    if cfg.enable_se:
        active.append('se')
    require(active, "every loss component is disabled")
    return active


# ============================================================================
# ONE STEP
# ============================================================================

def _pool(Z: Matrix, attention: AttentionParams, cfg: TrainConfig):
    return attention_pool(Z, attention) if cfg.use_attention_pooling else mean_pool(Z)


def _graph_pairs(families: Sequence[str]) -> List[Tuple[Tuple[str, int], Tuple[str, int]]]:
    if len(families) == 2:
        return [((SPECTRAL_SPATIAL, a), (TEXTURE, b)) for a in range(2) for b in range(2)]
    return [((families[0], 0), (families[0], 1))]


def mean_embeddings(state: TrainState, views_by_family: Mapping[str, Sequence[GraphView]]) -> List[Matrix]:
    """Per-family mean of the two augmentation embeddings, in family order."""
    means = []
    for family, views in views_by_family.items():
        Z0, Z1 = (gcn_forward(view, state.gcn[family]).Z for view in views)
        means.append(0.5 * (Z0 + Z1))
    return means


def fused_embeddings(state: TrainState, views_by_family: Mapping[str, Sequence[GraphView]],
                     cfg: TrainConfig) -> FusionOutput:
    """F_s of the current parameters (forward pass only)."""
    return fuse_families(mean_embeddings(state, views_by_family), cfg.fusion.granularity)


def train_step(state: TrainState, views_by_family: Mapping[str, Sequence[GraphView]], A_bar: Matrix,
               cfg: TrainConfig, rng: RngState) -> Tuple[Dict[str, float], LossValue, Dict[str, Matrix]]:
    """
    Forward and backward pass for one epoch.

    Returns (component values, total loss, gradients by parameter name).
    Views are processed in fixed family then augmentation order so the
    gradient sums are reproducible.
    """
    families = list(views_by_family)
    active = active_components(cfg, families)
    embeddings = {f: [gcn_forward(view, state.gcn[f], view_id=2 * k + i + 1)
                      for i, view in enumerate(views_by_family[f])]
                  for k, f in enumerate(families)}
    Zs = {f: [e.Z for e in embeddings[f]] for f in families}

    components: Dict[str, float] = {}
    # per component: family -> [dZ aug0, dZ aug1], and family -> dM
    node_grads: Dict[str, Dict[str, List[Matrix]]] = {}
    m_grads: Dict[str, Dict[str, Matrix]] = {}
    grad_C = None

    if 'cnode' in active:
        loss = cnode_loss({f: (Zs[f][0], Zs[f][1]) for f in families}, cfg.contrastive)
        components['cnode'] = loss.value
        node_grads['cnode'] = {f: list(g) for f, g in loss.gradients.items()}

    if 'dnode' in active:
        loss = dnode_loss(tuple(Zs[SPECTRAL_SPATIAL]), tuple(Zs[TEXTURE]), cfg.contrastive,
                          cfg.inter_view_pairing)
        components['dnode'] = loss.value
        node_grads['dnode'] = {f: list(g) for f, g in loss.gradients.items()}

    if 'graph' in active:
        reps = {f: [_pool(Z, state.attention[f], cfg) for Z in Zs[f]] for f in families}
        corrupted = [(f, corrupt_graph_representation(
            Z, state.attention[f] if cfg.use_attention_pooling else None, rng))
            for f in families for Z in Zs[f]]
        pairs = _graph_pairs(families)
        loss = graph_contrast([(reps[fa][a].S, reps[fb][b].S) for (fa, a), (fb, b) in pairs],
                              [rep.S for _, rep in corrupted], cfg.contrastive)
        components['graph'] = loss.value

        d_S = {f: [np.zeros_like(r.S) for r in reps[f]] for f in families}
        for ((fa, a), (fb, b)), (g_i, g_j) in zip(pairs, loss.gradients['pairs']):
            d_S[fa][a] += g_i
            d_S[fb][b] += g_j
        dZ = {f: [np.zeros_like(Z) for Z in Zs[f]] for f in families}
        dM = {f: np.zeros_like(state.attention[f].M) for f in families}
        for f in families:
            for i, rep in enumerate(reps[f]):
                pooled = attention_pool_backward(d_S[f][i], rep.cache)
                dZ[f][i] += pooled.Z
                if pooled.M is not None:
                    dM[f] += pooled.M
        for k, ((f, rep), g) in enumerate(zip(corrupted, loss.gradients['negatives'])):
            pooled = attention_pool_backward(g, rep.cache)
            dZ[f][k % 2] += pooled.Z
            if pooled.M is not None:
                dM[f] += pooled.M
        node_grads['graph'] = dZ
        m_grads['graph'] = dM

    if 'se' in active:
        fusion = fuse_families([0.5 * (Zs[f][0] + Zs[f][1]) for f in families], cfg.fusion.granularity)
        F_s, norms = unit_rows(fusion.fused) if cfg.fusion.sx_normalize else (fusion.fused, None)
        loss = self_expression_loss(F_s, A_bar, state.sx)
        scale = 1.0 / state.n_nodes if cfg.fusion.sx_reduction == 'mean' else 1.0
        components['se'] = scale * loss.value
        d_F = scale * loss.gradients['F_s']
        if norms is not None:
            d_F = unit_rows_backward(d_F, F_s, norms)
        d_means = fuse_backward(d_F, fusion)
        node_grads['se'] = {f: [0.5 * d, 0.5 * d] for f, d in zip(families, d_means)}
        grad_C = scale * loss.gradients['C']

    total = total_loss(components, state.uncertainty)
    weight = dict(zip(COMPONENTS, total.gradients['components']))

    grads: Dict[str, Matrix] = {}
    if not cfg.freeze_encoders:
        for f in families:
            dW1 = np.zeros_like(state.gcn[f].W1)
            dW2 = np.zeros_like(state.gcn[f].W2)
            for i, emb in enumerate(embeddings[f]):
                d_Z = sum(weight[name] * per_family[f][i] for name, per_family in node_grads.items())
                if isinstance(d_Z, int):
                    continue
                back = gcn_backward(d_Z, emb.cache)
                dW1 += back.W1
                dW2 += back.W2
            grads[f'gcn.{f}.W1'] = dW1
            grads[f'gcn.{f}.W2'] = dW2
            if cfg.use_attention_pooling:
                grads[f'attention.{f}.M'] = sum(
                    (weight[name] * per_family[f] for name, per_family in m_grads.items()),
                    np.zeros_like(state.attention[f].M))
    if grad_C is not None:
        grads['sx.C'] = weight['se'] * grad_C
    grads['uncertainty.log_sigma'] = total.gradients['log_sigma']
    return components, total, grads


# ============================================================================
# LOOP
# ============================================================================

def _record(epoch: int, components: Mapping[str, float], u: UncertaintyWeights, total: float) -> Dict[str, float]:
    record: Dict[str, float] = {'epoch': float(epoch)}
    for name in COMPONENTS:
        record[f'l_{name}'] = float(components.get(name, 0.0))
    for name, w in zip(COMPONENTS, u.reported()):
        record[f'w_{name}'] = float(w)
    record['total'] = total
    return record


def _check_divergence(state: TrainState, epoch: int, components: Mapping[str, float],
                      total: float, threshold: float) -> None:
    if state.reference_total is None and np.isfinite(total):
        state.reference_total = total
    limit = threshold * max(1.0, abs(state.reference_total or 0.0))
    if not np.isfinite(total) or total > limit:
        logger.error(f"Training diverged at epoch {epoch}", extra={'extra_fields': {
            'epoch': epoch, 'total': total, 'limit': limit, **components}})
        raise TrainingDivergedError(epoch, components, total)


def _report_absolute(epoch: int, components: Mapping[str, float], total: float) -> None:
    logger.warning(f"Total loss {total:.6g} at epoch {epoch} is above {ABSOLUTE_LOSS_LIMIT:.0e}", extra={
        'extra_fields': {'epoch': epoch, 'total': total, 'limit': ABSOLUTE_LOSS_LIMIT, **components}})


def _learning_rates(state: TrainState, cfg: TrainConfig) -> Dict[str, float]:
    rates = {name: cfg.learning_rate for name in state.parameters()}
    if cfg.sx_learning_rate is not None:
        rates['sx.C'] = cfg.sx_learning_rate
    return rates


def _resample(views_by_family: Dict[str, List[GraphView]], delta: float, rng: RngState) -> Dict[str, List[GraphView]]:
    return {family: augmented_pair(views[0].features, views[0].base_adjacency, family, delta, split_rng(rng, 2))
            for family, views in views_by_family.items()}


@log_function_call
def train(views: Sequence[GraphView], cfg: TrainConfig, state: Optional[TrainState] = None) -> TrainState:
    """
    Run ``cfg.epochs`` full-graph steps and return the trained state.

    Everything random (initialization, corruption shuffles, optional
    per-epoch augmentation) is drawn from generators split off ``cfg.seed``.
    Corruption permutations are drawn once per run unless
    ``resample_corruption_each_epoch`` is set. With ``sx_update =
    projected_gd`` C takes an exact-step gradient update instead of the
    adaptive-moment one.

    Raises:
        TrainingDivergedError: total loss non-finite or above
            ``divergence_threshold`` times the first epoch's magnitude
    """
    views_by_family = group_views(views, cfg)
    init_rng, corrupt_rng, augment_rng = split_rng(stream_rng(cfg.seed, 'train'), 3)
    corrupt_seed = draw_seed(corrupt_rng)
    if state is None:
        state = init_state(views_by_family, cfg, init_rng)
    require(state.n_nodes == next(iter(views_by_family.values()))[0].n_nodes,
            "train state and views disagree on the node count")

    A_bar = sx_adjacency(views, cfg.fusion.sx_adjacency)
    rates = _learning_rates(state, cfg)
    logger.info("Starting training", extra={'extra_fields': {
        'epochs': cfg.epochs, 'families': list(views_by_family), 'n_nodes': state.n_nodes,
        'components': active_components(cfg, list(views_by_family))}})

    above_limit = False
    for _ in range(cfg.epochs):
        epoch = state.epoch + 1
        if cfg.resample_augmentation_each_epoch:
            views_by_family = _resample(views_by_family, cfg.views.drop_prob_delta, augment_rng)

        epoch_rng = corrupt_rng if cfg.resample_corruption_each_epoch else make_rng(corrupt_seed)
        components, total, grads = train_step(state, views_by_family, A_bar, cfg, epoch_rng)
        _check_divergence(state, epoch, components, total.value, cfg.divergence_threshold)
        if not above_limit and total.value > ABSOLUTE_LOSS_LIMIT:
            above_limit = True
            _report_absolute(epoch, components, total.value)
        record = _record(epoch, components, state.uncertainty, total.value)

        if cfg.sx_update == 'projected_gd' and grads.pop('sx.C', None) is not None:
            coefficient_step(state.sx)
        grads, grad_norm = clip_by_global_norm(grads, cfg.grad_clip_norm)
        updated, state.moments = adam_step(state.parameters(), grads, state.moments, rates, epoch)
        state.assign({name: updated[name] for name in grads})
        state.sx.check_diagonal()

        state.epoch = epoch
        state.history.append(record)
        if epoch % cfg.log_every == 0 or epoch == 1:
            perf_logger.log_epoch({**record, 'grad_norm': grad_norm})

    return state
