"""
Command-line entry point.

Subcommands::

    generate   write a synthetic scene (cube + labels)
    train      build views, train, save state and loss history
    cluster    fuse, self-express, spectral-cluster, render map and metrics
    evaluate   compare two label files
    sweep      train and cluster once per value of one parameter

Exit codes: 0 success, 2 config validation, 3 data error, 4 numeric failure.
"""
import argparse
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from clustering import MetricsReport, affinity_from_C, evaluate, spectral_cluster
from config import (ConfigValidationError, RunConfig, build_run_config, config_to_text, default_run_config,
                    load_preset, load_run_config, settings)
from fusion_sx import coefficients_from_features, sx_adjacency
from hsi_data import (HsiCube, LabelMap, SceneCrop, crop, load_cube, load_labels, normalize_bands, save_cube,
                      save_labels, synth_scene)
from logging_config import RunContext, get_logger, log_function_call, setup_logging
from numerics import MLGSCError, require, stream_rng
from reports import cluster_map, render_loss_curves, write_metrics, write_ppm, write_sweep_table
from state_io import check_compatible, load_state, save_history, save_state
from trainer import TrainState, fused_embeddings, group_views, train
from views import GraphView, build_views

logger = get_logger('cli')

SCENE_STEM = 'scene'
LABELS_STEM = 'scene_labels'
STATE_FILE = 'state.bin'
HISTORY_FILE = 'loss_history.csv'
CURVES_FILE = 'loss_curves.html'
CLUSTERS_STEM = 'clusters'
MAP_FILE = 'cluster_map.ppm'
METRICS_FILE = 'metrics.txt'
SWEEP_FILE = 'sweep.csv'

SWEEP_PARAMS = {
    'lambda': ('train', 'fusion', 'sx_lambda'),
    'knn_k': ('train', 'views', 'knn_k'),
    'window_w': ('train', 'views', 'window_w'),
}


# ============================================================================
# SCENE AND VIEWS
# ============================================================================

def output_dir(cfg: RunConfig) -> Path:
    path = Path(cfg.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def load_scene(cfg: RunConfig) -> Tuple[HsiCube, LabelMap, bool]:
    """
    Cube, label map and whether the labels are ground truth.

    Without a label file every pixel becomes a node of a single placeholder
    class and metrics are skipped.
    """
    if cfg.synthetic is not None:
        s = cfg.synthetic
        cube, labels = synth_scene(s.k_classes, s.height, s.width, s.bands, s.noise_sigma,
                                   stream_rng(cfg.seed, 'scene'))
        has_truth = True
    else:
        cube = load_cube(cfg.dataset.cube)
        if cfg.dataset.labels:
            labels, has_truth = load_labels(cfg.dataset.labels), True
        else:
            labels, has_truth = LabelMap(labels=np.ones((cube.height, cube.width), dtype=np.int64)), False

    if cfg.crop is not None:
        cube, labels = crop(cube, labels, SceneCrop(row_range=tuple(cfg.crop.row_range),
                                                    col_range=tuple(cfg.crop.col_range)))
    if has_truth:
        labels.check_contiguous()
    return normalize_bands(cube), labels, has_truth


def scene_views(cfg: RunConfig, cube: HsiCube, labels: LabelMap) -> List[GraphView]:
    return build_views(cube, labels, cfg.train.views, stream_rng(cfg.seed, 'views'))


# ============================================================================
# COMMANDS
# ============================================================================

@log_function_call
def cmd_generate(cfg: RunConfig) -> Tuple[Path, Path]:
    """Write the configured synthetic scene and print its statistics."""
    if cfg.synthetic is None:
        raise ConfigValidationError("generate needs a [synthetic] section")
    s = cfg.synthetic
    cube, labels = synth_scene(s.k_classes, s.height, s.width, s.bands, s.noise_sigma,
                               stream_rng(cfg.seed, 'scene'))
    out = output_dir(cfg)
    cube_path = save_cube(out / SCENE_STEM, cube)
    labels_path = save_labels(out / LABELS_STEM, labels)

    counts = np.bincount(labels.labels.ravel(), minlength=s.k_classes + 1)[1:]
    print(f"scene: {cube.height}x{cube.width}x{cube.bands}, {s.k_classes} classes")
    print(f"class sizes: {', '.join(str(int(c)) for c in counts)}")
    print(f"cube: {cube_path}")
    print(f"labels: {labels_path}")
    return cube_path, labels_path


@log_function_call
def cmd_train(cfg: RunConfig) -> TrainState:
    """Views, training, then state, loss history and convergence chart on disk."""
    cube, labels, _ = load_scene(cfg)
    views = scene_views(cfg, cube, labels)
    state = train(views, cfg.train)

    out = output_dir(cfg)
    save_state(out / STATE_FILE, state)
    save_history(out / HISTORY_FILE, state.history)
    render_loss_curves(out / CURVES_FILE, state.history)
    (out / 'run.cfg').write_text(config_to_text(cfg), encoding='utf-8')

    last = state.history[-1]
    print(f"trained {state.epoch} epochs on {state.n_nodes} nodes, final total loss {last['total']:.6g}")
    return state


def cluster_labels(cfg: RunConfig, views: Sequence[GraphView], state: TrainState) -> np.ndarray:
    """F_s -> C -> W -> spectral clustering for the labeled pixels."""
    views_by_family = group_views(views, cfg.train)
    check_compatible(state, views_by_family)

    if cfg.clustering.coefficient_source == 'closed_form':
        fused = fused_embeddings(state, views_by_family, cfg.train).fused
        A_bar = sx_adjacency(views, cfg.train.fusion.sx_adjacency)
        C = coefficients_from_features(fused, A_bar, cfg.train.fusion.sx_lambda,
                                       unit=cfg.train.fusion.sx_normalize)
    else:
        C = state.sx.C
    W = affinity_from_C(C, topq=cfg.clustering.affinity_topq)
    result = spectral_cluster(W, cfg.clustering.n_clusters, stream_rng(cfg.seed, 'cluster'),
                              n_init=cfg.clustering.n_init, max_iter=cfg.clustering.max_iter)
    return result.labels


@log_function_call
def cmd_cluster(cfg: RunConfig, state_path: Optional[Path] = None) -> Optional[MetricsReport]:
    """Cluster with a trained state; metrics only when ground truth exists."""
    out = output_dir(cfg)
    state = load_state(state_path or out / STATE_FILE)
    cube, labels, has_truth = load_scene(cfg)
    views = scene_views(cfg, cube, labels)
    predicted = cluster_labels(cfg, views, state)

    cmap = cluster_map(predicted, labels)
    save_labels(out / CLUSTERS_STEM, LabelMap(labels=cmap + 1))
    write_ppm(out / MAP_FILE, cmap)

    if not has_truth:
        print("no ground truth: metrics skipped")
        return None
    report = evaluate(predicted, labels.truth_vector(), nmi_norm=cfg.clustering.nmi_norm)
    write_metrics(out / METRICS_FILE, report)
    print(report.to_text(), end='')
    return report


@log_function_call
def cmd_evaluate(pred_labels_file, truth_labels_file, nmi_norm: str = 'arithmetic') -> MetricsReport:
    """Metrics of a predicted label file against a ground-truth label file."""
    pred = load_labels(pred_labels_file)
    truth = load_labels(truth_labels_file)
    require((pred.height, pred.width) == (truth.height, truth.width),
            f"label maps differ in size: {pred.height}x{pred.width} vs {truth.height}x{truth.width}")
    index = truth.labeled_index()
    report = evaluate(pred.labels.reshape(-1)[index], truth.truth_vector(), nmi_norm=nmi_norm)
    print(report.to_text(), end='')
    return report


def _with_value(cfg: RunConfig, param: str, value) -> RunConfig:
    data = cfg.to_dict()
    node = data
    *parents, key = SWEEP_PARAMS[param]
    for name in parents:
        node = node[name]
    node[key] = value
    data['output_dir'] = str(Path(cfg.output_dir) / f'{param}_{value}')
    return build_run_config(data)


@log_function_call
def cmd_sweep(cfg: RunConfig, param: str, values: Sequence[str]) -> List[Dict[str, float]]:
    """Train and cluster once per value; writes sweep.csv."""
    if param not in SWEEP_PARAMS:
        raise ConfigValidationError(f"unknown sweep parameter {param!r}; choose from {sorted(SWEEP_PARAMS)}")
    rows = []
    for value in values:
        run_cfg = _with_value(cfg, param, value)
        state = cmd_train(run_cfg)
        report = cmd_cluster(run_cfg)
        row = {'param': param, 'value': value, 'final_total': state.history[-1]['total']}
        if report is not None:
            row.update(oa=report.oa, nmi=report.nmi, kappa=report.kappa)
        rows.append(row)
    write_sweep_table(output_dir(cfg) / SWEEP_FILE, rows)
    return rows


# ============================================================================
# ARGUMENTS
# ============================================================================

def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--config', type=Path, help='run config file (INI sections)')
    parser.add_argument('--preset', help='shipped dataset preset, e.g. indian_pines')
    parser.add_argument('--seed', type=int, help='master seed (unsigned 64-bit)')
    parser.add_argument('--out', type=Path, help='output directory')
    parser.add_argument('--print-config', action='store_true', help='print the effective config and exit')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='mlgsc', description='Multi-level graph subspace clustering of HSI scenes')
    commands = parser.add_subparsers(dest='command', required=True)

    for name, help_text in (('generate', 'write a synthetic scene'),
                            ('train', 'train encoders and self-expression')):
        _common_flags(commands.add_parser(name, help=help_text))

    cluster_parser = commands.add_parser('cluster', help='cluster with a trained state')
    _common_flags(cluster_parser)
    cluster_parser.add_argument('--state', type=Path, help=f'state file (default <out>/{STATE_FILE})')

    evaluate_parser = commands.add_parser('evaluate', help='score a label file against ground truth')
    _common_flags(evaluate_parser)
    evaluate_parser.add_argument('pred', type=Path, help='predicted label header')
    evaluate_parser.add_argument('truth', type=Path, help='ground-truth label header')

    sweep_parser = commands.add_parser('sweep', help='parameter sensitivity run')
    _common_flags(sweep_parser)
    sweep_parser.add_argument('--param', required=True, choices=sorted(SWEEP_PARAMS))
    sweep_parser.add_argument('--values', required=True, nargs='+')
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file or preset (never both), then --seed and --out overrides."""
    if args.config and args.preset:
        raise ConfigValidationError("--config and --preset are mutually exclusive")
    if args.config:
        cfg = load_run_config(args.config)
    elif args.preset:
        cfg = load_preset(args.preset)
    else:
        cfg = default_run_config()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = cfg.copy(update={'output_dir': str(args.out)})
    return cfg


def run(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if args.print_config:
        print(config_to_text(cfg), end='')
        return 0

    if args.command == 'generate':
        cmd_generate(cfg)
    elif args.command == 'train':
        cmd_train(cfg)
    elif args.command == 'cluster':
        cmd_cluster(cfg, args.state)
    elif args.command == 'evaluate':
        cmd_evaluate(args.pred, args.truth, cfg.clustering.nmi_norm)
    elif args.command == 'sweep':
        cmd_sweep(cfg, args.param, args.values)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one command and map failures to exit codes."""
    args = build_parser().parse_args(argv)
    setup_logging()

    with RunContext() as context, threadpool_limits(limits=settings.thread_limit()):
        logger.info(f"Running {args.command}", extra={'extra_fields': {'run_id': context.run_id}})
        try:
            return run(args)
        except ConfigValidationError as e:
            print(f"config error: {e}", file=sys.stderr)
            return e.exit_code
        except MLGSCError as e:
            logger.error(f"{args.command} failed: {e}")
            print(f"error: {e}", file=sys.stderr)
            return e.exit_code
        except OSError as e:
            logger.error(f"{args.command} failed on file access: {e}")
            print(f"error: {e}", file=sys.stderr)
            return 3


if __name__ == '__main__':
    sys.exit(main())
