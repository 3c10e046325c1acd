"""
Unit tests for the run configuration tree, its text format and the presets.
"""
import os
import sys
import tempfile
import unittest
from pathlib import Path

# Add parent directory to path for imports
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import (ConfigValidationError, ContrastiveConfig, RunConfig, Settings, TrainConfig, ViewConfig,
                    build_run_config, config_from_text, config_to_text, default_run_config, list_presets,
                    load_preset, load_run_config, save_run_config)


class TestSettings(unittest.TestCase):
    """Environment-driven process settings."""

    def test_defaults_validate(self):
        settings = Settings()
        self.assertIn(settings.logging.FORMAT, ('json', 'text'))
        self.assertIn('service_name', settings.get_logging_config())

    def test_invalid_values_collected(self):
        settings = Settings()
        settings.app.THREADS = -1
        settings.logging.FORMAT = 'xml'
        with self.assertRaises(ConfigValidationError) as ctx:
            settings._validate_config()
        self.assertIn('MLGSC_THREADS', str(ctx.exception))
        self.assertIn('LOG_FORMAT', str(ctx.exception))

    def test_thread_limit(self):
        settings = Settings()
        settings.app.THREADS = 0
        self.assertIsNone(settings.thread_limit())
        settings.app.THREADS = 4
        self.assertEqual(settings.thread_limit(), 4)


# ============================================================================
# RUN CONFIGURATION
# ============================================================================

class TestRunConfig(unittest.TestCase):
    """Validated configuration tree."""

    def test_defaults(self):
        cfg = default_run_config()
        self.assertEqual(cfg.train.contrastive.tau, 0.05)
        self.assertEqual(cfg.train.fusion.sx_lambda, 100.0)
        self.assertEqual(cfg.train.views.knn_k, 10)
        self.assertEqual(cfg.train.views.window_w, 5)
        self.assertEqual(cfg.train.epochs, 200)
        self.assertEqual(cfg.synthetic.k_classes, 3)
        self.assertEqual((cfg.synthetic.height, cfg.synthetic.width, cfg.synthetic.bands), (30, 30, 20))
        self.assertEqual(cfg.synthetic.noise_sigma, 0.02)
        self.assertEqual(cfg.train.sx_update, 'projected_gd')
        self.assertFalse(cfg.train.resample_corruption_each_epoch)
        self.assertTrue(cfg.train.fusion.sx_normalize)
        self.assertEqual(cfg.train.fusion.sx_reduction, 'mean')

    def test_training_clamps_zero_norm_rows(self):
        self.assertEqual(TrainConfig().contrastive.zero_norm_policy, 'clamp')
        self.assertEqual(TrainConfig(contrastive={'tau': 0.1}).contrastive.zero_norm_policy, 'clamp')
        self.assertEqual(ContrastiveConfig().zero_norm_policy, 'error')

    def test_exactly_one_source(self):
        with self.assertRaises(ConfigValidationError):
            build_run_config({})
        with self.assertRaises(ConfigValidationError):
            build_run_config({'synthetic': {}, 'dataset': {'cube': 'a.hdr'}})
        self.assertIsNotNone(build_run_config({'dataset': {'cube': 'a.hdr'}}).dataset)

    def test_seed_propagates_to_training(self):
        cfg = build_run_config({'synthetic': {}, 'seed': 42})
        self.assertEqual(cfg.train.seed, 42)
        self.assertEqual(cfg.with_seed(7).train.seed, 7)
        self.assertEqual(cfg.with_seed(7).seed, 7)

    def test_invalid_values(self):
        bad = [
            {'synthetic': {'k_classes': 1}},
            {'synthetic': {}, 'seed': -1},
            {'synthetic': {}, 'seed': 2 ** 64},
            {'synthetic': {}, 'train': {'views': {'window_w': 4}}},
            {'synthetic': {}, 'train': {'views': {'drop_prob_delta': 1.0}}},
            {'synthetic': {}, 'train': {'views': {'se_radii': [2, 1]}}},
            {'synthetic': {}, 'train': {'contrastive': {'tau': 0.0}}},
            {'synthetic': {}, 'train': {'fusion': {'granularity': 'pixel'}}},
            {'synthetic': {}, 'train': {'fusion': {'sx_reduction': 'max'}}},
            {'synthetic': {}, 'train': {'sx_update': 'sgd'}},
            {'synthetic': {}, 'train': {'use_texture_view': False, 'use_spectral_view': False}},
            {'synthetic': {}, 'train': {'epochs': 0}},
            {'synthetic': {}, 'clustering': {'n_clusters': 1}},
            {'synthetic': {}, 'crop': {'row_range': [5, 5], 'col_range': [0, 3]}},
            {'synthetic': {}, 'unknown_key': 1},
        ]
        for data in bad:
            with self.subTest(data=data):
                with self.assertRaises(ConfigValidationError):
                    build_run_config(data)

    def test_validation_error_is_value_error(self):
        self.assertTrue(issubclass(ConfigValidationError, ValueError))
        self.assertEqual(ConfigValidationError.exit_code, 2)

    def test_radii_from_text_list(self):
        self.assertEqual(ViewConfig(se_radii='1, 3,5').se_radii, [1, 3, 5])


# ============================================================================
# TEXT FORMAT
# ============================================================================

class TestTextFormat(unittest.TestCase):
    """Sectioned key = value serialization."""

    def setUp(self):
        """Set up test fixtures."""
        self.temp_dir = tempfile.TemporaryDirectory()
        self.addCleanup(self.temp_dir.cleanup)

    def test_round_trip(self):
        cfg = build_run_config({
            'seed': 12345678901234567890,
            'dataset': {'cube': 'data/scene.hdr', 'labels': None},
            'crop': {'row_range': [3, 40], 'col_range': [0, 17]},
            'train': {'sx_learning_rate': 0.01, 'grad_clip_norm': None, 'freeze_encoders': True,
                      'sx_update': 'adam', 'resample_corruption_each_epoch': True,
                      'views': {'se_radii': [1, 4], 'drop_prob_delta': 0.125},
                      'fusion': {'granularity': 'node', 'sx_adjacency': 'mean',
                                 'sx_normalize': False, 'sx_reduction': 'sum'}},
            'clustering': {'n_clusters': 6, 'affinity_topq': 9},
        })
        restored = config_from_text(config_to_text(cfg))
        self.assertEqual(restored, cfg)
        self.assertEqual(restored.train.seed, 12345678901234567890)

    def test_text_layout(self):
        text = config_to_text(default_run_config())
        self.assertTrue(text.startswith('[run]\nseed = 0\n'))
        self.assertIn('[synthetic]\nk_classes = 3\n', text)
        self.assertIn('tau = 0.05\n', text)
        self.assertNotIn('[dataset]', text)

    def test_file_round_trip(self):
        path = Path(self.temp_dir.name) / 'run.cfg'
        cfg = default_run_config().with_seed(3)
        save_run_config(path, cfg)
        self.assertEqual(load_run_config(path), cfg)

    def test_missing_file(self):
        with self.assertRaises(ConfigValidationError):
            load_run_config(Path(self.temp_dir.name) / 'absent.cfg')

    def test_unknown_section(self):
        with self.assertRaises(ConfigValidationError) as ctx:
            config_from_text('[synthetic]\n\n[optimizer]\nlr = 1\n')
        self.assertIn('optimizer', str(ctx.exception))

    def test_malformed_text(self):
        with self.assertRaises(ConfigValidationError):
            config_from_text('seed = 1\n')

    def test_comments_and_none(self):
        cfg = config_from_text('# a comment\n[synthetic]\nheight = 12\n\n[train]\ngrad_clip_norm = none\n')
        self.assertEqual(cfg.synthetic.height, 12)
        self.assertIsNone(cfg.train.grad_clip_norm)


class TestPresets(unittest.TestCase):
    """Shipped dataset presets."""

    EXPECTED = {
        'indian_pines': (4, 25, 11),
        'pavia_university': (8, 35, 11),
        'houston2013': (7, 30, 13),
        'xuzhou': (5, 35, 5),
    }

    def test_listed(self):
        self.assertEqual(list_presets(), sorted(self.EXPECTED))

    def test_presets_validate(self):
        for name, (clusters, knn_k, window) in self.EXPECTED.items():
            with self.subTest(preset=name):
                cfg = load_preset(name)
                self.assertIsInstance(cfg, RunConfig)
                self.assertIsNotNone(cfg.dataset)
                self.assertIsNotNone(cfg.crop)
                self.assertEqual(cfg.clustering.n_clusters, clusters)
                self.assertEqual(cfg.train.views.knn_k, knn_k)
                self.assertEqual(cfg.train.views.window_w, window)
                self.assertEqual(cfg.train.contrastive.tau, 0.05)

    def test_unknown_preset(self):
        with self.assertRaises(ConfigValidationError) as ctx:
            load_preset('salinas')
        self.assertIn('indian_pines', str(ctx.exception))


if __name__ == '__main__':
    unittest.main()
