"""
Integration tests for the command-line entry point on a small synthetic scene.
"""
import io
import os
import sys
import tempfile
import unittest
from contextlib import redirect_stdout
from pathlib import Path

import numpy as np
import pandas as pd

# Add parent directory to path for imports
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import cli
from config import config_from_text
from hsi_data import LabelMap, load_cube, load_labels, save_labels

SMALL_CONFIG = """\
[run]
seed = 11

[synthetic]
k_classes = 3
height = 12
width = 12
bands = 8

[views]
knn_k = 5
window_w = 3

[encoder]
hidden_dim = 8
output_dim = 4

[train]
epochs = 3
"""


def run_cli(*argv):
    """Exit code and captured stdout of one CLI invocation."""
    buffer = io.StringIO()
    with redirect_stdout(buffer):
        code = cli.main([str(arg) for arg in argv])
    return code, buffer.getvalue()


class CliTestCase(unittest.TestCase):
    """Scratch directory with the small run config on disk."""

    def setUp(self):
        """Set up test fixtures."""
        self.temp_dir = tempfile.TemporaryDirectory()
        self.addCleanup(self.temp_dir.cleanup)
        self.root = Path(self.temp_dir.name)
        self.config = self.write_config('small.cfg', SMALL_CONFIG)

    def write_config(self, name, text):
        path = self.root / name
        path.write_text(text, encoding='utf-8')
        return path


# ============================================================================
# GENERATE AND CONFIG HANDLING
# ============================================================================

class TestGenerate(CliTestCase):
    """Synthetic scene generation."""

    def test_writes_scene(self):
        out = self.root / 'gen'
        code, text = run_cli('generate', '--config', self.config, '--out', out)
        self.assertEqual(code, 0)
        self.assertIn('12x12x8', text)
        cube = load_cube(out / f'{cli.SCENE_STEM}.hdr')
        labels = load_labels(out / f'{cli.LABELS_STEM}.hdr')
        self.assertEqual(cube.values.shape, (12, 12, 8))
        self.assertEqual(labels.n_classes, 3)
        labels.check_contiguous()

    def test_byte_identical_for_same_seed(self):
        for name in ('a', 'b'):
            run_cli('generate', '--config', self.config, '--out', self.root / name)
        for suffix in ('.hdr', '.raw'):
            first = (self.root / 'a' / f'{cli.SCENE_STEM}{suffix}').read_bytes()
            second = (self.root / 'b' / f'{cli.SCENE_STEM}{suffix}').read_bytes()
            self.assertEqual(first, second)

    def test_seed_flag_changes_scene(self):
        run_cli('generate', '--config', self.config, '--out', self.root / 'a')
        run_cli('generate', '--config', self.config, '--seed', 12, '--out', self.root / 'b')
        first = (self.root / 'a' / f'{cli.SCENE_STEM}.raw').read_bytes()
        second = (self.root / 'b' / f'{cli.SCENE_STEM}.raw').read_bytes()
        self.assertNotEqual(first, second)

    def test_single_class_is_config_error(self):
        bad = self.write_config('bad.cfg', SMALL_CONFIG.replace('k_classes = 3', 'k_classes = 1'))
        code, _ = run_cli('generate', '--config', bad, '--out', self.root / 'gen')
        self.assertEqual(code, 2)

    def test_config_and_preset_conflict(self):
        code, _ = run_cli('train', '--config', self.config, '--preset', 'indian_pines')
        self.assertEqual(code, 2)

    def test_print_config(self):
        out = self.root / 'printed'
        code, text = run_cli('train', '--config', self.config, '--seed', 99, '--out', out, '--print-config')
        self.assertEqual(code, 0)
        self.assertTrue(text.startswith('[run]\nseed = 99\n'))
        printed = config_from_text(text)
        self.assertEqual(printed.train.epochs, 3)
        self.assertEqual(printed.train.seed, 99)
        self.assertFalse(out.exists())

    def test_missing_cube_is_data_error(self):
        missing = self.write_config('missing.cfg', f"[dataset]\ncube = {self.root / 'absent.hdr'}\n")
        code, _ = run_cli('train', '--config', missing, '--out', self.root / 'run')
        self.assertEqual(code, 3)


# ============================================================================
# TRAIN, CLUSTER, EVALUATE
# ============================================================================

class TestPipelineCommands(CliTestCase):
    """train -> cluster on the small scene."""

    def train_and_cluster(self, out):
        self.assertEqual(run_cli('train', '--config', self.config, '--out', out)[0], 0)
        code, text = run_cli('cluster', '--config', self.config, '--out', out)
        self.assertEqual(code, 0)
        return text

    def test_outputs(self):
        out = self.root / 'run'
        text = self.train_and_cluster(out)
        for name in (cli.STATE_FILE, cli.HISTORY_FILE, cli.CURVES_FILE, 'run.cfg', cli.MAP_FILE,
                     cli.METRICS_FILE, f'{cli.CLUSTERS_STEM}.hdr', f'{cli.CLUSTERS_STEM}.raw'):
            self.assertTrue((out / name).is_file(), name)
        self.assertIn('oa = ', text)
        self.assertEqual(len(pd.read_csv(out / cli.HISTORY_FILE)), 3)
        self.assertTrue((out / cli.MAP_FILE).read_bytes().startswith(b'P6\n12 12\n255\n'))

        clusters = load_labels(out / f'{cli.CLUSTERS_STEM}.hdr')
        self.assertEqual((clusters.height, clusters.width), (12, 12))
        self.assertTrue(np.all((clusters.labels >= 1) & (clusters.labels <= 3)))

    def test_deterministic_outputs(self):
        self.train_and_cluster(self.root / 'a')
        self.train_and_cluster(self.root / 'b')
        for name in (cli.METRICS_FILE, cli.MAP_FILE, cli.STATE_FILE):
            self.assertEqual((self.root / 'a' / name).read_bytes(), (self.root / 'b' / name).read_bytes(), name)

    def test_cluster_without_state(self):
        code, _ = run_cli('cluster', '--config', self.config, '--out', self.root / 'empty')
        self.assertEqual(code, 3)

    def test_no_ground_truth(self):
        scene = self.root / 'scene'
        run_cli('generate', '--config', self.config, '--out', scene)
        unlabeled = self.write_config('unlabeled.cfg', SMALL_CONFIG.replace(
            '[synthetic]\nk_classes = 3\nheight = 12\nwidth = 12\nbands = 8\n',
            f"[dataset]\ncube = {scene / (cli.SCENE_STEM + '.hdr')}\n"))
        out = self.root / 'run'
        self.assertEqual(run_cli('train', '--config', unlabeled, '--out', out)[0], 0)
        code, text = run_cli('cluster', '--config', unlabeled, '--out', out)
        self.assertEqual(code, 0)
        self.assertIn('metrics skipped', text)
        self.assertTrue((out / cli.MAP_FILE).is_file())
        self.assertFalse((out / cli.METRICS_FILE).exists())

    def test_sweep(self):
        out = self.root / 'sweep'
        code, _ = run_cli('sweep', '--config', self.config, '--out', out, '--param', 'lambda', '--values', '1', '100')
        self.assertEqual(code, 0)
        table = pd.read_csv(out / cli.SWEEP_FILE)
        self.assertEqual(len(table), 2)
        self.assertTrue({'oa', 'nmi', 'kappa', 'final_total'} <= set(table.columns))
        self.assertTrue((out / 'lambda_100' / cli.METRICS_FILE).is_file())


class TestEvaluateCommand(CliTestCase):
    """Label files scored against ground truth."""

    def setUp(self):
        """Set up test fixtures."""
        super().setUp()
        truth = np.array([[1, 1, 2, 0],
                          [2, 3, 3, 0]])
        self.truth = save_labels(self.root / 'truth', LabelMap(labels=truth))
        renamed = np.array([0, 3, 1, 2])[truth]
        self.renamed = save_labels(self.root / 'renamed', LabelMap(labels=renamed))

    def test_identical(self):
        code, text = run_cli('evaluate', self.truth, self.truth)
        self.assertEqual(code, 0)
        self.assertIn('oa = 1.000000\nnmi = 1.000000\nkappa = 1.000000\n', text)

    def test_renamed_labels(self):
        code, text = run_cli('evaluate', self.renamed, self.truth)
        self.assertEqual(code, 0)
        self.assertIn('oa = 1.000000', text)

    def test_one_error(self):
        wrong = np.array([[1, 1, 2, 0],
                          [2, 3, 1, 0]])
        path = save_labels(self.root / 'wrong', LabelMap(labels=wrong))
        code, text = run_cli('evaluate', path, self.truth)
        self.assertEqual(code, 0)
        self.assertIn('oa = 0.833333', text)

    def test_size_mismatch(self):
        small = save_labels(self.root / 'small', LabelMap(labels=np.ones((2, 2), dtype=np.int64)))
        code, _ = run_cli('evaluate', small, self.truth)
        self.assertEqual(code, 3)


if __name__ == '__main__':
    unittest.main()
