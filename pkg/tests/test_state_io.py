"""
Unit tests for train-state files and the loss history CSV.
"""
import os
import struct
import sys
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

from numpy.testing import assert_array_equal

# Add parent directory to path for imports
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import state_io
from state_io import (HISTORY_COLUMNS, STATE_MAGIC, StateCompatibilityError, StateFormatError, check_compatible,
                      load_history, load_state, read_blocks, save_history, save_state)
from tests.fixtures import random_views, small_train_config
from trainer import group_views, train


class StateFileTestCase(unittest.TestCase):
    """Shared trained state and scratch directory."""

    @classmethod
    def setUpClass(cls):
        cls.views = random_views(3)
        cls.cfg = small_train_config(epochs=3)
        cls.state = train(cls.views, cls.cfg)

    def setUp(self):
        """Set up test fixtures."""
        self.temp_dir = tempfile.TemporaryDirectory()
        self.addCleanup(self.temp_dir.cleanup)
        self.path = Path(self.temp_dir.name) / 'state.bin'


class TestStateFile(StateFileTestCase):
    """Binary parameter blocks."""

    def test_round_trip(self):
        save_state(self.path, self.state)
        restored = load_state(self.path)
        self.assertEqual(restored.families, self.state.families)
        self.assertEqual(restored.epoch, 3)
        self.assertEqual(restored.sx.lam, self.state.sx.lam)
        original = self.state.parameters()
        for name, value in restored.parameters().items():
            assert_array_equal(value, original[name])
        self.assertEqual(restored.history, [])
        self.assertEqual(restored.moments, {})

    def test_header(self):
        save_state(self.path, self.state)
        data = self.path.read_bytes()
        self.assertTrue(data.startswith(STATE_MAGIC))
        (count,) = struct.unpack('<I', data[len(STATE_MAGIC):len(STATE_MAGIC) + 4])
        # parameters plus lambda, epoch and node count
        self.assertEqual(count, len(self.state.parameters()) + 3)
        self.assertIn('sx.C', read_blocks(self.path))

    def test_truncated(self):
        save_state(self.path, self.state)
        self.path.write_bytes(self.path.read_bytes()[:-5])
        with self.assertRaises(StateFormatError) as ctx:
            load_state(self.path)
        self.assertIn('truncated', str(ctx.exception))

    def test_bad_magic(self):
        save_state(self.path, self.state)
        data = self.path.read_bytes()
        self.path.write_bytes(b'X' + data[1:])
        with self.assertRaises(StateFormatError):
            load_state(self.path)

    def test_trailing_bytes(self):
        save_state(self.path, self.state)
        self.path.write_bytes(self.path.read_bytes() + b'\x00' * 3)
        with self.assertRaises(StateFormatError) as ctx:
            read_blocks(self.path)
        self.assertIn('3 trailing bytes', str(ctx.exception))

    def test_missing_block(self):
        blocks = state_io.state_blocks(self.state)
        del blocks['sx.C']
        with patch('state_io.state_blocks', return_value=blocks):
            save_state(self.path, self.state)
        with self.assertRaises(StateFormatError) as ctx:
            load_state(self.path)
        self.assertIn('sx.C', str(ctx.exception))

    def test_missing_file(self):
        with self.assertRaises(StateFormatError):
            load_state(self.path)

    def test_exit_code(self):
        self.assertEqual(StateFormatError.exit_code, 3)
        self.assertEqual(StateCompatibilityError.exit_code, 3)


class TestCompatibility(StateFileTestCase):
    """State and data agreement."""

    def test_matching_views(self):
        check_compatible(self.state, group_views(self.views, self.cfg))

    def test_node_count(self):
        other = group_views(random_views(3, n=12), self.cfg)
        with self.assertRaises(StateCompatibilityError) as ctx:
            check_compatible(self.state, other)
        self.assertIn('12', str(ctx.exception))

    def test_feature_dimension(self):
        other = group_views(random_views(3, d_spec=5), self.cfg)
        with self.assertRaises(StateCompatibilityError):
            check_compatible(self.state, other)

    def test_unknown_family(self):
        texture_only = train(self.views, small_train_config(epochs=1, use_spectral_view=False))
        with self.assertRaises(StateCompatibilityError):
            check_compatible(texture_only, group_views(self.views, self.cfg))


# ============================================================================
# LOSS HISTORY
# ============================================================================

class TestHistory(StateFileTestCase):
    """CSV loss history."""

    def test_round_trip_is_exact(self):
        path = Path(self.temp_dir.name) / 'loss_history.csv'
        save_history(path, self.state.history)
        self.assertEqual(load_history(path), self.state.history)

    def test_header(self):
        path = save_history(Path(self.temp_dir.name) / 'loss_history.csv', self.state.history)
        header = path.read_text().splitlines()[0]
        self.assertEqual(header.split(','), HISTORY_COLUMNS)

    def test_missing_columns(self):
        path = Path(self.temp_dir.name) / 'broken.csv'
        path.write_text('epoch,total\n1,0.5\n')
        with self.assertRaises(StateFormatError):
            load_history(path)


if __name__ == '__main__':
    unittest.main()
