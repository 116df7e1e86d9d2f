"""
Unit tests for the run logging system
"""

import unittest
import tempfile
import shutil
import os
from datetime import datetime

import sys
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', '..'))

from src.utils.run_logger import (
    RunLogger, RunLogEntry, RunEventType,
    get_run_logger, initialize_run_logger
)


class TestRunLogEntry(unittest.TestCase):
    """Test cases for RunLogEntry class"""

    def test_run_log_entry_to_dict(self):
        """Test converting a run log entry to a dictionary"""
        timestamp = datetime.now()
        entry = RunLogEntry(
            timestamp=timestamp,
            event_type=RunEventType.TRAIN_STEP,
            run_id="abc123",
            operation="Training step 10",
            success=True,
            details={"loss": 0.25},
            step=10
        )

        entry_dict = entry.to_dict()

        self.assertEqual(entry_dict['timestamp'], timestamp.isoformat())
        self.assertEqual(entry_dict['event_type'], 'train_step')
        self.assertEqual(entry_dict['run_id'], 'abc123')
        self.assertEqual(entry_dict['step'], 10)
        self.assertEqual(entry_dict['details']['loss'], 0.25)

    def test_run_log_entry_from_dict(self):
        """Test creating a run log entry from a dictionary"""
        timestamp = datetime.now()
        entry = RunLogEntry.from_dict({
            'timestamp': timestamp.isoformat(),
            'event_type': 'checkpoint_saved',
            'run_id': 'abc123',
            'operation': 'Checkpoint saved: x.ckpt',
            'success': True,
            'details': {'path': 'x.ckpt'},
            'step': 500,
            'error_message': None,
            'duration_ms': None
        })

        self.assertEqual(entry.timestamp, timestamp)
        self.assertEqual(entry.event_type, RunEventType.CHECKPOINT_SAVED)
        self.assertEqual(entry.step, 500)


class TestRunLogger(unittest.TestCase):
    """Test cases for RunLogger class"""

    def setUp(self):
        """Set up test environment"""
        self.temp_dir = tempfile.mkdtemp()
        self.run_logger = RunLogger(
            log_directory=self.temp_dir,
            log_file="test_runs.log",
            max_file_size=1024,  # Small size for testing rotation
            backup_count=2
        )
        self.log_path = os.path.join(self.temp_dir, "test_runs.log")

    def tearDown(self):
        """Clean up test environment"""
        self.run_logger.close()
        shutil.rmtree(self.temp_dir)

    def _read_log(self):
        with open(self.log_path, 'r') as f:
            return f.read()

    def test_run_logger_initialization(self):
        """Test run logger initialization"""
        self.assertTrue(os.path.exists(self.log_path))
        self.assertEqual(self.run_logger.log_file, "test_runs.log")
        self.assertEqual(self.run_logger.backup_count, 2)
        self.assertIn("run_logger_initialized", self._read_log())

    def test_log_train_step(self):
        """Test logging a training step with eval metrics"""
        self.run_logger.log_train_step("abc123", 20, 0.5, {"eval_loss": 0.4})

        log_content = self._read_log()
        self.assertIn("train_step", log_content)
        self.assertIn("abc123", log_content)
        self.assertIn("eval_loss", log_content)

    def test_log_checkpoint(self):
        """Test logging a saved checkpoint"""
        self.run_logger.log_checkpoint("abc123", "runs/x/step_000010.ckpt", 10, ["base", "upsampler_stage_1"])

        log_content = self._read_log()
        self.assertIn("checkpoint_saved", log_content)
        self.assertIn("upsampler_stage_1", log_content)

    def test_log_error(self):
        """Test logging errors with context"""
        try:
            raise ValueError("Test error message")
        except ValueError as e:
            self.run_logger.log_error(e, operation="sample", run_id="abc123", details={"arm": "ours_t"})

        log_content = self._read_log()
        self.assertIn("ValueError", log_content)
        self.assertIn("Test error message", log_content)
        self.assertIn("ours_t", log_content)

    def test_unknown_event_string(self):
        """Test that an unknown event name is recorded as a system event"""
        self.run_logger.log_operation("not_an_event", "Something happened")

        logs = self.run_logger.get_run_logs(limit=1)
        self.assertEqual(logs[0].event_type, RunEventType.SYSTEM_EVENT)

    def test_get_run_logs_basic(self):
        """Test retrieving run logs newest first"""
        self.run_logger.log_run_started("train", "abc123")
        self.run_logger.log_train_step("abc123", 1, 1.0)

        logs = self.run_logger.get_run_logs(limit=10)

        self.assertEqual(len(logs), 3)  # 2 operations + 1 system initialization
        self.assertIsInstance(logs[0], RunLogEntry)
        self.assertEqual(logs[0].event_type, RunEventType.TRAIN_STEP)

    def test_get_run_logs_with_filters(self):
        """Test retrieving run logs with filters"""
        self.run_logger.log_train_step("run_a", 1, 1.0)
        self.run_logger.log_train_step("run_b", 1, 1.0)
        self.run_logger.log_non_finite("run_a", 2, "diag.json")

        self.assertEqual(len(self.run_logger.get_run_logs(filters={'run_id': 'run_a'})), 2)
        self.assertEqual(len(self.run_logger.get_run_logs(filters={'success': False})), 1)
        logs = self.run_logger.get_run_logs(filters={'event_type': ['train_step', 'non_finite_loss']})
        self.assertEqual(len(logs), 3)

    def test_get_statistics(self):
        """Test event counts"""
        self.run_logger.log_warning("PNG skipped")
        try:
            raise RuntimeError("boom")
        except RuntimeError as e:
            self.run_logger.log_error(e)

        stats = self.run_logger.get_statistics()

        self.assertEqual(stats['error_count'], 1)
        self.assertEqual(stats['failed_operations'], 2)
        self.assertEqual(stats['event_types']['warning'], 1)

    def test_log_rotation(self):
        """Test that the log rotates past max_file_size"""
        for step in range(40):
            self.run_logger.log_train_step("abc123", step, 0.1)

        self.assertTrue(os.path.exists(self.log_path + ".1"))


class TestGlobalRunLogger(unittest.TestCase):
    """Test cases for the global run logger"""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        get_run_logger().close()
        shutil.rmtree(self.temp_dir)

    def test_initialize_replaces_singleton(self):
        """Test that initialize_run_logger installs the global instance"""
        first = initialize_run_logger(log_directory=os.path.join(self.temp_dir, "a"))
        self.assertIs(get_run_logger(), first)

        second = initialize_run_logger(log_directory=os.path.join(self.temp_dir, "b"))
        self.assertIs(get_run_logger(), second)
        self.assertIsNot(first, second)


if __name__ == '__main__':
    unittest.main()
