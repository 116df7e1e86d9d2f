"""
Unit tests for the error hierarchy and CLI error formatting
"""

import unittest
from unittest.mock import patch
import sys
import os

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', '..'))

from src.utils.error_handler import (EXIT_RUNTIME, EXIT_USAGE, CascadeError, CheckpointError, ConfigError,
                                     DataError, ErrorContext, ErrorHandler, NonFiniteError, PlanError,
                                     ShapeError, exit_code_for)


class TestErrorHierarchy(unittest.TestCase):
    """Test cases for the exception classes and exit codes"""

    def test_all_errors_are_value_errors(self):
        """Test the common base classes"""
        for cls in (ShapeError, PlanError, DataError):
            self.assertTrue(issubclass(cls, CascadeError))
            self.assertTrue(issubclass(cls, ValueError))

    def test_config_error_carries_field(self):
        """Test the offending field is kept"""
        error = ConfigError("train.lr", "must be positive")
        self.assertEqual(error.field, "train.lr")
        self.assertEqual(str(error), "train.lr: must be positive")

    def test_exit_codes(self):
        """Test the exit code contract"""
        self.assertEqual(exit_code_for(ConfigError("x", "y")), EXIT_USAGE)
        self.assertEqual(exit_code_for(PlanError("unreachable")), EXIT_USAGE)
        self.assertEqual(exit_code_for(CheckpointError("bad")), EXIT_RUNTIME)
        self.assertEqual(exit_code_for(NonFiniteError("nan")), EXIT_RUNTIME)
        self.assertEqual(exit_code_for(RuntimeError("other")), EXIT_RUNTIME)


class TestErrorHandler(unittest.TestCase):
    """Test cases for ErrorHandler class"""

    def test_handle_command_not_found(self):
        """Test unknown command message with suggestions"""
        result = ErrorHandler.handle_command_not_found("sampel")

        self.assertIn("Unknown command: 'sampel'", result)
        self.assertIn("Did you mean", result)
        self.assertIn("- sample", result)
        self.assertIn("Available commands", result)

    def test_command_without_match(self):
        """Test that unrelated input gets no suggestion"""
        self.assertEqual(ErrorHandler.suggest_command_fix("xyz"), "")
        self.assertNotIn("Did you mean", ErrorHandler.handle_command_not_found("xyz"))

    def test_suggest_command_fix(self):
        """Test suggestions for typos and synonyms"""
        self.assertEqual(ErrorHandler.suggest_command_fix("trainn"), "Did you mean: train?")
        self.assertIn("eval", ErrorHandler.suggest_command_fix("evaluate"))
        self.assertIn("export", ErrorHandler.suggest_command_fix("exprot"))

    def test_handle_config_error(self):
        """Test the config error names the field and the override syntax"""
        result = ErrorHandler.format_error(ConfigError("eval.n_samples", "must be >= 2"))

        self.assertIn("Invalid configuration field: eval.n_samples", result)
        self.assertIn("--override", result)

    def test_handle_checkpoint_error(self):
        """Test the checkpoint error names the tensor"""
        result = ErrorHandler.format_error(CheckpointError("shape differs", "encoder.0.blocks.0.conv1.weight"))

        self.assertIn("Incompatible checkpoint", result)
        self.assertIn("encoder.0.blocks.0.conv1.weight", result)

    def test_handle_non_finite(self):
        """Test the non-finite error points at the diagnostic"""
        result = ErrorHandler.format_error(NonFiniteError("loss is nan", "runs/x/diagnostic_step000003.json"))

        self.assertIn("diagnostic_step000003.json", result)
        self.assertIn("train.lr", result)

    def test_generic_error(self):
        """Test the fallback format"""
        self.assertEqual(ErrorHandler.format_error(ShapeError("bad shape")), "Error: bad shape\n")

    def test_calculate_similarity(self):
        """Test the similarity score"""
        self.assertEqual(ErrorHandler._calculate_similarity("plan", "plan"), 1.0)
        self.assertEqual(ErrorHandler._calculate_similarity("", "plan"), 0.0)
        self.assertGreater(ErrorHandler._calculate_similarity("checks", "check"), 0.6)


class TestErrorContext(unittest.TestCase):
    """Test cases for ErrorContext"""

    @patch('src.utils.run_logger.get_run_logger')
    def test_error_is_logged_and_reraised(self, mock_get_logger):
        """Test that failures are logged with context and not swallowed"""
        with self.assertRaises(DataError):
            with ErrorContext("sample", run_id="abc", additional_info={"n": 4}):
                raise DataError("no PNG files")

        kwargs = mock_get_logger.return_value.log_error.call_args.kwargs
        self.assertEqual(kwargs["operation"], "sample")
        self.assertEqual(kwargs["run_id"], "abc")
        self.assertEqual(kwargs["details"], {"n": 4})
        self.assertIsInstance(kwargs["error"], DataError)

    @patch('src.utils.run_logger.get_run_logger')
    def test_success_not_logged(self, mock_get_logger):
        """Test that a clean exit logs nothing"""
        with ErrorContext("plan"):
            pass

        mock_get_logger.assert_not_called()

    @patch('src.utils.run_logger.get_run_logger')
    def test_keyboard_interrupt_not_logged(self, mock_get_logger):
        """Test that interrupts pass through silently"""
        with self.assertRaises(KeyboardInterrupt):
            with ErrorContext("train"):
                raise KeyboardInterrupt()

        mock_get_logger.assert_not_called()


if __name__ == '__main__':
    unittest.main()
