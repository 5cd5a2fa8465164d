"""
Unit tests for config.py module.
Tests environment defaults and validation.
"""

import pytest
import os
import sys
from unittest.mock import patch

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))


class TestConfigValidation:
    """Test Config validation and graceful degradation."""

    def test_validate_returns_dict(self):
        """Test that validate() returns a dict with required keys."""
        from src.config import Config

        result = Config.validate()

        assert isinstance(result, dict)
        assert "valid" in result
        assert "warnings" in result
        assert "errors" in result

    def test_validate_does_not_raise(self):
        """Invalid values are reported, not raised."""
        from src.config import Config

        with patch.object(Config, 'THREADS', 0), patch.object(Config, 'LOG_LEVEL', 'LOUD'):
            result = Config.validate()

        assert result["valid"] is False
        assert len(result["errors"]) == 2

    def test_negative_seed(self):
        """Seeds must be unsigned."""
        from src.config import Config

        with patch.object(Config, 'SEED', -1):
            assert Config.validate()["valid"] is False

    def test_too_many_threads_is_a_warning(self):
        """More workers than CPUs only warns."""
        from src.config import Config

        with patch.object(Config, 'THREADS', (os.cpu_count() or 1) + 1):
            result = Config.validate()

        assert result["valid"] is True
        assert result["warnings"]


class TestEffectiveThreads:
    """Test worker count resolution."""

    def test_requested_wins(self):
        from src.config import Config

        with patch.object(Config, 'THREADS', 4):
            assert Config.get_effective_threads(2) == 2

    def test_default_from_environment(self):
        from src.config import Config

        with patch.object(Config, 'THREADS', 3):
            assert Config.get_effective_threads() == 3

    def test_invalid_falls_back_to_one(self):
        from src.config import Config

        assert Config.get_effective_threads(0) == 1


class TestEnvironmentParsing:
    """Test the env helpers."""

    def test_env_int_invalid(self):
        from src.config import _env_int

        with patch.dict(os.environ, {"PATCHLAB_TEST_INT": "many"}):
            assert _env_int("PATCHLAB_TEST_INT", 7) == 7

    def test_env_bool(self):
        from src.config import _env_bool

        with patch.dict(os.environ, {"PATCHLAB_TEST_BOOL": "Yes"}):
            assert _env_bool("PATCHLAB_TEST_BOOL", False) is True
        assert _env_bool("PATCHLAB_TEST_MISSING", True) is True


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
