#!/usr/bin/env python3
"""
Pytest configuration file for psifrac tests.
"""

import os
import sys
import tempfile
import shutil
from pathlib import Path

import numpy as np
import pytest

# Add src directory to Python path
src_dir = Path(__file__).parent.parent / "src"
sys.path.insert(0, str(src_dir))

from core.frac_ops import PsiMap, QuadGrid  # noqa: E402

PROBLEMS_DIR = Path(__file__).parent.parent / "config" / "problems"


def pytest_configure(config):
    """Configure pytest."""
    # Add custom markers
    config.addinivalue_line(
        "markers",
        "integration: mark test as integration test (runs the CLI end to end)"
    )
    config.addinivalue_line(
        "markers",
        "slow: mark test as slow (skip by default)"
    )
    config.addinivalue_line(
        "markers",
        "acceptance: reproduces a worked example to its published accuracy"
    )


class TempConfigDir:
    """Temporary directory for configuration files."""

    def __init__(self):
        self.temp_dir = None
        self.original_env = {}

    def __enter__(self):
        """Create temporary directory."""
        self.temp_dir = tempfile.mkdtemp(prefix="psifrac_test_")
        # Store original environment variables
        self.original_env = {
            'HOME': os.environ.get('HOME'),
            'PSIFRAC_CONFIG_DIR': os.environ.get('PSIFRAC_CONFIG_DIR'),
            'PSIFRAC_THREADS': os.environ.get('PSIFRAC_THREADS'),
        }
        # Set environment to use temp directory
        os.environ['HOME'] = self.temp_dir
        os.environ['PSIFRAC_CONFIG_DIR'] = self.temp_dir
        os.environ.pop('PSIFRAC_THREADS', None)
        return Path(self.temp_dir)

    def __exit__(self, exc_type, exc_val, exc_tb):
        """Clean up temporary directory."""
        # Restore original environment
        for key, value in self.original_env.items():
            if value is None:
                os.environ.pop(key, None)
            else:
                os.environ[key] = value
        # Remove temp directory
        if self.temp_dir and os.path.exists(self.temp_dir):
            shutil.rmtree(self.temp_dir, ignore_errors=True)


@pytest.fixture
def temp_config_dir():
    with TempConfigDir() as path:
        yield path


def make_psi1(a=0.0, b=1.0):
    return PsiMap(lambda t: np.asarray(t, dtype=float) * 1.0,
                  lambda t: np.ones_like(np.asarray(t, dtype=float)), a, b, name="t")


def make_psi2(a=0.0, b=1.0):
    return PsiMap(lambda t: np.sqrt(np.asarray(t, dtype=float) + 1.0),
                  lambda t: 0.5 / np.sqrt(np.asarray(t, dtype=float) + 1.0), a, b, name="sqrt(t+1)")


@pytest.fixture
def psi1():
    return make_psi1()


@pytest.fixture
def psi2():
    return make_psi2()


@pytest.fixture(params=["psi1", "psi2"])
def psi(request):
    return make_psi1() if request.param == "psi1" else make_psi2()


@pytest.fixture
def grid_for():
    """Factory: uniform-in-psi grid with N cells over the whole psi domain."""
    def build(psi, N=2048):
        return QuadGrid.uniform_in_psi(psi, N)
    return build
