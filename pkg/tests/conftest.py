"""
Pytest configuration and fixtures.
"""

import os
import sys
import tempfile
from pathlib import Path

import pytest

# Add project root to Python path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

# Keep artifacts out of ./data during tests
os.environ["BLOCKLAB_OUTPUT_DIR"] = tempfile.mkdtemp(prefix="blocklab-test-")
os.environ["BLOCKLAB_CONFIG"] = str(project_root / "configs" / "config.yaml")

from engine.diffusion import BlockPartition, NoiseSchedule, Vocabulary  # noqa: E402


@pytest.fixture
def output_dir(tmp_path, monkeypatch):
    """Fresh artifact directory per test."""
    monkeypatch.setenv("BLOCKLAB_OUTPUT_DIR", str(tmp_path))
    return tmp_path


@pytest.fixture
def vocab2():
    """Two content tokens A, B."""
    return Vocabulary.with_content(2, ["A", "B"])


@pytest.fixture
def vocab3():
    return Vocabulary.with_content(3)


@pytest.fixture
def linear4():
    return NoiseSchedule.linear_alpha(4)


@pytest.fixture
def part8x2():
    return BlockPartition(8, 2)
