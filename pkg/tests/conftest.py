import sys
from pathlib import Path

import numpy as np
import pytest

project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root / "src"))

from desense_kf.config import DesenseConfig, set_config  # noqa: E402
from desense_kf.model import make_benchmark  # noqa: E402


@pytest.fixture(autouse=True)
def default_config():
    set_config(DesenseConfig())
    yield
    set_config(DesenseConfig())


@pytest.fixture
def benchmark():
    """(model, constants) of the two-state benchmark"""
    return make_benchmark()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
