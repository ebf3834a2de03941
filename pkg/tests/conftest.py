import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A 60-tile hr1 surrogate corpus with ground-truth masks (manifest, masks)."""
    from amdefect.dataset import SurrogateConfig, surrogate_generate

    cfg = SurrogateConfig(counts={"no-defect": 40, "seeded_1": 8, "seeded_2": 6, "seeded_3": 6}, seed=7)
    return surrogate_generate(cfg, tmp_path_factory.mktemp("corpus"))
