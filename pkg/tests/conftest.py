import numpy as np
import pytest

from lidarsr.rangeview import ProjectionConfig, RangeImage


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, h, w, p_valid=0.8, lo=1.0, hi=50.0, cfg=None):
    cfg = cfg or ProjectionConfig(height=h, width=w)
    valid = rng.random((h, w)) < p_valid
    return RangeImage(cfg, np.where(valid, rng.uniform(lo, hi, (h, w)), -1.0), valid)
