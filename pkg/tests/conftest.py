import numpy as np
import pytest

from featboost.booster import DescriptorVector, FeatureSet, KeypointGeometry


def unit_rows(rng, n, d):
    m = rng.normal(size=(n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def geometry_rows(rng, n):
    return np.column_stack([rng.uniform(0, 1, (n, 3)),
                            rng.uniform(-3, 3, (n, 1)),
                            rng.uniform(1, 4, (n, 1))])


def make_feature_set(rng, n, d, kind="real", width=640, height=480, image_id="img"):
    kps = [KeypointGeometry(rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 1),
                            rng.uniform(-np.pi, np.pi), rng.uniform(0, 4))
           for _ in range(n)]
    if kind == "real":
        descs = [DescriptorVector("real", row) for row in unit_rows(rng, n, d)]
    else:
        descs = [DescriptorVector("binary", rng.integers(0, 2, d)) for _ in range(n)]
    return FeatureSet(image_id, width, height, kps, descs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
