import numpy as np
import pytest
from hypothesis import settings

from odtdemand.synthgen import make_blobs

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def blobs():
    return make_blobs(n_per_class=100, seed=0)


@pytest.fixture(scope="session")
def blobs_split(blobs):
    from odtdemand.evaluation import split

    return split(blobs, 0.2, seed=0)


def exhaustive_min_sse(x, k):
    """Minimum k-means SSE over every labelling of the points (oracle)."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    labels = np.indices((k,) * n).reshape(n, -1).T
    best = np.zeros(len(labels))
    for c in range(k):
        mask = (labels == c).astype(float)
        cnt = mask.sum(axis=1)
        s = mask @ x
        ss = mask @ (x * x)
        with np.errstate(invalid="ignore", divide="ignore"):
            best += np.where(cnt > 0, ss - s * s / np.where(cnt > 0, cnt, 1), 0.0)
    return float(best.min())


def finite_difference_errors(net, X, Y, h=1e-5):
    """Relative error of every analytic gradient entry against central differences (oracle)."""
    _, cache = net.forward(X)
    g = net.grad(cache, Y)
    p0 = net.params.copy()
    num = np.empty_like(p0)
    for i in range(len(p0)):
        net.params[i] = p0[i] + h
        up = net.loss(net.forward(X)[1], Y)
        net.params[i] = p0[i] - h
        down = net.loss(net.forward(X)[1], Y)
        net.params[i] = p0[i]
        num[i] = (up - down) / (2 * h)
    return np.abs(g - num) / np.maximum(1.0, np.abs(g))
