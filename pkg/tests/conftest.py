import numpy as np
import pytest


def numeric_grad(f, arrays, index, h=1e-6):
    """Central finite differences of scalar f(list_of_arrays) w.r.t. arrays[index].

    Arrays must be float64; f must rebuild its graph from plain numpy inputs
    on every call.
    """
    work = [np.array(a, dtype=np.float64) for a in arrays]
    grad = np.zeros_like(work[index])
    flat = work[index].reshape(-1)
    gflat = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        fp = f(work)
        flat[j] = orig - h
        fm = f(work)
        flat[j] = orig
        gflat[j] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(got, want):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = np.maximum(np.abs(want), 1e-8)
    return float(np.max(np.abs(got - want) / denom))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
