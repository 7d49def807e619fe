import numpy as np
import pytest

from multiexit import tensor as T


def finite_diff_grad(scalar_fn, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar_fn() w.r.t. the buffer x.

    scalar_fn must recompute its value from x's current contents; x is
    perturbed in place and restored.  Use float64 buffers.
    """
    assert x.dtype == np.float64, "finite differences need the 64-bit path"
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = scalar_fn()
        flat[i] = orig - h
        fm = scalar_fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def assert_grads_close(analytic: np.ndarray, numeric: np.ndarray,
                       rtol: float = 1e-3, atol: float = 1e-7) -> None:
    analytic = np.asarray(analytic)
    err = np.abs(analytic - numeric)
    tol = atol + rtol * np.maximum(np.abs(analytic), np.abs(numeric))
    worst = (err - tol).max()
    assert (err <= tol).all(), f"gradient mismatch: worst excess {worst:.3e}\n" \
                               f"analytic={analytic.ravel()[:8]}\nnumeric={numeric.ravel()[:8]}"


def weighted_sum(out: T.Tensor, rng: np.random.Generator) -> T.Tensor:
    """Random-weight reduction to a scalar so element permutation bugs
    cannot cancel the way a plain sum would let them."""
    r = T.Tensor(rng.normal(size=out.shape).astype(out.dtype))
    return T.sum_all(T.mul(out, r))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
