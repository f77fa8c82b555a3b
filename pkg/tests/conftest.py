import numpy as np
import pytest

from mcseg.autodiff import Tape, backward


def safe_random(rng, shape, margin=1e-2, dtype=np.float64, offset=0.0):
    """Random values with pairwise gaps and a margin away from 0.

    Keeps finite-difference checks away from the kinks of relu/max ops; a
    fractional offset makes two draws tie-free against each other.
    """
    n = int(np.prod(shape))
    vals = (rng.permutation(n) + 1 + offset).astype(np.float64)
    vals *= 3.0 * margin
    signs = rng.choice([-1.0, 1.0], size=n)
    return (vals * signs).reshape(shape).astype(dtype)


def numeric_grad(loss_fn, arr, eps=1e-4):
    """Central-difference gradient of loss_fn() wrt arr (mutated in place)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        lp = loss_fn()
        flat[i] = old - eps
        lm = loss_fn()
        flat[i] = old
        gflat[i] = (lp - lm) / (2.0 * eps)
    return grad


def assert_grads_match(make_loss, tensors, eps=1e-4, tol=1e-4, floor=1e-5):
    """Compare tape gradients of make_loss(tape) against finite differences.

    make_loss must be deterministic and read the tensors' current data.
    """
    tape = Tape()
    loss = make_loss(tape)
    backward(loss, tape)
    analytic = [t.grad.copy() for t in tensors]

    def value():
        return make_loss(None).item()

    for t, an in zip(tensors, analytic):
        assert an is not None, "missing gradient"
        num = numeric_grad(value, t.data, eps)
        scale = np.maximum(np.maximum(np.abs(num), np.abs(an)), floor)
        rel = np.abs(num - an) / scale
        assert rel.max() < tol, "gradient mismatch: rel err %g" % rel.max()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
