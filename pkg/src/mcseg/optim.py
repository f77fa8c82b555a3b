"""Adam optimizer with classic L2 weight decay, plus Xavier initialization."""

import numpy as np

from mcseg.autodiff import Tensor


class AdamState:
    """Per-parameter first/second moments and the shared step counter.

    Defaults follow the training recipe this package targets: lr 1e-4,
    beta1 .9, beta2 .999, eps 1e-8, weight decay 1e-4.
    """

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, epsilon=1e-8,
                 weight_decay=1e-4):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}


def adam_step(params, state):
    """One Adam update over a named parameter map.

    The L2 term ``weight_decay * theta`` is added to the raw gradient before
    the moment updates (classic L2 regularization, not decoupled decay).
    Gradients are left untouched; callers reset them per iteration.
    """
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        if p.grad is None:
            raise ValueError("parameter %r has no gradient" % name)
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.epsilon)).astype(
            p.data.dtype, copy=False)


def xavier_fans(shape):
    """(fan_in, fan_out) for a conv weight (co, ci, k, k) or plain 2-d shape."""
    if len(shape) == 4:
        co, ci, kh, kw = shape
        rf = kh * kw
        return ci * rf, co * rf
    if len(shape) == 2:
        return shape[1], shape[0]
    raise ValueError("cannot derive fans from shape %s" % (shape,))


def xavier_init(shape, rng, dtype=np.float32):
    """Uniform Xavier/Glorot sample in +-sqrt(6 / (fan_in + fan_out))."""
    fan_in, fan_out = xavier_fans(shape)
    if fan_in == 0 or fan_out == 0:
        raise ValueError("zero fan for shape %s" % (shape,))
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)
