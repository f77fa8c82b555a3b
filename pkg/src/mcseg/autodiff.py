"""Reverse-mode automatic differentiation over dense 4-d tensors.

A :class:`Tensor` wraps one ``(n, c, h, w)`` array. Ops are plain functions;
passing a :class:`Tape` records the op so that :func:`backward` can replay the
records in exact reverse order and populate ``grad`` on every tensor that
requires it. Passing ``tape=None`` runs forward-only (inference).

The op vocabulary is exactly what the encoder-decoder networks need:
convolution, ReLU/sigmoid, 2x pooling/unpooling, channel concatenation,
element-wise merges, coordinate channels, dropout, plus a few small helpers
(``mul``, ``smul``, ``tsum``) used to assemble scalar losses in tests.
"""

import numpy as np

from mcseg import backend

_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense (n, c, h, w) array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim != 4:
            raise ValueError("Tensor data must be 4-d (n, c, h, w), got shape %s"
                             % (arr.shape,))
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ValueError("item() on a tensor with %d elements" % self.data.size)
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return "Tensor(shape=%s, dtype=%s, requires_grad=%s)" % (
            self.shape, self.data.dtype.name, self.requires_grad)


class Tape:
    """Ordered record of executed ops, replayed backwards by :func:`backward`."""

    def __init__(self):
        self.records = []        # (out_tensor, in_tensors, backward_fn)
        self.parameters = {}     # optional named parameter map
        self.used = False

    def record(self, out, inputs, backward_fn):
        self.records.append((out, tuple(inputs), backward_fn))

    def output_ids(self):
        return {id(out) for out, _, _ in self.records}


def _check_same_dtype(*tensors):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ValueError("mixed dtypes in one graph execution: %s vs %s"
                             % (dt, t.data.dtype))
    return dt


def backward(loss, tape):
    """Populate ``grad`` on every requires_grad tensor reachable from loss."""
    if loss.data.size != 1:
        raise ValueError("backward expects a scalar loss, got shape %s"
                         % (loss.shape,))
    if tape.used:
        raise RuntimeError("backward already ran on this tape; build a new tape")
    if id(loss) not in tape.output_ids():
        raise ValueError("loss tensor was not produced by this tape (detached graph)")
    tape.used = True

    grads = {id(loss): np.ones_like(loss.data)}
    for out, inputs, backward_fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        input_grads = backward_fn(g)
        for t, gi in zip(inputs, input_grads):
            if gi is None:
                continue
            if id(t) in grads:
                grads[id(t)] += gi
            else:
                grads[id(t)] = gi
            if t.requires_grad:
                t.grad = grads[id(t)]


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def conv2d(x, w, b, dilation=1, tape=None):
    """2-d convolution, stride 1, "same" zero padding, odd square kernel.

    ``w`` has shape (co, ci, k, k); ``b`` is a (1, co, 1, 1) bias tensor or
    None. Output spatial size equals input spatial size.
    """
    if b is None:
        _check_same_dtype(x, w)
    else:
        _check_same_dtype(x, w, b)
        if b.shape != (1, w.shape[0], 1, 1):
            raise ValueError("bias shape %s does not match %d output channels"
                             % (b.shape, w.shape[0]))
    out_data = backend.conv2d_forward(x.data, w.data, dilation)
    if b is not None:
        out_data += b.data
    out = Tensor(out_data)

    if tape is not None:
        k = w.shape[2]
        in_shape = x.shape
        w_data, x_data = w.data, x.data

        def bwd(gy):
            gx = backend.conv2d_input_grad(gy, w_data, dilation, in_shape)
            gw = backend.conv2d_weight_grad(gy, x_data, k, dilation)
            gb = None if b is None else gy.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
            return (gx, gw, gb)

        tape.record(out, (x, w, b) if b is not None else (x, w), bwd)
    return out


def relu(x, tape=None):
    out = Tensor(np.maximum(x.data, 0))
    if tape is not None:
        mask = x.data > 0

        def bwd(gy):
            return (gy * mask,)

        tape.record(out, (x,), bwd)
    return out


def sigmoid(x, tape=None):
    y = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(y)
    if tape is not None:
        def bwd(gy):
            return (gy * y * (1.0 - y),)

        tape.record(out, (x,), bwd)
    return out


def _pool_windows(a):
    n, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ValueError("pool2 needs even spatial dims, got %dx%d" % (h, w))
    # (n, c, h/2, w/2, 4) with window order (0,0),(0,1),(1,0),(1,1)
    return a.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5) \
            .reshape(n, c, h // 2, w // 2, 4)


def max_pool2(x, tape=None):
    """2x2 max pooling, stride 2; ties route gradient to the first window slot."""
    win = _pool_windows(x.data)
    idx = win.argmax(axis=-1)
    out = Tensor(np.take_along_axis(win, idx[..., None], axis=-1)[..., 0])
    if tape is not None:
        n, c, h, w = x.shape

        def bwd(gy):
            gwin = np.zeros(win.shape, dtype=gy.dtype)
            np.put_along_axis(gwin, idx[..., None], gy[..., None], axis=-1)
            gx = gwin.reshape(n, c, h // 2, w // 2, 2, 2) \
                     .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
            return (gx,)

        tape.record(out, (x,), bwd)
    return out


def avg_pool2(x, tape=None):
    win = _pool_windows(x.data)
    out = Tensor(win.mean(axis=-1))
    if tape is not None:
        n, c, h, w = x.shape

        def bwd(gy):
            g = np.broadcast_to((gy * 0.25)[..., None], gy.shape + (4,))
            gx = g.reshape(n, c, h // 2, w // 2, 2, 2) \
                  .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
            return (np.ascontiguousarray(gx),)

        tape.record(out, (x,), bwd)
    return out


def unpool2(x, tape=None):
    """Nearest-neighbor 2x upsampling; gradient sums each 2x2 block."""
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3))
    if tape is not None:
        n, c, h, w = x.shape

        def bwd(gy):
            gx = gy.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))
            return (gx,)

        tape.record(out, (x,), bwd)
    return out


def concat_channels(xs, tape=None):
    if not xs:
        raise ValueError("concat_channels needs at least one input")
    if len(xs) == 1:
        return xs[0]
    _check_same_dtype(*xs)
    ref = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError("concat_channels spatial/batch mismatch: %s vs %s"
                             % (ref, t.shape))
    out = Tensor(np.concatenate([t.data for t in xs], axis=1))
    if tape is not None:
        sizes = [t.shape[1] for t in xs]
        edges = np.cumsum([0] + sizes)

        def bwd(gy):
            return tuple(gy[:, edges[i]:edges[i + 1]] for i in range(len(sizes)))

        tape.record(out, tuple(xs), bwd)
    return out


def merge(xs, mode="concat", tape=None):
    """Fuse same-resolution inputs by concat, element-wise sum, or max.

    sum/max need identical shapes; on max ties the gradient goes to the
    earliest input.
    """
    if mode == "concat":
        return concat_channels(xs, tape=tape)
    if not xs:
        raise ValueError("merge needs at least one input")
    _check_same_dtype(*xs)
    ref = xs[0].shape
    for t in xs[1:]:
        if t.shape != ref:
            raise ValueError("merge(%s) needs equal shapes, got %s vs %s"
                             % (mode, ref, t.shape))
    if len(xs) == 1:
        return xs[0]
    datas = [t.data for t in xs]
    if mode == "sum":
        out = Tensor(np.add.reduce(datas))
        if tape is not None:
            def bwd(gy):
                # fresh buffers: inputs may accumulate further gradients
                return (gy,) + tuple(gy.copy() for _ in datas[1:])

            tape.record(out, tuple(xs), bwd)
        return out
    if mode == "max":
        stack = np.stack(datas)
        winner = stack.argmax(axis=0)  # first index on ties
        out = Tensor(np.take_along_axis(stack, winner[None], axis=0)[0])
        if tape is not None:
            def bwd(gy):
                return tuple(gy * (winner == i) for i in range(len(datas)))

            tape.record(out, tuple(xs), bwd)
        return out
    raise ValueError("unknown merge mode %r" % (mode,))


def coord_channels(n, h, w, dtype=np.float32):
    """Constant (n, 2, h, w) tensor of pixel coordinates in [-1, 1].

    Channel 0 varies along the width (x), channel 1 along the height (y);
    a single row or column maps to 0. Carries no gradient.
    """
    if h < 1 or w < 1:
        raise ValueError("coord_channels needs h, w >= 1")
    xs = np.linspace(-1.0, 1.0, w, dtype=dtype) if w > 1 \
        else np.zeros(1, dtype=dtype)
    ys = np.linspace(-1.0, 1.0, h, dtype=dtype) if h > 1 \
        else np.zeros(1, dtype=dtype)
    cx = np.broadcast_to(xs[None, :], (h, w))
    cy = np.broadcast_to(ys[:, None], (h, w))
    plane = np.stack([cx, cy])[None]
    return Tensor(np.ascontiguousarray(np.broadcast_to(plane, (n, 2, h, w))))


def dropout(x, p, training, rng=None, tape=None):
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Identity at inference and for p == 0 (the rng is not consumed then).
    """
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must be in [0, 1), got %r" % (p,))
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p)
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    mask = keep.astype(x.dtype) * scale
    out = Tensor(x.data * mask)
    if tape is not None:
        def bwd(gy):
            return (gy * mask,)

        tape.record(out, (x,), bwd)
    return out


def mul(a, b, tape=None):
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ValueError("mul needs equal shapes, got %s vs %s" % (a.shape, b.shape))
    out = Tensor(a.data * b.data)
    if tape is not None:
        def bwd(gy):
            return (gy * b.data, gy * a.data)

        tape.record(out, (a, b), bwd)
    return out


def smul(x, scalar, tape=None):
    out = Tensor(x.data * x.dtype.type(scalar))
    if tape is not None:
        def bwd(gy):
            return (gy * x.dtype.type(scalar),)

        tape.record(out, (x,), bwd)
    return out


def tsum(x, tape=None):
    """Sum all elements into a (1, 1, 1, 1) scalar tensor."""
    out = Tensor(x.data.sum(dtype=x.dtype).reshape(1, 1, 1, 1))
    if tape is not None:
        def bwd(gy):
            return (np.full(x.shape, gy.reshape(()), dtype=x.dtype),)

        tape.record(out, (x,), bwd)
    return out
