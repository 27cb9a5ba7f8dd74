"""Differentiable operations recorded on a Tape.

Each op validates shapes, computes the forward value in the tape dtype,
and registers a backward closure. ``forward_op(kind, inputs, attrs)``
dispatches by kind name (hyphenated aliases accepted); the same registry
drives the finite-difference gradcheck suite.
"""

import numpy as np

from .svd import svd_f64
from .tensor import ShapeError

__all__ = [
    "forward_op",
    "op_kinds",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "reduce_sum",
    "reduce_mean",
    "relu",
    "sqrt",
    "l2_normalize",
    "softmax",
    "softmax_cross_entropy",
    "batchnorm",
    "BatchNormState",
    "conv2d",
    "conv_output_extent",
    "concat",
    "index_select",
    "nuclear_norm",
]


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(kind, a, b, fwd, bwd_a, bwd_b):
    try:
        out = fwd(a.data, b.data)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast")
    ad, bd = a.data, b.data

    def backward(g):
        return [
            _unbroadcast(bwd_a(g, ad, bd), ad.shape),
            _unbroadcast(bwd_b(g, ad, bd), bd.shape),
        ]

    return a.tape.record(kind, [a, b], out, backward)


def add(a, b):
    return _binary("add", a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary("sub", a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary("mul", a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binary(
        "div",
        a,
        b,
        np.divide,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def scale(a, alpha):
    alpha = float(alpha)
    out = a.data * np.asarray(alpha, dtype=a.dtype)

    def backward(g):
        return [g * alpha]

    return a.tape.record("scale", [a], out, backward)


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expects rank-2 tensors, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        return [g @ bd.T, ad.T @ g]

    return a.tape.record("matmul", [a, b], out, backward)


def transpose(a, axes=None):
    if axes is None:
        if a.ndim != 2:
            raise ShapeError(f"transpose: default expects rank-2, got shape {a.shape}")
        perm = (1, 0)
    else:
        perm = tuple(axes)
        if sorted(perm) != list(range(a.ndim)):
            raise ShapeError(f"transpose: {perm} is not a permutation of rank {a.ndim}")
    inv = np.argsort(perm)
    out = np.ascontiguousarray(a.data.transpose(perm))

    def backward(g):
        return [np.ascontiguousarray(g.transpose(inv))]

    return a.tape.record("transpose", [a], out, backward)


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    in_shape = a.data.shape

    def backward(g):
        return [g.reshape(in_shape)]

    return a.tape.record("reshape", [a], out, backward)


def _reduce(kind, a, axis, keepdims, mean):
    axes = axis
    if axes is not None and not isinstance(axes, tuple):
        axes = (int(axes),)
    out = a.data.mean(axis=axes, keepdims=keepdims) if mean else a.data.sum(axis=axes, keepdims=keepdims)
    in_shape = a.data.shape
    count = a.data.size if axes is None else int(np.prod([in_shape[ax] for ax in axes]))

    def backward(g):
        gk = g
        if not keepdims and axes is not None:
            gk = np.expand_dims(g, axes)
        elif not keepdims and axes is None:
            gk = g.reshape((1,) * len(in_shape))
        gx = np.broadcast_to(gk, in_shape).copy()
        if mean:
            gx /= count
        return [gx]

    return a.tape.record(kind, [a], np.asarray(out), backward)


def reduce_sum(a, axis=None, keepdims=False):
    return _reduce("sum", a, axis, keepdims, mean=False)


def reduce_mean(a, axis=None, keepdims=False):
    return _reduce("mean", a, axis, keepdims, mean=True)


def relu(a):
    mask = a.data > 0

    def backward(g):
        return [g * mask]

    return a.tape.record("relu", [a], np.where(mask, a.data, 0), backward)


def sqrt(a):
    if np.any(a.data < 0):
        raise ShapeError("sqrt: negative input")
    out = np.sqrt(a.data)

    def backward(g):
        return [g * 0.5 / out]

    return a.tape.record("sqrt", [a], out, backward)


def l2_normalize(a, eps=1e-8):
    """Normalize along the last axis; rows with norm below ``eps`` are
    divided by ``eps`` instead (zero-vector guard)."""
    norms = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norms, eps)
    y = a.data / denom
    clamped = norms <= eps

    def backward(g):
        gy = (g * y).sum(axis=-1, keepdims=True)
        dx = (g - y * gy) / denom
        return [np.where(clamped, g / eps, dx)]

    return a.tape.record("l2_normalize", [a], y, backward)


def softmax(a, temperature=1.0):
    if temperature <= 0:
        raise ShapeError(f"softmax: temperature must be positive, got {temperature}")
    z = a.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        gy = (g * y).sum(axis=-1, keepdims=True)
        return [y * (g - gy) / temperature]

    return a.tape.record("softmax", [a], y, backward)


def softmax_cross_entropy(logits, targets):
    """Mean over rows of cross-entropy between softmax(logits) and integer
    targets. ``targets`` is a plain int array, not a tensor."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be rank-2, got {logits.shape}")
    targets = np.asarray(targets)
    b, k = logits.shape
    if targets.shape != (b,):
        raise ShapeError(
            f"softmax_cross_entropy: targets shape {targets.shape} does not match batch {b}"
        )
    if targets.min() < 0 or targets.max() >= k:
        raise ShapeError(f"softmax_cross_entropy: target out of range for {k} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = lse - z[np.arange(b), targets]
    out = np.asarray(rows.mean(), dtype=logits.dtype)
    probs = np.exp(z - lse[:, None])

    def backward(g):
        dlogits = probs.copy()
        dlogits[np.arange(b), targets] -= 1.0
        return [g * dlogits / b]

    return logits.tape.record("softmax_cross_entropy", [logits], out, backward)


class BatchNormState:
    """Running statistics for one batchnorm site (inference mode)."""

    def __init__(self, dim, dtype=np.float32):
        self.running_mean = np.zeros(dim, dtype=dtype)
        self.running_var = np.ones(dim, dtype=dtype)

    def arrays(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


def batchnorm(x, gamma, beta, state, training, momentum=0.1, eps=1e-5):
    """Batch normalization over axis 0 of a (B, D) tensor.

    Training mode normalizes with batch statistics (variance floored at
    ``eps``) and updates ``state`` running averages in place; inference
    mode uses the running averages.
    """
    if x.ndim != 2:
        raise ShapeError(f"batchnorm: expects (B, D), got {x.shape}")
    d = x.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"batchnorm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match D={d}"
        )
    if training:
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        ivar = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * ivar
        state.running_mean[...] = (1 - momentum) * state.running_mean + momentum * mu
        state.running_var[...] = (1 - momentum) * state.running_var + momentum * var
        b = x.shape[0]
        gd = gamma.data

        def backward(g):
            dxhat = g * gd
            dx = (
                ivar
                / b
                * (b * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            )
            return [dx, (g * xhat).sum(axis=0), g.sum(axis=0)]

    else:
        ivar = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.data - state.running_mean) * ivar
        gd = gamma.data

        def backward(g):
            return [g * gd * ivar, (g * xhat).sum(axis=0), g.sum(axis=0)]

    out = gamma.data * xhat + beta.data
    return x.tape.record("batchnorm", [x, gamma, beta], out.astype(x.dtype, copy=False), backward)


def conv_output_extent(extent, kernel, stride):
    return (extent - kernel) // stride + 1


def conv2d(x, w, b, stride=(1, 1)):
    """Valid (unpadded) 2-D convolution: (B,Cin,H,W) * (Cout,Cin,kh,kw) + bias."""
    from .. import backend

    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expects rank-4 input/weight, got {x.shape}, {w.shape}")
    bs, cin, h, wdt = x.shape
    cout, cin_w, kh, kw = w.shape
    sh, sw = (stride, stride) if isinstance(stride, int) else tuple(stride)
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} != weight channels {cin_w}")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
    if sh < 1 or sw < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got ({sh}, {sw})")
    ho = conv_output_extent(h, kh, sh)
    wo = conv_output_extent(wdt, kw, sw)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: kernel ({kh}x{kw}, stride {sh}x{sw}) does not fit input ({h}x{wdt})"
        )

    cols = backend.im2col(np.ascontiguousarray(x.data), kh, kw, sh, sw)
    colmat = cols.reshape(bs * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = colmat @ wmat.T + b.data
    out = np.ascontiguousarray(out.reshape(bs, ho, wo, cout).transpose(0, 3, 1, 2))

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(bs * ho * wo, cout)
        dw = (gmat.T @ colmat).reshape(w.shape)
        db = gmat.sum(axis=0)
        dcols = (gmat @ wmat).reshape(bs, ho, wo, cin, kh, kw)
        dx = backend.col2im(np.ascontiguousarray(dcols), h, wdt, sh, sw)
        return [dx, dw, db]

    return x.tape.record("conv2d", [x, w, b], out, backward)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return [np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis)]

    return tensors[0].tape.record("concat", tensors, out, backward)


def index_select(a, axis, index):
    """Take one slice along ``axis`` (the axis is squeezed)."""
    axis = int(axis)
    index = int(index)
    if not (0 <= axis < a.ndim):
        raise ShapeError(f"index_select: axis {axis} out of range for rank {a.ndim}")
    if not (0 <= index < a.shape[axis]):
        raise ShapeError(f"index_select: index {index} out of range for extent {a.shape[axis]}")
    out = np.ascontiguousarray(a.data.take(index, axis=axis))
    in_shape = a.data.shape
    slicer = tuple(index if ax == axis else slice(None) for ax in range(a.ndim))

    def backward(g):
        dx = np.zeros(in_shape, dtype=g.dtype)
        dx[slicer] = g
        return [dx]

    return a.tape.record("index_select", [a], out, backward)


def nuclear_norm(a, cutoff=1e-9):
    """Sum of singular values of a rank-2 tensor.

    Backward contributes U_r @ V_r^T, restricted to singular values above
    ``cutoff`` (a valid subgradient choice at rank deficiency). The SVD
    runs in 64-bit regardless of the tape dtype.
    """
    if a.ndim != 2:
        raise ShapeError(f"nuclear_norm: expects rank-2, got {a.shape}")
    u, s, v = svd_f64(a.data)
    out = np.asarray(s.sum(), dtype=a.dtype)
    keep = s > cutoff
    grad_dir = (u[:, keep] @ v[:, keep].T).astype(a.dtype)

    def backward(g):
        return [g * grad_dir]

    return a.tape.record("nuclear_norm", [a], out, backward)


_ALIASES = {
    "conv2d-valid": "conv2d",
    "l2-normalize": "l2_normalize",
    "softmax-cross-entropy": "softmax_cross_entropy",
    "index-select": "index_select",
    "nuclear-norm": "nuclear_norm",
}

_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "relu": relu,
    "sqrt": sqrt,
    "l2_normalize": l2_normalize,
    "softmax": softmax,
    "softmax_cross_entropy": softmax_cross_entropy,
    "batchnorm": batchnorm,
    "conv2d": conv2d,
    "concat": concat,
    "index_select": index_select,
    "nuclear_norm": nuclear_norm,
}


def op_kinds():
    return sorted(_OPS)


def forward_op(kind, inputs, attrs=None):
    """Dispatch an op by kind name onto tensors ``inputs``.

    ``attrs`` carries the op's non-tensor arguments (stride, axis, targets,
    ...). Unknown kinds raise ShapeError.
    """
    name = _ALIASES.get(kind, kind.replace("-", "_"))
    fn = _OPS.get(name)
    if fn is None:
        raise ShapeError(f"forward_op: unknown kind {kind!r}")
    attrs = dict(attrs or {})
    if name == "concat":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)
