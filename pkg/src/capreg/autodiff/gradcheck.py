"""Finite-difference gradient verification.

Every differentiable op (and, via the losses/train registries, every loss
and composite objective) is checked against central finite differences in
64-bit: at each random point we draw a fresh random direction d and
compare the analytic directional derivative <grad, d> with
(f(x + h d) - f(x - h d)) / 2h at relative tolerance
|analytic - numeric| / max(|numeric|, 1).
"""

import contextlib
import zlib

import numpy as np

from . import ops
from .tensor import Tape

__all__ = [
    "directional_check",
    "op_checks",
    "all_checks",
    "run_named_checks",
    "corrupt_op_gradient",
    "DEFAULT_TOL",
]

DEFAULT_TOL = 1e-4


def directional_check(make, rng, points=20, step=1e-5):
    """Max relative error over ``points`` random (input, direction) draws.

    ``make(rng)`` returns ``(fn, arrays)`` where ``fn(arrays)`` evaluates
    the scalar and returns ``(value, grads)`` with grads aligned to arrays.
    """
    worst = 0.0
    for _ in range(points):
        fn, arrays = make(rng)
        _, grads = fn(arrays)
        dirs = [rng.standard_normal(a.shape) for a in arrays]
        scale = np.sqrt(sum(float((d * d).sum()) for d in dirs))
        dirs = [d / scale for d in dirs]
        plus, _ = fn([a + step * d for a, d in zip(arrays, dirs)])
        minus, _ = fn([a - step * d for a, d in zip(arrays, dirs)])
        numeric = (plus - minus) / (2.0 * step)
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
        err = abs(analytic - numeric) / max(abs(numeric), 1.0)
        worst = max(worst, err)
    return worst


def tape_fn(build):
    """Wrap a tape-building closure into the (value, grads) protocol.

    ``build(tape, tensors)`` must return a scalar tensor; ``tensors`` are
    float64 leaves created from the checked arrays.
    """

    def fn(arrays):
        tape = Tape(np.float64)
        tensors = [tape.tensor(a, requires_grad=True) for a in arrays]
        loss = build(tape, tensors)
        tape.backward(loss)
        grads = [
            t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors
        ]
        return loss.item(), grads

    return fn


def _projected(op_call):
    """Scalarize a non-scalar op through a fixed random projection."""

    def make(rng):
        arrays, call = op_call(rng)
        weights = {}

        def build(tape, tensors):
            out = call(tape, tensors)
            if out.data.size == 1 and out.ndim == 0:
                return out
            if "w" not in weights:
                weights["w"] = rng.standard_normal(out.shape)
            return ops.reduce_sum(ops.mul(out, tape.constant(weights["w"])))

        return tape_fn(build), arrays

    return make


def _away_from(x, threshold):
    return x + np.sign(x) * threshold


def op_checks():
    """Sampler registry covering every differentiable op kind."""

    def binary(op, denom_safe=False):
        def sample(rng):
            a = rng.standard_normal((3, 4))
            b = rng.standard_normal((3, 4) if rng.random() < 0.5 else (4,))
            if denom_safe:
                b = np.sign(b) * (0.5 + np.abs(b))
            return [a, b], lambda tape, ts: op(ts[0], ts[1])

        return sample

    def sample_scale(rng):
        alpha = float(rng.uniform(-2, 2))
        return [rng.standard_normal((3, 4))], lambda tape, ts: ops.scale(ts[0], alpha)

    def sample_matmul(rng):
        return (
            [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))],
            lambda tape, ts: ops.matmul(ts[0], ts[1]),
        )

    def sample_transpose(rng):
        perm = tuple(rng.permutation(3))
        return [rng.standard_normal((2, 3, 4))], lambda tape, ts: ops.transpose(ts[0], perm)

    def sample_reshape(rng):
        return [rng.standard_normal((3, 4))], lambda tape, ts: ops.reshape(ts[0], (2, 6))

    def reducer(op):
        def sample(rng):
            axis = [None, 0, 1, (0, 2)][rng.integers(4)]
            keep = bool(rng.random() < 0.5)
            return [rng.standard_normal((2, 3, 4))], lambda tape, ts: op(
                ts[0], axis=axis, keepdims=keep
            )

        return sample

    def sample_relu(rng):
        x = _away_from(rng.standard_normal((3, 4)), 0.05)
        return [x], lambda tape, ts: ops.relu(ts[0])

    def sample_sqrt(rng):
        return [rng.uniform(0.3, 2.0, (3, 4))], lambda tape, ts: ops.sqrt(ts[0])

    def sample_l2n(rng):
        x = rng.standard_normal((3, 5))
        x *= (0.5 + rng.random((3, 1)))
        return [x], lambda tape, ts: ops.l2_normalize(ts[0])

    def sample_softmax(rng):
        temp = float(rng.choice([0.5, 1.0, 2.0]))
        return [rng.standard_normal((3, 5))], lambda tape, ts: ops.softmax(ts[0], temp)

    def sample_sce(rng):
        logits = rng.standard_normal((4, 5))
        targets = rng.integers(0, 5, size=4)
        return [logits], lambda tape, ts: ops.softmax_cross_entropy(ts[0], targets)

    def sample_batchnorm(rng):
        x = rng.standard_normal((6, 3)) * rng.uniform(0.5, 2.0)
        gamma = rng.uniform(0.5, 1.5, 3)
        beta = rng.standard_normal(3)

        def call(tape, ts):
            state = ops.BatchNormState(3, dtype=np.float64)
            return ops.batchnorm(ts[0], ts[1], ts[2], state, training=True)

        return [x, gamma, beta], call

    def sample_conv2d(rng):
        x = rng.standard_normal((2, 2, 6, 5))
        w = rng.standard_normal((3, 2, 3, 2))
        b = rng.standard_normal(3)
        return [x, w, b], lambda tape, ts: ops.conv2d(ts[0], ts[1], ts[2], stride=(2, 1))

    def sample_concat(rng):
        return (
            [rng.standard_normal((2, 3)), rng.standard_normal((4, 3))],
            lambda tape, ts: ops.concat(ts, axis=0),
        )

    def sample_index_select(rng):
        axis = int(rng.integers(0, 3))
        shape = (3, 4, 2)
        index = int(rng.integers(0, shape[axis]))
        return [rng.standard_normal(shape)], lambda tape, ts: ops.index_select(
            ts[0], axis, index
        )

    def sample_nuclear(rng):
        u = np.linalg.qr(rng.standard_normal((4, 4)))[0]
        v = np.linalg.qr(rng.standard_normal((6, 6)))[0][:, :4]
        s = np.linspace(1.0, 2.5, 4) + rng.uniform(0, 0.1, 4)
        m = (u * s) @ v.T
        return [m], lambda tape, ts: ops.nuclear_norm(ts[0])

    return {
        "add": _projected(binary(ops.add)),
        "sub": _projected(binary(ops.sub)),
        "mul": _projected(binary(ops.mul)),
        "div": _projected(binary(ops.div, denom_safe=True)),
        "scale": _projected(sample_scale),
        "matmul": _projected(sample_matmul),
        "transpose": _projected(sample_transpose),
        "reshape": _projected(sample_reshape),
        "sum": _projected(reducer(ops.reduce_sum)),
        "mean": _projected(reducer(ops.reduce_mean)),
        "relu": _projected(sample_relu),
        "sqrt": _projected(sample_sqrt),
        "l2_normalize": _projected(sample_l2n),
        "softmax": _projected(sample_softmax),
        "softmax_cross_entropy": _projected(sample_sce),
        "batchnorm": _projected(sample_batchnorm),
        "conv2d": _projected(sample_conv2d),
        "concat": _projected(sample_concat),
        "index_select": _projected(sample_index_select),
        "nuclear_norm": _projected(sample_nuclear),
    }


def all_checks():
    """Ops plus loss-level and composite-objective checks."""
    from .. import losses, train

    checks = dict(op_checks())
    checks.update(losses.loss_checks())
    checks.update(train.composite_checks())
    return checks


def run_named_checks(names=None, points=20, seed=0, tol=DEFAULT_TOL):
    """Run checks by name; returns list of (name, max_rel_err, passed)."""
    checks = all_checks()
    if names is None:
        names = sorted(checks)
    rows = []
    for name in names:
        if name not in checks:
            raise KeyError(name)
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        step = getattr(checks[name], "fd_step", 1e-5)
        err = directional_check(checks[name], rng, points=points, step=step)
        rows.append((name, err, err <= tol))
    return rows


@contextlib.contextmanager
def corrupt_op_gradient(kind, factor=1.001):
    """Test hook: scale one op's backward output to prove checks can fail."""
    original = ops._OPS[kind]
    attr = None
    for name, fn in vars(ops).items():
        if fn is original:
            attr = name
            break

    def corrupted(*args, **kwargs):
        out = original(*args, **kwargs)
        tape = out.tape
        if tape.nodes and tape.nodes[-1].out is out:
            rec = tape.nodes[-1]
            inner = rec.backward
            rec.backward = lambda g: [
                None if ig is None else ig * factor for ig in inner(g)
            ]
        return out

    ops._OPS[kind] = corrupted
    if attr:
        setattr(ops, attr, corrupted)
    try:
        yield
    finally:
        ops._OPS[kind] = original
        if attr:
            setattr(ops, attr, original)
