"""Dense-tensor reverse-mode autodiff core: Tensor, Tape, backward.

Tensors are immutable after creation and live on exactly one tape; a tape
is a single-threaded unit of work recording operations in topological
order (an op's inputs always precede it). Gradients accumulate on
``.grad`` across backward calls until explicitly zeroed, so one tape can
serve multi-term losses.
"""

import numpy as np

__all__ = ["Tensor", "Tape", "OpRecord", "ShapeError", "NumericError", "backward"]


class ShapeError(ValueError):
    """Raised when an operation's input shapes or attributes are illegal."""


class NumericError(ArithmeticError):
    """Raised when a numeric contract is violated (NaN gradients, etc.)."""


class Tensor:
    """A dense float array with a gradient slot and a tape position."""

    __slots__ = ("tape", "node_id", "data", "grad", "requires_grad")

    def __init__(self, tape, node_id, data, requires_grad):
        self.tape = tape
        self.node_id = node_id
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, id={self.node_id}, grad={'set' if self.grad is not None else 'none'})"


class OpRecord:
    """One recorded operation: kind, input/output tensors, backward closure.

    ``backward`` maps the output gradient to a list of input gradients
    aligned with ``inputs`` (None for inputs that need no gradient).
    """

    __slots__ = ("kind", "inputs", "out", "backward")

    def __init__(self, kind, inputs, out, backward):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.backward = backward

    @property
    def input_ids(self):
        return [t.node_id for t in self.inputs]

    @property
    def output_id(self):
        return self.out.node_id


class Tape:
    """Ordered record of operations over tensors sharing one storage dtype."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ShapeError(f"Tape dtype must be float32 or float64, got {self.dtype}")
        self.nodes = []
        self.tensors = []
        self._next_id = 0

    def _new_tensor(self, data, requires_grad):
        t = Tensor(self, self._next_id, data, requires_grad)
        self._next_id += 1
        self.tensors.append(t)
        return t

    def tensor(self, data, requires_grad=False):
        """Create a leaf tensor, cast to the tape dtype."""
        arr = np.asarray(data, dtype=self.dtype)
        return self._new_tensor(arr, requires_grad)

    def constant(self, data):
        return self.tensor(data, requires_grad=False)

    def record(self, kind, inputs, out_data, backward):
        """Append an op result; output requires grad if any input does."""
        for t in inputs:
            if t.tape is not self:
                raise ShapeError(f"{kind}: input tensor belongs to a different tape")
        rg = any(t.requires_grad for t in inputs)
        out = self._new_tensor(np.asarray(out_data), rg)
        if rg:
            self.nodes.append(OpRecord(kind, list(inputs), out, backward))
        return out

    def zero_grads(self):
        for t in self.tensors:
            t.grad = None

    def backward(self, loss):
        backward(self, loss)


def backward(tape, loss):
    """Reverse-mode sweep: populate ``.grad`` on every reachable tensor.

    The loss must be a scalar recorded on ``tape``. Grads accumulate into
    existing ``.grad`` buffers; call ``zero_grads`` between independent
    backward passes.
    """
    if not isinstance(loss, Tensor) or loss.tape is not tape:
        raise ShapeError("backward: loss is not a tensor on this tape")
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")

    needed = {loss.node_id}
    for rec in reversed(tape.nodes):
        if rec.out.node_id in needed:
            for t in rec.inputs:
                if t.requires_grad:
                    needed.add(t.node_id)

    grads = {loss.node_id: np.ones_like(loss.data)}
    for rec in reversed(tape.nodes):
        g = grads.pop(rec.out.node_id, None)
        if g is None:
            continue
        _deposit(rec.out, g)
        for t, ig in zip(rec.inputs, rec.backward(g)):
            if ig is None or not t.requires_grad or t.node_id not in needed:
                continue
            if ig.shape != t.data.shape:
                raise ShapeError(
                    f"{rec.kind}: backward produced shape {ig.shape} for input of shape {t.data.shape}"
                )
            if t.node_id in grads:
                grads[t.node_id] = grads[t.node_id] + ig
            else:
                grads[t.node_id] = ig

    for t in tape.tensors:
        if t.node_id in grads:
            _deposit(t, grads.pop(t.node_id))


def _deposit(tensor, g):
    if tensor.grad is None:
        tensor.grad = np.array(g, copy=True)
    else:
        tensor.grad = tensor.grad + g
