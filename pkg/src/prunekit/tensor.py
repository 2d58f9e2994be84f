"""Reverse-mode autodiff over dense float64 arrays.

A ``Tensor`` wraps a numpy array plus an optional gradient. Differentiable
ops record nodes on the active ``Tape`` in execution order; ``backward``
replays the tape once in reverse, accumulating gradients with ``+=``.
There is no graph search: forward order is already a topological order.
"""

import numpy as np

from . import kernels

_TAPE_STACK = []


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Forward-ordered operation record used as a context manager.

    while a Tape is active, ops involving a grad-requiring tensor append
    (output, inputs, backward_fn) nodes. backward() seeds d(loss)/d(loss)=1
    and walks the nodes in reverse, adding each contribution into the
    input tensors' .grad buffers.
    """

    def __init__(self):
        self._nodes = []
        self._result_ids = set()

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def record(self, output, inputs, backward_fn):
        output.requires_grad = True
        self._nodes.append((output, inputs, backward_fn))
        self._result_ids.add(id(output))

    def backward(self, loss):
        if loss.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        if id(loss) not in self._result_ids:
            raise ValueError("backward target was not produced on this tape")
        loss.grad = np.ones_like(loss.data)
        for output, inputs, backward_fn in reversed(self._nodes):
            g = output.grad
            if g is None:
                continue
            for tensor, grad in zip(inputs, backward_fn(g)):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.grad is None:
                    tensor.grad = grad
                else:
                    tensor.grad += grad


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _should_record(*tensors):
    tape = _active_tape()
    if tape is None:
        return None
    if any(t.requires_grad for t in tensors):
        return tape
    return None


def conv2d(x, w, b, stride=1, padding=0):
    """2d cross-correlation. x: (N,Cin,H,W), w: (Cout,Cin,KH,KW), b: (Cout,)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(
            f"conv2d expects 4d input and kernels, got {x.data.shape} and {w.data.shape}"
        )
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} or padding={padding}")
    N, Cin, H, W = x.data.shape
    Cout, WCin, KH, KW = w.data.shape
    if WCin != Cin:
        raise ValueError(
            f"conv2d: input has {Cin} channels but kernels expect {WCin} "
            f"(input {x.data.shape}, kernels {w.data.shape})"
        )
    if b.data.shape != (Cout,):
        raise ValueError(f"conv2d: bias shape {b.data.shape} != ({Cout},)")
    if H + 2 * padding < KH or W + 2 * padding < KW:
        raise ValueError(
            f"conv2d: kernel {KH}x{KW} larger than padded input "
            f"{H + 2 * padding}x{W + 2 * padding}"
        )
    out = Tensor(kernels.conv2d_forward(x.data, w.data, b.data, stride, padding))
    tape = _should_record(x, w, b)
    if tape is not None:
        x_data, w_data = x.data, w.data
        need_gx = x.requires_grad

        def backward_fn(g):
            gx, gw, gb = kernels.conv2d_backward(
                x_data, w_data, stride, padding, g, need_gx
            )
            return gx, gw.reshape(w_data.shape), gb

        tape.record(out, (x, w, b), backward_fn)
    return out


def dense(x, w, b):
    """Affine layer. x: (N,Din), w: (Dout,Din), b: (Dout,)."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ValueError(
            f"dense expects 2d input and weights, got {x.data.shape} and {w.data.shape}"
        )
    N, Din = x.data.shape
    Dout, WDin = w.data.shape
    if WDin != Din:
        raise ValueError(
            f"dense: input has {Din} features but weights expect {WDin} "
            f"(input {x.data.shape}, weights {w.data.shape})"
        )
    if b.data.shape != (Dout,):
        raise ValueError(f"dense: bias shape {b.data.shape} != ({Dout},)")
    out = Tensor(kernels.dense_forward(x.data, w.data, b.data))
    tape = _should_record(x, w, b)
    if tape is not None:
        x_data, w_data = x.data, w.data
        need_gx = x.requires_grad

        def backward_fn(g):
            return kernels.dense_backward(x_data, w_data, g, need_gx)

        tape.record(out, (x, w, b), backward_fn)
    return out


def relu(x):
    """Elementwise max(x, 0); the subgradient at exactly 0 is 0."""
    mask = x.data > 0.0
    out = Tensor(np.where(mask, x.data, 0.0))
    tape = _should_record(x)
    if tape is not None:

        def backward_fn(g):
            return (g * mask,)

        tape.record(out, (x,), backward_fn)
    return out


def maxpool2x2(x):
    """2x2 stride-2 max pooling; spatial dims must be even."""
    if x.data.ndim != 4:
        raise ValueError(f"maxpool2x2 expects 4d input, got {x.data.shape}")
    N, C, H, W = x.data.shape
    if H % 2 or W % 2:
        raise ValueError(f"maxpool2x2 needs even spatial dims, got {H}x{W}")
    out_data, idx = kernels.maxpool2x2_forward(x.data)
    out = Tensor(out_data)
    tape = _should_record(x)
    if tape is not None:

        def backward_fn(g):
            return (kernels.maxpool2x2_backward(g, idx, H, W),)

        tape.record(out, (x,), backward_fn)
    return out


def flatten(x):
    """Collapse all trailing dims: (N, ...) -> (N, prod)."""
    N = x.data.shape[0]
    shape = x.data.shape
    out = Tensor(x.data.reshape(N, -1))
    tape = _should_record(x)
    if tape is not None:

        def backward_fn(g):
            return (g.reshape(shape).copy(),)

        tape.record(out, (x,), backward_fn)
    return out


def add(x, y):
    """Elementwise sum of two same-shape tensors (residual join)."""
    if x.data.shape != y.data.shape:
        raise ValueError(f"add: shape mismatch {x.data.shape} vs {y.data.shape}")
    out = Tensor(x.data + y.data)
    tape = _should_record(x, y)
    if tape is not None:

        def backward_fn(g):
            return g.copy(), g.copy()

        tape.record(out, (x, y), backward_fn)
    return out


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of softmax(logits) against integer labels.

    logits: (N,K) tensor; labels: (N,) integer array. Uses max-subtraction
    stabilization so large logits cannot overflow exp.
    """
    if logits.data.ndim != 2:
        raise ValueError(f"softmax_cross_entropy expects (N,K) logits, got {logits.data.shape}")
    labels = np.asarray(labels)
    N, K = logits.data.shape
    if labels.shape != (N,):
        raise ValueError(
            f"softmax_cross_entropy: {N} rows of logits but labels shape {labels.shape}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(
            f"softmax_cross_entropy: labels outside [0, {K}): "
            f"min={labels.min()}, max={labels.max()}"
        )
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    probs = ez / denom
    picked = z[np.arange(N), labels]
    loss_val = float(np.mean(np.log(denom[:, 0]) - picked))
    out = Tensor(loss_val)
    tape = _should_record(logits)
    if tape is not None:

        def backward_fn(g):
            gl = probs.copy()
            gl[np.arange(N), labels] -= 1.0
            gl *= g.item() / N
            return (gl,)

        tape.record(out, (logits,), backward_fn)
    return out


class SGD:
    """Heavy-ball SGD with optional per-parameter masks.

    Update per step: v <- momentum*v + grad; p <- p - lr*v. When a mask is
    given, both the parameter and its velocity are multiplied by it after
    the update, so masked entries stay exactly 0.0 and accumulate nothing.
    """

    def __init__(self, params, lr, momentum=0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, masks=None):
        if masks is not None and len(masks) != len(self.params):
            raise ValueError(
                f"sgd: {len(masks)} masks for {len(self.params)} parameters"
            )
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"sgd: parameter {i} has no gradient; run backward first")
            v = self.velocities[i]
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v
            if masks is not None and masks[i] is not None:
                p.data *= masks[i]
                v *= masks[i]
