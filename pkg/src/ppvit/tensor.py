"""Dense tensors with reverse-mode automatic differentiation.

The engine is define-by-run: every operation on tensors that require
gradients records a node holding the inputs and a closure that maps the
output gradient to input gradients.  ``backward`` topologically sorts the
recorded nodes from the loss and visits each exactly once, accumulating
gradients into the ``grad`` buffer of every leaf that requires them.

Arrays are float32 by default; gradient checking builds everything in
float64.  Every operation validates that its result is finite and raises
``NonFiniteError`` otherwise, so NaN/Inf never propagate silently.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError

Array = np.ndarray

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "grad_enabled", default=True
)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (thread/context safe)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def _ensure_finite(arr: Array, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"operation '{op}' produced non-finite values")


class Node:
    """One recorded operation: its kind, inputs, and backward closure.

    ``backward_fn`` maps the gradient w.r.t. the node's output to a tuple of
    gradients aligned with ``inputs`` (``None`` for inputs that need none).
    """

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(
        self,
        op: str,
        inputs: tuple["Tensor", ...],
        backward_fn: Callable[[Array], tuple[Array | None, ...]],
    ):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """An N-dimensional float array with optional gradient tracking.

    ``data`` is a row-major numpy array; ``grad`` (populated by ``backward``)
    always matches its shape.  Parameters are leaves with ``requires_grad``
    set and a stable ``name`` used by serialization and the accountant.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "creator")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.creator: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: Array | None = None) -> None:
        backward(self, seed)

    # Arithmetic sugar; scalars are folded into dedicated closures so the
    # graph stays small.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -other)

    def __rsub__(self, other):
        return shift(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not part of the op set")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"


def _make(op: str, out_data: Array, inputs: tuple[Tensor, ...],
          backward_fn: Callable[[Array], tuple[Array | None, ...]]) -> Tensor:
    _ensure_finite(out_data, op)
    out = Tensor(out_data)
    if _grad_enabled.get() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.creator = Node(op, inputs, backward_fn)
    return out


def backward(loss: Tensor, seed: Array | None = None) -> None:
    """Reverse-mode sweep from a scalar loss.

    Every leaf with ``requires_grad`` receives its gradient; repeated calls
    without ``zero_grad`` accumulate.  Interior gradients are reduced in the
    reverse of the recorded (topological) order, so accumulation is
    deterministic and runs are reproducible bit for bit.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if seed is None:
        seed = np.ones_like(loss.data)

    # Iterative post-order DFS: inputs land before consumers.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            topo.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor.creator is not None:
            for inp in tensor.creator.inputs:
                if inp.requires_grad and id(inp) not in visited:
                    stack.append((inp, False))

    grads: dict[int, Array] = {id(loss): seed}
    for tensor in reversed(topo):
        grad = grads.pop(id(tensor), None)
        if grad is None:
            continue
        node = tensor.creator
        if node is None:
            tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
            continue
        input_grads = node.backward_fn(grad)
        for inp, g in zip(node.inputs, input_grads):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = g if key not in grads else grads[key] + g


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient back down to the shape it was broadcast from."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _make("add", out, (a, b), lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _make("sub", out, (a, b), lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _make("mul", out, (a, b), lambda g: (
        _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(x: Tensor) -> Tensor:
    return _make("neg", -x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make("scale", x.data * s, (x,), lambda g: (g * s,))


def shift(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("shift", x.data + c, (x,), lambda g: (g,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {shape}") from exc
    return _make("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bw(g: Array):
        return tuple(np.split(g, offsets, axis=axis))

    return _make("concat", out, tuple(tensors), bw)


def sum(x: Tensor, axis: int | tuple[int, ...] | None = None,
        keepdims: bool = False) -> Tensor:  # noqa: A001 - numpy-style name
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g: Array):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", out, (x,), bw)


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None,
         keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else (
        np.prod([x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]))

    def bw(g: Array):
        if axis is None:
            return (np.broadcast_to(g / count, x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make("mean", out, (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[.., m, k] @ [.., k, n] -> [.., m, n]``.

    Gradients: ``d(a) = g @ b^T`` and ``d(b) = a^T @ g``, summed over any
    broadcast batch axes.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul batch extents disagree: {a.shape} x {b.shape}") from exc

    def bw(g: Array):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight (+ bias)`` with weight stored ``[in, out]``."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# ---------------------------------------------------------------------------
# activations and normalization
# ---------------------------------------------------------------------------

def hardswish(x: Tensor) -> Tensor:
    """Elementwise ``x * clamp(x + 3, 0, 6) / 6``.

    The derivative uses the left limit at the two kinks (0 at -3, 1.5 at 3);
    outside the clamp range the clamped branch contributes zero gradient.
    """
    data = x.data
    out = data * np.clip(data + 3.0, 0.0, 6.0) / 6.0

    def bw(g: Array):
        slope = np.where(data <= -3.0, 0.0,
                         np.where(data <= 3.0, (2.0 * data + 3.0) / 6.0, 1.0))
        return (g * slope.astype(data.dtype),)

    return _make("hardswish", out, (x,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """Tanh-form GELU (ablation alternative to hardswish)."""
    data = x.data
    inner = _GELU_C * (data + _GELU_A * data ** 3)
    t = np.tanh(inner)
    out = 0.5 * data * (1.0 + t)

    def bw(g: Array):
        sech2 = 1.0 - t * t
        slope = 0.5 * (1.0 + t) + 0.5 * data * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * data ** 2)
        return (g * slope,)

    return _make("gelu", out, (x,), bw)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, computed with max-subtraction."""
    if x.shape[-1] < 1:
        raise ShapeError(f"softmax needs a nonempty last axis, got {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g: Array):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make("softmax_rows", out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last (channel) axis, then apply the affine pair."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match C={c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def bw(g: Array):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _make("layer_norm", out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _conv_windows(padded: Array, kh: int, kw: int, stride: int) -> Array:
    win = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-d cross-correlation with zero padding.

    ``x`` is ``[B, C_in, H, W]``; ``weight`` is ``[C_out, C_in/groups, kh, kw]``.
    Output height is ``floor((H + 2*padding - kh)/stride) + 1`` (same for
    width).  The vectorized path here is checked against a direct six-loop
    oracle in the test suite.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d needs 4-d input/weight, got {x.shape} and {weight.shape}")
    b, cin, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    if cin % groups or cout % groups:
        raise ShapeError(f"channels {cin}->{cout} not divisible by groups={groups}")
    if cg * groups != cin:
        raise ShapeError(
            f"weight expects {cg * groups} input channels (groups={groups}), input has {cin}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match C_out={cout}")

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = _conv_windows(padded, kh, kw, stride)  # [B, Cin, Ho, Wo, kh, kw]
    ho, wo = windows.shape[2], windows.shape[3]
    wg = windows.reshape(b, groups, cin // groups, ho, wo, kh, kw)
    kg = weight.data.reshape(groups, cout // groups, cg, kh, kw)
    out = np.einsum("bgcijuv,gocuv->bgoij", wg, kg, optimize=True)
    out = out.reshape(b, cout, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    def bw(g: Array):
        gg = g.reshape(b, groups, cout // groups, ho, wo)
        dw = np.einsum("bgcijuv,bgoij->gocuv", wg, gg, optimize=True)
        dw = dw.reshape(cout, cg, kh, kw)
        dcols = np.einsum("bgoij,gocuv->bgcijuv", gg, kg, optimize=True)
        dcols = dcols.reshape(b, cin, ho, wo, kh, kw)
        dpad = np.zeros_like(padded)
        for u in range(kh):
            for v in range(kw):
                dpad[:, :, u:u + (ho - 1) * stride + 1:stride,
                     v:v + (wo - 1) * stride + 1:stride] += dcols[:, :, :, :, u, v]
        dx = dpad[:, :, padding:padding + h, padding:padding + w]
        db = None if bias is None else g.sum(axis=(0, 2, 3))
        return (dx, dw) if bias is None else (dx, dw, db)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make("conv2d", out, inputs, bw)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     padding: int = 1) -> Tensor:
    """Per-channel 3x3 convolution; padding 1 keeps the spatial size.

    Channel ``c`` of the output depends only on channel ``c`` of the input.
    """
    if x.ndim != 4:
        raise ShapeError(f"depthwise_conv2d needs 4-d input, got {x.shape}")
    c = x.shape[1]
    if weight.shape != (c, 1, 3, 3):
        raise ShapeError(
            f"depthwise kernel must be [{c},1,3,3] to match input {x.shape}, got {weight.shape}")
    return conv2d(x, weight, bias, stride=1, padding=padding, groups=c)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def _pool_bins(extent: int, target: int) -> list[tuple[int, int]]:
    # Bin i covers [floor(i*extent/target), ceil((i+1)*extent/target)).
    return [(i * extent // target, -(-(i + 1) * extent // target))
            for i in range(target)]


def adaptive_avg_pool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average-pool to a target grid; bins may overlap for awkward sizes.

    The gradient of each output distributes ``1/(bin area)`` to every member
    of its bin, so total gradient mass is conserved.
    """
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool2d needs 4-d input, got {x.shape}")
    b, c, h, w = x.shape
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise ShapeError(f"pool target {out_h}x{out_w} exceeds input extent {h}x{w}")
    if (out_h, out_w) == (h, w):
        return _make("adaptive_avg_pool2d", x.data.copy(), (x,), lambda g: (g,))

    rows = _pool_bins(h, out_h)
    cols = _pool_bins(w, out_w)
    out = np.empty((b, c, out_h, out_w), dtype=x.dtype)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def bw(g: Array):
        dx = np.zeros_like(x.data)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                area = (r1 - r0) * (c1 - c0)
                dx[:, :, r0:r1, c0:c1] += g[:, :, i:i + 1, j:j + 1] / area
        return (dx,)

    return _make("adaptive_avg_pool2d", out, (x,), bw)


def adaptive_max_pool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Max-pool variant with the same bin rule; ties route to the first max."""
    if x.ndim != 4:
        raise ShapeError(f"adaptive_max_pool2d needs 4-d input, got {x.shape}")
    b, c, h, w = x.shape
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise ShapeError(f"pool target {out_h}x{out_w} exceeds input extent {h}x{w}")

    rows = _pool_bins(h, out_h)
    cols = _pool_bins(w, out_w)
    out = np.empty((b, c, out_h, out_w), dtype=x.dtype)
    argmax = np.empty((b, c, out_h, out_w), dtype=np.int64)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            patch = x.data[:, :, r0:r1, c0:c1].reshape(b, c, -1)
            idx = patch.argmax(axis=-1)
            out[:, :, i, j] = np.take_along_axis(patch, idx[..., None], axis=-1)[..., 0]
            argmax[:, :, i, j] = idx

    bi, ci = np.meshgrid(np.arange(b), np.arange(c), indexing="ij")

    def bw(g: Array):
        dx = np.zeros_like(x.data)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                width = c1 - c0
                idx = argmax[:, :, i, j]
                np.add.at(dx, (bi, ci, r0 + idx // width, c0 + idx % width), g[:, :, i, j])
        return (dx,)

    return _make("adaptive_max_pool2d", out, (x,), bw)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def cross_entropy_logits(logits: Tensor, labels: Sequence[int] | Array) -> Tensor:
    """Mean softmax cross-entropy, fused from logits for stability."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy expects [B,K] logits with B labels, got {logits.shape} "
            f"and {labels.shape}")
    n, k = logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError(f"labels must lie in [0, {k})")
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    denom = e.sum(axis=-1, keepdims=True)
    log_probs = (z - m) - np.log(denom)
    loss = -log_probs[np.arange(n), labels].mean()
    probs = e / denom

    def bw(g: Array):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g.reshape(()) / n),)

    return _make("cross_entropy", np.asarray(loss, dtype=z.dtype), (logits,), bw)


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------

def finite_difference_grad(f: Callable[[Tensor], Tensor], x: Tensor,
                           h: float = 1e-4) -> Array:
    """Central-difference gradient of a scalar-valued function at ``x``.

    Perturbs one element at a time: ``(f(x + h e_i) - f(x - h e_i)) / 2h``.
    ``f`` must be deterministic; call with float64 tensors for the stated
    1e-4 comparison tolerances.
    """
    grad = np.zeros(x.shape, dtype=np.float64)
    with no_grad():
        for idx in np.ndindex(*x.shape):
            orig = x.data[idx]
            x.data[idx] = orig + h
            fp = f(x).item()
            x.data[idx] = orig - h
            fm = f(x).item()
            x.data[idx] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError("finite_difference_grad saw a non-finite value")
            grad[idx] = (fp - fm) / (2.0 * h)
    return grad
