"""Dense float tensors with reverse-mode automatic differentiation.

The tape is a DAG of ``Tensor`` nodes; each non-leaf node carries a closure
that maps the upstream gradient to per-parent gradients. Custom backward
rules (needed for straight-through estimators) are attached by building a
node with :meth:`Tensor.from_op`, which overrides any default rule.

Values are stored as float32 by default. Inner products (matmul, conv)
accumulate in float64 and cast back, so forward results are reproducible
and independent of BLAS blocking. A float64 mode exists for verification
(finite-difference oracles); the training path always runs float32.

Ops are pure given their inputs; a tape is meant to be used from a single
thread. Tensors may be shared read-only across threads.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, InputError, UsageError

DEFAULT_DTYPE = np.float32


def _contig(arr: np.ndarray) -> np.ndarray:
    # ascontiguousarray would promote 0-d scalars to 1-d; keep them 0-d
    if arr.ndim == 0 or arr.flags["C_CONTIGUOUS"]:
        return arr
    return np.ascontiguousarray(arr)


def _as_array(data, dtype) -> np.ndarray:
    return _contig(np.asarray(data, dtype=dtype))


class Tensor:
    """A dense float array, optionally participating in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype or DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: Iterable["Tensor"],
        vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]],
        op: str = "custom",
    ) -> "Tensor":
        """Build a tape node with an explicit backward rule.

        ``vjp(upstream)`` must return one gradient array (or None) per
        parent. A rule registered here is exactly what backward() uses, so
        surrogate gradients (STE) are expressed as ordinary nodes.
        """
        parents = tuple(parents)
        out = cls.__new__(cls)
        out.data = _contig(np.asarray(data))
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out.op = op
        out._parents = parents if out.requires_grad else ()
        out._vjp = vjp if out.requires_grad else None
        return out

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, grad={self.grad is not None})"

    def detach(self) -> "Tensor":
        """A leaf view of the same data, cut off from the tape."""
        return Tensor(self.data, requires_grad=False, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    # -- backward ------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar node.

        Each call propagates a fresh unit seed and adds the result into
        ``.grad`` of every visited node, so two calls on the same loss
        accumulate exactly twice the gradient.
        """
        if self.size != 1:
            raise UsageError(f"backward requires a scalar loss, got shape {self.shape}")
        order = self._toposort()
        flowing: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            out_grad = flowing.pop(id(node), None)
            if out_grad is None:
                continue
            if node.grad is None:
                node.grad = out_grad.copy()
            else:
                node.grad = node.grad + out_grad
            if node._vjp is None:
                continue
            parent_grads = node._vjp(out_grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.data.shape:
                    raise DimensionError(
                        f"vjp of {node.op!r} returned shape {g.shape} for parent "
                        f"of shape {parent.data.shape}"
                    )
                acc = flowing.get(id(parent))
                flowing[id(parent)] = g if acc is None else acc + g

    def _toposort(self) -> list["Tensor"]:
        # Iterative DFS; each node visited exactly once.
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _coerce_pair(a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"elementwise op on shapes {a.shape} vs {b.shape}")
    if a.data.dtype != b.data.dtype:
        raise DimensionError(f"mixed dtypes {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _coerce_pair(a, b)
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g), op="add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _coerce_pair(a, b)
    return Tensor.from_op(a.data - b.data, (a, b), lambda g: (g, -g), op="sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _coerce_pair(a, b)
    ad, bd = a.data, b.data
    return Tensor.from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), op="mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return Tensor.from_op(a.data * c, (a,), lambda g: (g * c,), op="scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    # np.maximum propagates NaN, so divergence stays visible in the loss
    return Tensor.from_op(np.maximum(a.data, 0), (a,), lambda g: (g * mask,), op="relu")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return Tensor.from_op(t, (a,), lambda g: (g * (1.0 - t * t),), op="tanh")


def clip01(a: Tensor) -> Tensor:
    """Clamp to [0, 1]; gradient passes on the closed interval."""
    mask = (a.data >= 0) & (a.data <= 1)
    return Tensor.from_op(
        np.clip(a.data, 0.0, 1.0).astype(a.data.dtype),
        (a,),
        lambda g: (g * mask,),
        op="clip01",
    )


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-feature bias: (B,D)+(D,) or (B,C,H,W)+(C,)."""
    if x.data.ndim == 2 and b.data.shape == (x.data.shape[1],):
        out = x.data + b.data
        return Tensor.from_op(out, (x, b), lambda g: (g, g.sum(axis=0)), op="bias_add")
    if x.data.ndim == 4 and b.data.shape == (x.data.shape[1],):
        out = x.data + b.data[None, :, None, None]
        return Tensor.from_op(
            out, (x, b), lambda g: (g, g.sum(axis=(0, 2, 3))), op="bias_add"
        )
    raise DimensionError(f"bias shape {b.shape} does not fit input {x.shape}")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    out = a.data.reshape(shape)
    return Tensor.from_op(out, (a,), lambda g: (g.reshape(old),), op="reshape")


def tsum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype)
    return Tensor.from_op(out, (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.data.dtype).copy(),), op="sum")


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.sum(dtype=np.float64) / n, dtype=a.data.dtype)
    return Tensor.from_op(
        out,
        (a,),
        lambda g: ((np.broadcast_to(g, a.shape) / n).astype(a.data.dtype),),
        op="mean",
    )


# ---------------------------------------------------------------------------
# matmul / conv / pooling
# ---------------------------------------------------------------------------


def _mm(a: np.ndarray, b: np.ndarray, out_dtype) -> np.ndarray:
    # float64 accumulation keeps results independent of BLAS blocking
    return np.matmul(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False)).astype(out_dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = _mm(ad, bd, ad.dtype)

    def vjp(g):
        return _mm(g, bd.T, ad.dtype), _mm(ad.T, g, bd.dtype)

    return Tensor.from_op(out, (a, b), vjp, op="matmul")


def _conv_geometry(h, w, kh, kw, stride, pad):
    ho, rh = divmod(h + 2 * pad - kh, stride)
    wo, rw = divmod(w + 2 * pad - kw, stride)
    if rh or rw or ho < 0 or wo < 0:
        raise DimensionError(
            f"conv output size not integral: input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, pad {pad}"
        )
    return ho + 1, wo + 1


def _im2col_indices(c, kh, kw, ho, wo, stride):
    i0 = np.repeat(np.arange(kh), kw)
    i0 = np.tile(i0, c)
    i1 = stride * np.repeat(np.arange(ho), wo)
    j0 = np.tile(np.arange(kw), kh * c)
    j1 = stride * np.tile(np.arange(wo), ho)
    i = i0.reshape(-1, 1) + i1.reshape(1, -1)
    j = j0.reshape(-1, 1) + j1.reshape(1, -1)
    k = np.repeat(np.arange(c), kh * kw).reshape(-1, 1)
    return k, i, j


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """(B,C,H,W) -> (B, C*kh*kw, Ho*Wo); column order is (c, kh, kw)."""
    b, c, h, w = x.shape
    ho, wo = _conv_geometry(h, w, kh, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    k, i, j = _im2col_indices(c, kh, kw, ho, wo, stride)
    return x[:, k, i, j]


def col2im(cols: np.ndarray, x_shape, kh, kw, stride, pad) -> np.ndarray:
    """Scatter-add inverse of :func:`im2col` (deterministic via np.add.at)."""
    b, c, h, w = x_shape
    ho, wo = _conv_geometry(h, w, kh, kw, stride, pad)
    padded = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    k, i, j = _im2col_indices(c, kh, kw, ho, wo, stride)
    np.add.at(padded, (slice(None), k, i, j), cols)
    if pad:
        return padded[:, :, pad:-pad, pad:-pad]
    return padded


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation (no kernel flip) over NCHW input.

    Lowered to a single GEMM over all batch positions.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input/kernel, got {x.shape}, {kernel.shape}")
    b, c, h, w = x.data.shape
    o, ck, kh, kw = kernel.data.shape
    if ck != c:
        raise DimensionError(f"conv2d channel mismatch: input {c}, kernel {ck}")
    ho, wo = _conv_geometry(h, w, kh, kw, stride, pad)
    p = ho * wo
    d = c * kh * kw

    cols = im2col(x.data.astype(np.float64, copy=False), kh, kw, stride, pad)
    flat = cols.transpose(1, 0, 2).reshape(d, b * p)  # (D, B*P)
    wmat = kernel.data.reshape(o, -1).astype(np.float64, copy=False)
    out = (wmat @ flat).reshape(o, b, p).transpose(1, 0, 2).reshape(b, o, ho, wo)
    out = out.astype(x.data.dtype)

    def vjp(g):
        gflat = g.reshape(b, o, p).transpose(1, 0, 2).reshape(o, b * p).astype(np.float64, copy=False)
        gw = gflat @ flat.T
        gcols = (wmat.T @ gflat).reshape(d, b, p).transpose(1, 0, 2)
        gx = col2im(gcols, (b, c, h, w), kh, kw, stride, pad)
        return gx.astype(x.data.dtype), gw.reshape(kernel.data.shape).astype(kernel.data.dtype)

    return Tensor.from_op(out, (x, kernel), vjp, op="conv2d")


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling; ties route to the first element."""
    b, c, h, w = x.data.shape
    if h % k or w % k:
        raise DimensionError(f"maxpool2d needs H,W divisible by {k}, got {h}x{w}")
    ho, wo = h // k, w // k
    windows = (
        x.data.reshape(b, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, k * k)
    )
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(b, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        return (gx,)

    return Tensor.from_op(out, (x,), vjp, op="maxpool2d")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _log_softmax64(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be (B,C), got {logits.shape}")
    labels = np.asarray(labels)
    b, c = logits.data.shape
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise InputError(f"labels must lie in [0, {c}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    logp = _log_softmax64(logits.data)
    loss = -logp[np.arange(b), labels].mean()
    probs = np.exp(logp)

    def vjp(g):
        grad = probs.copy()
        grad[np.arange(b), labels] -= 1.0
        return ((float(g) * grad / b).astype(logits.data.dtype),)

    return Tensor.from_op(np.asarray(loss, dtype=logits.data.dtype), (logits,), vjp, op="cross_entropy")


def kl_divergence(student_logits: Tensor, teacher_probs, temperature: float = 1.0) -> Tensor:
    """Mean over the batch of KL(teacher || softmax(student/T)).

    The teacher distribution is a plain probability array; gradients flow to
    the student only.
    """
    if temperature <= 0:
        raise InputError(f"temperature must be > 0, got {temperature}")
    t = teacher_probs.data if isinstance(teacher_probs, Tensor) else np.asarray(teacher_probs)
    t = t.astype(np.float64)
    if t.shape != student_logits.data.shape:
        raise DimensionError(f"teacher shape {t.shape} vs student {student_logits.shape}")
    rowsum = t.sum(axis=1)
    if np.abs(rowsum - 1.0).max() > 1e-5:
        raise InputError("teacher probability rows must sum to 1 within 1e-5")
    b = t.shape[0]
    logp = _log_softmax64(student_logits.data / temperature)
    logt = np.where(t > 0, np.log(np.maximum(t, 1e-300)), 0.0)
    loss = (t * (logt - logp)).sum() / b
    probs = np.exp(logp)

    def vjp(g):
        grad = (probs - t) / (b * temperature)
        return ((float(g) * grad).astype(student_logits.data.dtype),)

    return Tensor.from_op(
        np.asarray(loss, dtype=student_logits.data.dtype), (student_logits,), vjp, op="kl_divergence"
    )
