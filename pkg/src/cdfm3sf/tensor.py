"""Dense channels-last tensors with a reverse-mode autodiff tape.

Every array is laid out ``b x h x w x m`` and convolution kernels are stored
``k x k x in x out``. Ops build the tape as they run; :func:`backward` walks it
in reverse topological order.

Gradient accumulation rule: leaf tensors (those created directly, with no
producing op) *accumulate* into ``.grad`` on every :func:`backward` call, so a
second call without :meth:`Tensor.zero_grad` doubles their gradients.
Intermediate tensors have their ``.grad`` overwritten on each call.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    """Select float32 or float64 for newly created tensors."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DTYPE = dtype.type


def get_default_dtype():
    return _DTYPE


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them on the tape."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _backward: Callable | None = None, op: str = ""):
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], Sequence[np.ndarray | None]], op: str) -> Tensor:
    """Wrap a forward result and its backward rule as a tape node.

    ``backward`` receives the upstream gradient and returns one gradient (or
    None) per parent, in order.
    """
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, dtype=data.dtype, op=op)
    return Tensor(data, requires_grad=True, dtype=data.dtype,
                  _parents=tuple(parents), _backward=backward, op=op)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor upstream of ``loss`` that requires it."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not on the tape (no input requires grad)")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def finite_difference_grad(f: Callable[[Tensor], object], x: Tensor, eps: float = 1e-5,
                           indices: Iterable[tuple] | None = None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` with respect to ``x``.

    ``x.data`` is perturbed in place and restored. When ``indices`` is given,
    only those entries are computed and the rest of the result is zero.
    The difference is formed in the precision of ``x`` (so an extended
    precision ``x`` gives an extended precision oracle) and returned as float64.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    out = np.zeros(x.data.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    if indices is None:
        positions = range(flat.size)
    else:
        positions = [int(np.ravel_multi_index(ix, x.data.shape)) for ix in indices]
    for i in positions:
        orig = flat[i]
        flat[i] = orig + eps
        fp = _scalar(f(x))
        flat[i] = orig - eps
        fm = _scalar(f(x))
        flat[i] = orig
        step = (orig + eps) - (orig - eps)
        out.reshape(-1)[i] = (fp - fm) / step
    return out


def _scalar(v):
    if isinstance(v, Tensor):
        return v.data.reshape(-1)[0]
    return np.asarray(v).reshape(-1)[0]


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(x: Tensor, y: Tensor) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ValueError(f"add: shape mismatch {x.shape} vs {y.shape}")
    return make_op(x.data + y.data, (x, y), lambda g: (g, g), "add")


def mul(x: Tensor, y: Tensor) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ValueError(f"mul: shape mismatch {x.shape} vs {y.shape}")
    xd, yd = x.data, y.data
    return make_op(xd * yd, (x, y), lambda g: (g * yd, g * xd), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    return make_op(x.data * c, (x,), lambda g: (g * c,), "scale")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return make_op(np.asarray(x.data.sum()), (x,),
                   lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_op(np.where(pos, x.data, 0.0).astype(x.data.dtype), (x,),
                   lambda g: (g * pos,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return make_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    lead = xs[0].shape[:-1]
    for i, x in enumerate(xs[1:], 1):
        if x.shape[:-1] != lead:
            raise ValueError(f"concat_channels: input {i} has b,h,w {x.shape[:-1]}, expected {lead}")
    bounds = np.cumsum([0] + [x.shape[-1] for x in xs])

    def bw(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return make_op(np.concatenate([x.data for x in xs], axis=-1), xs, bw, "concat")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return make_op(x.data[..., start:stop].copy(), (x,), bw, "slice")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.99,
               eps: float = 1e-3) -> Tensor:
    """Per-channel normalization over b, h, w.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm: gamma/beta must have shape ({c},)")
    xd = x.data
    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean) * inv
        out = xhat * gamma.data + beta.data

        def bw_inf(g):
            axes = tuple(range(g.ndim - 1))
            return g * gamma.data * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return make_op(out.astype(xd.dtype), (x, gamma, beta), bw_inf, "batch_norm")

    axes = tuple(range(xd.ndim - 1))
    n = xd.size // c
    mu = xd.mean(axis=axes)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    running_mean *= momentum
    running_mean += (1.0 - momentum) * mu
    running_var *= momentum
    running_var += (1.0 - momentum) * var

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data
        dx = inv / n * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        return dx, dgamma, dbeta

    return make_op(out.astype(xd.dtype), (x, gamma, beta), bw, "batch_norm")


# ---------------------------------------------------------------------------
# spatial ops


def _check_positive(name: str, v: int) -> None:
    if not isinstance(v, (int, np.integer)) or v < 1:
        raise ValueError(f"{name} must be a positive integer, got {v!r}")


def _same_pads(k: int, rate: int) -> tuple[int, int]:
    total = (k - 1) * rate
    return total // 2, total - total // 2


def _pad_hw(x: np.ndarray, pads_h: tuple[int, int], pads_w: tuple[int, int]) -> np.ndarray:
    if pads_h == (0, 0) and pads_w == (0, 0):
        return x
    return np.pad(x, ((0, 0), pads_h, pads_w, (0, 0)))


def _conv_geometry(h: int, w: int, k: int, stride: int, rate: int, padding: str):
    if padding == "same":
        ph = pw = _same_pads(k, rate)
        if stride != 1:
            ho, wo = -(-h // stride), -(-w // stride)
            eff = (k - 1) * rate + 1
            th = max((ho - 1) * stride + eff - h, 0)
            tw = max((wo - 1) * stride + eff - w, 0)
            ph, pw = (th // 2, th - th // 2), (tw // 2, tw - tw // 2)
    elif padding == "valid":
        ph = pw = (0, 0)
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    eff = (k - 1) * rate + 1
    ho = (h + sum(ph) - eff) // stride + 1
    wo = (w + sum(pw) - eff) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"input {h}x{w} too small for kernel {k} at rate {rate}")
    return ph, pw, ho, wo


def _tap(xp: np.ndarray, i: int, j: int, rate: int, stride: int, ho: int, wo: int):
    r0, c0 = i * rate, j * rate
    return (slice(None), slice(r0, r0 + stride * (ho - 1) + 1, stride),
            slice(c0, c0 + stride * (wo - 1) + 1, stride), slice(None))


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation_rate: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation of ``x`` (b,h,w,m) with ``kernels`` (k,k,m,n).

    ``bias`` is either shape (n,) or a per-filter (m, n) array whose column
    sums act as the output-channel bias.
    """
    _check_positive("stride", stride)
    _check_positive("dilation_rate", dilation_rate)
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be 4-D b,h,w,m, got shape {x.shape}")
    if kernels.ndim != 4 or kernels.shape[0] != kernels.shape[1]:
        raise ValueError(f"conv2d: kernels must be k,k,m,n, got {kernels.shape}")
    k, _, m, n = kernels.shape
    if x.shape[3] != m:
        raise ValueError(f"conv2d: channel axis mismatch, input has {x.shape[3]} channels, kernels expect {m}")
    b, h, w, _ = x.shape
    ph, pw, ho, wo = _conv_geometry(h, w, k, stride, dilation_rate, padding)
    xp = _pad_hw(x.data, ph, pw)
    wd = kernels.data
    out = np.zeros((b, ho, wo, n), dtype=np.result_type(xp, wd))
    for i in range(k):
        for j in range(k):
            out += xp[_tap(xp, i, j, dilation_rate, stride, ho, wo)] @ wd[i, j]
    parents = [x, kernels]
    if bias is not None:
        out += _bias_vector(bias, n)
        parents.append(bias)

    def bw(g):
        dxp = np.zeros_like(xp) if x.requires_grad else None
        dw = np.zeros_like(wd) if kernels.requires_grad else None
        g2 = g.reshape(-1, n)
        for i in range(k):
            for j in range(k):
                sl = _tap(xp, i, j, dilation_rate, stride, ho, wo)
                if dxp is not None:
                    dxp[sl] += g @ wd[i, j].T
                if dw is not None:
                    dw[i, j] = xp[sl].reshape(-1, m).T @ g2
        dx = None
        if dxp is not None:
            dx = dxp[:, ph[0]:ph[0] + h, pw[0]:pw[0] + w, :]
        grads = [dx, dw]
        if bias is not None:
            grads.append(_bias_grad(bias, g))
        return grads

    return make_op(out, parents, bw, "conv2d")


def _bias_vector(bias: Tensor, n: int) -> np.ndarray:
    if bias.shape == (n,):
        return bias.data
    if bias.ndim == 2 and bias.shape[1] == n:
        return bias.data.sum(axis=0)
    raise ValueError(f"bias shape {bias.shape} incompatible with {n} output channels")


def _bias_grad(bias: Tensor, g: np.ndarray) -> np.ndarray:
    gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
    if bias.ndim == 2:
        return np.broadcast_to(gb, bias.shape).copy()
    return gb


def pointwise(x: Tensor, kernels: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 convolution as a single matmul."""
    if kernels.ndim != 4 or kernels.shape[:2] != (1, 1):
        raise ValueError(f"pointwise: kernels must be 1,1,m,n, got {kernels.shape}")
    m, n = kernels.shape[2:]
    if x.ndim != 4 or x.shape[3] != m:
        raise ValueError(f"pointwise: channel axis mismatch, input {x.shape}, kernels expect {m}")
    wd = kernels.data[0, 0]
    xd = x.data
    out = np.zeros(xd.shape[:3] + (n,), dtype=np.result_type(xd, wd))
    out += xd @ wd
    parents = [x, kernels]
    if bias is not None:
        out += _bias_vector(bias, n)
        parents.append(bias)

    def bw(g):
        dx = g @ wd.T if x.requires_grad else None
        dw = None
        if kernels.requires_grad:
            dw = np.zeros_like(kernels.data)
            dw[0, 0] = xd.reshape(-1, m).T @ g.reshape(-1, n)
        grads = [dx, dw]
        if bias is not None:
            grads.append(_bias_grad(bias, g))
        return grads

    return make_op(out, parents, bw, "pointwise")


def depthwise_conv2d(x: Tensor, kernels: Tensor, dilation_rate: int = 1) -> Tensor:
    """Per-channel same-padded filtering with no cross-channel mixing.

    ``kernels`` is (k, k, m) for one filter per channel, or (k, k, 1) to apply
    a single shared filter to every channel.
    """
    _check_positive("dilation_rate", dilation_rate)
    if kernels.ndim != 3 or kernels.shape[0] != kernels.shape[1]:
        raise ValueError(f"depthwise_conv2d: kernels must be k,k,m or k,k,1, got {kernels.shape}")
    k, _, kc = kernels.shape
    b, h, w, m = x.shape
    if kc not in (1, m):
        raise ValueError(f"depthwise_conv2d: channel axis mismatch, input has {m}, kernels {kc}")
    pads = _same_pads(k, dilation_rate)
    xp = _pad_hw(x.data, pads, pads)
    wd = kernels.data
    out = np.zeros((b, h, w, m), dtype=np.result_type(xp, wd))
    for i in range(k):
        for j in range(k):
            out += xp[_tap(xp, i, j, dilation_rate, 1, h, w)] * wd[i, j]

    def bw(g):
        dxp = np.zeros_like(xp) if x.requires_grad else None
        dw = np.zeros_like(wd) if kernels.requires_grad else None
        for i in range(k):
            for j in range(k):
                sl = _tap(xp, i, j, dilation_rate, 1, h, w)
                if dxp is not None:
                    dxp[sl] += g * wd[i, j]
                if dw is not None:
                    prod = (xp[sl] * g).reshape(-1, m).sum(axis=0)
                    dw[i, j] = prod if kc == m else prod.sum()
        dx = None if dxp is None else dxp[:, pads[0]:pads[0] + h, pads[0]:pads[0] + w, :]
        return dx, dw

    return make_op(out, (x, kernels), bw, "depthwise_conv2d")


def _deconv_crop(k: int, stride: int) -> tuple[int, int]:
    excess = k - stride
    lead = max(excess, 0) // 2
    return lead, excess - lead


def transposed_conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None,
                      stride: int = 2) -> Tensor:
    """Upsample by ``stride``: zero-interleave, stride-1 correlation, crop.

    Equivalent to inserting ``stride - 1`` zeros between input samples,
    padding by ``k - 1`` on every side, correlating with ``kernels``
    (k, k, m, n) and cropping to exactly ``stride * h``. The crop removes
    ``(k - stride) // 2`` leading rows/columns and the remainder trailing;
    when ``k < stride`` the result is zero-padded at the bottom/right.
    """
    _check_positive("stride", stride)
    if kernels.ndim != 4 or kernels.shape[0] != kernels.shape[1]:
        raise ValueError(f"transposed_conv2d: kernels must be k,k,m,n, got {kernels.shape}")
    k, _, m, n = kernels.shape
    if x.ndim != 4 or x.shape[3] != m:
        raise ValueError(f"transposed_conv2d: channel axis mismatch, input {x.shape}, kernels expect {m}")
    b, h, w, _ = x.shape
    fh, fw = (h - 1) * stride + k, (w - 1) * stride + k
    lead, _ = _deconv_crop(k, stride)
    ho, wo = stride * h, stride * w
    fh2, fw2 = max(fh, lead + ho), max(fw, lead + wo)
    xd, wd = x.data, kernels.data
    full = np.zeros((b, fh2, fw2, n), dtype=np.result_type(xd, wd))

    def sl(a, c):
        r0, c0 = k - 1 - a, k - 1 - c
        return (slice(None), slice(r0, r0 + stride * (h - 1) + 1, stride),
                slice(c0, c0 + stride * (w - 1) + 1, stride), slice(None))

    for a in range(k):
        for c in range(k):
            full[sl(a, c)] += xd @ wd[a, c]
    out = full[:, lead:lead + ho, lead:lead + wo, :].copy()
    parents = [x, kernels]
    if bias is not None:
        out += _bias_vector(bias, n)
        parents.append(bias)

    def bw(g):
        gf = np.zeros_like(full)
        gf[:, lead:lead + ho, lead:lead + wo, :] = g
        dx = np.zeros_like(xd) if x.requires_grad else None
        dw = np.zeros_like(wd) if kernels.requires_grad else None
        x2 = xd.reshape(-1, m)
        for a in range(k):
            for c in range(k):
                ga = gf[sl(a, c)]
                if dx is not None:
                    dx += ga @ wd[a, c].T
                if dw is not None:
                    dw[a, c] = x2.T @ ga.reshape(-1, n)
        grads = [dx, dw]
        if bias is not None:
            grads.append(_bias_grad(bias, g))
        return grads

    return make_op(out, parents, bw, "transposed_conv2d")


def _pool_geometry(x: Tensor, window: int, stride: int):
    _check_positive("window", window)
    _check_positive("stride", stride)
    b, h, w, c = x.shape
    for axis, ext in (("height", h), ("width", w)):
        if ext % stride:
            raise ValueError(f"pool: {axis} {ext} is not divisible by stride {stride}")
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"pool: input {h}x{w} smaller than window {window}")
    return ho, wo


def max_pool(x: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    """Window maximum per channel; ties go to the first element in row-major order."""
    stride = window if stride is None else stride
    ho, wo = _pool_geometry(x, window, stride)
    xd = x.data
    best = None
    arg = np.zeros((x.shape[0], ho, wo, x.shape[3]), dtype=np.int32)
    for t in range(window * window):
        cand = xd[_tap(xd, t // window, t % window, 1, stride, ho, wo)]
        if best is None:
            best = cand.copy()
            continue
        upd = cand > best
        best = np.where(upd, cand, best)
        arg[upd] = t
    shape = xd.shape

    def bw(g):
        dx = np.zeros(shape, dtype=g.dtype)
        for t in range(window * window):
            dx[_tap(dx, t // window, t % window, 1, stride, ho, wo)] += np.where(arg == t, g, 0.0)
        return (dx,)

    return make_op(best, (x,), bw, "max_pool")


def avg_pool(x: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    stride = window if stride is None else stride
    ho, wo = _pool_geometry(x, window, stride)
    xd = x.data
    out = np.zeros((x.shape[0], ho, wo, x.shape[3]), dtype=xd.dtype)
    for t in range(window * window):
        out += xd[_tap(xd, t // window, t % window, 1, stride, ho, wo)]
    out /= window * window
    shape = xd.shape

    def bw(g):
        dx = np.zeros(shape, dtype=g.dtype)
        for t in range(window * window):
            dx[_tap(dx, t // window, t % window, 1, stride, ho, wo)] += g / (window * window)
        return (dx,)

    return make_op(out, (x,), bw, "avg_pool")
