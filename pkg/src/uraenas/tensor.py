"""Dense float64 tensors with a define-by-run reverse-mode gradient tape.

Only the primitives the supernet needs are provided. Each primitive records a
node carrying its inputs and an adjoint closure; ``backward`` replays the
adjoints of every reachable node in reverse record order.
"""

from __future__ import annotations

import contextlib
import functools
import itertools
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, InputError, UsageError

_counter = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    """One primitive application recorded on the tape."""

    __slots__ = ("index", "inputs", "adjoint", "name")

    def __init__(self, inputs: Sequence["Tensor"], adjoint: Callable, name: str):
        self.index = next(_counter)
        self.inputs = tuple(inputs)
        self.adjoint = adjoint
        self.name = name


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> None:
        backward(self)


def _result(data: np.ndarray, inputs: Sequence[Tensor], adjoint: Callable, name: str) -> Tensor:
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out.node = Node(inputs, adjoint, name)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires it.

    Gradients accumulate across calls until ``zero_grad`` is called on the
    leaves.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    # Collect reachable nodes, then replay adjoints in reverse record order.
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    seen: set[int] = set()
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t.node is not None:
            nodes[t.node.index] = t
            stack.extend(i for i in t.node.inputs if i.requires_grad)

    upstream: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for idx in sorted(nodes, reverse=True):
        t = nodes[idx]
        g = upstream.pop(id(t), None)
        if g is None:
            continue
        grads = t.node.adjoint(g)
        for inp, gi in zip(t.node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                upstream[key] = gi if key not in upstream else upstream[key] + gi


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def add_n(xs: Sequence[Tensor]) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise UsageError("add_n: empty input list")
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise DimensionError(f"add_n: shapes {shape} and {x.shape} differ")
    out = xs[0].data.copy(order="K")
    for x in xs[1:]:
        out += x.data
    return _result(out, xs, lambda g: tuple(g for _ in xs), "add_n")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result(x.data * s, (x,), lambda g: (g * s,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def mix(xs: Sequence[Tensor | None], weights: Tensor) -> Tensor:
    """Weighted sum ``sum_o weights[o] * xs[o]``.

    ``None`` entries stand for an all-zero operand; their weight still
    receives a (zero) gradient.
    """
    weights = _as_tensor(weights)
    if weights.data.ndim != 1 or weights.data.shape[0] != len(xs):
        raise DimensionError(f"mix: {len(xs)} operands but weights shape {weights.shape}")
    shapes = {x.shape for x in xs if x is not None}
    if len(shapes) != 1:
        raise DimensionError(f"mix: operand shapes disagree: {sorted(shapes)}")
    shape = shapes.pop()
    w = weights.data
    out = np.zeros_like(next(x.data for x in xs if x is not None))
    for wo, x in zip(w, xs):
        if x is not None and wo != 0.0:
            out += wo * x.data
    present = [x for x in xs if x is not None]

    def adjoint(g):
        gw = np.array([0.0 if x is None else float(np.vdot(g, x.data)) for x in xs])
        return (gw,) + tuple(g * wo for wo, x in zip(w, xs) if x is not None)

    return _result(out, (weights, *present), adjoint, "mix")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise UsageError("concat_channels: empty input list")
    ref = xs[0].shape
    for x in xs:
        if x.data.ndim != 4 or x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
            raise DimensionError(f"concat_channels: incompatible shapes {ref} and {x.shape}")
    sizes = [x.shape[1] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def adjoint(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return _result(np.concatenate([x.data for x in xs], axis=1), xs, adjoint, "concat")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool: expected [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape

    def adjoint(g):
        gx = np.empty_like(x.data)
        gx[...] = g[:, :, None, None] / (h * w)
        return (gx,)

    return _result(x.data.mean(axis=(2, 3)), (x,), adjoint, "gap")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: x {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")

    def adjoint(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return _result(x.data @ weight.data + bias.data, (x, weight, bias), adjoint, "linear")


# ---------------------------------------------------------------------------
# spatial ops


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def channel_major(x: np.ndarray) -> np.ndarray:
    """Return an [N,C,H,W]-shaped view whose memory is laid out C,H,W,N.

    The spatial primitives work on the batch-innermost layout (long
    contiguous runs even at 4 channels) and hand back views of it; ufuncs
    keep the layout, so it propagates through the graph without copies.
    """
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64).transpose(1, 2, 3, 0)).transpose(3, 0, 1, 2)


def _cm(x: np.ndarray) -> np.ndarray:
    """[N,C,H,W] view -> [C,H,W,N] array (free when already channel-major)."""
    return x.transpose(1, 2, 3, 0)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """NCHW input -> (cols [kh*kw*C, Ho*Wo*N], padded C,H,W,N shape, Ho, Wo)."""
    n, c, h, w = x.shape
    ho, wo = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    if padding:
        xp = np.zeros((c, h + 2 * padding, w + 2 * padding, n))
        xp[:, padding : padding + h, padding : padding + w, :] = _cm(x)
    else:
        xp = _cm(x)
    if kh == 1 and kw == 1 and stride == 1:
        return np.ascontiguousarray(xp).reshape(c, h * w * n), xp.shape, ho, wo
    cols = np.empty((kh, kw, c, ho, wo, n))
    for di in range(kh):
        for dj in range(kw):
            cols[di, dj] = xp[:, di : di + stride * (ho - 1) + 1 : stride, dj : dj + stride * (wo - 1) + 1 : stride, :]
    return cols.reshape(kh * kw * c, ho * wo * n), xp.shape, ho, wo


def _col2im(gcols: np.ndarray, xp_shape, kh: int, kw: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of ``_im2col``; returns the NCHW gradient of the unpadded input."""
    c, hp, wp, n = xp_shape
    if kh == 1 and kw == 1 and stride == 1 and not padding:
        return gcols.reshape(c, hp, wp, n).transpose(3, 0, 1, 2)
    gcols = gcols.reshape(kh, kw, c, ho, wo, n)
    gxp = np.zeros(xp_shape)
    for di in range(kh):
        for dj in range(kw):
            gxp[:, di : di + stride * (ho - 1) + 1 : stride, dj : dj + stride * (wo - 1) + 1 : stride, :] += gcols[di, dj]
    gx = gxp[:, padding : hp - padding, padding : wp - padding, :] if padding else gxp
    return gx.transpose(3, 0, 1, 2)


def _kmat(kernel: np.ndarray) -> np.ndarray:
    f, c, kh, kw = kernel.shape
    return kernel.transpose(0, 2, 3, 1).reshape(f, kh * kw * c)


def _gmat(g: np.ndarray) -> np.ndarray:
    f = g.shape[1]
    return np.ascontiguousarray(_cm(g)).reshape(f, -1)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [N,C,H,W] with ``kernel`` [F,C,kh,kw]."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d x and kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d: channel axis mismatch, x has {c}, kernel has {kc}")
    ho, wo = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: spatial axes {h}x{w} too small for kernel {kh}x{kw}")

    cmat, xp_shape, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    kmat = _kmat(kernel.data)
    out = (kmat @ cmat).reshape(f, ho, wo, n).transpose(3, 0, 1, 2)

    def adjoint(g):
        gm = _gmat(g)
        gk = (gm @ cmat.T).reshape(f, kh, kw, c).transpose(0, 3, 1, 2)
        gx = _col2im(kmat.T @ gm, xp_shape, kh, kw, stride, padding, ho, wo)
        return gx, gk

    return _result(out, (x, kernel), adjoint, "conv2d")


def mixed_edges(x: Tensor, thetas: Sequence[Tensor], k1s: Sequence[Tensor], k3s: Sequence[Tensor]) -> Tensor:
    """All mixed ops leaving one node, fused into a single primitive.

    For each outgoing edge e with weights ``thetas[e]`` ordered (zeroize, skip,
    conv1x1, conv3x3, avg_pool3x3) the output block e (channels
    ``e*C:(e+1)*C``) is::

        th[1]*x + th[2]*conv1x1(relu x) + th[3]*conv3x3(relu x) + th[4]*pool(x)

    The two convs of every edge share one im2col of ``relu(x)``; the 1x1 kernel
    rides in the centre tap of a combined 3x3 kernel. Ops whose weight is
    exactly zero on every edge are skipped unless a weight gradient is needed.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"mixed_edges: expected [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    ne = len(thetas)
    if not (ne == len(k1s) == len(k3s)) or ne == 0:
        raise DimensionError("mixed_edges: need one theta, 1x1 and 3x3 kernel per edge")
    for th, k1, k3 in zip(thetas, k1s, k3s):
        if th.shape != (5,) or k1.shape != (c, c, 1, 1) or k3.shape != (c, c, 3, 3):
            raise DimensionError(f"mixed_edges: bad edge shapes {th.shape}, {k1.shape}, {k3.shape}")
    th = np.stack([t.data for t in thetas])
    need_theta = any(t.requires_grad for t in thetas)
    use_conv = need_theta or bool(np.any(th[:, 2:4] != 0.0))
    use_pool = need_theta or bool(np.any(th[:, 4] != 0.0))

    xc = _cm(x.data)
    out = np.zeros((ne * c, h, w, n))
    for e in range(ne):
        if th[e, 1] != 0.0:
            out[e * c : (e + 1) * c] += th[e, 1] * xc
    pooled = None
    if use_pool:
        pooled = _cm(_avg_pool_forward(x.data, 1))
        for e in range(ne):
            if th[e, 4] != 0.0:
                out[e * c : (e + 1) * c] += th[e, 4] * pooled
    mask = cmat = kmat = None
    if use_conv:
        mask = xc > 0
        cmat, xp_shape, _, _ = _im2col(np.where(mask, xc, 0.0).transpose(3, 0, 1, 2), 3, 3, 1, 1)
        kc = np.empty((ne * c, c, 3, 3))
        for e in range(ne):
            blk = th[e, 3] * k3s[e].data
            blk[:, :, 1, 1] += th[e, 2] * k1s[e].data[:, :, 0, 0]
            kc[e * c : (e + 1) * c] = blk
        kmat = _kmat(kc)
        out += (kmat @ cmat).reshape(ne * c, h, w, n)

    def adjoint(g):
        gc = np.ascontiguousarray(_cm(g))
        gx = np.zeros((c, h, w, n))
        gth = np.zeros((ne, 5)) if need_theta else None
        gpool = None
        for e in range(ne):
            ge = gc[e * c : (e + 1) * c]
            if need_theta:
                gth[e, 1] = np.vdot(ge, xc)
            if th[e, 1] != 0.0:
                gx += th[e, 1] * ge
            if pooled is not None:
                if need_theta:
                    gth[e, 4] = np.vdot(ge, pooled)
                if th[e, 4] != 0.0:
                    gpool = th[e, 4] * ge if gpool is None else gpool + th[e, 4] * ge
        if gpool is not None:
            gx += _cm(_avg_pool_adjoint(gpool.transpose(3, 0, 1, 2), x.shape, 1))
        if use_conv:
            gm = gc.reshape(ne * c, h * w * n)
            gkc = (gm @ cmat.T).reshape(ne * c, 3, 3, c).transpose(0, 3, 1, 2)
            gx += mask * _cm(_col2im(kmat.T @ gm, xp_shape, 3, 3, 1, 1, h, w))
            gk1s, gk3s = [], []
            for e in range(ne):
                gblk = gkc[e * c : (e + 1) * c]
                if need_theta:
                    gth[e, 3] = np.vdot(gblk, k3s[e].data)
                    gth[e, 2] = np.vdot(gblk[:, :, 1, 1], k1s[e].data[:, :, 0, 0])
                gk3s.append(th[e, 3] * gblk)
                gk1s.append((th[e, 2] * gblk[:, :, 1, 1])[:, :, None, None])
        else:
            gk1s = [None] * ne
            gk3s = [None] * ne
        gths = list(gth) if need_theta else [None] * ne
        return (gx.transpose(3, 0, 1, 2), *gths, *gk1s, *gk3s)

    out = out.transpose(3, 0, 1, 2)
    return _result(out, (x, *thetas, *k1s, *k3s), adjoint, "mixed_edges")


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 4 or not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f"channel_slice: [{start}:{stop}] out of range for {x.shape}")

    def adjoint(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _result(x.data[:, start:stop], (x,), adjoint, "channel_slice")


@functools.lru_cache(maxsize=64)
def _pool_count(h: int, w: int, ho: int, wo: int, stride: int) -> np.ndarray:
    ones = np.pad(np.ones((h, w)), 1)
    count = np.zeros((ho, wo))
    for di in range(3):
        for dj in range(3):
            count += ones[di : di + stride * (ho - 1) + 1 : stride, dj : dj + stride * (wo - 1) + 1 : stride]
    count.setflags(write=False)
    return count


def _box3(xc: np.ndarray) -> np.ndarray:
    """Zero-padded 3x3 box sum over axes 1, 2 of a [C,H,W,N] array (self-adjoint)."""
    s = xc.copy()
    s[:, :, 1:] += xc[:, :, :-1]
    s[:, :, :-1] += xc[:, :, 1:]
    t = s.copy()
    t[:, 1:] += s[:, :-1]
    t[:, :-1] += s[:, 1:]
    return t


def _avg_pool_forward(x: np.ndarray, stride: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho, wo = _out_size(h, 3, stride, 1), _out_size(w, 3, stride, 1)
    if stride == 1:
        total = _box3(_cm(x))
    else:
        xp = np.zeros((c, h + 2, w + 2, n))
        xp[:, 1 : h + 1, 1 : w + 1, :] = _cm(x)
        total = np.zeros((c, ho, wo, n))
        for di in range(3):
            for dj in range(3):
                total += xp[:, di : di + stride * (ho - 1) + 1 : stride, dj : dj + stride * (wo - 1) + 1 : stride, :]
    total /= _pool_count(h, w, ho, wo, stride)[None, :, :, None]
    return total.transpose(3, 0, 1, 2)


def _avg_pool_adjoint(g: np.ndarray, shape, stride: int) -> np.ndarray:
    n, c, h, w = shape
    ho, wo = g.shape[2:]
    gs = _cm(g) / _pool_count(h, w, ho, wo, stride)[None, :, :, None]
    if stride == 1:
        return _box3(gs).transpose(3, 0, 1, 2)
    gxp = np.zeros((c, h + 2, w + 2, n))
    for di in range(3):
        for dj in range(3):
            gxp[:, di : di + stride * (ho - 1) + 1 : stride, dj : dj + stride * (wo - 1) + 1 : stride, :] += gs
    return gxp[:, 1 : 1 + h, 1 : 1 + w, :].transpose(3, 0, 1, 2)


def avg_pool3x3(x: Tensor, stride: int = 1) -> Tensor:
    """3x3 mean pooling with padding 1; padded cells are excluded from the divisor."""
    if x.data.ndim != 4:
        raise DimensionError(f"avg_pool3x3: expected [N,C,H,W], got {x.shape}")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise DimensionError(f"avg_pool3x3: empty spatial axes {x.shape[2]}x{x.shape[3]}")
    out = _avg_pool_forward(x.data, stride)
    return _result(out, (x,), lambda g: (_avg_pool_adjoint(g, x.shape, stride),), "avg_pool3x3")


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean cross-entropy over the batch; also returns the softmax rows."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: expected [N,K] logits, got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: {labels.shape} labels for {n} rows")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"softmax_cross_entropy: labels must lie in [0, {k})")
    labels = labels.astype(np.intp)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    probs = np.exp(logp)
    loss = -logp[np.arange(n), labels].mean()

    def adjoint(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (float(g) / n),)

    return _result(np.asarray(loss), (logits,), adjoint, "xent"), probs


# ---------------------------------------------------------------------------
# oracle


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (one coordinate at a time)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
