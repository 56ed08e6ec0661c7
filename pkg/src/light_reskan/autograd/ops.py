"""Differentiable primitives.

Broadcasting is deliberately limited to scalar-with-tensor; every other
binary op requires equal shapes.  Convolution is cross-correlation (no
kernel flip).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import expit

from ..errors import ConfigurationError, DataError, UsageError
from .tensor import Tensor, as_tensor, make_result

# -- helpers ---------------------------------------------------------------


def _coerce_pair(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise UsageError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.dtype != b.dtype:
        raise ConfigurationError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ConfigurationError(
            f"incompatible shapes {a.shape} and {b.shape}: only scalar-tensor broadcasting is supported"
        )
    return a, b


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    # t was the scalar side of a scalar-tensor op
    return np.asarray(g.sum(), dtype=g.dtype).reshape(t.shape)


def _out_size(n: int, k: int, stride: int, padding: int, dim: str) -> int:
    if k > n + 2 * padding:
        raise ConfigurationError(
            f"window {k} larger than padded input along {dim} ({n} + 2*{padding})"
        )
    return (n + 2 * padding - k) // stride + 1


def _pad(x: np.ndarray, p: int, value=0.0) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Read-only [N, C, H', W', k, k] view of sliding windows over a padded input."""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp, (n, c, ho, wo, k, k), (sn, sc, sh * stride, sw * stride, sh, sw), writeable=False
    )


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    return make_result("add", a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    return make_result("sub", a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    ad, bd = a.data, b.data
    return make_result(
        "mul", ad * bd, (a, b), lambda g: (_reduce_to(g * bd, a), _reduce_to(g * ad, b))
    )


def neg(a: Tensor) -> Tensor:
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a non-learnable constant."""
    c = a.data.dtype.type(c)
    return make_result("scale", a.data * c, (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return make_result("tanh", y, (a,), lambda g: (g * (1 - y * y),))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    return expit(x)


def silu(a: Tensor) -> Tensor:
    """x / (1 + exp(-x))."""
    x = a.data
    s = sigmoid_np(x)
    return make_result("silu", x * s, (a,), lambda g: (g * (s * (1 + x * (1 - s))),))


def elementwise(op: str, *operands, value: float | None = None) -> Tensor:
    """Dispatch by name over the elementwise catalog."""
    table = {"tanh": tanh, "silu": silu, "neg": neg, "add": add, "mul": mul, "sub": sub}
    if op == "scale":
        return scale(operands[0], value)
    try:
        return table[op](*operands)
    except KeyError:
        raise ConfigurationError(f"unknown elementwise op {op!r}; valid: {sorted(table) + ['scale']}")


# -- shape manipulation ----------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return make_result("transpose", out, (a,), lambda g: (g.transpose(inv),))


def astype(a: Tensor, dtype) -> Tensor:
    """Change precision; the gradient is cast back to the source dtype."""
    dtype = np.dtype(dtype)
    if a.data.dtype == dtype:
        return a
    src = a.data.dtype
    return make_result("astype", a.data.astype(dtype), (a,), lambda g: (g.astype(src),))


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing; the result is a contiguous copy."""
    out = np.ascontiguousarray(a.data[index])

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] += g
        return (full,)

    return make_result("getitem", out, (a,), bw)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = a.data
    out = np.asarray(x.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result("sum", out, (a,), bw)


def mean(a: Tensor) -> Tensor:
    return scale(sum(a), 1.0 / a.size)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make_result("concat", out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return make_result("stack", out, tensors, bw)


def pad2d(a: Tensor, padding: int) -> Tensor:
    """Zero-pad the last two axes of an [..., H, W] tensor."""
    if padding == 0:
        return a
    p = padding
    width = [(0, 0)] * (a.ndim - 2) + [(p, p), (p, p)]
    out = np.pad(a.data, width)
    return make_result("pad2d", out, (a,), lambda g: (np.ascontiguousarray(g[..., p:-p, p:-p]),))


# -- contractions ----------------------------------------------------------


def einsum(subscripts: str, *operands: Tensor) -> Tensor:
    """Explicit-output einsum without repeated indices inside one operand."""
    operands = [as_tensor(o) for o in operands]
    lhs, out_idx = subscripts.replace(" ", "").split("->")
    ins = lhs.split(",")
    if len(ins) != len(operands):
        raise UsageError("einsum operand count does not match subscripts")
    for spec in ins:
        if len(set(spec)) != len(spec):
            raise UsageError(f"repeated index in einsum operand {spec!r}")
    datas = [o.data for o in operands]
    out = np.einsum(subscripts, *datas, optimize=len(operands) > 2)

    def bw(g):
        grads = []
        for i, spec in enumerate(ins):
            if not operands[i].requires_grad:
                grads.append(None)
                continue
            others = [ins[j] for j in range(len(ins)) if j != i]
            avail = set(out_idx).union(*others) if others else set(out_idx)
            kept = "".join(c for c in spec if c in avail)
            expr = ",".join([out_idx] + others) + "->" + kept
            gi = np.einsum(expr, g, *[datas[j] for j in range(len(ins)) if j != i])
            if kept != spec:
                # indices summed only inside this operand: broadcast back
                shape = [datas[i].shape[spec.index(c)] if c in kept else 1 for c in spec]
                order = [kept.index(c) for c in spec if c in kept]
                gi = gi.transpose(order).reshape(shape)
                gi = np.broadcast_to(gi, datas[i].shape).copy()
            grads.append(gi)
        return tuple(grads)

    return make_result("einsum", np.asarray(out, dtype=datas[0].dtype), operands, bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x[N, in] @ weight[out, in].T + bias[out]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ConfigurationError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    parents = (x, weight)
    if bias is not None:
        if bias.shape != (wd.shape[0],):
            raise ConfigurationError(f"linear: bias shape {bias.shape} != ({wd.shape[0]},)")
        out = out + bias.data
        parents = (x, weight, bias)

    def bw(g):
        grads = (g @ wd, g.T @ xd)
        if bias is not None:
            grads = grads + (g.sum(axis=0),)
        return grads

    return make_result("linear", out, parents, bw)


# -- convolution & pooling -------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation of [N, C_in, H, W] with [C_out, C_in/groups, k, k]."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ConfigurationError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if x.dtype != kernel.dtype:
        raise ConfigurationError(f"conv2d dtype mismatch: {x.dtype} vs {kernel.dtype}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"conv2d needs stride >= 1 and padding >= 0 (got {stride}, {padding})")
    n, c_in, h, w = x.shape
    c_out, cg, kh, kw = kernel.shape
    if kh != kw:
        raise ConfigurationError(f"conv2d kernel must be square, got {kh}x{kw}")
    if c_in % groups or c_out % groups:
        raise ConfigurationError(f"C_in={c_in} and C_out={c_out} must be divisible by groups={groups}")
    if cg != c_in // groups:
        raise ConfigurationError(f"conv2d C_in mismatch: input has {c_in} channels, kernel expects {cg * groups}")
    k = kh
    ho = _out_size(h, k, stride, padding, "H")
    wo = _out_size(w, k, stride, padding, "W")
    xd, kd = x.data, kernel.data

    if k == 1 and stride == 1 and padding == 0 and groups == 1:
        km = kd[:, :, 0, 0]
        out = np.matmul(km, xd.reshape(n, c_in, h * w)).reshape(n, c_out, h, w)

        def bw(g):
            gm = g.reshape(n, c_out, h * w)
            gx = np.matmul(km.T, gm).reshape(xd.shape) if x.requires_grad else None
            gk = None
            if kernel.requires_grad:
                # N*H*W-long reduction: accumulate in float64, then store in the kernel dtype
                gk = np.tensordot(gm.astype(np.float64), xd.reshape(n, c_in, h * w).astype(np.float64),
                                  axes=([0, 2], [0, 2])).astype(kd.dtype).reshape(kd.shape)
            return gx, gk

        return make_result("conv2d", out, (x, kernel), bw)

    xp = _pad(xd, padding)
    if groups == c_in == c_out:
        return _depthwise(x, kernel, xp, k, stride, padding, ho, wo)
    win = _windows(xp, k, stride, ho, wo)
    if groups == 1:
        out = np.tensordot(win, kd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    else:
        wg = win.reshape(n, groups, cg, ho, wo, k, k)
        kg = kd.reshape(groups, c_out // groups, cg, k, k)
        out = np.einsum("ngchwij,gocij->ngohw", wg, kg, optimize=True).reshape(n, c_out, ho, wo)
    out = np.ascontiguousarray(out)

    def bw(g):
        gk = gx = None
        if kernel.requires_grad:
            if groups == 1:
                gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            else:
                gg = g.reshape(n, groups, c_out // groups, ho, wo)
                gk = np.einsum("ngohw,ngchwij->gocij", gg, win.reshape(n, groups, cg, ho, wo, k, k), optimize=True)
                gk = gk.reshape(kd.shape)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            if groups == 1:
                cols = np.tensordot(g, kd, axes=([1], [0]))  # [N, H', W', C_in, k, k]
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i : i + hs : stride, j : j + ws : stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            else:
                gg = g.reshape(n, groups, c_out // groups, ho, wo)
                kg = kd.reshape(groups, c_out // groups, cg, k, k)
                view = gxp.reshape(n, groups, cg, *xp.shape[2:])
                for i in range(k):
                    for j in range(k):
                        view[:, :, :, i : i + hs : stride, j : j + ws : stride] += np.einsum(
                            "ngohw,goc->ngchw", gg, kg[:, :, :, i, j]
                        )
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
            gx = np.ascontiguousarray(gx)
        return gx, gk

    return make_result("conv2d", out, (x, kernel), bw)


def _depthwise(x, kernel, xp, k, stride, padding, ho, wo):
    """One filter per channel: k*k strided slice multiply-adds beat einsum here."""
    kd = kernel.data[:, 0]
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    taps = [(i, j) for i in range(k) for j in range(k)]

    def tap(a, i, j):
        return a[:, :, i : i + hs : stride, j : j + ws : stride]

    out = np.zeros((xp.shape[0], xp.shape[1], ho, wo), dtype=xp.dtype)
    for i, j in taps:
        out += tap(xp, i, j) * kd[None, :, i, j, None, None]

    def bw(g):
        gk = gx = None
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for i, j in taps:
                gk[:, 0, i, j] = np.einsum("nchw,nchw->c", g, tap(xp, i, j))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i, j in taps:
                tap(gxp, i, j)[...] += g * kd[None, :, i, j, None, None]
            h, w = x.shape[2:]
            gx = np.ascontiguousarray(gxp[:, :, padding : padding + h, padding : padding + w])
        return gx, gk

    return make_result("conv2d", out, (x, kernel), bw)


def box_sum2d(x: Tensor, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Depthwise convolution with an all-ones k x k kernel, computed separably."""
    if x.ndim != 4:
        raise ConfigurationError(f"box_sum2d expects [N, C, H, W], got {x.shape}")
    n, c, h, w = x.shape
    ho = _out_size(h, k, stride, padding, "H")
    wo = _out_size(w, k, stride, padding, "W")
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    xp = _pad(x.data, padding)
    rows = np.zeros((n, c, ho, xp.shape[3]), dtype=xp.dtype)
    for i in range(k):
        rows += xp[:, :, i : i + hs : stride, :]
    out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
    for j in range(k):
        out += rows[:, :, :, j : j + ws : stride]

    def bw(g):
        grows = np.zeros_like(rows)
        for j in range(k):
            grows[:, :, :, j : j + ws : stride] += g
        gxp = np.zeros_like(xp)
        for i in range(k):
            gxp[:, :, i : i + hs : stride, :] += grows
        return (np.ascontiguousarray(gxp[:, :, padding : padding + h, padding : padding + w]),)

    return make_result("box_sum2d", out, (x,), bw)


def pool2d(x: Tensor, kind: str, k: int | None = None, stride: int | None = None, padding: int = 0) -> Tensor:
    """Max, average or global-average pooling over [N, C, H, W].

    Max pooling pads with -inf and routes the gradient to the first maximal
    element of each window in row-major order.
    """
    if x.ndim != 4:
        raise ConfigurationError(f"pool2d expects [N,C,H,W], got {x.shape}")
    xd = x.data
    n, c, h, w = xd.shape
    if kind == "global_avg":
        if h * w == 0:
            raise ConfigurationError("global_avg over an empty spatial extent")
        out = xd.mean(axis=(2, 3), keepdims=True)
        return make_result(
            "global_avg_pool", out, (x,), lambda g: (np.broadcast_to(g / (h * w), xd.shape).astype(xd.dtype),)
        )
    if kind not in ("max", "avg"):
        raise ConfigurationError(f"unknown pool kind {kind!r}; valid: max, avg, global_avg")
    if k is None or k < 1:
        raise ConfigurationError("pool2d needs a positive window size")
    stride = k if stride is None else stride
    ho = _out_size(h, k, stride, padding, "H")
    wo = _out_size(w, k, stride, padding, "W")
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1

    if kind == "avg":
        xp = _pad(xd, padding)
        win = _windows(xp, k, stride, ho, wo)
        out = np.ascontiguousarray(win.mean(axis=(4, 5)))

        def bw_avg(g):
            gxp = np.zeros_like(xp)
            gk = g / (k * k)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + hs : stride, j : j + ws : stride] += gk
            return (np.ascontiguousarray(gxp[:, :, padding : padding + h, padding : padding + w]),)

        return make_result("avg_pool", out, (x,), bw_avg)

    xp = _pad(xd, padding, value=-np.inf)
    win = _windows(xp, k, stride, ho, wo).reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)  # first maximal index wins ties
    out = np.ascontiguousarray(np.take_along_axis(win, arg[..., None], axis=-1)[..., 0])

    def bw_max(g):
        gxp = np.zeros(xp.shape, dtype=xd.dtype)
        for i in range(k):
            for j in range(k):
                sel = arg == i * k + j
                gxp[:, :, i : i + hs : stride, j : j + ws : stride] += np.where(sel, g, 0)
        return (np.ascontiguousarray(gxp[:, :, padding : padding + h, padding : padding + w]),)

    return make_result("max_pool", out, (x,), bw_max)


# -- normalization, regularization, loss -----------------------------------


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel normalization of [N, C, H, W].

    In training mode the batch statistics normalize the input and the
    running buffers are updated in place (unbiased variance, torch style).
    """
    if x.ndim != 4:
        raise ConfigurationError(f"batch_norm2d expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigurationError(f"batch_norm2d affine params must have shape ({c},)")
    xd = x.data
    gd = gamma.data.reshape(1, c, 1, 1)
    m = n * h * w
    if training:
        if m < 2:
            raise RuntimeError(f"batch_norm2d in train mode needs N*H*W >= 2, got {m}")
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(c) * (m / (m - 1))
    else:
        mu = running_mean.reshape(1, c, 1, 1).astype(xd.dtype)
        var = running_var.reshape(1, c, 1, 1).astype(xd.dtype)
        xc = xd - mu
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gd + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gxhat = g * gd
        if training:
            gx = inv * (gxhat - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
        else:
            gx = gxhat * inv
        return gx, gg, gb

    return make_result("batch_norm2d", out, (x, gamma, beta), bw)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity in eval mode or at rate 0."""
    if not 0 <= rate < 1:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    if rng is None:
        raise UsageError("dropout in train mode needs an explicit rng")
    keep = rng.random(x.shape) >= rate
    factor = x.dtype.type(1.0 / (1.0 - rate))
    mask = keep.astype(x.dtype) * factor
    return make_result("dropout", x.data * mask, (x,), lambda g: (g * mask,))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    if logits.ndim != 2:
        raise ConfigurationError(f"logits must be [N, K], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise ConfigurationError(f"{labels.shape[0]} labels for {n} logit rows")
    bad = np.flatnonzero((labels < 0) | (labels >= k))
    if bad.size:
        i = int(bad[0])
        raise DataError(f"label {labels[i]} of sample {i} outside [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1
        return (p * (g / n),)

    return make_result("softmax_cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), bw)

