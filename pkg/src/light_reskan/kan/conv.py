"""KAN convolutions with Gram-polynomial activations.

A KAN convolution replaces every kernel scalar with a learnable univariate
function phi(x) = sum_k w_k G_k(tanh x) + w_m * silu(x).  In ``elementwise``
mode each (c_out, c_in, i, j) tap owns its phi; in ``shared`` mode one phi
per (c_out, c_in) pair is applied at every tap, which makes the layer
equivalent to "activate positionwise, then sum with an all-ones window".

Three realizations of the shared layer are provided and must agree:

* ``direct``     -- evaluate phi per tap and sum (reference, slow)
* ``decoupled``  -- basis expansion -> learnable 1x1 conv -> fixed all-ones
                    depthwise conv
* ``fused``      -- one pass per (sample, input channel) tile that never
                    materializes the [N, C_in*(D+1), H, W] expansion

Padded taps contribute nothing: zero padding is applied to activation
outputs, never to the input of phi.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg.blas import get_blas_funcs

from ..autograd import Parameter, Tensor, ops
from ..autograd.ops import sigmoid_np
from ..autograd.tensor import make_result
from ..errors import ConfigurationError
from ..nn import BatchNorm2d, Module, kaiming_uniform
from .basis import GramBasisParams, gram_basis, make_beta, resolve_basis

SHARED_PATHS = ("direct", "decoupled", "fused")
ELEMENTWISE_PATHS = ("direct", "expanded")


@dataclass(frozen=True)
class InitSpec:
    """Kaiming-uniform (linear gain) weights; beta_k ~ N(0, sigma^2)."""

    scheme: str = "kaiming_uniform_linear"
    spatial_dims: int = 2

    def beta_sigma(self, k: int, c_in: int, degree: int) -> float:
        return 1.0 / (k**self.spatial_dims * c_in * (degree + 1))


class KanConvLayer(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        k: int,
        stride: int = 1,
        padding: int = 0,
        mode: str = "shared",
        degree: int = 3,
        basis: str = "gram",
        prenorm: bool = True,
        path: str | None = None,
        dtype=np.float32,
        seed: int = 0,
    ):
        super().__init__()
        if mode not in ("shared", "elementwise"):
            raise ConfigurationError(f"mode must be 'shared' or 'elementwise', got {mode!r}")
        if min(c_in, c_out, k, stride) < 1 or padding < 0:
            raise ConfigurationError(
                f"invalid KAN conv geometry c_in={c_in} c_out={c_out} k={k} stride={stride} padding={padding}"
            )
        if degree < 1:
            raise ConfigurationError(f"polynomial degree must be >= 1, got {degree}")
        resolve_basis(basis)
        paths = SHARED_PATHS if mode == "shared" else ELEMENTWISE_PATHS
        path = path or paths[1]
        if path not in paths:
            raise ConfigurationError(f"path {path!r} not available in {mode} mode; valid: {paths}")
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride, self.padding = stride, padding
        self.mode, self.degree, self.basis, self.path = mode, degree, basis, path
        self.spatial_dims = 2
        taps = () if mode == "shared" else (k, k)
        self.w_k = Parameter(np.zeros((c_out, c_in, *taps, degree + 1), dtype=dtype))
        self.w_m = Parameter(np.zeros((c_out, c_in, *taps), dtype=dtype))
        beta = make_beta(basis, degree, dtype)
        if beta is not None:
            self.beta = beta
        else:
            object.__setattr__(self, "beta", None)
        if prenorm:
            self.norm = BatchNorm2d(c_in, dtype=dtype)
        else:
            object.__setattr__(self, "norm", None)
        init_layer(self, InitSpec(), seed)

    @property
    def basis_params(self) -> GramBasisParams:
        return GramBasisParams(self.degree, self.beta)

    def poly_param_count(self) -> int:
        return self.w_k.size

    def forward(self, x: Tensor) -> Tensor:
        if self.norm is not None:
            x = self.norm(x)
        return PATHS[self.path](x, self)

    def __repr__(self):
        return (
            f"KanConvLayer({self.c_in}->{self.c_out}, k={self.k}, s={self.stride}, p={self.padding}, "
            f"mode={self.mode}, D={self.degree}, basis={self.basis}, path={self.path})"
        )


def init_layer(layer: KanConvLayer, spec: InitSpec = InitSpec(), seed: int = 0) -> None:
    """Deterministic initialization of a layer's KAN parameters from ``seed``."""
    rng = np.random.default_rng(seed)
    dt = layer.w_k.dtype
    k2 = layer.k**spec.spatial_dims
    layer.w_k.data[...] = kaiming_uniform(rng, layer.w_k.shape, layer.c_in * (layer.degree + 1) * k2, dt)
    layer.w_m.data[...] = kaiming_uniform(rng, layer.w_m.shape, layer.c_in * k2, dt)
    if layer.beta is not None:
        sigma = spec.beta_sigma(layer.k, layer.c_in, layer.degree)
        layer.beta.data[...] = rng.normal(0.0, sigma, layer.beta.shape).astype(dt)


def _check_input(x: Tensor, layer: KanConvLayer) -> tuple[int, int]:
    if x.ndim != 4:
        raise ConfigurationError(f"KAN conv expects [N, C, H, W], got {x.shape}")
    if x.shape[1] != layer.c_in:
        raise ConfigurationError(f"C_in mismatch: input has {x.shape[1]} channels, layer expects {layer.c_in}")
    if x.dtype != layer.w_k.dtype:
        raise ConfigurationError(f"dtype mismatch: input {x.dtype} vs parameters {layer.w_k.dtype}")
    h, w = x.shape[2:]
    k, p, s = layer.k, layer.padding, layer.stride
    for n, name in ((h, "H"), (w, "W")):
        if k > n + 2 * p:
            raise ConfigurationError(f"window {k} larger than padded input along {name} ({n} + 2*{p})")
    return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


def expand_basis(x: Tensor, layer: KanConvLayer) -> Tensor:
    """[N, C, H, W] -> [N, C*(D+1), H, W] stacking G_0..G_D of tanh(x) per channel."""
    n, c, h, w = x.shape
    g = gram_basis(ops.tanh(x), layer.basis_params, axis=2)
    return g.reshape(n, c * (layer.degree + 1), h, w)


# -- direct (reference) --------------------------------------------------------


def kan_conv_direct(x: Tensor, layer: KanConvLayer) -> Tensor:
    """Evaluate phi at every tap and sum; both modes, fully differentiable.

    This is the reference path, so it always computes in float64 and casts the
    result (and, on the way back, every gradient) to the input's dtype.
    """
    ho, wo = _check_input(x, layer)
    k, s, p = layer.k, layer.stride, layer.padding
    dtype = x.data.dtype
    x = ops.astype(x, np.float64)
    beta = layer.basis_params.beta
    params = GramBasisParams(layer.basis_params.degree, None if beta is None else ops.astype(beta, np.float64))
    w_k, w_m = ops.astype(layer.w_k, np.float64), ops.astype(layer.w_m, np.float64)
    g = gram_basis(ops.tanh(x), params, axis=2)  # [N, C_in, D+1, H, W]
    sx = ops.silu(x)
    hs, ws = s * (ho - 1) + 1, s * (wo - 1) + 1
    out = None
    shared_act = None
    for i in range(k):
        for j in range(k):
            if layer.mode == "shared":
                wk, wm = w_k, w_m
            else:
                wk, wm = w_k[:, :, i, j], w_m[:, :, i, j]
            if layer.mode == "elementwise" or shared_act is None:
                act = ops.einsum("nckhw,ock->nochw", g, wk) + ops.einsum("nchw,oc->nochw", sx, wm)
                act = ops.pad2d(act, p)  # [N, C_out, C_in, H+2p, W+2p]
                if layer.mode == "shared":
                    shared_act = act
            else:
                act = shared_act
            tap = ops.sum(act[:, :, :, i : i + hs : s, j : j + ws : s], axis=2)
            out = tap if out is None else out + tap
    return ops.astype(out, dtype)


# -- decoupled (1x1 + fixed all-ones depthwise) --------------------------------


def kan_conv_decoupled(x: Tensor, layer: KanConvLayer) -> Tensor:
    if layer.mode != "shared":
        raise ConfigurationError("decoupled path requires a shared-mode layer")
    _check_input(x, layer)
    c_out, c_in, d1 = layer.w_k.shape
    k, s, p = layer.k, layer.stride, layer.padding
    if k == 1 and p == 0 and s > 1:
        # a 1x1 all-ones window just subsamples, which commutes with the pointwise part
        x = x[:, :, ::s, ::s]
    expanded = expand_basis(x, layer)
    point = ops.conv2d(expanded, layer.w_k.reshape(c_out, c_in * d1, 1, 1))
    point = point + ops.conv2d(ops.silu(x), layer.w_m.reshape(c_out, c_in, 1, 1))
    if k == 1 and p == 0:
        return point
    # fixed all-ones depthwise aggregation
    return ops.box_sum2d(point, k, s, p)


# -- expanded (elementwise fast path: basis expansion + ordinary conv) ---------


def kan_conv_expanded(x: Tensor, layer: KanConvLayer) -> Tensor:
    if layer.mode != "elementwise":
        raise ConfigurationError("expanded path requires an elementwise-mode layer")
    _check_input(x, layer)
    c_out, c_in, k, _, d1 = layer.w_k.shape
    kernel = layer.w_k.transpose(0, 1, 4, 2, 3).reshape(c_out, c_in * d1, k, k)
    out = ops.conv2d(expand_basis(x, layer), kernel, layer.stride, layer.padding)
    return out + ops.conv2d(ops.silu(x), layer.w_m, layer.stride, layer.padding)


# -- fused ---------------------------------------------------------------------


def _tap_ranges(n_in: int, k: int, s: int, p: int, n_out: int):
    """Per kernel offset: (output slice, input slice) of in-bounds taps, or None."""
    ranges = []
    for i in range(k):
        lo = max(0, math.ceil((p - i) / s))
        hi = min(n_out, (n_in - 1 + p - i) // s + 1)
        if hi <= lo:
            ranges.append(None)
            continue
        r0 = lo * s + i - p
        ranges.append((slice(lo, hi), slice(r0, r0 + (hi - lo - 1) * s + 1, s)))
    return ranges


class _Taps:
    def __init__(self, h, w, k, s, p, ho, wo):
        rh, rw = _tap_ranges(h, k, s, p, ho), _tap_ranges(w, k, s, p, wo)
        self.pairs = [
            ((a[0], b[0]), (a[1], b[1])) for a in rh if a is not None for b in rw if b is not None
        ]
        ch = np.zeros(ho)
        cw = np.zeros(wo)
        for a in rh:
            if a is not None:
                ch[a[0]] += 1
        for b in rw:
            if b is not None:
                cw[b[0]] += 1
        self.count = np.outer(ch, cw)

    def box(self, plane: np.ndarray, out: np.ndarray) -> np.ndarray:
        out.fill(0)
        for o, i in self.pairs:
            out[o] += plane[i]
        return out

    def box_adjoint(self, grid: np.ndarray, out: np.ndarray) -> np.ndarray:
        out.fill(0)
        for o, i in self.pairs:
            out[i] += grid[o]
        return out


def _silu_into(x: np.ndarray, buf: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        np.negative(x, out=buf)
        np.exp(buf, out=buf)
        buf += 1
        np.divide(x, buf, out=buf)
    return buf


def _fused_forward(x, w, wm, beta, k, s, p, ho, wo):
    n, c_in, h, wd = x.shape
    c_out, _, d1 = w.shape
    degree = d1 - 1
    dt = x.dtype
    taps = _Taps(h, wd, k, s, p, ho, wo)
    out = np.zeros((n, c_out, ho, wo), dtype=dt)
    (ger,) = get_blas_funcs(("ger",), (out,))
    count = taps.count.astype(dt).reshape(-1)
    w0 = np.ascontiguousarray(w[:, :, 0].sum(axis=1))
    # the whole transient working set: four [H, W] planes and one [H', W'] grid
    t = np.empty((h, wd), dt)
    buf_a, buf_b, tmp = np.empty_like(t), np.empty_like(t), np.empty_like(t)
    box = np.empty((ho, wo), dt)
    flat = box.reshape(-1)
    for b in range(n):
        acc = out[b].reshape(c_out, -1).T  # Fortran-ordered view; ger updates it in place
        ger(1.0, count, w0, a=acc, overwrite_a=1)
        for c in range(c_in):
            xc = x[b, c]
            taps.box(_silu_into(xc, tmp), box)
            ger(1.0, flat, wm[:, c], a=acc, overwrite_a=1)
            np.tanh(xc, out=t)
            taps.box(t, box)
            ger(1.0, flat, w[:, c, 1], a=acc, overwrite_a=1)
            prev2, prev1 = None, t  # None stands for the constant G_0
            for kk in range(2, degree + 1):
                bk = dt.type(0) if beta is None else beta[kk - 2]
                dst = buf_a if prev1 is not buf_a else buf_b  # may alias prev2: fine, elementwise
                np.multiply(t, prev1, out=tmp)
                if prev2 is None:
                    np.subtract(tmp, bk, out=dst)
                else:
                    np.multiply(prev2, -bk, out=dst)
                    dst += tmp
                taps.box(dst, box)
                ger(1.0, flat, w[:, c, kk], a=acc, overwrite_a=1)
                prev2, prev1 = prev1, dst
    return out


def _fused_backward(grad, x, w, wm, beta, k, s, p, ho, wo, need_x):
    n, c_in, h, wd = x.shape
    c_out, _, d1 = w.shape
    degree = d1 - 1
    dt = x.dtype
    # every reduction here is long and cancels (notably beta's), and the work is
    # one small plane at a time, so the whole backward runs in float64
    f64 = np.float64
    w, wm = w.astype(f64), wm.astype(f64)
    beta = None if beta is None else beta.astype(f64)
    taps = _Taps(h, wd, k, s, p, ho, wo)
    count = taps.count.reshape(-1)
    gx = np.zeros(x.shape, f64) if need_x else None
    gw = np.zeros(w.shape, f64)
    gwm = np.zeros(wm.shape, f64)
    gb = None if beta is None else np.zeros(beta.shape, f64)
    box = np.empty((ho, wo), f64)
    for b in range(n):
        gm = grad[b].reshape(c_out, -1).astype(f64)
        gw[:, :, 0] += (gm @ count)[:, None]
        for c in range(c_in):
            xc = x[b, c].astype(f64)
            t = np.tanh(xc)
            g = [None, t]
            for kk in range(2, degree + 1):
                bk = 0.0 if beta is None else beta[kk - 2]
                g.append(t * g[kk - 1] - bk * (1.0 if kk == 2 else g[kk - 2]))
            adj = [None] * (degree + 1)
            for kk in range(1, degree + 1):
                gw[:, c, kk] += gm @ taps.box(g[kk], box).reshape(-1)
                adj[kk] = taps.box_adjoint((w[:, c, kk] @ gm).reshape(ho, wo), np.empty_like(t))
            sig = sigmoid_np(xc)
            gwm[:, c] += gm @ taps.box(xc * sig, box).reshape(-1)
            adj_s = taps.box_adjoint((wm[:, c] @ gm).reshape(ho, wo), np.empty_like(t))
            # reverse sweep through the recurrence
            tbar = np.zeros_like(t)
            for kk in range(degree, 1, -1):
                bk = 0.0 if beta is None else beta[kk - 2]
                tbar += g[kk - 1] * adj[kk]
                adj[kk - 1] += t * adj[kk]
                if kk > 2:
                    adj[kk - 2] -= bk * adj[kk]
                if gb is not None:
                    gb[kk - 2] -= np.sum(adj[kk] if kk == 2 else g[kk - 2] * adj[kk])
            tbar += adj[1]
            if gx is not None:
                gx[b, c] = tbar * (1 - t * t) + adj_s * (sig * (1 + xc * (1 - sig)))
    cast = lambda a: None if a is None else a.astype(dt)  # noqa: E731
    return cast(gx), cast(gw), cast(gwm), cast(gb)


def kan_conv_fused(x: Tensor, layer: KanConvLayer) -> Tensor:
    """Single-pass shared KAN convolution with a matching fused backward."""
    if layer.mode != "shared":
        raise ConfigurationError("fused path requires a shared-mode layer")
    ho, wo = _check_input(x, layer)
    k, s, p = layer.k, layer.stride, layer.padding
    w, wm = layer.w_k.data, layer.w_m.data
    beta = None if layer.beta is None else layer.beta.data
    out = _fused_forward(x.data, w, wm, beta, k, s, p, ho, wo)
    parents = (x, layer.w_k, layer.w_m) + (() if layer.beta is None else (layer.beta,))

    def bw(grad):
        gx, gw, gwm, gb = _fused_backward(grad, x.data, w, wm, beta, k, s, p, ho, wo, x.requires_grad)
        return (gx, gw, gwm) + (() if gb is None else (gb,))

    return make_result("kan_conv_fused", out, parents, bw)


PATHS = {
    "direct": kan_conv_direct,
    "decoupled": kan_conv_decoupled,
    "expanded": kan_conv_expanded,
    "fused": kan_conv_fused,
}


def kan_conv(x: Tensor, layer: KanConvLayer, path: str | None = None) -> Tensor:
    """Run the layer's KAN convolution (without its pre-normalization) on ``x``."""
    return PATHS[path or layer.path](x, layer)
