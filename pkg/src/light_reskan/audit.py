"""Parameter, FLOP and memory-traffic accounting plus a KAN-conv microbenchmark.

Conventions (also printed in every report header):

* one multiply-accumulate = 2 FLOPs
* tanh = 1 FLOP, SiLU = 4 FLOPs, each Gram recurrence term of degree >= 2 = 2 FLOPs
* batch norm = 2 FLOPs per element (inference affine form)
* bytes are counted at 4 per scalar, reads plus writes
"""

from __future__ import annotations

import csv
import io
import statistics
import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .autograd import Tensor, no_grad, relative_error
from .errors import BenchmarkError, ConfigurationError
from .kan import SHARED_PATHS, KanConvLayer, kan_conv
from .network import ConvBasicBlock, KanBasicBlock, KanBottleneck, LightResKanModel, Stem
from .nn import BatchNorm2d, Conv2d, Linear, call_hook

BYTES = 4
PAPER_PARAMS_M = 0.82
PAPER_FLOPS_G = 0.05

CONVENTIONS = (
    "MAC = 2 FLOPs; tanh = 1, SiLU = 4, Gram recurrence = 2 per term of degree >= 2; "
    "BN = 2 per element; bytes at 4 per scalar (reads + writes)"
)


@dataclass
class CostRow:
    name: str
    kind: str
    params: int = 0
    flops: int = 0  # per sample
    bytes: int = 0  # per sample


@dataclass
class CostReport:
    rows: list = field(default_factory=list)
    input_shape: tuple = ()
    batch: int = 1
    path: str = "decoupled"

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def flops_per_sample(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def flops_per_batch(self) -> int:
        return self.flops_per_sample * self.batch

    @property
    def bytes_per_batch(self) -> int:
        return sum(r.bytes for r in self.rows) * self.batch

    def header(self) -> list[str]:
        return [
            f"# light_reskan {__version__} cost report",
            f"# conventions: {CONVENTIONS}",
            f"# input {list(self.input_shape)}, batch {self.batch}, shared-conv path {self.path}",
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("\n".join(self.header()) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "kind", "params", "flops_per_sample", "bytes_per_sample"])
        for r in self.rows:
            w.writerow([r.name, r.kind, r.params, r.flops, r.bytes])
        w.writerow(["TOTAL", "", self.total_params, self.flops_per_sample, sum(r.bytes for r in self.rows)])
        return buf.getvalue()

    def to_table(self, with_reference: bool = False) -> str:
        lines = self.header()
        width = max([len(r.name) for r in self.rows] + [5])
        lines.append(f"{'layer':<{width}}  {'kind':<10} {'params':>10} {'MFLOPs':>10} {'KB moved':>10}")
        for r in self.rows:
            lines.append(f"{r.name:<{width}}  {r.kind:<10} {r.params:>10} {r.flops / 1e6:>10.3f} {r.bytes / 1024:>10.1f}")
        lines.append(f"total parameters: {self.total_params} ({self.total_params / 1e6:.3f} M)")
        lines.append(f"FLOPs per sample: {self.flops_per_sample / 1e9:.4f} G")
        lines.append(f"FLOPs per batch of {self.batch}: {self.flops_per_batch / 1e9:.4f} G")
        lines.append(f"bytes moved per batch: {self.bytes_per_batch / 2**20:.2f} MiB")
        if with_reference:
            dp = self.total_params / 1e6 - PAPER_PARAMS_M
            df = self.flops_per_batch / 1e9 - PAPER_FLOPS_G
            lines.append(f"reference params {PAPER_PARAMS_M} M (non-binding): delta {dp:+.3f} M")
            lines.append(f"reference FLOPs {PAPER_FLOPS_G} G per batch (non-binding, convention unknown): delta {df:+.4f} G")
        return "\n".join(lines)


# -- closed-form per-layer formulas ----------------------------------------------


def kan_params(layer: KanConvLayer) -> int:
    taps = 1 if layer.mode == "shared" else layer.k * layer.k
    poly = layer.c_out * layer.c_in * taps * (layer.degree + 1)
    base = layer.c_out * layer.c_in * taps
    beta = layer.degree - 1 if layer.basis == "gram" and layer.degree >= 2 else 0
    norm = 2 * layer.c_in if layer.norm is not None else 0
    return poly + base + beta + norm


def kan_poly_params(layer: KanConvLayer) -> int:
    taps = 1 if layer.mode == "shared" else layer.k * layer.k
    return layer.c_out * layer.c_in * taps * (layer.degree + 1)


def conv_flops(c_in, c_out, k, ho, wo) -> int:
    return 2 * c_out * ho * wo * c_in * k * k


def basis_flops(c_in, degree, h, w) -> int:
    return c_in * h * w * (1 + 2 * max(degree - 1, 0) + 4)


def kan_flops(layer: KanConvLayer, h, w, ho, wo) -> int:
    ci, co, d1, k = layer.c_in, layer.c_out, layer.degree + 1, layer.k
    total = basis_flops(ci, layer.degree, h, w)
    if layer.norm is not None:
        total += 2 * ci * h * w
    if layer.mode == "shared":
        total += 2 * co * ci * d1 * h * w  # polynomial weighting
        total += 2 * co * ci * h * w  # SiLU branch weighting
        total += co * ho * wo * k * k  # all-ones aggregation
    else:
        total += conv_flops(ci * d1, co, k, ho, wo) + conv_flops(ci, co, k, ho, wo)
    return total


def expansion_bytes(n, c_in, degree, h, w) -> int:
    """Size of the materialized [N, C_in*(D+1), H, W] basis expansion."""
    return BYTES * n * c_in * (degree + 1) * h * w


def kan_bytes(layer: KanConvLayer, h, w, ho, wo, path: str) -> int:
    """Per-sample traffic of one KAN layer under the given execution path."""
    ci, co = layer.c_in, layer.c_out
    weights = BYTES * (layer.w_k.size + layer.w_m.size + (0 if layer.beta is None else layer.beta.size))
    io_bytes = BYTES * (ci * h * w + co * ho * wo)
    if layer.norm is not None:
        io_bytes += 2 * BYTES * ci * h * w
    if layer.mode == "elementwise" or path == "decoupled":
        # expansion written then read, pointwise result written then read
        inter = 2 * expansion_bytes(1, ci, layer.degree, h, w) + 2 * BYTES * co * h * w
    elif path == "direct":
        inter = 2 * BYTES * co * ci * (h + 2 * layer.padding) * (w + 2 * layer.padding)
    else:
        inter = 0
    return weights + io_bytes + inter


# -- model walk ----------------------------------------------------------------


def _trace(model: LightResKanModel, input_shape) -> list[tuple[str, object, tuple, tuple]]:
    """(name, module, input shape, output shape) for every module call on one sample."""
    names = {id(m): n for n, m in model.named_modules()}
    calls = []

    def hook(module, args, out):
        if args and isinstance(args[0], Tensor):
            calls.append((names.get(id(module), "?"), module, args[0].shape, out.shape))

    c, h, w = input_shape
    was_training = model.training
    model.eval()
    try:
        with no_grad(), call_hook(hook):
            model(Tensor(np.zeros((1, c, h, w), dtype=model.fc.weight.dtype)))
    finally:
        model.train(was_training)
    return calls


def audit(model: LightResKanModel, input_shape, batch: int = 1, path: str | None = None) -> CostReport:
    """Per-layer parameters, FLOPs and bytes at ``input_shape`` = (C, H, W)."""
    if len(input_shape) != 3:
        raise ConfigurationError(f"input shape must be (C, H, W), got {input_shape}")
    path = path or model.config.path or "decoupled"
    if path not in SHARED_PATHS:
        raise ConfigurationError(f"unknown path {path!r}; valid: {SHARED_PATHS}")
    report = CostReport(input_shape=tuple(input_shape), batch=batch, path=path)
    rows = report.rows
    modules = dict(model.named_modules())
    pool_in = pre_pool = 0
    for name, m, ishape, oshape in _trace(model, input_shape):
        numel_in = int(np.prod(ishape[1:]))
        numel_out = int(np.prod(oshape[1:]))
        h, w = ishape[2:] if len(ishape) == 4 else (1, 1)
        ho, wo = oshape[2:] if len(oshape) == 4 else (1, 1)
        if isinstance(m, KanConvLayer):
            rows.append(CostRow(name, f"kan-{m.mode}", kan_params(m), kan_flops(m, h, w, ho, wo),
                                kan_bytes(m, h, w, ho, wo, path)))
        elif isinstance(m, Conv2d):
            rows.append(CostRow(name, "conv", m.c_out * m.c_in * m.k * m.k, conv_flops(m.c_in, m.c_out, m.k, ho, wo),
                                BYTES * (numel_in + numel_out + m.weight.size)))
        elif isinstance(m, BatchNorm2d):
            if name.endswith(".norm") and isinstance(modules.get(name[: -len(".norm")]), KanConvLayer):
                continue  # counted inside its KAN layer
            rows.append(CostRow(name, "bn", 2 * m.c, 2 * numel_in, BYTES * (numel_in + numel_out + 2 * m.c)))
            if name == "stem.norm":
                pre_pool = numel_out
        elif isinstance(m, Linear):
            d_out, d_in = m.weight.shape
            rows.append(CostRow(name, "linear", d_out * d_in + d_out, 2 * d_in * d_out + d_out,
                                BYTES * (d_in + d_out + m.weight.size + d_out)))
        elif isinstance(m, Stem):
            # stem fusion add, SiLU and the 3x3 max-pool
            flops = (pre_pool if m.kan is not None else 0) + 4 * pre_pool + 9 * numel_out
            rows.append(CostRow(name + ".act_pool", "elementwise", 0, flops, BYTES * (2 * pre_pool + numel_out)))
        elif isinstance(m, (KanBottleneck, KanBasicBlock, ConvBasicBlock)):
            extra = numel_out  # residual add
            if isinstance(m, ConvBasicBlock):
                extra += 2 * 4 * numel_out  # two SiLUs
            elif m.variant == "type1":
                extra += 4 * numel_in  # SiLU feeding the projection
            rows.append(CostRow(name + ".merge", "elementwise", 0, extra, BYTES * 3 * numel_out))
        elif name == "stage4":
            pool_in = numel_out
    rows.append(CostRow("head.pool", "pool", 0, pool_in, BYTES * (pool_in + model.feature_dim)))
    return report


def count_params(model: LightResKanModel, input_shape=(1, 64, 64)) -> CostReport:
    return audit(model, input_shape)


def enumerate_params(model: LightResKanModel) -> int:
    return sum(p.size for p in model.parameters())


def count_flops(model: LightResKanModel, input_shape, batch: int = 1) -> CostReport:
    return audit(model, input_shape, batch)


def estimate_mac(model: LightResKanModel, input_shape, batch: int, path: str) -> int:
    return audit(model, input_shape, batch, path).bytes_per_batch


def layer_mac(layer: KanConvLayer, n: int, h: int, w: int, path: str) -> int:
    """Bytes moved by a single KAN layer on a batch of ``n``."""
    ho = (h + 2 * layer.padding - layer.k) // layer.stride + 1
    wo = (w + 2 * layer.padding - layer.k) // layer.stride + 1
    return n * kan_bytes(layer, h, w, ho, wo, path)


# -- benchmark -----------------------------------------------------------------


BENCH_COLUMNS = ("path", "Cin", "Cout", "k", "H", "W", "N", "D", "median_us", "p10_us", "p90_us", "peak_bytes")


@dataclass(frozen=True)
class BenchConfig:
    c_in: int = 8
    c_out: int = 8
    k: int = 3
    h: int = 32
    w: int = 32
    n: int = 4
    degree: int = 3

    def layer(self, seed: int) -> KanConvLayer:
        return KanConvLayer(self.c_in, self.c_out, self.k, 1, self.k // 2, degree=self.degree,
                            prenorm=False, seed=seed)

    def input(self, seed: int) -> Tensor:
        rng = np.random.default_rng(seed)
        return Tensor(rng.standard_normal((self.n, self.c_in, self.h, self.w)).astype(np.float32))


@dataclass
class BenchResult:
    path: str
    config: BenchConfig
    median_us: float
    p10_us: float
    p90_us: float
    peak_bytes: int
    repetitions: int

    def row(self) -> list:
        c = self.config
        return [self.path, c.c_in, c.c_out, c.k, c.h, c.w, c.n, c.degree,
                f"{self.median_us:.1f}", f"{self.p10_us:.1f}", f"{self.p90_us:.1f}", self.peak_bytes]


def correctness_gate(config: BenchConfig, seed: int = 0, tol: float = 1e-6) -> dict:
    """Run every shared path on the same input; raise if any disagrees with direct."""
    layer, x = config.layer(seed), config.input(seed)
    with no_grad():
        outs = {p: kan_conv(x, layer, p).data for p in SHARED_PATHS}
    errs = {p: relative_error(outs[p], outs["direct"]) for p in SHARED_PATHS}
    bad = {p: e for p, e in errs.items() if e > tol}
    if bad:
        raise BenchmarkError(f"paths disagree with direct on {config}: {bad} (tolerance {tol})")
    return errs


def peak_transient_bytes(fn) -> int:
    """Peak bytes allocated (and tracked) during ``fn()`` above the starting level."""
    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base = tracemalloc.get_traced_memory()[0]
        fn()
        return tracemalloc.get_traced_memory()[1] - base
    finally:
        if not was_tracing:
            tracemalloc.stop()


def bench(path: str, config: BenchConfig, repetitions: int = 20, seed: int = 0, warmup: int = 3,
          gate: bool = True) -> BenchResult:
    if path not in SHARED_PATHS:
        raise ConfigurationError(f"unknown path {path!r}; valid: {SHARED_PATHS}")
    if repetitions < 20:
        raise ConfigurationError(f"benchmark needs >= 20 repetitions, got {repetitions}")
    if gate:
        correctness_gate(config, seed)
    layer, x = config.layer(seed), config.input(seed)

    def run():
        with no_grad():
            kan_conv(x, layer, path)

    for _ in range(warmup):
        run()
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter_ns()
        run()
        times.append((time.perf_counter_ns() - t0) / 1e3)
    peak = peak_transient_bytes(run)
    q = statistics.quantiles(times, n=10, method="inclusive")
    return BenchResult(path, config, statistics.median(times), q[0], q[-1], peak, repetitions)


def default_sweep() -> list[BenchConfig]:
    return [
        BenchConfig(c_in=c, c_out=c, k=k, h=hw, w=hw, n=2, degree=d)
        for c in (4, 16)
        for k in (1, 3, 5)
        for hw in (16, 32)
        for d in (1, 3)
    ]


def bench_csv(results: list[BenchResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for r in results:
        w.writerow(r.row())
    return buf.getvalue()
