"""Light-ResKAN classifier assembled from a declarative :class:`NetworkConfig`.

Layout: a fused stem (ordinary 7x7 conv + shared KAN 7x7 conv, summed, then
BN, SiLU and a 3x3 max-pool), four stages of residual blocks, global average
pooling, dropout and a linear head.

The ablation ladder is cumulative: ``baseline`` -> ``+kan`` -> ``+gram`` ->
``+bottleneck`` -> ``+shared``.  A config whose switches are not a prefix of
that ladder is rejected.
"""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .autograd import Tensor, ops
from .errors import ConfigurationError
from .kan import KanConvLayer
from .nn import BatchNorm2d, Conv2d, Dropout, Linear, Module, Sequential

ABLATION_ROWS = ("baseline", "+kan", "+gram", "+bottleneck", "+shared")
MIN_SPATIAL = 32


@dataclass
class NetworkConfig:
    num_classes: int = 10
    in_channels: int = 1
    stem_channels: int = 32
    stem_kernel: int = 7
    stem_stride: int = 2
    stage_blocks: tuple = (3, 4, 6, 3)
    widths: tuple = (16, 32, 64, 128)
    expansion: int = 4
    degree: int = 3
    dropout: float = 0.1
    kan_conv: bool = True
    basis: str = "gram"
    bottleneck: bool = True
    shared_activation: bool = True
    path: str | None = None

    def __post_init__(self):
        self.stage_blocks = tuple(int(b) for b in self.stage_blocks)
        self.widths = tuple(int(w) for w in self.widths)
        self.validate()

    def validate(self) -> None:
        def bad(name, msg):
            raise ConfigurationError(f"network.{name}: {msg}")

        if len(self.stage_blocks) != 4:
            bad("stage_blocks", f"expected 4 stages, got {len(self.stage_blocks)}")
        if any(b < 1 for b in self.stage_blocks):
            bad("stage_blocks", "every stage needs at least one block")
        if len(self.widths) != 4:
            bad("widths", f"expected 4 bottleneck widths, got {len(self.widths)}")
        if self.widths[0] < 1 or any(b <= a for a, b in zip(self.widths, self.widths[1:])):
            bad("widths", f"must be positive and strictly increasing, got {list(self.widths)}")
        if self.expansion < 1:
            bad("expansion", f"must be >= 1, got {self.expansion}")
        if self.num_classes < 2:
            bad("num_classes", f"must be >= 2, got {self.num_classes}")
        if self.in_channels < 1 or self.stem_channels < 1:
            bad("stem_channels", "channel counts must be positive")
        if self.degree < 1:
            bad("degree", f"must be >= 1, got {self.degree}")
        if not 0 <= self.dropout < 1:
            bad("dropout", f"must lie in [0, 1), got {self.dropout}")
        if self.basis not in ("gram", "monomial", "spline"):
            bad("basis", f"unknown basis {self.basis!r}; valid: gram, monomial, spline")
        self.ablation_level()

    def ablation_level(self) -> int:
        """Index into ABLATION_ROWS; raises if the switches skip a rung."""
        rungs = [self.kan_conv, self.basis != "monomial", self.bottleneck, self.shared_activation]
        if not self.kan_conv:
            rungs[1] = False
        level = 0
        while level < 4 and rungs[level]:
            level += 1
        if any(rungs[level:]):
            on = [n for n, r in zip(("kan_conv", "gram_basis", "bottleneck", "shared_activation"), rungs) if r]
            raise ConfigurationError(
                f"network: switches {on} are not cumulative; only the ladder "
                f"{' -> '.join(ABLATION_ROWS)} is supported"
            )
        return level

    @property
    def out_widths(self) -> tuple:
        if self.bottleneck:
            return tuple(self.expansion * w for w in self.widths)
        return self.widths

    @property
    def mode(self) -> str:
        return "shared" if self.shared_activation else "elementwise"

    def replace(self, **changes) -> "NetworkConfig":
        return dataclasses.replace(self, **changes)


def tiny_config(num_classes: int = 4, **overrides) -> NetworkConfig:
    base = dict(num_classes=num_classes, stem_channels=16, widths=(8, 16, 32, 64), expansion=2)
    base.update(overrides)
    return NetworkConfig(**base)


def apply_ablation(config: NetworkConfig, row: str) -> NetworkConfig:
    if row not in ABLATION_ROWS:
        raise ConfigurationError(f"unknown ablation row {row!r}; valid: {list(ABLATION_ROWS)}")
    level = ABLATION_ROWS.index(row)
    basis = config.basis if config.basis != "monomial" else "gram"
    return config.replace(
        kan_conv=level >= 1,
        basis=basis if level >= 2 else "monomial",
        bottleneck=level >= 3,
        shared_activation=level >= 4,
    )


def layer_seed(seed: int, label: str) -> int:
    """Stable per-layer seed derived from the model seed and the layer's name."""
    return int(np.random.SeedSequence([seed, zlib.crc32(label.encode())]).generate_state(1)[0])


class _Builder:
    def __init__(self, cfg: NetworkConfig, seed: int, dtype):
        self.cfg, self.seed, self.dtype = cfg, seed, dtype

    def kan(self, label, c_in, c_out, k, stride=1, padding=0, mode=None):
        return KanConvLayer(
            c_in, c_out, k, stride, padding,
            mode=mode or self.cfg.mode, degree=self.cfg.degree, basis=self.cfg.basis,
            path=self.cfg.path if (mode or self.cfg.mode) == "shared" else None,
            dtype=self.dtype, seed=layer_seed(self.seed, label),
        )

    def conv(self, label, c_in, c_out, k, stride=1, padding=0):
        rng = np.random.default_rng(layer_seed(self.seed, label))
        return Conv2d(c_in, c_out, k, stride, padding, rng=rng, dtype=self.dtype)


class Stem(Module):
    def __init__(self, b: _Builder):
        super().__init__()
        cfg = b.cfg
        k, s, c = cfg.stem_kernel, cfg.stem_stride, cfg.stem_channels
        self.conv = b.conv("stem.conv", cfg.in_channels, c, k, s, k // 2)
        if cfg.kan_conv:
            self.kan = b.kan("stem.kan", cfg.in_channels, c, k, s, k // 2)
        else:
            object.__setattr__(self, "kan", None)
        self.norm = BatchNorm2d(c, dtype=b.dtype)

    def forward(self, x):
        y = self.conv(x)
        if self.kan is not None:
            y = y + self.kan(x)
        y = ops.silu(self.norm(y))
        return ops.pool2d(y, "max", 3, 2, 1)


class KanBottleneck(Module):
    """Branch 1: phi1x1 -> phi3x3 -> phi1x1.  Branch 2: SiLU -> phi1x1 (type1) or identity (type2)."""

    def __init__(self, b: _Builder, label, c_in, width, c_out, stride, variant):
        super().__init__()
        if variant == "type2" and (c_in != c_out or stride != 1):
            raise ConfigurationError(
                f"{label}: type2 block needs c_in == c_out and stride 1, got {c_in}->{c_out} stride {stride}"
            )
        self.variant = variant
        self.reduce = b.kan(label + ".reduce", c_in, width, 1)
        self.conv3x3 = b.kan(label + ".conv3x3", width, width, 3, stride, 1)
        self.expand = b.kan(label + ".expand", width, c_out, 1)
        if variant == "type1":
            self.shortcut = b.kan(label + ".shortcut", c_in, c_out, 1, stride)

    def branch1(self, x):
        return self.expand(self.conv3x3(self.reduce(x)))

    def forward(self, x):
        skip = self.shortcut(ops.silu(x)) if self.variant == "type1" else x
        return self.branch1(x) + skip


class KanBasicBlock(Module):
    """Two phi3x3 layers with the same skip convention as the bottleneck."""

    def __init__(self, b: _Builder, label, c_in, width, c_out, stride, variant):
        super().__init__()
        self.variant = variant
        self.conv3x3 = b.kan(label + ".conv3x3", c_in, c_out, 3, stride, 1)
        self.conv3x3b = b.kan(label + ".conv3x3b", c_out, c_out, 3, 1, 1)
        if variant == "type1":
            self.shortcut = b.kan(label + ".shortcut", c_in, c_out, 1, stride)

    def branch1(self, x):
        return self.conv3x3b(self.conv3x3(x))

    def forward(self, x):
        skip = self.shortcut(ops.silu(x)) if self.variant == "type1" else x
        return self.branch1(x) + skip


class ConvBasicBlock(Module):
    """Ordinary residual block used by the baseline row (no KAN anywhere)."""

    def __init__(self, b: _Builder, label, c_in, width, c_out, stride, variant):
        super().__init__()
        self.variant = variant
        self.conv3x3 = b.conv(label + ".conv3x3", c_in, c_out, 3, stride, 1)
        self.norm1 = BatchNorm2d(c_out, dtype=b.dtype)
        self.conv3x3b = b.conv(label + ".conv3x3b", c_out, c_out, 3, 1, 1)
        self.norm2 = BatchNorm2d(c_out, dtype=b.dtype)
        if variant == "type1":
            self.shortcut = b.conv(label + ".shortcut", c_in, c_out, 1, stride)
            self.shortcut_norm = BatchNorm2d(c_out, dtype=b.dtype)

    def branch1(self, x):
        return self.norm2(self.conv3x3b(ops.silu(self.norm1(self.conv3x3(x)))))

    def forward(self, x):
        skip = self.shortcut_norm(self.shortcut(x)) if self.variant == "type1" else x
        return ops.silu(self.branch1(x) + skip)


def _block_class(cfg: NetworkConfig):
    if not cfg.kan_conv:
        return ConvBasicBlock
    return KanBottleneck if cfg.bottleneck else KanBasicBlock


class LightResKanModel(Module):
    def __init__(self, config: NetworkConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        config.validate()
        object.__setattr__(self, "config", config)
        object.__setattr__(self, "seed", seed)
        b = _Builder(config, seed, dtype)
        self.stem = Stem(b)
        block = _block_class(config)
        c_in = config.stem_channels
        for i, (n_blocks, width, c_out) in enumerate(zip(config.stage_blocks, config.widths, config.out_widths)):
            stride = 1 if i == 0 else 2
            blocks = []
            for j in range(n_blocks):
                label = f"stage{i + 1}.block{j}"
                variant = "type1" if j == 0 else "type2"
                blocks.append(block(b, label, c_in, width, c_out, stride if j == 0 else 1, variant))
                c_in = c_out
            setattr(self, f"stage{i + 1}", Sequential(*blocks, prefix="block"))
        self.dropout = Dropout(config.dropout, np.random.default_rng(layer_seed(seed, "dropout")))
        self.fc = Linear(c_in, config.num_classes, np.random.default_rng(layer_seed(seed, "fc")), dtype)
        self.feature_dim = c_in
        self.assign_names()

    def layers(self) -> list[tuple[str, Module]]:
        return [(n, m) for n, m in self.named_modules() if n]

    def kan_layers(self) -> Iterator[tuple[str, KanConvLayer]]:
        return ((n, m) for n, m in self.named_modules() if isinstance(m, KanConvLayer))

    def stages(self):
        return [self.stage1, self.stage2, self.stage3, self.stage4]

    def _check(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ConfigurationError(
                f"expected input [N, {self.config.in_channels}, H, W], got {list(x.shape)}"
            )
        if min(x.shape[2:]) < MIN_SPATIAL:
            raise ConfigurationError(
                f"input spatial size {x.shape[2]}x{x.shape[3]} too small; H and W must be >= {MIN_SPATIAL}"
            )

    def extract_features(self, x: Tensor) -> Tensor:
        """Post-global-average-pool, pre-dropout features [N, feature_dim]."""
        self._check(x)
        y = self.stem(x)
        for stage in self.stages():
            y = stage(y)
        pooled = ops.pool2d(y, "global_avg")
        return pooled.reshape((pooled.shape[0], pooled.shape[1]))

    def forward(self, x: Tensor) -> Tensor:
        return self.fc(self.dropout(self.extract_features(x)))


def build(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> LightResKanModel:
    return LightResKanModel(config, seed, dtype)


def spatial_ladder(config: NetworkConfig, h: int) -> list[int]:
    """Spatial size after stem conv, max-pool and each stage."""
    k, s = config.stem_kernel, config.stem_stride
    sizes = [(h + 2 * (k // 2) - k) // s + 1]
    sizes.append((sizes[-1] + 2 - 3) // 2 + 1)
    for i in range(4):
        stride = 1 if i == 0 else 2
        sizes.append((sizes[-1] + 2 - 3) // stride + 1)
    return sizes
