"""Multiplicative Gamma speckle: I = R * F with F ~ Gamma(alpha, theta).

Two parametrizations share one spec type.  In ``scale`` form the second
parameter is theta (mean alpha*theta); in ``rate`` form it is the rate
(mean alpha/rate).  Scale is the default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError, UsageError

PARAMETRIZATIONS = ("scale", "rate")

PRESETS = {
    "weak": (3.0, 0.1),
    "medium": (1.0, 0.5),
    "strong": (0.5, 2.0),
}


@dataclass(frozen=True)
class GammaNoiseSpec:
    alpha: float
    scale_or_rate: float
    parametrization: str = "scale"
    seed: int = 0

    def __post_init__(self):
        if not (self.alpha > 0 and self.scale_or_rate > 0):
            raise ConfigurationError(
                f"gamma parameters must be positive, got alpha={self.alpha}, {self.parametrization}={self.scale_or_rate}"
            )
        if self.parametrization not in PARAMETRIZATIONS:
            raise ConfigurationError(
                f"gamma parametrization must be one of {PARAMETRIZATIONS}, got {self.parametrization!r}"
            )

    @property
    def theta(self) -> float:
        """Scale parameter, whichever parametrization was given."""
        return self.scale_or_rate if self.parametrization == "scale" else 1.0 / self.scale_or_rate

    @property
    def mean(self) -> float:
        return self.alpha * self.theta

    @property
    def variance(self) -> float:
        return self.alpha * self.theta**2

    def with_seed(self, seed: int) -> "GammaNoiseSpec":
        return GammaNoiseSpec(self.alpha, self.scale_or_rate, self.parametrization, seed)


def preset(level: str, parametrization: str = "scale", seed: int = 0) -> GammaNoiseSpec:
    try:
        alpha, second = PRESETS[level]
    except KeyError:
        raise UsageError(f"unknown noise level {level!r}; valid: {', '.join(PRESETS)}") from None
    return GammaNoiseSpec(alpha, second, parametrization, seed)


def gamma_pdf(x, spec: GammaNoiseSpec):
    """Density at ``x`` (scalar or array) under this noise model."""
    arr = np.asarray(x, dtype=np.float64)
    if np.any(~(arr > 0)):
        raise DomainError("gamma density is defined for x > 0 only")
    a, theta = spec.alpha, spec.theta
    log_pdf = (a - 1) * np.log(arr) - arr / theta - math.lgamma(a) - a * math.log(theta)
    out = np.exp(log_pdf)
    return float(out) if np.ndim(x) == 0 else out


def _standard_gamma(rng: np.random.Generator, alpha: float, n: int) -> np.ndarray:
    """Unit-scale Gamma(alpha) draws by squeeze-and-reject, boosted for alpha < 1."""
    boost = alpha < 1
    a = alpha + 1.0 if boost else alpha
    d = a - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    out = np.empty(n)
    filled = 0
    while filled < n:
        need = n - filled
        # acceptance is above 95% for every a >= 1, so a small margin avoids extra rounds
        m = need + need // 16 + 16
        z = rng.standard_normal(m)
        u = rng.random(m)
        v = 1.0 + c * z
        ok = v > 0
        v = v * v * v
        with np.errstate(divide="ignore", invalid="ignore"):
            z2 = z * z
            squeeze = u < 1.0 - 0.0331 * z2 * z2
            full = np.log(u) < 0.5 * z2 + d * (1.0 - v + np.log(v))
        accept = ok & (squeeze | full)
        got = (d * v)[accept][:need]
        out[filled : filled + got.size] = got
        filled += got.size
    if boost:
        out *= rng.random(n) ** (1.0 / alpha)
    return out


def sample_field(shape, spec: GammaNoiseSpec, stream: int | None = None) -> np.ndarray:
    """i.i.d. positive factors of ``shape``; ``stream`` mixes a counter into the seed."""
    key = [spec.seed] if stream is None else [spec.seed, stream]
    rng = np.random.default_rng(np.random.SeedSequence(key))
    n = int(np.prod(shape))
    field = _standard_gamma(rng, spec.alpha, n) * spec.theta
    # underflow at tiny alpha could produce exact zeros; keep factors strictly positive
    np.maximum(field, np.finfo(np.float64).tiny, out=field)
    return field.reshape(shape)


def apply(images: np.ndarray, spec: GammaNoiseSpec, ids=None, field: np.ndarray | None = None,
          clip: bool = True) -> np.ndarray:
    """Speckle a batch [N, ...] of images with values in [0, 1].

    With ``ids`` each image draws its own field from stream ``ids[i]``, so the
    result does not depend on how a dataset is split into batches.
    """
    r = np.asarray(images)
    if field is None:
        if ids is None:
            field = sample_field(r.shape, spec)
        else:
            ids = list(ids)
            if len(ids) != r.shape[0]:
                raise UsageError(f"got {len(ids)} ids for a batch of {r.shape[0]} images")
            field = np.stack([sample_field(r.shape[1:], spec, stream=int(i)) for i in ids])
    out = r * field
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(r.dtype if r.dtype.kind == "f" else np.float64, copy=False)
