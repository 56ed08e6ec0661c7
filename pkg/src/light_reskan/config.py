"""Run configuration: a small ``key = value`` grammar with sections and dotted keys.

Every setting has one dotted name (``network.degree``, ``train.lr``, ...). A file
may spell it fully or inside a ``[network]`` section; command-line overrides use
the same names. Parsing is hand-rolled so that every error can cite its line.
"""

from __future__ import annotations

import dataclasses
import difflib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import RECIPES, SyntheticSpec
from .errors import ConfigurationError, UsageError
from .kan import SHARED_PATHS as AUDIT_PATHS
from .network import ABLATION_ROWS, NetworkConfig, apply_ablation, tiny_config
from .speckle import PRESETS, GammaNoiseSpec
from .trainer import TrainRunConfig


@dataclass
class DataConfig:
    kind: str = "synthetic"
    root: str | None = None  # None: synthesize in memory from the fields below
    num_classes: int = 4
    train_per_class: int = 200
    test_per_class: int = 100
    size: int = 64
    speckle_alpha: float = 8.0
    speckle_scale: float = 0.125
    gain_range: tuple = (0.1, 1.0)
    blobs: int = 4

    def synthetic_spec(self, seed: int) -> SyntheticSpec:
        return SyntheticSpec(self.num_classes, self.train_per_class, self.test_per_class, self.size,
                             GammaNoiseSpec(self.speckle_alpha, self.speckle_scale), seed, self.blobs,
                             tuple(self.gain_range))


@dataclass
class NoiseConfig:
    level: str = "clean"
    parametrization: str = "scale"


@dataclass
class AuditConfig:
    input_size: int = 112
    batch: int = 16
    path: str = "decoupled"
    emit: str = "table"


@dataclass
class KShotConfig:
    k: tuple = (1, 5, 10)
    epochs: int | None = None  # None: train.kshot_epochs


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs"


CHOICES = {
    "network.preset": ("paper", "tiny"),
    "network.ablation": ABLATION_ROWS,
    "network.mode": ("shared", "elementwise"),
    "network.basis": ("gram", "monomial", "spline"),
    "network.path": tuple(AUDIT_PATHS),
    "data.kind": tuple(sorted(RECIPES)),
    "noise.level": ("clean",) + tuple(PRESETS),
    "noise.parametrization": ("scale", "rate"),
    "audit.path": tuple(AUDIT_PATHS),
    "audit.emit": ("csv", "table"),
}

# settings that are not dataclass fields: (default, type)
_VIRTUAL = {
    "network.preset": ("paper", str),
    "network.ablation": (None, str),
    "network.mode": ("shared", str),
}

_SECTIONS = {
    "network": NetworkConfig,
    "train": TrainRunConfig,
    "data": DataConfig,
    "noise": NoiseConfig,
    "audit": AuditConfig,
    "kshot": KShotConfig,
    "run": RunConfig,
}


def _schema() -> dict:
    """dotted key -> (default, kind) where kind is bool/int/float/str/tuple/'int?'/'str?'."""
    out = {}
    for section, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            if (section, f.name) in (("network", "shared_activation"), ("train", "seed")):
                continue  # spelled network.mode; every seed derives from run.seed
            default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
            if default is None:
                kind = "int?" if "int" in str(f.type) else "str?"
            else:
                kind = type(default)
            out[f"{section}.{f.name}"] = (default, kind)
    for key, (default, typ) in _VIRTUAL.items():
        out[key] = (default, "str?" if default is None else typ)
    return dict(sorted(out.items()))


SCHEMA = _schema()

_TRUE, _FALSE = {"true", "yes", "on", "1"}, {"false", "no", "off", "0"}


def _coerce(key: str, raw: str, where: str):
    _, kind = SCHEMA[key]
    text = raw.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        text = text[1:-1]
    try:
        if kind in ("int?", "str?") and text.lower() in ("", "none"):
            return None
        if kind is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError("expected true/false")
        if kind is int or kind == "int?":
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            items = [t.strip() for t in text.strip("()[]").split(",") if t.strip()]
            if not items:
                raise ValueError("expected a comma-separated list")
            nums = [float(t) for t in items]
            return tuple(int(v) if v.is_integer() and "." not in t else v for v, t in zip(nums, items))
    except ValueError as exc:
        expected = {bool: "boolean", int: "integer", float: "number", tuple: "list of numbers",
                    "int?": "integer or none"}.get(kind, str(kind))
        raise UsageError(f"{where}: {key} expects {expected}, got {raw.strip()!r} ({exc})") from None
    if key in CHOICES and text not in CHOICES[key]:
        close = difflib.get_close_matches(text, CHOICES[key], n=1)
        hint = f"; did you mean {close[0]!r}?" if close else ""
        raise UsageError(f"{where}: {key} = {text!r} is not one of {list(CHOICES[key])}{hint}")
    return text


def _check_key(key: str, where: str) -> None:
    if key not in SCHEMA:
        close = difflib.get_close_matches(key, SCHEMA, n=3)
        hint = f" (did you mean {', '.join(close)}?)" if close else ""
        valid = ", ".join(SCHEMA)
        raise UsageError(f"{where}: unknown key {key!r}{hint}; valid keys: {valid}")


def parse_text(text: str, source: str = "<config>") -> dict:
    """Parse config text into ``{dotted_key: value}``; values are already typed."""
    values, section = {}, ""
    for lineno, line in enumerate(text.splitlines(), start=1):
        where = f"{source}:{lineno}"
        stripped = line.split("#", 1)[0].strip()
        if not stripped or stripped.startswith(";"):
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise UsageError(f"{where}: malformed section header {stripped!r}")
            section = stripped[1:-1].strip()
            if section and section not in _SECTIONS:
                close = difflib.get_close_matches(section, _SECTIONS, n=1)
                hint = f"; did you mean [{close[0]}]?" if close else ""
                raise UsageError(f"{where}: unknown section [{section}]{hint}")
            continue
        if "=" not in stripped:
            raise UsageError(f"{where}: expected 'key = value', got {stripped!r}")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        full = f"{section}.{key}" if section and not key.startswith(section + ".") else key
        _check_key(full, where)
        if full in values:
            raise UsageError(f"{where}: {full} is set twice")
        values[full] = _coerce(full, raw, f"{where}: {line.strip()!r}")
    return values


def parse_overrides(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise UsageError(f"--set {pair!r}: expected key=value")
        key, raw = (s.strip() for s in pair.split("=", 1))
        _check_key(key, "--set")
        out[key] = _coerce(key, raw, f"--set {pair!r}")
    return out


def load_settings(path) -> dict:
    """Read a config file, or the ``config`` block of a run manifest (``*.json``)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    if path.suffix == ".json":
        try:
            flat = json.loads(text)["config"]
        except (ValueError, KeyError):
            raise UsageError(f"{path}: not a run manifest (no 'config' object)") from None
        out = {}
        for key, value in flat.items():
            _check_key(key, str(path))
            out[key] = tuple(value) if isinstance(value, list) else value
        return out
    return parse_text(text, str(path))


@dataclass
class Resolved:
    network: NetworkConfig
    train: TrainRunConfig
    data: DataConfig
    noise: NoiseConfig
    audit: AuditConfig
    kshot: KShotConfig
    run: RunConfig
    explicit: frozenset = field(default_factory=frozenset)
    settings: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.run.seed

    def flat(self) -> dict:
        """Every key with its effective value; enough to rebuild this object."""
        out = {}
        for key in SCHEMA:
            section, name = key.split(".", 1)
            if key in _VIRTUAL:
                value = self.settings.get(key, SCHEMA[key][0])
                if key == "network.mode":
                    value = self.network.mode
            else:
                value = getattr(getattr(self, section), name)
            out[key] = list(value) if isinstance(value, tuple) else value
        return out

    def with_network(self, network: NetworkConfig) -> "Resolved":
        return dataclasses.replace(self, network=network)


def resolve(settings: dict | None = None) -> Resolved:
    """Combine typed settings with defaults; later layers should already be merged in."""
    settings = dict(settings or {})
    grouped: dict[str, dict] = {s: {} for s in _SECTIONS}
    for key, value in settings.items():
        if key in _VIRTUAL:
            continue
        section, name = key.split(".", 1)
        grouped[section][name] = value
    grouped["train"]["seed"] = settings.get("run.seed", RunConfig.seed)

    try:
        net_fields = grouped["network"]
        preset = settings.get("network.preset", "paper")
        base = tiny_config(num_classes=NetworkConfig.num_classes) if preset == "tiny" else NetworkConfig()
        row = settings.get("network.ablation")
        if row:
            base = apply_ablation(base, row)
        if "network.mode" in settings:
            net_fields["shared_activation"] = settings["network.mode"] == "shared"
        network = base.replace(**net_fields)
        sections = {s: _SECTIONS[s](**grouped[s]) for s in _SECTIONS if s != "network"}
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    except TypeError as exc:  # e.g. a tuple of the wrong arity reaching a dataclass
        raise UsageError(f"invalid configuration: {exc}") from None
    return Resolved(network=network, explicit=frozenset(settings), settings=settings, **sections)


def parse_config(path=None, overrides: dict | None = None) -> Resolved:
    """File first, then flag overrides; unknown keys and bad values raise ``UsageError``."""
    settings = load_settings(path) if path else {}
    settings.update(overrides or {})
    return resolve(settings)
