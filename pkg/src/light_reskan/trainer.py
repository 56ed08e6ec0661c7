"""AdamW, training and evaluation loops, checkpoints and feature export."""

from __future__ import annotations

import csv
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .autograd import Parameter, no_grad, ops
from .data import Dataset, batch_iter
from .errors import ConfigurationError, IntegrityError, TrainingError
from .network import LightResKanModel, NetworkConfig, build
from .speckle import GammaNoiseSpec, apply as apply_speckle


# -- optimizer -----------------------------------------------------------------


@dataclass
class AdamWHyper:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class OptimizerState:
    hyper: AdamWHyper = field(default_factory=AdamWHyper)
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: list[tuple[str, Parameter]], state: OptimizerState) -> None:
    """One in-place AdamW update with decoupled weight decay and bias correction."""
    h = state.hyper
    for name, p in params:
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1 - h.beta1**t
    c2 = 1 - h.beta2**t
    for name, p in params:
        g = p.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= h.beta1
        m += (1 - h.beta1) * g
        v *= h.beta2
        v += (1 - h.beta2) * (g * g)
        if h.weight_decay:
            p.data *= 1 - h.lr * h.weight_decay
        p.data -= (h.lr * (m / c1) / (np.sqrt(v / c2) + h.eps)).astype(p.data.dtype)


# -- run config & metrics ------------------------------------------------------


@dataclass
class TrainRunConfig:
    lr: float = 5e-4
    batch_size: int = 16
    epochs: int = 200
    kshot_epochs: int = 500
    seed: int = 0
    eval_every: int = 1
    checkpoint_every: int = 0  # 0: only the final checkpoint
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    drop_last: bool = False
    eval_batch_size: int = 64
    bn_recalibration: int = 256  # training images used to re-estimate BN statistics; 0 disables

    def __post_init__(self):
        positive = ("lr", "batch_size", "eval_every", "eval_batch_size", "eps", "kshot_epochs")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"train.{name} must be positive, got {getattr(self, name)}")
        for name in ("epochs", "checkpoint_every", "weight_decay", "bn_recalibration"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"train.{name} must be >= 0, got {getattr(self, name)}")

    def hyper(self) -> AdamWHyper:
        return AdamWHyper(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray
    loss: float

    @property
    def total(self) -> int:
        return int(self.confusion.sum())


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    test_acc: float | None
    confusion: list | None = None


def confusion_matrix(labels: np.ndarray, preds: np.ndarray, k: int) -> np.ndarray:
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def evaluate(model: LightResKanModel, dataset: Dataset, noise: GammaNoiseSpec | None = None,
             batch_size: int = 64) -> EvalResult:
    """Eval-mode accuracy; ties in the logits resolve to the lowest class index."""
    was_training = model.training
    model.eval()
    k = dataset.num_classes
    cm = np.zeros((k, k), dtype=np.int64)
    loss_sum = 0.0
    try:
        with no_grad():
            for images, labels, ids in batch_iter(dataset, batch_size, with_ids=True):
                if noise is not None:
                    images.data[...] = apply_speckle(images.data, noise, ids=ids)
                logits = model(images)
                loss_sum += ops.softmax_cross_entropy(logits, labels).item() * len(labels)
                cm += confusion_matrix(labels, np.argmax(logits.data, axis=1), k)
    finally:
        model.train(was_training)
    total = cm.sum()
    return EvalResult(float(np.trace(cm) / total) if total else 0.0, cm, loss_sum / max(total, 1))


def recalibrate_batchnorm(model: LightResKanModel, dataset: Dataset, samples: int, batch_size: int = 64,
                          seed: int = 0) -> None:
    """Replace BN running statistics by averages over ``samples`` training images.

    Weights are frozen; each BN layer's statistics become the equal-weight mean
    of per-batch statistics, which tracks the current weights far better than
    the exponential moving average accumulated while they were changing.
    """
    from .nn import BatchNorm2d

    norms = [m for _, m in model.named_modules() if isinstance(m, BatchNorm2d)]
    if not norms or samples <= 0:
        return
    was_training = model.training
    model.eval()
    saved = [m.momentum for m in norms]
    idx = np.random.default_rng(seed).permutation(len(dataset))[: min(samples, len(dataset))]
    subset = dataset.subset(np.sort(idx))
    for m in norms:
        m.running_mean[...] = 0
        m.running_var[...] = 0
        object.__setattr__(m, "training", True)
    try:
        with no_grad():
            for i, (images, _) in enumerate(batch_iter(subset, batch_size), start=1):
                for m in norms:
                    m.momentum = 1.0 / i  # cumulative mean over batches
                model(images)
    finally:
        for m, mom in zip(norms, saved):
            m.momentum = mom
        model.train(was_training)


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"LRKANCKP"
VERSION = 1
_HEADER = struct.Struct("<8sIQII")  # magic, version, manifest length, manifest crc, payload crc


@dataclass
class Checkpoint:
    tensors: dict
    meta: dict

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(**self.meta["network"])

    def run_config(self) -> TrainRunConfig:
        return TrainRunConfig(**self.meta["run"])


def save_checkpoint(path, tensors: dict, meta: dict) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"tensors": entries, "meta": meta}, sort_keys=True).encode()
    payload = b"".join(chunks)
    header = _HEADER.pack(MAGIC, VERSION, len(manifest), zlib.crc32(manifest), zlib.crc32(payload))
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(header + manifest + payload)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise IntegrityError(f"{path}: truncated checkpoint header")
    magic, version, mlen, mcrc, pcrc = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint (bad magic {magic!r})")
    if version != VERSION:
        raise IntegrityError(f"{path}: checkpoint version {version} unsupported (expected {VERSION})")
    manifest = blob[_HEADER.size : _HEADER.size + mlen]
    if len(manifest) != mlen or zlib.crc32(manifest) != mcrc:
        raise IntegrityError(f"{path}: manifest checksum mismatch (file truncated or corrupt)")
    payload = blob[_HEADER.size + mlen :]
    if zlib.crc32(payload) != pcrc:
        raise IntegrityError(f"{path}: payload checksum mismatch (file truncated or corrupt)")
    doc = json.loads(manifest)
    tensors = {}
    for e in doc["tensors"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return Checkpoint(tensors, doc["meta"])


def model_tensors(model: LightResKanModel) -> dict:
    out = {f"param/{n}": p.data for n, p in model.named_parameters()}
    out.update({f"buffer/{n}": b for n, b in model.named_buffers()})
    return out


def restore_model(model: LightResKanModel, ckpt: Checkpoint) -> None:
    for n, p in model.named_parameters():
        key = f"param/{n}"
        if key not in ckpt.tensors or ckpt.tensors[key].shape != p.shape:
            raise IntegrityError(f"checkpoint lacks parameter {n!r} with shape {p.shape}")
        p.data[...] = ckpt.tensors[key]
    for n, b in model.named_buffers():
        b[...] = ckpt.tensors[f"buffer/{n}"]


def model_from_checkpoint(path) -> tuple[LightResKanModel, Checkpoint]:
    ckpt = load_checkpoint(path)
    model = build(ckpt.network_config(), ckpt.meta.get("model_seed", 0))
    restore_model(model, ckpt)
    model.eval()
    return model, ckpt


# -- training loop -------------------------------------------------------------


def derive_seed(seed: int, label: str, counter: int = 0) -> int:
    key = [seed, zlib.crc32(label.encode()), counter]
    return int(np.random.SeedSequence(key).generate_state(1)[0])


@dataclass
class TrainResult:
    history: list
    final: EvalResult | None
    best_acc: float | None
    best_epoch: int | None
    optimizer: OptimizerState


class Trainer:
    """One training stream: owns the model, optimizer and dropout RNG."""

    METRICS_HEADER = ("epoch", "train_loss", "test_acc")

    def __init__(self, model: LightResKanModel, run: TrainRunConfig, run_dir=None):
        self.model, self.run = model, run
        self.run_dir = Path(run_dir) if run_dir else None
        self.opt = OptimizerState(run.hyper())
        self.params = list(model.named_parameters())
        self.history: list[EpochMetrics] = []
        self.epoch = 0
        model.dropout.rng = np.random.default_rng(derive_seed(run.seed, "dropout"))

    # persistence
    def _meta(self) -> dict:
        return {
            "software": f"light_reskan {__version__}",
            "network": asdict(self.model.config),
            "run": asdict(self.run),
            "model_seed": self.model.seed,
            "epoch": self.epoch,
            "optimizer": {"step": self.opt.step, **asdict(self.opt.hyper)},
            "rng": {"dropout": self.model.dropout.rng.bit_generator.state},
            "history": [asdict(h) for h in self.history],
        }

    def checkpoint(self, path) -> None:
        tensors = model_tensors(self.model)
        for n in self.opt.m:
            tensors[f"opt.m/{n}"] = self.opt.m[n]
            tensors[f"opt.v/{n}"] = self.opt.v[n]
        save_checkpoint(path, tensors, self._meta())

    def resume(self, path) -> None:
        ckpt = load_checkpoint(path)
        restore_model(self.model, ckpt)
        self.opt.step = ckpt.meta["optimizer"]["step"]
        self.opt.m = {k[6:]: v.copy() for k, v in ckpt.tensors.items() if k.startswith("opt.m/")}
        self.opt.v = {k[6:]: v.copy() for k, v in ckpt.tensors.items() if k.startswith("opt.v/")}
        self.model.dropout.rng.bit_generator.state = ckpt.meta["rng"]["dropout"]
        self.history = [EpochMetrics(**h) for h in ckpt.meta["history"]]
        self.epoch = ckpt.meta["epoch"]

    def _append_metrics(self, m: EpochMetrics) -> None:
        if self.run_dir is None:
            return
        path = self.run_dir / "metrics.csv"
        new = not path.exists()
        with path.open("a", newline="") as f:
            w = csv.writer(f)
            if new:
                w.writerow(self.METRICS_HEADER)
            w.writerow([m.epoch, repr(m.train_loss), "" if m.test_acc is None else repr(m.test_acc)])

    def recalibrate(self, train: Dataset) -> None:
        if self.run.bn_recalibration:
            recalibrate_batchnorm(self.model, train, self.run.bn_recalibration, self.run.eval_batch_size,
                                  derive_seed(self.run.seed, "bn-recalibration", self.epoch))

    # loop
    def train_epoch(self, train: Dataset) -> float:
        self.model.train()
        total, count = 0.0, 0
        shuffle = derive_seed(self.run.seed, "shuffle", self.epoch)
        for images, labels in batch_iter(train, self.run.batch_size, shuffle, self.run.drop_last):
            loss = ops.softmax_cross_entropy(self.model(images), labels)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(
                    f"loss became {value} at epoch {self.epoch + 1}, optimizer step {self.opt.step + 1}; "
                    "the last saved checkpoint is left untouched"
                )
            self.model.zero_grad()
            loss.backward()
            adamw_step(self.params, self.opt)
            total += value * len(labels)
            count += len(labels)
        return total / max(count, 1)

    def fit(self, train: Dataset, test: Dataset | None, epochs: int | None = None,
            on_epoch: Callable[[EpochMetrics], None] | None = None) -> TrainResult:
        if len(train) == 0:
            raise ConfigurationError("training set is empty")
        epochs = self.run.epochs if epochs is None else epochs
        final = None
        while self.epoch < epochs:
            loss = self.train_epoch(train)
            self.epoch += 1
            acc = cm = None
            if test is not None and (self.epoch % self.run.eval_every == 0 or self.epoch == epochs):
                self.recalibrate(train)
                final = evaluate(self.model, test, batch_size=self.run.eval_batch_size)
                acc, cm = final.accuracy, final.confusion.tolist()
            m = EpochMetrics(self.epoch, loss, acc, cm)
            self.history.append(m)
            self._append_metrics(m)
            if on_epoch:
                on_epoch(m)
            if self.run_dir and self.run.checkpoint_every and self.epoch % self.run.checkpoint_every == 0:
                self.checkpoint(self.run_dir / f"epoch{self.epoch:04d}.ckpt")
        if final is None and self.epoch > 0:
            self.recalibrate(train)
        if test is not None and final is None:
            final = evaluate(self.model, test, batch_size=self.run.eval_batch_size)
        scored = [h for h in self.history if h.test_acc is not None]
        best = max(scored, key=lambda h: h.test_acc) if scored else None
        if self.run_dir:
            self.checkpoint(self.run_dir / "final.ckpt")
            summary = {
                "epochs": self.epoch,
                "final_test_acc": None if final is None else final.accuracy,
                "best_test_acc": None if best is None else best.test_acc,
                "best_epoch": None if best is None else best.epoch,
                "final_confusion": None if final is None else final.confusion.tolist(),
                "optimizer": asdict(self.opt.hyper),
            }
            (self.run_dir / "summary.json").write_text(json.dumps(summary, indent=2))
        return TrainResult(self.history, final, best and best.test_acc, best and best.epoch, self.opt)


def train(model: LightResKanModel, train_set: Dataset, test_set: Dataset | None, run: TrainRunConfig,
          run_dir=None, epochs: int | None = None) -> TrainResult:
    return Trainer(model, run, run_dir).fit(train_set, test_set, epochs)


# -- features ------------------------------------------------------------------


def compute_features(model: LightResKanModel, dataset: Dataset, batch_size: int = 64) -> np.ndarray:
    was_training = model.training
    model.eval()
    feats = []
    try:
        with no_grad():
            for images, _ in batch_iter(dataset, batch_size):
                feats.append(model.extract_features(images).data)
    finally:
        model.train(was_training)
    return np.concatenate(feats)


def export_features(model: LightResKanModel, dataset: Dataset, path) -> np.ndarray:
    """CSV rows ``sample_id,label,f_0..``; 9 significant digits round-trip float32 exactly."""
    feats = compute_features(model, dataset)
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample_id", "label"] + [f"f_{i}" for i in range(feats.shape[1])])
        for sid, label, row in zip(dataset.ids, dataset.labels, feats):
            w.writerow([int(sid), int(label)] + [f"{v:.9g}" for v in row])
    return feats


def read_features(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with Path(path).open() as f:
        rows = list(csv.reader(f))[1:]
    ids = np.array([int(r[0]) for r in rows])
    labels = np.array([int(r[1]) for r in rows])
    feats = np.array([[np.float32(v) for v in r[2:]] for r in rows], dtype=np.float32)
    return ids, labels, feats


def separation_ratio(features: np.ndarray, labels: np.ndarray) -> float:
    """Mean inter-centroid distance over mean distance of samples to their own centroid."""
    classes = np.unique(labels)
    cents = np.stack([features[labels == c].mean(0) for c in classes])
    inter = [np.linalg.norm(a - b) for i, a in enumerate(cents) for b in cents[i + 1 :]]
    intra = np.mean([np.linalg.norm(features[labels == c] - cents[i], axis=1).mean() for i, c in enumerate(classes)])
    return float(np.mean(inter) / intra)
