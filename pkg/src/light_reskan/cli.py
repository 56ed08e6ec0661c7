"""``light-reskan`` command line: one binary, one subcommand per artifact."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .audit import audit, bench, bench_csv, default_sweep, kan_poly_params
from .config import Resolved, _coerce, load_settings, parse_overrides, resolve
from .data import check_split_hygiene, generate_synthetic, kshot_subsample, load_split, save_synthetic
from .errors import LightResKanError, UsageError
from .network import ABLATION_ROWS, NetworkConfig, apply_ablation, build
from .speckle import PRESETS, preset
from .trainer import (
    Trainer,
    derive_seed,
    evaluate,
    export_features,
    model_from_checkpoint,
)

log = logging.getLogger("light_reskan")


# -- run directory & manifest --------------------------------------------------


class RunDir:
    """A per-invocation output directory holding exactly one ``manifest.json``."""

    def __init__(self, cfg: Resolved, command: str, argv: list[str], explicit: str | None = None):
        self.cfg, self.command, self.argv = cfg, command, argv
        if explicit:
            self.path = Path(explicit)
            if (self.path / "manifest.json").exists():
                raise UsageError(f"{self.path} already holds a run; choose another --run-dir")
        else:
            stamp = time.strftime("%Y%m%d-%H%M%S")
            base = Path(cfg.run.out) / f"{stamp}-seed{cfg.seed}-{command}"
            self.path, n = base, 1
            while self.path.exists():
                self.path = base.with_name(f"{base.name}-{n}")
                n += 1
        self.path.mkdir(parents=True, exist_ok=True)
        self.started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.outputs: list[str] = []
        self.extra: dict = {}
        self._write("running")

    def file(self, name: str) -> Path:
        self.outputs.append(name)
        return self.path / name

    def _write(self, status: str) -> None:
        doc = {
            "software": f"light_reskan {__version__}",
            "command": self.command,
            "argv": self.argv,
            "seed": self.cfg.seed,
            "status": status,
            "started": self.started,
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z") if status != "running" else None,
            "outputs": self.outputs,
            "config": self.cfg.flat(),
            **self.extra,
        }
        tmp = self.path / "manifest.json.tmp"
        tmp.write_text(json.dumps(doc, indent=2, sort_keys=True))
        tmp.replace(self.path / "manifest.json")

    def complete(self) -> None:
        self._write("complete")

    def fail(self, message: str) -> None:
        self.extra["error"] = message
        self._write("failed")


# -- shared helpers --------------------------------------------------------------


def load_data(cfg: Resolved):
    if cfg.data.root:
        train = load_split(cfg.data.root, "train", cfg.data.kind)
        test = load_split(cfg.data.root, "test", cfg.data.kind)
    else:
        if cfg.data.kind != "synthetic":
            raise UsageError(f"data.kind = {cfg.data.kind} needs data.root (or --data-root)")
        train, test = generate_synthetic(cfg.data.synthetic_spec(derive_seed(cfg.seed, "data")))
    if train.class_names != test.class_names:
        raise UsageError(f"train and test classes differ: {train.class_names} vs {test.class_names}")
    check_split_hygiene(train, test)
    return train, test


def network_for(cfg: Resolved, num_classes: int) -> NetworkConfig:
    """Honour an explicit class count; otherwise size the head to the data."""
    if "network.num_classes" in cfg.explicit:
        if cfg.network.num_classes != num_classes:
            raise UsageError(f"network.num_classes = {cfg.network.num_classes} but the data has {num_classes} classes")
        return cfg.network
    return cfg.network.replace(num_classes=num_classes)


def model_seed(cfg: Resolved) -> int:
    return derive_seed(cfg.seed, "model")


def log_epoch(m):
    acc = "-" if m.test_acc is None else f"{m.test_acc:.4f}"
    log.info("epoch %d  train_loss %.4f  test_acc %s", m.epoch, m.train_loss, acc)


def fit(cfg: Resolved, network: NetworkConfig, train, test, run_dir: Path, epochs: int | None = None):
    model = build(network, model_seed(cfg))
    return model, Trainer(model, cfg.train, run_dir).fit(train, test, epochs, on_epoch=log_epoch)


def poly_params(model) -> int:
    return sum(kan_poly_params(layer) for _, layer in model.kan_layers())


def _fmt(v):
    return "" if v is None else f"{v:.4f}"


# -- subcommands -------------------------------------------------------------------


def cmd_gen_data(cfg: Resolved, run: RunDir, args) -> None:
    if cfg.data.kind != "synthetic":
        raise UsageError("gen-data only produces the synthetic dataset (data.kind = synthetic)")
    dest = Path(args.dest) if args.dest else run.path / "data"
    spec = cfg.data.synthetic_spec(derive_seed(cfg.seed, "data"))
    train, test = save_synthetic(spec, dest)
    run.outputs.append(str(dest))
    print(f"wrote {len(train)} train / {len(test)} test images to {dest}")


def cmd_train(cfg: Resolved, run: RunDir, args) -> None:
    train, test = load_data(cfg)
    network = network_for(cfg, train.num_classes)
    run.cfg = cfg.with_network(network)
    _, result = fit(cfg, network, train, test, run.path)
    run.outputs += ["metrics.csv", "summary.json", "final.ckpt"]
    print(f"final test accuracy {_fmt(result.final.accuracy)}; best {_fmt(result.best_acc)} at epoch {result.best_epoch}")


def _checkpoint_config(args, overrides: dict) -> Resolved:
    """Config for commands that consume a checkpoint: default to the producing run's manifest."""
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint {ckpt} does not exist")
    settings = {}
    if args.config:
        settings = load_settings(args.config)
    elif (ckpt.parent / "manifest.json").is_file():
        settings = load_settings(ckpt.parent / "manifest.json")
    settings.update(overrides)
    return resolve(settings)


def _eval_model(cfg: Resolved, args):
    model, ckpt = model_from_checkpoint(args.checkpoint)
    train, test = load_data(cfg)
    if model.config.num_classes != test.num_classes:
        raise UsageError(f"checkpoint predicts {model.config.num_classes} classes, data has {test.num_classes}")
    return model, ckpt, train, test


def cmd_eval(cfg: Resolved, run: RunDir, args) -> None:
    model, _, _, test = _eval_model(cfg, args)
    level = cfg.noise.level
    noise = None if level == "clean" else preset(level, cfg.noise.parametrization, derive_seed(cfg.seed, "noise"))
    res = evaluate(model, test, noise)
    doc = {"checkpoint": str(args.checkpoint), "noise": level, "accuracy": res.accuracy, "loss": res.loss,
           "confusion": res.confusion.tolist(), "class_names": test.class_names}
    run.file("eval.json").write_text(json.dumps(doc, indent=2))
    print(f"{level} accuracy {res.accuracy:.4f} on {res.total} test images")


NOISE_COLUMNS = ("level", "alpha", "scale_or_rate", "parametrization", "accuracy")


def cmd_noise_eval(cfg: Resolved, run: RunDir, args) -> None:
    model, _, _, test = _eval_model(cfg, args)
    levels = ["clean"] + list(PRESETS) if cfg.noise.level == "clean" else ["clean", cfg.noise.level]
    seed = derive_seed(cfg.seed, "noise")
    rows = []
    for level in levels:
        spec = None if level == "clean" else preset(level, cfg.noise.parametrization, seed)
        acc = evaluate(model, test, spec).accuracy
        rows.append([level, "" if spec is None else spec.alpha, "" if spec is None else spec.scale_or_rate,
                     cfg.noise.parametrization, f"{acc:.6f}"])
        log.info("%s: %.4f", level, acc)
    with run.file("noise_eval.csv").open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(NOISE_COLUMNS)
        w.writerows(rows)
    for r in rows:
        print(f"{r[0]:<7} {r[-1]}")


ABLATION_COLUMNS = ("row", "final_acc", "best_acc", "params", "poly_params")


def cmd_ablate(cfg: Resolved, run: RunDir, args) -> None:
    train, test = load_data(cfg)
    base = network_for(cfg, train.num_classes)
    run.cfg = cfg.with_network(base)
    rows = []
    for i, row in enumerate(ABLATION_ROWS):
        log.info("ablation row %s", row)
        sub = run.path / f"{i}_{row.lstrip('+')}"
        sub.mkdir()
        model, res = fit(cfg, apply_ablation(base, row), train, test, sub)
        params = sum(p.size for _, p in model.named_parameters())
        rows.append([row, _fmt(res.final.accuracy), _fmt(res.best_acc), params, poly_params(model)])
        run.outputs.append(sub.name)
    with run.file("ablation.csv").open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        w.writerows(rows)
    for r in rows:
        print(f"{r[0]:<12} final {r[1]}  best {r[2]}  params {r[3]}  poly {r[4]}")


KSHOT_COLUMNS = ("k", "train_size", "test_size", "final_acc", "best_acc")


def cmd_kshot(cfg: Resolved, run: RunDir, args) -> None:
    train, test = load_data(cfg)
    network = network_for(cfg, train.num_classes)
    run.cfg = cfg.with_network(network)
    epochs = cfg.kshot.epochs if cfg.kshot.epochs is not None else cfg.train.kshot_epochs
    rows = []
    for k in cfg.kshot.k:
        subset = kshot_subsample(train, int(k), derive_seed(cfg.seed, "kshot", int(k)))
        sub = run.path / f"k{k}"
        sub.mkdir()
        log.info("K=%d: %d training images, %d epochs", k, len(subset), epochs)
        _, res = fit(cfg, network, subset, test, sub, epochs)
        rows.append([k, len(subset), len(test), _fmt(res.final.accuracy), _fmt(res.best_acc)])
        run.outputs.append(sub.name)
    with run.file("kshot.csv").open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(KSHOT_COLUMNS)
        w.writerows(rows)
    for r in rows:
        print(f"K={r[0]:<4} final {r[3]}  best {r[4]}")


def cmd_audit(cfg: Resolved, run: RunDir, args) -> None:
    model = build(cfg.network, model_seed(cfg))
    size = cfg.audit.input_size
    report = audit(model, (cfg.network.in_channels, size, size), cfg.audit.batch, cfg.audit.path)
    if cfg.audit.emit == "csv":
        text = report.to_csv()
        run.file("audit.csv").write_text(text)
    else:
        text = report.to_table(with_reference=cfg.network == NetworkConfig()) + "\n"
        run.file("audit.txt").write_text(text)
    sys.stdout.write(text)


def cmd_bench(cfg: Resolved, run: RunDir, args) -> None:
    sweep = default_sweep()
    if args.quick:
        sweep = [c for c in sweep if c.c_in == 4 and c.h == 16]
    seed = derive_seed(cfg.seed, "bench")
    results = []
    for c in sweep:
        for path in ("direct", "decoupled", "fused"):
            results.append(bench(path, c, args.repetitions, seed))
        log.info("%s: %s", c, ", ".join(f"{r.path} {r.median_us:.0f}us" for r in results[-3:]))
    text = bench_csv(results)
    run.file("bench.csv").write_text(text)
    sys.stdout.write(text)


def cmd_export_features(cfg: Resolved, run: RunDir, args) -> None:
    model, _, train, test = _eval_model(cfg, args)
    dataset = test if args.split == "test" else train
    export_features(model, dataset, run.file("features.csv"))
    print(f"wrote {len(dataset)} feature rows of dimension {model.feature_dim}")


# -- argument parsing ----------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file (key = value grammar) or a run manifest.json")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--seed", dest="run.seed", help="master seed; every other seed derives from it")
    p.add_argument("--out", dest="run.out", help="parent directory for run directories")
    p.add_argument("--run-dir", help="exact run directory (must not already hold a manifest)")
    p.add_argument("-v", "--verbose", action="store_true")


def _training_flags(p: argparse.ArgumentParser, epochs_key: str = "train.epochs") -> None:
    p.add_argument("--epochs", dest=epochs_key)
    p.add_argument("--lr", dest="train.lr")
    p.add_argument("--batch-size", dest="train.batch_size")
    p.add_argument("--preset", dest="network.preset", help="paper | tiny")
    p.add_argument("--data-root", dest="data.root", help="folder with train/ and test/ class subfolders")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="light-reskan", description=__doc__)
    parser.add_argument("--version", action="version", version=f"light_reskan {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        p = sub.add_parser(name, help=help)
        _common(p)
        p.set_defaults(fn=fn)
        return p

    p = add("gen-data", cmd_gen_data, "write the synthetic speckled dataset")
    p.add_argument("dest", nargs="?", help="dataset directory (default: <run>/data)")
    _training_flags(add("train", cmd_train, "train a model and write checkpoints and metrics"))
    for name, fn, text in (("eval", cmd_eval, "evaluate a checkpoint"),
                           ("noise-eval", cmd_noise_eval, "accuracy under clean and speckled test images"),
                           ("export-features", cmd_export_features, "pooled features as CSV")):
        p = add(name, fn, text)
        p.add_argument("checkpoint")
        p.add_argument("--data-root", dest="data.root")
        if name == "eval":
            p.add_argument("--noise", dest="noise.level", help="clean | weak | medium | strong")
        if name == "noise-eval":
            p.add_argument("--level", dest="noise.level", help="restrict to clean plus this level")
            p.add_argument("--gamma-parametrization", dest="noise.parametrization", help="scale | rate")
        if name == "export-features":
            p.add_argument("--split", choices=("train", "test"), default="test")
    _training_flags(add("ablate", cmd_ablate, "train the five cumulative ablation rows"))
    p = add("kshot", cmd_kshot, "train on K images per class for each K")
    _training_flags(p, epochs_key="kshot.epochs")
    p.add_argument("--k", dest="kshot.k", help="comma-separated K values")
    p = add("audit", cmd_audit, "parameter, FLOP and memory-traffic report")
    p.add_argument("--emit", dest="audit.emit", help="csv | table")
    p.add_argument("--input-size", dest="audit.input_size")
    p.add_argument("--path", dest="audit.path", help="direct | decoupled | fused")
    p.add_argument("--preset", dest="network.preset", help="paper | tiny")
    p = add("bench", cmd_bench, "shared-convolution path microbenchmark")
    p.add_argument("--repetitions", type=int, default=20)
    p.add_argument("--quick", action="store_true", help="small slice of the sweep")
    return parser


def _flag_overrides(args) -> dict:
    out = {}
    for key, value in vars(args).items():
        if "." in key and value is not None:
            out[key] = _coerce(key, value, f"--{key}")
    out.update(parse_overrides(args.set))
    return out


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    run = None
    try:
        overrides = _flag_overrides(args)
        if hasattr(args, "checkpoint"):
            cfg = _checkpoint_config(args, overrides)
        else:
            settings = load_settings(args.config) if args.config else {}
            settings.update(overrides)
            cfg = resolve(settings)
        run = RunDir(cfg, args.command, argv, args.run_dir)
        args.fn(cfg, run, args)
        run.complete()
        print(f"run directory: {run.path}")
        return 0
    except LightResKanError as exc:
        msg = str(exc).splitlines()[0]
        if run is not None:
            run.fail(msg)
        print(f"light-reskan {args.command}: error: {msg}", file=sys.stderr)
        return 2 if isinstance(exc, UsageError) else 1
    except OSError as exc:
        msg = f"{exc.strerror or exc}: {exc.filename}" if exc.filename else str(exc)
        if run is not None:
            run.fail(msg)
        print(f"light-reskan {args.command}: error: {msg}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        if run is not None:
            run.fail("interrupted")
        print(f"light-reskan {args.command}: interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
