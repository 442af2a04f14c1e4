"""Command-line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import augment as aug
from . import pipeline as pl
from .classifiers import export_json, save_params
from .config import ConfigError, load_config, parse_overrides
from .graph import DatasetFormatError, SplitError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="auditvotes", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("-c", "--config", help="INI file with [section] key = value entries")
        sp.add_argument("-s", "--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config entry (repeatable)")
        sp.add_argument("-o", "--output-dir", help="shortcut for run.output_dir")
        sp.add_argument("--seed", type=int, help="shortcut for run.seed")
        sp.add_argument("--samples", type=int, help="shortcut for certify.n_samples")
        return sp

    common(sub.add_parser("train", help="train the GCN base classifier"))
    common(sub.add_parser("train-aug", help="train the fae or sim augmenter"))
    common(sub.add_parser("certify", help="randomized edge-flip smoothing certificate"))
    common(sub.add_parser("gnncert", help="hash-partition voting certificate"))
    common(sub.add_parser("gaussian", help="Gaussian smoothing on synthetic vectors"))
    ae = common(sub.add_parser("attack-eval", help="random-flip attack on test nodes"))
    ae.add_argument("--budget", type=int, default=5, help="flips per target")
    ae.add_argument("--targets", type=int, default=20, help="number of test targets")
    rp = sub.add_parser("report", help="print a report.json")
    rp.add_argument("path", help="report.json or the directory holding it")
    return p


def _config(args):
    ov = parse_overrides(args.set)
    if args.output_dir:
        ov.setdefault("run", {})["output_dir"] = args.output_dir
    if args.seed is not None:
        ov.setdefault("run", {})["seed"] = str(args.seed)
    if args.samples is not None:
        ov.setdefault("certify", {})["n_samples"] = str(args.samples)
    cfg = load_config(args.config, ov)
    if args.command == "gnncert":
        cfg = cfg.set("smoothing.scheme", "partition")
    elif args.command == "gaussian":
        cfg = cfg.set("smoothing.scheme", "gaussian")
    return cfg


def _run(args) -> int:
    if args.command == "report":
        path = Path(args.path)
        if path.is_dir():
            path = path / "report.json"
        if not path.exists():
            raise ConfigError(f"{path} not found")
        print(pl.format_report(json.loads(path.read_text(encoding="utf-8"))))
        return EXIT_OK

    cfg = _config(args)
    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")

    if args.command == "train":
        timer = pl.StageTimer()
        scheme = "partition" if cfg.smoothing.scheme == "partition" else "sparse"
        prep = pl.prepare(cfg.set("train.checkpoint", ""), timer, scheme)
        save_params(out / "model.npz", prep.params, {"features": prep.g.num_features,
                                                     "classes": prep.n_classes})
        export_json(out / "model.json", prep.params)
        if prep.augmenter is not None:
            aug.save_augmenter(out / "augmenter.npz", prep.augmenter)
        print(f"saved {out / 'model.npz'}")
    elif args.command == "train-aug":
        if cfg.augment.kind not in ("fae", "sim"):
            raise ConfigError("train-aug needs augment.kind = fae or sim")
        g, _ = pl.load_graph(cfg)
        from .graph import make_inductive_split
        split = make_inductive_split(g, cfg.split.per_class_labeled, cfg.split.test_fraction,
                                     pl.stream_seed(cfg.run.seed, "split"))
        a = cfg.augment
        tcfg = aug.TrainConfig(learning_rate=a.learning_rate, weight_decay=0.0, max_epochs=a.epochs,
                               patience=a.epochs, seed=pl.stream_seed(cfg.run.seed, "augment"))
        fit = aug.train_augmenter(g.subgraph(split.train_nodes), a.kind, tcfg, a.hidden, a.embed,
                                  a.heads, cfg.data.binarize)
        aug.save_augmenter(out / "augmenter.npz", fit.params)
        print(f"saved {out / 'augmenter.npz'} (loss {fit.losses[0]:.4f} -> {fit.losses[-1]:.4f})")
    elif args.command == "certify":
        r = pl.run_randomized_pipeline(cfg)
        print(pl.format_report(r.to_dict()))
    elif args.command == "gnncert":
        r = pl.run_gnncert_pipeline(cfg)
        print(pl.format_report(r.to_dict()))
    elif args.command == "gaussian":
        r = pl.run_gaussian_pipeline(cfg)
        print(pl.format_report(r.to_dict()))
    elif args.command == "attack-eval":
        timer = pl.StageTimer()
        prep = pl.prepare(cfg, timer, "sparse")
        rng = np.random.default_rng(pl.stream_seed(cfg.run.seed, "attack"))
        k = min(args.targets, prep.test_nodes.size)
        targets = np.sort(rng.choice(prep.test_nodes, size=k, replace=False))
        r = pl.run_empirical_eval(cfg, args.budget, targets, prepared=prep)
        print(f"accuracy before {r.extra['accuracy_before']:.4f}  "
              f"after {r.extra['accuracy_after']:.4f}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (ConfigError, DatasetFormatError, SplitError, OSError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
