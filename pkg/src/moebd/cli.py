"""Command line: gen-data, attack, defend, analyze, sweep-l.

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 unreadable checkpoint.
``MOEBD_THREADS`` caps BLAS threads (default 1).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import analysis, config, defense, harness, netpbm, pmoe
from .dataset import generate_synthetic, write_dataset

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_CHECKPOINT = 0, 2, 3, 4

log = logging.getLogger("moebd")


def _out_dir(path: str) -> Path:
    """Create ``path`` (not its parents) so a missing parent is an I/O error."""
    out = Path(path)
    out.mkdir(exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    cfg = config.load(args.config).experiment.data
    train, test = generate_synthetic(cfg.num_classes, cfg.per_class, cfg.h, cfg.w, cfg.seed, cfg.test_per_class, cfg.channels)
    manifest = write_dataset(_out_dir(args.out), {"train": train, "test": test})
    log.info("wrote %d images, manifest %s", len(train) + len(test), manifest)
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = config.load(args.config).experiment
    out = _out_dir(args.out)
    result = harness.run_experiment(cfg, keep_models=True)
    harness.write_csv(out / "metrics.csv", harness.METRICS_HEADER, harness.metrics_rows(cfg, result))
    for r, (model, losses, manifest) in enumerate(zip(result.models, result.losses, result.manifests)):
        pmoe.save(model, out / f"model_{r}.pmoe")
        harness.write_csv(out / f"loss_{r}.csv", ["epoch", "loss"], harness.loss_rows(losses))
        manifest.write_csv(out / f"poison_{r}.csv")
    log.info("asr %.2f +- %.2f, ba %.2f, cad %.2f", result.asr_mean, result.asr_std, result.ba_mean, result.cad_mean)
    return EXIT_OK


def defense_clean_data(data: harness.DataConfig):
    """The defender's trusted data: the training split before any poisoning."""
    return harness.load_data(data)[0]


def cmd_defend(args) -> int:
    cfg = config.load(args.config)
    model = pmoe.load(args.checkpoint)
    exp = cfg.experiment
    _, test = harness.load_data(exp.data)
    clean = defense_clean_data(exp.data)
    out = _out_dir(args.out)
    rows = []
    d = cfg.defense
    for rate in d.pruning_rates:
        dcfg = defense.DefenseConfig(rate, d.fine_tune_epochs, d.clean_subset_size, d.seed, d.lr, exp.train.batch)
        _, report = defense.fine_prune(model, dcfg, clean, test, exp.poison.spec, exp.poison.target_label)
        rows += defense.report_rows(rate, report)
        log.info("rate %.2f: %s", rate, ", ".join(f"{r.stage} ba={r.ba:.1f} asr={r.asr:.1f}" for r in report))
    harness.write_csv(out / "defense.csv", defense.REPORT_HEADER, rows)
    return EXIT_OK


def cmd_analyze(args) -> int:
    model = pmoe.load(args.checkpoint)
    image = netpbm.read_image(args.image)
    if image.ndim == 2:
        image = image[..., None]
    out = _out_dir(args.out)
    analysis.export_routing_maps(model, image, out)
    _, trace = pmoe.forward(model, image)
    hist = analysis.patch_intensity_histogram(image, trace, args.bins)
    harness.write_csv(out / "histogram.csv", ["expert", "bin", "lo", "hi", "count"], analysis.histogram_rows(hist))
    return EXIT_OK


def cmd_sweep_l(args) -> int:
    cfg = config.load(args.config)
    out = _out_dir(args.out)
    cells = harness.sweep_l(cfg.experiment, cfg.sweep.l_values, cfg.sweep.badpatch_counts)
    harness.write_csv(out / "sweep.csv", harness.SWEEP_HEADER, harness.sweep_rows(cells))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moebd", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="write the synthetic dataset as PPM/PGM plus manifest.csv")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("attack", help="train clean and backdoored models, write metrics.csv and checkpoints")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("defend", help="fine-prune a checkpoint at each configured rate")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_defend)

    s = sub.add_parser("analyze", help="routing maps, trace JSON and intensity histograms for one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--bins", type=int, default=analysis.DEFAULT_BINS)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("sweep-l", help="matched and mismatched BadPatches tables over routing l")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep_l)
    return p


def _threads() -> int:
    raw = os.environ.get("MOEBD_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise config.ConfigError(f"MOEBD_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise config.ConfigError(f"MOEBD_THREADS must be >= 1, got {n}")
    return n


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except pmoe.CheckpointError as exc:
        print(f"error: checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except netpbm.ParseError as exc:
        print(f"error: image: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # config errors plus geometry/capacity problems that a config produced
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
