"""Command-line entry point: gen-data, train, translate, eval, gradcheck, describe.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or numeric error.
Metrics go to stdout; logs go to stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("drawergan")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="drawergan", description="Multi-domain image translation at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic PNG dataset with manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--domains", type=int, default=3)
    g.add_argument("--per-domain", type=int, default=10)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train from a key=value config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to resume from")

    tr = sub.add_parser("translate", help="translate one PNG between domains")
    tr.add_argument("--ckpt", required=True)
    tr.add_argument("--in", dest="inp", required=True)
    tr.add_argument("--src", type=int, required=True)
    tr.add_argument("--tgt", type=int, required=True)
    tr.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="print translation metrics as one JSON object")
    e.add_argument("--ckpt", default=None, help="omit to score the real data itself")
    e.add_argument("--data", required=True)
    e.add_argument("--n", type=int, default=32, help="images per ordered domain pair")
    e.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("gradcheck", help="finite-difference check of every operator")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--op", default=None)
    c.add_argument("--inject-fault", action="store_true",
                   help="swap in a deliberately wrong backward (harness self-test)")

    d = sub.add_parser("describe", help="parameter counts per tensor and network")
    d.add_argument("--config", required=True)
    d.add_argument("--per-tensor", action="store_true")
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    from .data import write_dataset

    if args.domains < 1 or args.per_domain < 1:
        raise UsageError("--domains and --per-domain must be >= 1")
    if args.size < 16:
        raise UsageError("--size must be >= 16")
    try:
        n = write_dataset(args.out, args.domains, args.per_domain, args.size, args.seed)
    except OSError as exc:
        raise UsageError(f"cannot write to {args.out}: {exc}") from exc
    log.info("wrote %d images to %s", n, args.out)
    return EXIT_OK


def _config(path):
    from .training import load_config

    try:
        return load_config(path)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc


def cmd_train(args):
    from .training import train

    config = _config(args.config)
    path, trainer = train(config, args.out, resume=args.resume)
    log.info("finished at iteration %d, checkpoint %s", trainer.iteration, path)
    return EXIT_OK


def _load_trainer(ckpt):
    from .training import build_trainer_from_checkpoint

    if not os.path.exists(ckpt):
        raise UsageError(f"checkpoint not found: {ckpt}")
    return build_trainer_from_checkpoint(ckpt)


def cmd_translate(args):
    from .data import load_png, save_png
    from .tensor import no_grad

    trainer = _load_trainer(args.ckpt)
    n = trainer.config.num_domains
    for flag, v in (("--src", args.src), ("--tgt", args.tgt)):
        if not 0 <= v < n:
            raise UsageError(f"{flag} {v} out of range for {n} domains")
    image = load_png(args.inp)
    size = trainer.config.image_size
    if image.shape[1:] != (size, size):
        raise UsageError(f"input is {image.shape[2]}x{image.shape[1]}, model expects {size}x{size}")
    with no_grad():
        out = trainer.generator.translate(image[None], np.array([args.src]), np.array([args.tgt]))
    save_png(np.clip(out.data[0], -1, 1), args.out)
    return EXIT_OK


def cmd_eval(args):
    from .data import read_dataset
    from .evaluation import (
        ProbeSetupError,
        classification_accuracy,
        evaluate_translation,
        evaluation_extractor,
        feature_stats,
        frechet_distance,
        inception_like_score,
        metrics_report,
        train_probe,
    )

    if args.n < 2:
        raise UsageError("--n must be >= 2")
    try:
        images, labels = read_dataset(args.data)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read dataset {args.data}: {exc}") from exc
    try:
        probe = train_probe(images, labels, seed=args.seed)
    except ProbeSetupError as exc:
        raise UsageError(f"insufficient data: {exc}") from exc
    fe = evaluation_extractor(calibration_images=images)
    if args.ckpt is None:
        rng = np.random.default_rng(args.seed)
        pick = np.concatenate([
            rng.choice(np.flatnonzero(labels == d), args.n, replace=False)
            for d in range(int(labels.max()) + 1)
        ])
        ca = classification_accuracy(probe, images[pick], labels[pick])
        is_ = inception_like_score(probe, images[pick])
        fid = np.mean([
            frechet_distance(feature_stats(fe, images[pick][labels[pick] == d]),
                             feature_stats(fe, images[labels == d]))
            for d in range(int(labels.max()) + 1)
        ])
        print(metrics_report(ca, fid, is_, len(pick), args.seed))
        return EXIT_OK
    trainer = _load_trainer(args.ckpt)
    if int(labels.max()) + 1 != trainer.config.num_domains:
        raise UsageError("dataset domain count does not match the checkpoint")
    m = evaluate_translation(trainer.generator, probe, fe, images, labels, images, labels,
                             n_per_pair=args.n, seed=args.seed)
    print(m.report(args.seed))
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradsuite import run_suite

    try:
        results = run_suite(args.seed, only=args.op, inject_fault=args.inject_fault)
    except KeyError as exc:
        raise UsageError(str(exc)) from exc
    width = max(len(r.name) for r in results)
    print(f"{'operator':<{width}}  {'rel_error':>10}  {'tol':>7}  result")
    for r in results:
        print(f"{r.name:<{width}}  {r.error:10.2e}  {r.tolerance:7.0e}  {'pass' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        log.error("gradient check failed for: %s", ", ".join(failed))
        return EXIT_RUNTIME
    return EXIT_OK


def describe_counts(config):
    """{network: (total, {tensor: count})} for G, D, extractor and probe."""
    from .evaluation import init_probe
    from .features import build_extractor
    from .model import count_parameters, init_discriminator, init_generator

    nets = {
        "generator": init_generator(config.generator_config, 0),
        "discriminator": init_discriminator(config.discriminator_config, 0),
        "extractor": build_extractor(0, config.extractor_widths).params,
        "probe": init_probe(config.num_domains, 0).params,
    }
    return {name: count_parameters(p) for name, p in nets.items()}


def cmd_describe(args):
    config = _config(args.config)
    counts = describe_counts(config)
    for name, (total, breakdown) in counts.items():
        if args.per_tensor:
            for tensor, n in breakdown.items():
                print(f"{name}\t{tensor}\t{n}")
        print(f"{name}\ttotal\t{total}")
    trainable = counts["generator"][0] + counts["discriminator"][0]
    print(f"generator+discriminator\ttotal\t{trainable}\t({trainable / 1e6:.2f}M)")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "translate": cmd_translate,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "describe": cmd_describe,
}


def main(argv=None):
    from .checkpoint import CheckpointFormatError
    from .data import ImageFormatError
    from .evaluation import NumericError
    from .tensor import GradientError
    from .training import ConfigError, TrainingError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"drawergan {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, NumericError, GradientError, CheckpointFormatError,
            ImageFormatError, FloatingPointError) as exc:
        print(f"drawergan {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
