"""Desk-scale end-to-end experiment: train, then score translations against held-out data."""

from __future__ import annotations

import json
import os
import time

import numpy as np

from .data import SyntheticDataset, default_domains
from .evaluation import evaluate_translation, evaluation_extractor, train_probe
from .training import TrainConfig, Trainer, stream_seed, train

PROBE_PER_DOMAIN = 200
EVAL_PER_DOMAIN = 256
N_PER_PAIR = 128

RESULT_NAME = "result.json"


def desk_config(**overrides):
    """The seed-17, 3000-iteration, 32x32 three-domain configuration."""
    base = dict(total_iters=3000, batch_size=16, seed=17, image_size=32, num_domains=3,
                d_steps_per_g=1, init="fan_in", checkpoint_every=500, sample_every=500)
    base.update(overrides)
    return TrainConfig(**base)


class EvalSuite:
    """Probe, evaluation extractor and held-out pools derived from the run seed."""

    def __init__(self, config):
        doms = default_domains(config.num_domains)
        probe_set = SyntheticDataset(doms, config.image_size, PROBE_PER_DOMAIN,
                                     seed=stream_seed(config.seed, "eval", 0))
        self.probe = train_probe(*probe_set.all(), seed=config.seed)
        pool = SyntheticDataset(doms, config.image_size, EVAL_PER_DOMAIN,
                                seed=stream_seed(config.seed, "eval", 1))
        half = EVAL_PER_DOMAIN // 2
        n = config.num_domains
        labels = np.repeat(np.arange(n), half)
        shape = pool.images.shape[2:]
        self.sources = pool.images[:, :half].reshape((-1,) + shape)
        self.source_labels = labels
        self.reference = pool.images[:, half:].reshape((-1,) + shape)
        self.reference_labels = labels
        self.extractor = evaluation_extractor(config.num_domains, config.image_size)
        self.seed = config.seed

    def score(self, generator):
        m = evaluate_translation(generator, self.probe, self.extractor,
                                 self.sources, self.source_labels,
                                 self.reference, self.reference_labels,
                                 n_per_pair=N_PER_PAIR, seed=self.seed)
        return {
            "ca": m.ca, "fid": m.fid, "is": m.is_, "identity_l1": m.identity_l1, "n": m.n,
            "pair_fid": {f"{i}->{j}": v for (i, j), v in sorted(m.pair_fid.items())},
        }


def run_desk_experiment(config, out_dir):
    """Train ``config`` in ``out_dir`` and write before/after metrics to result.json."""
    os.makedirs(out_dir, exist_ok=True)
    suite = EvalSuite(config)
    initial = suite.score(Trainer(config).generator)
    t0 = time.time()
    _, trainer = train(config, out_dir)
    elapsed = time.time() - t0
    final = suite.score(trainer.generator)
    result = {
        "config": config.to_text(),
        "probe_holdout_accuracy": suite.probe.holdout_accuracy,
        "initial": initial,
        "final": final,
        "train_seconds": elapsed,
    }
    with open(os.path.join(out_dir, RESULT_NAME), "w") as fh:
        json.dump(result, fh, indent=2)
    return result


def load_result(out_dir, config):
    """Cached result for exactly this config, or None."""
    path = os.path.join(out_dir, RESULT_NAME)
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        result = json.load(fh)
    return result if result.get("config") == config.to_text() else None


def cached_desk_experiment(config, out_dir):
    return load_result(out_dir, config) or run_desk_experiment(config, out_dir)
