"""Desk-scale metrics: probe accuracy, Frechet feature distance, inception-style score, grids."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import functional as F
from .data import to_bytes
from .features import extract
from .model import ModelParams
from .tensor import Tensor, no_grad

SHRINKAGE = 1e-6
GUTTER = 2


class NumericError(ArithmeticError):
    pass


class ProbeSetupError(RuntimeError):
    """The probe could not separate the real domains well enough."""


# ---------------------------------------------------------------------------
# Frechet distance


@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("feature statistics need at least 2 samples")


def stats_from_features(feats):
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError(f"expected (n, D) features, got {feats.shape}")
    n, d = feats.shape
    if n < 2:
        raise ValueError("feature statistics need at least 2 samples")
    mu = feats.mean(axis=0)
    centered = feats - mu
    # population covariance, so duplicating the sample set changes nothing
    sigma = centered.T @ centered / n
    sigma = 0.5 * (sigma + sigma.T) + SHRINKAGE * np.eye(d)
    return FeatureStats(mu, sigma, n)


def pooled_features(fe, images, chunk=64):
    """Global-average-pooled deepest extractor tap, shape (n, D)."""
    images = np.asarray(images, dtype=np.float32)
    out = []
    with no_grad():
        for i in range(0, len(images), chunk):
            taps = extract(fe, Tensor(images[i:i + chunk]))
            out.append(taps[-1].data.mean(axis=(2, 3)))
    return np.concatenate(out).astype(np.float64)


def feature_stats(fe, images):
    return stats_from_features(pooled_features(fe, images))


def _sqrtm_psd(m):
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a, b):
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The cross term uses Tr((S_a S_b)^(1/2)) = Tr((A S_b A)^(1/2)) with
    A = S_a^(1/2), whose argument is symmetric PSD.
    """
    if a.mu.shape != b.mu.shape:
        raise ValueError(f"feature dimensions differ: {a.mu.shape} vs {b.mu.shape}")
    root_a = _sqrtm_psd(a.sigma)
    cross = _sqrtm_psd(root_a @ b.sigma @ root_a)
    diff = a.mu - b.mu
    d2 = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * np.trace(cross))
    if not np.isfinite(d2):
        raise NumericError("non-finite Frechet distance")
    return max(d2, 0.0)


# ---------------------------------------------------------------------------
# probe classifier

PROBE_WIDTHS = (16, 32, 64)


class ProbeClassifier:
    """Three stride-2 conv blocks, global pooling and a linear head."""

    def __init__(self, params, num_domains):
        self.params = params
        self.num_domains = num_domains

    def pooled(self, x):
        p = self.params
        h = x
        for i in range(1, len(PROBE_WIDTHS) + 1):
            h = F.conv2d(h, p[f"probe{i}.w"], p[f"probe{i}.b"], 2, 1)
            h = F.activation(F.instance_norm(h), "leaky_relu")
        return F.global_avg_pool(h)

    def logits(self, x):
        return F.fully_connected(self.pooled(x), self.params["head.w"], self.params["head.b"])

    def features(self, images, chunk=128):
        """Pooled penultimate activations, one row per image."""
        images = np.asarray(images, dtype=np.float32)
        with no_grad():
            out = [self.pooled(Tensor(images[i:i + chunk])).data
                   for i in range(0, len(images), chunk)]
        return np.concatenate(out).astype(np.float64)

    def probabilities(self, images, chunk=128):
        images = np.asarray(images, dtype=np.float32)
        out = []
        with no_grad():
            for i in range(0, len(images), chunk):
                out.append(F.softmax(self.logits(Tensor(images[i:i + chunk]))))
        return np.concatenate(out).astype(np.float64)

    def predict(self, images):
        return np.argmax(self.probabilities(images), axis=1)


def init_probe(num_domains, seed, in_channels=3):
    rng = np.random.default_rng(seed)
    p = ModelParams(seed=seed)
    cin = in_channels
    for i, w in enumerate(PROBE_WIDTHS, start=1):
        std = np.sqrt(2.0 / (cin * 9))
        p.add(f"probe{i}.w", rng.normal(0, std, (w, cin, 3, 3)).astype(np.float32))
        p.add(f"probe{i}.b", np.zeros(w, np.float32))
        cin = w
    p.add("head.w", rng.normal(0, np.sqrt(1.0 / cin), (cin, num_domains)).astype(np.float32))
    p.add("head.b", np.zeros(num_domains, np.float32))
    return ProbeClassifier(p, num_domains)


def _dihedral(x, k):
    """One of the 8 rotations/reflections; domains are invariant to all of them."""
    x = np.rot90(x, k % 4, axes=(2, 3))
    return np.ascontiguousarray(x[..., ::-1] if k >= 4 else x)


def train_probe(images, labels, seed=0, steps=600, batch=32, lr=2e-3,
                holdout=0.2, min_accuracy=0.95):
    """Fit a probe on real labelled images; raise if held-out accuracy < ``min_accuracy``."""
    from .training import AdamState, adam_step

    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    n_dom = int(labels.max()) + 1
    counts = np.bincount(labels, minlength=n_dom)
    if counts.min() < 100:
        raise ProbeSetupError(f"probe needs >= 100 images per domain, smallest has {counts.min()}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labels))
    n_hold = max(1, int(round(holdout * len(labels))))
    hold, fit = order[:n_hold], order[n_hold:]
    probe = init_probe(n_dom, [int(seed), 0])
    if n_dom > 1:
        state = AdamState.for_params(probe.params)
        for _ in range(steps):
            idx = fit[rng.integers(len(fit), size=batch)]
            xb = _dihedral(images[idx], rng.integers(8))
            loss = F.softmax_cross_entropy(probe.logits(Tensor(xb)), labels[idx])
            probe.params.zero_grad()
            loss.backward()
            adam_step(probe.params, state, lr, 0.9, 0.999, 1e-8)
    for t in probe.params.values():
        t.requires_grad = False
        t.grad = None
    acc = classification_accuracy(probe, images[hold], labels[hold])
    probe.holdout_accuracy = acc
    if acc < min_accuracy:
        raise ProbeSetupError(f"probe held-out accuracy {acc:.3f} < {min_accuracy}")
    return probe


def classification_accuracy(probe, images, target_labels):
    images = np.asarray(images)
    target_labels = np.asarray(target_labels)
    if len(images) == 0:
        raise ValueError("classification accuracy of an empty set is undefined")
    if len(images) != len(target_labels):
        raise ValueError("images and labels differ in length")
    return float(np.mean(probe.predict(images) == target_labels))


def inception_from_probs(probs):
    """exp(E_x KL(p(y|x) || p(y))) for rows of class probabilities."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or len(p) < 2:
        raise ValueError("need at least 2 probability rows")
    marginal = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    return float(np.exp(terms.sum(axis=1).mean()))


def inception_like_score(probe, images):
    return inception_from_probs(probe.probabilities(images))


def class_distances(features, classes):
    """Mean pairwise Euclidean distance (inter, intra) across and within classes.

    Either entry is NaN when no such pair exists (a single class, or only
    singleton classes).
    """
    f = np.asarray(features, dtype=np.float64)
    c = np.asarray(classes)
    if len(f) != len(c):
        raise ValueError("features and classes differ in length")
    sq = np.sum(f * f, axis=1)
    d = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * f @ f.T, 0))
    same = c[:, None] == c[None, :]
    off_diag = ~np.eye(len(f), dtype=bool)
    within, across = d[same & off_diag], d[~same]
    inter = float(across.mean()) if across.size else float("nan")
    intra = float(within.mean()) if within.size else float("nan")
    return inter, intra


def probe_class_distances(probe, images):
    """Inter/intra-class distances of probe features grouped by predicted class."""
    return class_distances(probe.features(images), probe.predict(images))


# ---------------------------------------------------------------------------
# images


def grid_array(images, cols):
    """uint8 (H', W', 3) tiling of (3, h, w) images with white gutters."""
    images = [np.asarray(im) for im in images]
    if not images:
        raise ValueError("image grid needs at least one image")
    shape = images[0].shape
    for im in images:
        if im.shape != shape:
            raise ValueError(f"mixed image sizes in grid: {shape} and {im.shape}")
    cols = max(1, min(int(cols), len(images)))
    rows = -(-len(images) // cols)
    _, h, w = shape
    out = np.full((rows * (h + GUTTER) + GUTTER, cols * (w + GUTTER) + GUTTER, 3), 255, np.uint8)
    for i, im in enumerate(images):
        r, c = divmod(i, cols)
        y, x = GUTTER + r * (h + GUTTER), GUTTER + c * (w + GUTTER)
        out[y:y + h, x:x + w] = to_bytes(im)
    return out


def tile_offset(index, cols, h, w):
    r, c = divmod(index, cols)
    return GUTTER + r * (h + GUTTER), GUTTER + c * (w + GUTTER)


def image_grid(images, cols, path):
    Image.fromarray(grid_array(images, cols)).save(path, format="PNG")
    return path


def translation_grid(generator, dataset, path, seed=0, per_domain=2):
    """Rows are source images; columns show the source then each target domain."""
    n = generator.config.num_domains
    rng = np.random.default_rng(seed)
    tiles = []
    with no_grad():
        for d in range(n):
            for j in rng.choice(dataset.per_domain, per_domain, replace=False):
                x = dataset.images[d, j][None]
                tiles.append(x[0])
                for t in range(n):
                    out = generator.translate(x, np.array([d]), np.array([t]))
                    tiles.append(np.clip(out.data[0], -1, 1))
    return image_grid(tiles, n + 1, path)


# ---------------------------------------------------------------------------
# translation metrics


def translate_all(generator, images, src, tgt, chunk=64):
    out = []
    with no_grad():
        for i in range(0, len(images), chunk):
            o = generator.translate(np.asarray(images[i:i + chunk], np.float32),
                                    src[i:i + chunk], tgt[i:i + chunk])
            out.append(o.data)
    return np.concatenate(out)


def pair_sources(images, labels, n_per_pair, seed):
    """For every ordered pair (i, j), draw ``n_per_pair`` source images of domain i."""
    rng = np.random.default_rng(seed)
    n = int(labels.max()) + 1
    xs, src, tgt = [], [], []
    for i in range(n):
        pool = np.flatnonzero(labels == i)
        for j in range(n):
            pick = rng.choice(pool, n_per_pair, replace=len(pool) < n_per_pair)
            xs.append(images[pick])
            src += [i] * n_per_pair
            tgt += [j] * n_per_pair
    return np.concatenate(xs), np.asarray(src), np.asarray(tgt)


def pair_fids(fe, translated, src, tgt, real_images, real_labels):
    """Desk-FID per ordered pair (i, j), i != j, against real domain-j images."""
    real_stats = {}
    out = {}
    for i, j in sorted(set(zip(src.tolist(), tgt.tolist()))):
        if i == j:
            continue
        if j not in real_stats:
            real_stats[j] = feature_stats(fe, real_images[real_labels == j])
        mask = (src == i) & (tgt == j)
        out[(i, j)] = frechet_distance(feature_stats(fe, translated[mask]), real_stats[j])
    return out


def metrics_report(ca, fid, is_, n, seed):
    return json.dumps({"ca": float(ca), "fid": float(fid), "is": float(is_),
                       "n": int(n), "seed": int(seed)})


# separate from any training seed so FID is not measured in the training signal's features
EVAL_EXTRACTOR_SEED = (7331, 1)


CALIBRATION_PER_DOMAIN = 128


def evaluation_extractor(num_domains=3, size=32, calibration_images=None):
    """Frozen extractor with population-statistics normalization.

    Per-image instance normalization makes pooled features nearly
    input-invariant, so the metric extractor is calibrated once on a fixed
    real calibration pool instead.
    """
    from .data import SyntheticDataset, default_domains
    from .features import build_extractor, calibrate

    fe = build_extractor(list(EVAL_EXTRACTOR_SEED))
    if calibration_images is None:
        pool = SyntheticDataset(default_domains(num_domains), size, CALIBRATION_PER_DOMAIN,
                                seed=list(EVAL_EXTRACTOR_SEED))
        calibration_images = pool.all()[0]
    return calibrate(fe, calibration_images)


@dataclass
class TranslationMetrics:
    ca: float
    fid: float
    is_: float
    identity_l1: float
    n: int
    pair_fid: dict

    def report(self, seed):
        return metrics_report(self.ca, self.fid, self.is_, self.n, seed)


def evaluate_translation(generator, probe, fe, source_images, source_labels,
                         real_images, real_labels, n_per_pair=128, seed=0):
    """Translate ``n_per_pair`` sources for every ordered domain pair and score them.

    ``ca`` and ``is_`` cover the cross-domain translations, ``fid`` is the mean
    desk-FID over ordered pairs i != j and ``identity_l1`` the mean absolute
    error of the src == tgt path.
    """
    xs, src, tgt = pair_sources(source_images, source_labels, n_per_pair, seed)
    out = translate_all(generator, xs, src, tgt)
    cross = src != tgt
    same = ~cross
    ca = classification_accuracy(probe, out[cross], tgt[cross])
    is_ = inception_like_score(probe, out[cross])
    fids = pair_fids(fe, out, src, tgt, real_images, real_labels)
    identity = float(np.mean(np.abs(out[same] - xs[same])))
    return TranslationMetrics(ca, float(np.mean(list(fids.values()))), is_, identity,
                              int(cross.sum()), fids)
