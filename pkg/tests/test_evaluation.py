import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from drawergan.data import SyntheticDataset, default_domains, to_bytes
from drawergan.evaluation import (
    GUTTER,
    FeatureStats,
    NumericError,
    ProbeSetupError,
    class_distances,
    classification_accuracy,
    evaluate_translation,
    evaluation_extractor,
    feature_stats,
    frechet_distance,
    grid_array,
    image_grid,
    inception_from_probs,
    metrics_report,
    pair_sources,
    probe_class_distances,
    stats_from_features,
    tile_offset,
    train_probe,
)
from drawergan.tensor import Tensor


def _random_spd(rng, d):
    a = rng.standard_normal((d, d))
    return a @ a.T + 0.1 * np.eye(d)


def _oracle_frechet(mu_a, sa, mu_b, sb):
    # Tr((Sa Sb)^(1/2)) as the summed square roots of the product's eigenvalues
    ev = np.linalg.eigvals(sa @ sb)
    return float(np.sum((mu_a - mu_b) ** 2) + np.trace(sa) + np.trace(sb)
                 - 2 * np.sum(np.sqrt(np.clip(ev.real, 0, None))))


@pytest.fixture(scope="module")
def probe_data():
    ds = SyntheticDataset(default_domains(3), 32, 200, seed=[99, 0])
    return ds.all()


@pytest.fixture(scope="module")
def probe(probe_data):
    return train_probe(*probe_data, seed=0)


class TestFrechet:
    def test_identical_zero(self, rng):
        s = FeatureStats(rng.standard_normal(4), _random_spd(rng, 4), 10)
        assert frechet_distance(s, s) == pytest.approx(0, abs=1e-6)

    def test_mean_shift_closed_form(self):
        d = 6
        mu = np.zeros(d)
        shift = np.zeros(d)
        shift[:2] = (3, 4)
        a, b = FeatureStats(mu, np.eye(d), 10), FeatureStats(mu + shift, np.eye(d), 10)
        assert frechet_distance(a, b) == pytest.approx(25, abs=1e-6)

    def test_matches_eigen_oracle(self, rng):
        for _ in range(10):
            sa, sb = _random_spd(rng, 4), _random_spd(rng, 4)
            ma, mb = rng.standard_normal(4), rng.standard_normal(4)
            got = frechet_distance(FeatureStats(ma, sa, 8), FeatureStats(mb, sb, 8))
            assert got == pytest.approx(_oracle_frechet(ma, sa, mb, sb), rel=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 6))
    def test_symmetric_nonnegative(self, seed, d):
        r = np.random.default_rng(seed)
        a = FeatureStats(r.standard_normal(d), _random_spd(r, d), 5)
        b = FeatureStats(r.standard_normal(d), _random_spd(r, d), 5)
        ab, ba = frechet_distance(a, b), frechet_distance(b, a)
        assert ab >= 0
        assert ab == pytest.approx(ba, rel=1e-6, abs=1e-9)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            frechet_distance(FeatureStats(np.zeros(2), np.eye(2), 2),
                             FeatureStats(np.zeros(3), np.eye(3), 2))

    def test_non_finite(self):
        bad = FeatureStats(np.array([np.inf, 0.0]), np.eye(2), 2)
        with pytest.raises(NumericError):
            frechet_distance(bad, FeatureStats(np.zeros(2), np.eye(2), 2))


class TestFeatureStats:
    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            stats_from_features(np.zeros((1, 3)))
        with pytest.raises(ValueError):
            FeatureStats(np.zeros(2), np.eye(2), 1)

    def test_symmetric_with_shrinkage(self, rng):
        s = stats_from_features(rng.standard_normal((3, 5)))
        np.testing.assert_array_equal(s.sigma, s.sigma.T)
        assert np.linalg.eigvalsh(s.sigma).min() > 0

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 4))
    def test_duplicates_leave_stats_unchanged(self, seed, copies):
        f = np.random.default_rng(seed).standard_normal((7, 3))
        a, b = stats_from_features(f), stats_from_features(np.tile(f, (copies, 1)))
        np.testing.assert_allclose(a.mu, b.mu, atol=1e-6)
        np.testing.assert_allclose(a.sigma, b.sigma, atol=1e-6)

    def test_evaluation_extractor_features(self, probe_data):
        images, labels = probe_data
        fe = evaluation_extractor()
        a = feature_stats(fe, images[labels == 0][:100])
        b = feature_stats(fe, images[labels == 0][100:])
        c = feature_stats(fe, images[labels == 1][:100])
        assert frechet_distance(a, b) < frechet_distance(a, c)


class TestInception:
    def test_identical_rows(self):
        p = np.tile([0.2, 0.5, 0.3], (6, 1))
        assert inception_from_probs(p) == pytest.approx(1.0, abs=1e-12)

    def test_confident_uniform_is_n(self):
        for n in (2, 3, 5):
            p = np.tile(np.eye(n), (4, 1))
            assert inception_from_probs(p) == pytest.approx(n, abs=1e-6)

    def test_bounds_over_random_sets(self, rng):
        for _ in range(100):
            n = int(rng.integers(2, 6))
            logits = rng.standard_normal((int(rng.integers(2, 30)), n)) * rng.uniform(0.1, 10)
            p = np.exp(logits - logits.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            s = inception_from_probs(p)
            assert 1 - 1e-9 <= s <= n + 1e-9

    def test_matches_direct_formula(self, rng):
        p = rng.dirichlet(np.ones(4), size=12)
        marg = p.mean(axis=0)
        kl = [np.sum(row * np.log(row / marg)) for row in p]
        assert inception_from_probs(p) == pytest.approx(np.exp(np.mean(kl)), rel=1e-6)

    def test_needs_two_rows(self):
        with pytest.raises(ValueError):
            inception_from_probs(np.ones((1, 3)) / 3)


class TestProbe:
    def test_default_domains_separable(self, probe):
        assert probe.holdout_accuracy >= 0.95

    def test_real_images_own_labels(self, probe):
        ds = SyntheticDataset(default_domains(3), 32, 40, seed=[99, 1])
        x, y = ds.all()
        assert classification_accuracy(probe, x, y) >= 0.95

    def test_frozen_after_training(self, probe):
        assert all(not t.requires_grad for t in probe.params.values())

    def test_same_seed_same_weights(self, probe_data):
        a = train_probe(*probe_data, seed=4, steps=5, min_accuracy=0)
        b = train_probe(*probe_data, seed=4, steps=5, min_accuracy=0)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k].data, b.params[k].data)

    def test_single_domain_trivial(self, probe_data):
        images, labels = probe_data
        p = train_probe(images[labels == 0][:120], np.zeros(120, np.int64))
        assert p.holdout_accuracy == 1.0

    def test_too_few_images(self, probe_data):
        images, labels = probe_data
        keep = np.concatenate([np.flatnonzero(labels == d)[:50] for d in range(3)])
        with pytest.raises(ProbeSetupError, match="100"):
            train_probe(images[keep], labels[keep])

    def test_accuracy_bar_enforced(self, probe_data):
        with pytest.raises(ProbeSetupError, match="accuracy"):
            train_probe(*probe_data, steps=0)


class TestAccuracy:
    def test_order_invariant(self, probe, probe_data, rng):
        x, y = probe_data
        idx = rng.choice(len(y), 60, replace=False)
        perm = rng.permutation(60)
        a = classification_accuracy(probe, x[idx], y[idx])
        b = classification_accuracy(probe, x[idx][perm], y[idx][perm])
        assert a == b

    def test_wrong_labels_near_chance(self, probe, probe_data, rng):
        x, y = probe_data
        shuffled = rng.integers(3, size=len(y))
        assert abs(classification_accuracy(probe, x, shuffled) - 1 / 3) < 0.06

    def test_empty_is_error(self, probe):
        with pytest.raises(ValueError):
            classification_accuracy(probe, np.zeros((0, 3, 32, 32), np.float32), [])


class TestClassDistances:
    def test_hand_computed(self):
        f = np.array([[0.0, 0.0], [3.0, 4.0], [0.0, 1.0]])
        inter, intra = class_distances(f, [0, 1, 0])
        # across: |a-b| = 5, |b-c| = sqrt(18); within: |a-c| = 1
        assert inter == pytest.approx((5 + math.sqrt(18)) / 2, rel=1e-12)
        assert intra == pytest.approx(1.0, rel=1e-12)

    def test_matches_brute_force(self, rng):
        f = rng.standard_normal((15, 4))
        c = rng.integers(3, size=15)
        across, within = [], []
        for i in range(15):
            for j in range(15):
                if i != j:
                    (within if c[i] == c[j] else across).append(np.linalg.norm(f[i] - f[j]))
        inter, intra = class_distances(f, c)
        assert inter == pytest.approx(np.mean(across), rel=1e-9)
        assert intra == pytest.approx(np.mean(within), rel=1e-9)

    def test_single_class_has_no_inter(self, rng):
        inter, intra = class_distances(rng.standard_normal((4, 2)), [1] * 4)
        assert math.isnan(inter) and intra > 0

    def test_probe_separates_real_domains(self, probe, probe_data):
        x, y = probe_data
        inter, intra = probe_class_distances(probe, x[::5])
        assert inter > intra


class TestGrid:
    def test_single_image_with_border(self, rng):
        im = rng.uniform(-1, 1, (3, 5, 7))
        g = grid_array([im], 4)
        assert g.shape == (5 + 2 * GUTTER, 7 + 2 * GUTTER, 3)
        np.testing.assert_array_equal(g[GUTTER:-GUTTER, GUTTER:-GUTTER], to_bytes(im))
        border = g.copy()
        border[GUTTER:-GUTTER, GUTTER:-GUTTER] = 255
        assert np.all(border == 255)

    def test_six_images_three_columns(self, rng):
        ims = [np.full((3, 4, 6), v) for v in np.linspace(-1, 1, 6)]
        g = grid_array(ims, 3)
        assert g.shape == (2 * 4 + 3 * GUTTER, 3 * 6 + 4 * GUTTER, 3)
        for i, im in enumerate(ims):
            y, x = tile_offset(i, 3, 4, 6)
            assert (y, x) == (GUTTER + (i // 3) * (4 + GUTTER), GUTTER + (i % 3) * (6 + GUTTER))
            np.testing.assert_array_equal(g[y:y + 4, x:x + 6], to_bytes(im))

    def test_png_roundtrip(self, tmp_path, rng):
        ims = [rng.uniform(-1, 1, (3, 8, 8)) for _ in range(5)]
        path = image_grid(ims, 2, tmp_path / "g.png")
        decoded = np.asarray(Image.open(path)).astype(np.float64) / 127.5 - 1
        for i, im in enumerate(ims):
            y, x = tile_offset(i, 2, 8, 8)
            tile = decoded[y:y + 8, x:x + 8].transpose(2, 0, 1)
            assert np.abs(tile - im).max() <= 1 / 127.5

    def test_mixed_sizes(self):
        with pytest.raises(ValueError, match="mixed"):
            grid_array([np.zeros((3, 4, 4)), np.zeros((3, 5, 4))], 2)

    def test_empty(self):
        with pytest.raises(ValueError):
            grid_array([], 2)


class _CopyGenerator:
    """Returns its input unchanged, whatever the target domain."""

    def translate(self, images, src, tgt):
        return Tensor(np.asarray(images, np.float32))


class TestTranslationMetrics:
    def test_report_object(self):
        out = json.loads(metrics_report(0.5, 1.25, 2.0, 12, 3))
        assert out == {"ca": 0.5, "fid": 1.25, "is": 2.0, "n": 12, "seed": 3}

    def test_pair_sources_cover_ordered_pairs(self, probe_data):
        x, y = probe_data
        xs, src, tgt = pair_sources(x, y, 4, 0)
        assert len(xs) == 9 * 4
        for i, j in zip(src, tgt):
            assert 0 <= i < 3 and 0 <= j < 3
        assert len(set(zip(src.tolist(), tgt.tolist()))) == 9

    def test_copy_generator(self, probe, probe_data):
        x, y = probe_data
        fe = evaluation_extractor()
        m = evaluate_translation(_CopyGenerator(), probe, fe, x, y, x, y, n_per_pair=20, seed=1)
        assert m.identity_l1 == 0
        assert m.n == 6 * 20
        # untranslated sources keep their own domain, so they miss every target
        assert m.ca < 0.1
        assert set(m.pair_fid) == {(i, j) for i in range(3) for j in range(3) if i != j}
        again = evaluate_translation(_CopyGenerator(), probe, fe, x, y, x, y, n_per_pair=20, seed=1)
        assert again.report(1) == m.report(1)
