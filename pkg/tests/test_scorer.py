import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ocds.errors import ConfigError, UndefinedCorrelationError
from ocds.model import Dataset
from ocds.scorer import (
    HashedNgramExtractor,
    ScorerModel,
    extract_features,
    feature_matrix,
    fit_scorer,
    infer_scores,
    ridge_fit,
    spearman,
    split_indices,
)


def corpus(rng, n, vocab=6, lo=4, hi=12):
    return Dataset.from_payloads([rng.integers(0, vocab, size=rng.integers(lo, hi)) for _ in range(n)], role="proxy")


class TestExtractor:
    def test_identical_instances(self):
        ext = HashedNgramExtractor(32)
        np.testing.assert_array_equal(ext([1, 2, 3, 1]), ext(np.array([1, 2, 3, 1])))

    def test_empty_is_zero(self):
        np.testing.assert_array_equal(HashedNgramExtractor(16)([]), np.zeros(16))

    def test_unit_norm(self, rng):
        ext = HashedNgramExtractor(16)
        np.testing.assert_allclose(np.linalg.norm(ext(rng.integers(0, 5, 9))), 1.0, rtol=1e-14)

    def test_counts(self):
        ext = HashedNgramExtractor(64, (1, 2))
        c = ext.counts([0, 1, 0])
        # 3 unigrams plus 2 bigrams.
        assert c.sum() == 5
        assert c[ext.bucket([0])] >= 2

    @settings(max_examples=50, deadline=None)
    @given(seq=st.lists(st.integers(0, 9), min_size=1, max_size=20), pos=st.integers(0, 19), tok=st.integers(0, 9))
    def test_one_token_edit_moves_few_counts(self, seq, pos, tok):
        # Changing one token touches at most `order` n-grams per order, each removed and added once.
        ext = HashedNgramExtractor(64, (1, 2))
        edited = list(seq)
        edited[pos % len(seq)] = tok
        diff = ext.counts(seq) - ext.counts(edited)
        assert np.count_nonzero(diff) <= 2 * sum(ext.orders)
        assert np.abs(diff).sum() <= 2 * sum(ext.orders)

    def test_config_hash_changes(self):
        assert HashedNgramExtractor(16).config_hash() != HashedNgramExtractor(32).config_hash()
        assert HashedNgramExtractor(16).config_hash() == HashedNgramExtractor(16).config_hash()

    def test_extract_features_accepts_instance(self):
        ext = HashedNgramExtractor(8)
        data = Dataset.from_payloads([np.array([1, 2])])
        np.testing.assert_array_equal(extract_features(ext, data[0]), ext([1, 2]))

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            HashedNgramExtractor(0)
        with pytest.raises(ConfigError):
            HashedNgramExtractor(8, ())


class TestSpearman:
    def test_identical(self):
        assert spearman([3, 1, 2, 7], [3, 1, 2, 7]) == 1.0

    def test_reversed(self):
        a = np.array([0.3, 1.0, 2.0, 5.0])
        np.testing.assert_allclose(spearman(a, a[::-1]), -1.0, rtol=1e-15)

    def test_textbook(self):
        np.testing.assert_allclose(spearman([1, 2, 3, 4], [1, 3, 2, 4]), 0.8, rtol=1e-14)

    def test_monotone_invariance(self, rng):
        a, b = rng.standard_normal(30), rng.standard_normal(30)
        np.testing.assert_allclose(spearman(np.exp(a), b ** 3), spearman(a, b), rtol=1e-14)

    def test_zero_variance(self):
        with pytest.raises(UndefinedCorrelationError):
            spearman([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_bad_shapes(self):
        with pytest.raises(ConfigError):
            spearman([1.0, 2.0], [1.0, 2.0, 3.0])


class TestRidge:
    def test_duplication_invariant(self, rng):
        X, y = rng.standard_normal((20, 5)), rng.standard_normal(20)
        w1, b1 = ridge_fit(X, y, 1e-2)
        w2, b2 = ridge_fit(np.vstack([X, X]), np.concatenate([y, y]), 1e-2)
        np.testing.assert_allclose(w1, w2, atol=1e-10)
        np.testing.assert_allclose(b1, b2, atol=1e-10)

    def test_beats_constant(self, rng):
        X, y = rng.standard_normal((40, 6)), rng.standard_normal(40)
        for reg in (1e-6, 1e-2, 1.0, 100.0):
            w, b = ridge_fit(X, y, reg)
            assert np.mean((X @ w + b - y) ** 2) <= np.mean((y - y.mean()) ** 2) + 1e-12

    def test_recovers_linear(self, rng):
        X = rng.standard_normal((30, 4))
        w0, b0 = rng.standard_normal(4), 0.7
        w, b = ridge_fit(X, X @ w0 + b0, 0.0)
        np.testing.assert_allclose(w, w0, atol=1e-10)
        np.testing.assert_allclose(b, b0, atol=1e-10)


class TestFitScorer:
    def test_linear_targets(self, rng):
        ext = HashedNgramExtractor(16)
        data = corpus(rng, 200)
        F = feature_matrix(ext, data)
        target = F @ rng.standard_normal(16) + 0.3
        model = fit_scorer(data, target, ext, regs=(1e-12,))
        np.testing.assert_allclose(model.val_spearman, 1.0, atol=1e-6)
        assert np.mean((model.predict_features(F) - target) ** 2) < 1e-10
        assert not model.flagged

    def test_random_targets_flagged(self):
        rhos = []
        for seed in range(20):
            r = np.random.default_rng(seed)
            data = corpus(r, 100)
            model = fit_scorer(data, r.standard_normal(100), HashedNgramExtractor(16), seed=seed)
            assert model.flagged == (model.val_spearman is None or model.val_spearman < 0.2)
            rhos.append(model.val_spearman)
        assert np.median(np.abs(rhos)) < 0.35

    def test_degenerate_targets(self, rng):
        data = corpus(rng, 20)
        model = fit_scorer(data, np.full(20, 0.05), HashedNgramExtractor(8))
        assert model.flagged and model.val_spearman is None
        np.testing.assert_array_equal(infer_scores(model, data), np.full(20, 0.05))

    def test_train_predictions_are_fitted_values(self, rng):
        ext = HashedNgramExtractor(16)
        data = corpus(rng, 50)
        model = fit_scorer(data, rng.standard_normal(50), ext)
        F = feature_matrix(ext, data)
        np.testing.assert_array_equal(infer_scores(model, data), model.predict_features(F))

    def test_identical_corpus(self, rng):
        ext = HashedNgramExtractor(16)
        model = fit_scorer(corpus(rng, 50), rng.standard_normal(50), ext)
        same = Dataset.from_payloads([np.array([1, 2, 3])] * 5)
        scores = infer_scores(model, same)
        assert np.all(scores == scores[0])

    def test_permutation_invariant(self, rng):
        ext = HashedNgramExtractor(16)
        data = corpus(rng, 60)
        gamma = rng.random(60)
        perm = rng.permutation(60)
        shuffled = Dataset.from_payloads([data[i].payload for i in perm], role="proxy")
        probe = corpus(rng, 10)
        a = infer_scores(fit_scorer(data, gamma, ext), probe)
        b = infer_scores(fit_scorer(shuffled, gamma[perm], ext), probe)
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)

    def test_adamw_mode(self, rng):
        ext = HashedNgramExtractor(16)
        data = corpus(rng, 60)
        model = fit_scorer(data, rng.random(60), ext, method="adamw")
        assert model.reg is None and model.w.shape == (16,)

    def test_target_length(self, rng):
        with pytest.raises(ConfigError):
            fit_scorer(corpus(rng, 10), np.ones(9))

    def test_extractor_mismatch(self, rng):
        model = fit_scorer(corpus(rng, 30), rng.random(30), HashedNgramExtractor(16))
        with pytest.raises(ConfigError):
            infer_scores(model, corpus(rng, 3), HashedNgramExtractor(32).config_hash())


class TestPersistence:
    def test_round_trip(self, rng, tmp_path):
        ext = HashedNgramExtractor(16, (1, 3))
        data = corpus(rng, 40)
        model = fit_scorer(data, rng.random(40), ext)
        model.save(tmp_path / "s.json")
        back = ScorerModel.load(tmp_path / "s.json")
        np.testing.assert_array_equal(infer_scores(back, data), infer_scores(model, data))
        doc = json.loads((tmp_path / "s.json").read_text())
        assert doc["d"] == 16 and doc["extractor"]["orders"] == [1, 3]

    def test_tampered_hash(self, rng, tmp_path):
        model = fit_scorer(corpus(rng, 30), rng.random(30), HashedNgramExtractor(16))
        model.save(tmp_path / "s.json")
        doc = json.loads((tmp_path / "s.json").read_text())
        doc["extractor"]["dim"] = 8
        doc["w"] = doc["w"][:8]
        (tmp_path / "s.json").write_text(json.dumps(doc))
        with pytest.raises(ConfigError):
            ScorerModel.load(tmp_path / "s.json")


class TestSplit:
    def test_sizes(self):
        tr, va = split_indices(50, 0.1, 0)
        assert len(va) == 5 and len(tr) == 45
        assert set(tr).isdisjoint(va)

    def test_bad_fraction(self):
        with pytest.raises(ConfigError):
            split_indices(10, 0.9, 0)
