import numpy as np
import pytest

from lapreg.errors import ConfigError, DataError
from lapreg.matching import (CorrespondenceSet, MatchingConfig, dual_softmax,
                             load_correspondences, match_by_nearest_feature,
                             mutual_nn_threshold, save_correspondences,
                             similarity)


def test_similarity_is_cosine(rng):
    FA = rng.normal(size=(7, 5))
    FB = rng.normal(size=(9, 5))
    S = similarity(FA, FB)
    for i in range(7):
        for j in range(9):
            expected = np.dot(FA[i], FB[j]) / (
                np.linalg.norm(FA[i]) * np.linalg.norm(FB[j]))
            assert S[i, j] == pytest.approx(expected, abs=1e-12)


def test_similarity_zero_rows_give_zero_scores(rng):
    FA = np.vstack([np.zeros(4), rng.normal(size=4)])
    FB = rng.normal(size=(3, 4))
    S = similarity(FA, FB)
    np.testing.assert_array_equal(S[0], 0.0)
    assert np.all(np.abs(S[1]) <= 1.0 + 1e-12)


def test_similarity_dim_mismatch():
    with pytest.raises(DataError):
        similarity(np.zeros((2, 3)), np.zeros((2, 4)))


class TestDualSoftmax:
    def test_matches_explicit_product(self, rng):
        S = rng.normal(size=(6, 8))
        tau = 0.7
        M = dual_softmax(S, temperature=tau)
        Z = S / tau
        row = np.exp(Z) / np.exp(Z).sum(axis=1, keepdims=True)
        col = np.exp(Z) / np.exp(Z).sum(axis=0, keepdims=True)
        np.testing.assert_allclose(M, row * col, atol=1e-12)

    def test_small_temperature_concentrates_on_mutual_maxima(self, rng):
        S = rng.normal(size=(10, 10))
        M = dual_softmax(S, temperature=1e-6)
        for i in range(10):
            j = int(np.argmax(S[i]))
            if int(np.argmax(S[:, j])) == i:
                assert M[i, j] > 0.999
            else:
                assert M[i, j] < 1e-6

    def test_temperature_validation(self):
        with pytest.raises(ConfigError):
            dual_softmax(np.zeros((2, 2)), temperature=0.0)

    def test_overflow_safe(self):
        S = np.array([[1000.0, -1000.0], [-1000.0, 1000.0]])
        M = dual_softmax(S, temperature=1.0)
        assert np.all(np.isfinite(M))
        assert M[0, 0] > 0.999


class TestMutualNn:
    def test_matches_brute_force(self, rng):
        M = rng.uniform(size=(12, 9))
        got = mutual_nn_threshold(M, threshold=0.3)
        expected = []
        for i in range(12):
            j = int(np.argmax(M[i]))
            if int(np.argmax(M[:, j])) == i and M[i, j] >= 0.3:
                expected.append((i, j, M[i, j]))
        assert [(int(a), int(b)) for a, b in got.pairs] == \
            [(a, b) for a, b, _ in expected]
        np.testing.assert_allclose(got.confidence,
                                   [c for _, _, c in expected])

    def test_one_to_one(self, rng):
        M = rng.uniform(size=(30, 20))
        got = mutual_nn_threshold(M, threshold=0.0)
        assert len(np.unique(got.pairs[:, 0])) == len(got.pairs)
        assert len(np.unique(got.pairs[:, 1])) == len(got.pairs)

    def test_tie_breaks_to_lowest_index(self):
        M = np.array([[0.5, 0.5], [0.1, 0.2]])
        got = mutual_nn_threshold(M, threshold=0.05)
        assert (0, 0) in {tuple(p) for p in got.pairs}

    def test_empty_matrix_rejected(self):
        with pytest.raises(DataError):
            mutual_nn_threshold(np.zeros((0, 0)))


class TestNearestFeatureBaseline:
    def test_matches_brute_force(self, rng):
        FA = rng.normal(size=(25, 33))
        FB = rng.normal(size=(18, 33))
        got = match_by_nearest_feature(FA, FB)
        assert got.pairs.shape == (18, 2)
        np.testing.assert_array_equal(got.pairs[:, 1], np.arange(18))
        for j in range(18):
            d = np.linalg.norm(FA - FB[j], axis=1)
            assert got.pairs[j, 0] == int(np.argmin(d))
            assert got.confidence[j] == pytest.approx(1.0 / (1.0 + d.min()))

    def test_identical_rows_tie_to_lower_source(self):
        FA = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        FB = np.array([[1.0, 0.0]])
        got = match_by_nearest_feature(FA, FB)
        assert got.pairs[0, 0] == 0

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            match_by_nearest_feature(np.zeros((0, 3)), np.zeros((2, 3)))


def test_correspondence_roundtrip(tmp_path, rng):
    pairs = np.array([[3, 0], [1, 1], [4, 2]])
    conf = np.array([0.9, 0.8, 0.7])
    path = tmp_path / "matches.json"
    save_correspondences(path, CorrespondenceSet(pairs, conf))
    back = load_correspondences(path)
    np.testing.assert_array_equal(back.pairs, pairs)
    np.testing.assert_allclose(back.confidence, conf)


def test_correspondence_bad_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"not": "a list"}')
    with pytest.raises(DataError):
        load_correspondences(path)


def test_correspondence_validation():
    with pytest.raises(DataError):
        CorrespondenceSet(np.array([[0, 1, 2]]))
    with pytest.raises(DataError):
        CorrespondenceSet(np.array([[-1, 0]]))
    with pytest.raises(DataError):
        CorrespondenceSet(np.array([[0, 0]]), np.array([0.5, 0.5]))


def test_matching_config_defaults_and_validation():
    cfg = MatchingConfig()
    assert cfg.temperature > 0
    assert 0 <= cfg.threshold <= 1
    with pytest.raises(ConfigError):
        MatchingConfig(temperature=-1.0)
    with pytest.raises(ConfigError):
        MatchingConfig(threshold=2.0)
