import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from distlab.datagen import (DegenerateDistributionError, FeatureSpec, FeatureVocabulary,
                             GroundTruthUnavailable, ParseError, TransformSet, dataset_from_names,
                             feature_cooccurrence_stats, load_dataset, load_external,
                             manifold_vocabulary, random_vocabulary, sample_dataset, sample_splits,
                             save_dataset, split_external, true_label_distribution)


def _vocab(label_rows, weights=None, patch_dim=2, scale=0.1):
    feats = [FeatureSpec(f"z{i}", row, np.full(patch_dim, float(i)), scale)
             for i, row in enumerate(label_rows)]
    n = len(feats)
    return FeatureVocabulary(len(label_rows[0]), patch_dim, feats,
                             np.full(n, 1.0 / n) if weights is None else np.asarray(weights))


class TestVocabulary:
    def test_rejects_non_simplex_label_distribution(self):
        with pytest.raises(ValueError):
            FeatureSpec("z", np.array([0.5, 0.6]), np.zeros(2), 0.1)

    def test_rejects_sampling_weights_off_simplex(self):
        with pytest.raises(ValueError):
            _vocab([[1.0, 0.0], [0.0, 1.0]], weights=[0.5, 0.6])

    def test_round_trip(self):
        vocab = manifold_vocabulary(6, 3, 4, seed=1)
        again = FeatureVocabulary.from_dict(vocab.to_dict())
        np.testing.assert_array_equal(again.label_matrix, vocab.label_matrix)
        np.testing.assert_array_equal(again.cooccurrence, vocab.cooccurrence)

    def test_manifold_cooccurrence_rows_are_stochastic(self):
        vocab = manifold_vocabulary(12, 4, 3, seed=0)
        np.testing.assert_allclose(vocab.cooccurrence.sum(axis=1), 1.0, atol=1e-12)


class TestTrueLabelDistribution:
    def test_single_feature_identity(self):
        vocab = _vocab([[0.2, 0.8], [0.6, 0.4]])
        np.testing.assert_allclose(true_label_distribution(vocab, [1]), [0.6, 0.4], atol=1e-15)

    def test_idempotent(self):
        vocab = _vocab([[0.2, 0.3, 0.5]])
        np.testing.assert_allclose(true_label_distribution(vocab, [0, 0]), [0.2, 0.3, 0.5], atol=1e-15)

    def test_geometric_mean_of_mirrored_pair(self):
        vocab = _vocab([[2 / 3, 1 / 3], [1 / 3, 2 / 3]])
        # oracle: sqrt(2/9) in both entries, renormalized
        raw = np.sqrt(np.array([2 / 3 * 1 / 3, 1 / 3 * 2 / 3]))
        np.testing.assert_allclose(true_label_distribution(vocab, [0, 1]), raw / raw.sum(), atol=1e-15)
        np.testing.assert_allclose(true_label_distribution(vocab, [0, 1]), [0.5, 0.5], atol=1e-15)

    def test_degenerate(self):
        vocab = _vocab([[1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(DegenerateDistributionError, match="degenerate geometric mean"):
            true_label_distribution(vocab, [0, 1])

    def test_partial_zero_is_allowed(self):
        vocab = _vocab([[0.5, 0.5, 0.0], [0.25, 0.25, 0.5]])
        out = true_label_distribution(vocab, [0, 1])
        assert out[2] == 0.0
        np.testing.assert_allclose(out, [0.5, 0.5, 0.0])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 6))
    def test_on_simplex(self, seed, m):
        vocab = random_vocabulary(7, 4, 2, seed=seed, concentration=0.5)
        names = np.random.default_rng(seed).integers(7, size=m)
        out = true_label_distribution(vocab, names)
        assert np.all(out >= 0)
        assert abs(out.sum() - 1.0) <= 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_matches_product_oracle(self, seed):
        rng = np.random.default_rng(seed)
        vocab = random_vocabulary(5, 3, 2, seed=seed)
        names = rng.integers(5, size=3)
        prod = np.prod([vocab.label_matrix[z] for z in names], axis=0) ** (1 / 3)
        np.testing.assert_allclose(true_label_distribution(vocab, names), prod / prod.sum(), rtol=1e-12)


class TestSampleDataset:
    def test_deterministic_single_feature(self):
        vocab = _vocab([[1.0, 0.0]])
        data = sample_dataset(vocab, 1, 1, seed=0)
        assert data.labels[0] == 0
        np.testing.assert_array_equal(data.true_distribution[0], [1.0, 0.0])

    def test_feature_frequency_binomial(self):
        vocab = _vocab([[0.5, 0.5], [0.5, 0.5]])
        data = sample_dataset(vocab, 10_000, 1, seed=3)
        freq = np.mean(data.feature_names[:, 0] == 0)
        assert abs(freq - 0.5) <= 3 * np.sqrt(0.25 / 10_000)

    def test_same_seed_identical_bytes(self, tmp_path):
        vocab = random_vocabulary(5, 3, 4, seed=0)
        tf = TransformSet.random(4, 3, 0.5, seed=0)
        a = save_dataset(sample_dataset(vocab, 50, 3, tf, seed=9), tmp_path / "a")
        b = save_dataset(sample_dataset(vocab, 50, 3, tf, seed=9), tmp_path / "b")
        for f in sorted(p.name for p in a.iterdir()):
            assert (a / f).read_bytes() == (b / f).read_bytes()

    def test_true_distributions_on_simplex(self):
        data = sample_dataset(random_vocabulary(10, 4, 3, seed=1, concentration=0.3), 2000, 4, seed=1)
        assert np.all(data.true_distribution >= 0)
        np.testing.assert_allclose(data.true_distribution.sum(axis=1), 1.0, atol=1e-12)

    def test_representation_bound_before_transform(self):
        vocab = random_vocabulary(6, 3, 5, seed=2, representation_scale=0.25)
        data = sample_dataset(vocab, 500, 3, TransformSet.random(5, 4, 1.0, seed=2), seed=2)
        dev = np.abs(data.base_patches - vocab.means[data.feature_names])
        assert dev.max() <= 0.25

    def test_transform_magnitude_bound_respected(self):
        vocab = random_vocabulary(6, 3, 4, seed=2, representation_scale=0.3)
        tf = TransformSet.random(4, 5, 0.8, seed=4, permute=True)
        data = sample_dataset(vocab, 1000, 3, tf, seed=4)
        moved = np.linalg.norm(data.patches - data.base_patches, axis=-1)
        assert moved.max() <= tf.magnitude_bound(vocab) + 1e-12

    def test_label_frequencies_chi_square(self):
        vocab = random_vocabulary(4, 3, 2, seed=5)
        names = np.tile([0, 2, 3], (100_000, 1))
        data = dataset_from_names(vocab, names, seed=5)
        expected = true_label_distribution(vocab, [0, 2, 3]) * len(data)
        observed = np.bincount(data.labels, minlength=3)
        assert stats.chisquare(observed, expected).pvalue > 0.01

    def test_splits_are_disjoint_ranges(self):
        vocab = random_vocabulary(4, 3, 2, seed=0)
        splits = sample_splits(vocab, {"train": 30, "holdout": 10, "test": 20}, 2, seed=0)
        ranges = [(d.index_offset, d.index_offset + len(d)) for d in splits.values()]
        assert ranges == [(0, 30), (30, 40), (40, 60)]
        assert not np.array_equal(splits["train"].labels[:10], splits["holdout"].labels)

    def test_anchored_mode_draws_neighbours(self):
        vocab = manifold_vocabulary(16, 3, 2, seed=0, neighbors=1)
        data = sample_dataset(vocab, 4000, 2, seed=0)
        circ = np.abs(data.feature_names[:, 0] - data.feature_names[:, 1])
        circ = np.minimum(circ, 16 - circ)
        assert np.mean(circ <= 2) > 0.7


class TestCooccurrence:
    def test_counting(self):
        vocab = _vocab([[0.5, 0.5]] * 3)
        data = dataset_from_names(vocab, [[1, 0], [2, 2], [1, 1]])
        counts, pairs = feature_cooccurrence_stats(data)
        np.testing.assert_array_equal(counts, [1, 2, 1])
        assert pairs[0, 1] == 1 and pairs[1, 2] == 0

    def test_partition_when_m_is_one(self):
        data = sample_dataset(random_vocabulary(5, 2, 2, seed=0), 300, 1, seed=0)
        counts, _ = feature_cooccurrence_stats(data)
        assert counts.sum() == 300

    def test_inclusion_probability(self):
        z, m, n = 8, 3, 40_000
        data = sample_dataset(random_vocabulary(z, 2, 2, seed=0), n, m, seed=0)
        counts, _ = feature_cooccurrence_stats(data)
        p = 1 - (1 - 1 / z) ** m
        np.testing.assert_allclose(counts / n, p, atol=4 * np.sqrt(p * (1 - p) / n))

    def test_requires_ground_truth(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("0,1.0\n1,2.0\n")
        with pytest.raises(GroundTruthUnavailable):
            feature_cooccurrence_stats(load_external(path, "csv"))


def _idx_bytes(magic, dims, payload):
    return struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims) + bytes(payload)


class TestExternal:
    def test_idx_labels(self, tmp_path):
        from distlab.datagen import read_idx_labels
        path = tmp_path / "labels.idx"
        path.write_bytes(_idx_bytes(0x801, [3], [2, 0, 1]))
        np.testing.assert_array_equal(read_idx_labels(path), [2, 0, 1])

    def test_idx_pair(self, tmp_path):
        img = tmp_path / "img.idx"
        lab = tmp_path / "lab.idx"
        img.write_bytes(_idx_bytes(0x803, [2, 2, 2], [0, 255, 51, 102, 0, 0, 0, 255]))
        lab.write_bytes(_idx_bytes(0x801, [2], [1, 0]))
        data = load_external(img, "idx", labels_path=lab)
        assert data.patches.shape == (2, 1, 4)
        np.testing.assert_allclose(data.patches[0, 0], [0, 1, 0.2, 0.4])
        assert not data.has_ground_truth

    def test_truncated_idx_payload(self, tmp_path):
        from distlab.datagen import read_idx_images
        path = tmp_path / "img.idx"
        path.write_bytes(_idx_bytes(0x803, [2, 2, 2], [0] * 5))
        with pytest.raises(ParseError, match="has 5 bytes, expected 8"):
            read_idx_images(path)

    def test_bad_magic(self, tmp_path):
        from distlab.datagen import read_idx_labels
        path = tmp_path / "labels.idx"
        path.write_bytes(_idx_bytes(0x803, [1], [0]))
        with pytest.raises(ParseError, match="magic"):
            read_idx_labels(path)

    def test_csv_row(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("label,a,b\n2,0.1,0.5\n")
        data = load_external(path, "csv", n_classes=3)
        assert data.labels[0] == 2
        np.testing.assert_array_equal(data.patches[0, 0], [0.1, 0.5])

    def test_csv_row_length_mismatch(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("0,1,2\n1,3\n")
        with pytest.raises(ParseError, match="line 2"):
            load_external(path, "csv")

    def test_modular_split(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("".join(f"{i % 2},{i}\n" for i in range(30)))
        splits = split_external(load_external(path, "csv"))
        assert [len(splits[s]) for s in ("train", "holdout", "temperature-holdout")] == [24, 3, 3]
        np.testing.assert_array_equal(splits["holdout"].patches[:, 0, 0], [8, 18, 28])


def test_dataset_round_trip(tmp_path):
    vocab = manifold_vocabulary(5, 3, 2, seed=0)
    data = sample_dataset(vocab, 40, 3, TransformSet.random(2, 3, 0.4, seed=0), seed=0, split="test")
    again = load_dataset(save_dataset(data, tmp_path / "ds"))
    for attr in ("patches", "labels", "feature_names", "true_distribution", "base_patches"):
        np.testing.assert_array_equal(getattr(again, attr), getattr(data, attr))
    assert again.split == "test"
    np.testing.assert_array_equal(again.vocabulary.cooccurrence, vocab.cooccurrence)
