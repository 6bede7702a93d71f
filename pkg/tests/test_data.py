import numpy as np
import pytest

from noisylab.data import (
    CorruptHeaderError,
    DatasetError,
    DoubleInjectionError,
    LabeledDataset,
    NoiseSpec,
    PayloadShapeError,
    VersionMismatchError,
    empirical_transition_matrix,
    export_labels_csv,
    generate_blobs,
    inject_noise,
    load_dataset,
    save_dataset,
)


def _linear_probe_accuracy(ds):
    """Independent check of separability: ridge regression to one-hot
    targets, evaluated on the training data itself."""
    x = ds.features.reshape(len(ds), -1).astype(np.float64)
    x = np.hstack([x, np.ones((len(x), 1))])
    y = np.zeros((len(ds), ds.num_classes))
    y[np.arange(len(ds)), ds.clean_labels] = 1.0
    w = np.linalg.solve(x.T @ x + 1e-3 * np.eye(x.shape[1]), x.T @ y)
    return float(np.mean((x @ w).argmax(axis=1) == ds.clean_labels))


class TestGenerateBlobs:
    def test_flat_shapes_and_dtypes(self):
        ds = generate_blobs(100, 4, 2, 3.0, seed=0)
        assert ds.features.shape == (100, 2)
        assert ds.features.dtype == np.float32
        assert ds.clean_labels.dtype == np.int32
        assert not ds.is_image

    def test_image_values_in_unit_interval(self):
        ds = generate_blobs(50, 3, (8, 8), 2.0, seed=1)
        assert ds.features.shape == (50, 8, 8)
        assert ds.is_image
        assert ds.features.min() >= 0.0 and ds.features.max() <= 1.0

    def test_every_class_present(self):
        for seed in range(5):
            ds = generate_blobs(10, 5, 2, 1.0, seed=seed)
            assert set(np.unique(ds.clean_labels)) == set(range(5))

    def test_deterministic(self):
        a = generate_blobs(64, 4, (8, 8), 2.0, seed=7)
        b = generate_blobs(64, 4, (8, 8), 2.0, seed=7)
        assert a == b

    def test_seed_changes_data(self):
        a = generate_blobs(64, 4, 2, 2.0, seed=7)
        b = generate_blobs(64, 4, 2, 2.0, seed=8)
        assert a != b

    def test_high_separation_linearly_separable(self):
        ds = generate_blobs(400, 4, 2, 8.0, seed=3)
        assert _linear_probe_accuracy(ds) > 0.99

    def test_zero_separation_not_separable(self):
        ds = generate_blobs(400, 4, 2, 0.0, seed=3)
        assert _linear_probe_accuracy(ds) < 0.5

    def test_separation_zero_allowed_negative_rejected(self):
        generate_blobs(10, 2, 2, 0.0, seed=0)
        with pytest.raises(DatasetError):
            generate_blobs(10, 2, 2, -1.0, seed=0)

    def test_too_few_samples_rejected(self):
        with pytest.raises(DatasetError):
            generate_blobs(3, 4, 2, 1.0, seed=0)

    def test_bad_shapes_rejected(self):
        with pytest.raises(DatasetError):
            generate_blobs(10, 2, 0, 1.0, seed=0)
        with pytest.raises(DatasetError):
            generate_blobs(10, 2, (8,), 1.0, seed=0)


class TestLabeledDataset:
    def test_invariants_enforced(self):
        feats = np.zeros((4, 2), dtype=np.float32)
        labels = np.zeros(4, dtype=np.int32)
        with pytest.raises(DatasetError):
            LabeledDataset(feats, labels, labels[:3], np.zeros(4, bool), 2)
        with pytest.raises(DatasetError):
            LabeledDataset(feats, labels + 5, labels + 5, np.zeros(4, bool), 2)
        with pytest.raises(DatasetError):
            LabeledDataset(feats, labels, labels, np.ones(4, bool), 2)

    def test_subset(self):
        ds = generate_blobs(20, 2, 2, 1.0, seed=0)
        sub = ds.subset([3, 5, 7])
        assert len(sub) == 3
        np.testing.assert_array_equal(sub.features, ds.features[[3, 5, 7]])


class TestInjectNoise:
    def test_exact_flip_counts_symmetric(self):
        ds = generate_blobs(1000, 4, 2, 2.0, seed=0)
        out = inject_noise(ds, NoiseSpec("symmetric", 0.3, 4, seed=1))
        for k in range(4):
            members = ds.clean_labels == k
            expected = int(round(0.3 * members.sum()))
            assert (out.corrupted & members).sum() == expected

    def test_symmetric_never_flips_to_self(self):
        ds = generate_blobs(2000, 4, 2, 2.0, seed=0)
        out = inject_noise(ds, NoiseSpec("symmetric", 0.5, 4, seed=1))
        assert np.all(out.noisy_labels[out.corrupted] != out.clean_labels[out.corrupted])

    def test_asymmetric_next_class_only(self):
        ds = generate_blobs(1000, 4, 2, 2.0, seed=0)
        out = inject_noise(ds, NoiseSpec("asymmetric", 0.4, 4, seed=1))
        flipped = out.corrupted
        np.testing.assert_array_equal(
            out.noisy_labels[flipped], (out.clean_labels[flipped] + 1) % 4
        )

    def test_asymmetric_no_wrap_leaves_last_class(self):
        ds = generate_blobs(1000, 4, 2, 2.0, seed=0)
        out = inject_noise(ds, NoiseSpec("asymmetric", 0.4, 4, seed=1, wrap_last_class=False))
        last = ds.clean_labels == 3
        assert not out.corrupted[last].any()
        assert out.corrupted[~last].any()

    def test_double_injection_rejected(self):
        ds = generate_blobs(100, 4, 2, 2.0, seed=0)
        out = inject_noise(ds, NoiseSpec("symmetric", 0.2, 4, seed=1))
        with pytest.raises(DoubleInjectionError):
            inject_noise(out, NoiseSpec("symmetric", 0.2, 4, seed=2))

    def test_epsilon_zero_is_identity(self):
        ds = generate_blobs(100, 4, 2, 2.0, seed=0)
        out = inject_noise(ds, NoiseSpec("symmetric", 0.0, 4, seed=1))
        assert out == ds

    def test_original_untouched(self):
        ds = generate_blobs(100, 4, 2, 2.0, seed=0)
        inject_noise(ds, NoiseSpec("symmetric", 0.5, 4, seed=1))
        assert not ds.corrupted.any()
        np.testing.assert_array_equal(ds.clean_labels, ds.noisy_labels)

    def test_class_count_mismatch_rejected(self):
        ds = generate_blobs(100, 4, 2, 2.0, seed=0)
        with pytest.raises(DatasetError):
            inject_noise(ds, NoiseSpec("symmetric", 0.2, 5, seed=1))

    def test_spec_validation(self):
        with pytest.raises(DatasetError):
            NoiseSpec("diagonal", 0.2, 4, seed=0)
        with pytest.raises(DatasetError):
            NoiseSpec("symmetric", 1.5, 4, seed=0)
        with pytest.warns(UserWarning):
            NoiseSpec("asymmetric", 0.7, 4, seed=0)


class TestTransitionMatrix:
    def test_rows_stochastic(self):
        ds = generate_blobs(1000, 4, 2, 2.0, seed=0)
        out = inject_noise(ds, NoiseSpec("symmetric", 0.4, 4, seed=1))
        matrix, undefined = empirical_transition_matrix(out)
        assert not undefined.any()
        np.testing.assert_allclose(matrix.sum(axis=1), 1.0)

    def test_undefined_rows_flagged(self):
        feats = np.zeros((3, 2), dtype=np.float32)
        labels = np.zeros(3, dtype=np.int32)
        ds = LabeledDataset(feats, labels, labels.copy(), np.zeros(3, bool), 3)
        matrix, undefined = empirical_transition_matrix(ds)
        assert undefined.tolist() == [False, True, True]
        assert np.isnan(matrix[1]).all() and np.isnan(matrix[2]).all()
        np.testing.assert_allclose(matrix[0], [1.0, 0.0, 0.0])


class TestPersistence:
    def test_roundtrip_bit_exact(self, tmp_path):
        ds = generate_blobs(64, 4, (8, 8), 2.0, seed=0)
        ds = inject_noise(ds, NoiseSpec("symmetric", 0.4, 4, seed=1))
        path = tmp_path / "ds.bin"
        save_dataset(ds, path)
        assert load_dataset(path) == ds

    def test_flat_roundtrip(self, tmp_path):
        ds = generate_blobs(32, 2, 3, 1.0, seed=5)
        path = tmp_path / "ds.bin"
        save_dataset(ds, path)
        assert load_dataset(path) == ds

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"XXXX" + bytes(64))
        with pytest.raises(CorruptHeaderError):
            load_dataset(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "short.bin"
        path.write_bytes(b"NL")
        with pytest.raises(CorruptHeaderError):
            load_dataset(path)

    def test_version_mismatch(self, tmp_path):
        ds = generate_blobs(8, 2, 2, 1.0, seed=0)
        path = tmp_path / "ds.bin"
        save_dataset(ds, path)
        blob = bytearray(path.read_bytes())
        blob[4] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionMismatchError):
            load_dataset(path)

    def test_truncated_payload(self, tmp_path):
        ds = generate_blobs(8, 2, 2, 1.0, seed=0)
        path = tmp_path / "ds.bin"
        save_dataset(ds, path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(PayloadShapeError):
            load_dataset(path)

    def test_labels_csv(self, tmp_path):
        ds = generate_blobs(10, 2, 2, 1.0, seed=0)
        path = tmp_path / "labels.csv"
        export_labels_csv(ds, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "index,clean_label,noisy_label,corrupted"
        assert len(lines) == 11
