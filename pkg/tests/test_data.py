import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mtdl.data import (Dataset, SynthSpec, class_dictionary, generate_synthetic, jsrc_dictionary, load_dataset,
                       read_matrix, residual_classify, save_dataset, score, write_matrix)
from mtdl.errors import BadMagic, DimensionMismatch, InvalidSpec, TruncatedFile

NOISE_FREE = SynthSpec(n_classes=5, n_modalities=2, dims=(8, 9), atoms_per_class=1, train_per_class=3,
                       test_per_class=4, noise=0.0, one_hot=True)


def random_dataset(rng, N=7):
    feats = [rng.standard_normal((4, N)), rng.standard_normal((6, N))]
    splits = rng.choice(["train", "val", "test"], N)
    return Dataset(feats, rng.integers(1, 4, N), ["a", "b"], splits)


def test_generator_is_seeded_and_normalized():
    a, b, c = (generate_synthetic(SynthSpec(n_classes=3, dims=(6, 7, 8)), s) for s in (1, 1, 2))
    for X, Y in zip(a.features, b.features):
        np.testing.assert_array_equal(X, Y)
    assert not np.allclose(a.features[0], c.features[0])
    for X in a.features:
        np.testing.assert_allclose(X.mean(axis=0), 0, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(X, axis=0), 1, atol=1e-12)
    assert a.n_samples == 3 * 60 and set(a.splits) == {"train", "test"}
    assert len(a.truth) == 3 and a.truth[0][0].shape == (6, 3)


def test_generator_rejects_bad_spec():
    with pytest.raises(InvalidSpec):
        generate_synthetic(SynthSpec(n_classes=1))
    with pytest.raises(InvalidSpec):
        generate_synthetic(SynthSpec(n_modalities=2, dims=(5, 5, 5)))
    with pytest.raises(InvalidSpec):
        generate_synthetic(SynthSpec(noise=-1.0))


def test_correlated_mode_shares_coefficients():
    ds = generate_synthetic(SynthSpec(n_classes=2, n_modalities=2, dims=(10, 10), noise=0.0, correlated=True,
                                      class_similarity=0.0), 0)
    # same coefficients on the planted atoms in both modalities
    for i in range(5):
        c = ds.labels[i] - 1
        coefs = [np.linalg.lstsq(ds.truth[s][c], ds.features[s][:, i], rcond=None)[0] for s in range(2)]
        coefs = [v / np.abs(v).max() for v in coefs]
        np.testing.assert_allclose(coefs[0], coefs[1], atol=1e-8)


def test_round_trip_is_bit_exact(tmp_path, rng):
    ds = random_dataset(rng)
    save_dataset(ds, tmp_path / "a")
    back = load_dataset(tmp_path / "a")
    for X, Y in zip(ds.features, back.features):
        assert X.tobytes() == Y.tobytes()
    np.testing.assert_array_equal(ds.labels, back.labels)
    np.testing.assert_array_equal(ds.splits, back.splits)
    assert back.names == ["a", "b"]
    save_dataset(back, tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_matrix_header_layout(tmp_path):
    M = np.arange(6.0).reshape(2, 3)
    write_matrix(tmp_path / "m.bin", M)
    raw = (tmp_path / "m.bin").read_bytes()
    assert raw[:4] == b"JSDL" and len(raw) == 16 + 48
    assert int.from_bytes(raw[4:8], "little") == 2 and int.from_bytes(raw[8:12], "little") == 3
    assert np.frombuffer(raw[16:24], "<f8")[0] == 0.0 and np.frombuffer(raw[24:32], "<f8")[0] == 1.0
    np.testing.assert_array_equal(read_matrix(tmp_path / "m.bin"), M)


def test_corrupt_files(tmp_path, rng):
    ds = random_dataset(rng)
    save_dataset(ds, tmp_path)
    f = tmp_path / "modality_0.bin"
    raw = f.read_bytes()
    f.write_bytes(raw[:-8])
    with pytest.raises(TruncatedFile):
        load_dataset(tmp_path)
    f.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagic):
        load_dataset(tmp_path)
    f.write_bytes(raw)
    write_matrix(tmp_path / "modality_2.bin", np.zeros((3, 7)))
    with pytest.raises(DimensionMismatch):
        load_dataset(tmp_path)


def test_noise_free_residual_classification_is_perfect():
    ds = generate_synthetic(NOISE_FREE, 0)
    D, tags = jsrc_dictionary(ds.subset("train"))
    test = ds.subset("test")
    pred = residual_classify(test.rows(), D, tags, 0.05)
    assert score(test.labels, pred).accuracy == 1.0


def test_orthogonal_sample_goes_to_first_class():
    D, tags = class_dictionary([[np.eye(3)[:, :1]], [np.eye(3)[:, 1:2]]])
    pred = residual_classify([np.array([[0.0, 0.0, 1.0]])], D, tags, 0.1)
    assert pred.tolist() == [1]


def test_score_examples(rng):
    y = np.array([1, 2, 2, 3, 3, 3])
    m = score(y, y)
    assert m.accuracy == 1.0
    np.testing.assert_array_equal(m.confusion.sum(axis=1), [1, 2, 3])
    assert m.to_csv().startswith("accuracy,1.0\n")


def test_random_binary_predictions_are_near_half():
    r = np.random.default_rng(7)
    n = 4000
    y = np.repeat([1, 2], n // 2)
    acc = score(y, r.integers(1, 3, n)).accuracy
    assert abs(acc - 0.5) < 3 * np.sqrt(0.25 / n)


@given(st.lists(st.integers(1, 4), min_size=1, max_size=50), st.integers(0, 1000))
def test_confusion_rows_sum_to_class_counts(labels, seed):
    y = np.array(labels)
    pred = np.random.default_rng(seed).integers(1, 5, y.size)
    m = score(y, pred, 4)
    np.testing.assert_array_equal(m.confusion.sum(axis=1), np.bincount(y - 1, minlength=4))
    assert 0 <= m.accuracy <= 1


def test_dataset_validation(rng):
    with pytest.raises(DimensionMismatch):
        Dataset([np.zeros((3, 4))], np.ones(5, dtype=int))
