import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from descdistill import data as D


@pytest.fixture(scope="module")
def store():
    return D.generate_synthetic(60, 3, seed=7)


def test_synthetic_counts():
    s = D.generate_synthetic(100, 2, seed=7)
    assert len(s) == 200 and s.num_points == 100
    assert s.patches.shape == (200, 64, 64) and s.patches.dtype == np.uint8


def test_synthetic_deterministic(store):
    assert D.generate_synthetic(60, 3, seed=7).digest() == store.digest()
    assert D.generate_synthetic(60, 3, seed=8).digest() != store.digest()


def test_synthetic_rejects_single_point():
    with pytest.raises(ValueError):
        D.generate_synthetic(1, 2)


def test_colabelled_patches_more_correlated(store):
    x = store.patches.reshape(len(store), -1).astype(np.float64)
    x = (x - x.mean(1, keepdims=True)) / x.std(1, keepdims=True)
    corr = x @ x.T / x.shape[1]
    same = store.point_ids[:, None] == store.point_ids[None, :]
    off = ~np.eye(len(store), dtype=bool)
    assert corr[same & off].mean() > corr[~same].mean() + 0.2


def test_every_label_referenced(store):
    assert set(store.groups) == set(np.unique(store.point_ids).tolist())
    assert sum(len(g) for g in store.groups.values()) == len(store)


# ------------------------------------------------------------- UBC layout


def test_ubc_round_trip(tmp_path):
    s = D.generate_synthetic(128, 2, seed=1)
    D.save_ubc(s, tmp_path)
    loaded = D.load_ubc(tmp_path)
    assert len(loaded) == 256
    np.testing.assert_array_equal(loaded.patches, s.patches)
    np.testing.assert_array_equal(loaded.point_ids, s.point_ids)
    assert D.load_ubc(tmp_path).digest() == loaded.digest()


def test_ubc_partial_last_grid(tmp_path):
    s = D.generate_synthetic(150, 2, seed=2)
    D.save_ubc(s, tmp_path)
    assert len(list(tmp_path.glob("patches*.bmp"))) == 2
    assert D.load_ubc(tmp_path).digest() == s.digest()


def test_ubc_missing_info(tmp_path):
    D.save_ubc(D.generate_synthetic(10, 2), tmp_path)
    (tmp_path / "info.txt").unlink()
    with pytest.raises(D.MissingInfoError):
        D.load_ubc(tmp_path)


def test_ubc_too_many_lines(tmp_path):
    D.save_ubc(D.generate_synthetic(10, 2), tmp_path)
    (tmp_path / "info.txt").write_text("0 0\n" * 300)
    with pytest.raises(D.IndexOverflowError):
        D.load_ubc(tmp_path)


def test_ubc_too_few_lines_for_grids(tmp_path):
    D.save_ubc(D.generate_synthetic(150, 2), tmp_path)
    (tmp_path / "info.txt").write_text("0 0\n" * 100)
    with pytest.raises(D.MalformedDatasetError):
        D.load_ubc(tmp_path)


def test_ubc_bad_grid_size(tmp_path):
    from PIL import Image
    D.save_ubc(D.generate_synthetic(10, 2), tmp_path)
    Image.fromarray(np.zeros((512, 512), np.uint8)).save(tmp_path / "patches0000.bmp")
    with pytest.raises(D.MalformedDatasetError):
        D.load_ubc(tmp_path)


def test_error_types_distinct():
    kinds = {D.MissingInfoError, D.MalformedDatasetError, D.IndexOverflowError}
    assert len(kinds) == 3 and all(issubclass(k, D.DatasetError) for k in kinds)


def test_pair_list(tmp_path, store):
    p = tmp_path / "m50.txt"
    p.write_text("0 0 0 1 0 0\n0 0 0 5 1 0\n")
    a, b, m = D.load_pair_list(p, store)
    assert list(m) == [True, False]
    p.write_text(f"0 0 0 {len(store)} 0 0\n")
    with pytest.raises(D.IndexOverflowError):
        D.load_pair_list(p, store)


# ------------------------------------------------------------- batches


def test_batch_uses_every_id_when_full(store):
    b = D.sample_pair_batch(store, store.num_points, np.random.default_rng(0))
    assert sorted(b.point_ids.tolist()) == sorted(store.groups)


def test_batch_invariants_over_many_draws(store):
    rng = np.random.default_rng(1)
    for _ in range(1000):
        b = D.sample_pair_batch(store, 16, rng)
        assert len(set(b.point_ids.tolist())) == 16
        assert np.all(store.point_ids[b.anchor_idx] == b.point_ids)
        assert np.all(store.point_ids[b.positive_idx] == b.point_ids)
        assert np.all(b.anchor_idx != b.positive_idx)


def test_batch_contents_match_store(store):
    b = D.sample_pair_batch(store, 8, np.random.default_rng(2))
    np.testing.assert_array_equal(b.anchors[:, 0], store.net_patches[b.anchor_idx])
    assert b.anchors.shape == (8, 1, 32, 32)


def test_batch_reproducible(store):
    b1 = D.sample_pair_batch(store, 8, np.random.default_rng(3))
    b2 = D.sample_pair_batch(store, 8, np.random.default_rng(3))
    np.testing.assert_array_equal(b1.anchor_idx, b2.anchor_idx)


def test_batch_too_large(store):
    with pytest.raises(ValueError):
        D.sample_pair_batch(store, store.num_points + 1, np.random.default_rng(0))


def test_rotation_fraction_zero_is_identity(store):
    b = D.sample_pair_batch(store, 8, np.random.default_rng(4))
    assert D.augment_rotate(b, 0.0, np.random.default_rng(0)) is b


def test_rotation_same_angle_per_pair(store):
    b = D.sample_pair_batch(store, 20, np.random.default_rng(5))
    r = D.augment_rotate(b, 0.5, np.random.default_rng(6))
    assert np.count_nonzero(r.rotations) == 10
    for i, k in enumerate(r.rotations):
        np.testing.assert_array_equal(r.anchors[i, 0], np.rot90(b.anchors[i, 0], k))
        np.testing.assert_array_equal(r.positives[i, 0], np.rot90(b.positives[i, 0], k))
    np.testing.assert_array_equal(r.point_ids, b.point_ids)


def test_four_quarter_turns_identity(store):
    b = D.sample_pair_batch(store, 6, np.random.default_rng(7))
    x = b
    for _ in range(4):
        x = D.PatchBatch(np.rot90(x.anchors, 1, axes=(-2, -1)), x.positives, x.point_ids,
                         x.anchor_idx, x.positive_idx, x.rotations)
    np.testing.assert_array_equal(x.anchors, b.anchors)


def test_rotation_fraction_range(store):
    b = D.sample_pair_batch(store, 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        D.augment_rotate(b, 1.5, np.random.default_rng(0))


# ------------------------------------------------------------- resampling


def test_resample_idempotent_at_target():
    x = np.random.default_rng(0).uniform(0, 255, (3, 32, 32))
    np.testing.assert_array_equal(D.resample(x, 32), x)


def test_resample_constant_and_deterministic():
    const = np.full((2, 64, 64), 77.0)
    np.testing.assert_allclose(D.resample(const), 77.0, atol=1e-9)
    x = np.random.default_rng(1).uniform(0, 255, (2, 64, 64))
    np.testing.assert_array_equal(D.resample(x), D.resample(x))


def test_resample_block_average_oracle():
    # Half-pixel aligned 2x downsampling samples exactly between pixel pairs.
    x = np.random.default_rng(2).uniform(0, 255, (1, 64, 64))
    ref = x.reshape(1, 32, 2, 32, 2).mean(axis=(2, 4))
    np.testing.assert_allclose(D.resample(x), ref, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 10), st.floats(-100, 100))
def test_standardized_net_input_scale_shift_invariant(a, b):
    from descdistill.models import standardize
    x = np.random.default_rng(3).uniform(0, 255, (2, 32, 32))
    np.testing.assert_allclose(standardize(a * x + b), standardize(x), atol=1e-7)


def test_split_points_disjoint(store):
    train, test = D.split_points(store, 20, seed=0)
    assert test.num_points == 20 and train.num_points == 40
    assert not set(train.groups) & set(test.groups)
