import contextlib
import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image
from scipy import stats

from statecraft import synthetic
from statecraft.data import (
    STD_FLOOR,
    ArrayDataset,
    AugmentSpec,
    LabeledDataset,
    PreprocessConfig,
    SplitSpec,
    TransformParams,
    apply_manifest,
    apply_transform,
    apportion,
    augment,
    batches,
    fit_zca,
    item_rng,
    load_image,
    preprocess,
    read_manifest,
    sample_transform,
    split_indices,
    split_manifest,
    write_manifest,
)
from statecraft.errors import ConfigError, DataError

# --- splitting ----------------------------------------------------------------


@contextlib.contextmanager
def _quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


def _balanced_labels(n, k):
    return np.arange(n) % k


def test_apportion_exact_total_and_largest_remainder():
    assert apportion(100, (0.68, 0.15, 0.17)) == [68, 15, 17]
    assert apportion(10, (0.68, 0.15, 0.17)) == [7, 1, 2]
    for n in range(0, 60):
        assert sum(apportion(n, (0.68, 0.15, 0.17))) == n


@pytest.mark.criterion("split fidelity")
def test_full_size_split_totals():
    # 9309 items over 11 classes; each subset may be off by one item per class
    labels = _balanced_labels(9309, 11)
    parts = split_indices(labels, SplitSpec(seed=0))
    sizes = [len(p) for p in parts]
    assert sum(sizes) == 9309
    for got, want in zip(sizes, (6348, 1377, 1584)):
        assert abs(got - want) <= 11, f"split sizes {sizes} vs 6348/1377/1584"


@pytest.mark.criterion("split fidelity")
@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(3, 400), k=st.integers(1, 12))
def test_split_is_a_stratified_partition(seed, n, k):
    labels = np.random.default_rng(seed).integers(0, k, n)
    spec = SplitSpec(seed=seed)
    with _quiet():
        parts = split_indices(labels, spec)
        again = split_indices(labels, spec)
    joined = np.concatenate(parts)
    assert len(joined) == n and len(np.unique(joined)) == n
    for cid in np.unique(labels):
        members = np.count_nonzero(labels == cid)
        if members < 3:
            continue
        exact = [members * f for f in spec.fractions]
        for part, e in zip(parts, exact):
            assert abs(np.count_nonzero(labels[part] == cid) - e) < 1
    assert [p.tolist() for p in parts] == [p.tolist() for p in again]


@pytest.mark.parametrize("n,expected", [(1, (1, 0, 0)), (2, (2, 0, 0)), (3, (2, 0, 1))])
def test_tiny_datasets_split(n, expected):
    with _quiet():
        parts = split_indices(np.zeros(n, int), SplitSpec())
    assert tuple(len(p) for p in parts) == expected


def test_small_classes_are_pooled_with_warning():
    labels = np.array([0, 0, 1, 1, 1, 1, 1, 1, 1, 1])
    with pytest.warns(UserWarning, match="fewer than 3"):
        parts = split_indices(labels, SplitSpec())
    assert sum(len(p) for p in parts) == 10


def test_split_validation():
    with pytest.raises(ConfigError):
        SplitSpec(0.7, 0.2, 0.2)
    with pytest.raises(ConfigError):
        SplitSpec(1.2, -0.1, -0.1)
    with pytest.raises(DataError):
        split_indices(np.zeros(0, int), SplitSpec())


@pytest.fixture
def image_folder(tmp_path):
    root = tmp_path / "data"
    synthetic.write_image_folder(root, num_classes=3, per_class=6, size=20, seed=0)
    return root


def test_manifest_round_trip_and_application(image_folder, tmp_path):
    ds = LabeledDataset.from_directory(image_folder, (20, 20))
    manifest = split_manifest(ds, SplitSpec(seed=3))
    path = tmp_path / "split.json"
    write_manifest(manifest, path)
    assert read_manifest(path) == json.loads(path.read_text())
    sizes = [len(apply_manifest(ds, manifest, s)) for s in ("train", "val", "test")]
    assert sum(sizes) == len(ds) == 18
    again = split_manifest(ds, SplitSpec(seed=3))
    assert json.dumps(again, sort_keys=True) == json.dumps(manifest, sort_keys=True)


def test_bad_manifest_is_data_error(tmp_path):
    p = tmp_path / "m.json"
    p.write_text("{not json")
    with pytest.raises(DataError):
        read_manifest(p)


def test_missing_directory_is_data_error(tmp_path):
    with pytest.raises(DataError):
        LabeledDataset.from_directory(tmp_path / "nope")


def test_corrupt_image_names_the_file(tmp_path):
    bad = tmp_path / "broken.jpg"
    bad.write_bytes(b"\xff\xd8 definitely not a jpeg")
    with pytest.raises(DataError, match="broken.jpg"):
        load_image(bad, (8, 8))


def test_grayscale_image_is_replicated(tmp_path):
    p = tmp_path / "g.png"
    Image.fromarray(np.full((4, 4), 77, np.uint8), mode="L").save(p)
    with pytest.warns(UserWarning, match="grayscale"):
        img = load_image(p, (4, 4))
    assert img.shape == (4, 4, 3) and np.all(img == 77)


# --- preprocessing -----------------------------------------------------------


def test_samplewise_normalisation(rng):
    img = rng.integers(0, 256, (16, 16, 3)).astype(np.uint8)
    x = preprocess(img, cfg=PreprocessConfig(image_size=16))
    assert x.dtype == np.float32
    assert abs(x.mean()) < 1e-5 and abs(x.std() - 1) < 1e-4


def test_constant_image_stays_finite():
    x = preprocess(np.full((8, 8, 3), 200, np.uint8), cfg=PreprocessConfig(image_size=8))
    assert np.all(np.isfinite(x)) and np.all(x == 0)
    assert STD_FLOOR > 0


def test_preprocess_resizes_to_configured_size(rng):
    img = rng.integers(0, 256, (30, 40, 3)).astype(np.uint8)
    assert preprocess(img, cfg=PreprocessConfig(image_size=12)).shape == (12, 12, 3)
    batch = preprocess(np.stack([img, img]), cfg=PreprocessConfig(image_size=12))
    assert batch.shape == (2, 12, 12, 3)


# --- ZCA ---------------------------------------------------------------------


def _correlated(rng, n, d):
    mix = rng.standard_normal((d, d))
    return rng.standard_normal((n, d)) @ mix + rng.standard_normal(d) * 3


@pytest.mark.criterion("zca property")
@pytest.mark.parametrize("d", [4, 16, 64])
def test_zca_symmetric_and_whitening(rng, d):
    x = _correlated(rng, 5000, d)
    zca = fit_zca(x, epsilon=1e-6)
    w = zca.whitening
    assert np.max(np.abs(w - w.T)) < 1e-6
    out = zca.transform(x)
    cov = np.cov(out, rowvar=False, bias=True)
    assert np.max(np.abs(cov - np.eye(d))) < 0.05


@pytest.mark.criterion("zca property")
@pytest.mark.parametrize("d", [8, 64])
def test_zca_on_whitened_data_is_near_identity(rng, d):
    x = _correlated(rng, 20000, d)
    white = fit_zca(x).transform(x)
    again = fit_zca(white)
    assert np.max(np.abs(again.whitening - np.eye(d))) < 0.05


def test_zca_image_shapes_and_rank_warning(rng):
    imgs = rng.standard_normal((10, 4, 4, 3))
    with pytest.warns(UserWarning, match="rank deficient"):
        zca = fit_zca(imgs)
    out = zca.apply(imgs.astype(np.float32))
    assert out.shape == imgs.shape and np.all(np.isfinite(out))
    with pytest.raises(DataError):
        fit_zca(imgs[:1])


def test_zca_downsampled_correction_preserves_shape(rng):
    imgs = rng.standard_normal((200, 16, 16, 3)).astype(np.float32)
    zca = fit_zca(imgs, shape=(4, 4, 3))
    assert zca.whitening.shape == (48, 48)
    out = zca.apply(imgs[:5])
    assert out.shape == (5, 16, 16, 3) and out.dtype == np.float32


# --- augmentation -----------------------------------------------------------


@pytest.mark.criterion("augmentation ranges")
def test_sampled_transforms_stay_in_range():
    spec = AugmentSpec()
    rng = np.random.default_rng(99)
    h, w = 64, 48
    samples = [sample_transform(spec, rng, (h, w, 3)) for _ in range(10_000)]
    shear = np.array([s.shear for s in samples])
    rot = np.array([s.rotation_deg for s in samples])
    assert np.all(np.abs(shear) <= 0.2)
    assert np.all(np.abs([s.shift_y for s in samples]) <= 0.2 * h)
    assert np.all(np.abs([s.shift_x for s in samples]) <= 0.2 * w)
    zooms = np.array([[s.zoom_y, s.zoom_x] for s in samples])
    assert np.all((zooms >= 0.8) & (zooms <= 1.2))
    assert np.all(np.abs(rot) <= 30)
    hf = np.mean([s.hflip for s in samples])
    vf = np.mean([s.vflip for s in samples])
    assert 0.47 < hf < 0.53 and 0.47 < vf < 0.53
    assert stats.kstest(rot, stats.uniform(loc=-30, scale=60).cdf).pvalue > 0.01
    assert stats.kstest(shear, stats.uniform(loc=-0.2, scale=0.4).cdf).pvalue > 0.01


@pytest.mark.criterion("augmentation ranges")
def test_identity_spec_is_identity(rng):
    img = rng.standard_normal((9, 7, 3)).astype(np.float32)
    spec = AugmentSpec.identity()
    for i in range(20):
        out = augment(img, spec, item_rng(0, 0, i))
        np.testing.assert_array_equal(out, img)


def test_flip_is_exact(rng):
    img = rng.standard_normal((5, 6, 3)).astype(np.float32)
    spec = AugmentSpec.identity()
    np.testing.assert_array_equal(apply_transform(img, TransformParams(hflip=True), spec), img[:, ::-1])
    np.testing.assert_array_equal(apply_transform(img, TransformParams(vflip=True), spec), img[::-1])


def test_integer_shift_moves_pixels(rng):
    img = rng.standard_normal((8, 8, 1))
    out = apply_transform(img, TransformParams(shift_y=2.0), AugmentSpec.identity())
    np.testing.assert_allclose(out[:6], img[2:], atol=1e-12)
    np.testing.assert_allclose(out[6:], np.repeat(img[-1:], 2, axis=0), atol=1e-12)


def test_180_degree_rotation_equals_double_flip(rng):
    img = rng.standard_normal((7, 9, 2))
    out = apply_transform(img, TransformParams(rotation_deg=180.0), AugmentSpec.identity())
    np.testing.assert_allclose(out, img[::-1, ::-1], atol=1e-9)


def test_augmented_output_range_and_shape(rng):
    img = rng.uniform(-1, 1, (16, 16, 3)).astype(np.float32)
    out = augment(img, AugmentSpec(), np.random.default_rng(5))
    assert out.shape == img.shape and out.dtype == img.dtype
    assert out.min() >= img.min() - 1e-6 and out.max() <= img.max() + 1e-6


# --- batching -----------------------------------------------------------------


def _array_ds(n=10):
    x = np.arange(n, dtype=np.float32)[:, None, None, None] * np.ones((1, 4, 4, 3), np.float32)
    return ArrayDataset(x, np.arange(n) % 2, ["a", "b"])


def test_batches_cover_every_item_once():
    ds = _array_ds(10)
    sizes, seen = [], []
    for x, y in batches(ds, 4, seed=1, epoch=2):
        sizes.append(len(y))
        seen.extend(x[:, 0, 0, 0].astype(int).tolist())
    assert sizes == [4, 4, 2]
    assert sorted(seen) == list(range(10))


def test_batch_larger_than_dataset():
    assert [len(y) for _, y in batches(_array_ds(3), 32)] == [3]


def test_batch_errors():
    with pytest.raises(ConfigError):
        next(batches(_array_ds(3), 0))
    with pytest.raises(ConfigError):
        next(batches(_array_ds(0), 4))


def test_augmentation_independent_of_batch_size():
    ds = ArrayDataset(np.random.default_rng(0).standard_normal((6, 8, 8, 3)).astype(np.float32), np.zeros(6), ["a"])
    spec = AugmentSpec(seed=4)

    def by_index(bs):
        out = {}
        for x, _ in batches(ds, bs, seed=0, epoch=3, augment_spec=spec, shuffle=False):
            for img in x:
                out[len(out)] = img
        return out

    a, b = by_index(1), by_index(4)
    for i in a:
        np.testing.assert_array_equal(a[i], b[i])


def test_shuffle_depends_on_epoch():
    ds = _array_ds(20)
    orders = [[int(v) for x, _ in batches(ds, 20, seed=0, epoch=e) for v in x[:, 0, 0, 0]] for e in (0, 1, 0)]
    assert orders[0] == orders[2] and orders[0] != orders[1]


def test_synthetic_images_are_deterministic_and_distinct():
    a, la = synthetic.make_images(11, 2, 32, seed=0)
    b, _ = synthetic.make_images(11, 2, 32, seed=0)
    np.testing.assert_array_equal(a, b)
    assert a.dtype == np.uint8 and a.shape == (22, 32, 32, 3)
    means = np.array([a[la == c].astype(float).mean(axis=0) for c in range(11)])
    pairwise = np.abs(means[:, None] - means[None]).mean(axis=(2, 3, 4))
    assert math.isfinite(pairwise.sum()) and np.all(pairwise[~np.eye(11, dtype=bool)] > 1)
