import json

import numpy as np
import pytest

from glab.data import (
    Dataset,
    from_u8,
    gen_bump_images,
    gen_gaussian_mixture,
    load_dataset,
    load_images,
    load_points,
    mode_centers,
    quantize_unit,
    read_pgm,
    save_dataset,
    to_u8,
    write_pgm,
)
from glab.errors import EmptyDataset, InvalidConfig, IoError, ShapeMismatch


def test_mode_centers_on_the_unit_circle():
    centers = mode_centers(8)
    assert centers.shape == (8, 2)
    assert np.allclose(np.linalg.norm(centers, axis=1), 1.0, atol=1e-12)
    assert np.allclose(centers[0], [1.0, 0.0], atol=1e-12)
    assert np.allclose(centers[2], [0.0, 1.0], atol=1e-12)


def test_gaussian_mixture_layout():
    ds = gen_gaussian_mixture(n_modes=4, n_per_mode=50, spread=0.05, seed=3)
    assert len(ds) == 200
    assert ds.sample_shape == (2,)
    assert ds.labels.tolist() == np.repeat(np.arange(4), 50).tolist()
    assert ds.meta["n_classes"] == 4
    # sample means sit near their centers (5 sigma of the mean's spread)
    centers = mode_centers(4)
    for j in range(4):
        mean = ds.samples[ds.labels == j].mean(axis=0)
        assert np.linalg.norm(mean - centers[j]) < 5 * 0.05 / np.sqrt(50)


def test_gaussian_mixture_zero_spread_is_exact():
    ds = gen_gaussian_mixture(n_modes=3, n_per_mode=2, spread=0.0, seed=0)
    want = np.repeat(mode_centers(3), 2, axis=0)
    assert np.array_equal(ds.samples, want)


def test_gaussian_mixture_modes_are_independent_streams():
    small = gen_gaussian_mixture(n_modes=2, n_per_mode=10, spread=0.1, seed=9)
    large = gen_gaussian_mixture(n_modes=5, n_per_mode=10, spread=0.1, seed=9)
    assert np.array_equal(small.samples[:10], large.samples[:10])
    # mode 1 center moves with n_modes, but its noise stream does not
    noise_small = small.samples[10:20] - mode_centers(2)[1]
    noise_large = large.samples[10:20] - mode_centers(5)[1]
    assert np.allclose(noise_small, noise_large, atol=1e-12)


def test_gaussian_mixture_validation():
    with pytest.raises(InvalidConfig):
        gen_gaussian_mixture(0, 5, 0.1, 0)
    with pytest.raises(InvalidConfig):
        gen_gaussian_mixture(2, 5, -0.1, 0)


def test_bump_images_contract():
    ds = gen_bump_images(n_classes=4, n_per_class=3, size=16, seed=1)
    assert ds.samples.shape == (12, 16, 16, 1)
    assert ds.samples.min() >= -1.0 and ds.samples.max() <= 1.0
    # stored on the 8-bit grid already: quantization is a fixed point
    assert np.array_equal(quantize_unit(ds.samples), ds.samples)
    again = gen_bump_images(n_classes=4, n_per_class=3, size=16, seed=1)
    assert np.array_equal(ds.samples, again.samples)
    other = gen_bump_images(n_classes=4, n_per_class=3, size=16, seed=2)
    assert not np.array_equal(ds.samples, other.samples)


def test_bump_images_classes_differ_in_position():
    ds = gen_bump_images(n_classes=2, n_per_class=8, size=16, seed=0)
    mean0 = ds.samples[ds.labels == 0].mean(axis=0)[..., 0]
    mean1 = ds.samples[ds.labels == 1].mean(axis=0)[..., 0]
    # brightest spot should sit on opposite sides for opposite classes
    y0, x0 = np.unravel_index(np.argmax(mean0), mean0.shape)
    y1, x1 = np.unravel_index(np.argmax(mean1), mean1.shape)
    assert abs(x0 - x1) > 4


def test_quantize_unit_is_idempotent(rng):
    x = rng.uniform(-1.2, 1.2, size=(50,))
    q = quantize_unit(x)
    assert np.array_equal(quantize_unit(q), q)
    assert q.min() >= -1.0 and q.max() <= 1.0


def test_u8_round_trip_endpoints():
    img = np.array([[-1.0, 1.0], [0.0, quantize_unit(np.array(0.3))]], dtype=np.float64)
    u8 = to_u8(img)
    assert u8[0, 0] == 0 and u8[0, 1] == 255
    back = from_u8(u8)
    assert back[0, 0] == -1.0 and back[0, 1] == 1.0
    assert np.allclose(back, quantize_unit(img), atol=1e-12)


def test_dataset_rejects_empty_and_mismatched():
    with pytest.raises(EmptyDataset):
        Dataset(np.zeros((0, 2)), np.zeros(0, dtype=np.int64), {})
    with pytest.raises(ShapeMismatch):
        Dataset(np.zeros((4, 2)), np.zeros(3, dtype=np.int64), {})


def test_dataset_shuffled_is_a_permutation():
    ds = gen_gaussian_mixture(3, 5, 0.1, seed=2)
    shuffled = ds.shuffled(7)
    assert not np.array_equal(shuffled.samples, ds.samples)
    idx = {tuple(row) for row in ds.samples}
    assert {tuple(row) for row in shuffled.samples} == idx
    again = ds.shuffled(7)
    assert np.array_equal(shuffled.samples, again.samples)
    assert np.array_equal(shuffled.labels, again.labels)


# ---------------------------------------------------------------------------
# file round trips

def test_pgm_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, size=(9, 7)).astype(np.uint8)
    path = tmp_path / "img.pgm"
    write_pgm(path, img)
    assert np.array_equal(read_pgm(path), img)


def test_pgm_reader_handles_comments(tmp_path):
    img = np.arange(6, dtype=np.uint8).reshape(2, 3)
    raw = b"P5\n# a comment line\n3 2\n# another\n255\n" + img.tobytes()
    path = tmp_path / "commented.pgm"
    path.write_bytes(raw)
    assert np.array_equal(read_pgm(path), img)


def test_pgm_reader_rejects_garbage(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P6\n1 1\n255\n\x00")
    with pytest.raises(IoError):
        read_pgm(path)
    path.write_bytes(b"P5\n2 2\n65535\n" + b"\x00" * 8)
    with pytest.raises(IoError):
        read_pgm(path)
    path.write_bytes(b"P5\n4 4\n255\n\x00\x00")  # truncated payload
    with pytest.raises(IoError):
        read_pgm(path)
    with pytest.raises(IoError):
        read_pgm(tmp_path / "missing.pgm")


def test_points_dataset_round_trip_exact(tmp_path):
    ds = gen_gaussian_mixture(3, 4, 0.2, seed=5)
    out = tmp_path / "points"
    save_dataset(ds, out)
    assert (out / "points.csv").exists()
    assert (out / "meta.json").exists()
    back = load_dataset(out)
    assert np.array_equal(back.samples, ds.samples)  # repr round trip is lossless
    assert np.array_equal(back.labels, ds.labels)
    assert back.meta["kind"] == "gaussian_mixture"
    assert back.meta["seed"] == 5


def test_image_dataset_round_trip_exact(tmp_path):
    ds = gen_bump_images(2, 3, size=8, seed=4)
    out = tmp_path / "imgs"
    save_dataset(ds, out)
    files = sorted(p.name for p in out.iterdir())
    assert "img_00000.pgm" in files and "labels.tsv" in files and "meta.json" in files
    back = load_dataset(out)
    # quantized at generation, so the 8-bit files reproduce the floats exactly
    assert np.array_equal(back.samples, ds.samples)
    assert np.array_equal(back.labels, ds.labels)
    assert back.meta["size"] == 8


def test_save_dataset_writes_sorted_meta(tmp_path):
    ds = gen_gaussian_mixture(2, 2, 0.1, seed=1)
    save_dataset(ds, tmp_path / "d")
    text = (tmp_path / "d" / "meta.json").read_text()
    keys = list(json.loads(text))
    assert keys == sorted(keys)


def test_load_points_missing_file(tmp_path):
    with pytest.raises(IoError):
        load_points(tmp_path / "nope.csv")


def test_load_images_empty_dir(tmp_path):
    (tmp_path / "labels.tsv").write_text("")
    with pytest.raises((EmptyDataset, IoError)):
        load_images(tmp_path)


def test_load_images_shape_guard(tmp_path):
    ds = gen_bump_images(2, 2, size=8, seed=0)
    save_dataset(ds, tmp_path)
    with pytest.raises(ShapeMismatch):
        load_images(tmp_path, expected_shape=(16, 16, 1))
