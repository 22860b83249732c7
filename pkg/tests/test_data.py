import os
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from poolgen.data import (CIFAR_RECORD, Dataset, DatasetError, TransformSpec, add_mean,
                          apply_transform, standard_sweep_grid, invariance_sweep, load_cifar10_bin,
                          load_mnist_idx, nearest_template_classify, shape_template,
                          synthesize_shapes, write_cifar10_bin, write_mnist_idx)
from poolgen.nn import SGD, Network, default_architecture
from poolgen.train import fit

DATA_DIR = os.environ.get("POOLGEN_DATA_DIR")


# -- MNIST IDX ----------------------------------------------------------------

@pytest.fixture(scope="module")
def mnist_t10k(tmp_path_factory):
    d = tmp_path_factory.mktemp("mnist")
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (10000, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, 10000, dtype=np.uint8)
    write_mnist_idx(images, labels, d / "img", d / "lbl")
    return d, images, labels


def test_mnist_published_layout(mnist_t10k):
    d, images, labels = mnist_t10k
    raw = (d / "img").read_bytes()
    assert raw[:16] == struct.pack(">4I", 2051, 10000, 28, 28)
    assert len(raw) == 16 + 10000 * 784
    assert (d / "lbl").read_bytes()[:8] == struct.pack(">2I", 2049, 10000)
    ds = load_mnist_idx(d / "img", d / "lbl")
    assert len(ds) == 10000 and ds.images.shape == (10000, 1, 28, 28)
    assert ds.labels.min() >= 0 and ds.labels.max() <= 9
    assert np.array_equal(ds.images[:, 0] * 255.0, images.astype(np.float64))
    assert np.array_equal(ds.labels, labels)


def test_mnist_scaling(tmp_path):
    img = np.array([[[0, 255], [128, 1]]], dtype=np.uint8)
    write_mnist_idx(img, [3], tmp_path / "i", tmp_path / "l")
    ds = load_mnist_idx(tmp_path / "i", tmp_path / "l")
    assert ds.images[0, 0, 0, 1] == 1.0 and ds.images[0, 0, 0, 0] == 0.0
    assert ds.images[0, 0, 1, 0] == 128 / 255


def test_mnist_errors(tmp_path):
    img = np.zeros((3, 2, 2), np.uint8)
    write_mnist_idx(img, [1, 2], tmp_path / "i", tmp_path / "l")
    with pytest.raises(DatasetError, match="count"):
        load_mnist_idx(tmp_path / "i", tmp_path / "l")
    write_mnist_idx(img, [1, 2, 3], tmp_path / "i", tmp_path / "l")
    with pytest.raises(DatasetError, match="magic"):
        load_mnist_idx(tmp_path / "l", tmp_path / "l")
    raw = (tmp_path / "i").read_bytes()
    (tmp_path / "t").write_bytes(raw[:-1])
    with pytest.raises(DatasetError, match="payload"):
        load_mnist_idx(tmp_path / "t", tmp_path / "l")
    (tmp_path / "t").write_bytes(raw[:6])
    with pytest.raises(DatasetError, match="header"):
        load_mnist_idx(tmp_path / "t", tmp_path / "l")
    write_mnist_idx(img, [1, 2, 12], tmp_path / "i", tmp_path / "l")
    with pytest.raises(DatasetError):
        load_mnist_idx(tmp_path / "i", tmp_path / "l")


# -- CIFAR-10 -----------------------------------------------------------------

def test_cifar_published_layout(tmp_path):
    rng = np.random.default_rng(1)
    images = rng.integers(0, 256, (10000, 3, 32, 32), dtype=np.uint8)
    labels = rng.integers(0, 10, 10000, dtype=np.uint8)
    write_cifar10_bin(images, labels, tmp_path / "b.bin")
    assert (tmp_path / "b.bin").stat().st_size == 10000 * 3073
    ds = load_cifar10_bin(tmp_path / "b.bin")
    assert ds.images.shape == (10000, 3, 32, 32)
    assert np.array_equal(ds.images * 255.0, images.astype(np.float64))


def test_cifar_record_by_hand(tmp_path):
    rec = bytes([7]) + bytes([10]) * 1024 + bytes([20]) * 1024 + bytes([30]) * 1024
    (tmp_path / "one.bin").write_bytes(rec)
    ds = load_cifar10_bin(tmp_path / "one.bin")
    assert ds.labels.tolist() == [7]
    assert [ds.images[0, c, 5, 9] * 255 for c in range(3)] == pytest.approx([10, 20, 30])


def test_cifar_errors(tmp_path):
    (tmp_path / "short.bin").write_bytes(bytes(3072))
    with pytest.raises(DatasetError, match="multiple"):
        load_cifar10_bin(tmp_path / "short.bin")
    (tmp_path / "bad.bin").write_bytes(bytes([11]) + bytes(3072))
    with pytest.raises(DatasetError, match="label"):
        load_cifar10_bin(tmp_path / "bad.bin")
    (tmp_path / "empty.bin").write_bytes(b"")
    with pytest.raises(DatasetError):
        load_cifar10_bin(tmp_path / "empty.bin")


@pytest.mark.skipif(not DATA_DIR, reason="POOLGEN_DATA_DIR not set")
def test_real_files_when_available():
    root = Path(DATA_DIR)
    checked = 0
    if (root / "t10k-images-idx3-ubyte").exists():
        ds = load_mnist_idx(root / "t10k-images-idx3-ubyte", root / "t10k-labels-idx1-ubyte")
        assert ds.images.shape == (10000, 1, 28, 28) and ds.labels.max() <= 9
        checked += 1
    if (root / "test_batch.bin").exists():
        ds = load_cifar10_bin(root / "test_batch.bin")
        assert ds.images.shape == (10000, 3, 32, 32)
        checked += 1
    if not checked:
        pytest.skip(f"no published dataset files under {root}")


# -- dataset / synthetic ------------------------------------------------------

def test_dataset_validation():
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 1, 2, 2)), np.array([0]), np.zeros(1), 2)
    with pytest.raises(DatasetError):
        Dataset(np.zeros((1, 1, 2, 2)), np.array([5]), np.zeros(1), 2)


def test_synthetic_balanced_and_deterministic():
    a = synthesize_shapes(400, seed=3)
    assert np.bincount(a.labels).tolist() == [100] * 4
    assert a.images.shape == (400, 1, 16, 16)
    b = synthesize_shapes(400, seed=3)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, synthesize_shapes(400, seed=4).images)
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0
    with pytest.raises(ValueError):
        synthesize_shapes(0)


def test_noise_free_shapes_are_template_separable():
    ds = synthesize_shapes(400, seed=5, noise=0.0)
    assert np.array_equal(nearest_template_classify(ds.images[:, 0]), ds.labels)


def test_shape_templates_are_distinct():
    temps = [shape_template(c) for c in range(4)]
    for i in range(4):
        for j in range(i + 1, 4):
            assert np.abs(temps[i] - temps[j]).sum() > 5
    with pytest.raises(ValueError):
        shape_template(4)


def test_mean_subtraction_round_trip():
    ds = synthesize_shapes(200, seed=6)
    assert np.abs(ds.centered.mean(axis=(0, 2, 3))).max() < 1e-12
    assert np.abs(add_mean(ds.centered, ds.channel_means) - ds.images).max() < 1e-12


# -- transforms ---------------------------------------------------------------

@pytest.fixture
def images():
    return synthesize_shapes(8, seed=7).images


def test_identity_transforms_are_exact(images):
    for spec in (TransformSpec("rotate", 0.0), TransformSpec("translate", 0),
                 TransformSpec("scale", 1.0)):
        assert np.array_equal(apply_transform(images, spec), images)


def test_translate_inverse_within_margin():
    img = np.zeros((1, 1, 10, 6))
    img[0, 0, 2:8, 1:5] = np.random.default_rng(0).uniform(size=(6, 4))
    down = apply_transform(img, TransformSpec("translate", 2))
    assert np.array_equal(down[0, 0, 4:10], img[0, 0, 2:8])
    back = apply_transform(down, TransformSpec("translate", -2))
    assert np.array_equal(back, img)
    assert not apply_transform(img, TransformSpec("translate", 10)).any()


def test_rotate_full_turn(images):
    out = apply_transform(images, TransformSpec("rotate", 360.0))
    assert np.abs(out - images).max() < 1e-6


def test_rotate_quarter_turn_is_a_transpose_flip():
    img = np.random.default_rng(1).uniform(size=(1, 1, 5, 5))
    out = apply_transform(img, TransformSpec("rotate", 90.0))
    ref = np.rot90(img, k=1, axes=(2, 3))
    assert np.allclose(out, ref, atol=1e-12) or np.allclose(out, np.rot90(img, -1, (2, 3)), atol=1e-12)


def test_scale_about_center():
    img = np.zeros((1, 1, 9, 9))
    img[0, 0, 4, 4] = 1.0
    out = apply_transform(img, TransformSpec("scale", 2.0))
    assert out[0, 0, 4, 4] == 1.0
    assert out[0, 0, 4, 5] == 0.5


def test_transform_spec_validation():
    with pytest.raises(ValueError):
        TransformSpec("scale", 0.0)
    with pytest.raises(ValueError):
        TransformSpec("scale", -1.0)
    with pytest.raises(ValueError):
        TransformSpec("shear", 1.0)
    with pytest.raises(ValueError):
        TransformSpec("translate", 1.5)


@given(kind=st.sampled_from(["rotate", "translate", "scale"]),
       amount=st.floats(-60, 60, allow_nan=False), seed=st.integers(0, 1000))
def test_transforms_preserve_shape_and_finiteness(kind, amount, seed):
    if kind == "translate":
        amount = float(round(amount / 4))
    if kind == "scale":
        amount = 0.2 + abs(amount) / 20
    x = np.random.default_rng(seed).uniform(size=(2, 3, 7, 9))
    y = apply_transform(x, TransformSpec(kind, amount))
    assert y.shape == x.shape and np.all(np.isfinite(y))
    assert y.min() >= 0.0 and y.max() <= 1.0 + 1e-12


def test_standard_sweep_grid():
    grid = standard_sweep_grid()
    assert len(grid) == 27
    assert [s.amount for s in grid if s.kind == "rotate"] == list(range(0, 45, 5))
    assert [s.amount for s in grid if s.kind == "translate"] == list(range(9))
    assert [s.amount for s in grid if s.kind == "scale"] == [0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4]


# -- invariance sweep -------------------------------------------------------

@pytest.fixture(scope="module")
def trained_max_net():
    train, val = synthesize_shapes(1000, seed=10), synthesize_shapes(200, seed=11)
    net = Network(default_architecture("max", "max"), (1, 16, 16), seed=0)
    fit(net, SGD(), train, val, max_epochs=4, seed=0)
    test = synthesize_shapes(200, seed=12).with_means(train.channel_means)
    return net, test


def test_sweep_identity_and_range(trained_max_net):
    net, test = trained_max_net
    rows = invariance_sweep(net, test, standard_sweep_grid())
    assert [s for s, _ in rows] == standard_sweep_grid()
    base = net.accuracy(test.centered, test.labels)
    for spec, acc in rows:
        assert 0.0 <= acc <= 1.0
        if spec.amount == (1.0 if spec.kind == "scale" else 0.0):
            assert acc == base


def test_rotation_trend_is_non_increasing(trained_max_net):
    net, test = trained_max_net
    rows = invariance_sweep(net, test, [s for s in standard_sweep_grid() if s.kind == "rotate"])
    angles = np.array([s.amount for s, _ in rows])
    acc = np.array([a for _, a in rows])
    slope = np.polyfit(angles, acc, 1)[0]
    assert slope <= 0.0, acc


def test_sweep_rejects_mismatch(trained_max_net):
    net, _ = trained_max_net
    wrong = Dataset(np.zeros((2, 1, 8, 8)), np.array([0, 1]), np.zeros(1), 4)
    with pytest.raises(ValueError, match="input"):
        invariance_sweep(net, wrong, standard_sweep_grid()[:1])
    classes = Dataset(np.zeros((2, 1, 16, 16)), np.array([0, 1]), np.zeros(1), 10)
    with pytest.raises(ValueError, match="classes"):
        invariance_sweep(net, classes, standard_sweep_grid()[:1])
