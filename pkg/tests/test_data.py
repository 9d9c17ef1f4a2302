import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from uraenas import data as D
from uraenas.errors import FormatError, InputError, UsageError

# regression fixtures: 12 synthetic 8x8 test images (seed 0), suite seed 7, table version 1
FROZEN_CLEAN = "b6dca0f1ae305ff1f905d96d9c798f38bf8bc209945f45c037dae1feb6e4b55d"
FROZEN_SUITE = {
    ("GaussianNoise", 5): "c8abf008c781708a7cf608de0852406580a03dc68e6f4e0ad00c8420ba35d1d6",
    ("ShotNoise", 2): "a1dbd47e01d80bb6cc07a691acd28824939d111dc3c1b7ed786e4ea6621613fa",
    ("ImpulseNoise", 3): "de0394a7fed917d9411178e10744b2ae014c98977d114848031ed92c8b9280db",
    ("BoxBlur", 4): "543527946968d6c82aee094f469bb681eb54af46b218ed2fbb81a602b176acd7",
    ("Brightness", 1): "57174d8a83fccd765090df3e9e351d0ec08eb8147aa119774879a6d05faf91f7",
    ("Contrast", 5): "85b0fbebe19f4352737645aebe3c341029780e4f49e6379fc4bd3dd3d447e3cb",
}


@pytest.fixture(scope="module")
def synth():
    return D.synth_splits(0, n_train=5000, n_val=0, n_test=1000)


def small_test():
    return D.synth_dataset(D.SynthSpec(n=12, height=8, width=8), 0, "test")


def box_blur_oracle(img, size, passes):
    """Edge-replicating box mean, written out with explicit loops."""
    x = img.astype(np.float64)
    r = size // 2
    for _ in range(passes):
        c, h, w = x.shape
        out = np.zeros_like(x)
        for i in range(h):
            for j in range(w):
                acc = np.zeros(c)
                for di in range(-r, r + 1):
                    for dj in range(-r, r + 1):
                        acc += x[:, min(max(i + di, 0), h - 1), min(max(j + dj, 0), w - 1)]
                out[:, i, j] = acc / size**2
        x = out
    return np.clip(np.sign(x) * np.floor(np.abs(x) + 0.5), 0, 255).astype(np.uint8)


def test_cifar_single_record(tmp_path):
    rec = bytes([7]) + bytes(range(256)) * 12
    p = tmp_path / "one.bin"
    p.write_bytes(rec)
    ds = D.load_cifar_binary(p)
    assert len(ds) == 1 and ds.labels[0] == 7 and ds.shape == (3, 32, 32)
    # red plane first, row-major
    assert ds.images[0, 0, 0, 5] == 5 and ds.images[0, 1, 0, 0] == (1024 % 256)


def test_cifar_errors(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(bytes(3072))
    with pytest.raises(FormatError):
        D.load_cifar_binary(p)
    p.write_bytes(bytes([10]) + bytes(3072))
    with pytest.raises(FormatError):
        D.load_cifar_binary(p)


def test_cifar_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    ds = D.ImageDataset(rng.integers(0, 256, (5, 3, 32, 32), dtype=np.uint8), rng.integers(0, 10, 5))
    D.write_cifar_binary(ds, tmp_path / "x.bin")
    back = D.load_cifar_binary(tmp_path / "x.bin")
    assert back.content_hash() == ds.content_hash()


def test_idx_roundtrip_and_errors(tmp_path):
    rng = np.random.default_rng(1)
    imgs = rng.integers(0, 256, (4, 6, 6), dtype=np.uint8)
    labels = np.array([0, 3, 9, 1], dtype=np.uint8)
    D.write_idx(imgs, tmp_path / "i.idx")
    D.write_idx(labels, tmp_path / "l.idx")
    ds = D.load_idx(tmp_path / "i.idx", tmp_path / "l.idx")
    assert ds.shape == (1, 6, 6) and np.array_equal(ds.images[:, 0], imgs) and list(ds.labels) == [0, 3, 9, 1]
    (tmp_path / "bad.idx").write_bytes(b"\x00\x00\x0d\x01" + struct.pack(">I", 1) + b"\x00" * 4)
    with pytest.raises(FormatError):
        D.load_idx(tmp_path / "bad.idx", tmp_path / "l.idx")


def test_downscale_rounds_half_away():
    img = np.array([[[[1, 2], [2, 1]]]], dtype=np.uint8)  # mean 1.5
    ds = D.downscale2x(D.ImageDataset(img, [0]))
    assert ds.images[0, 0, 0, 0] == 2


def test_internal_format_roundtrip(tmp_path):
    ds = D.synth_splits(3, 20, 5, 5, height=8, width=8)["val"]
    digest = D.save_dataset(ds, tmp_path / "d" / "data.bin")
    back = D.load_dataset(tmp_path / "d" / "data.bin")
    assert back.content_hash() == ds.content_hash() and back.split == "val"
    np.testing.assert_array_equal(back.stats.mean, ds.stats.mean)
    assert D.save_dataset(back, tmp_path / "e.bin") == digest
    with pytest.raises(FormatError):
        D.dataset_from_bytes(b"nope")


def test_synth_is_pure_and_frozen():
    assert small_test().content_hash() == FROZEN_CLEAN
    assert D.synth_dataset(D.SynthSpec(n=12, height=8, width=8), 1, "test").content_hash() != FROZEN_CLEAN


def test_synth_empty():
    ds = D.synth_dataset(D.SynthSpec(n=0), 0, "train")
    assert len(ds) == 0 and ds.shape == (3, 16, 16)


def test_synth_rejects_too_many_classes():
    with pytest.raises(InputError):
        D.SynthSpec(classes=11)


def test_knn_learnability(synth):
    assert D.knn_accuracy(synth["train"], synth["test"]) >= 0.80


def test_gaussian_severity5_hurts_knn(synth):
    clean = D.knn_accuracy(synth["train"], synth["test"])
    noisy = D.corrupt_dataset(synth["test"], D.CorruptionSpec("GaussianNoise", 5), 0)
    assert clean - D.knn_accuracy(synth["train"], noisy) >= 0.15


def test_stats_only_from_clean_train():
    splits = D.synth_splits(0, 10, 4, 4, height=8, width=8)
    assert splits["test"].stats.source == "train"
    with pytest.raises(InputError):
        D.compute_stats(splits["val"])
    noisy = D.corrupt_dataset(splits["test"], D.CorruptionSpec("Contrast", 1), 0)
    with pytest.raises(InputError):
        D.compute_stats(noisy)


def test_label_range_checked():
    with pytest.raises(InputError):
        D.ImageDataset(np.zeros((1, 1, 4, 4), np.uint8), [3], num_classes=3)


def test_brightness_arithmetic():
    out = D.corrupt(np.full((3, 4, 4), 128, np.uint8), D.CorruptionSpec("Brightness", 1), 0)
    assert np.all(out == 154)


def test_contrast_identity():
    img = np.random.default_rng(0).integers(0, 256, (3, 5, 5)).astype(np.uint8)
    assert np.array_equal(D.corrupt(img, D.CorruptionSpec("Contrast", 0, param=1.0), 0), img)


@pytest.mark.parametrize("sev", range(1, 6))
def test_box_blur_matches_loop_oracle(sev):
    img = np.random.default_rng(sev).integers(0, 256, (3, 9, 7)).astype(np.uint8)
    spec = D.CorruptionSpec("BoxBlur", sev)
    assert np.array_equal(D.corrupt(img, spec, 0), box_blur_oracle(img, *spec.value))


def test_table_values():
    assert [D.CorruptionSpec("BoxBlur", s).value for s in range(1, 6)] == [(3, 1), (3, 2), (5, 1), (5, 2), (7, 2)]
    assert D.CorruptionSpec("ShotNoise", 3).value == 12
    assert D.CorruptionSpec("GaussianNoise", 5).value == pytest.approx(0.26 * 255)


def test_unknown_kind_and_severity():
    with pytest.raises(UsageError):
        D.CorruptionSpec("Fog", 1)
    with pytest.raises(UsageError):
        D.CorruptionSpec("Contrast", 6)


@given(arrays(np.uint8, st.tuples(st.integers(1, 3), st.integers(2, 6), st.integers(2, 6))),
       st.sampled_from(list(D.CorruptionKind)), st.integers(1, 5), st.integers(0, 2**31))
def test_corrupt_shape_dtype_determinism(img, kind, sev, seed):
    spec = D.CorruptionSpec(kind, sev)
    a, b = D.corrupt(img, spec, seed), D.corrupt(img, spec, seed)
    assert a.shape == img.shape and a.dtype == np.uint8 and np.array_equal(a, b)


def test_monotone_distance_in_severity(synth):
    test = synth["test"]
    sub = D.ImageDataset(test.images[:300], test.labels[:300], "test", 10, test.stats)
    clean = sub.images.astype(np.float64)
    for kind in D.CorruptionKind:
        dists = []
        for sev in range(1, 6):
            c = D.corrupt_dataset(sub, D.CorruptionSpec(kind, sev), 11).images.astype(np.float64)
            dists.append(np.sqrt(((c - clean) ** 2).sum(axis=(1, 2, 3))).mean())
        assert all(a <= b for a, b in zip(dists, dists[1:])), (kind, dists)


def test_suite_layout_and_hashes(tmp_path):
    ds = small_test()
    suite = D.build_corrupted_suite(ds, 7)
    assert len(suite) == 30
    assert all(np.array_equal(d.labels, ds.labels) for d in suite.values())
    for key, digest in FROZEN_SUITE.items():
        assert suite[key].content_hash() == digest
    D.save_suite(suite, tmp_path)
    assert (tmp_path / "BoxBlur" / "3" / "data.bin").exists()
    back = D.load_suite(tmp_path)
    assert {k: v.content_hash() for k, v in back.items()} == {k: v.content_hash() for k, v in suite.items()}


def test_suite_needs_clean_test_split():
    with pytest.raises(InputError):
        D.build_corrupted_suite(D.synth_dataset(D.SynthSpec(n=2, height=8, width=8), 0, "train"), 0)
