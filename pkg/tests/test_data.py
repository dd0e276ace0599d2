import hashlib
import os

import numpy as np
import pytest
import scipy.stats
from hypothesis import given
from hypothesis import strategies as st

from flowgate.data import (
    DATA_ROOT_ENV,
    ManifestEntry,
    SynthCounts,
    SynthSpec,
    augment_rotations,
    clip_window,
    dequantize,
    load_dataset,
    quantize,
    read_manifest,
    rotate,
    synth_abnormal,
    synth_normal,
    write_manifest,
    write_synth_dataset,
    zero_pixel_fraction,
)
from flowgate.errors import DataError
from flowgate.fileio import save_pgm, save_tensor

# windowing ---------------------------------------------------------------------------


def test_clip_window_cases():
    np.testing.assert_array_equal(clip_window([-100, 50, 200]), [0, 64, 127])
    assert clip_window(-14) == 0 and clip_window(113) == 127


@given(st.lists(st.integers(-5000, 5000), min_size=1, max_size=50))
def test_clip_window_idempotent_and_in_range(values):
    once = clip_window(values)
    assert once.min() >= 0 and once.max() <= 127
    # reapplying to the 7-bit output, shifted back, is a fixed point
    np.testing.assert_array_equal(clip_window(once - 14), once)


# dequantization --------------------------------------------------------------------------


def test_dequantize_deterministic_examples():
    assert dequantize(0, 7) == 0.5 / 128 - 0.5
    assert dequantize(127, 7) == 127.5 / 128 - 0.5


def test_dequantize_stochastic_range(rng):
    img = rng.integers(0, 128, (2000,))
    img[:2] = [0, 127]
    x = dequantize(img, 7, rng)
    assert x.min() >= -0.5 and x.max() < 0.5
    # each value stays in its own bin
    np.testing.assert_array_equal(quantize(x, 7), img)


def test_dequantize_rejects_out_of_range():
    with pytest.raises(DataError):
        dequantize([128], 7)
    with pytest.raises(DataError):
        dequantize([-1], 8)
    with pytest.raises(DataError):
        dequantize([0.5], 8)


@pytest.mark.parametrize("n_bits", [1, 5, 7, 8])
def test_deterministic_dequantize_is_strictly_increasing_bijection(n_bits):
    grid = np.arange(2**n_bits)
    x = dequantize(grid, n_bits)
    assert np.all(np.diff(x) > 0)
    np.testing.assert_array_equal(quantize(x, n_bits), grid)


# rotations ---------------------------------------------------------------------------


def smooth_volume(n=24):
    """A smooth 7-bit blob that vanishes well inside the field of view."""
    g = np.linspace(-1, 1, n)
    z, y, x = np.meshgrid(g, g, g, indexing="ij")
    r2 = z**2 + y**2 + x**2
    return np.rint(127 * np.clip(1 - r2 / 0.64, 0, None) ** 2).astype(np.int64)


def test_augment_rotations_outputs():
    vol = smooth_volume()
    out = augment_rotations(vol)
    assert len(out) == 7
    assert out[0].dtype == vol.dtype and np.array_equal(out[0], vol)
    assert all(o.shape == vol.shape for o in out)
    assert all(not np.array_equal(o, vol) for o in out[1:])
    with_channel = augment_rotations(vol[..., None])
    assert len(with_channel) == 7 and with_channel[3].shape == vol.shape + (1,)
    np.testing.assert_array_equal(with_channel[3][..., 0], out[3])


def test_rotation_round_trip_within_interpolation_error():
    vol = smooth_volume()
    n_bits = 7
    for axes in ((1, 2), (0, 2), (0, 1)):
        back = rotate(rotate(vol, 2.0, axes), -2.0, axes)
        assert np.abs(back - vol).max() / 2**n_bits < 2 / 2**n_bits


def test_augment_rotations_rejects_2d():
    with pytest.raises(DataError):
        augment_rotations(np.zeros((4, 4)))


# synthetic generators -------------------------------------------------------------------


SPEC = SynthSpec(seed=7)


def test_generators_are_deterministic():
    np.testing.assert_array_equal(synth_normal(SPEC, 5), synth_normal(SynthSpec(seed=7), 5))
    np.testing.assert_array_equal(synth_abnormal(SPEC, 5), synth_abnormal(SynthSpec(seed=7), 5))
    assert not np.array_equal(synth_normal(SPEC, 5), synth_normal(SynthSpec(seed=8), 5))
    # sample i does not depend on how many others are generated
    np.testing.assert_array_equal(synth_normal(SPEC, 5)[3], synth_normal(SPEC, 2, start=3)[0])


def test_generator_output_range_and_shape():
    imgs = synth_normal(SPEC, 20)
    assert imgs.shape == (20, 16, 16, 1) and imgs.dtype == np.int64
    assert imgs.min() == 0 and imgs.max() < 256
    vol = synth_abnormal(SynthSpec(shape=(4, 8, 8, 1), n_bits=7, margin=(0, 2), lesion_size=(2, 3)), 3)
    assert vol.shape == (3, 4, 8, 8, 1) and vol.max() < 128


def test_lesion_only_changes_its_bounding_box():
    normal = synth_normal(SPEC, 30)
    abnormal, boxes, kinds = synth_abnormal(SPEC, 30, return_boxes=True, return_kinds=True)
    assert set(kinds) == {"bright", "dark"}
    for n, a, box in zip(normal, abnormal, boxes):
        diff = (n != a)[..., 0]
        inside = np.zeros_like(diff)
        inside[box] = True
        assert not np.any(diff & ~inside)
        assert np.any(diff)
        # the zero background is never touched
        assert np.all((n == 0) == (a == 0))


def test_zero_pixel_fraction_equal_between_classes():
    zn = [zero_pixel_fraction(x) for x in synth_normal(SPEC, 500)]
    za = [zero_pixel_fraction(x) for x in synth_abnormal(SPEC, 500, start=500)]
    assert scipy.stats.ttest_ind(zn, za).pvalue > 0.01


def test_confound_variant_changes_abnormal_background_only():
    spec = SynthSpec(seed=7, confound=True)
    np.testing.assert_array_equal(synth_normal(spec, 10), synth_normal(SPEC, 10))
    assert not np.array_equal(synth_abnormal(spec, 10), synth_abnormal(SPEC, 10))


def test_synth_spec_validation():
    with pytest.raises(DataError):
        SynthSpec(shape=(8, 8, 3))
    with pytest.raises(DataError):
        SynthSpec(shape=(8, 8))


def test_synth_dataset_layout(tmp_path):
    counts = SynthCounts(3, 2, 2, 2, 2)
    path = write_synth_dataset(tmp_path, SPEC, counts)
    ds = load_dataset(path)
    assert ds.counts == {"normal_train": 3, "mixture_train": 4, "test": 4}
    assert ds.shape == (16, 16, 1) and ds.n_bits == 8 and ds.overlap == 0
    assert ds.splits["mixture_train"].labels == [None] * 4
    assert ds.splits["test"].labels[:2] == ["normal", "normal"]
    assert all(lab.startswith("abnormal:") for lab in ds.splits["test"].labels[2:])
    # every image in the dataset is distinct
    flat = np.concatenate([s.images.reshape(len(s.ids), -1) for s in ds.splits.values()])
    assert len({row.tobytes() for row in flat}) == len(flat)


def test_synth_dataset_is_byte_identical(tmp_path):
    def digest(d):
        h = hashlib.sha256()
        for root, _, files in sorted(os.walk(d)):
            for f in sorted(files):
                h.update(f.encode())
                h.update(open(os.path.join(root, f), "rb").read())
        return h.hexdigest()

    counts = SynthCounts(2, 1, 1, 1, 1)
    write_synth_dataset(tmp_path / "a", SPEC, counts)
    write_synth_dataset(tmp_path / "b", SPEC, counts)
    assert digest(tmp_path / "a") == digest(tmp_path / "b")


def test_volume_dataset_uses_fgt1(tmp_path):
    spec = SynthSpec(shape=(4, 8, 8, 1), n_bits=7, margin=(0, 2), lesion_size=(2, 3))
    path = write_synth_dataset(tmp_path, spec, SynthCounts(1, 1, 1, 1, 1))
    assert all(e.file.endswith(".fgt1") for e in read_manifest(path).entries)
    assert load_dataset(path).splits["test"].images.shape == (2, 4, 8, 8, 1)


# manifests --------------------------------------------------------------------------------


def make_dataset(tmp_path, entries, n_bits=8, shape=(4, 4, 1)):
    r = np.random.default_rng(0)
    for e in entries:
        p = tmp_path / e.file
        if not p.exists():
            save_pgm(p, r.integers(0, 256, (4, 4)))
    path = tmp_path / "manifest.csv"
    write_manifest(path, entries, n_bits=n_bits, shape=shape)
    return path


def two_each():
    return [
        ManifestEntry("a.pgm", "normal_train", "normal"),
        ManifestEntry("b.pgm", "normal_train", None),
        ManifestEntry("c.pgm", "mixture_train", None),
        ManifestEntry("d.pgm", "mixture_train", None),
        ManifestEntry("e.pgm", "test", "normal"),
        ManifestEntry("f.pgm", "test", "abnormal"),
    ]


def test_manifest_two_two_two(tmp_path):
    ds = load_dataset(make_dataset(tmp_path, two_each()))
    assert ds.counts == {"normal_train": 2, "mixture_train": 2, "test": 2}
    assert ds.splits["test"].ids == ["e.pgm", "f.pgm"]
    assert ds.splits["test"].images.shape == (2, 4, 4, 1)


def test_shared_file_counts_as_overlap(tmp_path):
    entries = two_each() + [ManifestEntry("a.pgm", "mixture_train", None)]
    ds = load_dataset(make_dataset(tmp_path, entries))
    assert ds.overlap == 1 and ds.counts["mixture_train"] == 3


def test_unlabeled_test_entry_accepted(tmp_path):
    entries = two_each() + [ManifestEntry("g.pgm", "test", None)]
    ds = load_dataset(make_dataset(tmp_path, entries))
    assert ds.splits["test"].labels == ["normal", "abnormal", None]


def test_missing_file_named(tmp_path):
    path = make_dataset(tmp_path, two_each())
    os.remove(tmp_path / "d.pgm")
    with pytest.raises(DataError, match="d.pgm"):
        load_dataset(path)


def test_shape_mismatch_named(tmp_path):
    path = make_dataset(tmp_path, two_each())
    save_pgm(tmp_path / "e.pgm", np.zeros((5, 4), dtype=np.int64))
    with pytest.raises(DataError, match="e.pgm"):
        load_dataset(path)


def test_abnormal_label_in_normal_train_rejected(tmp_path):
    entries = two_each()
    entries[1] = ManifestEntry("b.pgm", "normal_train", "abnormal:bright")
    with pytest.raises(DataError, match="b.pgm"):
        load_dataset(make_dataset(tmp_path, entries))


def test_values_outside_declared_bits_rejected(tmp_path):
    path = make_dataset(tmp_path, two_each(), n_bits=7)
    save_pgm(tmp_path / "a.pgm", np.full((4, 4), 200))
    with pytest.raises(DataError, match="a.pgm"):
        load_dataset(path)


def test_bad_header_and_split(tmp_path):
    (tmp_path / "m.csv").write_text("path,split,label\n")
    with pytest.raises(DataError, match="header"):
        read_manifest(tmp_path / "m.csv")
    (tmp_path / "m.csv").write_text("file,split,label\nx.pgm,training,\n")
    with pytest.raises(DataError, match="training"):
        read_manifest(tmp_path / "m.csv")


def test_data_root_env_override(tmp_path, monkeypatch):
    data = tmp_path / "elsewhere"
    data.mkdir()
    save_tensor(data / "v.fgt1", np.ones((4, 4, 1)))
    (tmp_path / "m.csv").write_text("file,split,label\nv.fgt1,test,normal\n")
    monkeypatch.setenv(DATA_ROOT_ENV, str(data))
    m = read_manifest(tmp_path / "m.csv")
    assert m.root == str(data)
    assert load_dataset(m).counts["test"] == 1
    # an explicit root wins over the environment
    assert read_manifest(tmp_path / "m.csv", root="/x").root == "/x"
    monkeypatch.delenv(DATA_ROOT_ENV)
    assert read_manifest(tmp_path / "m.csv").root == str(tmp_path)
