import numpy as np
import pytest
from hypothesis import given, strategies as st

from tavit.data import (
    EDEMA,
    ENHANCING,
    NECROTIC,
    PAPER_SPLIT_FRACTIONS,
    T1C_FLAIR_WEIGHT,
    SegMap,
    Volume,
    augment_flip,
    augment_flip_batch,
    batch_slices,
    bicubic_downsample,
    build_slices,
    cubic_kernel,
    downsample_labels,
    from_model_range,
    generate_phantom,
    largest_remainder,
    preprocess,
    seg_decode,
    seg_encode,
    split_patients,
    to_model_range,
)


@pytest.fixture(scope="module")
def phantom():
    return generate_phantom(7, (16, 32, 32), tumor_prob=1.0)


def test_phantom_is_deterministic(phantom):
    again = generate_phantom(7, (16, 32, 32), tumor_prob=1.0)
    for a, b in [(phantom.t1w.data, again.t1w.data), (phantom.t1c.data, again.t1c.data),
                 (phantom.seg.labels, again.seg.labels)]:
        np.testing.assert_array_equal(a, b)
    other = generate_phantom(8, (16, 32, 32), tumor_prob=1.0)
    assert not np.array_equal(phantom.t1c.data, other.t1c.data)


def test_phantom_volumes_are_normalized(phantom):
    for vol in (phantom.t1w, phantom.flair, phantom.t1c):
        assert vol.data.dtype == np.float32
        assert vol.data.min() == 0.0 and vol.data.max() == 1.0


def test_enhancing_tumor_is_bright_in_t1c_only(phantom):
    labels = phantom.seg.labels
    enh, brain = labels == ENHANCING, labels == 2
    assert enh.any() and phantom.has_tumor
    gain_t1c = phantom.t1c.data[enh].mean() - phantom.t1c.data[brain].mean()
    gain_t1w = phantom.t1w.data[enh].mean() - phantom.t1w.data[brain].mean()
    assert gain_t1c > 0.15 and gain_t1w < 0


def test_scalp_pins_the_intensity_scale(phantom):
    # every modality is divided by the same scalp intensity, so in healthy
    # brain the T1C - T1W difference is exactly the FLAIR term
    healthy = phantom.seg.labels == 2
    diff = phantom.t1c.data[healthy].astype(np.float64) - phantom.t1w.data[healthy]
    np.testing.assert_allclose(diff, T1C_FLAIR_WEIGHT * phantom.flair.data[healthy], atol=1e-6)
    tumor_free = generate_phantom(7, (16, 32, 32), tumor_prob=0.0)
    assert tumor_free.t1c.data.max() == 1.0


def test_tumor_labels_nest(phantom):
    labels = phantom.seg.labels
    for lab in (NECROTIC, EDEMA, ENHANCING):
        assert (labels == lab).any()
    assert set(np.unique(labels)) <= {0, 1, 2, 3, 4}


def test_tumor_free_phantom():
    p = generate_phantom(3, (8, 16, 16), tumor_prob=0.0)
    assert not p.has_tumor
    np.testing.assert_array_equal(np.unique(p.seg.labels), [0, 2])


def test_volume_and_segmap_validation():
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), "T2")
    with pytest.raises(ValueError):
        SegMap(np.full((2, 2, 2), 5))


# resampling -------------------------------------------------------------------

def test_cubic_kernel_partition_of_unity():
    for shift in np.linspace(0, 1, 7):
        taps = shift - np.array([-1, 0, 1, 2])
        assert abs(cubic_kernel(taps).sum() - 1.0) < 1e-12
    assert cubic_kernel(np.array([0.0]))[0] == 1.0
    assert cubic_kernel(np.array([1.0, 2.0, 2.5])).tolist() == [0.0, 0.0, 0.0]


def test_bicubic_preserves_constant_and_linear_ramp():
    np.testing.assert_allclose(bicubic_downsample(np.full((4, 8, 8), 0.3)), 0.3, rtol=1e-12)
    ramp = np.broadcast_to(np.arange(16.0) / 16, (2, 4, 16))
    out = bicubic_downsample(ramp, clamp=False)
    # interior samples land on the midpoint of each pair
    np.testing.assert_allclose(out[0, 0, 1:-1], (np.arange(1, 7) * 2 + 0.5) / 16, rtol=1e-12)


def test_bicubic_halves_extents_and_clamps():
    rng = np.random.default_rng(0)
    vol = Volume(rng.random((4, 240, 240)) > 0.5, "T1W")
    out = bicubic_downsample(vol)
    assert out.shape == (2, 120, 120) and out.modality == "T1W"
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0
    with pytest.raises(ValueError):
        bicubic_downsample(np.zeros((3, 8, 8)))


def test_label_downsampling_majority():
    lab = np.zeros((2, 2, 4), dtype=np.uint8)
    lab[:, :, 2:] = 4
    lab[0, 0, 2] = 2
    np.testing.assert_array_equal(downsample_labels(SegMap(lab)).labels, [[[0, 4]]])


def test_preprocess_halves_patient(phantom):
    small = preprocess(phantom)
    assert small.t1c.shape == (8, 16, 16) and small.seg.shape == (8, 16, 16)


# encodings ---------------------------------------------------------------------

def test_seg_encoding_levels():
    np.testing.assert_array_equal(seg_encode(np.arange(5)), [-1.0, -0.5, 0.0, 0.5, 1.0])
    assert seg_decode(np.array([0.4])).labels.tolist() == [3]
    with pytest.raises(ValueError):
        seg_encode(np.array([1.5]))


@given(st.lists(st.integers(0, 4), min_size=1, max_size=50),
       st.lists(st.floats(-0.24, 0.24), min_size=50, max_size=50))
def test_property_seg_round_trip_tolerates_noise(labels, noise):
    lab = np.array(labels, dtype=np.uint8)
    enc = seg_encode(lab) + np.array(noise[: len(lab)], dtype=np.float32)
    np.testing.assert_array_equal(seg_decode(enc).labels, lab)


@given(st.lists(st.floats(0, 1, width=32), min_size=1, max_size=20))
def test_property_model_range_round_trip(values):
    x = np.array(values, dtype=np.float32)
    np.testing.assert_allclose(from_model_range(to_model_range(x)), x, atol=1e-7)


# augmentation --------------------------------------------------------------------

def test_flip_moves_arrays_together():
    a = np.arange(6.0).reshape(1, 2, 3)
    b = a + 10
    out = augment_flip([a, b], np.random.default_rng(0), p=1.0)
    np.testing.assert_array_equal(out[0], a[..., ::-1])
    np.testing.assert_array_equal(out[1], b[..., ::-1])
    same = augment_flip([a, b], np.random.default_rng(0), p=0.0)
    assert same[0] is a


def test_batch_flip_is_joint_per_sample():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((16, 2, 3, 4))
    y = x[:, :1] * 3
    lat = x[:, 1:] - 1
    fx, fy, fl = augment_flip_batch([x, y, lat], np.random.default_rng(9))
    flipped = ~np.all(fx == x, axis=(1, 2, 3))
    assert 0 < flipped.sum() < 16
    np.testing.assert_array_equal(fy, fx[:, :1] * 3)
    np.testing.assert_array_equal(fl, fx[:, 1:] - 1)
    assert augment_flip_batch([x, None], np.random.default_rng(0))[1] is None


# splitting ------------------------------------------------------------------------

def test_split_counts_paper_cohort():
    ids = [f"P{i:03d}" for i in range(501)]
    split = split_patients(ids, PAPER_SPLIT_FRACTIONS)
    assert (len(split.train), len(split.val), len(split.test)) == (400, 50, 51)


def test_split_counts_small_cohort():
    split = split_patients([str(i) for i in range(10)], (0.8, 0.1, 0.1))
    assert (len(split.train), len(split.val), len(split.test)) == (8, 1, 1)


@given(n=st.integers(3, 300), seed=st.integers(0, 100))
def test_property_split_is_a_partition(n, seed):
    ids = [f"P{i}" for i in range(n)]
    split = split_patients(ids, seed=seed)
    assert sorted(split.train + split.val + split.test) == sorted(ids)
    assert split_patients(ids, seed=seed) == split


@given(total=st.integers(0, 1000), a=st.floats(0.01, 1), b=st.floats(0.01, 1), c=st.floats(0.01, 1))
def test_property_largest_remainder_sums(total, a, b, c):
    s = a + b + c
    counts = largest_remainder(total, (a / s, b / s, c / s))
    assert sum(counts) == total
    for n, f in zip(counts, (a / s, b / s, c / s)):
        assert abs(n - total * f) < 1 + 1e-9


def test_split_errors():
    with pytest.raises(ValueError):
        split_patients(["a", "b", "c"], (0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        split_patients(["a", "a", "b"])
    with pytest.raises(ValueError):
        split_patients(["a", "b"])


# slices and batches -----------------------------------------------------------------

def test_build_slices_per_stage(phantom):
    syn = build_slices([phantom], "synthesis")
    assert syn.inputs.shape == (16, 2, 32, 32) and syn.targets.shape == (16, 1, 32, 32)
    assert syn.inputs.min() >= -1 and syn.inputs.max() <= 1
    seg = build_slices([phantom], "segmentation", modalities=("T1W",))
    assert seg.inputs.shape == (16, 1, 32, 32)
    np.testing.assert_array_equal(seg.targets[:, 0], seg_encode(phantom.seg))
    lat = build_slices([phantom], "latent")
    np.testing.assert_array_equal(lat.inputs, lat.targets)


def test_build_slices_latent_lookup(phantom):
    with pytest.raises(KeyError):
        build_slices([phantom], "synthesis", "test", need_latents=True, latents={})
    lat = {(phantom.patient_id, "pred"): np.zeros((16, 4, 8, 8))}
    assert build_slices([phantom], "synthesis", "test", latents=lat, need_latents=True).latents.shape == (16, 4, 8, 8)
    with pytest.raises(ValueError):
        build_slices([], "synthesis")


def test_batches_cover_every_slice_once(phantom):
    slices = build_slices([phantom], "synthesis")
    seen = np.concatenate([b.inputs for b in batch_slices(slices, 5, np.random.default_rng(1))])
    assert len(seen) == 16
    key = lambda arr: sorted(map(bytes, arr.reshape(len(arr), -1)))
    assert key(seen) == key(slices.inputs)
    with pytest.raises(ValueError):
        next(batch_slices(slices, 0))
