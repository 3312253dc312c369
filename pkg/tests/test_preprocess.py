import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lmlcc.errors import DataError
from lmlcc.ingest import CtVolume
from lmlcc.preprocess import (
    NormalizedVolume,
    Patch,
    clip_normalize,
    extract_patch,
    read_patch_cache,
    resample_trilinear,
    rotate_augment,
    rotate_patch,
    write_patch_cache,
)


def _ct(voxels, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    nz, ny, nx = voxels.shape
    return CtVolume(
        series_id="t", dims=(nx, ny, nz), spacing=spacing, origin=origin,
        voxels=np.asarray(voxels, dtype=np.float64),
    )


def _nv(voxels, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    nz, ny, nx = voxels.shape
    return NormalizedVolume(
        series_id="t", dims=(nx, ny, nz), spacing=spacing, origin=origin,
        voxels=np.asarray(voxels, dtype=np.float64),
    )


# --------------------------------------------------------------------------
# clip_normalize
# --------------------------------------------------------------------------


def test_clip_normalize_examples():
    vol = _ct(np.array([[[-1000.0, 500.0, 700.0, -250.0]]]))
    out = clip_normalize(vol).voxels[0, 0]
    assert out[0] == 0.0
    assert out[1] == 1.0
    assert out[2] == 1.0
    assert out[3] == 0.5


@given(st.lists(st.floats(-3000, 4000), min_size=1, max_size=32))
def test_clip_normalize_monotone_and_bounded(hus):
    vol = _ct(np.array(hus).reshape(1, 1, -1))
    out = clip_normalize(vol).voxels.ravel()
    assert np.all(out >= 0.0) and np.all(out <= 1.0)
    order = np.argsort(hus, kind="stable")
    assert np.all(np.diff(out[order]) >= -1e-15)


# --------------------------------------------------------------------------
# resample_trilinear
# --------------------------------------------------------------------------


def test_resample_identity_spacing():
    rng = np.random.default_rng(0)
    vol = _nv(rng.random((5, 6, 7)), spacing=(0.7, 0.7, 1.0))
    out = resample_trilinear(vol, (0.7, 0.7, 1.0))
    assert out.dims == vol.dims
    assert np.allclose(out.voxels, vol.voxels, atol=1e-12)


@pytest.mark.parametrize("target", [(0.5, 0.5, 0.5), (2.0, 1.0, 0.4), (1.3, 0.9, 1.0)])
def test_resample_constant_volume(target):
    vol = _nv(np.full((6, 6, 6), 0.4))
    out = resample_trilinear(vol, target)
    assert np.allclose(out.voxels, 0.4, atol=1e-12)


def test_resample_linear_ramp_downsample():
    nx = 9
    ramp = np.tile(np.arange(nx) / (nx - 1), (4, 4, 1))
    vol = _nv(ramp)
    out = resample_trilinear(vol, (2.0, 1.0, 1.0))
    expected = np.arange(out.dims[0]) * 2.0 / (nx - 1)
    assert np.allclose(out.voxels[0, 0], expected, atol=1e-6)


@given(st.integers(0, 10_000), st.floats(0.3, 3.0), st.floats(0.3, 3.0))
@settings(max_examples=30, deadline=None)
def test_resample_no_overshoot(seed, tx, tz):
    rng = np.random.default_rng(seed)
    vol = _nv(rng.random((4, 5, 6)))
    out = resample_trilinear(vol, (tx, tx, tz))
    assert out.voxels.min() >= vol.voxels.min() - 1e-12
    assert out.voxels.max() <= vol.voxels.max() + 1e-12


# --------------------------------------------------------------------------
# extract_patch
# --------------------------------------------------------------------------


def test_extract_patch_interior_no_padding():
    rng = np.random.default_rng(1)
    data = rng.random((64, 64, 64)) * 0.5 + 0.25  # strictly positive
    vol = _nv(data)
    patch = extract_patch(vol, (32.0, 32.0, 32.0), 32)
    assert patch.voxels.shape == (32, 32, 32)
    assert np.array_equal(patch.voxels, data[16:48, 16:48, 16:48])
    assert np.all(patch.voxels > 0)


def test_extract_patch_corner_padding_fraction():
    rng = np.random.default_rng(2)
    data = rng.random((64, 64, 64)) + 0.5
    vol = _nv(data)
    patch = extract_patch(vol, (0.0, 0.0, 0.0), 32)

    # brute-force reference crop
    ref = np.zeros((32, 32, 32))
    for z in range(32):
        for y in range(32):
            for x in range(32):
                sz, sy, sx = z - 16, y - 16, x - 16
                if 0 <= sz < 64 and 0 <= sy < 64 and 0 <= sx < 64:
                    ref[z, y, x] = data[sz, sy, sx]
    assert np.array_equal(patch.voxels, ref)
    zeros = int(np.sum(patch.voxels == 0.0))
    assert zeros == 32 ** 3 * 7 // 8


def test_extract_patch_side_one():
    data = np.arange(27, dtype=float).reshape(3, 3, 3) / 27.0
    vol = _nv(data)
    patch = extract_patch(vol, (1.2, 0.8, 2.0), 1)
    assert patch.voxels.shape == (1, 1, 1)
    assert patch.voxels[0, 0, 0] == data[2, 1, 1]


def test_extract_patch_out_of_bounds_error():
    vol = _nv(np.zeros((8, 8, 8)))
    with pytest.raises(DataError, match="outside"):
        extract_patch(vol, (100.0, 100.0, 100.0), 4)


# --------------------------------------------------------------------------
# rotations
# --------------------------------------------------------------------------


def test_rotate_90_hot_voxel_permutation():
    side = 8
    vox = np.zeros((side, side, side))
    i, j, k = 5, 2, 3  # x, y, z
    vox[k, j, i] = 1.0
    out = rotate_patch(vox, 90)
    assert out[k, side - 1 - i, j] == 1.0
    assert out.sum() == 1.0


def test_rotate_180_equals_90_twice():
    rng = np.random.default_rng(4)
    vox = rng.random((6, 6, 6))
    twice = rotate_patch(rotate_patch(vox, 90), 90)
    assert np.array_equal(rotate_patch(vox, 180), twice)


def test_rotate_90_group_order_four():
    rng = np.random.default_rng(5)
    vox = rng.random((4, 4, 4))
    out = vox
    for _ in range(4):
        out = rotate_patch(out, 90)
    assert np.array_equal(out, vox)


def _cylinder_symmetric(side):
    # Smooth and nearly zero at the inscribed-circle boundary, so the
    # zero padding of off-axis rotations is itself symmetric.
    c = (side - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    r2 = (xx - c) ** 2 + (yy - c) ** 2
    slice2d = np.exp(-r2 / (side / 5.0) ** 2)
    return np.tile(slice2d, (side, 1, 1))


def test_rotate_symmetric_phantom_all_outputs_agree():
    patch = Patch(nodule_id="sym", side=32, voxels=_cylinder_symmetric(32))
    outputs = rotate_augment(patch)
    assert len(outputs) == 8
    assert [p.augmentation_tag for p in outputs][:2] == ["orig", "rot045"]
    base = outputs[0].voxels
    for rotated in outputs[1:]:
        mad = np.abs(rotated.voxels - base).mean()
        assert mad < 1e-3


# --------------------------------------------------------------------------
# patch cache
# --------------------------------------------------------------------------


def test_patch_cache_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    patches = [
        Patch(nodule_id="n1", side=4, voxels=rng.random((4, 4, 4)).astype(np.float32),
              label=1, augmentation_tag="orig"),
        Patch(nodule_id="n2", side=4, voxels=rng.random((4, 4, 4)).astype(np.float32),
              label=None, augmentation_tag="rot090"),
    ]
    write_patch_cache(tmp_path, patches)
    back = read_patch_cache(tmp_path)
    assert [p.nodule_id for p in back] == ["n1", "n2"]
    assert back[0].label == 1 and back[1].label is None
    assert back[1].augmentation_tag == "rot090"
    for a, b in zip(patches, back):
        assert np.array_equal(a.voxels, b.voxels)
