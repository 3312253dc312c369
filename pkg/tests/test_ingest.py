import numpy as np
import pytest
from hypothesis import given, strategies as st

from lmlcc.errors import DataError
from lmlcc.ingest import (
    CtVolume,
    read_mhd_volume,
    read_ratings,
    voxel_to_world,
    world_to_voxel,
    write_mhd_volume,
)


def _write_pair(tmp_path, header_lines, raw_bytes, name="vol"):
    header = tmp_path / f"{name}.mhd"
    header.write_text("\n".join(header_lines) + "\n")
    (tmp_path / f"{name}.raw").write_bytes(raw_bytes)
    return header


BASE_HEADER = [
    "ObjectType = Image",
    "NDims = 3",
    "DimSize = 4 4 2",
    "ElementSpacing = 0.7 0.7 1",
    "ElementType = MET_SHORT",
    "ElementDataFile = vol.raw",
]


def test_read_mhd_basic(tmp_path):
    raw = np.arange(32, dtype="<i2").tobytes()
    header = _write_pair(tmp_path, BASE_HEADER, raw)
    vol = read_mhd_volume(header)
    assert vol.dims == (4, 4, 2)
    assert vol.spacing == (0.7, 0.7, 1.0)
    assert vol.origin == (0.0, 0.0, 0.0)
    assert vol.voxels.shape == (2, 4, 4)
    # x-fastest order: voxel (x=1, y=0, z=0) is the second raw value
    assert vol.voxels[0, 0, 1] == 1


def test_read_mhd_missing_key_names_it(tmp_path):
    lines = [l for l in BASE_HEADER if not l.startswith("ElementSpacing")]
    header = _write_pair(tmp_path, lines, b"\x00" * 64)
    with pytest.raises(DataError, match="ElementSpacing"):
        read_mhd_volume(header)


def test_read_mhd_size_mismatch(tmp_path):
    header = _write_pair(tmp_path, BASE_HEADER, b"\x00" * 63)
    with pytest.raises(DataError, match="size"):
        read_mhd_volume(header)


def test_read_mhd_local_data_unsupported(tmp_path):
    lines = BASE_HEADER[:-1] + ["ElementDataFile = LOCAL"]
    header = _write_pair(tmp_path, lines, b"")
    with pytest.raises(DataError, match="LOCAL"):
        read_mhd_volume(header)


def test_mhd_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    voxels = rng.integers(-1024, 3071, size=(5, 6, 7)).astype(np.float64)
    vol = CtVolume(
        series_id="rt",
        dims=(7, 6, 5),
        spacing=(0.7, 0.7, 1.0),
        origin=(-12.0, 3.5, 40.0),
        voxels=voxels,
    )
    write_mhd_volume(vol, tmp_path / "rt.mhd")
    back = read_mhd_volume(tmp_path / "rt.mhd")
    assert back.dims == vol.dims
    assert back.origin == vol.origin
    assert np.array_equal(back.voxels, voxels)
    # a second write of the re-read volume reproduces the raw bytes
    write_mhd_volume(back, tmp_path / "rt2.mhd")
    assert (tmp_path / "rt.raw").read_bytes() == (tmp_path / "rt2.raw").read_bytes()


def test_read_ratings(tmp_path):
    csv_path = tmp_path / "ratings.csv"
    csv_path.write_text(
        "series_id,nodule_id,coordX,coordY,coordZ,diameter_mm,ratings\n"
        "s1,n1,1.5,-2.0,30,6.1,4|5|3|3\n"
        "s1,n2,0,0,0,4.0,\n"
    )
    records = read_ratings(csv_path)
    assert records[0].ratings == (4, 5, 3, 3)
    assert records[0].center_world == (1.5, -2.0, 30.0)
    assert records[1].ratings == ()


def test_read_ratings_out_of_range_names_row(tmp_path):
    csv_path = tmp_path / "ratings.csv"
    csv_path.write_text(
        "series_id,nodule_id,coordX,coordY,coordZ,diameter_mm,ratings\n"
        "s1,n1,0,0,0,4.0,6\n"
    )
    with pytest.raises(DataError, match="row 2"):
        read_ratings(csv_path)


def test_read_ratings_duplicate_id(tmp_path):
    csv_path = tmp_path / "ratings.csv"
    csv_path.write_text(
        "series_id,nodule_id,coordX,coordY,coordZ,diameter_mm,ratings\n"
        "s1,n1,0,0,0,4.0,4|4\n"
        "s1,n1,1,1,1,4.0,2|2\n"
    )
    with pytest.raises(DataError, match="duplicate"):
        read_ratings(csv_path)


def _volume(origin=(0.0, 0.0, 0.0), spacing=(1.0, 1.0, 1.0)):
    return CtVolume(
        series_id="g",
        dims=(4, 4, 4),
        spacing=spacing,
        origin=origin,
        voxels=np.zeros((4, 4, 4)),
    )


def test_world_to_voxel_examples():
    assert world_to_voxel(_volume(), (5.0, 6.0, 7.0)) == (5.0, 6.0, 7.0)
    v = _volume(origin=(-100.0, -100.0, -50.0), spacing=(0.7, 0.7, 1.0))
    assert world_to_voxel(v, (-100.0, -100.0, -50.0)) == (0.0, 0.0, 0.0)
    v = _volume(spacing=(0.5, 0.5, 2.0))
    assert world_to_voxel(v, (1.0, 1.0, 4.0)) == (2.0, 2.0, 2.0)


@given(
    st.tuples(*[st.floats(-200, 200) for _ in range(3)]),
    st.tuples(*[st.floats(0.1, 5) for _ in range(3)]),
    st.tuples(*[st.floats(-50, 50) for _ in range(3)]),
)
def test_world_voxel_round_trip(origin, spacing, point):
    v = _volume(origin=origin, spacing=spacing)
    back = voxel_to_world(v, world_to_voxel(v, point))
    assert all(abs(a - b) < 1e-9 for a, b in zip(back, point))
