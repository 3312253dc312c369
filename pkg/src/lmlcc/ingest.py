"""CT volume (MetaImage MHD/RAW) and radiologist-rating CSV ingestion.

The MHD parser supports uncompressed volumes whose ElementDataFile points at
a separate raw file (the layout LUNA16 ships). Raw data is x-fastest,
little-endian; volumes are held in memory as [z, y, x] arrays while ``dims``
keeps the header's (nx, ny, nz) order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

REQUIRED_HEADER_KEYS = ("DimSize", "ElementSpacing", "ElementType", "ElementDataFile")

ELEMENT_DTYPES = {
    "MET_SHORT": np.dtype("<i2"),
    "MET_FLOAT": np.dtype("<f4"),
}


@dataclass(frozen=True)
class CtVolume:
    """A CT scan in HU with voxel-grid geometry.

    ``voxels`` is indexed [z, y, x]; ``dims`` is (nx, ny, nz), matching the
    MetaImage DimSize convention. ``origin`` is the world position (mm) of
    voxel (0, 0, 0).
    """

    series_id: str
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    voxels: np.ndarray = field(repr=False)

    def __post_init__(self):
        nx, ny, nz = self.dims
        if min(self.dims) < 1:
            raise DataError(f"volume dims must all be >= 1, got {self.dims}")
        if min(self.spacing) <= 0:
            raise DataError(f"voxel spacing must be > 0, got {self.spacing}")
        if self.voxels.shape != (nz, ny, nx):
            raise DataError(
                f"voxel array shape {self.voxels.shape} does not match dims {self.dims}"
            )


@dataclass(frozen=True)
class NoduleRecord:
    """One annotated nodule: world-space location plus per-radiologist
    malignancy ratings (each 1..5, most benign to most malignant)."""

    series_id: str
    nodule_id: str
    center_world: tuple[float, float, float]
    diameter_mm: float
    ratings: tuple[int, ...]

    def __post_init__(self):
        if self.diameter_mm <= 0:
            raise DataError(f"nodule {self.nodule_id}: diameter must be > 0")
        for r in self.ratings:
            if not 1 <= r <= 5:
                raise DataError(f"nodule {self.nodule_id}: rating {r} outside 1..5")


def _parse_header(header_path: Path) -> dict[str, str]:
    entries: dict[str, str] = {}
    for line in header_path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{header_path}: malformed header line {line!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def read_mhd_volume(header_path: str | Path) -> CtVolume:
    """Parse an MHD header and its raw data file into a CtVolume.

    Raises DataError naming the offending key for missing/malformed header
    fields, and on raw-file size mismatches.
    """
    header_path = Path(header_path)
    if not header_path.is_file():
        raise DataError(f"header file not found: {header_path}")
    entries = _parse_header(header_path)

    for key in REQUIRED_HEADER_KEYS:
        if key not in entries:
            raise DataError(f"{header_path}: missing header key '{key}'")

    try:
        dims = tuple(int(t) for t in entries["DimSize"].split())
    except ValueError:
        raise DataError(f"{header_path}: malformed 'DimSize'") from None
    if len(dims) != 3:
        raise DataError(f"{header_path}: 'DimSize' must have 3 entries")
    try:
        spacing = tuple(float(t) for t in entries["ElementSpacing"].split())
    except ValueError:
        raise DataError(f"{header_path}: malformed 'ElementSpacing'") from None
    if len(spacing) != 3:
        raise DataError(f"{header_path}: 'ElementSpacing' must have 3 entries")
    if "Offset" in entries:
        try:
            origin = tuple(float(t) for t in entries["Offset"].split())
        except ValueError:
            raise DataError(f"{header_path}: malformed 'Offset'") from None
        if len(origin) != 3:
            raise DataError(f"{header_path}: 'Offset' must have 3 entries")
    else:
        origin = (0.0, 0.0, 0.0)

    element_type = entries["ElementType"]
    if element_type not in ELEMENT_DTYPES:
        raise DataError(f"{header_path}: unsupported 'ElementType' {element_type}")
    if entries.get("BinaryDataByteOrderMSB", "False") == "True":
        raise DataError(f"{header_path}: big-endian 'BinaryDataByteOrderMSB' unsupported")
    if entries.get("CompressedData", "False") == "True":
        raise DataError(f"{header_path}: 'CompressedData' volumes unsupported")

    data_file = entries["ElementDataFile"]
    if data_file in ("LOCAL", "LIST"):
        raise DataError(f"{header_path}: 'ElementDataFile' = {data_file} unsupported")
    data_path = header_path.parent / data_file
    if not data_path.is_file():
        raise DataError(f"raw data file not found: {data_path}")

    dtype = ELEMENT_DTYPES[element_type]
    nx, ny, nz = dims
    expected = nx * ny * nz * dtype.itemsize
    raw = data_path.read_bytes()
    if len(raw) != expected:
        raise DataError(
            f"{data_path}: raw size {len(raw)} bytes != expected {expected} "
            f"({nx}x{ny}x{nz} x {dtype.itemsize} bytes)"
        )
    voxels = np.frombuffer(raw, dtype=dtype).reshape(nz, ny, nx).astype(np.float64)
    return CtVolume(
        series_id=header_path.stem,
        dims=dims,
        spacing=spacing,
        origin=origin,
        voxels=voxels,
    )


def write_mhd_volume(
    volume: CtVolume, header_path: str | Path, element_type: str = "MET_SHORT"
) -> None:
    """Write ``volume`` as an MHD header plus sibling .raw file."""
    if element_type not in ELEMENT_DTYPES:
        raise DataError(f"unsupported ElementType {element_type}")
    header_path = Path(header_path)
    raw_name = header_path.stem + ".raw"
    nx, ny, nz = volume.dims
    header = "\n".join(
        [
            "ObjectType = Image",
            "NDims = 3",
            "BinaryData = True",
            "BinaryDataByteOrderMSB = False",
            "CompressedData = False",
            f"Offset = {volume.origin[0]:g} {volume.origin[1]:g} {volume.origin[2]:g}",
            f"ElementSpacing = {volume.spacing[0]:g} {volume.spacing[1]:g} {volume.spacing[2]:g}",
            f"DimSize = {nx} {ny} {nz}",
            f"ElementType = {element_type}",
            f"ElementDataFile = {raw_name}",
        ]
    )
    header_path.write_text(header + "\n")
    dtype = ELEMENT_DTYPES[element_type]
    data = np.ascontiguousarray(volume.voxels, dtype=dtype)
    (header_path.parent / raw_name).write_bytes(data.tobytes())


RATINGS_COLUMNS = (
    "series_id",
    "nodule_id",
    "coordX",
    "coordY",
    "coordZ",
    "diameter_mm",
    "ratings",
)


def read_ratings(csv_path: str | Path) -> list[NoduleRecord]:
    """Parse the annotation/rating CSV into NoduleRecords.

    Ratings are pipe-separated integers ("4|5|3"); an empty field yields an
    empty tuple (downstream labeling treats it as ambiguous). Errors carry
    the 1-based file row number.
    """
    csv_path = Path(csv_path)
    if not csv_path.is_file():
        raise DataError(f"ratings file not found: {csv_path}")
    records: list[NoduleRecord] = []
    seen: set[str] = set()
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{csv_path}: empty file") from None
        if tuple(h.strip() for h in header) != RATINGS_COLUMNS:
            raise DataError(
                f"{csv_path}: header must be {','.join(RATINGS_COLUMNS)}"
            )
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(RATINGS_COLUMNS):
                raise DataError(f"{csv_path} row {row_no}: expected {len(RATINGS_COLUMNS)} fields")
            series_id, nodule_id, cx, cy, cz, diam, rating_field = (t.strip() for t in row)
            if nodule_id in seen:
                raise DataError(f"{csv_path} row {row_no}: duplicate nodule_id '{nodule_id}'")
            seen.add(nodule_id)
            if rating_field:
                try:
                    ratings = tuple(int(t) for t in rating_field.split("|"))
                except ValueError:
                    raise DataError(
                        f"{csv_path} row {row_no}: malformed ratings '{rating_field}'"
                    ) from None
            else:
                ratings = ()
            for r in ratings:
                if not 1 <= r <= 5:
                    raise DataError(f"{csv_path} row {row_no}: rating {r} outside 1..5")
            try:
                record = NoduleRecord(
                    series_id=series_id,
                    nodule_id=nodule_id,
                    center_world=(float(cx), float(cy), float(cz)),
                    diameter_mm=float(diam),
                    ratings=ratings,
                )
            except ValueError:
                raise DataError(f"{csv_path} row {row_no}: malformed numeric field") from None
            records.append(record)
    return records


def write_ratings(csv_path: str | Path, records: list[NoduleRecord]) -> None:
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RATINGS_COLUMNS)
        for rec in records:
            writer.writerow(
                [
                    rec.series_id,
                    rec.nodule_id,
                    f"{rec.center_world[0]:g}",
                    f"{rec.center_world[1]:g}",
                    f"{rec.center_world[2]:g}",
                    f"{rec.diameter_mm:g}",
                    "|".join(str(r) for r in rec.ratings),
                ]
            )


def world_to_voxel(
    volume: CtVolume, point: tuple[float, float, float]
) -> tuple[float, float, float]:
    """World mm -> continuous voxel coordinate (x, y, z); may lie off-grid."""
    return tuple(
        (p - o) / s for p, o, s in zip(point, volume.origin, volume.spacing)
    )


def voxel_to_world(
    volume: CtVolume, index: tuple[float, float, float]
) -> tuple[float, float, float]:
    """Continuous voxel coordinate (x, y, z) -> world mm."""
    return tuple(i * s + o for i, o, s in zip(index, volume.origin, volume.spacing))
