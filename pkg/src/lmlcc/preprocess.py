"""HU clipping/normalization, trilinear resampling, cubic patch extraction,
and axial rotation augmentation.

All voxel data downstream of ``clip_normalize`` lives in [0, 1], where 0 is
-1000 HU (air) and 1 is 500 HU. Patches are cubic [z, y, x] arrays; padding
and rotation fill use 0 (air).
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .ingest import CtVolume, world_to_voxel

HU_LO = -1000.0
HU_HI = 500.0

PATCH_SIDES = (16, 32, 48, 64)

ROTATION_TAGS = ("orig", "rot045", "rot090", "rot135", "rot180", "rot225", "rot270", "rot315")


@dataclass(frozen=True)
class NormalizedVolume:
    """Same geometry as CtVolume, voxels rescaled into [0, 1]."""

    series_id: str
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    voxels: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class Patch:
    """A cubic sub-volume centered on a nodule, values in [0, 1]."""

    nodule_id: str
    side: int
    voxels: np.ndarray = field(repr=False)
    label: int | None = None
    augmentation_tag: str = "orig"

    def __post_init__(self):
        if self.voxels.shape != (self.side, self.side, self.side):
            raise DataError(
                f"patch {self.nodule_id}: voxels shape {self.voxels.shape} "
                f"is not cubic side {self.side}"
            )


def clip_normalize(volume: CtVolume) -> NormalizedVolume:
    """Clamp HU into [-1000, 500] and rescale linearly onto [0, 1]."""
    out = (np.clip(volume.voxels, HU_LO, HU_HI) - HU_LO) / (HU_HI - HU_LO)
    return NormalizedVolume(
        series_id=volume.series_id,
        dims=volume.dims,
        spacing=volume.spacing,
        origin=volume.origin,
        voxels=out,
    )


def _axis_positions(n_in: int, s_in: float, s_out: float) -> tuple[int, np.ndarray]:
    n_out = max(1, int(round(n_in * s_in / s_out)))
    # Target voxel centers mapped into source voxel coordinates, clamped to
    # the source lattice so trilinear never overshoots the input range.
    pos = np.arange(n_out) * (s_out / s_in)
    return n_out, np.clip(pos, 0.0, n_in - 1.0)


def resample_trilinear(
    volume: NormalizedVolume, target_spacing: tuple[float, float, float]
) -> NormalizedVolume:
    """Resample onto ``target_spacing`` with trilinear interpolation.

    Output dims are round(in_dims * in_spacing / target_spacing), at least 1
    per axis.
    """
    if min(target_spacing) <= 0:
        raise DataError(f"target spacing must be > 0, got {target_spacing}")
    nx, ny, nz = volume.dims
    sx, sy, sz = volume.spacing
    tx, ty, tz = target_spacing
    nx_out, px = _axis_positions(nx, sx, tx)
    ny_out, py = _axis_positions(ny, sy, ty)
    nz_out, pz = _axis_positions(nz, sz, tz)

    vol = volume.voxels

    def lo_hi(pos, n):
        lo = np.floor(pos).astype(np.intp)
        lo = np.minimum(lo, n - 1)
        hi = np.minimum(lo + 1, n - 1)
        return lo, hi, pos - lo

    zlo, zhi, fz = lo_hi(pz, nz)
    ylo, yhi, fy = lo_hi(py, ny)
    xlo, xhi, fx = lo_hi(px, nx)

    out = np.zeros((nz_out, ny_out, nx_out), dtype=vol.dtype)
    for ziv, wz in ((zlo, 1.0 - fz), (zhi, fz)):
        for yiv, wy in ((ylo, 1.0 - fy), (yhi, fy)):
            for xiv, wx in ((xlo, 1.0 - fx), (xhi, fx)):
                w = wz[:, None, None] * wy[None, :, None] * wx[None, None, :]
                out += w * vol[np.ix_(ziv, yiv, xiv)]

    return NormalizedVolume(
        series_id=volume.series_id,
        dims=(nx_out, ny_out, nz_out),
        spacing=target_spacing,
        origin=volume.origin,
        voxels=out,
    )


def extract_patch(
    volume: NormalizedVolume,
    center_world: tuple[float, float, float],
    side: int,
    nodule_id: str = "",
    label: int | None = None,
) -> Patch:
    """Cut a side^3 cube centered at the nodule's voxel position (rounded
    half-up), zero-padding regions outside the volume."""
    if side < 1:
        raise DataError(f"patch side must be >= 1, got {side}")
    ctv = CtVolume(
        series_id=volume.series_id,
        dims=volume.dims,
        spacing=volume.spacing,
        origin=volume.origin,
        voxels=volume.voxels,
    )
    cont = world_to_voxel(ctv, center_world)
    center = [int(np.floor(c + 0.5)) for c in cont]  # (cx, cy, cz)
    nx, ny, nz = volume.dims

    outside = []
    for c, n in zip(center, (nx, ny, nz)):
        outside.append(max(-c, c - (n - 1), 0))
    if all(d > side / 2 for d in outside):
        raise DataError(
            f"patch center {center} lies more than {side / 2:g} voxels outside "
            f"the grid on every axis"
        )

    half = side // 2
    starts = [c - half for c in center]  # x, y, z order
    cube = np.zeros((side, side, side), dtype=volume.voxels.dtype)
    # Overlap of [start, start+side) with [0, n) per axis, in z, y, x order.
    slices_src = []
    slices_dst = []
    for start, n in zip(reversed(starts), (nz, ny, nx)):
        src_lo = max(start, 0)
        src_hi = min(start + side, n)
        if src_lo >= src_hi:
            slices_src.append(slice(0, 0))
            slices_dst.append(slice(0, 0))
        else:
            slices_src.append(slice(src_lo, src_hi))
            slices_dst.append(slice(src_lo - start, src_hi - start))
    cube[tuple(slices_dst)] = volume.voxels[tuple(slices_src)]
    return Patch(nodule_id=nodule_id, side=side, voxels=cube, label=label)


def _rotate_slicewise_bilinear(voxels: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate every axial (z) slice about the patch center, zero padding.

    The rotation direction matches the exact 90-degree index permutation
    used by rot90 on axes (1, 2).
    """
    side = voxels.shape[1]
    c = (side - 1) / 2.0
    theta = np.deg2rad(angle_deg)
    yy, xx = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    u = xx - c
    v = yy - c
    src_x = c + u * np.cos(theta) - v * np.sin(theta)
    src_y = c + u * np.sin(theta) + v * np.cos(theta)

    x0 = np.floor(src_x).astype(np.intp)
    y0 = np.floor(src_y).astype(np.intp)
    fx = src_x - x0
    fy = src_y - y0

    out = np.zeros_like(voxels)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xs = x0 + dx
            ys = y0 + dy
            valid = (xs >= 0) & (xs < side) & (ys >= 0) & (ys < side)
            xs_c = np.clip(xs, 0, side - 1)
            ys_c = np.clip(ys, 0, side - 1)
            w = (wy * wx) * valid
            out += voxels[:, ys_c, xs_c] * w[None, :, :]
    return out


def rotate_patch(voxels: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate a cubic patch about the z axis; multiples of 90 degrees are
    exact index permutations, the rest bilinear with zero padding."""
    angle = angle_deg % 360
    if angle == 0:
        return voxels.copy()
    if angle % 90 == 0:
        return np.rot90(voxels, k=int(angle // 90), axes=(1, 2)).copy()
    return _rotate_slicewise_bilinear(voxels, angle)


def rotate_augment(patch: Patch) -> list[Patch]:
    """Original plus 7 rotations spaced 45 degrees apart about the z axis."""
    out = []
    for k, tag in enumerate(ROTATION_TAGS):
        voxels = rotate_patch(patch.voxels, 45.0 * k)
        out.append(
            Patch(
                nodule_id=patch.nodule_id,
                side=patch.side,
                voxels=voxels,
                label=patch.label,
                augmentation_tag=tag,
            )
        )
    return out


# ---------------------------------------------------------------------------
# Patch cache: binary records + CSV index.
#
# Record layout, little-endian:
#   u16 nodule_id length, utf-8 bytes
#   u16 side
#   u16 augmentation_tag length, utf-8 bytes
#   i8  label (-1 = none)
#   side^3 float32 voxels
# ---------------------------------------------------------------------------

INDEX_COLUMNS = ("nodule_id", "side", "augmentation_tag", "label", "offset")


def write_patch_cache(cache_dir: str | Path, patches: list[Patch]) -> tuple[Path, Path]:
    """Write patches to <dir>/patches.bin plus <dir>/patches.csv index."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    bin_path = cache_dir / "patches.bin"
    idx_path = cache_dir / "patches.csv"
    rows = []
    with open(bin_path, "wb") as fh:
        for p in patches:
            offset = fh.tell()
            nid = p.nodule_id.encode("utf-8")
            tag = p.augmentation_tag.encode("utf-8")
            fh.write(struct.pack("<H", len(nid)))
            fh.write(nid)
            fh.write(struct.pack("<H", p.side))
            fh.write(struct.pack("<H", len(tag)))
            fh.write(tag)
            fh.write(struct.pack("<b", -1 if p.label is None else int(p.label)))
            fh.write(np.ascontiguousarray(p.voxels, dtype="<f4").tobytes())
            rows.append(
                (p.nodule_id, p.side, p.augmentation_tag,
                 "" if p.label is None else p.label, offset)
            )
    with open(idx_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(INDEX_COLUMNS)
        writer.writerows(rows)
    return bin_path, idx_path


def read_patch_cache(cache_dir: str | Path) -> list[Patch]:
    """Load every patch in manifest order."""
    cache_dir = Path(cache_dir)
    bin_path = cache_dir / "patches.bin"
    if not bin_path.is_file():
        raise DataError(f"patch cache not found: {bin_path}")
    patches = []
    with open(bin_path, "rb") as fh:
        data = fh.read()
    pos = 0
    n = len(data)
    while pos < n:
        (id_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        nodule_id = data[pos : pos + id_len].decode("utf-8")
        pos += id_len
        (side,) = struct.unpack_from("<H", data, pos)
        pos += 2
        (tag_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        tag = data[pos : pos + tag_len].decode("utf-8")
        pos += tag_len
        (label,) = struct.unpack_from("<b", data, pos)
        pos += 1
        count = side ** 3
        voxels = np.frombuffer(data, dtype="<f4", count=count, offset=pos).astype(np.float32)
        pos += count * 4
        patches.append(
            Patch(
                nodule_id=nodule_id,
                side=side,
                voxels=voxels.reshape(side, side, side),
                label=None if label < 0 else int(label),
                augmentation_tag=tag,
            )
        )
    return patches
