"""Synthetic CT nodule phantoms for dataset-free, desk-scale pipeline runs.

Benign phantoms are smooth ellipsoids with a narrow HU band; malignant ones
are spiculated spheres with a broad, bimodal HU mixture. The two classes
therefore differ both in border texture and in intensity distribution, the
contrast the learnable window layer is meant to exploit. No claim of
clinical realism is made; every parameter is a tunable surrogate.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError
from .ingest import CtVolume, NoduleRecord, voxel_to_world, write_mhd_volume, write_ratings
from .preprocess import HU_HI, HU_LO, clip_normalize

DEFAULT_SPACING = (0.7, 0.7, 1.0)
BACKGROUND_HU = -1000.0
BACKGROUND_NOISE_SD = 20.0

BENIGN_BAND = (-100.0, 60.0)
BENIGN_NOISE_SD = 15.0
MALIGNANT_BAND = (-300.0, 350.0)
MALIGNANT_NOISE_SD = 60.0
MALIGNANT_SPIKES = 12

# Rating multisets that the consensus rules resolve to the intended label,
# or (for the hidden pool) to ambiguous.
BENIGN_RATING_POOL = ((1, 2), (2, 2, 1), (1, 1, 2, 2), (2, 3, 1, 1), (1, 3, 2))
MALIGNANT_RATING_POOL = ((4, 5), (5, 4, 4), (4, 4, 5, 5), (5, 3, 4, 4), (4, 3, 5))
AMBIGUOUS_RATING_POOL = ((3, 3), (4, 2), (2, 3, 4), (3, 3, 3), (5, 1, 3, 3), (4, 4, 2, 2))


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters for one synthetic nodule volume."""

    cls: str  # "benign" | "malignant"
    side: int
    radius_mm: float
    spiculation: int
    core_hu_band: tuple[float, float]
    texture_noise_sd: float
    seed: int
    spacing: tuple[float, float, float] = DEFAULT_SPACING

    def __post_init__(self):
        if self.cls not in ("benign", "malignant"):
            raise DataError(f"phantom class must be benign or malignant, got {self.cls!r}")
        lo, hi = self.core_hu_band
        if lo < HU_LO or hi > HU_HI or lo >= hi:
            raise DataError(f"core HU band {self.core_hu_band} outside [{HU_LO:g}, {HU_HI:g}]")
        if self.spiculation < 0:
            raise DataError("spiculation must be >= 0")
        # Nodule (plus spikes) must fit inside the patch with a 1-voxel rim.
        reach_mm = self.radius_mm * (1.5 if self.spiculation else 1.0)
        for s in self.spacing:
            if reach_mm / s > self.side / 2 - 1:
                raise DataError(
                    f"nodule radius {self.radius_mm:g} mm exceeds patch bounds "
                    f"(side {self.side}, spacing {self.spacing})"
                )


def benign_spec(side: int = 16, radius_mm: float = 3.0, seed: int = 0) -> PhantomSpec:
    return PhantomSpec(
        cls="benign",
        side=side,
        radius_mm=radius_mm,
        spiculation=0,
        core_hu_band=BENIGN_BAND,
        texture_noise_sd=BENIGN_NOISE_SD,
        seed=seed,
    )


def malignant_spec(side: int = 16, radius_mm: float = 3.0, seed: int = 0) -> PhantomSpec:
    return PhantomSpec(
        cls="malignant",
        side=side,
        radius_mm=radius_mm,
        spiculation=MALIGNANT_SPIKES,
        core_hu_band=MALIGNANT_BAND,
        texture_noise_sd=MALIGNANT_NOISE_SD,
        seed=seed,
    )


def _voxel_grid_mm(side: int, spacing: tuple[float, float, float]):
    """World-offset grids (z, y, x order) relative to the volume center."""
    sx, sy, sz = spacing
    c = (side - 1) / 2.0
    zz, yy, xx = np.meshgrid(
        (np.arange(side) - c) * sz,
        (np.arange(side) - c) * sy,
        (np.arange(side) - c) * sx,
        indexing="ij",
    )
    return zz, yy, xx


def nodule_mask(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Boolean voxel mask of the nodule core (plus spikes when spiculated)."""
    zz, yy, xx = _voxel_grid_mm(spec.side, spec.spacing)
    if spec.cls == "benign":
        # A mildly anisotropic ellipsoid keeps borders smooth.
        ax = spec.radius_mm * rng.uniform(0.85, 1.0, size=3)
        mask = (xx / ax[0]) ** 2 + (yy / ax[1]) ** 2 + (zz / ax[2]) ** 2 <= 1.0
        return mask
    mask = xx ** 2 + yy ** 2 + zz ** 2 <= spec.radius_mm ** 2
    if spec.spiculation:
        pts = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
        spike_len = 0.5 * spec.radius_mm
        spike_radius = max(min(spec.spacing), 0.35 * spec.radius_mm)
        for _ in range(spec.spiculation):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            t = pts @ d
            perp = np.linalg.norm(pts - np.outer(t, d), axis=1)
            on_spike = (
                (t >= spec.radius_mm * 0.8)
                & (t <= spec.radius_mm + spike_len)
                & (perp <= spike_radius)
            )
            mask |= on_spike.reshape(mask.shape)
    return mask


def generate_phantom(spec: PhantomSpec) -> tuple[CtVolume, int]:
    """Render one phantom volume; returns (volume, label) with label 1 for
    malignant. Deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    side = spec.side
    hu = BACKGROUND_HU + rng.normal(0.0, BACKGROUND_NOISE_SD, size=(side, side, side))

    mask = nodule_mask(spec, rng)
    n_core = int(mask.sum())
    lo, hi = spec.core_hu_band
    if spec.cls == "benign":
        core = rng.uniform(lo, hi, size=n_core)
    else:
        # Bimodal mixture: half the voxels near each end of the band.
        width = hi - lo
        pick_high = rng.random(n_core) < 0.5
        low_vals = rng.uniform(lo, lo + 0.3 * width, size=n_core)
        high_vals = rng.uniform(hi - 0.3 * width, hi, size=n_core)
        core = np.where(pick_high, high_vals, low_vals)
    core = core + rng.normal(0.0, spec.texture_noise_sd, size=n_core)
    hu[mask] = core

    hu = np.clip(np.rint(hu), HU_LO, HU_HI)
    volume = CtVolume(
        series_id=f"phantom-{spec.cls}-{spec.seed:06d}",
        dims=(side, side, side),
        spacing=spec.spacing,
        origin=(0.0, 0.0, 0.0),
        voxels=hu,
    )
    return volume, (1 if spec.cls == "malignant" else 0)


@dataclass
class PhantomItem:
    record: NoduleRecord
    volume: CtVolume
    true_label: int
    hidden: bool  # True = in the ambiguous pool (ratings do not resolve)


@dataclass
class PhantomDataset:
    side: int
    seed: int
    items: list[PhantomItem] = field(default_factory=list)

    def patches(self) -> dict[str, np.ndarray]:
        """Normalized whole-volume patches keyed by nodule_id."""
        return {
            it.record.nodule_id: clip_normalize(it.volume).voxels.astype(np.float32)
            for it in self.items
        }

    def labels(self, include_hidden: bool = False) -> dict[str, int]:
        return {
            it.record.nodule_id: it.true_label
            for it in self.items
            if include_hidden or not it.hidden
        }

    def hidden_ids(self) -> list[str]:
        return [it.record.nodule_id for it in self.items if it.hidden]

    def write(self, out_dir: str | Path) -> None:
        """Emit MHD/RAW volumes, the ratings CSV, and a ground-truth CSV."""
        out_dir = Path(out_dir)
        (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
        for it in self.items:
            write_mhd_volume(it.volume, out_dir / "volumes" / f"{it.volume.series_id}.mhd")
        write_ratings(out_dir / "ratings.csv", [it.record for it in self.items])
        with open(out_dir / "ground_truth.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["nodule_id", "label", "pool"])
            for it in self.items:
                writer.writerow(
                    [it.record.nodule_id, it.true_label, "hidden" if it.hidden else "labeled"]
                )


def generate_dataset(
    n_benign: int,
    n_malignant: int,
    side: int,
    seed: int,
    n_ambiguous: int = 0,
) -> PhantomDataset:
    """Generate a balanced phantom dataset, optionally with an extra pool of
    ``n_ambiguous`` nodules whose ratings resolve to ambiguous (their true
    labels are retained only in the ground-truth manifest)."""
    if min(n_benign, n_malignant, n_ambiguous) < 0:
        raise DataError("phantom counts must be >= 0")
    master = np.random.default_rng(seed)
    dataset = PhantomDataset(side=side, seed=seed)

    plan = (
        [("benign", False)] * n_benign
        + [("malignant", False)] * n_malignant
        + [("benign", True), ("malignant", True)] * (n_ambiguous // 2)
        + ([("benign", True)] if n_ambiguous % 2 else [])
    )
    for idx, (cls, hidden) in enumerate(plan):
        item_seed = int(master.integers(0, 2 ** 63 - 1))
        # Spiculated nodules reach 1.5x their radius; keep both classes in
        # the same size band so size is not a shortcut feature.
        radius = float(master.uniform(2.0, 3.0))
        base = benign_spec if cls == "benign" else malignant_spec
        spec = base(side=side, radius_mm=radius, seed=item_seed)
        volume, label = generate_phantom(spec)
        volume = replace(volume, series_id=f"phantom-{idx:05d}")
        if hidden:
            pool = AMBIGUOUS_RATING_POOL
        else:
            pool = BENIGN_RATING_POOL if label == 0 else MALIGNANT_RATING_POOL
        ratings = pool[int(master.integers(0, len(pool)))]
        nodule_id = f"n-{idx:05d}"
        center_vox = ((side - 1) / 2.0,) * 3
        center_world = voxel_to_world(volume, center_vox)
        record = NoduleRecord(
            series_id=volume.series_id,
            nodule_id=nodule_id,
            center_world=center_world,
            diameter_mm=2.0 * radius,
            ratings=ratings,
        )
        dataset.items.append(
            PhantomItem(record=record, volume=volume, true_label=label, hidden=hidden)
        )
    return dataset
