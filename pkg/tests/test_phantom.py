import numpy as np
import pytest

from lmlcc.errors import DataError
from lmlcc.ingest import read_mhd_volume, read_ratings
from lmlcc.labeling import MalignancyLabel, consensus_label
from lmlcc.phantom import (
    BENIGN_BAND,
    benign_spec,
    generate_dataset,
    generate_phantom,
    malignant_spec,
    nodule_mask,
)


def test_phantom_deterministic():
    spec = benign_spec(seed=42)
    v1, l1 = generate_phantom(spec)
    v2, l2 = generate_phantom(spec)
    assert l1 == l2 == 0
    assert np.array_equal(v1.voxels, v2.voxels)


def test_phantom_hu_range():
    for spec in (benign_spec(seed=1), malignant_spec(seed=1)):
        vol, _ = generate_phantom(spec)
        assert vol.voxels.min() >= -1000
        assert vol.voxels.max() <= 500


def test_benign_core_histogram_within_band():
    spec = benign_spec(seed=9)
    vol, _ = generate_phantom(spec)
    rng = np.random.default_rng(spec.seed)
    mask = nodule_mask(spec, rng)
    core = vol.voxels[mask]
    lo, hi = BENIGN_BAND
    sd = spec.texture_noise_sd
    inside = (core >= lo - 3 * sd) & (core <= hi + 3 * sd)
    assert inside.mean() >= 0.95


def test_malignant_variance_at_least_double():
    benign_vars = []
    malignant_vars = []
    for seed in range(100):
        b_spec = benign_spec(seed=seed)
        m_spec = malignant_spec(seed=seed)
        for spec, sink in ((b_spec, benign_vars), (m_spec, malignant_vars)):
            vol, _ = generate_phantom(spec)
            mask = nodule_mask(spec, np.random.default_rng(spec.seed))
            sink.append(vol.voxels[mask].var())
    assert np.mean(malignant_vars) >= 2.0 * np.mean(benign_vars)


def test_spec_rejects_oversized_nodule():
    with pytest.raises(DataError, match="exceeds"):
        benign_spec(side=16, radius_mm=8.0)


def test_generate_dataset_counts_and_determinism():
    a = generate_dataset(5, 7, 16, seed=3, n_ambiguous=4)
    b = generate_dataset(5, 7, 16, seed=3, n_ambiguous=4)
    assert len(a.items) == 16
    labels = [it.true_label for it in a.items if not it.hidden]
    assert labels.count(0) == 5 and labels.count(1) == 7
    assert len(a.hidden_ids()) == 4
    for x, y in zip(a.items, b.items):
        assert np.array_equal(x.volume.voxels, y.volume.voxels)
        assert x.record == y.record


def test_dataset_ratings_resolve_to_intended_labels():
    ds = generate_dataset(10, 10, 16, seed=5, n_ambiguous=6)
    for it in ds.items:
        label = consensus_label(it.record.ratings)
        if it.hidden:
            assert label is MalignancyLabel.AMBIGUOUS
        else:
            assert label.value == it.true_label


def test_dataset_writes_real_pipeline_formats(tmp_path):
    ds = generate_dataset(2, 2, 16, seed=8)
    ds.write(tmp_path)
    records = read_ratings(tmp_path / "ratings.csv")
    assert len(records) == 4
    for rec in records:
        vol = read_mhd_volume(tmp_path / "volumes" / f"{rec.series_id}.mhd")
        assert vol.dims == (16, 16, 16)
    # round trip through the MHD writer/reader is voxel exact
    first = ds.items[0].volume
    back = read_mhd_volume(tmp_path / "volumes" / f"{first.series_id}.mhd")
    assert np.array_equal(back.voxels, first.voxels)


def test_dataset_patches_are_normalized():
    ds = generate_dataset(3, 3, 16, seed=2)
    for arr in ds.patches().values():
        assert arr.shape == (16, 16, 16)
        assert arr.min() >= 0.0 and arr.max() <= 1.0
