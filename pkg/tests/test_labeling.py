import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lmlcc.errors import DataError
from lmlcc.labeling import (
    DatasetSplit,
    MalignancyLabel,
    consensus_label,
    read_split_manifest,
    split_by_nodule,
    summarize,
    write_split_manifest,
)

B = MalignancyLabel.BENIGN
M = MalignancyLabel.MALIGNANT
A = MalignancyLabel.AMBIGUOUS

# Independent oracle: the consensus table rows transcribed literally as
# (n_total, n_gt3, n_eq3, n_lt3) -> label. Anything absent is ambiguous.
TABLE_ROWS = {
    (4, 4, 0, 0): M,
    (4, 3, 1, 0): M,
    (4, 3, 0, 1): M,
    (4, 2, 1, 1): M,
    (4, 0, 0, 4): B,
    (4, 0, 1, 3): B,
    (4, 1, 0, 3): B,
    (4, 1, 1, 2): B,
    (3, 3, 0, 0): M,
    (3, 2, 1, 0): M,
    (3, 2, 0, 1): M,
    (3, 0, 0, 3): B,
    (3, 0, 1, 2): B,
    (3, 1, 0, 2): B,
    (2, 2, 0, 0): M,
    (2, 0, 0, 2): B,
}


def table_lookup(ratings) -> MalignancyLabel:
    n_gt3 = sum(1 for r in ratings if r > 3)
    n_eq3 = sum(1 for r in ratings if r == 3)
    n_lt3 = sum(1 for r in ratings if r < 3)
    return TABLE_ROWS.get((len(ratings), n_gt3, n_eq3, n_lt3), A)


def all_rating_tuples(sizes=(2, 3, 4)):
    for size in sizes:
        yield from itertools.product(range(1, 6), repeat=size)


def test_summarize_examples():
    s = summarize([4, 5, 3, 2])
    assert (s.n_gt3, s.n_eq3, s.n_lt3, s.n_total) == (2, 1, 1, 4)
    s = summarize([])
    assert (s.n_gt3, s.n_eq3, s.n_lt3, s.n_total) == (0, 0, 0, 0)
    s = summarize([3, 3, 3])
    assert (s.n_gt3, s.n_eq3, s.n_lt3, s.n_total) == (0, 3, 0, 3)


def test_summarize_rejects_out_of_range():
    with pytest.raises(DataError):
        summarize([0])
    with pytest.raises(DataError):
        summarize([6])


def test_consensus_examples():
    assert consensus_label([4, 4, 3, 2]) is M
    assert consensus_label([5, 3, 2, 2]) is B
    assert consensus_label([4, 4, 2, 2]) is A
    assert consensus_label([4, 4]) is M
    assert consensus_label([5]) is A
    assert consensus_label([]) is A


def test_consensus_matches_table_exhaustively():
    count = 0
    for ratings in all_rating_tuples():
        assert consensus_label(list(ratings)) is table_lookup(ratings), ratings
        count += 1
    assert count == 25 + 125 + 625


def test_rating_flip_symmetry():
    flip = {M: B, B: M, A: A}
    for ratings in all_rating_tuples():
        mirrored = [6 - r for r in ratings]
        assert consensus_label(mirrored) is flip[consensus_label(list(ratings))]


@given(st.lists(st.integers(1, 5), max_size=6), st.randoms())
def test_consensus_permutation_invariant(ratings, rnd):
    shuffled = list(ratings)
    rnd.shuffle(shuffled)
    assert consensus_label(shuffled) is consensus_label(ratings)


def _labeled(n, benign_fraction=0.5):
    n_benign = int(round(n * benign_fraction))
    return [(f"n{i:04d}", 0 if i < n_benign else 1) for i in range(n)]


def test_split_sizes_100():
    split = split_by_nodule(_labeled(100), seed=11)
    assert len(split.test_ids) == 20
    assert len(split.val_ids) == 16
    assert len(split.train_ids) == 64


def test_split_sizes_558():
    split = split_by_nodule(_labeled(558, benign_fraction=0.52), seed=11)
    assert len(split.test_ids) == 112


def test_split_deterministic_and_disjoint():
    a = split_by_nodule(_labeled(97, 0.4), seed=5)
    b = split_by_nodule(_labeled(97, 0.4), seed=5)
    assert a == b
    c = split_by_nodule(_labeled(97, 0.4), seed=6)
    assert a != c
    all_ids = a.train_ids | a.val_ids | a.test_ids
    assert len(all_ids) == 97


def test_split_stratified():
    labeled = _labeled(200, benign_fraction=0.3)
    split = split_by_nodule(labeled, seed=0)
    labels = dict(labeled)
    test_benign = sum(1 for i in split.test_ids if labels[i] == 0)
    assert test_benign == 12  # 30% of 40


def test_split_requires_five():
    with pytest.raises(DataError, match="at least 5"):
        split_by_nodule(_labeled(4), seed=0)


def test_split_groups_disjoint_guard():
    with pytest.raises(DataError):
        DatasetSplit(
            train_ids=frozenset({"a"}),
            val_ids=frozenset({"a"}),
            test_ids=frozenset(),
            unlabeled_ids=frozenset(),
        )


def test_manifest_round_trip_and_stable_bytes(tmp_path):
    labeled = _labeled(40, 0.5)
    split = split_by_nodule(labeled, seed=2, unlabeled_ids=["amb1", "amb2"])
    labels = dict(labeled)
    p1 = tmp_path / "m1.csv"
    p2 = tmp_path / "m2.csv"
    write_split_manifest(p1, split, labels)
    write_split_manifest(p2, split, labels)
    assert p1.read_bytes() == p2.read_bytes()
    back, back_labels = read_split_manifest(p1)
    assert back == split
    assert back_labels == labels
