"""Consensus benign/malignant labeling from radiologist ratings, plus
grouped, stratified dataset splitting and the split-manifest CSV format.

A rating > 3 votes malignant, < 3 votes benign, = 3 is neutral. A nodule is
malignant when enough raters vote malignant (see ``consensus_label``), benign
under the mirrored condition on benign votes, and ambiguous otherwise.
Nodules rated by fewer than 2 or more than 4 radiologists are ambiguous.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError


class MalignancyLabel(enum.Enum):
    BENIGN = 0
    MALIGNANT = 1
    AMBIGUOUS = 2


@dataclass(frozen=True)
class RatingSummary:
    n_gt3: int
    n_eq3: int
    n_lt3: int
    n_total: int


def summarize(ratings: Sequence[int]) -> RatingSummary:
    """Count ratings above / at / below the neutral score 3."""
    n_gt3 = n_eq3 = n_lt3 = 0
    for r in ratings:
        if not 1 <= r <= 5:
            raise DataError(f"rating {r} outside 1..5")
        if r > 3:
            n_gt3 += 1
        elif r == 3:
            n_eq3 += 1
        else:
            n_lt3 += 1
    return RatingSummary(n_gt3=n_gt3, n_eq3=n_eq3, n_lt3=n_lt3, n_total=len(ratings))


def _majority(votes_for: int, n_eq3: int, n_total: int) -> bool:
    # Consensus conditions, by rater count. With four raters a single
    # neutral score may stand in for the third vote; with two or three
    # raters the vote requirement is strict.
    if n_total == 4:
        return votes_for >= 3 or (n_eq3 == 1 and votes_for >= 2)
    if n_total == 3:
        return votes_for >= 2
    if n_total == 2:
        return votes_for == 2
    return False


def consensus_label(ratings: Sequence[int]) -> MalignancyLabel:
    """Label a nodule from its ratings; ambiguous when no rule fires.

    Only 2-4 raters can produce a confident label; anything else is
    ambiguous by construction.
    """
    s = summarize(ratings)
    if s.n_total < 2 or s.n_total > 4:
        return MalignancyLabel.AMBIGUOUS
    malignant = _majority(s.n_gt3, s.n_eq3, s.n_total)
    benign = _majority(s.n_lt3, s.n_eq3, s.n_total)
    if malignant and benign:
        # Unreachable for 2..4 ratings: both rules need a strict majority.
        return MalignancyLabel.AMBIGUOUS
    if malignant:
        return MalignancyLabel.MALIGNANT
    if benign:
        return MalignancyLabel.BENIGN
    return MalignancyLabel.AMBIGUOUS


@dataclass(frozen=True)
class DatasetSplit:
    train_ids: frozenset[str]
    val_ids: frozenset[str]
    test_ids: frozenset[str]
    unlabeled_ids: frozenset[str]

    def __post_init__(self):
        groups = [self.train_ids, self.val_ids, self.test_ids, self.unlabeled_ids]
        total = sum(len(g) for g in groups)
        if len(frozenset().union(*groups)) != total:
            raise DataError("split groups must be pairwise disjoint")


def _quota(counts: Sequence[int], total_quota: int) -> list[int]:
    """Largest-remainder allocation of ``total_quota`` across classes,
    proportional to ``counts``. Guarantees sum(result) == total_quota."""
    n = sum(counts)
    raw = [c * total_quota / n for c in counts]
    alloc = [int(np.floor(r)) for r in raw]
    remainders = sorted(
        range(len(counts)), key=lambda i: (raw[i] - alloc[i], counts[i]), reverse=True
    )
    short = total_quota - sum(alloc)
    for i in remainders[:short]:
        alloc[i] += 1
    return [min(a, c) for a, c in zip(alloc, counts)]


def split_by_nodule(
    labeled: Sequence[tuple[str, int]],
    seed: int,
    unlabeled_ids: Iterable[str] = (),
    test_fraction: float = 0.2,
    val_fraction: float = 0.2,
) -> DatasetSplit:
    """Deterministic stratified split, grouped by nodule_id.

    ``test_fraction`` of labeled nodules go to test; the remainder is split
    again with ``val_fraction`` to val and the rest to train. Stratification
    allocates per-label quotas by largest remainder so the global test size
    equals round(test_fraction * n).
    """
    if len(labeled) < 5:
        raise DataError(f"need at least 5 labeled nodules to split, got {len(labeled)}")
    ids = [i for i, _ in labeled]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate nodule_id in labeled records")
    for _, lab in labeled:
        if lab not in (0, 1):
            raise DataError(f"split requires non-ambiguous labels, got {lab}")

    rng = np.random.default_rng(seed)
    by_label: dict[int, list[str]] = {0: [], 1: []}
    for nodule_id, lab in labeled:
        by_label[lab].append(nodule_id)
    for lab in (0, 1):
        by_label[lab].sort()
        rng.shuffle(by_label[lab])

    classes = [lab for lab in (0, 1) if by_label[lab]]
    counts = [len(by_label[lab]) for lab in classes]
    n = sum(counts)

    test_ids: list[str] = []
    val_ids: list[str] = []
    train_ids: list[str] = []
    test_quota = _quota(counts, int(round(test_fraction * n)))
    remaining_counts = [c - q for c, q in zip(counts, test_quota)]
    val_quota = _quota(remaining_counts, int(round(val_fraction * sum(remaining_counts))))
    for lab, tq, vq in zip(classes, test_quota, val_quota):
        pool = by_label[lab]
        test_ids.extend(pool[:tq])
        val_ids.extend(pool[tq : tq + vq])
        train_ids.extend(pool[tq + vq :])

    return DatasetSplit(
        train_ids=frozenset(train_ids),
        val_ids=frozenset(val_ids),
        test_ids=frozenset(test_ids),
        unlabeled_ids=frozenset(unlabeled_ids),
    )


SPLIT_NAMES = ("train", "val", "test", "unlabeled")


def write_split_manifest(
    path: str | Path, split: DatasetSplit, labels: Mapping[str, int]
) -> None:
    """Persist a split as CSV rows nodule_id,split,label (label empty for
    the unlabeled pool). Rows are sorted for byte-stable output."""
    rows = []
    for name, ids in zip(SPLIT_NAMES, (split.train_ids, split.val_ids, split.test_ids, split.unlabeled_ids)):
        for nodule_id in ids:
            label = labels.get(nodule_id, "") if name != "unlabeled" else ""
            rows.append((nodule_id, name, "" if label == "" else str(label)))
    rows.sort()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["nodule_id", "split", "label"])
        writer.writerows(rows)


def read_split_manifest(path: str | Path) -> tuple[DatasetSplit, dict[str, int]]:
    """Inverse of write_split_manifest; returns the split plus labels."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"split manifest not found: {path}")
    groups: dict[str, set[str]] = {name: set() for name in SPLIT_NAMES}
    labels: dict[str, int] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["nodule_id", "split", "label"]:
            raise DataError(f"{path}: manifest header must be nodule_id,split,label")
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{path} row {row_no}: expected 3 fields")
            nodule_id, name, label = row
            if name not in groups:
                raise DataError(f"{path} row {row_no}: unknown split '{name}'")
            groups[name].add(nodule_id)
            if label != "":
                if label not in ("0", "1"):
                    raise DataError(f"{path} row {row_no}: label must be 0 or 1")
                labels[nodule_id] = int(label)
    split = DatasetSplit(
        train_ids=frozenset(groups["train"]),
        val_ids=frozenset(groups["val"]),
        test_ids=frozenset(groups["test"]),
        unlabeled_ids=frozenset(groups["unlabeled"]),
    )
    return split, labels
