"""Confidence-thresholded pseudo-labeling over an ambiguous pool.

Each round trains a fresh model on the radiologist-labeled training set
plus all pseudo-labels accepted so far, predicts the remaining pool, and
accepts any prediction at or above the confidence threshold. Accepted
pseudo-labels are frozen (never revised), validation/test manifests are
never touched, and the loop stops once a round accepts fewer than
``min_new`` nodules or after ``max_rounds``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .errors import DataError
from .network import Model
from .training import TrainConfig, TrainResult, predict, train

DEFAULT_THRESHOLD = 0.9
DEFAULT_MAX_ROUNDS = 10
DEFAULT_MIN_NEW = 5


@dataclass
class PseudoLabelRound:
    round_index: int
    n_newly_labeled: int
    n_remaining_unlabeled: int
    threshold: float
    accepted: list[tuple[str, int, float]] = field(default_factory=list)  # (id, label, confidence)


def assign_pseudo_labels(
    probs: Mapping[str, float], threshold: float = DEFAULT_THRESHOLD
) -> dict[str, tuple[int, float]]:
    """Map nodule_id -> (pseudo label, confidence) for confident
    predictions: p >= threshold labels 1, p <= 1 - threshold labels 0."""
    if not 0.5 < threshold <= 1.0:
        raise DataError(f"threshold must be in (0.5, 1], got {threshold}")
    accepted = {}
    for nodule_id, p in probs.items():
        if p >= threshold:
            accepted[nodule_id] = (1, float(p))
        elif p <= 1.0 - threshold:
            accepted[nodule_id] = (0, float(1.0 - p))
    return accepted


@dataclass
class SemisupResult:
    model: Model
    train_result: TrainResult
    rounds: list[PseudoLabelRound]
    pseudo_labels: dict[str, tuple[int, float]]  # id -> (label, confidence)


def semisup_loop(
    build_model: Callable[[int], Model],
    patches: Mapping[str, np.ndarray],
    train_labels: Mapping[str, int],
    val_labels: Mapping[str, int],
    unlabeled_ids: list[str],
    tc: TrainConfig,
    threshold: float = DEFAULT_THRESHOLD,
    max_rounds: int = DEFAULT_MAX_ROUNDS,
    min_new: int = DEFAULT_MIN_NEW,
) -> SemisupResult:
    """Run the pseudo-labeling rounds; ``build_model`` receives the round
    index so each round retrains from a fresh initialization."""
    if not train_labels:
        raise DataError("semi-supervised loop needs a non-empty initial train set")
    if not 0.5 < threshold <= 1.0:
        raise DataError(f"threshold must be in (0.5, 1], got {threshold}")
    for nodule_id in list(train_labels) + list(val_labels) + list(unlabeled_ids):
        if nodule_id not in patches:
            raise DataError(f"no patch available for nodule '{nodule_id}'")
    overlap = set(unlabeled_ids) & (set(train_labels) | set(val_labels))
    if overlap:
        raise DataError(f"unlabeled pool overlaps labeled ids: {sorted(overlap)[:3]}")

    val_ids = sorted(val_labels)
    val_x = np.stack([patches[i] for i in val_ids])
    val_y = np.array([val_labels[i] for i in val_ids], dtype=np.float64)

    pseudo: dict[str, tuple[int, float]] = {}
    remaining = list(unlabeled_ids)
    rounds: list[PseudoLabelRound] = []
    model: Model | None = None
    result: TrainResult | None = None

    for round_index in range(1, max_rounds + 1):
        ids = sorted(train_labels) + sorted(pseudo)
        train_x = np.stack([patches[i] for i in ids])
        train_y = np.array(
            [train_labels[i] if i in train_labels else pseudo[i][0] for i in ids],
            dtype=np.float64,
        )
        model = build_model(round_index)
        result = train(model, train_x, train_y, val_x, val_y, tc)

        if not remaining:
            rounds.append(
                PseudoLabelRound(round_index=round_index, n_newly_labeled=0,
                                 n_remaining_unlabeled=0, threshold=threshold)
            )
            break

        pool_x = np.stack([patches[i] for i in remaining])
        probs = predict(model, pool_x, batch_size=tc.batch_size)
        accepted = assign_pseudo_labels(dict(zip(remaining, probs)), threshold)
        pseudo.update(accepted)
        remaining = [i for i in remaining if i not in accepted]
        rounds.append(
            PseudoLabelRound(
                round_index=round_index,
                n_newly_labeled=len(accepted),
                n_remaining_unlabeled=len(remaining),
                threshold=threshold,
                accepted=sorted((k, v[0], v[1]) for k, v in accepted.items()),
            )
        )
        if len(accepted) < min_new:
            break

    assert model is not None and result is not None
    return SemisupResult(model=model, train_result=result, rounds=rounds, pseudo_labels=pseudo)


def write_round_history(path: str | Path, rounds: list[PseudoLabelRound]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "n_new", "n_remaining", "mean_confidence"])
        for r in rounds:
            mean_conf = (
                "" if not r.accepted else f"{np.mean([c for _, _, c in r.accepted]):.6f}"
            )
            writer.writerow([r.round_index, r.n_newly_labeled, r.n_remaining_unlabeled, mean_conf])


def write_pseudo_manifest(
    path: str | Path,
    train_labels: Mapping[str, int],
    pseudo_labels: Mapping[str, tuple[int, float]],
    remaining_ids: list[str],
) -> None:
    """Split-manifest-shaped CSV with a provenance column: radiologist
    train labels, accepted pseudo-labels, and the still-unlabeled pool."""
    rows = [(i, "train", str(lab), "radiologist") for i, lab in train_labels.items()]
    rows += [(i, "train", str(lab), "pseudo") for i, (lab, _) in pseudo_labels.items()]
    rows += [(i, "unlabeled", "", "pseudo") for i in remaining_ids]
    rows.sort()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["nodule_id", "split", "label", "provenance"])
        writer.writerows(rows)
