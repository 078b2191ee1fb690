"""Evaluation quantities: detection confusion metrics (with the
non-standard FP/(FP+FN) false-positive rate alongside the conventional
one), main-task accuracy, backdoor success rate, and decrease rate.

Metrics with a zero denominator come back as ``None`` and serialize as
the string ``"undefined"`` rather than silently becoming 0 or 1, except
for the clean perfect cases (no false positives / no false negatives).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .data import Provenance, Sample
from .errors import RejectedInputError

UNDEFINED = "undefined"


@dataclass(frozen=True)
class DetectionReport:
    """Confusion counts for one screening pass; positive class = malicious."""

    tp: int
    fp: int
    tn: int
    fn: int
    flagged: frozenset[int]
    ground_truth_malicious: frozenset[int]

    def __post_init__(self) -> None:
        counts = (self.tp, self.fp, self.tn, self.fn)
        if any(c < 0 for c in counts):
            raise RejectedInputError(f"negative confusion count in {counts}")
        if self.tp + self.fn != len(self.ground_truth_malicious):
            raise RejectedInputError(
                f"tp+fn = {self.tp + self.fn} but ground truth has "
                f"{len(self.ground_truth_malicious)} malicious clients")
        if self.tp + self.fp != len(self.flagged):
            raise RejectedInputError(
                f"tp+fp = {self.tp + self.fp} but {len(self.flagged)} clients were flagged")

    @classmethod
    def from_sets(cls, flagged: set[int], ground_truth_malicious: set[int],
                  population: set[int]) -> "DetectionReport":
        flagged = frozenset(flagged)
        truth = frozenset(ground_truth_malicious)
        population = frozenset(population)
        if not flagged <= population or not truth <= population:
            raise RejectedInputError("flagged and ground-truth sets must lie in the population")
        benign = population - truth
        return cls(
            tp=len(flagged & truth),
            fp=len(flagged & benign),
            tn=len(benign - flagged),
            fn=len(truth - flagged),
            flagged=flagged,
            ground_truth_malicious=truth,
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "flagged": sorted(self.flagged),
            "ground_truth_malicious": sorted(self.ground_truth_malicious),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionReport":
        return cls(tp=d["tp"], fp=d["fp"], tn=d["tn"], fn=d["fn"],
                   flagged=frozenset(d["flagged"]),
                   ground_truth_malicious=frozenset(d["ground_truth_malicious"]))


@dataclass(frozen=True)
class DetectionMetrics:
    accuracy: float
    precision: float | None
    recall: float | None
    f1: float | None
    fpr_paper: float | None     # FP / (FP + FN) * 100
    fpr_standard: float | None  # FP / (FP + TN) * 100

    def to_dict(self) -> dict:
        return {k: (UNDEFINED if v is None else v) for k, v in self.__dict__.items()}


def f1_from_precision_recall(precision: float, recall: float) -> float | None:
    """Harmonic mean 2pr/(p+r); None when both are zero."""
    if precision + recall == 0:
        return None
    return 2 * precision * recall / (precision + recall)


def detection_metrics(report: DetectionReport) -> DetectionMetrics:
    tp, fp, tn, fn = report.tp, report.fp, report.tn, report.fn
    total = report.total
    if total == 0:
        raise RejectedInputError("detection report covers no clients")
    accuracy = (tp + tn) / total
    # Zero denominators: when the offending count (FP or FN) is itself zero
    # the perfect value is well defined; these denominators can only vanish
    # in exactly that case.
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    f1 = f1_from_precision_recall(precision, recall)
    fpr_paper = fp / (fp + fn) * 100.0 if fp + fn else 0.0
    fpr_standard = fp / (fp + tn) * 100.0 if fp + tn else 0.0
    return DetectionMetrics(accuracy, precision, recall, f1, fpr_paper, fpr_standard)


@dataclass(frozen=True)
class RoundRecord:
    """Per-round measurements; ``detection`` is present iff the screen ran."""

    round_index: int
    main_accuracy: float
    backdoor_success: float
    detection: DetectionReport | None = None

    def to_dict(self) -> dict:
        return {
            "round": self.round_index,
            "main_accuracy": self.main_accuracy,
            "backdoor_success": self.backdoor_success,
            "detection": self.detection.to_dict() if self.detection else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RoundRecord":
        det = d.get("detection")
        return cls(round_index=d["round"], main_accuracy=d["main_accuracy"],
                   backdoor_success=d["backdoor_success"],
                   detection=DetectionReport.from_dict(det) if det else None)


# ---------------------------------------------------------------------------
# model evaluation


def predict_labels(params: nn.ModelParams, samples: list[Sample],
                   config: nn.ModelConfig, batch_size: int = 256) -> np.ndarray:
    """Argmax class per sample, evaluated in bounded-size batches."""
    if not samples:
        raise RejectedInputError("cannot evaluate an empty sample list")
    images = np.stack([s.image for s in samples])
    preds = []
    for start in range(0, len(samples), batch_size):
        logits = nn.forward(params, images[start:start + batch_size], config)
        preds.append(logits.argmax(axis=1))
    return np.concatenate(preds)


def backdoor_success_rate(params: nn.ModelParams, backdoor_test: list[Sample],
                          config: nn.ModelConfig) -> float:
    """Fraction of trigger-stamped samples classified as the target label."""
    if not backdoor_test:
        raise RejectedInputError("backdoor test set is empty")
    bad = [s for s in backdoor_test if s.provenance is not Provenance.BACKDOORED]
    if bad:
        raise RejectedInputError(
            f"backdoor test set contains {len(bad)} non-backdoored sample(s)")
    labels = np.array([s.label for s in backdoor_test])
    preds = predict_labels(params, backdoor_test, config)
    return float(np.count_nonzero(preds == labels)) / len(backdoor_test)


def main_accuracy(params: nn.ModelParams, clean_test: list[Sample],
                  config: nn.ModelConfig) -> float:
    """Fraction of samples classified as their true label."""
    if not clean_test:
        raise RejectedInputError("clean test set is empty")
    labels = np.array([s.label for s in clean_test])
    preds = predict_labels(params, clean_test, config)
    return float(np.count_nonzero(preds == labels)) / len(clean_test)


def decrease_rate(baseline: float, defended: float) -> float | None:
    """(baseline - defended) / baseline * 100; None when the baseline is 0."""
    if not 0.0 <= baseline <= 1.0:
        raise RejectedInputError(f"baseline rate must lie in [0, 1], got {baseline}")
    if baseline == 0.0:
        return None
    return (baseline - defended) / baseline * 100.0
