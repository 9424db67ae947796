"""Prototype k-NN classification with per-prediction explanation reports:
neighbor votes, confidence, modality weight, and clinical feature deviations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import FEATURE_NAMES, ClinicalFeatures, Label, PatientCase
from .model import knn_vote, severity_argmax
from .training import TrainedModel

DEVIATION_FLAG_THRESHOLD = 0.5
LOW_CONFIDENCE = 0.6
HIGH_CONFIDENCE = 0.9


@dataclass
class NeighborVote:
    """One retrieved prototype with its distance and normalized vote weight."""

    class_id: Label
    slot: int
    source_patient_id: str | None
    source_t_score: float | None
    source_clinical: ClinicalFeatures | None
    distance: float
    weight: float

    def to_dict(self) -> dict:
        return {
            "class": self.class_id.display_name,
            "slot": self.slot,
            "source_patient_id": self.source_patient_id,
            "source_t_score": self.source_t_score,
            "distance": self.distance,
            "weight": self.weight,
            "clinical": self.source_clinical.to_dict() if self.source_clinical else None,
        }


@dataclass
class FeatureDeviation:
    feature: str
    delta: float
    flagged: bool

    def to_dict(self) -> dict:
        return {"feature": self.feature, "delta": self.delta, "flagged": self.flagged}


@dataclass
class ExplanationReport:
    """Structured explanation for one prediction."""

    predicted_class: Label
    confidence: float
    neighbors: list[NeighborVote]
    alpha: float
    vote_distribution: np.ndarray
    deviations: list[FeatureDeviation]
    class_norms_used: np.ndarray
    checkpoint_id: str
    audit: dict | None = None

    def to_dict(self) -> dict:
        out = {
            "prediction": self.predicted_class.display_name,
            "confidence": self.confidence,
            "alpha": self.alpha,
            "votes": {
                lbl.display_name: float(self.vote_distribution[int(lbl)]) for lbl in Label
            },
            "neighbors": [n.to_dict() for n in self.neighbors],
            "deviations": [d.to_dict() for d in self.deviations],
            "checkpoint_id": self.checkpoint_id,
        }
        if self.audit is not None:
            out["audit"] = self.audit
        return out

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)


def knn_classify(trained: TrainedModel, case: PatientCase, k: int | None = None,
                 tau_conf: float | None = None):
    """Classify one case by weighted k-NN over all prototypes.

    Returns (predicted label, neighbor votes sorted by distance,
    vote distribution over the three classes, alpha).
    """
    model = trained.model
    if model.bank is None:
        raise RuntimeError("prototype inference requires a model trained with prototypes")
    cfg = trained.config
    k = cfg.k_neighbors if k is None else k
    tau_conf = cfg.tau_conf if tau_conf is None else tau_conf

    emb_std, clin_std = trained.transform([case])
    distances, alpha = model.knn_distances(emb_std, clin_std)
    preds, votes, order, weights = knn_vote(distances, model.bank.class_ids, k, tau_conf)

    bank = model.bank
    neighbor_votes = []
    for j, w in zip(order[0], weights[0]):
        neighbor_votes.append(NeighborVote(
            class_id=Label(int(bank.class_ids[j])),
            slot=int(j % bank.slots_per_class),
            source_patient_id=bank.source_patient_ids[j],
            source_t_score=bank.source_t_scores[j],
            source_clinical=bank.source_clinical[j],
            distance=float(distances[0, j]),
            weight=float(w),
        ))
    return Label(int(preds[0])), neighbor_votes, votes[0], float(alpha[0])


def confidence(votes: Sequence[NeighborVote]) -> float:
    """Summed weight of the winning class among the retrieved neighbors."""
    sums = np.zeros(3)
    for vote in votes:
        sums[int(vote.class_id)] += vote.weight
    winner = int(severity_argmax(sums[None, :])[0])
    return float(sums[winner])


def feature_deviation(clinical: ClinicalFeatures, label: Label,
                      norms_by_class: np.ndarray) -> list[FeatureDeviation]:
    """Relative deviation of each raw clinical feature from its class norm.

    delta_j = |x_j - mu_j| / max(mu_j, 1); values above 0.5 are flagged as
    clinically atypical.  Computed in raw units so the denominator guard
    keeps small class means from inflating the ratio.
    """
    x = clinical.to_array()
    mu = norms_by_class[int(label)]
    deltas = np.abs(x - mu) / np.maximum(mu, 1.0)
    return [
        FeatureDeviation(name, float(delta), bool(delta > DEVIATION_FLAG_THRESHOLD))
        for name, delta in zip(FEATURE_NAMES, deltas)
    ]


def confidence_band(value: float) -> str:
    if value >= HIGH_CONFIDENCE:
        return "high"
    if value < LOW_CONFIDENCE:
        return "low"
    return "medium"


def explain(trained: TrainedModel, case: PatientCase, true_label: Label | None = None,
            k: int | None = None, tau_conf: float | None = None) -> ExplanationReport:
    """Assemble the full explanation report; audit mode adds the true class's
    nearest prototype and confidence-band fields."""
    predicted, neighbors, votes, alpha = knn_classify(trained, case, k, tau_conf)
    conf = float(votes[int(predicted)])
    deviations = feature_deviation(case.clinical, predicted, trained.norms_by_class)

    audit = None
    if true_label is not None:
        bank = trained.model.bank
        emb_std, clin_std = trained.transform([case])
        distances, _ = trained.model.knn_distances(emb_std, clin_std)
        mask = bank.class_ids == int(true_label)
        candidates = np.flatnonzero(mask)
        j = int(candidates[distances[0, mask].argmin()])
        nearest_true = NeighborVote(
            class_id=Label(int(bank.class_ids[j])),
            slot=int(j % bank.slots_per_class),
            source_patient_id=bank.source_patient_ids[j],
            source_t_score=bank.source_t_scores[j],
            source_clinical=bank.source_clinical[j],
            distance=float(distances[0, j]),
            weight=0.0,
        )
        audit = {
            "true_label": true_label.display_name,
            "true_class_nearest_prototype": nearest_true.to_dict(),
            "prediction_correct": bool(predicted == true_label),
            "confidence_band": confidence_band(conf),
        }

    return ExplanationReport(
        predicted_class=predicted,
        confidence=conf,
        neighbors=neighbors,
        alpha=alpha,
        vote_distribution=votes,
        deviations=deviations,
        class_norms_used=trained.norms_by_class[int(predicted)].copy(),
        checkpoint_id=trained.checkpoint_id,
        audit=audit,
    )


def report_from_json(text: str) -> dict:
    """Parse a report back into its dictionary form (round-trip helper)."""
    return json.loads(text)


def write_report(report: ExplanationReport, path: str | Path) -> None:
    Path(path).write_text(report.to_json() + "\n")
