"""Classification metrics, the ablation runner, and k-NN vs head comparison."""

from __future__ import annotations

import csv
import dataclasses
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DatasetSplit, Label, PatientCase, ValidationError, who_labels
from .training import TrainConfig, TrainedModel, train

ABLATION_ROWS = (
    ("full", {}),
    ("w/o gate", {"no_gate": True}),
    ("w/o multi-task", {"no_multitask": True}),
    ("w/o cross-attention", {"no_cross_attention": True}),
    ("w/o prototypes", {"no_prototypes": True}),
    ("baseline", {"no_gate": True, "no_multitask": True,
                  "no_cross_attention": True, "no_prototypes": True}),
)


@dataclass
class MetricsReport:
    accuracy: float
    per_class_precision: list[float]
    per_class_recall: list[float]
    per_class_f1: list[float]
    support: list[int]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: np.ndarray
    normal_vs_abnormal_sensitivity: float
    clinical_agreement: float | None = None

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["confusion"] = self.confusion.tolist()
        out["classes"] = [lbl.display_name for lbl in Label]
        return out


def compute_metrics(predictions: Sequence[int], truths: Sequence[int],
                    t_scores: Sequence[float] | None = None) -> MetricsReport:
    """Accuracy, per-class and macro precision/recall/F1, confusion matrix,
    normal-vs-abnormal sensitivity, and clinical agreement when T-scores
    are supplied.  Zero-support classes score 0 with a warning."""
    y_pred = np.asarray(predictions, dtype=np.int64)
    y_true = np.asarray(truths, dtype=np.int64)
    if y_pred.shape != y_true.shape:
        raise ValidationError(
            f"predictions length {y_pred.shape} does not match truths {y_true.shape}"
        )
    n = y_true.size
    if n == 0:
        raise ValidationError("cannot compute metrics on an empty set")

    confusion = np.zeros((3, 3), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        confusion[t, p] += 1

    precision, recall, f1, support = [], [], [], []
    for c in range(3):
        tp = confusion[c, c]
        pred_c = confusion[:, c].sum()
        true_c = confusion[c, :].sum()
        if true_c == 0:
            warnings.warn(
                f"class {Label(c).display_name!r} has no support; "
                "its precision/recall are reported as 0",
                RuntimeWarning,
                stacklevel=2,
            )
        prec = tp / pred_c if pred_c > 0 else 0.0
        rec = tp / true_c if true_c > 0 else 0.0
        precision.append(float(prec))
        recall.append(float(rec))
        f1.append(float(2 * prec * rec / (prec + rec)) if prec + rec > 0 else 0.0)
        support.append(int(true_c))

    abnormal_true = y_true != int(Label.NORMAL)
    abnormal_pred = y_pred != int(Label.NORMAL)
    n_abnormal = int(abnormal_true.sum())
    sensitivity = (
        float((abnormal_true & abnormal_pred).sum() / n_abnormal) if n_abnormal else 0.0
    )

    agreement = None
    if t_scores is not None:
        agreement = float((y_pred == who_labels(np.asarray(t_scores))).mean())

    return MetricsReport(
        accuracy=float((y_pred == y_true).mean()),
        per_class_precision=precision,
        per_class_recall=recall,
        per_class_f1=f1,
        support=support,
        macro_precision=float(np.mean(precision)),
        macro_recall=float(np.mean(recall)),
        macro_f1=float(np.mean(f1)),
        confusion=confusion,
        normal_vs_abnormal_sensitivity=sensitivity,
        clinical_agreement=agreement,
    )


def evaluate(trained: TrainedModel, cases: Sequence[PatientCase]) -> MetricsReport:
    preds = trained.predict(cases)
    truths = [int(c.label) for c in cases]
    t_scores = [c.t_score for c in cases]
    return compute_metrics(preds, truths, t_scores)


def compare_heads(trained: TrainedModel, cases: Sequence[PatientCase]) -> tuple[float, float]:
    """Accuracy of the prototype k-NN path versus the classifier head."""
    if trained.model.bank is None:
        raise ValidationError(
            "checkpoint was trained without prototypes; the k-NN path is unavailable"
        )
    truths = np.array([int(c.label) for c in cases])
    acc_knn = float((trained.predict(cases) == truths).mean())
    acc_head = float((trained.predict_head(cases) == truths).mean())
    return acc_knn, acc_head


@dataclass
class AblationRow:
    configuration: str
    accuracy: float
    delta: float


def run_ablations(split: DatasetSplit, base_cfg: TrainConfig) -> list[AblationRow]:
    """Train the full model, each single-switch ablation, and the all-off
    baseline under identical seeds; report test accuracy and the drop."""
    accuracies: dict[str, float] = {}
    for name, flags in ABLATION_ROWS:
        cfg = dataclasses.replace(base_cfg, **flags)
        try:
            trained = train(split, cfg)
        except Exception as exc:
            raise RuntimeError(f"ablation configuration {name!r} failed: {exc}") from exc
        preds = trained.predict(split.test)
        truths = np.array([int(c.label) for c in split.test])
        accuracies[name] = float((preds == truths).mean())
    full = accuracies["full"]
    return [AblationRow(name, acc, full - acc) for name, acc in accuracies.items()]


def write_ablation_csv(rows: Sequence[AblationRow], path: str | Path,
                       extra_columns: dict[str, Sequence[float]] | None = None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["configuration", "accuracy", "delta"]
        if extra_columns:
            header += list(extra_columns)
        writer.writerow(header)
        for i, row in enumerate(rows):
            record = [row.configuration, repr(row.accuracy), repr(row.delta)]
            if extra_columns:
                record += [repr(float(col[i])) for col in extra_columns.values()]
            writer.writerow(record)


def write_metrics_csv(report: MetricsReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerow(["accuracy", repr(report.accuracy)])
        for c, lbl in enumerate(Label):
            writer.writerow([f"precision_{lbl.display_name}", repr(report.per_class_precision[c])])
            writer.writerow([f"recall_{lbl.display_name}", repr(report.per_class_recall[c])])
            writer.writerow([f"f1_{lbl.display_name}", repr(report.per_class_f1[c])])
            writer.writerow([f"support_{lbl.display_name}", report.support[c]])
        writer.writerow(["macro_precision", repr(report.macro_precision)])
        writer.writerow(["macro_recall", repr(report.macro_recall)])
        writer.writerow(["macro_f1", repr(report.macro_f1)])
        writer.writerow(["normal_vs_abnormal_sensitivity",
                         repr(report.normal_vs_abnormal_sensitivity)])
        if report.clinical_agreement is not None:
            writer.writerow(["clinical_agreement", repr(report.clinical_agreement)])
