"""scikit-learn compatible estimator wrapping the full training pipeline.

X rows are [embedding | clinical]: the first `embedding_dim` columns hold the
image-branch embedding, the last 11 the clinical features in canonical order.
The target y is the continuous T-score; class labels derive from it.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from .data import (
    EMBEDDING_DIM,
    FEATURE_NAMES,
    ClinicalFeatures,
    DatasetSplit,
    PatientCase,
    Standardizer,
    ValidationError,
    make_case,
    who_labels,
)
from .explain import explain
from .model import knn_vote
from .training import TrainConfig, train


def _to_cases(X: np.ndarray, t_scores: np.ndarray, embedding_dim: int) -> list[PatientCase]:
    cases = []
    for i in range(X.shape[0]):
        clinical = ClinicalFeatures.from_array(X[i, embedding_dim:])
        cases.append(make_case(f"ROW-{i:06d}", X[i, :embedding_dim], clinical,
                               float(t_scores[i])))
    return cases


class ProtoMedXClassifier(BaseEstimator, ClassifierMixin):
    """Prototype-based multi-modal classifier with case-level explanations.

    Parameters mirror the training configuration; `random_state` seeds
    everything (splitting, initialization, batching, dropout).
    """

    def __init__(self, embedding_dim: int = EMBEDDING_DIM, slots_per_class: int = 6,
                 lr_image: float = 5e-5, lr_tabular: float = 5e-4,
                 lr_prototypes: float = 1e-3, weight_decay: float = 1e-4,
                 lambda_reg: float = 0.3, lambda_proto: float = 1.0,
                 lambda_sep: float = 0.5, lambda_ctr: float = 0.1,
                 margin: float = 0.2, tau_sim: float = 0.07, tau_conf: float = 0.1,
                 k_neighbors: int = 3, batch_size: int = 64, max_epochs: int = 200,
                 patience: int = 15, val_fraction: float = 0.1,
                 norm_mode: str = "batch", no_gate: bool = False,
                 no_multitask: bool = False, no_cross_attention: bool = False,
                 no_prototypes: bool = False, random_state: int = 0):
        self.embedding_dim = embedding_dim
        self.slots_per_class = slots_per_class
        self.lr_image = lr_image
        self.lr_tabular = lr_tabular
        self.lr_prototypes = lr_prototypes
        self.weight_decay = weight_decay
        self.lambda_reg = lambda_reg
        self.lambda_proto = lambda_proto
        self.lambda_sep = lambda_sep
        self.lambda_ctr = lambda_ctr
        self.margin = margin
        self.tau_sim = tau_sim
        self.tau_conf = tau_conf
        self.k_neighbors = k_neighbors
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.val_fraction = val_fraction
        self.norm_mode = norm_mode
        self.no_gate = no_gate
        self.no_multitask = no_multitask
        self.no_cross_attention = no_cross_attention
        self.no_prototypes = no_prototypes
        self.random_state = random_state

    # -- validation helpers ---------------------------------------------------

    def _expected_width(self) -> int:
        return self.embedding_dim + len(FEATURE_NAMES)

    def _check_X(self, X) -> np.ndarray:
        X = check_array(X, dtype=np.float64, ensure_all_finite=True)
        if X.shape[1] != self._expected_width():
            raise ValidationError(
                f"X must have {self._expected_width()} columns "
                f"({self.embedding_dim} embedding + {len(FEATURE_NAMES)} clinical), "
                f"got {X.shape[1]}"
            )
        return X

    def _config(self) -> TrainConfig:
        return TrainConfig(
            lr_image=self.lr_image, lr_tabular=self.lr_tabular,
            lr_prototypes=self.lr_prototypes, weight_decay=self.weight_decay,
            lambda_reg=self.lambda_reg, lambda_proto=self.lambda_proto,
            lambda_sep=self.lambda_sep, lambda_ctr=self.lambda_ctr,
            margin=self.margin, tau_sim=self.tau_sim, tau_conf=self.tau_conf,
            k_neighbors=self.k_neighbors, slots_per_class=self.slots_per_class,
            batch_size=self.batch_size, max_epochs=self.max_epochs,
            patience=self.patience, seed=self.random_state,
            norm_mode=self.norm_mode, no_gate=self.no_gate,
            no_multitask=self.no_multitask,
            no_cross_attention=self.no_cross_attention,
            no_prototypes=self.no_prototypes,
        )

    # -- estimator API ----------------------------------------------------------

    def fit(self, X, y):
        """Fit on rows of [embedding | clinical] with T-score targets."""
        X = self._check_X(X)
        t = check_array(y, dtype=np.float64, ensure_2d=False, ensure_all_finite=True)
        if t.ndim != 1 or t.shape[0] != X.shape[0]:
            raise ValidationError("y must be a 1-D vector of T-scores matching X")
        cases = _to_cases(X, t, self.embedding_dim)
        labels = who_labels(t)

        rng = np.random.default_rng(self.random_state)
        val_idx: list[int] = []
        for c in range(3):
            members = np.flatnonzero(labels == c)
            if members.size == 0:
                raise ValidationError(
                    "every diagnostic class must be present in the training data"
                )
            perm = rng.permutation(members.size)
            n_val = max(1, int(round(self.val_fraction * members.size)))
            val_idx.extend(members[perm[:n_val]])
        val_set = set(val_idx)
        train_cases = [c for i, c in enumerate(cases) if i not in val_set]
        val_cases = [cases[i] for i in sorted(val_set)]

        split = DatasetSplit(train_cases, val_cases, [], Standardizer.fit(train_cases))
        self.trained_ = train(split, self._config())
        self.classes_ = np.array([0, 1, 2])
        self.n_features_in_ = X.shape[1]
        return self

    def _require_fitted(self):
        if not hasattr(self, "trained_"):
            raise NotFittedError("this ProtoMedXClassifier instance is not fitted yet")

    def predict(self, X) -> np.ndarray:
        self._require_fitted()
        X = self._check_X(X)
        cases = _to_cases(X, np.zeros(X.shape[0]), self.embedding_dim)
        return self.trained_.predict(cases)

    def predict_proba(self, X) -> np.ndarray:
        """k-NN vote distribution over classes (head softmax when ablated)."""
        self._require_fitted()
        X = self._check_X(X)
        cases = _to_cases(X, np.zeros(X.shape[0]), self.embedding_dim)
        emb_std, clin_std = self.trained_.transform(cases)
        model = self.trained_.model
        if model.bank is None:
            from .nn import softmax

            parts = []
            for start in range(0, emb_std.shape[0], 256):
                sl = slice(start, start + 256)
                _, _, fused, _, _ = model.encode(emb_std[sl], clin_std[sl], False)
                logits, _ = model.cls_head.forward(fused, False)
                parts.append(softmax(logits))
            return np.concatenate(parts)
        d, _ = model.knn_distances(emb_std, clin_std)
        _, votes, _, _ = knn_vote(d, model.bank.class_ids, self.k_neighbors,
                                  self.tau_conf)
        return votes

    def score(self, X, y) -> float:
        """Accuracy against the diagnostic classes derived from T-scores y."""
        self._require_fitted()
        t = check_array(y, dtype=np.float64, ensure_2d=False, ensure_all_finite=True)
        return float((self.predict(X) == who_labels(t)).mean())

    def explain(self, X) -> list[dict]:
        """Explanation report dictionaries for each row of X."""
        self._require_fitted()
        X = self._check_X(X)
        cases = _to_cases(X, np.zeros(X.shape[0]), self.embedding_dim)
        return [explain(self.trained_, case).to_dict() for case in cases]
