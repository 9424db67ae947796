"""Prototype banks over the image/tabular/fused spaces, k-means initialization,
cosine similarity machinery, the composite prototype loss, and projection of
prototypes onto real training cases.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import ClinicalFeatures, Label, ValidationError
from .nn import Param, softmax_cross_entropy

N_CLASSES = 3
IMG_PROTO_WIDTH = 128
TAB_PROTO_WIDTH = 64
FUSED_PROTO_WIDTH = 256


def unit_rows(x: np.ndarray) -> np.ndarray:
    """Row-normalize to unit length; zero-norm rows are rejected."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise ValidationError("zero-norm vector has no direction; representation degenerate")
    return x / norms[:, None]


def cosine_matrix(z: np.ndarray, p: np.ndarray):
    """All-pairs cosine similarity; returns (S, cache) with S[b, m] = cos(z_b, p_m)."""
    zn = np.linalg.norm(z, axis=1)
    pn = np.linalg.norm(p, axis=1)
    if np.any(zn == 0.0) or np.any(pn == 0.0):
        raise ValidationError("zero-norm vector has no direction; representation degenerate")
    zh = z / zn[:, None]
    ph = p / pn[:, None]
    return zh @ ph.T, (zh, ph, zn, pn)


def cosine_matrix_backward(cache, dS: np.ndarray):
    """Gradients of the cosine matrix wrt both argument sets."""
    zh, ph, zn, pn = cache
    g = dS @ ph
    dz = (g - (g * zh).sum(axis=1, keepdims=True) * zh) / zn[:, None]
    h = dS.T @ zh
    dp = (h - (h * ph).sum(axis=1, keepdims=True) * ph) / pn[:, None]
    return dz, dp


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia_history: list[float]


def _sq_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return (
        (points**2).sum(axis=1, keepdims=True)
        - 2.0 * points @ centroids.T
        + (centroids**2).sum(axis=1)
    )


def _kmeans_pp_seed(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = np.maximum(((points - points[chosen[0]]) ** 2).sum(axis=1), 0.0)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining mass is on already-chosen points (duplicates);
            # fall back to the first unchosen index
            remaining = [i for i in range(n) if i not in chosen]
            chosen.append(remaining[0])
        else:
            idx = int(rng.choice(n, p=d2 / total))
            chosen.append(idx)
        d2 = np.minimum(d2, np.maximum(((points - points[chosen[-1]]) ** 2).sum(axis=1), 0.0))
    return points[chosen].copy()


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator,
           max_iter: int = 100, tol: float = 1e-6) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding; deterministic under rng.

    Inertia is recorded after every assignment step, so the history is
    non-increasing.  Empty clusters are reseeded with the point farthest
    from its current centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k < 1 or k > n:
        raise ValidationError(f"k must be in [1, {n}], got {k}")
    centroids = _kmeans_pp_seed(points, k, rng)
    history: list[float] = []
    assignments = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d2 = _sq_distances(points, centroids)
        assignments = d2.argmin(axis=1)
        dist_to_own = d2[np.arange(n), assignments]
        for slot in range(k):
            if not np.any(assignments == slot):
                far = int(dist_to_own.argmax())
                assignments[far] = slot
                dist_to_own[far] = 0.0
                centroids[slot] = points[far]
        inertia = float(
            np.maximum(_sq_distances(points, centroids)[np.arange(n), assignments], 0.0).sum()
        )
        history.append(inertia)
        for slot in range(k):
            members = assignments == slot
            centroids[slot] = points[members].mean(axis=0)
        if len(history) >= 2 and abs(history[-2] - history[-1]) <= tol:
            break
    d2 = _sq_distances(points, centroids)
    assignments = d2.argmin(axis=1)
    history.append(float(np.maximum(d2[np.arange(n), assignments], 0.0).sum()))
    return KMeansResult(centroids, assignments, history)


# ---------------------------------------------------------------------------
# Prototype bank
# ---------------------------------------------------------------------------

@dataclass
class Prototype:
    """Read-only view of a single prototype with its source-case metadata."""

    class_id: Label
    slot: int
    vec_img: np.ndarray
    vec_tab: np.ndarray
    vec_fused: np.ndarray
    source_patient_id: str | None = None
    source_t_score: float | None = None
    source_clinical: ClinicalFeatures | None = None


class PrototypeBank:
    """K prototypes per class in each of the three spaces (row c*K + slot).

    Only the fused vectors receive loss gradients; the image and tabular
    vectors are set by initialization and projection.  All vectors are kept
    unit-norm (cosine geometry).
    """

    def __init__(self, slots_per_class: int = 6, tau_sim: float = 0.07,
                 img_width: int = IMG_PROTO_WIDTH, tab_width: int = TAB_PROTO_WIDTH,
                 fused_width: int = FUSED_PROTO_WIDTH):
        if slots_per_class < 1:
            raise ValidationError("slots_per_class must be >= 1")
        self.slots_per_class = slots_per_class
        self.tau_sim = tau_sim
        total = N_CLASSES * slots_per_class
        self.class_ids = np.repeat(np.arange(N_CLASSES), slots_per_class)
        self._fused = Param("proto.fused", np.zeros((total, fused_width)))
        self._img = Param("proto.img", np.zeros((total, img_width)))
        self._tab = Param("proto.tab", np.zeros((total, tab_width)))
        self.source_patient_ids: list[str | None] = [None] * total
        self.source_t_scores: list[float | None] = [None] * total
        self.source_clinical: list[ClinicalFeatures | None] = [None] * total

    @property
    def total(self) -> int:
        return N_CLASSES * self.slots_per_class

    @property
    def vec_fused(self) -> Param:
        return self._fused

    @property
    def vec_img(self) -> np.ndarray:
        return self._img.value

    @property
    def vec_tab(self) -> np.ndarray:
        return self._tab.value

    def params(self) -> list[Param]:
        return [self._fused, self._img, self._tab]

    def accumulate_grads(self, dp_fused: np.ndarray, dp_img: np.ndarray,
                         dp_tab: np.ndarray, scale: float = 1.0) -> None:
        self._fused.grad += scale * dp_fused
        self._img.grad += scale * dp_img
        self._tab.grad += scale * dp_tab

    def renormalize(self) -> None:
        self._fused.value[...] = unit_rows(self._fused.value)
        self._img.value[...] = unit_rows(self._img.value)
        self._tab.value[...] = unit_rows(self._tab.value)

    def prototypes(self) -> list[Prototype]:
        out = []
        for j in range(self.total):
            out.append(Prototype(
                class_id=Label(int(self.class_ids[j])),
                slot=j % self.slots_per_class,
                vec_img=self.vec_img[j].copy(),
                vec_tab=self.vec_tab[j].copy(),
                vec_fused=self.vec_fused.value[j].copy(),
                source_patient_id=self.source_patient_ids[j],
                source_t_score=self.source_t_scores[j],
                source_clinical=self.source_clinical[j],
            ))
        return out


@dataclass
class CaseRepresentations:
    """Per-case representations in the three prototype spaces, plus metadata."""

    z_img: np.ndarray
    z_tab: np.ndarray
    z_fused: np.ndarray
    labels: np.ndarray
    patient_ids: list[str]
    t_scores: np.ndarray
    clinical: list[ClinicalFeatures]


def init_kmeans(bank: PrototypeBank, reprs: CaseRepresentations, seed: int) -> None:
    """Initialize each class's slots by k-means over its fused representations.

    Centroid image/tabular vectors are the member means under the same
    assignment.  Deterministic under seed.
    """
    k = bank.slots_per_class
    streams = np.random.SeedSequence(seed).spawn(N_CLASSES)
    for c in range(N_CLASSES):
        mask = reprs.labels == c
        count = int(mask.sum())
        if count < k:
            raise ValidationError(
                f"class {Label(c).display_name!r} has {count} training cases but "
                f"{k} prototype slots; configure a smaller slot count"
            )
        fused = unit_rows(reprs.z_fused[mask])
        img = unit_rows(reprs.z_img[mask])
        tab = unit_rows(reprs.z_tab[mask])
        result = kmeans(fused, k, np.random.default_rng(streams[c]))
        for slot in range(k):
            j = c * k + slot
            members = result.assignments == slot
            bank.vec_fused.value[j] = unit_rows(result.centroids[slot])[0]
            bank.vec_img[j] = unit_rows(img[members].mean(axis=0))[0]
            bank.vec_tab[j] = unit_rows(tab[members].mean(axis=0))[0]
            bank.source_patient_ids[j] = None
            bank.source_t_scores[j] = None
            bank.source_clinical[j] = None


def modality_similarity(z_img: np.ndarray, z_tab: np.ndarray, alpha: float,
                        proto: Prototype) -> float:
    """Gated similarity alpha*cos(img) + (1-alpha)*cos(tab) to one prototype."""
    s_img, _ = cosine_matrix(np.atleast_2d(z_img), np.atleast_2d(proto.vec_img))
    s_tab, _ = cosine_matrix(np.atleast_2d(z_tab), np.atleast_2d(proto.vec_tab))
    return float(alpha * s_img[0, 0] + (1.0 - alpha) * s_tab[0, 0])


def gated_similarities(z_img: np.ndarray, z_tab: np.ndarray, alpha: np.ndarray,
                       bank: PrototypeBank) -> np.ndarray:
    """Gated similarity of each case to all prototypes, shape (B, total)."""
    s_img, _ = cosine_matrix(z_img, bank.vec_img)
    s_tab, _ = cosine_matrix(z_tab, bank.vec_tab)
    a = np.asarray(alpha, dtype=np.float64)[:, None]
    return a * s_img + (1.0 - a) * s_tab


def class_slot_max(similarities: np.ndarray, slots_per_class: int):
    """Per-class best slot similarity; returns (scores (B,3), argmax slot rows)."""
    b = similarities.shape[0]
    grouped = similarities.reshape(b, N_CLASSES, slots_per_class)
    arg = grouped.argmax(axis=2)
    scores = grouped.max(axis=2)
    return scores, arg


@dataclass
class ProtoLossGrads:
    z_fused: np.ndarray
    z_img: np.ndarray
    z_tab: np.ndarray
    alpha: np.ndarray
    p_fused: np.ndarray
    p_img: np.ndarray
    p_tab: np.ndarray


def proto_loss(z_fused: np.ndarray, z_img: np.ndarray, z_tab: np.ndarray,
               alpha: np.ndarray, labels: np.ndarray, bank: PrototypeBank,
               margin: float, lambda_sep: float, lambda_ctr: float):
    """Composite prototype loss; gradients flow to representations, the gate
    weight, and all three prototype matrices.

    Classification term: cross-entropy over per-class best-slot similarity
    scaled by 1/tau, in the fused space plus the gated modality space (the
    latter keeps the k-NN inference geometry trained and the gate learnable).
    Separation term: sample-anchored hinge of
    max(0, margin + s_nearest_other - s_nearest_same) on fused similarities.
    Center term: mean squared fused cosine distance to the nearest same-class
    prototype.
    """
    b = z_fused.shape[0]
    k = bank.slots_per_class
    rows = np.arange(b)

    sims_f, cache_f = cosine_matrix(z_fused, bank.vec_fused.value)
    scores_f, arg_f = class_slot_max(sims_f, k)
    l_class_f, dlogits_f, _ = softmax_cross_entropy(scores_f / bank.tau_sim, labels)
    dscores_f = dlogits_f / bank.tau_sim

    sims_i, cache_i = cosine_matrix(z_img, bank.vec_img)
    sims_t, cache_t = cosine_matrix(z_tab, bank.vec_tab)
    a = np.asarray(alpha, dtype=np.float64)[:, None]
    sims_m = a * sims_i + (1.0 - a) * sims_t
    scores_m, arg_m = class_slot_max(sims_m, k)
    l_class_m, dlogits_m, _ = softmax_cross_entropy(scores_m / bank.tau_sim, labels)
    dscores_m = dlogits_m / bank.tau_sim
    l_class = l_class_f + l_class_m

    s_same = scores_f[rows, labels]
    masked = scores_f.copy()
    masked[rows, labels] = -np.inf
    other_class = masked.argmax(axis=1)
    s_other = masked[rows, other_class]
    hinge = margin + s_other - s_same
    active = hinge > 0.0
    l_sep = float(np.maximum(hinge, 0.0).mean())
    if lambda_sep != 0.0:
        coef = lambda_sep / b
        np.add.at(dscores_f, (rows[active], other_class[active]), coef)
        np.add.at(dscores_f, (rows[active], labels[active]), -coef)

    d_same = 1.0 - s_same
    l_center = float(np.mean(d_same**2))
    if lambda_ctr != 0.0:
        np.add.at(dscores_f, (rows, labels), lambda_ctr * (-2.0 * d_same / b))

    # route class-score gradients to the argmax slot of each (sample, class)
    dsims_f = np.zeros_like(sims_f)
    dsims_m = np.zeros_like(sims_m)
    for c in range(N_CLASSES):
        dsims_f[rows, c * k + arg_f[:, c]] += dscores_f[:, c]
        dsims_m[rows, c * k + arg_m[:, c]] += dscores_m[:, c]

    dz_fused, dp_fused = cosine_matrix_backward(cache_f, dsims_f)
    dz_img, dp_img = cosine_matrix_backward(cache_i, a * dsims_m)
    dz_tab, dp_tab = cosine_matrix_backward(cache_t, (1.0 - a) * dsims_m)
    dalpha = (dsims_m * (sims_i - sims_t)).sum(axis=1)

    total = l_class + lambda_sep * l_sep + lambda_ctr * l_center
    terms = {
        "proto_total": total,
        "proto_class": l_class,
        "proto_sep": l_sep,
        "proto_center": l_center,
    }
    grads = ProtoLossGrads(dz_fused, dz_img, dz_tab, dalpha,
                           dp_fused, dp_img, dp_tab)
    return terms, grads


def project_prototypes(bank: PrototypeBank, reprs: CaseRepresentations) -> None:
    """Snap every prototype to its nearest same-class training case.

    All three vectors are replaced by the case's unit-normalized
    representations and the source metadata is recorded.  Ties on fused
    similarity break toward the lexicographically smallest patient id.
    """
    fused_n = unit_rows(reprs.z_fused)
    img_n = unit_rows(reprs.z_img)
    tab_n = unit_rows(reprs.z_tab)
    for j in range(bank.total):
        c = int(bank.class_ids[j])
        candidate_idx = np.flatnonzero(reprs.labels == c)
        if candidate_idx.size == 0:
            raise ValidationError(
                f"no training cases of class {Label(c).display_name!r} to project onto"
            )
        proto_dir = unit_rows(bank.vec_fused.value[j])[0]
        sims = fused_n[candidate_idx] @ proto_dir
        best = sims.max()
        tied = candidate_idx[sims == best]
        winner = min(tied, key=lambda i: reprs.patient_ids[i])
        bank.vec_fused.value[j] = fused_n[winner]
        bank.vec_img[j] = img_n[winner]
        bank.vec_tab[j] = tab_n[winner]
        bank.source_patient_ids[j] = reprs.patient_ids[winner]
        bank.source_t_scores[j] = float(reprs.t_scores[winner])
        bank.source_clinical[j] = reprs.clinical[winner]


def export_prototypes_csv(bank: PrototypeBank, path: str | Path) -> None:
    """Write all prototypes with fused coordinates for external plotting."""
    path = Path(path)
    width = bank.vec_fused.value.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["class", "slot", "source_patient_id", "source_t_score"]
            + [f"f{i}" for i in range(width)]
        )
        for proto in bank.prototypes():
            writer.writerow(
                [
                    proto.class_id.display_name,
                    proto.slot,
                    proto.source_patient_id if proto.source_patient_id is not None else "",
                    proto.source_t_score if proto.source_t_score is not None else "",
                ]
                + [repr(float(v)) for v in proto.vec_fused]
            )
