"""Patient data model, file ingestion, label derivation, splitting and synthesis."""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

EMBEDDING_DIM = 1151

FEATURE_NAMES = (
    "age",
    "sex",
    "weight",
    "height",
    "previous_fracture",
    "parent_fractured_hip",
    "current_smoker",
    "glucocorticoids",
    "rheumatoid_arthritis",
    "secondary_osteoporosis",
    "alcohol_3plus_units",
)
# age, weight, height are continuous; everything else is 0/1.
CONTINUOUS_IDX = (0, 2, 3)
BINARY_IDX = tuple(i for i in range(len(FEATURE_NAMES)) if i not in CONTINUOUS_IDX)

CLINICAL_CSV_COLUMNS = ("patient_id",) + FEATURE_NAMES + ("t_score",)

EMBEDDINGS_MAGIC = b"PMXE"
EMBEDDINGS_VERSION = 1


class ValidationError(ValueError):
    """Raised when input data or configuration violates a documented contract."""


class Label(IntEnum):
    """WHO diagnostic categories, ordered by severity."""

    NORMAL = 0
    OSTEOPENIA = 1
    OSTEOPOROSIS = 2

    @property
    def display_name(self) -> str:
        return self.name.lower()


LABEL_NAMES = tuple(lbl.display_name for lbl in Label)


def who_label(t_score: float) -> Label:
    """Map a T-score to its WHO diagnostic category.

    Normal above -1.0, osteoporosis below -2.5, osteopenia in between.
    Both boundary values (-1.0 and -2.5) are assigned to osteopenia.
    """
    if not np.isfinite(t_score):
        raise ValidationError(f"t_score must be finite, got {t_score!r}")
    if t_score > -1.0:
        return Label.NORMAL
    if t_score < -2.5:
        return Label.OSTEOPOROSIS
    return Label.OSTEOPENIA


def who_labels(t_scores: np.ndarray) -> np.ndarray:
    """Vectorized :func:`who_label`; returns int labels."""
    t = np.asarray(t_scores, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise ValidationError("t_scores must all be finite")
    out = np.full(t.shape, Label.OSTEOPENIA, dtype=np.int64)
    out[t > -1.0] = Label.NORMAL
    out[t < -2.5] = Label.OSTEOPOROSIS
    return out


@dataclass(frozen=True)
class ClinicalFeatures:
    """The 11 clinical risk-assessment features, in fixed order."""

    age: float
    sex: int
    weight: float
    height: float
    previous_fracture: int
    parent_fractured_hip: int
    current_smoker: int
    glucocorticoids: int
    rheumatoid_arthritis: int
    secondary_osteoporosis: int
    alcohol_3plus_units: int

    def __post_init__(self) -> None:
        if not (self.age > 0 and self.weight > 0 and self.height > 0):
            raise ValidationError(
                f"age/weight/height must be positive, got "
                f"({self.age}, {self.weight}, {self.height})"
            )
        for name in FEATURE_NAMES:
            value = getattr(self, name)
            if not np.isfinite(value):
                raise ValidationError(f"clinical feature {name!r} is not finite")
        for idx in BINARY_IDX:
            value = getattr(self, FEATURE_NAMES[idx])
            if value not in (0, 1):
                raise ValidationError(
                    f"binary feature {FEATURE_NAMES[idx]!r} must be 0 or 1, got {value!r}"
                )

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in FEATURE_NAMES], dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "ClinicalFeatures":
        values = list(values)
        if len(values) != len(FEATURE_NAMES):
            raise ValidationError(
                f"expected {len(FEATURE_NAMES)} clinical values, got {len(values)}"
            )
        kwargs = {}
        for i, name in enumerate(FEATURE_NAMES):
            kwargs[name] = int(values[i]) if i in BINARY_IDX else float(values[i])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {n: getattr(self, n) for n in FEATURE_NAMES}


@dataclass(frozen=True)
class PatientCase:
    """One sample: image embedding, clinical features, T-score and derived label."""

    patient_id: str
    embedding: np.ndarray
    clinical: ClinicalFeatures
    t_score: float
    label: Label

    def __post_init__(self) -> None:
        emb = np.asarray(self.embedding, dtype=np.float64)
        object.__setattr__(self, "embedding", emb)
        if emb.ndim != 1:
            raise ValidationError(f"embedding must be 1-D, got shape {emb.shape}")
        if not np.all(np.isfinite(emb)):
            raise ValidationError(f"embedding of {self.patient_id!r} contains NaN/Inf")
        if not np.isfinite(self.t_score):
            raise ValidationError(f"t_score of {self.patient_id!r} is not finite")
        if who_label(self.t_score) != self.label:
            raise ValidationError(
                f"label {self.label!r} inconsistent with t_score {self.t_score} "
                f"for {self.patient_id!r}"
            )


def make_case(patient_id: str, embedding: np.ndarray, clinical: ClinicalFeatures,
              t_score: float) -> PatientCase:
    """Build a case with the label derived from the T-score."""
    return PatientCase(patient_id, embedding, clinical, float(t_score),
                       who_label(float(t_score)))


@dataclass
class Standardizer:
    """Train-set z-scoring for embeddings and continuous clinical features.

    Binary clinical features pass through unscaled.  Dimensions that are
    constant on the training set map to 0 (scale stored as 0).
    """

    emb_mean: np.ndarray
    emb_scale: np.ndarray
    clin_mean: np.ndarray
    clin_scale: np.ndarray

    @classmethod
    def fit(cls, cases: Sequence[PatientCase]) -> "Standardizer":
        emb = np.stack([c.embedding for c in cases])
        clin = np.stack([c.clinical.to_array() for c in cases])
        emb_mean = emb.mean(axis=0)
        emb_std = emb.std(axis=0)
        emb_scale = np.where(emb_std > 0.0, 1.0 / np.where(emb_std > 0.0, emb_std, 1.0), 0.0)
        clin_mean = np.zeros(len(FEATURE_NAMES))
        clin_scale = np.ones(len(FEATURE_NAMES))
        for idx in CONTINUOUS_IDX:
            mean = clin[:, idx].mean()
            std = clin[:, idx].std()
            clin_mean[idx] = mean
            clin_scale[idx] = 1.0 / std if std > 0.0 else 0.0
        return cls(emb_mean, emb_scale, clin_mean, clin_scale)

    def transform(self, cases: Sequence[PatientCase]) -> tuple[np.ndarray, np.ndarray]:
        """Return standardized (embeddings, clinical) matrices for the cases."""
        emb = np.stack([c.embedding for c in cases])
        clin = np.stack([c.clinical.to_array() for c in cases])
        if emb.shape[1] != self.emb_mean.shape[0]:
            raise ValidationError(
                f"embedding width {emb.shape[1]} does not match fitted width "
                f"{self.emb_mean.shape[0]}"
            )
        emb_std = (emb - self.emb_mean) * self.emb_scale
        clin_std = (clin - self.clin_mean) * self.clin_scale
        return emb_std, clin_std


@dataclass
class DatasetSplit:
    """Disjoint train/val/test partitions plus the train-fitted standardizer."""

    train: list[PatientCase]
    val: list[PatientCase]
    test: list[PatientCase]
    standardizer: Standardizer


def _largest_remainder(quotas: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation of `total` proportional to `quotas` (largest remainder)."""
    floors = np.floor(quotas).astype(int)
    remainder = total - floors.sum()
    if remainder > 0:
        order = np.argsort(-(quotas - floors), kind="stable")
        floors[order[:remainder]] += 1
    elif remainder < 0:
        order = np.argsort(quotas - floors, kind="stable")
        floors[order[: -remainder]] -= 1
    return floors


def split_dataset(cases: Sequence[PatientCase], seed: int) -> DatasetSplit:
    """Stratified 72/8/20 train/val/test split, deterministic under `seed`."""
    if len(cases) < 10:
        raise ValidationError(f"need at least 10 cases to split, got {len(cases)}")
    labels = np.array([int(c.label) for c in cases])
    for lbl in Label:
        if not np.any(labels == int(lbl)):
            raise ValidationError(f"class {lbl.display_name!r} absent from input")

    n = len(cases)
    n_test = int(round(0.20 * n))
    n_val = int(round(0.08 * n))

    class_idx = [np.flatnonzero(labels == int(lbl)) for lbl in Label]
    counts = np.array([len(ix) for ix in class_idx], dtype=np.float64)
    test_alloc = _largest_remainder(counts * n_test / n, n_test)
    val_alloc = _largest_remainder(counts * n_val / n, n_val)

    rng = np.random.default_rng(seed)
    train: list[PatientCase] = []
    val: list[PatientCase] = []
    test: list[PatientCase] = []
    for ix, n_te, n_va in zip(class_idx, test_alloc, val_alloc):
        perm = rng.permutation(len(ix))
        shuffled = ix[perm]
        test.extend(cases[i] for i in shuffled[:n_te])
        val.extend(cases[i] for i in shuffled[n_te : n_te + n_va])
        train.extend(cases[i] for i in shuffled[n_te + n_va :])

    if min(len(train), len(val), len(test)) == 0:
        raise ValidationError(
            f"split produced an empty partition (sizes {len(train)}/{len(val)}/{len(test)}); "
            "provide more cases"
        )
    return DatasetSplit(train, val, test, Standardizer.fit(train))


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

# Per-feature base rate and slope for the binary risk features.  The flip
# probability rises as the latent T-score falls, scaled by tabular_signal.
_RISK_PROFILE = {
    "previous_fracture": (0.10, 0.70),
    "parent_fractured_hip": (0.12, 0.45),
    "current_smoker": (0.15, 0.30),
    "glucocorticoids": (0.05, 0.65),
    "rheumatoid_arthritis": (0.04, 0.40),
    "secondary_osteoporosis": (0.03, 0.75),
    "alcohol_3plus_units": (0.08, 0.25),
}

_T_RANGES = {
    Label.NORMAL: (-0.999, 2.5),
    Label.OSTEOPENIA: (-2.5, -1.0),
    Label.OSTEOPOROSIS: (-4.8, -2.501),
}

_FEMALE_RATE = 0.78
_AGE_RANGE = (20.0, 100.0)
_WEIGHT_RANGE = (40.0, 120.0)
_HEIGHT_RANGE = (145.0, 195.0)


@dataclass(frozen=True)
class SynthConfig:
    """Configuration for the synthetic cohort generator."""

    n_cases: int
    class_fractions: tuple[float, float, float] = (0.45, 0.38, 0.17)
    embedding_separation: float = 4.0
    tabular_signal: float = 0.8
    noise_sigma: float = 1.0
    seed: int = 0
    embedding_dim: int = EMBEDDING_DIM

    def __post_init__(self) -> None:
        if self.n_cases < 1:
            raise ValidationError(f"n_cases must be positive, got {self.n_cases}")
        fracs = np.asarray(self.class_fractions, dtype=np.float64)
        if fracs.shape != (3,) or np.any(fracs < 0):
            raise ValidationError("class_fractions must be 3 non-negative reals")
        if abs(fracs.sum() - 1.0) > 1e-9:
            raise ValidationError(
                f"class_fractions must sum to 1 within 1e-9, got sum {fracs.sum()!r}"
            )
        if self.embedding_separation < 0:
            raise ValidationError("embedding_separation must be >= 0")
        if not 0.0 <= self.tabular_signal <= 1.0:
            raise ValidationError("tabular_signal must be in [0, 1]")
        if not self.noise_sigma > 0:
            raise ValidationError("noise_sigma must be > 0")
        if self.embedding_dim < 4:
            raise ValidationError("embedding_dim must be >= 4")


def _risk_curve(t: np.ndarray) -> np.ndarray:
    # Smoothly rises from ~0 (healthy T) to ~1 (severe), centered at t=-1.75.
    return 1.0 / (1.0 + np.exp(1.5 * (t + 1.75)))


def generate_synthetic(cfg: SynthConfig) -> list[PatientCase]:
    """Generate a synthetic cohort; fully deterministic under cfg.seed.

    Each case draws a latent T-score from its class region, an embedding
    whose mean depends on both class and T-score (scaled by
    embedding_separation), and binary risk features whose flip probability
    rises as the T-score falls (scaled by tabular_signal).  With
    embedding_separation == 0 and tabular_signal == 0 no feature carries
    label signal.
    """
    rng = np.random.default_rng(cfg.seed)
    n, dim = cfg.n_cases, cfg.embedding_dim

    directions = rng.standard_normal((4, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    class_dirs, t_dir = directions[:3], directions[3]

    labels = rng.choice(3, size=n, p=np.asarray(cfg.class_fractions))
    lo = np.array([_T_RANGES[Label(k)][0] for k in range(3)])
    hi = np.array([_T_RANGES[Label(k)][1] for k in range(3)])
    t = lo[labels] + rng.random(n) * (hi[labels] - lo[labels])

    # class-and-t-score-dependent mean: a categorical offset per class plus a
    # dominant continuous component along one direction, both scaled by the
    # separation knob so separation 0 leaves the embedding signal-free
    sep = cfg.embedding_separation
    means = (0.4 * sep) * class_dirs[labels] + sep * t[:, None] * t_dir[None, :]
    embeddings = means + cfg.noise_sigma * rng.standard_normal((n, dim))

    risk = _risk_curve(t)
    binary: dict[str, np.ndarray] = {}
    for name, (base, slope) in _RISK_PROFILE.items():
        p = np.clip(base + cfg.tabular_signal * slope * risk, 0.0, 0.98)
        binary[name] = (rng.random(n) < p).astype(int)

    sex = (rng.random(n) < _FEMALE_RATE).astype(int)
    age = rng.uniform(*_AGE_RANGE, size=n)
    weight = rng.uniform(*_WEIGHT_RANGE, size=n)
    height = rng.uniform(*_HEIGHT_RANGE, size=n)

    cases = []
    for i in range(n):
        clinical = ClinicalFeatures(
            age=age[i],
            sex=int(sex[i]),
            weight=weight[i],
            height=height[i],
            previous_fracture=int(binary["previous_fracture"][i]),
            parent_fractured_hip=int(binary["parent_fractured_hip"][i]),
            current_smoker=int(binary["current_smoker"][i]),
            glucocorticoids=int(binary["glucocorticoids"][i]),
            rheumatoid_arthritis=int(binary["rheumatoid_arthritis"][i]),
            secondary_osteoporosis=int(binary["secondary_osteoporosis"][i]),
            alcohol_3plus_units=int(binary["alcohol_3plus_units"][i]),
        )
        cases.append(make_case(f"SYN-{i:06d}", embeddings[i], clinical, t[i]))
    return cases


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def write_clinical_csv(cases: Sequence[PatientCase], path: str | Path) -> None:
    rows = []
    for c in cases:
        row = {"patient_id": c.patient_id}
        row.update(c.clinical.to_dict())
        row["t_score"] = c.t_score
        rows.append(row)
    frame = pd.DataFrame(rows, columns=list(CLINICAL_CSV_COLUMNS))
    frame.to_csv(path, index=False)


def write_embeddings_csv(cases: Sequence[PatientCase], path: str | Path) -> None:
    dim = cases[0].embedding.shape[0]
    columns = ["patient_id"] + [f"e{i}" for i in range(dim)]
    data = {"patient_id": [c.patient_id for c in cases]}
    emb = np.stack([c.embedding for c in cases])
    for i in range(dim):
        data[f"e{i}"] = emb[:, i]
    pd.DataFrame(data, columns=columns).to_csv(path, index=False)


def write_embeddings_binary(cases: Sequence[PatientCase], path: str | Path) -> None:
    """Write the PMXE container: magic, version, count, dim, then id/f32 records."""
    dim = cases[0].embedding.shape[0]
    with open(path, "wb") as fh:
        fh.write(EMBEDDINGS_MAGIC)
        fh.write(struct.pack("<III", EMBEDDINGS_VERSION, len(cases), dim))
        for c in cases:
            if c.embedding.shape[0] != dim:
                raise ValidationError(
                    f"embedding width {c.embedding.shape[0]} for {c.patient_id!r} "
                    f"does not match first record width {dim}"
                )
            ident = c.patient_id.encode("utf-8")
            fh.write(struct.pack("<I", len(ident)))
            fh.write(ident)
            fh.write(c.embedding.astype("<f4").tobytes())


def _read_embeddings_binary(path: Path) -> tuple[list[str], np.ndarray]:
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != EMBEDDINGS_MAGIC:
        raise ValidationError(f"{path}: not a PMXE embedding container")
    version, count, dim = struct.unpack_from("<III", raw, 4)
    if version != EMBEDDINGS_VERSION:
        raise ValidationError(
            f"{path}: unsupported embedding format version {version}, "
            f"expected {EMBEDDINGS_VERSION}"
        )
    ids: list[str] = []
    vectors = np.empty((count, dim), dtype=np.float64)
    offset = 16
    for row in range(count):
        if offset + 4 > len(raw):
            raise ValidationError(f"{path}: truncated at byte offset {offset}")
        (id_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        end = offset + id_len + 4 * dim
        if end > len(raw):
            raise ValidationError(f"{path}: truncated at byte offset {offset}")
        ids.append(raw[offset : offset + id_len].decode("utf-8"))
        offset += id_len
        vectors[row] = np.frombuffer(raw, dtype="<f4", count=dim, offset=offset)
        offset += 4 * dim
    return ids, vectors


def _read_embeddings_csv(path: Path) -> tuple[list[str], np.ndarray]:
    frame = pd.read_csv(path)
    if "patient_id" not in frame.columns:
        raise ValidationError(f"{path}: missing patient_id column")
    dim_cols = [c for c in frame.columns if c != "patient_id"]
    ids = [str(v) for v in frame["patient_id"]]
    vectors = frame[dim_cols].to_numpy(dtype=np.float64)
    return ids, vectors


def read_embeddings(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Read either embedding format, sniffing the PMXE magic."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == EMBEDDINGS_MAGIC:
        return _read_embeddings_binary(path)
    return _read_embeddings_csv(path)


def load_dataset(
    clinical_path: str | Path,
    embeddings_path: str | Path,
    expected_dim: int | None = None,
) -> list[PatientCase]:
    """Load and validate the clinical CSV joined with its embedding file.

    Labels are always recomputed from the T-score; a label column in the
    file, if present, is ignored.
    """
    clinical_path = Path(clinical_path)
    embeddings_path = Path(embeddings_path)
    frame = pd.read_csv(clinical_path)
    missing_cols = [c for c in CLINICAL_CSV_COLUMNS if c not in frame.columns]
    if missing_cols:
        raise ValidationError(f"{clinical_path}: missing columns {missing_cols}")

    ids, vectors = read_embeddings(embeddings_path)
    if expected_dim is not None and vectors.shape[1] != expected_dim:
        raise ValidationError(
            f"{embeddings_path}: embedding width {vectors.shape[1]} observed, "
            f"expected {expected_dim}"
        )
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ValidationError(f"{embeddings_path}: duplicate patient ids {dupes[:5]}")
    emb_by_id = {pid: vectors[i] for i, pid in enumerate(ids)}

    clin_ids = [str(v) for v in frame["patient_id"]]
    if len(set(clin_ids)) != len(clin_ids):
        dupes = sorted({i for i in clin_ids if clin_ids.count(i) > 1})
        raise ValidationError(f"{clinical_path}: duplicate patient ids {dupes[:5]}")
    unmatched = [pid for pid in clin_ids if pid not in emb_by_id]
    if unmatched:
        raise ValidationError(
            f"no embedding row for patient ids {unmatched[:10]} "
            f"({len(unmatched)} unmatched in total)"
        )

    cases = []
    for row_number, row in enumerate(frame.itertuples(index=False), start=2):
        values = [getattr(row, name) for name in FEATURE_NAMES]
        t_score = getattr(row, "t_score")
        if any(not np.isfinite(float(v)) for v in values) or not np.isfinite(float(t_score)):
            raise ValidationError(f"{clinical_path}: NaN/Inf at row {row_number}")
        pid = str(getattr(row, "patient_id"))
        emb = emb_by_id[pid]
        if not np.all(np.isfinite(emb)):
            raise ValidationError(
                f"{embeddings_path}: NaN/Inf in embedding at row {ids.index(pid) + 1}"
            )
        try:
            clinical = ClinicalFeatures.from_array(values)
        except ValidationError as exc:
            raise ValidationError(f"{clinical_path}: row {row_number}: {exc}") from exc
        cases.append(make_case(pid, emb, clinical, float(t_score)))
    return cases


def class_norms(cases: Sequence[PatientCase]) -> np.ndarray:
    """Per-class mean of raw clinical features, shape (3, 11)."""
    clin = np.stack([c.clinical.to_array() for c in cases])
    labels = np.array([int(c.label) for c in cases])
    norms = np.zeros((3, len(FEATURE_NAMES)))
    for k in range(3):
        mask = labels == k
        if np.any(mask):
            norms[k] = clin[mask].mean(axis=0)
    return norms


def dataclass_to_dict(obj) -> dict:
    return dataclasses.asdict(obj)
