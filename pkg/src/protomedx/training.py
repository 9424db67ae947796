"""Multi-task training loop, differential learning-rate groups, early stopping,
and versioned binary checkpoint persistence.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (
    ClinicalFeatures,
    DatasetSplit,
    Label,
    PatientCase,
    Standardizer,
    ValidationError,
    class_norms,
)
from .model import EVAL_BATCH, ProtoMedXModel
from .nn import AdamW
from .prototypes import CaseRepresentations, init_kmeans, project_prototypes

CHECKPOINT_MAGIC = b"PMXC"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Raised when a loss term becomes non-finite during training."""


class CheckpointError(RuntimeError):
    """Raised for corrupt or version-incompatible checkpoint files."""


@dataclass(frozen=True)
class TrainConfig:
    """All training hyperparameters, ablation switches and the run seed."""

    lr_image: float = 5e-5
    lr_tabular: float = 5e-4
    lr_prototypes: float = 1e-3
    weight_decay: float = 1e-4
    lambda_reg: float = 0.3
    lambda_proto: float = 1.0
    lambda_sep: float = 0.5
    lambda_ctr: float = 0.1
    margin: float = 0.2
    tau_sim: float = 0.07
    tau_conf: float = 0.1
    k_neighbors: int = 3
    slots_per_class: int = 6
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 15
    seed: int = 0
    norm_mode: str = "batch"
    projection_every: int = 5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    no_gate: bool = False
    no_multitask: bool = False
    no_cross_attention: bool = False
    no_prototypes: bool = False

    def __post_init__(self) -> None:
        for name in ("lr_image", "lr_tabular", "lr_prototypes"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.patience < 1:
            raise ValidationError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValidationError("batch_size and max_epochs must be >= 1")
        if self.tau_sim <= 0 or self.tau_conf <= 0:
            raise ValidationError("temperatures must be > 0")
        if self.k_neighbors < 1 or self.slots_per_class < 1:
            raise ValidationError("k_neighbors and slots_per_class must be >= 1")
        if self.projection_every < 1:
            raise ValidationError("projection_every must be >= 1")

    @property
    def effective_lambda_reg(self) -> float:
        return 0.0 if self.no_multitask else self.lambda_reg

    @property
    def effective_lambda_proto(self) -> float:
        return 0.0 if self.no_prototypes else self.lambda_proto

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Checkpoint:
    """Everything needed to reproduce eval-mode behavior of a trained model.

    Tensor payloads are stored at 32-bit; the in-memory copy is rounded to
    the same precision so saving and loading is exact.
    """

    version: int
    config: TrainConfig
    embedding_dim: int
    tensors: dict[str, np.ndarray]
    standardizer: Standardizer
    norms_by_class: np.ndarray
    proto_source_ids: list[str | None]
    proto_source_t_scores: list[float | None]
    proto_source_clinical: list[dict | None]
    history: list[dict]
    best_epoch: int
    rng_state: dict


def _quantize(value: np.ndarray) -> np.ndarray:
    return value.astype(np.float32).astype(np.float64)


def _build_representations(model: ProtoMedXModel, cases: Sequence[PatientCase],
                           standardizer: Standardizer) -> CaseRepresentations:
    emb_std, clin_std = standardizer.transform(cases)
    z_img, z_tab, z_fused, _ = model.forward_eval(emb_std, clin_std, EVAL_BATCH)
    return CaseRepresentations(
        z_img=z_img,
        z_tab=z_tab,
        z_fused=z_fused,
        labels=np.array([int(c.label) for c in cases]),
        patient_ids=[c.patient_id for c in cases],
        t_scores=np.array([c.t_score for c in cases]),
        clinical=[c.clinical for c in cases],
    )


class TrainedModel:
    """A trained model with its standardizer, class norms and checkpoint data."""

    def __init__(self, model: ProtoMedXModel, checkpoint: Checkpoint):
        self.model = model
        self.checkpoint = checkpoint

    @property
    def config(self) -> TrainConfig:
        return self.checkpoint.config

    @property
    def standardizer(self) -> Standardizer:
        return self.checkpoint.standardizer

    @property
    def norms_by_class(self) -> np.ndarray:
        return self.checkpoint.norms_by_class

    @property
    def history(self) -> list[dict]:
        return self.checkpoint.history

    @property
    def checkpoint_id(self) -> str:
        return checkpoint_digest(self.checkpoint)

    def transform(self, cases: Sequence[PatientCase]):
        return self.standardizer.transform(cases)

    def predict(self, cases: Sequence[PatientCase], k: int | None = None,
                tau_conf: float | None = None) -> np.ndarray:
        """Primary inference path: prototype k-NN, or the head when ablated."""
        emb_std, clin_std = self.transform(cases)
        if self.model.bank is None:
            return self.model.predict_head(emb_std, clin_std)
        preds, _, _ = self.model.predict_knn(
            emb_std, clin_std,
            k=self.config.k_neighbors if k is None else k,
            tau_conf=self.config.tau_conf if tau_conf is None else tau_conf,
        )
        return preds

    def predict_head(self, cases: Sequence[PatientCase]) -> np.ndarray:
        emb_std, clin_std = self.transform(cases)
        return self.model.predict_head(emb_std, clin_std)

    def representations(self, cases: Sequence[PatientCase]) -> CaseRepresentations:
        return _build_representations(self.model, cases, self.standardizer)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "TrainedModel":
        cfg = ckpt.config
        model = ProtoMedXModel(
            ckpt.embedding_dim, np.random.default_rng(0),
            slots_per_class=cfg.slots_per_class, tau_sim=cfg.tau_sim,
            norm_mode=cfg.norm_mode, no_gate=cfg.no_gate,
            no_cross_attention=cfg.no_cross_attention,
            no_prototypes=cfg.no_prototypes,
        )
        model.load_state_tensors(ckpt.tensors)
        if model.bank is not None:
            model.bank.source_patient_ids = list(ckpt.proto_source_ids)
            model.bank.source_t_scores = list(ckpt.proto_source_t_scores)
            model.bank.source_clinical = [
                ClinicalFeatures(**d) if d is not None else None
                for d in ckpt.proto_source_clinical
            ]
        return cls(model, ckpt)


def _val_accuracy(model: ProtoMedXModel, emb_std, clin_std, labels,
                  cfg: TrainConfig) -> float:
    """Validation metric for model selection.

    With prototypes enabled both inference paths ship, so the monitored
    accuracy is their mean; selecting on one path alone can restore an
    epoch where the other has not converged.
    """
    head_acc = float((model.predict_head(emb_std, clin_std) == labels).mean())
    if model.bank is None:
        return head_acc
    preds, _, _ = model.predict_knn(emb_std, clin_std, cfg.k_neighbors, cfg.tau_conf)
    return 0.5 * (float((preds == labels).mean()) + head_acc)


def train(split: DatasetSplit, cfg: TrainConfig) -> TrainedModel:
    """Train with early stopping on validation accuracy; restores best weights,
    runs a final prototype projection, and freezes the checkpoint at 32-bit."""
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    init_rng = np.random.default_rng(seeds[0])
    shuffle_rng = np.random.default_rng(seeds[1])
    dropout_rng = np.random.default_rng(seeds[2])
    kmeans_seed = int(np.random.default_rng(seeds[3]).integers(2**31))

    standardizer = split.standardizer
    emb_tr, clin_tr = standardizer.transform(split.train)
    y_tr = np.array([int(c.label) for c in split.train])
    t_tr = np.array([c.t_score for c in split.train])
    emb_va, clin_va = standardizer.transform(split.val)
    y_va = np.array([int(c.label) for c in split.val])

    model = ProtoMedXModel(
        emb_tr.shape[1], init_rng,
        slots_per_class=cfg.slots_per_class, tau_sim=cfg.tau_sim,
        norm_mode=cfg.norm_mode, no_gate=cfg.no_gate,
        no_cross_attention=cfg.no_cross_attention,
        no_prototypes=cfg.no_prototypes,
    )
    if model.bank is not None:
        init_kmeans(model.bank, _build_representations(model, split.train, standardizer),
                    kmeans_seed)

    n_train = len(split.train)
    steps_per_epoch = math.ceil(n_train / cfg.batch_size)
    optimizer = AdamW(
        model.param_groups(cfg.lr_image, cfg.lr_tabular, cfg.lr_prototypes),
        total_steps=cfg.max_epochs * steps_per_epoch,
        weight_decay=cfg.weight_decay,
        beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps,
    )

    lambda_reg = cfg.effective_lambda_reg
    lambda_proto = cfg.effective_lambda_proto
    history: list[dict] = []
    best_acc = -1.0
    best_epoch = -1
    best_state: dict[str, np.ndarray] = {}
    epochs_since_best = 0
    global_step = 0

    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(n_train)
        sums: dict[str, float] = {}
        for start in range(0, n_train, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            optimizer.zero_grads()
            terms = model.loss_and_grads(
                emb_tr[idx], clin_tr[idx], y_tr[idx], t_tr[idx],
                lambda_reg, lambda_proto, cfg.margin, cfg.lambda_sep,
                cfg.lambda_ctr, dropout_rng,
            )
            for name, value in terms.as_dict().items():
                if not np.isfinite(value):
                    raise TrainingDivergedError(
                        f"loss term {name!r} became non-finite at epoch {epoch}"
                    )
                sums[name] = sums.get(name, 0.0) + value
            factor = optimizer.step(global_step)
            global_step += 1
            if model.bank is not None:
                model.bank.renormalize()

        if model.bank is not None and epoch % cfg.projection_every == 0:
            project_prototypes(model.bank,
                               _build_representations(model, split.train, standardizer))

        val_acc = _val_accuracy(model, emb_va, clin_va, y_va, cfg)
        record = {name: value / steps_per_epoch for name, value in sums.items()}
        record.update({"epoch": epoch, "val_accuracy": val_acc, "lr_factor": factor})
        history.append(record)

        if val_acc > best_acc:
            best_acc = val_acc
            best_epoch = epoch
            best_state = {k: v.copy() for k, v in model.state_tensors().items()}
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= cfg.patience:
                break

    model.load_state_tensors(best_state)

    # Freeze at checkpoint precision first so the final projection snaps
    # prototypes to representations the stored model reproduces exactly.
    for tensor in model.state_tensors().values():
        tensor[...] = _quantize(tensor)
    if model.bank is not None:
        project_prototypes(model.bank,
                           _build_representations(model, split.train, standardizer))
        model.bank.vec_fused.value[...] = _quantize(model.bank.vec_fused.value)
        model.bank.vec_img[...] = _quantize(model.bank.vec_img)
        model.bank.vec_tab[...] = _quantize(model.bank.vec_tab)

    bank = model.bank
    ckpt = Checkpoint(
        version=CHECKPOINT_VERSION,
        config=cfg,
        embedding_dim=emb_tr.shape[1],
        tensors={k: v.copy() for k, v in model.state_tensors().items()},
        standardizer=standardizer,
        norms_by_class=class_norms(split.train),
        proto_source_ids=list(bank.source_patient_ids) if bank else [],
        proto_source_t_scores=list(bank.source_t_scores) if bank else [],
        proto_source_clinical=(
            [c.to_dict() if c is not None else None for c in bank.source_clinical]
            if bank else []
        ),
        history=history,
        best_epoch=best_epoch,
        rng_state={
            "shuffle": shuffle_rng.bit_generator.state,
            "dropout": dropout_rng.bit_generator.state,
        },
    )
    return TrainedModel(model, ckpt)


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

def _standardizer_to_dict(s: Standardizer) -> dict:
    return {
        "emb_mean": s.emb_mean.tolist(),
        "emb_scale": s.emb_scale.tolist(),
        "clin_mean": s.clin_mean.tolist(),
        "clin_scale": s.clin_scale.tolist(),
    }


def _standardizer_from_dict(d: dict) -> Standardizer:
    return Standardizer(
        emb_mean=np.asarray(d["emb_mean"], dtype=np.float64),
        emb_scale=np.asarray(d["emb_scale"], dtype=np.float64),
        clin_mean=np.asarray(d["clin_mean"], dtype=np.float64),
        clin_scale=np.asarray(d["clin_scale"], dtype=np.float64),
    )


def serialize_checkpoint(ckpt: Checkpoint) -> bytes:
    names = sorted(ckpt.tensors)
    manifest = {
        "format_version": ckpt.version,
        "config": ckpt.config.to_dict(),
        "embedding_dim": ckpt.embedding_dim,
        "tensors": [{"name": n, "shape": list(ckpt.tensors[n].shape)} for n in names],
        "standardizer": _standardizer_to_dict(ckpt.standardizer),
        "class_norms": ckpt.norms_by_class.tolist(),
        "prototype_meta": {
            "source_patient_ids": ckpt.proto_source_ids,
            "source_t_scores": ckpt.proto_source_t_scores,
            "source_clinical": ckpt.proto_source_clinical,
        },
        "history": ckpt.history,
        "best_epoch": ckpt.best_epoch,
        "rng_state": ckpt.rng_state,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", ckpt.version, len(blob)), blob]
    for name in names:
        parts.append(ckpt.tensors[name].astype("<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> str:
    """Write the PMXC container; returns the content digest."""
    data = serialize_checkpoint(ckpt)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def checkpoint_digest(ckpt: Checkpoint) -> str:
    return hashlib.sha256(serialize_checkpoint(ckpt)).hexdigest()


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a PMXC checkpoint (bad magic at byte 0)")
    version, manifest_len = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version} unsupported, "
            f"this build reads version {CHECKPOINT_VERSION}"
        )
    if 12 + manifest_len > len(raw):
        raise CheckpointError(f"{path}: truncated manifest at byte offset {len(raw)}")
    try:
        manifest = json.loads(raw[12 : 12 + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest at byte offset 12: {exc}") from exc

    tensors: dict[str, np.ndarray] = {}
    offset = 12 + manifest_len
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated tensor payload at byte offset {offset}")
        values = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        tensors[entry["name"]] = values.astype(np.float64).reshape(shape)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes at offset {offset}")

    meta = manifest["prototype_meta"]
    return Checkpoint(
        version=version,
        config=TrainConfig.from_dict(manifest["config"]),
        embedding_dim=int(manifest["embedding_dim"]),
        tensors=tensors,
        standardizer=_standardizer_from_dict(manifest["standardizer"]),
        norms_by_class=np.asarray(manifest["class_norms"], dtype=np.float64),
        proto_source_ids=list(meta["source_patient_ids"]),
        proto_source_t_scores=list(meta["source_t_scores"]),
        proto_source_clinical=list(meta["source_clinical"]),
        history=list(manifest["history"]),
        best_epoch=int(manifest["best_epoch"]),
        rng_state=dict(manifest["rng_state"]),
    )
