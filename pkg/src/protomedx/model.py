"""Full model assembly: encoders, fusion, gate, prototype bank and task heads,
with the multi-task loss and both inference paths (prototype k-NN and head).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ValidationError
from .encoders import (
    AttentionFusion,
    ConcatFusion,
    Gate,
    IMAGE_HIDDEN,
    IMAGE_WIDTH,
    ImageEncoder,
    TABULAR_IN,
    TABULAR_WIDTH,
    TabularEncoder,
)
from .nn import Dense, Param, ParamGroup, mse_loss, softmax_cross_entropy
from .prototypes import (
    IMG_PROTO_WIDTH,
    PrototypeBank,
    gated_similarities,
    proto_loss,
)

EVAL_BATCH = 256
SEVERITY_ORDER = (2, 1, 0)  # osteoporosis > osteopenia > normal on vote ties


@dataclass(frozen=True)
class ModelDims:
    """Internal layer widths; overridden only for small-scale gradient checks."""

    image_hidden: int = IMAGE_HIDDEN
    image_width: int = IMAGE_WIDTH
    tabular_width: int = TABULAR_WIDTH
    img_proto_width: int = IMG_PROTO_WIDTH


@dataclass
class LossTerms:
    total: float
    cls: float
    reg: float
    proto_total: float
    proto_class: float
    proto_sep: float
    proto_center: float

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "cls": self.cls,
            "reg": self.reg,
            "proto_total": self.proto_total,
            "proto_class": self.proto_class,
            "proto_sep": self.proto_sep,
            "proto_center": self.proto_center,
        }


class ProtoMedXModel:
    """Trainable multi-modal prototype classifier over precomputed embeddings."""

    def __init__(self, embedding_dim: int, rng: np.random.Generator, *,
                 slots_per_class: int = 6, tau_sim: float = 0.07,
                 norm_mode: str = "batch", no_gate: bool = False,
                 no_cross_attention: bool = False, no_prototypes: bool = False,
                 dims: ModelDims = ModelDims()):
        self.embedding_dim = embedding_dim
        self.dims = dims
        self.no_gate = no_gate
        self.no_cross_attention = no_cross_attention
        self.no_prototypes = no_prototypes
        self.image_enc = ImageEncoder(embedding_dim, rng, norm_mode=norm_mode,
                                      hidden=dims.image_hidden, out=dims.image_width)
        self.tab_enc = TabularEncoder(rng, in_width=TABULAR_IN, width=dims.tabular_width)
        fusion_cls = ConcatFusion if no_cross_attention else AttentionFusion
        self.fusion = fusion_cls(rng, img_width=dims.image_width,
                                 tab_width=dims.tabular_width)
        self.gate = Gate(rng, img_width=dims.image_width, tab_width=dims.tabular_width)
        self.img_head = Dense(dims.image_width, dims.img_proto_width, rng,
                              init="glorot", name="proto.img_head")
        self.bank = None if no_prototypes else PrototypeBank(
            slots_per_class, tau_sim, img_width=dims.img_proto_width,
            tab_width=dims.tabular_width, fused_width=dims.image_width,
        )
        self.cls_head = Dense(dims.image_width, 3, rng, init="glorot", name="head.cls")
        self.reg_head = Dense(dims.image_width, 1, rng, init="glorot", name="head.reg")

    # -- parameter bookkeeping -------------------------------------------------

    def param_groups(self, lr_image: float, lr_tabular: float,
                     lr_prototypes: float) -> list[ParamGroup]:
        """Differential learning-rate groups: the image projection stack, the
        layers trained from scratch, and prototype adaptation."""
        scratch = (
            self.tab_enc.params() + self.fusion.params() + self.gate.params()
            + self.cls_head.params() + self.reg_head.params()
        )
        proto_params = self.img_head.params()
        if self.bank is not None:
            proto_params = proto_params + self.bank.params()
        return [
            ParamGroup("image", self.image_enc.params(), lr_image),
            ParamGroup("tabular", scratch, lr_tabular),
            ParamGroup("prototypes", proto_params, lr_prototypes),
        ]

    def all_params(self) -> list[Param]:
        params = (
            self.image_enc.params() + self.tab_enc.params() + self.fusion.params()
            + self.gate.params() + self.img_head.params()
            + self.cls_head.params() + self.reg_head.params()
        )
        if self.bank is not None:
            params = params + self.bank.params()
        return params

    def state_tensors(self) -> dict[str, np.ndarray]:
        """All persistent tensors by name: parameters plus normalization stats."""
        out = {p.name: p.value for p in self.all_params()}
        for layer in self.image_enc.stack.layers:
            if hasattr(layer, "running_mean"):
                out[f"{layer.gamma.name}.running_mean"] = layer.running_mean
                out[f"{layer.gamma.name}.running_var"] = layer.running_var
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        state = self.state_tensors()
        missing = sorted(set(state) - set(tensors))
        extra = sorted(set(tensors) - set(state))
        if missing or extra:
            raise ValidationError(
                f"checkpoint tensors do not match model: missing {missing[:5]}, "
                f"unexpected {extra[:5]}"
            )
        for name, target in state.items():
            value = np.asarray(tensors[name], dtype=np.float64)
            if value.shape != target.shape:
                raise ValidationError(
                    f"tensor {name!r} has shape {value.shape}, expected {target.shape}"
                )
            target[...] = value

    # -- forward / loss ----------------------------------------------------------

    def encode(self, emb_std: np.ndarray, clin_std: np.ndarray, train: bool,
               rng: np.random.Generator | None = None):
        """Run both encoders and fusion; returns activations and caches."""
        if emb_std.shape[1] != self.embedding_dim:
            raise ValidationError(
                f"embedding width {emb_std.shape[1]}, expected {self.embedding_dim}"
            )
        if clin_std.shape[1] != TABULAR_IN:
            raise ValidationError(
                f"clinical width {clin_std.shape[1]}, expected {TABULAR_IN}"
            )
        h_img, c_img = self.image_enc.forward(emb_std, train, rng)
        h_tab, c_tab = self.tab_enc.forward(clin_std, train, rng)
        fused, attn, c_fuse = self.fusion.forward(h_img, h_tab, train, rng)
        return h_img, h_tab, fused, attn, (c_img, c_tab, c_fuse)

    def alphas(self, h_img: np.ndarray, h_tab: np.ndarray) -> np.ndarray:
        if self.no_gate:
            return np.full(h_img.shape[0], 0.5)
        alpha, _ = self.gate.forward(h_img, h_tab)
        return alpha

    def loss_and_grads(self, emb_std: np.ndarray, clin_std: np.ndarray,
                       labels: np.ndarray, t_scores: np.ndarray,
                       lambda_reg: float, lambda_proto: float, margin: float,
                       lambda_sep: float, lambda_ctr: float,
                       rng: np.random.Generator) -> LossTerms:
        """Train-mode forward and full backward; accumulates into param grads."""
        h_img, h_tab, fused, _, caches = self.encode(emb_std, clin_std, True, rng)
        c_img, c_tab, c_fuse = caches

        logits, c_cls = self.cls_head.forward(fused, True, rng)
        l_cls, dlogits, _ = softmax_cross_entropy(logits, labels)
        t_pred, c_reg = self.reg_head.forward(fused, True, rng)
        l_reg, dt_pred = mse_loss(t_pred[:, 0], t_scores)

        dfused = self.cls_head.backward(c_cls, dlogits)
        dfused += self.reg_head.backward(c_reg, lambda_reg * dt_pred[:, None])

        dh_img_extra = 0.0
        dh_tab_extra = 0.0
        if self.bank is not None:
            z_img, c_zimg = self.img_head.forward(h_img, True, rng)
            if self.no_gate:
                alpha = np.full(h_img.shape[0], 0.5)
                c_gate = None
            else:
                alpha, c_gate = self.gate.forward(h_img, h_tab)
            terms, grads = proto_loss(fused, z_img, h_tab, alpha, labels,
                                      self.bank, margin, lambda_sep, lambda_ctr)
            dfused += lambda_proto * grads.z_fused
            self.bank.accumulate_grads(grads.p_fused, grads.p_img, grads.p_tab,
                                       scale=lambda_proto)
            dh_img_extra = self.img_head.backward(c_zimg, lambda_proto * grads.z_img)
            dh_tab_extra = lambda_proto * grads.z_tab
            if c_gate is not None:
                g_img, g_tab = self.gate.backward(c_gate, lambda_proto * grads.alpha)
                dh_img_extra = dh_img_extra + g_img
                dh_tab_extra = dh_tab_extra + g_tab
        else:
            terms = {"proto_total": 0.0, "proto_class": 0.0,
                     "proto_sep": 0.0, "proto_center": 0.0}

        dh_img, dh_tab = self.fusion.backward(c_fuse, dfused)
        self.image_enc.backward(c_img, dh_img + dh_img_extra)
        self.tab_enc.backward(c_tab, dh_tab + dh_tab_extra)

        total = l_cls + lambda_reg * l_reg + lambda_proto * terms["proto_total"]
        return LossTerms(total, l_cls, l_reg, terms["proto_total"],
                         terms["proto_class"], terms["proto_sep"],
                         terms["proto_center"])

    # -- inference -----------------------------------------------------------------

    def forward_eval(self, emb_std: np.ndarray, clin_std: np.ndarray,
                     batch: int = EVAL_BATCH):
        """Batched eval-mode forward; returns (z_img, h_tab, fused, alpha)."""
        z_img_parts, tab_parts, fused_parts, alpha_parts = [], [], [], []
        for start in range(0, emb_std.shape[0], batch):
            sl = slice(start, start + batch)
            h_img, h_tab, fused, _, _ = self.encode(emb_std[sl], clin_std[sl], False)
            z_img, _ = self.img_head.forward(h_img, False)
            z_img_parts.append(z_img)
            tab_parts.append(h_tab)
            fused_parts.append(fused)
            alpha_parts.append(self.alphas(h_img, h_tab))
        return (
            np.concatenate(z_img_parts),
            np.concatenate(tab_parts),
            np.concatenate(fused_parts),
            np.concatenate(alpha_parts),
        )

    def predict_head(self, emb_std: np.ndarray, clin_std: np.ndarray,
                     batch: int = EVAL_BATCH) -> np.ndarray:
        preds = []
        for start in range(0, emb_std.shape[0], batch):
            sl = slice(start, start + batch)
            _, _, fused, _, _ = self.encode(emb_std[sl], clin_std[sl], False)
            logits, _ = self.cls_head.forward(fused, False)
            preds.append(logits.argmax(axis=1))
        return np.concatenate(preds)

    def knn_distances(self, emb_std: np.ndarray, clin_std: np.ndarray,
                      batch: int = EVAL_BATCH):
        """Gated cosine distances to every prototype; returns (d, alpha)."""
        if self.bank is None:
            raise RuntimeError("prototype inference requires a prototype bank")
        z_img, h_tab, _, alpha = self.forward_eval(emb_std, clin_std, batch)
        sims = gated_similarities(z_img, h_tab, alpha, self.bank)
        return 1.0 - sims, alpha

    def predict_knn(self, emb_std: np.ndarray, clin_std: np.ndarray, k: int,
                    tau_conf: float, batch: int = EVAL_BATCH):
        """Weighted k-NN vote over prototypes; returns (preds, votes, alpha)."""
        d, alpha = self.knn_distances(emb_std, clin_std, batch)
        preds, votes, _, _ = knn_vote(d, self.bank.class_ids, k, tau_conf)
        return preds, votes, alpha


def knn_vote(distances: np.ndarray, class_ids: np.ndarray, k: int, tau_conf: float):
    """Retrieve the k nearest prototypes and vote with normalized exp(-d/tau).

    Vote ties break toward the more severe class.  Returns
    (predictions, votes (B,3), neighbor indices (B,k), neighbor weights (B,k)).
    """
    total = distances.shape[1]
    if not 1 <= k <= total:
        raise ValidationError(f"k must be in [1, {total}], got {k}")
    if tau_conf <= 0:
        raise ValidationError(f"tau_conf must be > 0, got {tau_conf}")
    order = np.argsort(distances, axis=1, kind="stable")[:, :k]
    d_k = np.take_along_axis(distances, order, axis=1)
    # shifting by the row minimum leaves the normalized weights unchanged
    w = np.exp(-(d_k - d_k[:, :1]) / tau_conf)
    w /= w.sum(axis=1, keepdims=True)
    neighbor_classes = class_ids[order]
    votes = np.zeros((distances.shape[0], 3))
    for c in range(3):
        votes[:, c] = np.where(neighbor_classes == c, w, 0.0).sum(axis=1)
    preds = severity_argmax(votes)
    return preds, votes, order, w


def severity_argmax(votes: np.ndarray) -> np.ndarray:
    """Row argmax over class votes; exact ties go to the more severe class."""
    votes = np.atleast_2d(votes)
    reordered = votes[:, list(SEVERITY_ORDER)]
    return np.array([SEVERITY_ORDER[i] for i in reordered.argmax(axis=1)])
