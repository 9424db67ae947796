"""Modality encoders, cross-modal attention fusion, and the similarity gate.

Widths default to the production architecture (image 1151 -> 512 -> 256,
tabular 11 -> 64 -> 64, fused 256); they are parameters so the exact same
code paths can be exercised at tiny sizes by the gradient checker.
"""

from __future__ import annotations

import math

import numpy as np

from .nn import (
    BatchNorm,
    Dense,
    Dropout,
    LayerStack,
    Param,
    ReLU,
    Residual,
    sigmoid,
)

IMAGE_HIDDEN = 512
IMAGE_WIDTH = 256
TABULAR_IN = 11
TABULAR_WIDTH = 64
FUSED_WIDTH = IMAGE_WIDTH
IMAGE_DROPOUT = 0.3
TABULAR_DROPOUT = 0.1
# Near-uniform mixing at initialization; large random gate weights would
# saturate the squash and pin alpha to one modality before anything is learned.
GATE_INIT_STD = 1e-3


class ImageEncoder:
    """Projection stack for precomputed image embeddings: dim -> hidden -> out."""

    def __init__(self, embedding_dim: int, rng: np.random.Generator,
                 norm_mode: str = "batch", hidden: int = IMAGE_HIDDEN,
                 out: int = IMAGE_WIDTH, dropout: float = IMAGE_DROPOUT):
        self.embedding_dim = embedding_dim
        self.out_width = out
        self.stack = LayerStack([
            Dense(embedding_dim, hidden, rng, name="img.fc1"),
            BatchNorm(hidden, mode=norm_mode, name="img.norm1"),
            ReLU(),
            Dropout(dropout),
            Dense(hidden, out, rng, name="img.fc2"),
            BatchNorm(out, mode=norm_mode, name="img.norm2"),
            ReLU(),
            Dropout(dropout),
        ])

    def params(self) -> list[Param]:
        return self.stack.params()

    def forward(self, x: np.ndarray, train: bool, rng=None):
        return self.stack.forward(x, train, rng)

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        return self.stack.backward(cache, dy)


class TabularEncoder:
    """Two dense layers with a residual connection around the second layer."""

    def __init__(self, rng: np.random.Generator, in_width: int = TABULAR_IN,
                 width: int = TABULAR_WIDTH, dropout: float = TABULAR_DROPOUT):
        self.out_width = width
        self.stack = LayerStack([
            Dense(in_width, width, rng, name="tab.fc1"),
            ReLU(),
            Dropout(dropout),
            Residual([
                Dense(width, width, rng, name="tab.fc2"),
                ReLU(),
                Dropout(dropout),
            ]),
        ])

    def params(self) -> list[Param]:
        return self.stack.params()

    def forward(self, x: np.ndarray, train: bool, rng=None):
        return self.stack.forward(x, train, rng)

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        return self.stack.backward(cache, dy)


class AttentionFusion:
    """Two-token single-head scaled dot-product attention over the modalities.

    The tabular vector is up-projected to the shared width; the image token
    is the query, and its post-attention value passes through the output map
    with a residual from the image representation.
    """

    def __init__(self, rng: np.random.Generator, img_width: int = IMAGE_WIDTH,
                 tab_width: int = TABULAR_WIDTH):
        width = img_width
        self.up = Dense(tab_width, width, rng, init="glorot", name="fuse.up")
        self.wq = Dense(width, width, rng, init="glorot", name="fuse.q")
        self.wk = Dense(width, width, rng, init="glorot", name="fuse.k")
        self.wv = Dense(width, width, rng, init="glorot", name="fuse.v")
        self.wo = Dense(width, width, rng, init="glorot", name="fuse.out")
        self.scale = 1.0 / math.sqrt(width)

    def params(self) -> list[Param]:
        out: list[Param] = []
        for layer in (self.up, self.wq, self.wk, self.wv, self.wo):
            out.extend(layer.params())
        return out

    def forward(self, h_img: np.ndarray, h_tab: np.ndarray, train: bool, rng=None):
        t2, c_up = self.up.forward(h_tab, train, rng)
        q, c_q = self.wq.forward(h_img, train, rng)
        k1, c_k1 = self.wk.forward(h_img, train, rng)
        k2, c_k2 = self.wk.forward(t2, train, rng)
        v1, c_v1 = self.wv.forward(h_img, train, rng)
        v2, c_v2 = self.wv.forward(t2, train, rng)

        s = np.stack([(q * k1).sum(axis=1), (q * k2).sum(axis=1)], axis=1) * self.scale
        s = s - s.max(axis=1, keepdims=True)
        e = np.exp(s)
        attn = e / e.sum(axis=1, keepdims=True)

        ctx = attn[:, :1] * v1 + attn[:, 1:] * v2
        proj, c_o = self.wo.forward(ctx, train, rng)
        fused = h_img + proj
        cache = (c_up, c_q, c_k1, c_k2, c_v1, c_v2, c_o, q, k1, k2, v1, v2, attn)
        return fused, attn, cache

    def backward(self, cache, dfused: np.ndarray):
        c_up, c_q, c_k1, c_k2, c_v1, c_v2, c_o, q, k1, k2, v1, v2, attn = cache
        dh_img = dfused.copy()
        dctx = self.wo.backward(c_o, dfused)

        dv1 = attn[:, :1] * dctx
        dv2 = attn[:, 1:] * dctx
        dattn = np.stack([(dctx * v1).sum(axis=1), (dctx * v2).sum(axis=1)], axis=1)
        # softmax backward over the two tokens
        ds = attn * (dattn - (dattn * attn).sum(axis=1, keepdims=True))
        ds = ds * self.scale

        dq = ds[:, :1] * k1 + ds[:, 1:] * k2
        dk1 = ds[:, :1] * q
        dk2 = ds[:, 1:] * q

        dh_img += self.wq.backward(c_q, dq)
        dh_img += self.wk.backward(c_k1, dk1)
        dt2 = self.wk.backward(c_k2, dk2)
        dh_img += self.wv.backward(c_v1, dv1)
        dt2 += self.wv.backward(c_v2, dv2)
        dh_tab = self.up.backward(c_up, dt2)
        return dh_img, dh_tab


class ConcatFusion:
    """Ablation fusion: concatenation followed by a dense map to the fused width."""

    def __init__(self, rng: np.random.Generator, img_width: int = IMAGE_WIDTH,
                 tab_width: int = TABULAR_WIDTH):
        self.img_width = img_width
        self.proj = Dense(img_width + tab_width, img_width, rng,
                          init="glorot", name="fuse.concat")

    def params(self) -> list[Param]:
        return self.proj.params()

    def forward(self, h_img: np.ndarray, h_tab: np.ndarray, train: bool, rng=None):
        joint = np.concatenate([h_img, h_tab], axis=1)
        fused, cache = self.proj.forward(joint, train, rng)
        attn = np.full((h_img.shape[0], 2), 0.5)
        return fused, attn, cache

    def backward(self, cache, dfused: np.ndarray):
        djoint = self.proj.backward(cache, dfused)
        return djoint[:, : self.img_width], djoint[:, self.img_width :]


class Gate:
    """Scalar modality weight alpha = sigmoid(w . [h_img; h_tab] + b)."""

    def __init__(self, rng: np.random.Generator, img_width: int = IMAGE_WIDTH,
                 tab_width: int = TABULAR_WIDTH):
        self.img_width = img_width
        in_width = img_width + tab_width
        self.w = Param("gate.w", rng.standard_normal((in_width, 1)) * GATE_INIT_STD)
        self.b = Param("gate.b", np.zeros(1))

    def params(self) -> list[Param]:
        return [self.w, self.b]

    def forward(self, h_img: np.ndarray, h_tab: np.ndarray):
        joint = np.concatenate([h_img, h_tab], axis=1)
        logit = joint @ self.w.value + self.b.value
        alpha = sigmoid(logit)[:, 0]
        return alpha, (joint, alpha)

    def backward(self, cache, dalpha: np.ndarray):
        joint, alpha = cache
        dlogit = (dalpha * alpha * (1.0 - alpha))[:, None]
        self.w.grad += joint.T @ dlogit
        self.b.grad += dlogit.sum(axis=0)
        djoint = dlogit @ self.w.value.T
        return djoint[:, : self.img_width], djoint[:, self.img_width :]
