"""Finite-difference verification of every analytic gradient in the package.

Each check rebuilds its model deterministically per evaluation, so stateful
layers (dropout masks, normalization statistics) cannot leak between the
perturbed evaluations.  Checks run at reduced widths through the exact
production code paths.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .encoders import AttentionFusion, ConcatFusion, Gate
from .model import ModelDims, ProtoMedXModel
from .nn import (
    BatchNorm,
    Dense,
    Dropout,
    LayerStack,
    ReLU,
    Residual,
    Sigmoid,
    gradient_check,
    pack_grads,
    pack_values,
    unpack_values,
)
from .prototypes import PrototypeBank, proto_loss, unit_rows

DEFAULT_TOL = 1e-4
DEFAULT_H = 1e-4


def _jitter(theta: np.ndarray, seed: int) -> np.ndarray:
    """Offset the checked point randomly so zero-initialized biases do not sit
    exactly on ReLU/hinge kinks, where finite differences are undefined."""
    return theta + np.random.default_rng(seed + 99).uniform(-0.05, 0.05, theta.size)


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def _stack_check(build: Callable[[], LayerStack], x_shape: tuple, seed: int,
                 h: float, train: bool = True) -> float:
    """FD check of a layer stack wrt its input and every parameter."""
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal(x_shape)
    probe = build()
    out0, _ = probe.forward(x0.copy(), train, np.random.default_rng(seed + 7))
    coeffs = np.random.default_rng(seed + 11).standard_normal(out0.shape)
    nx = x0.size

    def loss_fn(theta: np.ndarray):
        stack = build()
        params = stack.params()
        x = theta[:nx].reshape(x_shape)
        unpack_values(params, theta[nx:])
        y, caches = stack.forward(x, train, np.random.default_rng(seed + 7))
        for p in params:
            p.zero_grad()
        dx = stack.backward(caches, coeffs.copy())
        return float((coeffs * y).sum()), np.concatenate([dx.ravel(), pack_grads(params)])

    theta0 = np.concatenate([x0.ravel(), pack_values(probe.params())])
    theta0 = _jitter(theta0, seed)
    return gradient_check(loss_fn, theta0, h)


def _fusion_check(concat: bool, seed: int, h: float) -> float:
    img_w, tab_w, batch = 6, 5, 4
    rng = np.random.default_rng(seed)
    h_img0 = rng.standard_normal((batch, img_w))
    h_tab0 = rng.standard_normal((batch, tab_w))
    coeffs = np.random.default_rng(seed + 11).standard_normal((batch, img_w))
    n_img, n_tab = h_img0.size, h_tab0.size

    def build():
        cls = ConcatFusion if concat else AttentionFusion
        return cls(np.random.default_rng(seed + 1), img_width=img_w, tab_width=tab_w)

    def loss_fn(theta: np.ndarray):
        block = build()
        params = block.params()
        hi = theta[:n_img].reshape(h_img0.shape)
        ht = theta[n_img : n_img + n_tab].reshape(h_tab0.shape)
        unpack_values(params, theta[n_img + n_tab :])
        fused, _, cache = block.forward(hi, ht, True, None)
        for p in params:
            p.zero_grad()
        d_img, d_tab = block.backward(cache, coeffs.copy())
        grad = np.concatenate([d_img.ravel(), d_tab.ravel(), pack_grads(params)])
        return float((coeffs * fused).sum()), grad

    theta0 = np.concatenate([h_img0.ravel(), h_tab0.ravel(), pack_values(build().params())])
    theta0 = _jitter(theta0, seed)
    return gradient_check(loss_fn, theta0, h)


def _gate_check(seed: int, h: float) -> float:
    img_w, tab_w, batch = 6, 5, 4
    rng = np.random.default_rng(seed)
    h_img0 = rng.standard_normal((batch, img_w))
    h_tab0 = rng.standard_normal((batch, tab_w))
    coeffs = np.random.default_rng(seed + 11).standard_normal(batch)
    n_img, n_tab = h_img0.size, h_tab0.size

    def build():
        return Gate(np.random.default_rng(seed + 1), img_width=img_w, tab_width=tab_w)

    def loss_fn(theta: np.ndarray):
        gate = build()
        params = gate.params()
        hi = theta[:n_img].reshape(h_img0.shape)
        ht = theta[n_img : n_img + n_tab].reshape(h_tab0.shape)
        unpack_values(params, theta[n_img + n_tab :])
        alpha, cache = gate.forward(hi, ht)
        for p in params:
            p.zero_grad()
        d_img, d_tab = gate.backward(cache, coeffs.copy())
        grad = np.concatenate([d_img.ravel(), d_tab.ravel(), pack_grads(params)])
        return float((coeffs * alpha).sum()), grad

    theta0 = np.concatenate([h_img0.ravel(), h_tab0.ravel(), pack_values(build().params())])
    theta0 = _jitter(theta0, seed)
    return gradient_check(loss_fn, theta0, h)


def _proto_loss_check(lambda_sep: float, lambda_ctr: float, seed: int, h: float) -> float:
    batch, width, img_w, tab_w, slots = 6, 5, 4, 3, 2
    rng = np.random.default_rng(seed)
    z0 = rng.standard_normal((batch, width))
    zi0 = rng.standard_normal((batch, img_w))
    zt0 = rng.standard_normal((batch, tab_w))
    a0 = rng.uniform(0.2, 0.8, batch)
    pf0 = unit_rows(rng.standard_normal((3 * slots, width)))
    pi0 = unit_rows(rng.standard_normal((3 * slots, img_w)))
    pt0 = unit_rows(rng.standard_normal((3 * slots, tab_w)))
    labels = np.array([0, 1, 2, 0, 1, 2])
    blocks = [z0, zi0, zt0, a0, pf0, pi0, pt0]
    sizes = [b.size for b in blocks]

    def loss_fn(theta: np.ndarray):
        parts = []
        offset = 0
        for block, size in zip(blocks, sizes):
            parts.append(theta[offset : offset + size].reshape(block.shape))
            offset += size
        z, zi, zt, a, pf, pi, pt = parts
        bank = PrototypeBank(slots, tau_sim=0.3, img_width=img_w, tab_width=tab_w,
                             fused_width=width)
        bank.vec_fused.value[...] = pf
        bank.vec_img[...] = pi
        bank.vec_tab[...] = pt
        terms, grads = proto_loss(z, zi, zt, a, labels, bank, margin=0.2,
                                  lambda_sep=lambda_sep, lambda_ctr=lambda_ctr)
        grad = np.concatenate([
            grads.z_fused.ravel(), grads.z_img.ravel(), grads.z_tab.ravel(),
            grads.alpha.ravel(), grads.p_fused.ravel(), grads.p_img.ravel(),
            grads.p_tab.ravel(),
        ])
        return terms["proto_total"], grad

    theta0 = np.concatenate([b.ravel() for b in blocks])
    return gradient_check(loss_fn, theta0, h)


def _model_total_check(seed: int, h: float, *, no_cross_attention: bool = False,
                       lambda_reg: float = 0.3, lambda_proto: float = 1.0) -> float:
    dims = ModelDims(image_hidden=8, image_width=6, tabular_width=5, img_proto_width=4)
    emb_dim, batch, slots = 7, 6, 2
    rng = np.random.default_rng(seed)
    emb = rng.standard_normal((batch, emb_dim))
    clin = rng.standard_normal((batch, 11))
    labels = np.array([0, 1, 2, 0, 1, 2])
    t = rng.standard_normal(batch)
    bank_fused = unit_rows(rng.standard_normal((3 * slots, dims.image_width)))
    bank_img = unit_rows(rng.standard_normal((3 * slots, dims.img_proto_width)))
    bank_tab = unit_rows(rng.standard_normal((3 * slots, dims.tabular_width)))

    def build():
        model = ProtoMedXModel(
            emb_dim, np.random.default_rng(seed + 1), slots_per_class=slots,
            tau_sim=0.3, no_cross_attention=no_cross_attention, dims=dims,
        )
        model.bank.vec_fused.value[...] = bank_fused
        model.bank.vec_img[...] = bank_img
        model.bank.vec_tab[...] = bank_tab
        return model

    def loss_fn(theta: np.ndarray):
        model = build()
        params = model.all_params()
        unpack_values(params, theta)
        for p in params:
            p.zero_grad()
        terms = model.loss_and_grads(
            emb, clin, labels, t, lambda_reg, lambda_proto,
            margin=0.2, lambda_sep=0.5, lambda_ctr=0.1,
            rng=np.random.default_rng(seed + 3),
        )
        return terms.total, pack_grads(params)

    theta0 = _jitter(pack_values(build().all_params()), seed)
    return gradient_check(loss_fn, theta0, h)


def _layer_builders(seed: int) -> dict[str, tuple[Callable[[], LayerStack], tuple]]:
    def dense():
        return LayerStack([Dense(5, 4, np.random.default_rng(seed + 1))])

    def relu():
        return LayerStack([Dense(5, 4, np.random.default_rng(seed + 1)), ReLU()])

    def sig():
        return LayerStack([Dense(5, 4, np.random.default_rng(seed + 1)), Sigmoid()])

    def dropout():
        return LayerStack([Dense(5, 4, np.random.default_rng(seed + 1)), Dropout(0.4)])

    def norm_batch():
        return LayerStack([Dense(5, 4, np.random.default_rng(seed + 1)), BatchNorm(4)])

    def norm_plain():
        return LayerStack([
            Dense(5, 4, np.random.default_rng(seed + 1)),
            BatchNorm(4, mode="plain"),
        ])

    def residual():
        r = np.random.default_rng(seed + 1)
        return LayerStack([
            Dense(5, 4, r),
            Residual([Dense(4, 4, r), ReLU(), Dropout(0.3)]),
        ])

    def image_pattern():
        # structurally identical to the image encoder at reduced widths
        r = np.random.default_rng(seed + 1)
        return LayerStack([
            Dense(7, 6, r), BatchNorm(6), ReLU(), Dropout(0.3),
            Dense(6, 5, r), BatchNorm(5), ReLU(), Dropout(0.3),
        ])

    def tabular_pattern():
        r = np.random.default_rng(seed + 1)
        return LayerStack([
            Dense(11, 6, r), ReLU(), Dropout(0.1),
            Residual([Dense(6, 6, r), ReLU(), Dropout(0.1)]),
        ])

    return {
        "layer:dense": (dense, (4, 5)),
        "layer:relu": (relu, (4, 5)),
        "layer:sigmoid": (sig, (4, 5)),
        "layer:dropout": (dropout, (4, 5)),
        "layer:batchnorm": (norm_batch, (4, 5)),
        "layer:batchnorm_plain": (norm_plain, (4, 5)),
        "layer:residual": (residual, (4, 5)),
        "stack:image_pattern": (image_pattern, (6, 7)),
        "stack:tabular_pattern": (tabular_pattern, (6, 11)),
    }


def run_battery(seeds=(0, 1, 2), h: float = DEFAULT_H,
                tol: float = DEFAULT_TOL) -> list[CheckResult]:
    """Run every gradient check across the given seeds."""
    results: list[CheckResult] = []
    for seed in seeds:
        for name, (build, shape) in _layer_builders(seed).items():
            err = _stack_check(build, shape, seed, h)
            results.append(CheckResult(name, seed, err, tol))
        results.append(CheckResult("block:fusion_attention", seed,
                                   _fusion_check(False, seed, h), tol))
        results.append(CheckResult("block:fusion_concat", seed,
                                   _fusion_check(True, seed, h), tol))
        results.append(CheckResult("block:gate", seed, _gate_check(seed, h), tol))
        results.append(CheckResult("loss:proto_class", seed,
                                   _proto_loss_check(0.0, 0.0, seed, h), tol))
        results.append(CheckResult("loss:proto_sep", seed,
                                   _proto_loss_check(1.0, 0.0, seed, h), tol))
        results.append(CheckResult("loss:proto_center", seed,
                                   _proto_loss_check(0.0, 1.0, seed, h), tol))
        results.append(CheckResult("loss:proto_combined", seed,
                                   _proto_loss_check(0.5, 0.1, seed, h), tol))
        results.append(CheckResult("objective:multitask", seed,
                                   _model_total_check(seed, h), tol))
        results.append(CheckResult("objective:cls_only", seed,
                                   _model_total_check(seed, h, lambda_reg=0.0,
                                                      lambda_proto=0.0), tol))
        results.append(CheckResult("objective:concat_fusion", seed,
                                   _model_total_check(seed, h,
                                                      no_cross_attention=True), tol))
    return results


def format_results(results: list[CheckResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status} {r.name} seed={r.seed} "
                     f"max_rel_err={r.max_rel_error:.3e} tol={r.tol:.0e}")
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} gradient checks passed")
    return "\n".join(lines)
