"""Finite-difference gradient checks for every differentiable op and the full model."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .losses import LossWeights, aux_consistency_loss, focal_loss, regression_loss, total_loss
from .model import HybridNet, ModelConfig
from .tensorcore import Rng, Tensor, grad_check
from .tensorcore import functional as F

DOUBLE_TOL = 1e-4
SINGLE_TOL = 1e-2


@dataclass
class CheckRow:
    name: str
    dtype: str
    max_rel_error: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


Case = tuple[str, Callable[..., Tensor], list[tuple[int, ...]], dict]


def _cases() -> list[Case]:
    """(name, op, input shapes, options). Options: positive inputs, a fixed Rng, etc."""
    pos = {"positive": True}

    def bn(x, g, b):
        c = x.shape[1]
        return F.batch_norm(x, g, b, np.zeros(c), np.ones(c), training=True)

    def bn_eval(x, g, b):
        c = x.shape[1]
        return F.batch_norm(x, g, b, np.full(c, 0.1), np.full(c, 2.0), training=False)

    return [
        ("add", F.add, [(3, 4), (4,)], {}),
        ("sub", F.sub, [(3, 4), (3, 1)], {}),
        ("mul", F.mul, [(3, 4), (1, 4)], {}),
        ("div", F.div, [(3, 4), (3, 4)], pos),
        ("neg", F.neg, [(5,)], {}),
        ("power", lambda a: F.power(a, 2.5), [(3, 4)], pos),
        ("exp", F.exp, [(3, 4)], {}),
        ("log", F.log, [(3, 4)], pos),
        ("sqrt", F.sqrt, [(3, 4)], pos),
        ("clip", lambda a: F.clip(a, -0.5, 0.5), [(4, 5)], {"avoid": (-0.5, 0.5)}),
        ("sigmoid", F.sigmoid, [(3, 4)], {}),
        ("gelu", F.gelu, [(3, 4)], {}),
        ("smooth_l1", lambda a: F.smooth_l1(a, 1.0), [(4, 5)], {"scale": 2.0, "avoid": (-1.0, 1.0)}),
        ("sum", lambda a: F.sum(a, axis=1, keepdims=True), [(3, 4, 2)], {}),
        ("mean", lambda a: F.mean(a, axis=(0, 2)), [(3, 4, 2)], {}),
        ("reshape", lambda a: F.reshape(a, (4, 6)), [(2, 3, 4)], {}),
        ("flatten", F.flatten, [(2, 3, 4)], {}),
        ("transpose", lambda a: F.transpose(a, (2, 0, 1)), [(2, 3, 4)], {}),
        ("swap_last", F.swap_last, [(2, 3, 4)], {}),
        ("getitem_slice", lambda a: F.getitem(a, (slice(None), slice(1, 3))), [(3, 4)], {}),
        ("getitem_fancy", lambda a: F.getitem(a, np.array([0, 2, 2, 1])), [(3, 4)], {}),
        ("concat", lambda a, b: F.concat([a, b], axis=1), [(2, 3), (2, 5)], {}),
        ("matmul", F.matmul, [(2, 3, 4), (4, 5)], {}),
        ("linear", F.linear, [(3, 4), (5, 4), (5,)], {}),
        ("conv2d", lambda x, w, b: F.conv2d(x, w, b, 1, 1), [(2, 3, 6, 6), (4, 3, 3, 3), (4,)], {}),
        ("conv2d_stride2", lambda x, w, b: F.conv2d(x, w, b, 2, 1), [(2, 3, 7, 7), (4, 3, 3, 3), (4,)], {}),
        ("conv2d_patch", lambda x, w: F.conv2d(x, w, None, 4, 0), [(1, 2, 8, 8), (3, 2, 4, 4)], {}),
        ("softmax", lambda a: F.softmax(a, axis=-1), [(3, 5)], {}),
        ("layer_norm", F.layer_norm, [(3, 6), (6,), (6,)], {}),
        ("batch_norm_train", bn, [(4, 3, 2, 2), (3,), (3,)], {}),
        ("batch_norm_eval", bn_eval, [(4, 3, 2, 2), (3,), (3,)], {}),
        ("dropout", lambda a: F.dropout(a, 0.3, Rng(5), True), [(4, 6)], {}),
        ("global_avg_pool", F.global_avg_pool, [(2, 3, 4, 4)], {}),
        ("attention", F.attention, [(1, 2, 4, 3), (1, 2, 4, 3), (1, 2, 4, 3)], {}),
        ("attention_weights", F.attention_weights, [(1, 2, 4, 3), (1, 2, 4, 3)], {}),
    ]


def _inputs(shapes, opts, rng: np.random.Generator, dtype) -> list[Tensor]:
    out = []
    for shape in shapes:
        v = rng.normal(0.0, opts.get("scale", 1.0), shape)
        if opts.get("positive"):
            v = np.abs(v) + 0.5
        if "avoid" in opts:
            # keep probe points away from kinks
            for k in opts["avoid"]:
                near = np.abs(v - k) < 0.05
                v[near] += 0.1
        out.append(Tensor(v.astype(dtype), requires_grad=True))
    return out


def _scalarize(out: Tensor, weights: np.ndarray) -> Tensor:
    return F.sum(out * Tensor(weights))


def check_ops(dtype=np.float64, seed: int = 0) -> list[CheckRow]:
    """Gradient check of each primitive op, projected to a scalar by fixed random weights."""
    dtype = np.dtype(dtype)
    single = dtype == np.float32
    tol = SINGLE_TOL if single else DOUBLE_TOL
    eps = 1e-3 if single else 1e-6
    rows = []
    for i, (name, op, shapes, opts) in enumerate(_cases()):
        rng = np.random.default_rng(seed * 1000 + i)
        args = _inputs(shapes, opts, rng, dtype)
        probe = op(*args)
        weights = rng.normal(0.0, 1.0, probe.shape).astype(dtype)
        t0 = time.perf_counter()
        res = grad_check(lambda: _scalarize(op(*args), weights), args, eps=eps, seed=seed, tol=tol)
        rows.append(CheckRow(name, dtype.name, res.max_rel_error, tol, time.perf_counter() - t0))
    rows += check_losses(dtype, seed)
    return rows


def check_losses(dtype=np.float64, seed: int = 0) -> list[CheckRow]:
    dtype = np.dtype(dtype)
    single = dtype == np.float32
    tol = SINGLE_TOL if single else DOUBLE_TOL
    eps = 1e-3 if single else 1e-6
    rng = np.random.default_rng(seed + 77)
    logits = Tensor(rng.normal(0, 1, (6, 3)).astype(dtype), requires_grad=True)
    labels = rng.integers(0, 3, 6)
    pred = Tensor(rng.normal(0, 1, (6, 4)).astype(dtype), requires_grad=True)
    target = rng.normal(0, 1.5, (6, 4)).astype(dtype)
    feats = [Tensor(rng.normal(0, 1, (6, 5)).astype(dtype), requires_grad=True) for _ in range(3)]
    cases = [
        ("focal_loss", lambda: focal_loss(F.softmax(logits, -1), labels, (0.5, 1.0, 1.5), 2.0), [logits]),
        ("regression_loss", lambda: regression_loss(pred, target, 0.5), [pred]),
        ("aux_consistency_loss", lambda: aux_consistency_loss(*feats), feats),
    ]
    rows = []
    for name, f, params in cases:
        t0 = time.perf_counter()
        res = grad_check(f, params, eps=eps, seed=seed, tol=tol)
        rows.append(CheckRow(name, dtype.name, res.max_rel_error, tol, time.perf_counter() - t0))
    return rows


def check_model(seed: int = 0, batch: int = 4, coords: int = 4, cfg: ModelConfig | None = None) -> CheckRow:
    """Full network plus total loss in double precision, train mode with a fixed dropout mask."""
    model = HybridNet(cfg or ModelConfig(), seed=seed, dtype=np.float64)
    model.train()
    rng = np.random.default_rng(seed + 1)
    x = rng.normal(0, 1, (batch, 4, 28, 28))
    labels = np.arange(batch) % 3
    markers = rng.normal(0, 1, (batch, 4))
    weights = LossWeights(alpha=(0.8, 1.0, 1.2))

    def f():
        model.reseed_dropout()
        return total_loss(model(x), labels, markers, weights).total

    params = dict(model.named_parameters())
    t0 = time.perf_counter()
    res = grad_check(f, params, eps=1e-5, max_coords=coords, seed=seed, tol=DOUBLE_TOL)
    return CheckRow("model+total_loss", "float64", res.max_rel_error, DOUBLE_TOL, time.perf_counter() - t0)


def run_all(seed: int = 0, include_model: bool = True) -> list[CheckRow]:
    rows = check_ops(np.float64, seed) + check_ops(np.float32, seed)
    if include_model:
        rows.append(check_model(seed))
    return rows
