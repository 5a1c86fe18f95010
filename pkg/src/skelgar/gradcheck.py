"""Finite-difference verification of every layer and of a tiny full model.

Each layer is checked through a scalar probe loss ``sum(out * R)`` with a
fixed random ``R``, differentiating with respect to the layer input and its
parameters.  The full model is checked through ``total_loss``.

Check points use small random biases: with zero biases some pre-activations
are exactly zero (e.g. a "same"-padded window whose inputs were all gated off),
which puts the check on a ReLU kink where no derivative exists.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .model import GroupActivityNet, ModelConfig, gate_signature, init_model, total_loss

TOLERANCE = 1e-4

TINY = ModelConfig(K=3, T=4, N=5, branch=(4, 4, 4, 4), temporal_kernel=3, fusion_hidden=8, F=8,
                   A=3, G=3, lam=0.7)


@dataclass
class LayerCheck:
    name: str
    max_error: float
    n_checked: int
    n_refined: int

    @property
    def ok(self):
        return self.max_error < TOLERANCE


def _probe(forward, backward, inputs, rng, signature=None, sign_bug=False):
    """Grad-check ``forward(**inputs) -> (out, cache)`` via loss = sum(out * R)."""
    out, _ = forward(**inputs)
    r = rng.normal(size=out.shape)

    def fn(p):
        o, cache = forward(**p)
        grads = backward(r, cache)
        if sign_bug:
            grads = {k: -v for k, v in grads.items()}
        return float(np.sum(o * r)), grads

    def loss_fn(p):
        o, cache = forward(**p)
        return float(np.sum(o * r)), (signature(cache) if signature else None)

    return nn.grad_check(fn, inputs, loss_fn=loss_fn)


def _sig(mask):
    return np.packbits(mask).tobytes()


def layer_checks(seed=0, sign_bug_layer=None):
    """Grad-check each layer kind; returns a list of LayerCheck."""
    rng = np.random.default_rng(seed)
    results = []

    def add(name, res):
        results.append(LayerCheck(name, res.max_error, res.n_checked, res.n_refined))

    for label, stride, padding, shape, k in [("conv2d_valid", 1, "valid", (2, 5, 4, 3), (3, 2, 3, 4)),
                                             ("conv2d_same", 1, "same", (2, 5, 4, 3), (3, 1, 3, 2)),
                                             ("conv2d_stride2_same", 2, "same", (2, 5, 5, 2), (3, 3, 2, 3))]:
        inputs = {"x": rng.normal(size=shape), "w": rng.normal(size=k), "b": rng.normal(size=k[-1])}

        def fwd(x, w, b, _s=stride, _p=padding):
            return nn.conv2d_forward(x, w, b, stride=_s, padding=_p)

        def bwd(d, cache):
            dx, dw, db = nn.conv2d_backward(d, cache)
            return {"x": dx, "w": dw, "b": db}
        add(label, _probe(fwd, bwd, inputs, rng, sign_bug=sign_bug_layer == label))

    def lin_b(d, cache):
        dx, dw, db = nn.linear_backward(d, cache)
        return {"x": dx, "w": dw, "b": db}
    add("linear", _probe(nn.linear_forward, lin_b,
                         {"x": rng.normal(size=(4, 5)), "w": rng.normal(size=(5, 3)), "b": rng.normal(size=3)},
                         rng, sign_bug=sign_bug_layer == "linear"))

    add("relu", _probe(nn.relu_forward, lambda d, c: {"x": nn.relu_backward(d, c)},
                       {"x": rng.normal(size=(3, 7))}, rng, signature=_sig,
                       sign_bug=sign_bug_layer == "relu"))

    mask = np.array([[True, True, False, True], [False, True, True, False]])
    add("masked_max", _probe(lambda h: nn.masked_max_forward(h, mask),
                             lambda d, c: {"h": nn.masked_max_backward(d, c)},
                             {"h": rng.normal(size=(2, 4, 5))}, rng,
                             signature=lambda c: np.ascontiguousarray(c[1]).tobytes(),
                             sign_bug=sign_bug_layer == "masked_max"))

    target = np.array([0, 2, 1, 2])

    def ce_f(logits):
        loss, grad = nn.softmax_cross_entropy(logits, target)
        return loss, grad

    add("softmax_cross_entropy", _probe(ce_f, lambda d, g: {"logits": d[:, None] * g},
                                        {"logits": rng.normal(size=(4, 3))}, rng,
                                        sign_bug=sign_bug_layer == "softmax_cross_entropy"))
    return results


def model_check(cfg=TINY, seed=0, constant=False, sign_bug=False, max_checks=10_000):
    """Grad-check the full model on a random batch of two clips (float64)."""
    rng = np.random.default_rng([seed, 17])
    params = init_model(cfg, seed, dtype=np.float64, head_std=None)
    if constant:
        params = {k: np.zeros_like(v) for k, v in params.items()}
    else:
        params = {k: (v + rng.normal(0, 0.1, v.shape) if k.endswith(".b") else v)
                  for k, v in params.items()}
    x = rng.normal(size=(2, 3, cfg.K, cfg.T, cfg.N, 3))
    mask = np.ones((2, cfg.K), bool)
    mask[0, -1] = False
    yg = rng.integers(cfg.G, size=2)
    yi = np.where(mask, rng.integers(cfg.A, size=(2, cfg.K)), -1)
    if constant:
        # every output is constant, so only the head biases have a gradient;
        # one shared target keeps each of those entries away from exactly zero
        yg, yi = np.zeros_like(yg), np.where(mask, 0, -1)
    net = GroupActivityNet(cfg)

    def fn(p):
        out = net.forward(p, x, mask)
        parts, di, dg = total_loss(out, yg, yi, cfg.lam, mask)
        grads = net.backward(p, out, di, dg)
        if sign_bug:
            grads = {k: -v for k, v in grads.items()}
        return parts.total, grads

    def loss_fn(p):
        out = net.forward(p, x, mask)
        return total_loss(out, yg, yi, cfg.lam, mask)[0].total, gate_signature(out)

    res = nn.grad_check(fn, params, max_checks=max_checks, seed=seed, loss_fn=loss_fn)
    return LayerCheck("full_model", res.max_error, res.n_checked, res.n_refined), res.per_param


def run_all(seed=0, constant=False, sign_bug_layer=None):
    """Every layer check plus the full model; returns a list of LayerCheck."""
    checks = [] if constant else layer_checks(seed, sign_bug_layer)
    full, _ = model_check(TINY, seed, constant=constant, sign_bug=sign_bug_layer == "full_model")
    return checks + [full]
