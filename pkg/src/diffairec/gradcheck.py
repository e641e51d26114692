"""Finite-difference suites for every layer and for the composed predictor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .diffusion import masked_loss
from .model import VARIANTS, DifFaiRec, ModelConfig

LAYER_TOL = 1e-6
MODEL_TOL = 1e-4


@dataclass
class CheckRow:
    suite: str
    block: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return bool(self.error < self.tol)


def _projection(rng, shape):
    """Random linear read-out so the scalar loss depends on every output."""
    return rng.standard_normal(shape)


def linear_suite(rng) -> dict[str, float]:
    W, b = nn.init_linear(rng, 5, 4)
    p = {"W": W, "b": rng.standard_normal(4), "x": rng.standard_normal((3, 5))}
    w = _projection(rng, (3, 4))

    def fn(p):
        y, cache = nn.linear_forward(p["W"], p["b"], p["x"])
        dW, db, dx = nn.linear_backward(p["W"], cache, w)
        return float(np.sum(w * y)), {"W": dW, "b": db, "x": dx}

    return nn.grad_check(fn, p, probes=10, rng=rng)


def silu_suite(rng) -> dict[str, float]:
    p = {"x": 2.0 * rng.standard_normal((4, 6))}
    w = _projection(rng, (4, 6))

    def fn(p):
        return float(np.sum(w * nn.silu(p["x"]))), {"x": w * nn.silu_grad(p["x"])}

    return nn.grad_check(fn, p, probes=10, rng=rng)


def mlp_suite(rng) -> dict[str, float]:
    p: nn.Params = {}
    nn.init_mlp(p, rng, "mlp", [5, 7, 6, 3])
    for k in p:
        if k.endswith(".b"):
            p[k] = 0.1 * rng.standard_normal(p[k].shape)
    p["x"] = rng.standard_normal((4, 5))
    w = _projection(rng, (4, 3))

    def fn(p):
        y, caches = nn.mlp_forward(p, "mlp", p["x"])
        grads: nn.Params = {}
        grads["x"] = nn.mlp_backward(p, "mlp", caches, w, grads)
        return float(np.sum(w * y)), grads

    return nn.grad_check(fn, p, probes=10, rng=rng)


def attention_suite(rng) -> dict[str, float]:
    shape = nn.AttentionShape(tokens=3, width=4)
    p: nn.Params = {}
    nn.init_attention(p, rng, "attn", shape, 5, 6, 6)
    p["q"] = rng.standard_normal((2, 5))
    p["k"] = rng.standard_normal((2, 6))
    p["v"] = rng.standard_normal((2, 6))
    w = _projection(rng, (2, shape.size))

    def fn(p):
        out, cache = nn.attention_forward(p, "attn", shape, p["q"], p["k"], p["v"])
        grads: nn.Params = {}
        grads["q"], grads["k"], grads["v"] = nn.attention_backward(p, "attn", shape, cache, w, grads)
        return float(np.sum(w * out)), grads

    return nn.grad_check(fn, p, probes=10, rng=rng)


def small_model_config(variant: str = "base", seed: int = 0) -> ModelConfig:
    return ModelConfig(m=12, T=5, time_dim=6, mlp1_hidden=[16], mlp2_hidden=[10], mlp3_hidden=[14],
                       feature_dim=12, cond_dim=8, attn_tokens=2, attn_width=4, variant=variant, seed=seed)


def model_suite(variant: str, rng, probes: int = 20) -> dict[str, float]:
    """Masked noise-prediction loss of the full predictor, every trainable block."""
    model = DifFaiRec(small_model_config(variant))
    B, m = 4, model.config.m
    x_t = rng.standard_normal((B, m))
    y = rng.standard_normal((B, m))
    t = rng.integers(1, model.config.T + 1, size=B)
    eps = rng.standard_normal((B, m))
    mask = (rng.random((B, m)) < 0.6).astype(np.float64)

    def fn(params):
        model.params = params
        out, cache = model.forward(x_t, t, y)
        loss, d_out = masked_loss(eps, out, mask)
        return loss, model.backward(cache, d_out)

    return nn.grad_check(fn, model.params, probes=probes, rng=rng)


LAYER_SUITES = {"linear": linear_suite, "silu": silu_suite, "mlp": mlp_suite, "attention": attention_suite}


def run_all(seed: int = 0, probes: int = 20) -> list[CheckRow]:
    rows = []
    for name, suite in LAYER_SUITES.items():
        for block, err in suite(np.random.default_rng([seed, len(rows)])).items():
            rows.append(CheckRow(name, block, err, LAYER_TOL))
    for variant in VARIANTS:
        errs = model_suite(variant, np.random.default_rng([seed, 100 + len(rows)]), probes)
        rows.extend(CheckRow(f"model[{variant}]", block, err, MODEL_TOL) for block, err in errs.items())
    return rows


def format_rows(rows: list[CheckRow]) -> str:
    width = max(len(f"{r.suite}/{r.block}") for r in rows)
    lines = [f"{r.suite + '/' + r.block:<{width}}  {r.error:.3e}  (tol {r.tol:.0e})  {'ok' if r.ok else 'FAIL'}"
             for r in rows]
    return "\n".join(lines) + "\n"
