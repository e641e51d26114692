"""Small dense neural kernel in numpy: linear layers, MLPs, token attention, Adam.

Everything is float64 and works on either a single vector ``(dim,)`` or a batch
``(batch, dim)``. Parameters live in a flat ``dict[str, ndarray]`` so that the
optimizer, the checkpoint writer and the gradient checker can treat every
model the same way. Backward functions accumulate into a ``grads`` dict with
the same keys.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Params = dict[str, np.ndarray]


class NonFiniteError(FloatingPointError):
    pass


def _check_dim(x: np.ndarray, expected: int, what: str) -> None:
    if x.shape[-1] != expected:
        raise ValueError(f"{what}: expected last dimension {expected}, got {x.shape[-1]}")


def init_linear(rng: np.random.Generator, n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray]:
    """Fan-in scaled uniform weights (He-uniform bound) and zero bias."""
    bound = np.sqrt(6.0 / n_in)
    W = rng.uniform(-bound, bound, size=(n_out, n_in))
    return W, np.zeros(n_out)


# ----------------------------------------------------------------------------
# linear


def linear_forward(W: np.ndarray, b: np.ndarray, x: np.ndarray):
    _check_dim(x, W.shape[1], "linear_forward")
    return x @ W.T + b, x


def linear_backward(W: np.ndarray, cache: np.ndarray, dy: np.ndarray):
    """Returns (dW, db, dx) for ``y = W x + b``; batch gradients are summed."""
    x = cache
    _check_dim(dy, W.shape[0], "linear_backward")
    if x.ndim == 1:
        dW = np.outer(dy, x)
        db = dy.copy()
    else:
        dW = dy.T @ x
        db = dy.sum(axis=0)
    return dW, db, dy @ W


# ----------------------------------------------------------------------------
# activation


def silu(x: np.ndarray) -> np.ndarray:
    return x * _sigmoid(x)


def silu_grad(x: np.ndarray) -> np.ndarray:
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: no overflow for any finite x, one ufunc pass
    return 0.5 + 0.5 * np.tanh(0.5 * np.asarray(x, dtype=np.float64))


# ----------------------------------------------------------------------------
# MLP


def init_mlp(params: Params, rng: np.random.Generator, prefix: str, widths: list[int]) -> None:
    for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
        params[f"{prefix}.{i}.W"], params[f"{prefix}.{i}.b"] = init_linear(rng, n_in, n_out)


def mlp_depth(params: Params, prefix: str) -> int:
    n = 0
    while f"{prefix}.{n}.W" in params:
        n += 1
    return n


def mlp_forward(params: Params, prefix: str, x: np.ndarray):
    """Linear layers with SiLU in between and an identity output."""
    depth = mlp_depth(params, prefix)
    if depth == 0:
        raise KeyError(f"no MLP named {prefix!r}")
    caches = []
    h = x
    for i in range(depth):
        h, lin_cache = linear_forward(params[f"{prefix}.{i}.W"], params[f"{prefix}.{i}.b"], h)
        pre = None
        if i < depth - 1:
            pre = h
            h = silu(h)
        caches.append((lin_cache, pre))
    return h, caches


def mlp_backward(params: Params, prefix: str, caches, dy: np.ndarray, grads: Params) -> np.ndarray:
    dh = dy
    for i in reversed(range(len(caches))):
        lin_cache, pre = caches[i]
        if pre is not None:
            dh = dh * silu_grad(pre)
        W = params[f"{prefix}.{i}.W"]
        dW, db, dh = linear_backward(W, lin_cache, dh)
        _accumulate(grads, f"{prefix}.{i}.W", dW)
        _accumulate(grads, f"{prefix}.{i}.b", db)
    return dh


def _accumulate(grads: Params, name: str, g: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


# ----------------------------------------------------------------------------
# attention


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any():
        raise NonFiniteError("softmax: NaN in input")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class AttentionShape:
    tokens: int = 4
    width: int = 64

    @property
    def size(self) -> int:
        return self.tokens * self.width


def attention_forward(params: Params, prefix: str, shape: AttentionShape,
                      query_in: np.ndarray, key_in: np.ndarray, value_in: np.ndarray):
    """Single-head scaled dot-product attention over ``shape.tokens`` tokens.

    Each projection emits ``tokens * width`` values which are reshaped into a
    (tokens, width) block; the attended block is flattened back.
    """
    Wq, Wk, Wv = params[f"{prefix}.Wq"], params[f"{prefix}.Wk"], params[f"{prefix}.Wv"]
    _check_dim(query_in, Wq.shape[1], "attention query")
    _check_dim(key_in, Wk.shape[1], "attention key")
    _check_dim(value_in, Wv.shape[1], "attention value")
    single = query_in.ndim == 1
    qi, ki, vi = (np.atleast_2d(a) for a in (query_in, key_in, value_in))
    L, d = shape.tokens, shape.width
    B = qi.shape[0]
    q = (qi @ Wq.T).reshape(B, L, d)
    k = (ki @ Wk.T).reshape(B, L, d)
    v = (vi @ Wv.T).reshape(B, L, d)
    scores = np.einsum("bid,bjd->bij", q, k) / np.sqrt(d)
    probs = softmax(scores, axis=-1)
    out = np.einsum("bij,bjd->bid", probs, v).reshape(B, L * d)
    cache = (qi, ki, vi, q, k, v, probs, single)
    return (out[0] if single else out), cache


def attention_backward(params: Params, prefix: str, shape: AttentionShape, cache,
                       dout: np.ndarray, grads: Params):
    """Returns (d_query_in, d_key_in, d_value_in); projection grads go to ``grads``."""
    qi, ki, vi, q, k, v, probs, single = cache
    L, d = shape.tokens, shape.width
    B = q.shape[0]
    dO = np.atleast_2d(dout).reshape(B, L, d)
    dprobs = np.einsum("bid,bjd->bij", dO, v)
    dv = np.einsum("bij,bid->bjd", probs, dO)
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    dscores /= np.sqrt(d)
    dq = np.einsum("bij,bjd->bid", dscores, k).reshape(B, L * d)
    dk = np.einsum("bij,bid->bjd", dscores, q).reshape(B, L * d)
    dv = dv.reshape(B, L * d)
    Wq, Wk, Wv = params[f"{prefix}.Wq"], params[f"{prefix}.Wk"], params[f"{prefix}.Wv"]
    _accumulate(grads, f"{prefix}.Wq", dq.T @ qi)
    _accumulate(grads, f"{prefix}.Wk", dk.T @ ki)
    _accumulate(grads, f"{prefix}.Wv", dv.T @ vi)
    dqi, dki, dvi = dq @ Wq, dk @ Wk, dv @ Wv
    if single:
        return dqi[0], dki[0], dvi[0]
    return dqi, dki, dvi


def init_attention(params: Params, rng: np.random.Generator, prefix: str, shape: AttentionShape,
                   query_dim: int, key_dim: int, value_dim: int) -> None:
    params[f"{prefix}.Wq"] = init_linear(rng, query_dim, shape.size)[0]
    params[f"{prefix}.Wk"] = init_linear(rng, key_dim, shape.size)[0]
    params[f"{prefix}.Wv"] = init_linear(rng, value_dim, shape.size)[0]


# ----------------------------------------------------------------------------
# Adam


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    def step(self, params: Params, grads: Params) -> None:
        """One bias-corrected update, in place. Blocks without a gradient are skipped."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient in parameter block {name!r}")
            if g.shape != params[name].shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            step = m * (self.lr / c1)
            step /= denom
            params[name] -= step


# ----------------------------------------------------------------------------
# finite-difference checking


def grad_check(fn: Callable[[Params], tuple[float, Params]], params: Params, probes: int = 20,
               h: float = 1e-5, rng: np.random.Generator | None = None,
               blocks: list[str] | None = None, floor: float = 1e-8) -> dict[str, float]:
    """Compare analytic gradients against central differences.

    ``fn(params)`` must return ``(loss, grads)``. For every block, ``probes``
    random coordinates are perturbed by ``±h``. Returns the maximum relative
    error per block, ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    _, grads = fn(params)
    names = blocks if blocks is not None else list(params)
    report: dict[str, float] = {}
    for name in names:
        p = params[name]
        analytic = grads.get(name, np.zeros_like(p))
        worst = 0.0
        for _ in range(probes):
            idx = tuple(int(rng.integers(s)) for s in p.shape)
            old = p[idx]
            p[idx] = old + h
            fp, _ = fn(params)
            p[idx] = old - h
            fm, _ = fn(params)
            p[idx] = old
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic[idx])
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
        report[name] = worst
    return report
