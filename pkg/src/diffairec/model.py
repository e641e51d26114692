"""Conditional noise predictor.

    eps_hat = MLP3( Atten( query = MLP2(y), key = value = MLP1([x_t, time(t)]) ) )

``y`` is the user's counterfactual group vector (the other group's vector).
The step enters through a learned (T x time_dim) table indexed by t, which is
the one-hot indicator multiplied by the table.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .nn import AttentionShape, Params

VARIANTS = ("base", "no_encoder", "no_counterfactual")


@dataclass
class ModelConfig:
    m: int
    T: int
    time_dim: int = 64
    mlp1_hidden: list[int] = field(default_factory=lambda: [512])
    mlp2_hidden: list[int] = field(default_factory=lambda: [256])
    mlp3_hidden: list[int] = field(default_factory=lambda: [512])
    feature_dim: int = 256
    cond_dim: int = 256
    attn_tokens: int = 4
    attn_width: int = 64
    variant: str = "base"
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown model variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("m", "T", "time_dim", "feature_dim", "cond_dim", "attn_tokens", "attn_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def attention(self) -> AttentionShape:
        return AttentionShape(self.attn_tokens, self.attn_width)

    def to_dict(self) -> dict:
        return asdict(self)


class DifFaiRec:
    def __init__(self, config: ModelConfig, params: Params | None = None,
                 frozen: Params | None = None):
        self.config = config
        if params is None:
            params, frozen = self._init_params(config)
        self.params = params
        self.frozen = frozen or {}

    @staticmethod
    def _init_params(c: ModelConfig) -> tuple[Params, Params]:
        rng = np.random.default_rng(c.seed)
        p: Params = {}
        frozen: Params = {}
        bound = np.sqrt(6.0 / c.T)
        p["time.E"] = rng.uniform(-bound, bound, size=(c.T, c.time_dim))
        nn.init_mlp(p, rng, "mlp1", [c.m + c.time_dim, *c.mlp1_hidden, c.feature_dim])
        if c.variant == "no_counterfactual":
            nn.init_mlp(p, rng, "mlp3", [c.feature_dim, *c.mlp3_hidden, c.m])
            return p, frozen
        if c.variant == "base":
            nn.init_mlp(p, rng, "mlp2", [c.m, *c.mlp2_hidden, c.cond_dim])
        else:
            frozen["resize"] = np.random.default_rng([c.seed, 1]).standard_normal((c.cond_dim, c.m)) / np.sqrt(c.m)
        nn.init_attention(p, rng, "attn", c.attention, c.cond_dim, c.feature_dim, c.feature_dim)
        nn.init_mlp(p, rng, "mlp3", [c.attention.size, *c.mlp3_hidden, c.m])
        return p, frozen

    # -- pieces ---------------------------------------------------------------

    def time_embedding(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.config.T):
            raise ValueError(f"step out of range 1..{self.config.T}")
        return self.params["time.E"][t - 1]

    def condition_encode(self, y: np.ndarray):
        if y.shape[-1] != self.config.m:
            raise ValueError(f"group vector has length {y.shape[-1]}, expected {self.config.m}")
        if self.config.variant == "no_encoder":
            return y @ self.frozen["resize"].T, None
        return nn.mlp_forward(self.params, "mlp2", y)

    def counterfactual_map(self, z: np.ndarray, y: np.ndarray):
        g, enc_cache = self.condition_encode(y)
        out, att_cache = nn.attention_forward(self.params, "attn", self.config.attention, g, z, z)
        return out, (enc_cache, att_cache)

    # -- full predictor -------------------------------------------------------

    def forward(self, x_t: np.ndarray, t, y: np.ndarray):
        c = self.config
        if x_t.shape[-1] != c.m:
            raise ValueError(f"x_t has length {x_t.shape[-1]}, expected {c.m}")
        single = x_t.ndim == 1
        x_t = np.atleast_2d(x_t)
        y = np.atleast_2d(y)
        t = np.broadcast_to(np.asarray(t), (x_t.shape[0],))
        temb = self.time_embedding(t)
        z, c1 = nn.mlp_forward(self.params, "mlp1", np.concatenate([x_t, temb], axis=1))
        if c.variant == "no_counterfactual":
            out, c3 = nn.mlp_forward(self.params, "mlp3", z)
            cm = None
        else:
            zp, cm = self.counterfactual_map(z, y)
            out, c3 = nn.mlp_forward(self.params, "mlp3", zp)
        if not np.all(np.isfinite(out)):
            raise nn.NonFiniteError("non-finite noise prediction")
        cache = (t, c1, cm, c3, single)
        return (out[0] if single else out), cache

    def __call__(self, x_t, t, y):
        return self.forward(x_t, t, y)[0]

    def backward(self, cache, d_out: np.ndarray) -> Params:
        c = self.config
        t, c1, cm, c3, single = cache
        grads: Params = {}
        d = nn.mlp_backward(self.params, "mlp3", c3, np.atleast_2d(d_out), grads)
        if cm is None:
            dz = d
        else:
            enc_cache, att_cache = cm
            dg, dk, dv = nn.attention_backward(self.params, "attn", c.attention, att_cache, d, grads)
            dz = dk + dv
            if c.variant == "base":
                nn.mlp_backward(self.params, "mlp2", enc_cache, dg, grads)
        d_in = nn.mlp_backward(self.params, "mlp1", c1, dz, grads)
        dE = np.zeros_like(self.params["time.E"])
        np.add.at(dE, t - 1, d_in[:, c.m:])
        grads["time.E"] = dE
        return grads

    # -- bookkeeping ----------------------------------------------------------

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def param_norms(self) -> dict[str, float]:
        return {k: float(np.linalg.norm(v)) for k, v in self.params.items()}

    def block_size(self, prefix: str) -> int:
        return int(sum(v.size for k, v in self.params.items() if k.startswith(prefix + ".")))


def ablation_variant(model: DifFaiRec, kind: str) -> DifFaiRec:
    """Fresh, untrained variant with the same configuration and seed."""
    if kind not in ("no_encoder", "no_counterfactual"):
        raise ValueError(f"unknown ablation {kind!r}")
    cfg = ModelConfig(**{**model.config.to_dict(), "variant": kind})
    return DifFaiRec(cfg)


def eps_theta(model: DifFaiRec, x_t, t, y) -> np.ndarray:
    return model(x_t, t, y)
