"""Regularized matrix factorization, used as the reference recommender."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Adam, NonFiniteError
from .rng import stream


class MFDiverged(FloatingPointError):
    pass


@dataclass
class MFConfig:
    factors: int = 20
    reg: float = 0.1
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    init_std: float = 0.1


@dataclass
class MFParams:
    P: np.ndarray  # users x f
    Q: np.ndarray  # items x f
    reg: float

    @property
    def factors(self) -> int:
        return self.P.shape[1]


def mf_objective(P: np.ndarray, Q: np.ndarray, rows, cols, vals, reg: float):
    """sum (r - p_u . q_i)^2 + reg (|P|^2 + |Q|^2) and its gradients."""
    err = vals - np.einsum("kf,kf->k", Q[rows], P[cols])
    loss = float(err @ err + reg * (np.sum(P * P) + np.sum(Q * Q)))
    dP = 2.0 * reg * P
    dQ = 2.0 * reg * Q
    np.add.at(dP, cols, -2.0 * err[:, None] * Q[rows])
    np.add.at(dQ, rows, -2.0 * err[:, None] * P[cols])
    return loss, {"P": dP, "Q": dQ}


def train_mf(R: np.ndarray, train_mask: np.ndarray, config: MFConfig | None = None) -> tuple[MFParams, list[float]]:
    """Mini-batch Adam on the observed training cells of ``R`` (items x users).

    Each mini-batch step follows the gradient of
    ``mean_batch (r - p.q)^2 + reg / N (|P|^2 + |Q|^2)``, an unbiased
    rescaling of the full objective by 1/N. Returns the parameters and the
    full objective after each epoch.
    """
    c = config or MFConfig()
    rows, cols = np.nonzero(train_mask)
    if len(rows) == 0:
        raise ValueError("training split is empty")
    vals = R[rows, cols]
    m, n = R.shape
    init = np.random.default_rng([c.seed, 7])
    params = {"P": init.normal(0.0, c.init_std, (n, c.factors)),
              "Q": init.normal(0.0, c.init_std, (m, c.factors))}
    opt = Adam(lr=c.lr)
    N = len(vals)
    history = []
    for epoch in range(c.epochs):
        order = stream(c.seed, "mf", epoch).permutation(N)
        with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported below
            for start in range(0, N, c.batch_size):
                idx = order[start:start + c.batch_size]
                _, g = mf_objective(params["P"], params["Q"], rows[idx], cols[idx], vals[idx], c.reg * len(idx) / N)
                for key in g:
                    g[key] /= len(idx)
                try:
                    opt.step(params, g)
                except NonFiniteError as exc:
                    raise MFDiverged(f"MF diverged at epoch {epoch}: {exc}") from exc
            loss, _ = mf_objective(params["P"], params["Q"], rows, cols, vals, c.reg)
        if not np.isfinite(loss) or (history and loss > 1e6 * max(history[0], 1.0)):
            raise MFDiverged(f"MF objective diverged at epoch {epoch}: {loss}")
        history.append(loss)
    return MFParams(params["P"], params["Q"], c.reg), history


def predict_mf(params: MFParams, scale=None) -> np.ndarray:
    """Items x users prediction matrix Q P^T, denormalized when ``scale`` is given."""
    pred = params.Q @ params.P.T
    return scale.denormalize(pred) if scale is not None else pred
