"""Gaussian diffusion over user rating vectors: schedule, noising, denoising,
the masked training loop and per-user reconstruction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .nn import Adam, NonFiniteError
from .rng import stream

log = logging.getLogger(__name__)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step tables, stored 0-based: ``betas[t - 1]`` is the variance at step t."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_var: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) == 0:
            raise ValueError("betas must be a non-empty vector")
        if np.any(betas < 0) or np.any(betas >= 1):
            raise ValueError("every beta must lie in [0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        prev = np.concatenate([[1.0], alpha_bars[:-1]])
        denom = 1.0 - alpha_bars
        with np.errstate(invalid="ignore", divide="ignore"):
            post = np.where(denom > 0, betas * (1.0 - prev) / denom, 0.0)
        return cls(betas, alphas, alpha_bars, post)

    def alpha_bar_prev(self, t):
        t = np.asarray(t)
        return np.where(t > 1, self.alpha_bars[np.maximum(t - 2, 0)], 1.0)

    def to_text(self) -> str:
        lines = ["# t beta alpha alpha_bar posterior_var"]
        for i in range(self.T):
            lines.append(f"{i + 1} {self.betas[i]:.17g} {self.alphas[i]:.17g} "
                         f"{self.alpha_bars[i]:.17g} {self.posterior_var[i]:.17g}")
        return "\n".join(lines) + "\n"


def build_schedule(T: int, noise_scale: float = 1e-4, beta_min: float = 1e-5) -> NoiseSchedule:
    """beta_t = sigmoid(u_t) * noise_scale + beta_min with u_t evenly spaced on [-6, 6].

    For T = 1 the single step sits at the lower endpoint u = -6.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if noise_scale <= 0:
        raise ValueError(f"noise_scale must be > 0, got {noise_scale}")
    u = np.linspace(-6.0, 6.0, T) if T > 1 else np.array([-6.0])
    betas = sigmoid(u) * noise_scale + beta_min
    if np.any(betas >= 1.0) or np.any(betas <= 0.0):
        raise ValueError(f"schedule produces beta outside (0, 1): max {betas.max():.4g}")
    return NoiseSchedule.from_betas(betas)


def _check_step(t, T: int) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > T):
        raise ValueError(f"diffusion step out of range 1..{T}: {t}")
    return t


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form forward noising. ``t`` is a scalar or one step per batch row."""
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    t = _check_step(t, sched.T)
    ab = sched.alpha_bars[t - 1]
    if ab.ndim == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def reverse_step(x_t: np.ndarray, t, eps_hat: np.ndarray, z: np.ndarray | None,
                 sched: NoiseSchedule) -> np.ndarray:
    """One ancestral denoising step x_t -> x_{t-1}. Noise is suppressed at t = 1."""
    t = _check_step(t, sched.T)
    idx = t - 1
    a, ab, var = sched.alphas[idx], sched.alpha_bars[idx], sched.posterior_var[idx]
    if np.ndim(a) == 1:
        a, ab, var = a[:, None], ab[:, None], var[:, None]
    coef = (1.0 - a) / np.sqrt(1.0 - ab)
    mean = (x_t - coef * eps_hat) / np.sqrt(a)
    if z is None:
        return mean
    sigma = np.where(t > 1, 1.0, 0.0)
    if np.ndim(sigma) == 1:
        sigma = sigma[:, None]
    return mean + sigma * np.sqrt(var) * z


def posterior_mean(x0: np.ndarray, x_t: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Mean of q(x_{t-1} | x_t, x0), written in terms of x0."""
    i = t - 1
    ab_prev = 1.0 if t == 1 else sched.alpha_bars[i - 1]
    beta, a, ab = sched.betas[i], sched.alphas[i], sched.alpha_bars[i]
    return (np.sqrt(ab_prev) * beta * x0 + np.sqrt(a) * (1.0 - ab_prev) * x_t) / (1.0 - ab)


# ----------------------------------------------------------------------------
# training


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, epoch: int, batch: int, norms: dict[str, float]):
        worst = sorted(norms.items(), key=lambda kv: -kv[1])[:5]
        detail = ", ".join(f"{k}={v:.3g}" for k, v in worst)
        super().__init__(f"{message} (epoch {epoch}, batch {batch}; largest parameter norms: {detail})")
        self.epoch = epoch
        self.batch = batch
        self.norms = norms


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0


@dataclass
class TrainState:
    """Everything needed to resume training."""

    optimizer: Adam
    epoch: int = 0
    loss_history: list[float] = field(default_factory=list)


def masked_loss(eps: np.ndarray, eps_hat: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch mean of ||mask * (eps - eps_hat)||^2 and its gradient w.r.t. eps_hat."""
    r = mask * (eps - eps_hat)
    B = eps.shape[0]
    return float(np.sum(r * r) / B), -2.0 * mask * r / B


def train_batch(model, x0: np.ndarray, mask: np.ndarray, y: np.ndarray, t: np.ndarray,
                eps: np.ndarray, sched: NoiseSchedule) -> tuple[float, dict]:
    x_t = q_sample(x0, t, eps, sched)
    eps_hat, cache = model.forward(x_t, t, y)
    loss, d_eps_hat = masked_loss(eps, eps_hat, mask)
    grads = model.backward(cache, d_eps_hat)
    return loss, grads


def train(model, R: np.ndarray, train_mask: np.ndarray, G: np.ndarray, sched: NoiseSchedule,
          config: TrainConfig, state: TrainState | None = None,
          on_epoch: Callable[[TrainState], None] | None = None) -> TrainState:
    """Fit the noise predictor on the train-masked columns of ``R`` (items x users).

    ``G`` holds each user's conditioning vector in the matching column. Each
    epoch draws its shuffling, steps and noise from a stream derived from
    (seed, epoch), so a resumed run replays exactly what an uninterrupted one
    would.
    """
    if state is None:
        state = TrainState(optimizer=Adam(lr=config.lr))
    X0 = (R * train_mask).T
    Mk = train_mask.T.astype(np.float64)
    Y = G.T
    n = X0.shape[0]
    while state.epoch < config.epochs:
        epoch = state.epoch
        rng = stream(config.seed, "train", epoch)
        order = rng.permutation(n)
        losses = []
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            t = rng.integers(1, sched.T + 1, size=len(idx))
            eps = rng.standard_normal((len(idx), X0.shape[1]))
            with np.errstate(invalid="ignore", over="ignore"):
                try:
                    loss, grads = train_batch(model, X0[idx], Mk[idx], Y[idx], t, eps, sched)
                except NonFiniteError as exc:
                    raise TrainingDiverged(str(exc), epoch, bi, model.param_norms()) from exc
            if not np.isfinite(loss):
                raise TrainingDiverged("non-finite loss", epoch, bi, model.param_norms())
            losses.append(loss)
            if not Mk[idx].any():
                continue
            try:
                state.optimizer.step(model.params, grads)
            except NonFiniteError as exc:
                raise TrainingDiverged(str(exc), epoch, bi, model.param_norms()) from exc
        state.loss_history.append(float(np.mean(losses)))
        state.epoch += 1
        log.debug("epoch %d loss %.6g", epoch, state.loss_history[-1])
        if on_epoch is not None:
            on_epoch(state)
    return state


# ----------------------------------------------------------------------------
# prediction


class PredictionError(FloatingPointError):
    pass


def denoise(model, x_start: np.ndarray, y: np.ndarray, sched: NoiseSchedule, t_start: int,
            noises: np.ndarray) -> np.ndarray:
    """Run the reverse chain from ``x_start`` at ``t_start`` down to step 0.

    ``noises[:, s]`` is the z used at step ``t_start - s``; a batch of users is
    processed row-wise.
    """
    x = x_start
    B = x.shape[0]
    for s, t in enumerate(range(t_start, 0, -1)):
        tt = np.full(B, t)
        eps_hat, _ = model.forward(x, tt, y)
        x = reverse_step(x, tt, eps_hat, noises[:, s] if t > 1 else None, sched)
        if not np.all(np.isfinite(x)):
            raise PredictionError(f"non-finite value in reverse chain at step {t}")
    return x


def predict_users(model, X0: np.ndarray, Y: np.ndarray, users: np.ndarray, sched: NoiseSchedule,
                  seed: int, t_start: int | None = None, sample: int = 0) -> np.ndarray:
    """Reconstruct normalized rating vectors for a batch of users.

    ``X0`` and ``Y`` are (batch, m); ``users`` are the global user indices
    that select each row's random stream, so results do not depend on how
    users are batched.
    """
    t_start = sched.T if t_start is None else t_start
    if not 1 <= t_start <= sched.T:
        raise ValueError(f"t_start must be in 1..{sched.T}")
    m = X0.shape[1]
    eps = np.empty_like(X0)
    noises = np.empty((len(users), t_start, m))
    for r, u in enumerate(users):
        g = stream(seed, "predict", int(u), sample)
        draws = g.standard_normal((t_start + 1, m))
        eps[r] = draws[0]
        noises[r] = draws[1:]
    x_start = q_sample(X0, np.full(len(users), t_start), eps, sched)
    return denoise(model, x_start, Y, sched, t_start, noises)


def predict_user(model, x0_obs: np.ndarray, y: np.ndarray, sched: NoiseSchedule, seed: int,
                 user: int = 0, t_start: int | None = None, sample: int = 0) -> np.ndarray:
    """Single-user reconstruction in normalized units."""
    return predict_users(model, x0_obs[None, :], y[None, :], np.array([user]), sched, seed,
                         t_start, sample)[0]


def predict_ensemble_users(model, X0: np.ndarray, Y: np.ndarray, users: np.ndarray,
                           sched: NoiseSchedule, seed: int, n_samples: int = 1,
                           t_start: int | None = None) -> np.ndarray:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    total = np.zeros_like(X0)
    for s in range(n_samples):
        total += predict_users(model, X0, Y, users, sched, seed, t_start, sample=s)
    return total / n_samples


def predict_matrix(model, R: np.ndarray, train_mask: np.ndarray, G: np.ndarray,
                   sched: NoiseSchedule, seed: int, n_samples: int = 1,
                   t_start: int | None = None, chunk: int = 128, workers: int = 1) -> np.ndarray:
    """Normalized predictions for every user, items x users.

    Users are cut into fixed chunks of ``chunk`` columns; ``workers`` only
    changes how many chunks run at once, never the arithmetic, so the result
    is identical for any worker count. Changing ``chunk`` changes the batch
    shapes seen by the matrix products and may move results in the last bit.
    """
    X0 = (R * train_mask).T
    Y = G.T
    n = X0.shape[0]
    starts = list(range(0, n, chunk))

    def run(start):
        idx = np.arange(start, min(start + chunk, n))
        return predict_ensemble_users(model, X0[idx], Y[idx], idx, sched, seed, n_samples, t_start)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return np.concatenate(parts, axis=0).T
