"""Synthetic rating data with a planted group bias.

Users have low-rank tastes plus a group-specific shift along a random item
direction, so the two groups genuinely prefer different items. Which items
a user rates is preference-driven (people mostly rate what they like), and
the minority group can be made less active.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import RatingDataset


@dataclass
class PlantedBias:
    n_users: int = 50
    n_items: int = 80
    rank: int = 4
    minority_frac: float = 0.3
    shift: float = 1.0
    density: float = 0.25
    exposure_slope: float = 2.0
    minority_activity: float = 1.0
    rating_noise: float = 0.3
    min_count: int = 15
    seed: int = 0


def planted_bias(cfg: PlantedBias | None = None, **overrides) -> RatingDataset:
    """Generate integer 1-5 star ratings; minority users carry gender 'F'.

    Every user gets at least ``min_count`` ratings (their favourite unrated
    items are added if exposure sampling came up short).
    """
    c = cfg or PlantedBias()
    if overrides:
        c = PlantedBias(**{**c.__dict__, **overrides})
    rng = np.random.default_rng(c.seed)
    n, m, r = c.n_users, c.n_items, c.rank
    n_min = max(1, int(round(c.minority_frac * n)))
    minority = np.zeros(n, dtype=bool)
    minority[rng.choice(n, n_min, replace=False)] = True

    U = rng.standard_normal((n, r))
    V = rng.standard_normal((m, r))
    item_bias = 0.5 * rng.standard_normal(m)
    direction = rng.standard_normal(m)
    direction /= direction.std()
    group_sign = np.where(minority, 1.0, -1.0)
    pref = U @ V.T / np.sqrt(r) + item_bias + 0.5 * c.shift * group_sign[:, None] * direction

    offset = _solve_offset(pref, c.exposure_slope, c.density)
    activity = np.where(minority, np.log(c.minority_activity), 0.0)
    p_obs = 1.0 / (1.0 + np.exp(-(c.exposure_slope * pref + offset + activity[:, None])))
    obs = rng.random((n, m)) < p_obs
    for u in range(n):
        short = c.min_count - int(obs[u].sum())
        if short > 0:
            cand = np.flatnonzero(~obs[u])
            obs[u, cand[np.argsort(-pref[u, cand])[:short]]] = True
    stars = np.clip(np.round(3.0 + pref + c.rating_noise * rng.standard_normal((n, m))), 1, 5)

    uu, ii = np.nonzero(obs)
    users = np.arange(1, n + 1)
    gender = {int(users[u]): ("F" if minority[u] else "M") for u in range(n)}
    ds = RatingDataset(users[uu], ii + 1, stars[uu, ii].astype(np.float64),
                       np.zeros(len(uu), dtype=np.int64), {"gender": gender}, kind="synthetic")
    return ds


def _solve_offset(pref: np.ndarray, slope: float, density: float) -> float:
    lo, hi = -50.0, 50.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if np.mean(1.0 / (1.0 + np.exp(-(slope * pref + mid)))) < density:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def rank_one(n_users: int = 30, n_items: int = 20, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Noiseless rank-1 matrix with entries in [-1, 1] and a full mask."""
    rng = np.random.default_rng(seed)
    u = rng.uniform(0.3, 1.0, n_users) * rng.choice([-1, 1], n_users)
    v = rng.uniform(0.3, 1.0, n_items)
    return np.outer(v, u), np.ones((n_items, n_users), dtype=np.int8)
