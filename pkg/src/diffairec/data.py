"""Dataset parsing, interaction matrices, sensitive-attribute groups and splits.

Matrices are items x users throughout: column j is user j's rating vector.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import stream

log = logging.getLogger(__name__)

ATTRIBUTES = ("gender", "age", "activity_level", "interest_diversity")


class ParseError(ValueError):
    def __init__(self, path, line: int | None, message: str):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.path = str(path)
        self.line = line


class GroupError(ValueError):
    pass


@dataclass
class RatingDataset:
    """Rating events plus per-user metadata.

    ``users`` maps a metadata key (``gender``, ``age``, ``plays``, ``tags``)
    to a dict keyed by user id.
    """

    user_ids: np.ndarray
    item_ids: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray | None = None
    users: dict[str, dict] = field(default_factory=dict)
    kind: str = "generic"

    def __len__(self) -> int:
        return len(self.ratings)

    @property
    def n_users(self) -> int:
        return len(np.unique(self.user_ids))

    @property
    def n_items(self) -> int:
        return len(np.unique(self.item_ids))

    def subset_users(self, keep) -> "RatingDataset":
        keep = set(keep)
        sel = np.array([u in keep for u in self.user_ids], dtype=bool)
        users = {k: {u: v for u, v in d.items() if u in keep} for k, d in self.users.items()}
        ts = None if self.timestamps is None else self.timestamps[sel]
        return RatingDataset(self.user_ids[sel], self.item_ids[sel], self.ratings[sel], ts, users, self.kind)


def _read_lines(path) -> list[str]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        text = raw.decode("latin-1")
    lines = text.splitlines()
    if not any(line.strip() for line in lines):
        raise ParseError(path, None, "file is empty")
    return lines


# ----------------------------------------------------------------------------
# MovieLens-1M


def parse_movielens_users(path) -> dict[str, dict]:
    gender: dict = {}
    age: dict = {}
    for no, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        parts = line.split("::")
        if len(parts) != 5:
            raise ParseError(path, no, f"expected 5 '::'-separated fields, got {len(parts)}")
        try:
            uid = int(parts[0])
            a = int(parts[2])
        except ValueError:
            raise ParseError(path, no, "user id and age must be integers") from None
        if parts[1] not in ("F", "M"):
            raise ParseError(path, no, f"gender must be F or M, got {parts[1]!r}")
        gender[uid] = parts[1]
        age[uid] = a
    return {"gender": gender, "age": age}


def parse_movielens(ratings_path, users_path=None) -> RatingDataset:
    """Read ``UserID::MovieID::Rating::Timestamp`` lines (and the users file).

    Without a users file the dataset carries no metadata; grouping by gender
    or age will then fail.
    """
    users = parse_movielens_users(users_path) if users_path is not None else {}
    known = users.get("gender")
    rows = []
    for no, line in enumerate(_read_lines(ratings_path), start=1):
        if not line.strip():
            continue
        parts = line.split("::")
        if len(parts) != 4:
            raise ParseError(ratings_path, no, f"expected 4 '::'-separated fields, got {len(parts)}")
        try:
            uid, iid, r, ts = int(parts[0]), int(parts[1]), float(parts[2]), int(parts[3])
        except ValueError:
            raise ParseError(ratings_path, no, "non-numeric field") from None
        if r < 0:
            raise ParseError(ratings_path, no, f"negative rating {r}")
        if known is not None and uid not in known:
            raise ParseError(ratings_path, no, f"user {uid} is not in the users file")
        rows.append((uid, iid, r, ts))
    arr = np.array(rows, dtype=np.float64)
    return RatingDataset(arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2],
                         arr[:, 3].astype(np.int64), users, kind="movielens")


# ----------------------------------------------------------------------------
# LastFM (hetrec2011-lastfm-2k)


def _read_tsv(path, min_fields: int) -> list[list[str]]:
    lines = _read_lines(path)
    out = []
    for no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < min_fields:
            raise ParseError(path, no, f"expected at least {min_fields} tab-separated fields")
        out.append((no, parts))
    return out


def parse_lastfm(user_artists_path, user_tags_path=None) -> RatingDataset:
    """Play counts as ratings; per-user play totals and tag diversity as metadata.

    A user's tag count is the number of distinct tags attached (by anyone) to
    the artists that user listens to.
    """
    rows = []
    for no, parts in _read_tsv(user_artists_path, 3):
        try:
            uid, aid = int(parts[0]), int(parts[1])
        except ValueError:
            raise ParseError(user_artists_path, no, "user and artist ids must be integers") from None
        try:
            w = float(parts[2])
        except ValueError:
            raise ParseError(user_artists_path, no, f"non-numeric weight {parts[2]!r}") from None
        if w < 0:
            raise ParseError(user_artists_path, no, f"negative weight {w}")
        rows.append((uid, aid, w))
    if not rows:
        raise ParseError(user_artists_path, None, "no interactions")
    arr = np.array(rows, dtype=np.float64)
    ds = RatingDataset(arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2], None, {},
                       kind="lastfm")
    ds = aggregate(ds)
    plays: dict = {}
    for u, r in zip(ds.user_ids, ds.ratings):
        plays[int(u)] = plays.get(int(u), 0.0) + float(r)
    ds.users["plays"] = plays
    if user_tags_path is not None:
        artist_tags: dict[int, set] = {}
        for no, parts in _read_tsv(user_tags_path, 3):
            try:
                aid, tid = int(parts[1]), int(parts[2])
            except ValueError:
                raise ParseError(user_tags_path, no, "artist and tag ids must be integers") from None
            artist_tags.setdefault(aid, set()).add(tid)
        tags: dict[int, set] = {}
        for u, i in zip(ds.user_ids, ds.item_ids):
            tags.setdefault(int(u), set()).update(artist_tags.get(int(i), ()))
        ds.users["tags"] = {u: len(tags.get(u, ())) for u in plays}
    return ds


# ----------------------------------------------------------------------------
# aggregation and grouping


def aggregate(ds: RatingDataset) -> RatingDataset:
    """Collapse duplicate (user, item) events.

    LastFM weights are summed; otherwise the latest event by timestamp wins.
    Events are sorted by (user, item, timestamp) first, so input order never
    matters.
    """
    ts = ds.timestamps if ds.timestamps is not None else np.zeros(len(ds), dtype=np.int64)
    order = np.lexsort((ds.ratings, ts, ds.item_ids, ds.user_ids))
    u, i, r, t = ds.user_ids[order], ds.item_ids[order], ds.ratings[order], ts[order]
    new_pair = np.ones(len(u), dtype=bool)
    new_pair[1:] = (u[1:] != u[:-1]) | (i[1:] != i[:-1])
    starts = np.flatnonzero(new_pair)
    if ds.kind == "lastfm":
        vals = np.add.reduceat(r, starts) if len(r) else r
        last = starts
    else:
        last = np.append(starts[1:], len(u)) - 1
        vals = r[last]
    out_ts = None if ds.timestamps is None else t[last]
    return RatingDataset(u[starts], i[starts], vals, out_ts, ds.users, ds.kind)


DEFAULT_THRESHOLDS = {"age": 50, "activity_level": 15000, "interest_diversity": 300}


@dataclass(frozen=True)
class GroupAssignment:
    """Binary split of users. ``s[j]`` is 0 for group A and 1 for group B,
    indexed by matrix column."""

    s: np.ndarray
    attribute: str

    def __post_init__(self):
        s = np.asarray(self.s)
        if not np.isin(s, (0, 1)).all():
            raise GroupError("group labels must be 0 or 1")
        if (s == 0).sum() == 0 or (s == 1).sum() == 0:
            raise GroupError(f"attribute {self.attribute!r} leaves a group empty")

    @property
    def group_a(self) -> np.ndarray:
        return np.flatnonzero(self.s == 0)

    @property
    def group_b(self) -> np.ndarray:
        return np.flatnonzero(self.s == 1)

    def swapped(self) -> "GroupAssignment":
        return GroupAssignment(1 - self.s, self.attribute)

    def minority(self) -> int:
        """Label (0 or 1) of the smaller group; ties go to B."""
        return 0 if (self.s == 0).sum() < (self.s == 1).sum() else 1


def user_labels(ds: RatingDataset, attribute: str, thresholds: dict | None = None) -> dict:
    """Per-user 0/1 label keyed by user id.

    Group A (0) is F / young / inactive / focused; B (1) is M / old / active /
    divergent. Threshold values fall in the high group.
    """
    th = {**DEFAULT_THRESHOLDS, **(thresholds or {})}
    if attribute not in ATTRIBUTES:
        raise GroupError(f"unknown attribute {attribute!r}; expected one of {ATTRIBUTES}")
    key = {"gender": "gender", "age": "age", "activity_level": "plays", "interest_diversity": "tags"}[attribute]
    meta = ds.users.get(key)
    if meta is None:
        raise GroupError(f"dataset has no {key!r} metadata needed for attribute {attribute!r}")
    labels = {}
    for u in np.unique(ds.user_ids):
        u = int(u)
        if u not in meta:
            raise GroupError(f"user {u} has no {key!r} metadata")
        v = meta[u]
        labels[u] = int(v == "M") if attribute == "gender" else int(v >= th[attribute])
    return labels


def assign_groups(ds: RatingDataset, attribute: str, user_index: dict, thresholds: dict | None = None) -> GroupAssignment:
    labels = user_labels(ds, attribute, thresholds)
    s = np.zeros(len(user_index), dtype=np.int64)
    for uid, col in user_index.items():
        s[col] = labels[uid]
    return GroupAssignment(s, attribute)


# ----------------------------------------------------------------------------
# interaction matrix


@dataclass(frozen=True)
class Scale:
    """Invertible map from raw ratings to [-1, 1]: optional log1p, then min-max."""

    lo: float
    hi: float
    log: bool = False

    @property
    def scheme(self) -> str:
        return "log1p-minmax" if self.log else "minmax"

    def normalize(self, r):
        x = np.log1p(r) if self.log else np.asarray(r, dtype=np.float64)
        if self.hi == self.lo:
            return np.zeros_like(x, dtype=np.float64)
        return 2.0 * (x - self.lo) / (self.hi - self.lo) - 1.0

    def denormalize(self, x):
        x = np.asarray(x, dtype=np.float64)
        v = (x + 1.0) / 2.0 * (self.hi - self.lo) + self.lo
        return np.expm1(v) if self.log else v

    @classmethod
    def fit(cls, ratings, log: bool = False) -> "Scale":
        v = np.log1p(ratings) if log else np.asarray(ratings, dtype=np.float64)
        return cls(float(v.min()), float(v.max()), log)


@dataclass
class InteractionMatrix:
    R: np.ndarray
    M: np.ndarray
    item_ids: np.ndarray
    user_ids: np.ndarray
    scale: Scale

    @property
    def shape(self):
        return self.R.shape

    @property
    def item_index(self) -> dict:
        return {int(v): i for i, v in enumerate(self.item_ids)}

    @property
    def user_index(self) -> dict:
        return {int(v): j for j, v in enumerate(self.user_ids)}

    def raw_ratings(self) -> np.ndarray:
        """Ratings on the original scale at observed cells, 0 elsewhere."""
        return np.where(self.M > 0, self.scale.denormalize(self.R), 0.0)


def build_matrix(ds: RatingDataset, normalization: str = "auto") -> InteractionMatrix:
    """Dense items x users matrix with mask.

    ``normalization`` is ``minmax``, ``log1p-minmax`` or ``auto`` (log1p for
    LastFM play counts, plain min-max otherwise).
    """
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    pairs = ds.user_ids.astype(np.int64) * (2 ** 32) + ds.item_ids.astype(np.int64)
    if len(np.unique(pairs)) != len(pairs):
        raise ValueError("duplicate (user, item) events; aggregate the dataset first")
    if normalization == "auto":
        normalization = "log1p-minmax" if ds.kind == "lastfm" else "minmax"
    if normalization not in ("minmax", "log1p-minmax"):
        raise ValueError(f"unknown normalization {normalization!r}")
    scale = Scale.fit(ds.ratings, log=normalization == "log1p-minmax")
    items = np.unique(ds.item_ids)
    users = np.unique(ds.user_ids)
    rows = np.searchsorted(items, ds.item_ids)
    cols = np.searchsorted(users, ds.user_ids)
    R = np.zeros((len(items), len(users)))
    M = np.zeros((len(items), len(users)), dtype=np.int8)
    R[rows, cols] = scale.normalize(ds.ratings)
    M[rows, cols] = 1
    return InteractionMatrix(R, M, items, users, scale)


def drop_sparse_users(mat: InteractionMatrix, min_count: int = 13) -> tuple[InteractionMatrix, int]:
    counts = mat.M.sum(axis=0)
    keep = counts >= min_count
    dropped = int((~keep).sum())
    if dropped:
        log.warning("dropping %d users with fewer than %d interactions", dropped, min_count)
    return InteractionMatrix(mat.R[:, keep], mat.M[:, keep], mat.item_ids, mat.user_ids[keep], mat.scale), dropped


# ----------------------------------------------------------------------------
# splitting


@dataclass
class DatasetSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def codes(self) -> np.ndarray:
        """0 unobserved, 1 train, 2 val, 3 test."""
        return (self.train + 2 * self.val + 3 * self.test).astype(np.int8)

    @classmethod
    def from_codes(cls, codes: np.ndarray) -> "DatasetSplit":
        return cls(*((codes == c).astype(np.int8) for c in (1, 2, 3)))


def split_counts(n: int, ratios=(0.8, 0.1, 0.1), min_train: int = 10) -> tuple[int, int, int]:
    n_val = max(1, int(np.floor(n * ratios[1])))
    n_test = max(1, int(np.floor(n * ratios[2])))
    while n - n_val - n_test < min_train and (n_val > 1 or n_test > 1):
        if n_val >= n_test:
            n_val -= 1
        else:
            n_test -= 1
    return n - n_val - n_test, n_val, n_test


def split(mat: InteractionMatrix, ratios=(0.8, 0.1, 0.1), min_train: int = 10, seed: int = 0) -> DatasetSplit:
    """Per-user random split of observed cells.

    Every column must have at least ``min_train + 3`` observations (use
    :func:`drop_sparse_users` first). User j's permutation comes from its own
    stream, so the result does not depend on column processing order.
    """
    if abs(sum(ratios) - 1.0) > 1e-9 or len(ratios) != 3 or min(ratios) < 0:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    m, n = mat.M.shape
    train = np.zeros((m, n), dtype=np.int8)
    val = np.zeros_like(train)
    test = np.zeros_like(train)
    for j in range(n):
        obs = np.flatnonzero(mat.M[:, j])
        if len(obs) < min_train + 3:
            raise ValueError(f"user column {j} has {len(obs)} interactions; need {min_train + 3}")
        n_tr, n_va, _ = split_counts(len(obs), ratios, min_train)
        perm = stream(seed, "split", int(mat.user_ids[j])).permutation(obs)
        train[perm[:n_tr], j] = 1
        val[perm[n_tr:n_tr + n_va], j] = 1
        test[perm[n_tr + n_va:], j] = 1
    return DatasetSplit(train, val, test)
