"""Build a small MovieLens subsample in the "::" layout used by MovieLens-1M.

The source is MovieLens-100K as bundled (parquet) inside the
pytorch-widedeep wheel, which is obtainable from PyPI when grouplens.org is
not reachable:

    pip download pytorch-widedeep==1.7.0 --no-deps -d /tmp/dl
    python scripts/make_movielens_subsample.py --wheel /tmp/dl/pytorch_widedeep-1.7.0-py3-none-any.whl

Needs pandas and pyarrow (only this script does). Output: ratings.dat and
users.dat under --out, restricted to the --items most-rated movies and a
seeded sample of --users users holding at least --min-ratings of them.
"""

import argparse
import io
import zipfile
from pathlib import Path

import numpy as np
import pandas as pd

MEMBERS = {
    "ratings": "pytorch_widedeep/datasets/data/MovieLens100k_data.parquet.brotli",
    "users": "pytorch_widedeep/datasets/data/MovieLens100k_users.parquet.brotli",
}


def load(wheel: Path):
    with zipfile.ZipFile(wheel) as zf:
        return {k: pd.read_parquet(io.BytesIO(zf.read(v))) for k, v in MEMBERS.items()}


def subsample(ratings: pd.DataFrame, users: pd.DataFrame, n_users: int, n_items: int,
              min_ratings: int, seed: int):
    counts = ratings.groupby("movie_id").size().sort_values(ascending=False, kind="stable")
    items = np.sort(counts.index[:n_items].to_numpy())
    r = ratings[ratings.movie_id.isin(items)]
    per_user = r.groupby("user_id").size()
    eligible = np.sort(per_user.index[per_user >= min_ratings].to_numpy())
    if len(eligible) < n_users:
        raise SystemExit(f"only {len(eligible)} users have >= {min_ratings} ratings on the top {n_items} items")
    chosen = np.sort(np.random.default_rng(seed).choice(eligible, n_users, replace=False))
    r = r[r.user_id.isin(chosen)].sort_values(["user_id", "movie_id"], kind="stable")
    u = users[users.user_id.isin(chosen)].sort_values("user_id")
    return r, u


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--wheel", type=Path, required=True)
    p.add_argument("--out", type=Path, default=Path("tests/data/ml_subsample"))
    p.add_argument("--users", type=int, default=500)
    p.add_argument("--items", type=int, default=400)
    p.add_argument("--min-ratings", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    src = load(a.wheel)
    r, u = subsample(src["ratings"], src["users"], a.users, a.items, a.min_ratings, a.seed)
    a.out.mkdir(parents=True, exist_ok=True)
    with open(a.out / "ratings.dat", "w") as fh:
        for row in r.itertuples(index=False):
            fh.write(f"{row.user_id}::{row.movie_id}::{row.rating}::{row.timestamp}\n")
    with open(a.out / "users.dat", "w") as fh:
        for row in u.itertuples(index=False):
            fh.write(f"{row.user_id}::{row.gender}::{row.age}::{row.occupation}::{row.zip_code}\n")
    n_f = int((u.gender == "F").sum())
    print(f"{len(u)} users ({n_f} F), {r.movie_id.nunique()} items, {len(r)} ratings -> {a.out}")


if __name__ == "__main__":
    main()
