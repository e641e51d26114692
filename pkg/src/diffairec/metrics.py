"""Ranking utility (recall, NDCG) and group fairness (A@k, E@k, KS gap)."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import GroupAssignment

log = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


def rank_topk(predictions: np.ndarray, train_mask: np.ndarray, k: int) -> list[np.ndarray]:
    """Top-k item indices per user among items not in the user's training set.

    Scores are sorted descending; equal scores keep ascending item order.
    """
    m, n = predictions.shape
    lists = []
    short = 0
    for j in range(n):
        cand = np.flatnonzero(train_mask[:, j] == 0)
        if len(cand) < k:
            short += 1
        order = np.argsort(-predictions[cand, j], kind="stable")
        lists.append(cand[order[:k]])
    if short:
        warnings.warn(f"{short} users have fewer than k={k} candidate items; lists truncated", stacklevel=2)
    return lists


def _eligible(lists, test_mask):
    users = [j for j in range(len(lists)) if test_mask[:, j].any()]
    if not users:
        raise MetricError("no user has a test interaction")
    return users


def recall_per_user(lists, test_mask: np.ndarray, k: int) -> dict[int, float]:
    out = {}
    for j in _eligible(lists, test_mask):
        pos = test_mask[:, j] > 0
        hits = int(pos[lists[j][:k]].sum())
        out[j] = hits / min(k, int(pos.sum()))
    return out


def ndcg_per_user(lists, test_mask: np.ndarray, k: int) -> dict[int, float]:
    out = {}
    for j in _eligible(lists, test_mask):
        pos = test_mask[:, j] > 0
        rel = pos[lists[j][:k]].astype(np.float64)
        discounts = 1.0 / np.log2(np.arange(2, len(rel) + 2))
        dcg = float(rel @ discounts)
        ideal = min(k, int(pos.sum()))
        idcg = float((1.0 / np.log2(np.arange(2, ideal + 2))).sum())
        out[j] = dcg / idcg
    return out


def recall_at_k(lists, test_mask, k: int) -> float:
    return float(np.mean(list(recall_per_user(lists, test_mask, k).values())))


def ndcg_at_k(lists, test_mask, k: int) -> float:
    return float(np.mean(list(ndcg_per_user(lists, test_mask, k).values())))


def group_mae(predictions: np.ndarray, truth: np.ndarray, test_mask: np.ndarray,
              groups: GroupAssignment) -> tuple[float, float]:
    """Mean absolute error over each group's test cells."""
    out = []
    for cols in (groups.group_a, groups.group_b):
        cells = test_mask[:, cols] > 0
        if not cells.any():
            raise MetricError(f"group has no test cells for attribute {groups.attribute!r}")
        out.append(float(np.abs(predictions[:, cols][cells] - truth[:, cols][cells]).mean()))
    return out[0], out[1]


def abs_equality(predictions, truth, test_mask, groups: GroupAssignment) -> float:
    """A@k = |MAE_A - MAE_B|. Rank-free despite the name."""
    u_a, u_b = group_mae(predictions, truth, test_mask, groups)
    return abs(u_a - u_b)


def group_error_rates(lists, test_mask, groups: GroupAssignment) -> tuple[float, float]:
    """Share of recommended items that are not test positives, pooled per group."""
    out = []
    for cols in (groups.group_a, groups.group_b):
        wrong = total = 0
        for j in cols:
            rec = lists[j]
            total += len(rec)
            wrong += int((test_mask[rec, j] == 0).sum())
        if total == 0:
            raise MetricError("a group has only empty recommendation lists")
        out.append(wrong / total)
    return out[0], out[1]


def equal_opportunity(lists, test_mask, groups: GroupAssignment) -> float:
    """E@k = sqrt(|e_A - e_B|)."""
    e_a, e_b = group_error_rates(lists, test_mask, groups)
    return float(np.sqrt(abs(e_a - e_b)))


def ks_statistic(x: np.ndarray, y: np.ndarray) -> float:
    """Two-sample Kolmogorov-Smirnov statistic sup |F_x - F_y|."""
    x = np.sort(np.ravel(x))
    y = np.sort(np.ravel(y))
    if len(x) == 0 or len(y) == 0:
        raise MetricError("KS statistic needs two non-empty samples")
    grid = np.concatenate([x, y])
    fx = np.searchsorted(x, grid, side="right") / len(x)
    fy = np.searchsorted(y, grid, side="right") / len(y)
    return float(np.abs(fx - fy).max())


def distribution_gap(predictions: np.ndarray, groups: GroupAssignment, cells: np.ndarray | None = None) -> float:
    """KS distance between the pooled predicted ratings of the two groups.

    ``cells`` optionally restricts the pool (e.g. to test cells); by default
    every cell of every user counts.
    """
    pools = []
    for cols in (groups.group_a, groups.group_b):
        block = predictions[:, cols]
        pools.append(block[cells[:, cols] > 0] if cells is not None else block.ravel())
    return ks_statistic(*pools)


# ----------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    k: int
    attribute: str
    recall: float
    ndcg: float
    A_at_k: float
    E_at_k: float
    dist_gap: float
    A_at_k_normalized: float
    recall_by_group: dict[str, float] = field(default_factory=dict)
    ndcg_by_group: dict[str, float] = field(default_factory=dict)
    mae_by_group: dict[str, float] = field(default_factory=dict)
    error_rate_by_group: dict[str, float] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    KEYS = ("recall", "ndcg", "A_at_k", "E_at_k", "dist_gap")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)

    def to_table(self) -> str:
        rows = [("metric", "all", "group A", "group B")]
        rows.append((f"recall@{self.k}", f"{self.recall:.6f}", *_pair(self.recall_by_group)))
        rows.append((f"ndcg@{self.k}", f"{self.ndcg:.6f}", *_pair(self.ndcg_by_group)))
        rows.append(("MAE", "", *_pair(self.mae_by_group)))
        rows.append((f"error rate@{self.k}", "", *_pair(self.error_rate_by_group)))
        rows.append((f"A@{self.k}", f"{self.A_at_k:.6f}", "", ""))
        rows.append((f"A@{self.k} (normalized)", f"{self.A_at_k_normalized:.6f}", "", ""))
        rows.append((f"E@{self.k}", f"{self.E_at_k:.6f}", "", ""))
        rows.append(("dist_gap (KS)", f"{self.dist_gap:.6f}", "", ""))
        return format_table(rows, title=f"attribute: {self.attribute}")


def _pair(d: dict) -> tuple[str, str]:
    return tuple(f"{d[g]:.6f}" if g in d else "" for g in ("A", "B"))


def format_table(rows, title: str | None = None) -> str:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    lines = [title] if title else []
    for n, r in enumerate(rows):
        lines.append("  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def evaluate(pred_raw: np.ndarray, truth_raw: np.ndarray, train_mask: np.ndarray, test_mask: np.ndarray,
             groups: GroupAssignment, k: int, scale=None, metadata: dict | None = None) -> MetricsReport:
    """All metrics for one prediction matrix on the rating scale.

    ``scale`` (a :class:`~diffairec.data.Scale`) adds A@k in normalized units.
    """
    lists = rank_topk(pred_raw, train_mask, k)
    rec = recall_per_user(lists, test_mask, k)
    nd = ndcg_per_user(lists, test_mask, k)
    u_a, u_b = group_mae(pred_raw, truth_raw, test_mask, groups)
    e_a, e_b = group_error_rates(lists, test_mask, groups)
    if scale is not None:
        a_norm = abs_equality(scale.normalize(pred_raw), scale.normalize(truth_raw), test_mask, groups)
    else:
        a_norm = abs(u_a - u_b)

    def by_group(per_user):
        out = {}
        for name, cols in (("A", groups.group_a), ("B", groups.group_b)):
            vals = [per_user[j] for j in cols if j in per_user]
            if vals:
                out[name] = float(np.mean(vals))
        return out

    return MetricsReport(
        k=k, attribute=groups.attribute,
        recall=float(np.mean(list(rec.values()))), ndcg=float(np.mean(list(nd.values()))),
        A_at_k=abs(u_a - u_b), E_at_k=float(np.sqrt(abs(e_a - e_b))),
        dist_gap=distribution_gap(pred_raw, groups, test_mask),
        A_at_k_normalized=a_norm,
        recall_by_group=by_group(rec), ndcg_by_group=by_group(nd),
        mae_by_group={"A": u_a, "B": u_b}, error_rate_by_group={"A": e_a, "B": e_b},
        metadata=dict(metadata or {}),
    )
