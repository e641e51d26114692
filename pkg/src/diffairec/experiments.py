"""End-to-end drivers: data preparation, fitting, prediction and evaluation.

The CLI commands are thin wrappers around these; scripts/ and the
acceptance tests call them directly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import data as D
from .baseline import MFConfig, MFParams, predict_mf, train_mf
from .config import RunConfig
from .diffusion import NoiseSchedule, TrainConfig, TrainState, build_schedule, predict_matrix, train
from .groups import GroupVectors, build_group_vectors, counterfactual_targets
from .io import FormatError, read_checkpoint, write_checkpoint
from .metrics import MetricsReport, evaluate
from .model import DifFaiRec, ModelConfig
from .nn import Adam
from .rng import stream
from .synthetic import PlantedBias, planted_bias

log = logging.getLogger(__name__)


@dataclass
class Prepared:
    matrix: D.InteractionMatrix
    split: D.DatasetSplit
    groups: D.GroupAssignment
    fingerprint: str = ""
    kind: str = ""

    @property
    def R_train(self) -> np.ndarray:
        return self.matrix.R * self.split.train

    def subset_columns(self, keep: np.ndarray) -> "Prepared":
        mat = self.matrix
        sub = D.InteractionMatrix(mat.R[:, keep], mat.M[:, keep], mat.item_ids, mat.user_ids[keep], mat.scale)
        sp = D.DatasetSplit(self.split.train[:, keep], self.split.val[:, keep], self.split.test[:, keep])
        return Prepared(sub, sp, D.GroupAssignment(self.groups.s[keep], self.groups.attribute), "", self.kind)


# ----------------------------------------------------------------------------
# data


def load_ratings(cfg: RunConfig) -> D.RatingDataset:
    if cfg.dataset == "synthetic":
        return planted_bias(PlantedBias(
            n_users=cfg.syn_users, n_items=cfg.syn_items, rank=cfg.syn_rank,
            minority_frac=cfg.syn_minority_frac, shift=cfg.syn_shift, density=cfg.syn_density,
            minority_activity=cfg.syn_minority_activity, min_count=cfg.min_user_ratings, seed=cfg.syn_seed))
    if cfg.dataset == "movielens":
        return D.parse_movielens(cfg.ratings_path, cfg.users_path or None)
    return D.parse_lastfm(cfg.ratings_path, cfg.tags_path or None)


def prepare(cfg: RunConfig, ds: D.RatingDataset | None = None) -> Prepared:
    """Raw events -> normalized matrix, per-user split and group labels."""
    ds = D.aggregate(ds if ds is not None else load_ratings(cfg))
    mat = D.build_matrix(ds, cfg.normalization)
    mat, _ = D.drop_sparse_users(mat, max(cfg.min_user_ratings, cfg.min_train + 3))
    sp = D.split(mat, tuple(cfg.split_ratios), cfg.min_train, cfg.seed)
    groups = D.assign_groups(ds, cfg.attribute, mat.user_index, cfg.thresholds())
    return Prepared(mat, sp, groups, kind=ds.kind)


def undersample_minority(prep: Prepared, ratio: float, seed: int) -> Prepared:
    """Drop ``round(ratio * size)`` randomly chosen users of the smaller group.

    At least two users of that group always remain, so both group vectors stay
    defined. ``ratio = 0`` returns the input unchanged.
    """
    if not 0 <= ratio < 1:
        raise ValueError(f"sample ratio must be in [0, 1), got {ratio}")
    if ratio == 0:
        return prep
    label = prep.groups.minority()
    cols = np.flatnonzero(prep.groups.s == label)
    n_drop = min(int(round(ratio * len(cols))), len(cols) - 2)
    drop = stream(seed, "sparsity").permutation(cols)[:max(n_drop, 0)]
    keep = np.setdiff1d(np.arange(len(prep.groups.s)), drop)
    return prep.subset_columns(keep)


# ----------------------------------------------------------------------------
# DifFaiRec


def model_config(cfg: RunConfig, m: int, variant: str | None = None) -> ModelConfig:
    return ModelConfig(
        m=m, T=cfg.T, time_dim=cfg.time_dim, mlp1_hidden=list(cfg.mlp1_hidden),
        mlp2_hidden=list(cfg.mlp2_hidden), mlp3_hidden=list(cfg.mlp3_hidden),
        feature_dim=cfg.feature_dim, cond_dim=cfg.cond_dim, attn_tokens=cfg.attn_tokens,
        attn_width=cfg.attn_width, variant=variant or cfg.variant, seed=cfg.seed)


def schedule(cfg: RunConfig) -> NoiseSchedule:
    return build_schedule(cfg.T, cfg.L, cfg.beta_min)


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed)


@dataclass
class Fitted:
    model: DifFaiRec
    vectors: GroupVectors
    state: TrainState

    @property
    def loss_history(self) -> list[float]:
        return self.state.loss_history


def init_diffairec(cfg: RunConfig, prep: Prepared, variant: str | None = None) -> Fitted:
    """Untrained model, group vectors from the training split, fresh optimizer."""
    vectors = build_group_vectors(prep.R_train, prep.groups, cfg.group_method)
    model = DifFaiRec(model_config(cfg, prep.matrix.shape[0], variant))
    return Fitted(model, vectors, TrainState(Adam(lr=cfg.lr)))


def fit_diffairec(cfg: RunConfig, prep: Prepared, variant: str | None = None,
                  resume: Fitted | None = None, on_epoch=None) -> Fitted:
    """Train up to ``cfg.epochs``; ``resume`` continues a partially trained model in place."""
    fitted = resume if resume is not None else init_diffairec(cfg, prep, variant)
    G = counterfactual_targets(prep.groups, fitted.vectors)
    train(fitted.model, prep.matrix.R, prep.split.train, G, schedule(cfg), train_config(cfg), fitted.state,
          on_epoch=on_epoch)
    return fitted


def predict_diffairec(cfg: RunConfig, prep: Prepared, fitted: Fitted, workers: int | None = None) -> np.ndarray:
    """Normalized items x users predictions."""
    G = counterfactual_targets(prep.groups, fitted.vectors)
    return predict_matrix(fitted.model, prep.matrix.R, prep.split.train, G, schedule(cfg), cfg.seed,
                          n_samples=cfg.n_samples, t_start=cfg.t_start or None, chunk=cfg.chunk,
                          workers=workers or cfg.workers)


# ----------------------------------------------------------------------------
# MF


def mf_config(cfg: RunConfig) -> MFConfig:
    return MFConfig(factors=cfg.mf_factors, reg=cfg.mf_reg, lr=cfg.mf_lr, batch_size=cfg.mf_batch_size,
                    epochs=cfg.mf_epochs, seed=cfg.seed)


def fit_mf(cfg: RunConfig, prep: Prepared) -> tuple[MFParams, list[float]]:
    return train_mf(prep.matrix.R, prep.split.train, mf_config(cfg))


# ----------------------------------------------------------------------------
# evaluation


def score(cfg: RunConfig, prep: Prepared, pred_norm: np.ndarray, k: int | None = None,
          metadata: dict | None = None) -> MetricsReport:
    """Metrics on the rating scale, with A@k also reported in normalized units."""
    scale = prep.matrix.scale
    meta = {"seed": cfg.seed, "config_hash": cfg.hash(), **(metadata or {})}
    return evaluate(scale.denormalize(pred_norm), prep.matrix.raw_ratings(), prep.split.train,
                    prep.split.test, prep.groups, k or cfg.top_k, scale=scale, metadata=meta)


def run_once(cfg: RunConfig, prep: Prepared, model: str | None = None, variant: str | None = None,
             k: int | None = None) -> tuple[MetricsReport, np.ndarray]:
    """Fit, predict and score one model; returns the report and normalized predictions."""
    model = model or cfg.model
    if model == "mf":
        params, hist = fit_mf(cfg, prep)
        pred = predict_mf(params)
        meta = {"model": "mf", "final_loss": hist[-1] if hist else None}
    else:
        fitted = fit_diffairec(cfg, prep, variant)
        pred = predict_diffairec(cfg, prep, fitted)
        meta = {"model": "diffairec", "variant": variant or cfg.variant,
                "final_loss": fitted.loss_history[-1] if fitted.loss_history else None}
    meta.update(seed=cfg.seed, n_users=int(prep.matrix.shape[1]), n_items=int(prep.matrix.shape[0]))
    return score(cfg, prep, pred, k, meta), pred


# ----------------------------------------------------------------------------
# checkpoints


def save_diffairec(path, fitted: Fitted, cfg: RunConfig, dataset_fp: str):
    c = fitted.model.config
    opt = fitted.state.optimizer
    header = [
        ("schema", "diffairec"), ("m", c.m), ("T", c.T), ("time_dim", c.time_dim),
        ("mlp1_hidden", c.mlp1_hidden), ("mlp2_hidden", c.mlp2_hidden), ("mlp3_hidden", c.mlp3_hidden),
        ("feature_dim", c.feature_dim), ("cond_dim", c.cond_dim),
        ("attn_tokens", c.attn_tokens), ("attn_width", c.attn_width),
        ("variant", c.variant), ("init_seed", c.seed),
        ("noise_scale", float(cfg.L)), ("beta_min", float(cfg.beta_min)),
        ("dataset", dataset_fp), ("group_method", fitted.vectors.method),
        ("degenerate", ",".join(str(int(x)) for x in fitted.vectors.degenerate)),
        ("epoch", fitted.state.epoch),
        ("adam", f"{opt.lr!r} {opt.beta1!r} {opt.beta2!r} {opt.eps!r} {opt.step_count}"),
    ]
    blocks = {f"param.{k}": v for k, v in fitted.model.params.items()}
    blocks.update({f"frozen.{k}": v for k, v in fitted.model.frozen.items()})
    blocks["group.a"] = fitted.vectors.a
    blocks["group.b"] = fitted.vectors.b
    blocks.update({f"adam.m.{k}": v for k, v in opt.m.items()})
    blocks.update({f"adam.v.{k}": v for k, v in opt.v.items()})
    blocks["loss_history"] = np.asarray(fitted.state.loss_history, dtype=np.float64)
    return write_checkpoint(path, header, blocks)


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def load_diffairec(path) -> tuple[Fitted, dict]:
    h, blocks = read_checkpoint(path)
    if h.get("schema") != "diffairec":
        raise FormatError(f"{path}: checkpoint schema is {h.get('schema')!r}, expected 'diffairec'")
    cfg = ModelConfig(
        m=int(h["m"]), T=int(h["T"]), time_dim=int(h["time_dim"]), mlp1_hidden=_ints(h["mlp1_hidden"]),
        mlp2_hidden=_ints(h["mlp2_hidden"]), mlp3_hidden=_ints(h["mlp3_hidden"]),
        feature_dim=int(h["feature_dim"]), cond_dim=int(h["cond_dim"]), attn_tokens=int(h["attn_tokens"]),
        attn_width=int(h["attn_width"]), variant=h["variant"], seed=int(h["init_seed"]))

    def section(prefix):
        return {k[len(prefix):]: v for k, v in blocks.items() if k.startswith(prefix)}

    model = DifFaiRec(cfg, section("param."), section("frozen."))
    lr, b1, b2, eps, steps = h["adam"].split()
    opt = Adam(float(lr), float(b1), float(b2), float(eps), int(steps), section("adam.m."), section("adam.v."))
    state = TrainState(opt, int(h["epoch"]), [float(x) for x in blocks["loss_history"]])
    deg = tuple(bool(int(x)) for x in h["degenerate"].split(","))
    vectors = GroupVectors(blocks["group.a"], blocks["group.b"], h["group_method"], deg)
    return Fitted(model, vectors, state), h


def save_mf(path, params: MFParams, history: list[float], dataset_fp: str):
    header = [("schema", "mf"), ("factors", params.factors), ("reg", float(params.reg)), ("dataset", dataset_fp)]
    return write_checkpoint(path, header, {"P": params.P, "Q": params.Q,
                                           "loss_history": np.asarray(history, dtype=np.float64)})


def load_mf(path) -> tuple[MFParams, list[float], dict]:
    h, blocks = read_checkpoint(path)
    if h.get("schema") != "mf":
        raise FormatError(f"{path}: checkpoint schema is {h.get('schema')!r}, expected 'mf'")
    return MFParams(blocks["P"], blocks["Q"], float(h["reg"])), list(blocks["loss_history"]), h


# ----------------------------------------------------------------------------
# multi-seed comparisons


def seeded(cfg: RunConfig, seed: int) -> RunConfig:
    """Same settings with every seed (split, init, synthetic data) moved together."""
    return cfg.replace(seed=seed, syn_seed=seed if cfg.dataset == "synthetic" else cfg.syn_seed)


def compare_variants(cfg: RunConfig, seeds, arms: dict) -> dict[str, list[MetricsReport]]:
    """Run each arm on each seed. ``arms`` maps a label to ``run_once`` kwargs,
    optionally with a ``ratio`` entry for minority under-sampling."""
    out: dict[str, list[MetricsReport]] = {name: [] for name in arms}
    for seed in seeds:
        c = seeded(cfg, seed)
        prep = prepare(c)
        for name, kw in arms.items():
            kw = dict(kw)
            sub = undersample_minority(prep, kw.pop("ratio", 0.0), seed)
            report, _ = run_once(c, sub, **kw)
            out[name].append(report)
            log.info("seed %d %s: %s", seed, name,
                     " ".join(f"{k}={getattr(report, k):.4f}" for k in MetricsReport.KEYS))
    return out


def median_table(results: dict[str, list[MetricsReport]]) -> list[tuple[str, dict[str, float]]]:
    return [(name, {k: float(np.median([getattr(r, k) for r in reps])) for k in MetricsReport.KEYS})
            for name, reps in results.items()]
