"""Run configuration: a flat ``key = value`` text file with typed validation.

Lines starting with ``#`` are comments. Lists are comma separated. Unknown
keys and out-of-range values are rejected before anything is computed;
command-line overrides use the same ``key=value`` syntax and win over the
file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import ATTRIBUTES
from .model import VARIANTS


class ConfigError(ValueError):
    pass


DEFAULT_K = {"movielens": 7, "lastfm": 10, "synthetic": 7}


@dataclass
class RunConfig:
    # data
    dataset: str = "synthetic"  # synthetic | movielens | lastfm
    ratings_path: str = ""
    users_path: str = ""
    tags_path: str = ""
    attribute: str = "gender"
    age_threshold: float = 50
    activity_threshold: float = 15000
    diversity_threshold: float = 300
    normalization: str = "auto"
    min_user_ratings: int = 13
    min_train: int = 10
    split_ratios: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    # planted-bias synthetic data
    syn_users: int = 50
    syn_items: int = 80
    syn_rank: int = 4
    syn_minority_frac: float = 0.3
    syn_shift: float = 1.0
    syn_density: float = 0.25
    syn_minority_activity: float = 1.0
    syn_seed: int = 0
    # model
    model: str = "diffairec"  # diffairec | mf
    variant: str = "base"
    group_method: str = "mean_pool"
    T: int = 100
    L: float = 1e-4
    beta_min: float = 1e-5
    attn_tokens: int = 4
    attn_width: int = 64
    time_dim: int = 64
    mlp1_hidden: list[int] = field(default_factory=lambda: [512])
    mlp2_hidden: list[int] = field(default_factory=lambda: [256])
    mlp3_hidden: list[int] = field(default_factory=lambda: [512])
    feature_dim: int = 256
    cond_dim: int = 256
    # training
    batch_size: int = 64
    epochs: int = 50
    lr: float = 1e-3
    mf_factors: int = 20
    mf_reg: float = 0.1
    mf_lr: float = 1e-3
    mf_batch_size: int = 64
    mf_epochs: int = 20
    # inference and evaluation
    k: int = 0  # 0 means the dataset default (see DEFAULT_K)
    t_start: int = 0  # 0 means start from T
    n_samples: int = 1
    workers: int = 1
    chunk: int = 128
    # experiments
    sweep_param: str = "T"
    sweep_values: list[float] = field(default_factory=list)
    sample_ratios: list[float] = field(default_factory=lambda: [0.5, 0.7, 0.9])
    seed: int = 0
    out: str = "runs"

    def validate(self) -> "RunConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.dataset in ("synthetic", "movielens", "lastfm"), f"dataset must be synthetic, movielens or lastfm, got {self.dataset!r}")
        need(self.attribute in ATTRIBUTES, f"attribute must be one of {ATTRIBUTES}, got {self.attribute!r}")
        need(self.normalization in ("auto", "minmax", "log1p-minmax"), f"unknown normalization {self.normalization!r}")
        need(self.model in ("diffairec", "mf"), f"model must be diffairec or mf, got {self.model!r}")
        need(self.variant in VARIANTS, f"variant must be one of {VARIANTS}, got {self.variant!r}")
        need(self.group_method in ("mean_pool", "pca"), f"group_method must be mean_pool or pca, got {self.group_method!r}")
        need(len(self.split_ratios) == 3 and min(self.split_ratios) >= 0 and abs(sum(self.split_ratios) - 1) < 1e-9,
             "split_ratios must be three non-negative numbers summing to 1")
        for name in ("T", "attn_tokens", "attn_width", "time_dim", "feature_dim", "cond_dim", "batch_size",
                     "mf_factors", "mf_batch_size", "n_samples", "workers", "chunk", "syn_users",
                     "syn_items", "syn_rank", "min_train"):
            need(getattr(self, name) >= 1, f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("epochs", "mf_epochs", "min_user_ratings", "seed", "syn_seed", "t_start", "k"):
            need(getattr(self, name) >= 0, f"{name} must be >= 0, got {getattr(self, name)}")
        need(self.t_start <= self.T, f"t_start must be <= T ({self.T}), got {self.t_start}")
        need(self.L > 0 and self.beta_min >= 0 and self.L + self.beta_min < 1,
             "noise scale L must be > 0, beta_min >= 0 and L + beta_min < 1")
        for name in ("lr", "mf_lr"):
            need(getattr(self, name) > 0, f"{name} must be > 0")
        need(self.mf_reg >= 0, "mf_reg must be >= 0")
        for name in ("mlp1_hidden", "mlp2_hidden", "mlp3_hidden"):
            need(all(w >= 1 for w in getattr(self, name)), f"{name} widths must be >= 1")
        need(0 < self.syn_minority_frac < 1, "syn_minority_frac must be in (0, 1)")
        need(0 < self.syn_density <= 1, "syn_density must be in (0, 1]")
        need(self.syn_minority_activity > 0, "syn_minority_activity must be > 0")
        need(self.sweep_param in ("T", "L"), f"sweep_param must be T or L, got {self.sweep_param!r}")
        need(all(0 <= r < 1 for r in self.sample_ratios), "sample_ratios must lie in [0, 1)")
        if self.dataset != "synthetic":
            need(bool(self.ratings_path), f"dataset {self.dataset} needs ratings_path")
        if self.dataset == "movielens" and self.attribute in ("gender", "age"):
            need(bool(self.users_path), f"attribute {self.attribute} needs users_path (the MovieLens users file)")
        if self.dataset == "lastfm" and self.attribute == "interest_diversity":
            need(bool(self.tags_path), "attribute interest_diversity needs tags_path (the LastFM user tags file)")
        return self

    # ------------------------------------------------------------------

    @property
    def top_k(self) -> int:
        return self.k or DEFAULT_K[self.dataset]

    def thresholds(self) -> dict:
        return {"age": self.age_threshold, "activity_level": self.activity_threshold,
                "interest_diversity": self.diversity_threshold}

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {','.join(_fmt(x) for x in v) if isinstance(v, list) else _fmt(v)}")
        return "\n".join(lines) + "\n"

    def hash(self, exclude=("out", "workers")) -> str:
        """Digest of every setting that can change results.

        ``chunk`` is included: matrix products over different batch shapes can
        round differently in the last bit.
        """
        d = {k: v for k, v in dataclasses.asdict(self).items() if k not in exclude}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes).validate()


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


_HINTS = typing.get_type_hints(RunConfig)
FIELDS = {f.name: _HINTS[f.name] for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, text: str):
    kind = FIELDS[key]
    text = text.strip()
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        inner = typing.get_args(kind)[0]
        return [inner(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {getattr(kind, '__name__', kind)}") from None


def parse_assignments(items, source: str = "overrides") -> dict:
    out = {}
    for lineno, raw in items:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        if key not in FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config(path=None, overrides=(), **flags) -> RunConfig:
    """File values, then ``key=value`` overrides, then explicit flags (None ignored)."""
    values = {}
    if path is not None:
        text = Path(path).read_text()
        values.update(parse_assignments(enumerate(text.splitlines(), start=1), str(path)))
    values.update(parse_assignments([(i, o) for i, o in enumerate(overrides, start=1)]))
    values.update({k: v for k, v in flags.items() if v is not None})
    return RunConfig(**values).validate()
