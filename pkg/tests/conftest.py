import os
from pathlib import Path

import hypothesis
import numpy as np
import pytest

hypothesis.settings.register_profile("default", deadline=None, max_examples=50)
hypothesis.settings.register_profile("ci", deadline=None, max_examples=200)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

DATA = Path(__file__).parent / "data"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def ml_dir():
    return DATA / "ml_subsample"


def write(path: Path, text: str, encoding="utf-8") -> Path:
    path.write_bytes(text.encode(encoding))
    return path


TINY = dict(dataset="synthetic", syn_users=24, syn_items=20, syn_density=0.5, min_user_ratings=6, min_train=3,
            T=6, attn_tokens=2, attn_width=4, time_dim=6, mlp1_hidden=[12], mlp2_hidden=[8], mlp3_hidden=[12],
            feature_dim=8, cond_dim=8, batch_size=8, epochs=2, mf_epochs=2, mf_factors=3, k=3, chunk=7)


def tiny_config(**changes):
    from diffairec.config import RunConfig

    return RunConfig(**{**TINY, **changes}).validate()


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_prep(tiny_cfg):
    from diffairec.experiments import prepare

    return prepare(tiny_cfg)


# one verdict line per acceptance criterion, repeated at the end of the session
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
