import math

import numpy as np
import pytest

import oracle
from primemdm import get_schedule, make_codec
from primemdm.data import TokenRows
from primemdm.model import Model
from primemdm.net import NetConfig, forward, init
from primemdm.schedule import loss_weight
from primemdm.trainer import (AdamState, NumericFailure, TrainConfig, eval_nll, exact_bound,
                              fit, loss_and_grad, loss_estimate, stratified_times,
                              token_logprobs, train_step)


def build(C, l, L, head="joint", hidden=16, layers=3, seed=0, zero_head=False, embed=None):
    codec = make_codec(C, l)
    cfg = NetConfig(L, l, codec.base, C, embed_dim=embed or 4 * l, hidden_dim=hidden,
                    num_layers=layers, head=head)
    model = Model(cfg, codec)
    return model, init(cfg, np.random.default_rng(seed), zero_head=zero_head)


def uniform_sampler(C, L):
    return lambda rng, n: rng.integers(0, C, size=(n, L))


def test_loss_examples_all_masked_uniform():
    # all masked, uniform logits: loss = w(t) * L * (-log C), with w(t) < 0
    model, p = build(8, 1, 3, zero_head=True)
    sch = get_schedule("linear")
    x0 = np.array([[1, 5, 7]])
    y_t = np.full((1, 3, 1), 8)
    loss, _, lp = loss_and_grad(p, model, x0, y_t, np.array([0.5]), sch)
    assert loss == pytest.approx(loss_weight(sch, 0.5) * 3 * -math.log(8))
    assert loss == pytest.approx(2 * 3 * math.log(8))
    np.testing.assert_allclose(lp, -math.log(8))


def test_fully_visible_sequence_has_zero_loss():
    model, p = build(16, 2, 2)
    x0 = np.array([[3, 12]])
    y_t = model.codec.encode_array(x0)
    loss, grads, _ = loss_and_grad(p, model, x0, y_t, np.array([0.3]), get_schedule("linear"))
    assert loss == 0.0
    assert all(not g.any() for g in grads.values())


def test_partial_mask_uses_valid_set():
    # C=4, l=2, first digit visible: the model only has to pick among two codes
    model, p = build(4, 2, 1, zero_head=True)
    x0 = np.array([[2]])
    y_t = np.array([[[1, 2]]])
    lp, _ = token_logprobs(model, forward(p, y_t, model.config), x0, y_t)
    assert lp[0, 0] == pytest.approx(-math.log(2))
    lp2, _ = token_logprobs(model, forward(p, y_t, model.config), x0, y_t, carryover=False)
    assert lp2[0, 0] == pytest.approx(-math.log(4))


@pytest.mark.parametrize("seed", range(5))
def test_l1_loss_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    C = int(rng.integers(2, 17))
    L = int(rng.integers(1, 5))
    model, p = build(C, 1, L, seed=seed)
    sch = get_schedule("linear")
    x0 = rng.integers(0, C, size=(6, L))
    t = rng.uniform(1e-5, 1, 6)
    masked = rng.random((6, L)) < 0.6
    y_t = np.where(masked, C, x0)[..., None]
    loss, _, _ = loss_and_grad(p, model, x0, y_t, t, sch)
    logits = forward(p, y_t, model.config)
    ref = np.mean([oracle.sequence_loss(logits[i], x0[i], masked[i], t[i], oracle.linear_alpha,
                                        oracle.linear_alpha_prime) for i in range(6)])
    assert abs(loss - ref) < 1e-10


@pytest.mark.parametrize("seed,sched", [(0, "linear"), (1, "linear"), (2, "poly2"), (3, "poly3")])
def test_l1_exact_bound_matches_oracle(seed, sched):
    rng = np.random.default_rng(seed)
    C = int(rng.integers(2, 17))
    L = int(rng.integers(1, 5))
    model, p = build(C, 1, L, seed=seed)
    sch = get_schedule(sched)
    if sched == "linear":
        a, ap = oracle.linear_alpha, oracle.linear_alpha_prime
    else:
        a, ap = oracle.poly_alpha(int(sched[4:]))
    x0 = rng.integers(0, C, size=(3, L))
    got = exact_bound(p, model, x0, sch)

    def logits_fn(y):
        return forward(p, np.array(y)[:, None], model.config)

    for r in range(3):
        ref = oracle.exact_bound(logits_fn, x0[r], C, a, ap)
        assert abs(got[r] - ref) < 1e-10


def test_exact_bound_uniform_model_is_L_log_C():
    for C, l in [(8, 1), (8, 3), (16, 2)]:
        model, p = build(C, l, 2, zero_head=True)
        b = exact_bound(p, model, np.array([[0, C - 1], [3, 5]]), get_schedule("linear"))
        np.testing.assert_allclose(b, 2 * math.log(C) * (1 - 1e-4), rtol=0, atol=1e-10)


def test_bound_upper_bounds_nll():
    # L=1, C=8, l=3: the bound averaged under any data law q is >= its entropy
    model, p = build(8, 3, 1, hidden=32, embed=12, seed=4)
    sch = get_schedule("linear")
    q = np.array([0.3, 0.2, 0.1, 0.1, 0.1, 0.1, 0.05, 0.05])
    state = AdamState.zeros(p)
    cfg = TrainConfig(batch_size=512, learning_rate=3e-3, dtype="float64")
    rng = np.random.default_rng(0)
    for _ in range(300):
        p, state, _ = train_step(p, model, rng.choice(8, size=(512, 1), p=q), sch, state, cfg, rng)
    bounds = exact_bound(p, model, np.arange(8)[:, None], sch)
    # full-time integral: the [0, t_min] slice only lowers the bound by O(t_min)
    entropy = -np.sum(q * np.log(q))
    assert float(q @ bounds) >= entropy - 1e-3
    # the bound for each x is an upper bound on -log p_model(x) >= 0
    assert np.all(bounds > 0)


def test_l1_reverse_step_matches_oracle():
    from primemdm.sampler import reverse_transition_probs
    rng = np.random.default_rng(7)
    for _ in range(5):
        C = int(rng.integers(2, 17))
        codec = make_codec(C, 1)
        probs = rng.dirichlet(np.ones(C))
        t = rng.uniform(0.1, 1)
        s = rng.uniform(0, t)
        got = reverse_transition_probs(probs, (C,), s, t, get_schedule("linear"), codec)
        ref = oracle.reverse_step(list(probs), True, s, t, oracle.linear_alpha)
        assert abs(got[(C,)] - ref["m"]) < 1e-10
        for x in range(C):
            assert abs(got.get((x,), 0.0) - ref[x]) < 1e-10


def test_lr_zero_leaves_params_unchanged():
    model, p = build(16, 2, 2)
    before = p.flat().copy()
    cfg = TrainConfig(batch_size=64, learning_rate=0.0, steps=5, dtype="float64")
    q, hist = fit(p, model, uniform_sampler(16, 2), get_schedule("linear"), cfg)
    np.testing.assert_array_equal(q.flat(), before)
    assert len(hist) == 5


def test_fit_deterministic(tmp_path):
    model, p = build(16, 2, 2)
    cfg = TrainConfig(batch_size=64, steps=20, seed=3)
    a, ha = fit(p, model, uniform_sampler(16, 2), get_schedule("linear"), cfg)
    b, hb = fit(p, model, uniform_sampler(16, 2), get_schedule("linear"), cfg)
    assert ha == hb
    np.testing.assert_array_equal(a.flat(), b.flat())


def test_fit_writes_metrics(tmp_path):
    model, p = build(16, 2, 2)
    path = tmp_path / "m.csv"
    fit(p, model, uniform_sampler(16, 2), get_schedule("linear"),
        TrainConfig(batch_size=32, steps=10), metrics_path=path, eval_every=5, eval_mc=16,
        isr_value=0.25)
    rows = path.read_text().splitlines()
    assert rows[0] == "step,wallclock,loss,nll_eval,isr_running"
    assert len(rows) == 11
    assert rows[5].split(",")[3] != "" and rows[4].split(",")[3] == ""
    assert rows[1].split(",")[4] == "0.25"


def test_loss_decreases():
    # C=64 tokens over L=2 with a strongly non-uniform law
    model, p = build(64, 2, 2, hidden=128, layers=3, embed=16)
    w = np.exp(-np.arange(64) / 6.0)
    w /= w.sum()

    def sampler(rng, n):
        x = rng.choice(64, size=n, p=w)
        return np.stack([x, (x + 1) % 64], axis=1)

    cfg = TrainConfig(batch_size=256, steps=500, learning_rate=1e-3, seed=0)
    _, hist = fit(p, model, sampler, get_schedule("linear"), cfg)
    assert np.mean(hist[-50:]) < 0.7 * np.mean(hist[:50])


def test_nan_guard():
    model, p = build(16, 2, 2)
    p["W0"][0, 0] = np.nan
    with pytest.raises(NumericFailure):
        train_step(p, model, np.zeros((4, 2), int), get_schedule("linear"), AdamState.zeros(p),
                   TrainConfig(batch_size=4), np.random.default_rng(0))


def test_stratified_times_cover_range():
    t = stratified_times(1000, np.random.default_rng(0), 1e-4)
    assert t.min() >= 1e-4 and t.max() <= 1.0
    counts = np.histogram(t, bins=10, range=(1e-4, 1.0))[0]
    assert np.all(counts == 100)


def test_loss_estimate_report():
    model, p = build(16, 2, 2)
    rep = loss_estimate(p, model, np.array([1, 2]), get_schedule("linear"),
                        np.random.default_rng(0), TrainConfig())
    assert rep.per_token.shape == (2,)
    assert 0 <= rep.masked_count <= 4
    assert rep.loss_value >= 0


@pytest.mark.parametrize("C,l", [(4, 1), (16, 2), (64, 3)])
def test_eval_nll_uniform_model_gives_log_c(C, l):
    model, p = build(C, l, 256, zero_head=True, hidden=8, layers=2)
    rep = eval_nll(p, model, uniform_sampler(C, 256), get_schedule("linear"), 10_000,
                   np.random.default_rng(0))
    assert rep.stderr < 5e-3
    assert abs(rep.nats_per_token - math.log(C)) < 4 * rep.stderr + 1e-3
    assert rep.perplexity == pytest.approx(math.exp(rep.nats_per_token))


def test_eval_nll_stderr_scaling_and_single_sample():
    model, p = build(8, 1, 16, zero_head=True, hidden=8, layers=2)
    sch = get_schedule("linear")
    a = eval_nll(p, model, uniform_sampler(8, 16), sch, 400, np.random.default_rng(1))
    b = eval_nll(p, model, uniform_sampler(8, 16), sch, 6400, np.random.default_rng(1))
    assert b.stderr / a.stderr == pytest.approx(0.25, rel=0.35)
    one = eval_nll(p, model, uniform_sampler(8, 16), sch, 1, np.random.default_rng(1))
    assert one.stderr is None
    with pytest.raises(ValueError):
        eval_nll(p, model, uniform_sampler(8, 16), sch, 0, np.random.default_rng(1))


def test_eval_nll_agrees_with_exact_bound():
    model, p = build(16, 2, 2, seed=5)
    sch = get_schedule("linear")
    rows = TokenRows(np.array([[3, 9]]))
    rep = eval_nll(p, model, rows, sch, 20_000, np.random.default_rng(2))
    exact = exact_bound(p, model, np.array([[3, 9]]), sch)[0]
    assert abs(rep.nats_per_sequence - exact) < 4 * rep.stderr * 2 + 1e-3
