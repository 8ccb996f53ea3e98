import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from gcpo import gcpo as G
from gcpo.config import TrainConfig
from gcpo.grpo import SurrogateConfig, group_advantage, grpo_objective
from gcpo.policy import TokenSeq, init_policy, snapshot
from gcpo.rollout import build_x_i, build_x_ij, expected_generations, sample_collider_outputs, sample_groups
from gcpo.tasks import make_modadd_query

L = math.log


# ---------------------------------------------------------------- representations

def test_query_baseline_examples():
    v = np.array([1.0, -2.0, 0.5])
    assert np.array_equal(G.rep_query_baseline([v, v, v]), v)
    assert np.array_equal(G.rep_query_baseline([v, -v]), np.zeros(3))
    zs = np.random.default_rng(0).normal(size=(3, 5))
    assert np.allclose(G.rep_query_baseline(list(zs)), [(zs[0, k] + zs[1, k] + zs[2, k]) / 3 for k in range(5)],
                       atol=1e-15)
    with pytest.raises(ValueError):
        G.rep_query_baseline([v, np.ones(2)])


def _ctx(task, snap, n=2, seed=0):
    g = sample_groups(snap, [make_modadd_query(task, 1, 2).q], n, [seed], 4)[0]
    c = sample_collider_outputs(snap, g, seed=9, max_len=4)
    return g, c


def test_rep_conditional_single_sample(tiny_snap, task):
    from gcpo.policy import final_hidden, sample
    g, c = _ctx(task, tiny_snap)
    x = build_x_i(g.q, g, c, 0, task.vocab.sep)
    z = G.rep_conditional(tiny_snap, x, 1, seed=4, max_len=4)
    p = x.tokens.ids + (task.vocab.sep,)
    y = sample(tiny_snap, p, 4, 1.0, G._sample_seeds(4, 1)[0])
    assert np.allclose(z, final_hidden(tiny_snap.params, list(p) + list(y.ids)), atol=1e-12)


def test_rep_conditional_greedy_pair_equals_single(tiny_snap, task):
    g, c = _ctx(task, tiny_snap)
    x = build_x_i(g.q, g, c, 1, task.vocab.sep)
    one = G.rep_conditional(tiny_snap, x, 1, seed=0, max_len=4, greedy=True)
    two = G.rep_conditional(tiny_snap, x, 2, seed=5, max_len=4, greedy=True)
    assert np.allclose(one, two, atol=1e-12)


def test_rep_collider_degenerate_variants(tiny_snap, task):
    g, c = _ctx(task, tiny_snap)
    x = build_x_i(g.q, g, c, 0, task.vocab.sep)
    same = G.rep_collider(tiny_snap, [x, x, x], 2, seed=1, max_len=4, greedy=True)
    assert np.allclose(same, G.rep_conditional(tiny_snap, x, 2, seed=1, max_len=4, greedy=True), atol=1e-12)
    single = G.rep_collider(tiny_snap, [x], 2, seed=1, max_len=4)
    from gcpo import rng
    assert np.allclose(single, G.rep_conditional(tiny_snap, x, 2, seed=rng.derive_seed(1, 0), max_len=4),
                       atol=1e-12)


# ---------------------------------------------------------------- weights

def test_upsilon_examples():
    z = np.array([0.3, -1.2, 2.0])
    assert G.upsilon(z, z, 2.0) == pytest.approx(2.0, abs=1e-15)
    assert G.upsilon(np.array([1.0, 0.0]), np.array([0.0, 3.0]), 2.0) == 0.0
    assert G.upsilon(z, -z, 2.0) == pytest.approx(-2.0, abs=1e-15)


def test_upsilon_zero_norm_guard():
    ticks = []
    assert G.upsilon(np.zeros(3), np.ones(3), 2.0, counter=ticks) == 0.0
    assert ticks == [1]


@settings(max_examples=200)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.lists(st.floats(-10, 10), min_size=3, max_size=3),
       st.sampled_from(G.METRICS), st.floats(0.1, 5))
def test_upsilon_bounded(a, b, metric, alpha):
    u = G.upsilon(np.array(a), np.array(b), alpha, metric)
    assert abs(u) <= alpha + 1e-12


@pytest.mark.parametrize("metric", ["euclidean", "gaussian"])
def test_distance_similarities(metric):
    a = np.array([1.0, 2.0, -1.0])
    assert G.similarity(a, a, metric) == pytest.approx(1.0, abs=1e-15)
    near, far = a + 0.1, a + 3.0
    assert G.similarity(a, near, metric) > G.similarity(a, far, metric)
    assert -1.0 <= G.similarity(a, -a, metric) <= 1.0


def test_causal_advantage_examples():
    assert G.causal_advantage([0.5, -1.5], [1.0, 1.0]) == [0.5, -1.5]
    assert G.causal_advantage([0.0, 1.0], [1.7, 1.0])[0] == 0.0
    assert G.causal_advantage([1, -1], [2, -2]) == [2, 2]
    with pytest.raises(ValueError):
        G.causal_advantage([1, 2], [1])


# ---------------------------------------------------------------- causal reference

def test_combine_variant_probs():
    assert G.combine_variant_probs([0.37] * 4) == pytest.approx(0.37, abs=1e-15)
    assert G.combine_variant_probs([0.2, 0.4]) == pytest.approx(0.3, abs=1e-15)
    assert G.combine_variant_probs([0.2, 0.4], "sum") == pytest.approx(0.6, abs=1e-15)


def test_phi_token_prob_uniform_init(task):
    model = init_policy(16, 1, task.vocab, seed=0, max_context=64, n_heads=2, dtype=torch.float64)
    ctxs = [TokenSeq([1, 4, 14, 5, 15, 3, 6], "context"), TokenSeq([1, 4, 14, 5, 15, 3, 7], "context")]
    resp = TokenSeq([16, 9, 2])
    for j in range(3):
        assert G.phi_token_prob(model, ctxs, resp, j) == pytest.approx(1 / task.vocab.n_emittable, abs=1e-14)


def test_causal_ref_prob_examples():
    assert G.causal_ref_prob(0.5, 0.5, 0.5) == (0.5, 0.5)
    cl, raw = G.causal_ref_prob(0.1, 0.9, 0.1)
    assert cl == 1e-8 and raw == pytest.approx(-0.7)
    cl, raw = G.causal_ref_prob(0.9, 0.1, 0.9)
    assert cl == 1.0 and raw == pytest.approx(1.7)


def test_causal_ref_tokens_counts_clamps():
    cl, raw, k = G.causal_ref_tokens(np.array([0.1, 0.9, 0.5]), np.array([[0.9, 0.1, 0.5]]),
                                     np.array([0.1, 0.9, 0.5]))
    assert k == 2 and list(cl) == [1e-8, 1.0, 0.5]


def test_kl_causal_examples():
    lp = torch.tensor([[L(0.3), L(0.6)], [L(0.2), 0.0]], dtype=torch.float64)
    mask = torch.tensor([[True, True], [True, False]])
    assert float(G.kl_causal_from(lp, mask, lp.exp(), 2)) == 0.0
    one = torch.tensor([[L(0.25)]], dtype=torch.float64)
    val = G.kl_causal_from(one.repeat(2, 1), torch.ones(2, 1, dtype=torch.bool), torch.full((2, 1), 0.5), 2)
    assert float(val) == pytest.approx(2 - L(2) - 1, abs=1e-15)
    cl, _, k = G.causal_ref_tokens(np.array([0.1, 0.1]), np.array([[0.9, 0.9]]), np.array([0.1, 0.1]))
    assert k == 2
    half = torch.full((1, 2), L(0.5), dtype=torch.float64).repeat(2, 1)
    v = float(G.kl_causal_from(half, torch.ones(2, 2, dtype=torch.bool), torch.tensor(np.stack([cl, cl])), 2))
    assert math.isfinite(v) and v > 0


# ---------------------------------------------------------------- objective oracle

def test_gcpo_objective_matches_hand_oracle():
    # 2 responses x 2 tokens with hand-set representations and probabilities
    logp = [[L(0.5), L(0.3)], [L(0.2), L(0.7)]]
    old = [[L(0.4), L(0.3)], [L(0.3), L(0.5)]]
    ref = [[L(0.45), L(0.25)], [L(0.25), L(0.6)]]
    logp_x = [[L(0.55), L(0.2)], [L(0.1), L(0.65)]]
    rewards = [1.1, 0.1]
    z = np.array([[1.0, 0.5, -0.2], [0.1, -1.0, 0.4]])
    Z_bar = np.array([[0.8, 0.1, 0.3], [-0.2, -0.4, 0.9]])
    Zp_bar = np.array([[0.2, 0.2, 0.2], [0.5, -0.3, 0.1]])
    pi_xi = [[0.6, 0.35], [0.15, 0.7]]
    phi = [[[0.5, 0.3], [0.7, 0.2]], [[0.9, 0.6], [0.8, 0.5]]]   # [i][l][j]
    pi_q = [[0.4, 0.3], [0.3, 0.5]]
    alpha, kappa, eps, beta = 2.0, 0.06, 0.2, 0.04

    # oracle
    zbar = [(z[0, k] + z[1, k]) / 2 for k in range(3)]
    A = oracles.advantages(rewards)
    ups = [alpha * oracles.cosine(z[i], [Z_bar[i, k] - Zp_bar[i, k] + zbar[k] for k in range(3)]) for i in range(2)]
    B = [a * u for a, u in zip(A, ups)]
    ref_p = [oracles.causal_ref(pi_xi[i], phi[i], pi_q[i]) for i in range(2)]
    want = oracles.surrogate(logp, old, ref, B, eps, beta) - kappa * oracles.kl_causal(logp_x, ref_p)

    # implementation
    reps = G.CausalReps(z, G.rep_query_baseline(list(z)), Z_bar, Zp_bar)
    w = G.causal_weights(reps, group_advantage(rewards), alpha)
    refs, clamps = [], 0
    for i in range(2):
        cl, _, k = G.causal_ref_tokens(np.array(pi_xi[i]), np.array(phi[i]), np.array(pi_q[i]))
        refs.append(list(cl))
        clamps += k
    assert clamps == 1   # token (1, 0): 0.15 - 0.85 + 0.3 < 0
    t = lambda rows: torch.tensor(rows, dtype=torch.float64)  # noqa: E731
    mask = torch.ones(2, 2, dtype=torch.bool)
    got, stats = G.gcpo_objective_from(t(logp), t(old), t(ref), mask, t(w.b), t(logp_x), mask, t(refs), 2,
                                       SurrogateConfig(eps, beta), kappa)
    assert w.upsilon == pytest.approx(ups, abs=1e-14)
    assert got.item() == pytest.approx(want, abs=1e-10)
    assert stats["mean_kl_causal"] >= 0


# ---------------------------------------------------------------- pipeline

def _batch(task, snap, n=3, seeds=(1, 2)):
    qs = [make_modadd_query(task, a, 3).q for a in range(len(seeds))]
    groups = sample_groups(snap, qs, n, list(seeds), 4)
    for g, r in zip(groups, ([1.1, 0.1, 0.0], [0.0, 1.1, 1.1])):
        g.rewards = r[: g.n]
    return groups


def _cfg(**kw):
    base = dict(algorithm="gcpo", n=3, m=2, max_len=4, d=16, L=1, n_heads=2, max_context=64)
    base.update(kw)
    return TrainConfig(**base)


def test_pipeline_counts_and_shapes(tiny_snap, task):
    groups = _batch(task, tiny_snap)
    causal = G.compute_causal_inputs(tiny_snap, groups, [5, 6], _cfg())
    for g, c in zip(groups, causal):
        assert c.generations.total == expected_generations(3, 2)
        assert (c.generations.collider, c.generations.conditional, c.generations.projected) == (3, 6, 18)
        assert len(c.x_i) == 3 and len(c.weights.upsilon) == 3
        assert [len(v) for v in c.ref.values] == [len(y) for y in g.responses]
        assert all(abs(u) <= 2.0 for u in c.weights.upsilon)
        assert all(1e-8 <= p <= 1.0 for row in c.ref.values for p in row)


def test_pipeline_replay(tiny_snap, task):
    groups = _batch(task, tiny_snap)
    a = G.compute_causal_inputs(tiny_snap, groups, [5, 6], _cfg())
    b = G.compute_causal_inputs(tiny_snap, groups, [5, 6], _cfg())
    assert [c.weights.upsilon for c in a] == [c.weights.upsilon for c in b]
    assert [c.ref.values for c in a] == [c.ref.values for c in b]


def test_reference_probs_match_direct_evaluation(tiny_snap, task):
    groups = _batch(task, tiny_snap)
    c = G.compute_causal_inputs(tiny_snap, groups, [5, 6], _cfg())[0]
    g = groups[0]
    sep = task.vocab.sep
    i = 1
    y = g.responses[i]
    variants = [build_x_ij(g.q, g, c.collider, i, l, sep).tokens for l in range(3)]
    for j in range(len(y)):
        pi_xi = G.variant_token_probs(tiny_snap.params, [c.x_i[i].tokens], y)[0, j]
        phi = G.phi_token_prob(tiny_snap.params, variants, y, j)
        want, _ = G.causal_ref_prob(pi_xi, phi, math.exp(g.old_logps[i][j]))
        assert c.ref.values[i][j] == pytest.approx(want, abs=1e-12)


def test_reduction_to_group_objective(tiny, tiny_snap, task):
    groups = _batch(task, tiny_snap)
    causal = G.compute_causal_inputs(tiny_snap, groups, [5, 6], _cfg(force_upsilon=1.0))
    with torch.no_grad():
        tiny.head.mul_(1.1)
    cfg = SurrogateConfig(0.2, 0.04)
    a, _ = G.gcpo_objective(groups, tiny, tiny_snap, tiny_snap, cfg, 0.0, causal)
    b, _ = grpo_objective(groups, tiny, tiny_snap, tiny_snap, cfg)
    assert a.item() == b.item()


def test_default_objective_finite_and_differentiable(tiny, tiny_snap, task):
    groups = _batch(task, tiny_snap)
    causal = G.compute_causal_inputs(tiny_snap, groups, [5, 6], _cfg())
    obj, stats = G.gcpo_objective(groups, tiny, tiny_snap, tiny_snap, SurrogateConfig(), 0.06, causal)
    assert math.isfinite(obj.item()) and stats["mean_kl_causal"] >= 0
    grads = torch.autograd.grad(obj, list(tiny.parameters()), allow_unused=True)
    assert all(g is None or torch.isfinite(g).all() for g in grads)
    d = G.causal_diagnostics(causal)
    assert set(d) >= {"upsilon_mean", "upsilon_min", "upsilon_max", "clamp_count"}


def test_objective_requires_causal_inputs(tiny, tiny_snap, task):
    from gcpo.rollout import StateError
    with pytest.raises(StateError):
        G.gcpo_objective(_batch(task, tiny_snap), tiny, tiny_snap, tiny_snap, SurrogateConfig(), 0.06, None)
