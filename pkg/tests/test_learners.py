import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from modcredit.env import VecEnv, make_task
from modcredit.learners import AGENTS, make_agent
from modcredit.learners.cvs import (
    CVSAgent,
    CvsBatch,
    CvsConfig,
    EmptyBids,
    Society,
    cvs_act,
    cvs_update,
    vickrey_select,
    vickrey_select_batch,
    vickrey_utility,
)
from modcredit.learners.nn import Adam, MlpStack, ShapeError, adam_step, mlp_backward, mlp_forward
from modcredit.learners.ppo import (
    EmptyBatch,
    PolicyNet,
    PpoConfig,
    log_softmax,
    policy_forward_ppof,
    policy_loss_grad,
)
from modcredit.learners.returns import gae, gae_segments
from modcredit.learners.tabular import Q_LEARNING, SARSA, TabularAgent, tabular_td_update
from modcredit.selfcheck import FD_H, FD_TOL, GRAD_CHECKS, fd_relative_error

TASK = make_task("linear_chain")


def flat(grads):
    return np.concatenate([g.ravel() for g in grads])


def one_hot_obs(rng, B, d=10):
    x = np.zeros((B, d))
    x[np.arange(B), rng.integers(0, 4, B)] = 1.0
    x[np.arange(B), 4 + rng.integers(0, d - 4, B)] = 1.0
    return x


# MLP ------------------------------------------------------------------------------


def test_zero_weights_give_zero_output():
    net = MlpStack(5, 3, n_nets=2)
    for p in net.params:
        p[...] = 0.0
    x = np.random.default_rng(0).normal(size=(7, 5))
    assert not mlp_forward(net, x)[0].any()


def test_identity_network():
    net = MlpStack(4, 4, hidden=(4, 4))
    W1, b1, W2, b2, W3, b3 = net.params
    for W in (W1, W2, W3):
        W[0] = np.eye(4)
    for b in (b1, b2, b3):
        b[...] = 0.0
    x = np.random.default_rng(1).random((6, 4))
    np.testing.assert_array_equal(net(x)[0], x)


def test_forward_deterministic():
    net = MlpStack(10, 6, seed=3)
    x = np.random.default_rng(2).normal(size=(9, 10))
    assert np.array_equal(net(x), net(x))
    assert np.array_equal(MlpStack(10, 6, seed=3)(x), net(x))


def test_hidden_layers_are_twenty_wide():
    net = MlpStack(10, 6)
    assert net.sizes == (10, 20, 20, 6)


def test_zero_output_gradient_gives_zero_parameter_gradient():
    net = MlpStack(5, 2, n_nets=3)
    x = np.random.default_rng(0).normal(size=(4, 5))
    _, cache = net.forward(x)
    assert not flat(mlp_backward(net, cache, np.zeros((3, 4, 2)))).any()


def test_backward_is_linear_in_samples():
    rng = np.random.default_rng(4)
    net = MlpStack(6, 2, n_nets=2, seed=4)
    x = rng.normal(size=(2, 6))
    dout = rng.normal(size=(2, 2, 2))
    _, cache = net.forward(x)
    both = flat(net.backward(cache, dout))
    parts = 0
    for i in range(2):
        _, c = net.forward(x[i:i + 1])
        parts = parts + flat(net.backward(c, dout[:, i:i + 1]))
    np.testing.assert_allclose(both, parts, rtol=1e-12, atol=1e-14)


def test_shape_errors():
    net = MlpStack(5, 2)
    with pytest.raises(ShapeError):
        net.forward(np.zeros((3, 4)))
    _, cache = net.forward(np.zeros((3, 5)))
    with pytest.raises(ShapeError):
        net.backward(cache, np.zeros((1, 2, 2)))
    opt = Adam(1e-3).bind(net)
    with pytest.raises(ShapeError):
        opt.step(net.params, net.params[:-1])


@pytest.mark.parametrize("kind", sorted(GRAD_CHECKS))
@pytest.mark.parametrize("seed", range(10))
def test_backward_matches_finite_differences(kind, seed):
    assert GRAD_CHECKS[kind](seed) < FD_TOL


def test_fd_oracle_detects_wrong_gradient():
    net = MlpStack(3, 1, seed=0)
    x = np.ones((2, 3))
    _, cache = net.forward(x)
    grads = net.backward(cache, np.ones((1, 2, 1)))
    grads[0] = grads[0] * 1.01
    assert fd_relative_error(net.params, lambda: float(net(x).sum()), grads, FD_H) > FD_TOL


# Adam ---------------------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    net = MlpStack(4, 2)
    before = flat(net.params).copy()
    adam_step(Adam(1e-2).bind(net), net.params, [np.zeros_like(p) for p in net.params])
    np.testing.assert_array_equal(flat(net.params), before)


def test_adam_first_step_closed_form():
    rng = np.random.default_rng(0)
    net = MlpStack(4, 2, n_nets=2)
    before = [p.copy() for p in net.params]
    grads = [rng.normal(size=p.shape) for p in net.params]
    lr, eps = 1e-2, 1e-8
    Adam(lr, eps=eps).bind(net).step(net.params, grads)
    for p0, p, g in zip(before, net.params, grads):
        np.testing.assert_allclose(p, p0 - lr * g / (np.abs(g) + eps), rtol=0, atol=1e-15)


def test_adam_matches_reference_over_steps():
    rng = np.random.default_rng(1)
    net = MlpStack(3, 1)
    opt = Adam(1e-3).bind(net)
    p_ref = [p.copy() for p in net.params]
    m = [np.zeros_like(p) for p in p_ref]
    v = [np.zeros_like(p) for p in p_ref]
    for t in range(1, 6):
        grads = [rng.normal(size=p.shape) for p in p_ref]
        opt.step(net.params, grads)
        for i, g in enumerate(grads):
            m[i] = 0.9 * m[i] + 0.1 * g
            v[i] = 0.999 * v[i] + 0.001 * g * g
            p_ref[i] -= 1e-3 * (m[i] / (1 - 0.9**t)) / (np.sqrt(v[i] / (1 - 0.999**t)) + 1e-8)
    for p, q in zip(net.params, p_ref):
        np.testing.assert_allclose(p, q, rtol=1e-12, atol=1e-15)


def test_adam_mask_freezes_inactive_networks():
    rng = np.random.default_rng(2)
    net = MlpStack(3, 1, n_nets=3)
    opt = Adam(1e-2).bind(net)
    before = [p.copy() for p in net.params]
    opt.step(net.params, [rng.normal(size=p.shape) for p in net.params], active=[True, False, True])
    for p0, p, m in zip(before, net.params, opt.m):
        assert np.array_equal(p0[1], p[1]) and not m[1].any()
        assert not np.array_equal(p0[0], p[0])
    assert opt.t.tolist() == [1, 0, 1]


def test_adam_deterministic():
    rng = np.random.default_rng(3)
    grads = [rng.normal(size=p.shape) for p in MlpStack(3, 2).params]
    outs = []
    for _ in range(2):
        net = MlpStack(3, 2)
        Adam(1e-3).bind(net).step(net.params, grads)
        outs.append(flat(net.params))
    assert np.array_equal(*outs)


# GAE ----------------------------------------------------------------------------------


def test_gae_worked_example():
    got = gae([0.0, 0.0, 1.0], [0.0, 0.0, 0.0], 0.0, 0.99, 0.95)
    np.testing.assert_allclose(got, [0.88454025, 0.9405, 1.0], rtol=0, atol=1e-12)


def hand_gae(r, v, v_next, g, lam):
    out, acc = [], 0.0
    vals = list(v) + [v_next]
    for t in reversed(range(len(r))):
        acc = r[t] + g * vals[t + 1] - vals[t] + g * lam * acc
        out.append(acc)
    return out[::-1]


def test_gae_lambda_zero_is_td_error():
    r, v = [0.5, -1.0, 2.0], [0.1, 0.2, 0.3]
    want = [r[0] + 0.9 * v[1] - v[0], r[1] + 0.9 * v[2] - v[1], r[2] + 0.9 * 0.7 - v[2]]
    np.testing.assert_allclose(gae(r, v, 0.7, 0.9, 0.0), want, atol=1e-15)


def test_gae_all_zero():
    assert not gae([0.0] * 5, [0.0] * 5, 0.0, 0.99, 0.95).any()


def test_gae_shape_error():
    with pytest.raises(ShapeError):
        gae([0.0, 1.0], [0.0], 0.0, 0.99, 0.95)
    with pytest.raises(ShapeError):
        gae_segments([0.0], [0.0, 1.0], [0.0], [1.0], 0.99, 0.95)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-5, 5)), st.floats(0, 1), st.floats(0, 1))
def test_property_gae_matches_hand_recursion(r, g, lam):
    v = np.linspace(-1, 1, len(r))
    np.testing.assert_allclose(gae(r, v, 0.3, g, lam), hand_gae(r, v, 0.3, g, lam), rtol=1e-10, atol=1e-10)


def test_gae_segments_cut_independently():
    r = np.array([0.0, 1.0, 0.0, 1.0])
    v = np.array([0.1, 0.2, 0.3, 0.4])
    nv = np.array([0.2, 0.0, 0.4, 0.5])
    cuts = np.array([0.0, 1.0, 0.0, 1.0])
    got = gae_segments(r, v, nv, cuts, 0.9, 0.8)
    np.testing.assert_allclose(got[:2], hand_gae(r[:2], v[:2], 0.0, 0.9, 0.8), atol=1e-14)
    np.testing.assert_allclose(got[2:], hand_gae(r[2:], v[2:], 0.5, 0.9, 0.8), atol=1e-14)


# PPO and PPOF ---------------------------------------------------------------------


def policy_case(factorized, seed=0, B=5):
    rng = np.random.default_rng(seed)
    pol = PolicyNet(10, 6, factorized, seed)
    obs = one_hot_obs(rng, B)
    actions = rng.integers(0, 6, B)
    z, _ = pol.logits(obs)
    logp = log_softmax(z)[np.arange(B), actions]
    return pol, obs, actions, logp, rng


@pytest.mark.parametrize("factorized", [False, True])
def test_ratio_one_gives_vanilla_policy_gradient(factorized):
    pol, obs, actions, logp, rng = policy_case(factorized)
    adv = rng.normal(size=len(actions))
    _, grads, _ = policy_loss_grad(pol, obs, actions, logp, adv, 0.2, 0.0, 5)

    def vanilla():
        lp = log_softmax(pol.logits(obs)[0])[np.arange(5), actions]
        return float(-(adv * lp).sum() / 5)

    assert fd_relative_error(pol.net.params, vanilla, grads) < FD_TOL


@pytest.mark.parametrize("factorized", [False, True])
def test_zero_advantage_leaves_entropy_term_only(factorized):
    pol, obs, actions, logp, _ = policy_case(factorized)
    adv = np.zeros(5)
    _, g_none, _ = policy_loss_grad(pol, obs, actions, logp, adv, 0.2, 0.0, 5)
    assert not flat(g_none).any()
    _, g_ent, _ = policy_loss_grad(pol, obs, actions, logp, adv, 0.2, 0.1, 5)

    def neg_entropy():
        lp = log_softmax(pol.logits(obs)[0])
        return float(0.1 * (np.exp(lp) * lp).sum() / 5)

    assert fd_relative_error(pol.net.params, neg_entropy, g_ent) < FD_TOL


def test_clip_boundary_zeroes_surrogate_gradient():
    pol, obs, actions, logp, _ = policy_case(False, B=1)
    logp_old = logp - np.log(1.5)
    loss, grads, info = policy_loss_grad(pol, obs, actions, logp_old, np.array([1.0]), 0.2, 0.0, 1)
    assert not flat(grads).any()
    assert loss == pytest.approx(-1.2)
    assert info["clip_frac"] == 1.0


@pytest.mark.parametrize("factorized", [False, True])
def test_distributions_are_valid(factorized):
    pol = PolicyNet(10, 6, factorized, 1)
    p = policy_forward_ppof(pol, one_hot_obs(np.random.default_rng(0), 50))
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-9)


def test_equal_logits_give_uniform_distribution():
    pol = PolicyNet(10, 6, True, 0)
    W3, b3 = pol.net.params[4], pol.net.params[5]
    W3[...] = 0.0
    b3[...] = 0.7
    p = pol.probs(one_hot_obs(np.random.default_rng(0), 3))
    np.testing.assert_allclose(p, 1 / 6, atol=1e-15)


def test_ppof_softmax_couples_networks():
    pol = PolicyNet(10, 6, True, 2)
    obs = one_hot_obs(np.random.default_rng(0), 1)
    k = 2
    z, _ = pol.logits(obs)
    logp = log_softmax(z)[0, k]
    _, grads, _ = policy_loss_grad(pol, obs, np.array([k]), np.array([logp]), np.array([1.0]), 0.2, 0.0, 1)
    g = flat(grads)
    for j in range(6):
        idx = sorted(pol.decision_indices(j))
        assert np.abs(g[idx]).max() > 0


def test_static_disjointness():
    ppof = PolicyNet(10, 6, True, 0)
    soc = Society(10, 6, 0.2, 0)
    ppo = PolicyNet(10, 6, False, 0)
    for owner in (ppof, soc):
        sets = [owner.decision_indices(k) for k in range(6)]
        assert all(not (sets[i] & sets[j]) for i in range(6) for j in range(i + 1, 6))
    sets = [ppo.decision_indices(k) for k in range(6)]
    assert sets[0] & sets[1]


def test_ppo_empty_batch():
    agent = make_agent("ppo", TASK.obs_dim, TASK.n_doors)
    batch = agent.collect(VecEnv(TASK, 4, np.random.default_rng(0)), 8)
    empty = dataclasses.replace(batch, **{f.name: getattr(batch, f.name)[:0] for f in dataclasses.fields(batch)
                                          if getattr(batch, f.name) is not None})
    with pytest.raises(EmptyBatch):
        agent.update(empty)


def test_make_agent_applies_overrides():
    agent = make_agent("cvs", 10, 6, seed=0, bid_std=0.05, epochs=2)
    assert agent.config.bid_std == 0.05 and agent.config.epochs == 2
    assert set(AGENTS) == {"ppo", "ppof", "cvs"}
    with pytest.raises((KeyError, ValueError)):
        make_agent("dqn", 10, 6)


def test_default_hyperparameters():
    c = PpoConfig()
    assert (c.policy_lr, c.value_lr, c.clip, c.gae_lambda, c.gamma, c.entropy_coef, c.batch, c.minibatch) == (
        4e-5, 5e-3, 0.2, 0.95, 0.99, 0.1, 4096, 256)


# auction ---------------------------------------------------------------------------


def test_vickrey_examples():
    assert vickrey_select([[0.5, 0.5], [0.3, 0.3]]) == (0, 0.5)
    assert vickrey_select([[0.9, 0.9], [0.9, 0.9]]) == (0, 0.9)
    assert vickrey_select([[0.4, 0.4]]) == (0, 0.4)
    with pytest.raises(EmptyBids):
        vickrey_select([])


def test_vickrey_utility_examples():
    assert vickrey_utility(1.0, 0.99, [0.7, 0.2], 0.3) == pytest.approx(1.393, abs=1e-12)
    assert vickrey_utility(1.0, 0.99, [], 1.0) == 0.0


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.just(2)), elements=st.floats(-2, 2)))
def test_property_auction_totality(bids):
    winner, price = vickrey_select(bids)
    w, c, p = vickrey_select_batch(bids[None])
    assert (int(w[0]), float(p[0])) == (winner, price)
    assert bids[winner].max() == bids.max()
    assert price <= bids.max()
    assert winner == int(np.flatnonzero(bids.max(axis=1) == bids.max())[0])


def test_deterministic_bidders_pick_argmax_mean():
    soc = Society(10, 4, 1e-12, 0)
    obs = one_hot_obs(np.random.default_rng(0), 30)
    bids, winner, trace = cvs_act(soc, obs, np.random.default_rng(1))
    mu, _ = soc.mean_bids(obs)
    assert np.array_equal(winner, mu.argmax(axis=0))
    assert bids.shape == (30, 4, 2)
    assert (trace["flags"].sum(axis=1) == 1).all()


def test_loser_utilities_are_zero_and_winner_pays():
    agent = CVSAgent(TASK.obs_dim, TASK.n_doors, seed=0)
    batch = agent.collect(VecEnv(TASK, 8, np.random.default_rng(0)), 64)
    for t in range(len(batch)):
        w, price = vickrey_select(batch.bids[t])
        assert w == batch.winner[t] and price == batch.price[t]


# CVS locality and untouched agents --------------------------------------------------------


def cvs_batch(seed=0, n=64):
    agent = CVSAgent(TASK.obs_dim, TASK.n_doors, seed=seed)
    return agent, agent.collect(VecEnv(TASK, 8, np.random.default_rng(seed)), n)


def subset(batch, mask):
    return dataclasses.replace(batch, **{f.name: getattr(batch, f.name)[mask] for f in dataclasses.fields(batch)
                                         if getattr(batch, f.name) is not None})


def test_unselected_agent_is_bitwise_untouched():
    agent, batch = cvs_batch()
    j = int(batch.winner[0])
    keep = batch.winner != j
    assert keep.any()
    before = [p[j].copy() for p in agent.society.bidders.params]
    m_before = [m[j].copy() for m in agent.opt.m]
    cvs_update(agent, subset(batch, keep), agent.config)
    for p0, p in zip(before, agent.society.bidders.params):
        assert np.array_equal(p0, p[j])
    for m0, m in zip(m_before, agent.opt.m):
        assert np.array_equal(m0, m[j])
    assert agent.opt.t[j] == 0


def test_cvs_empty_batch():
    agent, batch = cvs_batch()
    with pytest.raises(EmptyBatch):
        agent.update(subset(batch, np.zeros(len(batch), dtype=bool)))


def test_cvs_gradient_only_touches_winner():
    agent, batch = cvs_batch()
    g = agent.step_gradients(batch, [5])[0]
    k = int(batch.winner[5])
    others = sorted(set(range(g.size)) - agent.society.decision_indices(k))
    assert not g[others].any()
    assert g[sorted(agent.society.decision_indices(k))].any()


def perturb_others(batch, t, rng):
    out = dataclasses.replace(batch, **{f.name: getattr(batch, f.name).copy() for f in dataclasses.fields(batch)
                                        if getattr(batch, f.name) is not None})
    mask = np.arange(len(batch)) != t
    out.rewards[mask] += rng.normal(size=mask.sum())
    if isinstance(out, CvsBatch):
        out.bids[mask] += rng.normal(size=out.bids[mask].shape)
        out.price[mask] += rng.normal(size=mask.sum())
        out.draw[mask] += rng.normal(size=mask.sum())
    return out


@pytest.mark.parametrize("seed", range(5))
def test_cvs_step_gradient_ignores_other_steps(seed):
    agent, batch = cvs_batch(seed)
    t = 7
    base = agent.step_gradients(batch, [t])[0]
    moved = agent.step_gradients(perturb_others(batch, t, np.random.default_rng(seed)), [t])[0]
    assert np.abs(base - moved).max() <= 1e-12


@pytest.mark.parametrize("name", ["ppo", "ppof"])
def test_policy_gradient_step_gradient_depends_on_other_steps(name):
    agent = make_agent(name, TASK.obs_dim, TASK.n_doors, seed=0)
    batch = agent.collect(VecEnv(TASK, 8, np.random.default_rng(0)), 64)
    t = 7
    base = agent.step_gradients(batch, [t])[0]
    moved = agent.step_gradients(perturb_others(batch, t, np.random.default_rng(0)), [t])[0]
    assert np.abs(base - moved).max() > 0


def test_cvs_state_round_trip():
    agent, batch = cvs_batch()
    agent.update(batch)
    clone = CVSAgent(TASK.obs_dim, TASK.n_doors, seed=99)
    clone.load_state_dict(agent.state_dict())
    assert np.array_equal(flat(clone.society.bidders.params), flat(agent.society.bidders.params))
    obs = one_hot_obs(np.random.default_rng(0), 4)
    assert np.array_equal(clone.act(obs), agent.act(obs))


def test_sigmoid_bids_are_clipped_to_unit_interval():
    soc = Society(10, 3, 0.5, 0, bid_mean="sigmoid")
    bids, _, _ = cvs_act(soc, one_hot_obs(np.random.default_rng(0), 200), np.random.default_rng(0))
    assert bids.min() >= 0.0 and bids.max() <= 1.0
    with pytest.raises(ValueError):
        Society(10, 3, 0.1, 0, bid_mean="softplus")


def test_truncation_handling():
    agent, batch = cvs_batch()
    batch.truncated[:] = True
    batch.terminal[:] = False
    boot = agent.utilities(batch)
    agent.config = CvsConfig(bootstrap_truncated=False)
    stop = agent.utilities(batch)
    np.testing.assert_allclose(stop, batch.rewards - batch.price)
    assert not np.allclose(boot, stop)


@pytest.mark.parametrize("name", ["ppo", "ppof", "cvs"])
def test_learning_is_deterministic(name):
    runs = []
    for _ in range(2):
        agent = make_agent(name, TASK.obs_dim, TASK.n_doors, seed=5)
        venv = VecEnv(TASK, 16, np.random.default_rng(5))
        for _ in range(2):
            batch = agent.collect(venv, 512)
            if name != "cvs":
                agent.prepare(batch)
            agent.update(batch)
        runs.append(np.concatenate([flat(v) if isinstance(v, list) else np.ravel(v)
                                    for k, v in agent.state_dict().items() if k in ("policy", "value", "bidders")]))
    assert np.array_equal(*runs)


# tabular -----------------------------------------------------------------------------


def test_tabular_terminal_example():
    table = np.zeros((4, 3))
    err = tabular_td_update(table, 1, 2, 1.0, 0, None, True, Q_LEARNING, alpha=0.5)
    assert table[1, 2] == 0.5 and err == 1.0
    assert np.count_nonzero(table) == 1


def test_sarsa_and_q_learning_differ_only_in_target():
    base = np.array([[0.0, 0.0], [0.2, 0.8]])
    q, s = base.copy(), base.copy()
    tabular_td_update(q, 0, 0, 0.0, 1, 0, False, Q_LEARNING, alpha=1.0, gamma=1.0)
    tabular_td_update(s, 0, 0, 0.0, 1, 0, False, SARSA, alpha=1.0, gamma=1.0)
    assert q[0, 0] == 0.8 and s[0, 0] == 0.2
    assert np.array_equal(q[1:], base[1:]) and np.array_equal(s[1:], base[1:])


def test_tabular_index_errors():
    table = np.zeros((2, 2))
    with pytest.raises(IndexError):
        tabular_td_update(table, 2, 0, 0.0, 0, 0, False)
    with pytest.raises(IndexError):
        tabular_td_update(table, 0, 5, 0.0, 0, 0, False)
    with pytest.raises(IndexError):
        tabular_td_update(table, 0, 0, 0.0, 0, None, False, SARSA)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 4), st.integers(0, 2), st.floats(-1, 1), st.integers(0, 4), st.integers(0, 2),
       st.booleans(), st.sampled_from([Q_LEARNING, SARSA]))
def test_property_tabular_touches_one_cell(s, a, r, s2, a2, term, kind):
    table = np.random.default_rng(0).normal(size=(5, 3))
    before = table.copy()
    tabular_td_update(table, s, a, r, s2, a2, term, kind)
    changed = np.argwhere(table != before)
    assert len(changed) <= 1
    if len(changed):
        assert tuple(changed[0]) == (s, a)


def test_tabular_agent_is_greedy_without_exploration():
    agent = TabularAgent(3, 4, epsilon=0.0)
    agent.table[1, 2] = 1.0
    assert agent.act_ids(np.array([1, 1, 0])).tolist() == [2, 2, 0]
