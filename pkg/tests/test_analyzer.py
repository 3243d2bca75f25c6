import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modcredit.analyzer import (
    CVS,
    DQN_LIKE,
    MONTE_CARLO,
    PPO,
    PPOF,
    TABULAR_Q,
    TABULAR_SARSA,
    AlgorithmClass,
    Kind,
    Sharing,
    TraceSkeleton,
    build_acml,
    build_execution_graph,
    check_criterion,
    check_dynamic_modularity,
    check_static_modularity,
    detect_cycle,
    factorization_report,
    relabel,
)
from modcredit.causal_graph import d_separated_bruteforce, path_blocked
from modcredit.env import EnvState, encode, make_task, step

PG = AlgorithmClass(Kind.POLICY_GRADIENT)
TD0 = AlgorithmClass(Kind.TD0)
TD0_OFF = AlgorithmClass(Kind.TD0, on_policy=False)
MC = AlgorithmClass(Kind.TD_N, n=MONTE_CARLO)


def td(n):
    return AlgorithmClass(Kind.TD_N, n=n)


def labels(graph):
    return {graph.label(v) for v in graph.variable_nodes}


def children_labels(acml, label):
    node = acml.dag.find(label)
    return sorted(acml.dag.label(c) for c in acml.dag.children(node))


# construction ------------------------------------------------------------------


def test_execution_graph_t1_n2():
    g = build_execution_graph(TraceSkeleton.acyclic(1, 2))
    assert labels(g) == {"s_0", "f^1", "f^2", "b^1_0", "b^2_0", "w_0", "s_1", "r_0"}


def test_execution_graph_t0_is_start_state():
    assert labels(build_execution_graph(TraceSkeleton.acyclic(0, 3))) == {"s_0"}


def test_execution_graph_bid_count():
    g = build_execution_graph(TraceSkeleton.acyclic(3, 4))
    assert len([lab for lab in labels(g) if lab.startswith("b^")]) == 12


def test_policy_gradient_normalizer_feeds_every_step_gradient():
    acml = build_acml(PG, TraceSkeleton.acyclic(2, 2))
    for t in range(2):
        kids = children_labels(acml, f"sum_k b^k_{t}")
        assert kids == [f"delta^1_{t}", f"delta^2_{t}"]


def test_monte_carlo_return_feeds_all_gradients():
    acml = build_acml(MC, TraceSkeleton.acyclic(3, 3))
    assert children_labels(acml, "sum_t r_t") == ["delta^1_0", "delta^2_1", "delta^3_2"]


def test_td0_targets_have_one_child_each():
    acml = build_acml(TD0, TraceSkeleton.acyclic(3, 3))
    targets = [v for v in acml.dag.nodes if acml.dag.label(v).startswith("max_k")]
    assert len(targets) == 3
    assert all(len(acml.dag.children(v)) == 1 for v in targets)


def test_non_selected_mechanisms_have_no_gradient_nodes_outside_policy_gradient():
    for algo in (TD0, td(2), MC):
        acml = build_acml(algo, TraceSkeleton.acyclic(4, 3))
        assert len(acml.gradients) == 4


# cycles ----------------------------------------------------------------------------


def test_detect_cycle_examples():
    assert not detect_cycle(TraceSkeleton(("s0", "s1", "s2", "s3"), (1, 1, 1), 2))
    assert detect_cycle(TraceSkeleton(("s0", "s1", "s0", "s1"), (1, 2, 1), 2))


def test_detect_cycle_on_locked_door_bounce():
    task = make_task("linear_chain")
    s = EnvState(0, 0, 0)
    states, actions = [s], [0, 5, 1]
    for a in actions:
        s = step(task, s, a).next_state
        states.append(s)
    ids = tuple(tuple(encode(task, x)) for x in states)
    assert detect_cycle(TraceSkeleton(ids, tuple(a + 1 for a in actions), 6))


# criterion --------------------------------------------------------------------------


def test_policy_gradient_witness_goes_through_normalizer():
    ok, witness = check_criterion(PG, TraceSkeleton.acyclic(2, 2))
    assert not ok
    assert any(lab.startswith("sum_k b^k") for lab in witness)


@pytest.mark.parametrize("n", [2, 3, 4])
def test_tdn_fails_when_trace_covers_window(n):
    ok, _ = check_criterion(td(n), TraceSkeleton.acyclic(n, 3))
    assert not ok


def test_td0_acyclic_satisfies():
    assert check_criterion(TD0, TraceSkeleton.acyclic(4, 3)) == (True, None)


def test_td0_collision_fails_via_shared_target():
    ok, witness = check_criterion(TD0, TraceSkeleton.with_collision(4, 3, 2))
    assert not ok
    assert any(lab.startswith("max_k") for lab in witness)


@pytest.mark.parametrize("T", range(2, 7))
@pytest.mark.parametrize("N", range(2, 7))
def test_criterion_grid(T, N):
    sk = TraceSkeleton.acyclic(T, N)
    assert not check_criterion(PG, sk)[0]
    for n in (2, 3, 4, MONTE_CARLO):
        assert not check_criterion(td(n), sk)[0]
    assert check_criterion(TD0, sk)[0]
    for at in range(1, T):
        assert not check_criterion(TD0, TraceSkeleton.with_collision(T, N, at))[0]


def test_witness_labels_are_deterministic():
    a = check_criterion(PG, TraceSkeleton.acyclic(3, 3))
    b = check_criterion(PG, TraceSkeleton.acyclic(3, 3))
    assert a == b


# verdicts ------------------------------------------------------------------------


def test_static_modularity():
    assert not check_static_modularity(PPO)
    assert not check_static_modularity(DQN_LIKE)
    assert check_static_modularity(TABULAR_Q)
    assert check_static_modularity(CVS)
    assert check_static_modularity(PPOF)


def test_dynamic_table():
    sk = TraceSkeleton.acyclic(3, 3)
    v = check_dynamic_modularity(CVS, sk)
    assert (v.criterion_satisfied, v.static_modularity, v.dynamic_modularity) == (True, True, True)
    v = check_dynamic_modularity(PPOF, sk)
    assert (v.criterion_satisfied, v.static_modularity, v.dynamic_modularity) == (False, True, False)
    v = check_dynamic_modularity(PPO, sk)
    assert (v.static_modularity, v.dynamic_modularity) == (False, False)
    mono = AlgorithmClass(Kind.TD0, Sharing.MONOLITHIC)
    v = check_dynamic_modularity(mono, sk)
    assert (v.criterion_satisfied, v.static_modularity, v.dynamic_modularity) == (True, False, False)
    for algo in (TABULAR_Q, TABULAR_SARSA):
        assert check_dynamic_modularity(algo, sk).dynamic_modularity


def test_verdict_json_shape():
    d = json.loads(check_dynamic_modularity(PPO, TraceSkeleton.acyclic(2, 2)).to_json())
    assert set(d) == {"algorithm", "T", "N", "criterion", "static", "dynamic", "cyclic", "witness"}
    assert d["witness"] and d["witness"][0].startswith("delta")


def test_cyclic_td0_verdict():
    v = check_dynamic_modularity(CVS, TraceSkeleton.with_collision(3, 2, 1))
    assert v.cyclic_trace and not v.criterion_satisfied and not v.dynamic_modularity


def test_invalid_classes_and_traces():
    with pytest.raises(ValueError):
        AlgorithmClass(Kind.TD_N, n=1)
    with pytest.raises(ValueError):
        AlgorithmClass(Kind.TD0, n=3)
    with pytest.raises(ValueError):
        TraceSkeleton(("s0",), (1,), 2)
    with pytest.raises(ValueError):
        TraceSkeleton(("s0", "s1"), (3,), 2)
    with pytest.raises(ValueError):
        TraceSkeleton.with_collision(3, 2, 3)


# reports -------------------------------------------------------------------------


def test_report_modular():
    text = factorization_report(CVS, TraceSkeleton.acyclic(3, 3))
    assert "factorizes into per-step" in text


def test_report_names_hidden_variable():
    text = factorization_report(PG, TraceSkeleton.acyclic(2, 2))
    assert "does not factorize" in text and "sum_k b^k" in text


def test_report_empty_trace():
    text = factorization_report(PPO, TraceSkeleton.acyclic(0, 3))
    assert "no gradients; vacuously modular" in text


# properties ----------------------------------------------------------------------

ALL = [PG, TD0, TD0_OFF, td(2), td(3), MC, CVS, PPO, PPOF, TABULAR_Q, DQN_LIKE]


@st.composite
def skeletons(draw, max_T=5, max_N=4):
    T = draw(st.integers(0, max_T))
    N = draw(st.integers(1, max_N))
    pool = draw(st.integers(1, T + 1))
    states = tuple(draw(st.lists(st.integers(0, pool - 1), min_size=T + 1, max_size=T + 1)))
    selected = tuple(draw(st.lists(st.integers(1, N), min_size=T, max_size=T)))
    return TraceSkeleton(states, selected, N)


@settings(max_examples=150, deadline=None)
@given(st.sampled_from(ALL), skeletons(), st.randoms(use_true_random=False))
def test_property_relabel_invariance(algo, sk, rnd):
    perm = list(range(1, sk.n_decisions + 1))
    rnd.shuffle(perm)
    names = sorted(set(sk.states))
    fresh = [f"q{i}" for i in range(len(names))]
    rnd.shuffle(fresh)
    out = relabel(sk, perm, dict(zip(names, fresh)))
    a, b = check_dynamic_modularity(algo, sk), check_dynamic_modularity(algo, out)
    assert (a.criterion_satisfied, a.static_modularity, a.dynamic_modularity, a.cyclic_trace) == (
        b.criterion_satisfied, b.static_modularity, b.dynamic_modularity, b.cyclic_trace)


@settings(max_examples=150, deadline=None)
@given(st.sampled_from(ALL), skeletons())
def test_property_verdict_consistency(algo, sk):
    v = check_dynamic_modularity(algo, sk)
    assert v.dynamic_modularity == (v.criterion_satisfied and v.static_modularity)
    assert (v.witness is None) == v.criterion_satisfied


@settings(max_examples=80, deadline=None)
@given(st.sampled_from(ALL), skeletons(max_T=3, max_N=2))
def test_property_witness_is_open_path(algo, sk):
    acml = build_acml(algo, sk)
    ok, witness = check_criterion(algo, sk, acml)
    if ok:
        return
    path = [acml.dag.find(lab) for lab in witness]
    Z = set(acml.conditioning)
    assert all(b in acml.dag.neighbors(a) for a, b in zip(path, path[1:]))
    assert not path_blocked(acml.dag, path, Z)
    if len(acml.dag.nodes) <= 25:
        assert not d_separated_bruteforce(acml.dag, {path[0]}, {path[-1]}, Z)


@pytest.mark.parametrize("algo", ALL, ids=lambda a: a.label)
@pytest.mark.parametrize("T", range(2, 7))
def test_verdict_independent_of_n(algo, T):
    verdicts = {check_criterion(algo, TraceSkeleton.acyclic(T, N))[0] for N in range(2, 7)}
    assert len(verdicts) == 1


@pytest.mark.parametrize("T", range(2, 6))
def test_single_collision_flips_td0(T):
    rng = np.random.default_rng(T)
    acyclic = TraceSkeleton.acyclic(T, 3)
    assert check_criterion(TD0, acyclic)[0]
    at = int(rng.integers(1, T))
    assert not check_criterion(TD0, TraceSkeleton.with_collision(T, 3, at))[0]
