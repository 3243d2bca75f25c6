"""Self-tests behind ``modcredit check``.

Every check returns ``(name, ok, detail)``.  Gradients go through the kernel
module at call time, so a patched kernel is caught.
"""

from __future__ import annotations

from itertools import chain, combinations

import numpy as np

from .analyzer import (CVS, PPO, PPOF, AlgorithmClass, Kind, Sharing, TraceSkeleton, check_criterion)
from .causal_graph import VariableDag, d_separated, d_separated_bruteforce, random_dag
from .learners.cvs import Society, bidder_loss_grad
from .learners.nn import MlpStack
from .learners.ppo import PolicyNet, policy_loss_grad, value_loss_grad
from .learners.returns import gae

FD_H = 1e-5
FD_TOL = 1e-4


def canonical_motifs() -> list[VariableDag]:
    """Chain a->b->c, fork a<-b->c, collider a->b<-c."""
    labels = {0: "a", 1: "b", 2: "c"}
    return [
        VariableDag.from_edges(3, [(0, 1), (1, 2)], labels),
        VariableDag.from_edges(3, [(1, 0), (1, 2)], labels),
        VariableDag.from_edges(3, [(0, 1), (2, 1)], labels),
    ]


def _subsets(items):
    items = list(items)
    return chain.from_iterable(combinations(items, r) for r in range(len(items) + 1))


def dsep_oracle_mismatches(dags) -> list[tuple]:
    """Every (dag index, x, y, Z) where the fast test and path enumeration disagree."""
    bad = []
    for gi, dag in enumerate(dags):
        n = len(dag.nodes)
        for x in range(n):
            for y in range(x + 1, n):
                rest = [v for v in range(n) if v not in (x, y)]
                for Z in _subsets(rest):
                    if d_separated(dag, {x}, {y}, set(Z)) != d_separated_bruteforce(dag, {x}, {y}, set(Z)):
                        bad.append((gi, x, y, Z))
    return bad


def oracle_dags(n_seeds: int = 200, max_nodes: int = 8, first_seed: int = 0) -> list[VariableDag]:
    dags = canonical_motifs()
    for seed in range(first_seed, first_seed + n_seeds):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, max_nodes + 1))
        dags.append(random_dag(n, rng, edge_prob=float(rng.uniform(0.2, 0.6))))
    return dags


# finite differences -----------------------------------------------------------


def _flat(params) -> np.ndarray:
    return np.concatenate([p.ravel() for p in params])


def fd_relative_error(params: list[np.ndarray], loss_fn, grads: list[np.ndarray], h: float = FD_H) -> float:
    """``|g - g_fd| / max(|g| + |g_fd|, 1e-12)`` with central differences over every parameter."""
    fd = []
    for p in params:
        flat = p.reshape(-1)
        g = np.empty(flat.size)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss_fn()
            flat[i] = old - h
            down = loss_fn()
            flat[i] = old
            g[i] = (up - down) / (2 * h)
        fd.append(g)
    a, b = _flat(grads), np.concatenate(fd)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def _obs(rng, B, d):
    x = np.zeros((B, d))
    half = d // 2
    x[np.arange(B), rng.integers(0, half, B)] = 1.0
    x[np.arange(B), half + rng.integers(0, d - half, B)] = 1.0
    return x


def grad_check_mlp(seed: int) -> float:
    rng = np.random.default_rng(seed)
    M = int(rng.integers(1, 4))
    net = MlpStack(7, 3, n_nets=M, seed=seed)
    x = rng.normal(size=(5, 7))
    w = rng.normal(size=(M, 5, 3))
    _, cache = net.forward(x)
    grads = net.backward(cache, w)
    return fd_relative_error(net.params, lambda: float((net(x) * w).sum()), grads)


def grad_check_policy(seed: int, factorized: bool) -> float:
    rng = np.random.default_rng(seed)
    pol = PolicyNet(8, 4, factorized, seed)
    obs = _obs(rng, 6, 8)
    actions = rng.integers(0, 4, 6)
    z, _ = pol.logits(obs)
    logp_now = z - np.log(np.exp(z).sum(1, keepdims=True))
    # old log-probs near the current ones keep every ratio inside the clip range
    logp_old = logp_now[np.arange(6), actions] + rng.uniform(-0.05, 0.05, 6)
    adv = rng.normal(size=6)

    def loss():
        return policy_loss_grad(pol, obs, actions, logp_old, adv, 0.2, 0.1, 6)[0]

    _, grads, _ = policy_loss_grad(pol, obs, actions, logp_old, adv, 0.2, 0.1, 6)
    return fd_relative_error(pol.net.params, loss, grads)


def grad_check_value(seed: int) -> float:
    rng = np.random.default_rng(seed)
    net = MlpStack(8, 1, seed=seed)
    obs, ret = _obs(rng, 6, 8), rng.normal(size=6)
    _, grads = value_loss_grad(net, obs, ret, 6)
    return fd_relative_error(net.params, lambda: value_loss_grad(net, obs, ret, 6)[0], grads)


def grad_check_bidders(seed: int) -> float:
    rng = np.random.default_rng(seed)
    soc = Society(8, 4, 0.1, seed)
    obs = _obs(rng, 6, 8)
    winner = rng.integers(0, 4, 6)
    mu, _ = soc.mean_bids(obs)
    mu_w = mu[winner, np.arange(6)]
    draw = mu_w + 0.1 * rng.normal(size=6)
    logp_old = soc.log_prob(draw, mu_w) + rng.uniform(-0.05, 0.05, 6)
    u = rng.normal(size=6)

    def loss():
        return bidder_loss_grad(soc, obs, winner, draw, logp_old, u, 0.2, 6)[0]

    _, grads = bidder_loss_grad(soc, obs, winner, draw, logp_old, u, 0.2, 6)
    return fd_relative_error(soc.bidders.params, loss, grads)


GRAD_CHECKS = {
    "mlp-stack": grad_check_mlp,
    "policy-monolithic": lambda s: grad_check_policy(s, False),
    "policy-factorized": lambda s: grad_check_policy(s, True),
    "value": grad_check_value,
    "cvs-bidders": grad_check_bidders,
}

GAE_EXAMPLE = ([0.0, 0.0, 1.0], [0.0, 0.0, 0.0], 0.99, 0.95, [0.88454025, 0.9405, 1.0])


def criterion_grid(Ts=range(2, 7), Ns=range(2, 7)):
    """Expected against observed criterion for each algorithm kind on each (T, N) cell."""
    pg = AlgorithmClass(Kind.POLICY_GRADIENT, Sharing.FACTORIZED)
    out = []
    for T in Ts:
        for N in Ns:
            acyc = TraceSkeleton.acyclic(T, N)
            out.append((f"pg T={T} N={N}", False, check_criterion(pg, acyc)[0]))
            for n in (2, 3, 4, "mc"):
                algo = AlgorithmClass(Kind.TD_N, Sharing.FACTORIZED, n=n)
                out.append((f"td{n} T={T} N={N}", False, check_criterion(algo, acyc)[0]))
            td0 = AlgorithmClass(Kind.TD0, Sharing.FACTORIZED)
            out.append((f"td0 acyclic T={T} N={N}", True, check_criterion(td0, acyc)[0]))
            for at in range(1, T):
                sk = TraceSkeleton.with_collision(T, N, at)
                out.append((f"td0 collision@{at} T={T} N={N}", False, check_criterion(td0, sk)[0]))
    return out


def run_all(n_oracle_seeds: int = 60, n_grad: int = 3, seed: int = 0) -> list[tuple[str, bool, str]]:
    results = []
    bad = dsep_oracle_mismatches(oracle_dags(n_oracle_seeds, 7, first_seed=seed))
    results.append(("d-separation oracle", not bad, f"{len(bad)} mismatches"))
    for name, fn in GRAD_CHECKS.items():
        errs = [fn(s) for s in range(seed, seed + n_grad)]
        results.append((f"gradient {name}", max(errs) < FD_TOL, f"max rel err {max(errs):.2e}"))
    r, v, g, lam, want = GAE_EXAMPLE
    got = gae(r, v, 0.0, g, lam)
    err = float(np.abs(got - want).max())
    results.append(("gae worked example", err < 1e-12, f"max abs err {err:.1e}"))
    cells = criterion_grid(range(2, 5), range(2, 4))
    wrong = [d for d, want, got in cells if want != got]
    results.append(("criterion grid", not wrong, ", ".join(wrong[:3]) or f"{len(cells)} cells"))
    table = [(CVS, True), (PPOF, False), (PPO, False)]
    wrong = [a.label for a, want in table
             if (check_criterion(a, TraceSkeleton.acyclic(3, 3))[0] and a.sharing is not Sharing.MONOLITHIC) != want]
    results.append(("dynamic modularity table", not wrong, ", ".join(wrong) or "ok"))
    return results
