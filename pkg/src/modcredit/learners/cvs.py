"""Cloned Vickrey society.

Each decision is owned by an agent whose bidder network maps a state to the
mean of a Gaussian over its bid.  Every agent bids twice; both bids come from
the same parameters.  The highest bid wins, and the winner pays the highest of
the remaining bids, which may be its own clone's.  The winner's utility is its
valuation (reward plus discounted best successor bid) minus the price; all
other agents get nothing and are not updated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import Adam, MlpStack
from .ppo import EmptyBatch, PpoConfig


class EmptyBids(ValueError):
    pass


@dataclass
class CvsConfig(PpoConfig):
    bid_std: float = 0.2
    # bid mean: "linear" network output, or "sigmoid" squashed into (0, 1)
    bid_mean: str = "linear"
    # time-limit truncation: bootstrap from the successor (True) or treat as terminal
    bootstrap_truncated: bool = True


def vickrey_select(bids) -> tuple[int, float]:
    """Winner and price for one auction.

    ``bids[k]`` lists the bids of agent ``k`` (two for cloned agents).  Ties go
    to the lowest agent index.  The price is the highest bid left after
    removing the single winning bid.
    """
    flat = [(float(b), k) for k, agent_bids in enumerate(bids) for b in np.atleast_1d(agent_bids)]
    if not flat:
        raise EmptyBids("auction needs at least one bid")
    best = max(range(len(flat)), key=lambda i: (flat[i][0], -flat[i][1], -i))
    winner = flat[best][1]
    rest = [b for i, (b, _) in enumerate(flat) if i != best]
    price = max(rest) if rest else 0.0
    return winner, price


def vickrey_select_batch(bids: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised :func:`vickrey_select` over ``bids (B, N, C)``.

    Returns winner agent, winning clone and price per auction.
    """
    B, N, C = bids.shape
    flat = bids.reshape(B, N * C)
    win = flat.argmax(axis=1)  # first maximum: lowest agent, then lowest clone
    rows = np.arange(B)
    if N * C == 1:
        price = np.zeros(B)
    else:
        masked = flat.copy()
        masked[rows, win] = -np.inf
        price = masked.max(axis=1)
    return win // C, win % C, price


def vickrey_utility(reward: float, gamma: float, next_bids, price: float) -> float:
    """Winner's utility: reward + gamma * best successor bid - price (no successor at terminal)."""
    nxt = np.asarray(next_bids, dtype=float).ravel()
    best_next = float(nxt.max()) if nxt.size else 0.0
    return float(reward) + gamma * best_next - float(price)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class CvsBatch:
    obs: np.ndarray
    winner: np.ndarray
    draw: np.ndarray  # unclipped Gaussian sample of the winning bid
    logp: np.ndarray
    price: np.ndarray
    rewards: np.ndarray
    terminal: np.ndarray
    truncated: np.ndarray
    next_obs: np.ndarray
    bids: np.ndarray  # (n, N, 2) clipped bids as seen by the auction
    utility: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.winner)


class Society:
    """Bidder networks ``psi^k``, one per decision, with disjoint parameters."""

    def __init__(self, obs_dim: int, n_agents: int, bid_std: float, seed, bid_mean: str = "linear") -> None:
        if bid_mean not in ("linear", "sigmoid"):
            raise ValueError(f"bid_mean must be 'linear' or 'sigmoid', got {bid_mean!r}")
        self.n_agents = n_agents
        self.bid_std = bid_std
        self.squash = bid_mean == "sigmoid"
        self.bidders = MlpStack(obs_dim, 1, n_nets=n_agents, seed=seed)

    def mean_bids(self, obs: np.ndarray):
        out, cache = self.bidders.forward(obs)
        z = out[:, :, 0]
        return (_sigmoid(z) if self.squash else z), cache  # (N, B)

    def mean_slope(self, mu: np.ndarray) -> np.ndarray:
        return mu * (1.0 - mu) if self.squash else np.ones_like(mu)

    def log_prob(self, draw: np.ndarray, mean: np.ndarray) -> np.ndarray:
        s = self.bid_std
        return -0.5 * ((draw - mean) / s) ** 2 - math.log(s) - 0.5 * math.log(2 * math.pi)

    def decision_indices(self, k: int) -> set[int]:
        return self.bidders.net_indices(k)


def cvs_act(society: Society, obs: np.ndarray, rng: np.random.Generator):
    """Sample two bids per agent, run the auction.

    Returns ``(bids (B, N, 2), winner (B,), trace)`` where ``trace`` carries the
    raw winning draw, its log-probability, the price and the selection flags.
    """
    obs = np.atleast_2d(obs)
    mu, _ = society.mean_bids(obs)
    mu = mu.T  # (B, N)
    B, N = mu.shape
    draws = mu[:, :, None] + society.bid_std * rng.standard_normal((B, N, 2))
    bids = np.clip(draws, 0.0, 1.0) if society.squash else draws
    winner, clone, price = vickrey_select_batch(bids)
    rows = np.arange(B)
    draw = draws[rows, winner, clone]
    flags = np.zeros((B, N), dtype=bool)
    flags[rows, winner] = True
    trace = {
        "draw": draw,
        "logp": society.log_prob(draw, mu[rows, winner]),
        "price": price,
        "flags": flags,
    }
    return bids, winner, trace


def bidder_loss_grad(society: Society, obs, winner, draw, logp_old, utility, clip, norm):
    """Summed clipped surrogate of the winning agents, divided by ``norm``.

    Each sample only feeds the bidder that won it, so the returned gradient of
    agent ``k`` depends on agent ``k``'s samples alone.
    """
    mu, cache = society.mean_bids(obs)
    rows = np.arange(len(winner))
    mu_w = mu[winner, rows]
    logp = society.log_prob(draw, mu_w)
    ratio = np.exp(logp - logp_old)
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
    surrogate = np.minimum(ratio * utility, clipped * utility)
    loss = -surrogate.sum() / norm
    inactive = ((utility > 0) & (ratio > 1.0 + clip)) | ((utility < 0) & (ratio < 1.0 - clip))
    g_logp = np.where(inactive, 0.0, -utility * ratio)
    g_mu = g_logp * (draw - mu_w) / society.bid_std**2
    dout = np.zeros((society.n_agents, len(winner), 1))
    dout[winner, rows, 0] = g_mu * society.mean_slope(mu_w) / norm
    return loss, society.bidders.backward(cache, dout)


class CVSAgent:
    name = "cvs"

    def __init__(self, obs_dim: int, n_actions: int, config: CvsConfig | None = None, seed: int | list[int] = 0) -> None:
        self.config = config or CvsConfig()
        self.obs_dim, self.n_actions = obs_dim, n_actions
        ss = np.random.SeedSequence(seed)
        soc_ss, _, rng_ss = ss.spawn(3)
        self.society = Society(obs_dim, n_actions, self.config.bid_std, soc_ss, self.config.bid_mean)
        self.opt = Adam(self.config.policy_lr).bind(self.society.bidders)
        self.rng = np.random.default_rng(rng_ss)

    def act(self, obs: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        return cvs_act(self.society, obs, rng or self.rng)[1]

    def collect(self, venv, n_samples: int) -> CvsBatch:
        n = venv.n
        steps = -(-n_samples // n)
        cols: dict[str, list] = {k: [] for k in ("obs", "winner", "draw", "logp", "price", "rewards", "terminal", "truncated", "next_obs", "bids")}
        for _ in range(steps):
            obs = venv.observe()
            bids, winner, tr = cvs_act(self.society, obs, self.rng)
            r, done, trunc, nobs = venv.step(winner)
            for k, v in (("obs", obs), ("winner", winner), ("draw", tr["draw"]), ("logp", tr["logp"]),
                         ("price", tr["price"]), ("rewards", r), ("terminal", done & ~trunc), ("truncated", trunc),
                         ("next_obs", nobs), ("bids", bids)):
                cols[k].append(v)
        arrays = {k: np.concatenate(v) for k, v in cols.items()}
        return CvsBatch(**arrays)

    def utilities(self, batch: CvsBatch) -> np.ndarray:
        """Winner utilities with the successor max-bid from the frozen bidders."""
        mu_next, _ = self.society.mean_bids(batch.next_obs)
        stop = batch.terminal if self.config.bootstrap_truncated else batch.terminal | batch.truncated
        best_next = np.where(stop, 0.0, mu_next.max(axis=0))
        return batch.rewards + self.config.gamma * best_next - batch.price

    def update(self, batch: CvsBatch) -> dict:
        return cvs_update(self, batch, self.config)

    def step_gradients(self, batch: CvsBatch, steps) -> np.ndarray:
        u = self.utilities(batch)
        out = []
        for t in steps:
            sl = slice(t, t + 1)
            _, grads = bidder_loss_grad(
                self.society, batch.obs[sl], batch.winner[sl], batch.draw[sl], batch.logp[sl],
                u[sl], self.config.clip, self.config.minibatch,
            )
            out.append(np.concatenate([g.ravel() for g in grads]))
        return np.array(out)

    def state_dict(self) -> dict:
        return {
            "bidders": [p.copy() for p in self.society.bidders.params],
            "opt": self.opt.state(),
            "rng": self.rng.bit_generator.state,
        }

    def load_state_dict(self, state: dict) -> None:
        for p, q in zip(self.society.bidders.params, state["bidders"]):
            p[...] = q
        self.opt.load(state["opt"])
        self.rng.bit_generator.state = state["rng"]


def cvs_update(agent: CVSAgent, batch: CvsBatch, config: CvsConfig) -> dict:
    if len(batch) == 0:
        raise EmptyBatch("CVS update needs at least one transition")
    batch.utility = agent.utilities(batch)
    n = len(batch)
    mb = min(config.minibatch, n)
    soc = agent.society
    loss = 0.0
    for _ in range(config.epochs):
        order = agent.rng.permutation(n)
        for start in range(0, n, mb):
            idx = order[start:start + mb]
            loss, grads = bidder_loss_grad(
                soc, batch.obs[idx], batch.winner[idx], batch.draw[idx], batch.logp[idx],
                batch.utility[idx], config.clip, mb,
            )
            active = np.bincount(batch.winner[idx], minlength=soc.n_agents) > 0
            agent.opt.step(soc.bidders.params, grads, active)
    return {"policy_loss": float(loss), "mean_utility": float(batch.utility.mean())}
