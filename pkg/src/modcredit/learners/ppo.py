"""PPO with a monolithic policy network, and PPOF with one network per action logit."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .nn import Adam, MlpStack
from .returns import gae_segments


class EmptyBatch(ValueError):
    pass


@dataclass
class PpoConfig:
    policy_lr: float = 4e-5
    value_lr: float = 5e-3
    clip: float = 0.2
    gae_lambda: float = 0.95
    gamma: float = 0.99
    entropy_coef: float = 0.1
    batch: int = 4096
    minibatch: int = 256
    epochs: int = 4
    n_envs: int = 16
    normalize_advantages: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(probs.shape[0])[:, None]
    idx = (probs.cumsum(axis=1) < u).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    next_values: np.ndarray
    cuts: np.ndarray
    terminal: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.actions)


class PolicyNet:
    """Categorical policy over ``n_actions`` logits.

    Monolithic: one MLP emits every logit.  Factorized: ``n_actions`` single-output
    MLPs with disjoint parameters, joined only by the softmax.
    """

    def __init__(self, obs_dim: int, n_actions: int, factorized: bool, seed) -> None:
        self.factorized = factorized
        self.n_actions = n_actions
        if factorized:
            self.net = MlpStack(obs_dim, 1, n_nets=n_actions, seed=seed)
        else:
            self.net = MlpStack(obs_dim, n_actions, n_nets=1, seed=seed)

    def logits(self, obs: np.ndarray):
        out, cache = self.net.forward(obs)
        z = out[:, :, 0].T if self.factorized else out[0]
        return z, cache

    def backward(self, cache, dlogits: np.ndarray) -> list[np.ndarray]:
        dout = dlogits.T[:, :, None] if self.factorized else dlogits[None]
        return self.net.backward(cache, dout)

    def probs(self, obs: np.ndarray) -> np.ndarray:
        return np.exp(log_softmax(self.logits(obs)[0]))

    def decision_indices(self, k: int) -> set[int]:
        """Flat parameter indices that influence logit ``k``."""
        if self.factorized:
            return self.net.net_indices(k)
        idx, offset = set(), 0
        for i, p in enumerate(self.net.params):
            flat = np.arange(p.size).reshape(p.shape) + offset
            if i < 4:
                idx.update(flat.ravel().tolist())
            elif i == 4:
                idx.update(flat[0, :, k].tolist())
            else:
                idx.add(int(flat[0, k]))
            offset += p.size
        return idx


def policy_forward_ppof(policy: PolicyNet, obs: np.ndarray) -> np.ndarray:
    return policy.probs(obs)


def policy_loss_grad(policy: PolicyNet, obs, actions, logp_old, adv, clip, entropy_coef, norm):
    """Clipped-surrogate loss (to minimise) and its parameter gradients.

    ``norm`` divides the summed per-sample losses (the minibatch size).
    """
    z, cache = policy.logits(obs)
    logp_all = log_softmax(z)
    p = np.exp(logp_all)
    rows = np.arange(len(actions))
    logp = logp_all[rows, actions]
    ratio = np.exp(logp - logp_old)
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
    surrogate = np.minimum(ratio * adv, clipped * adv)
    entropy = -(p * logp_all).sum(axis=1)
    loss = (-surrogate.sum() - entropy_coef * entropy.sum()) / norm
    # d(-surrogate)/dlogp is zero where the clipped branch is the active minimum.
    inactive = ((adv > 0) & (ratio > 1.0 + clip)) | ((adv < 0) & (ratio < 1.0 - clip))
    g_logp = np.where(inactive, 0.0, -adv * ratio)
    onehot = np.zeros_like(p)
    onehot[rows, actions] = 1.0
    dz = g_logp[:, None] * (onehot - p)
    dz += entropy_coef * p * (logp_all + entropy[:, None])
    dz /= norm
    info = {
        "policy_loss": float(loss),
        "entropy": float(entropy.mean()),
        "clip_frac": float(inactive.mean()),
    }
    return loss, policy.backward(cache, dz), info


def value_loss_grad(value: MlpStack, obs, returns, norm):
    out, cache = value.forward(obs)
    v = out[0, :, 0]
    err = v - returns
    loss = 0.5 * (err**2).sum() / norm
    grads = value.backward(cache, (err / norm)[None, :, None])
    return loss, grads


class PPOAgent:
    name = "ppo"

    def __init__(self, obs_dim: int, n_actions: int, config: PpoConfig | None = None,
                 seed: int | list[int] = 0, factorized: bool = False) -> None:
        self.config = config or PpoConfig()
        self.obs_dim, self.n_actions = obs_dim, n_actions
        ss = np.random.SeedSequence(seed)
        pol_ss, val_ss, rng_ss = ss.spawn(3)
        self.policy = PolicyNet(obs_dim, n_actions, factorized, pol_ss)
        self.value = MlpStack(obs_dim, 1, n_nets=1, seed=val_ss)
        self.pi_opt = Adam(self.config.policy_lr).bind(self.policy.net)
        self.v_opt = Adam(self.config.value_lr).bind(self.value)
        self.rng = np.random.default_rng(rng_ss)

    # acting -----------------------------------------------------------------

    def act(self, obs: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        return sample_categorical(self.policy.probs(obs), rng or self.rng)

    def values(self, obs: np.ndarray) -> np.ndarray:
        return self.value(obs)[0, :, 0]

    def collect(self, venv, n_samples: int) -> Batch:
        n = venv.n
        steps = -(-n_samples // n)
        obs_l, act_l, logp_l, rew_l, term_l, cut_l, nobs_l = [], [], [], [], [], [], []
        for _ in range(steps):
            obs = venv.observe()
            logp_all = log_softmax(self.policy.logits(obs)[0])
            a = sample_categorical(np.exp(logp_all), self.rng)
            r, done, trunc, nobs = venv.step(a)
            obs_l.append(obs)
            act_l.append(a)
            logp_l.append(logp_all[np.arange(n), a])
            rew_l.append(r)
            term_l.append(done & ~trunc)
            cut_l.append(done)
            nobs_l.append(nobs)
        # (steps, n) -> env-major so each env's steps are contiguous
        def em(xs):
            arr = np.stack(xs)
            return arr.swapaxes(0, 1).reshape(steps * n, *arr.shape[2:])

        obs, actions, logp = em(obs_l), em(act_l), em(logp_l)
        rewards, terminal, cuts, nobs = em(rew_l), em(term_l), em(cut_l).copy(), em(nobs_l)
        cuts = cuts.astype(np.float64)
        cuts.reshape(n, steps)[:, -1] = 1.0
        values = self.values(obs)
        next_values = np.where(terminal, 0.0, self.values(nobs))
        return Batch(obs, actions, logp, rewards, values, next_values, cuts, terminal)

    # learning ---------------------------------------------------------------

    def prepare(self, batch: Batch) -> Batch:
        c = self.config
        adv = gae_segments(batch.rewards, batch.values, batch.next_values, batch.cuts, c.gamma, c.gae_lambda)
        batch.returns = adv + batch.values
        if c.normalize_advantages:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        batch.advantages = adv
        return batch

    def update(self, batch: Batch) -> dict:
        return ppo_update(self, batch, self.config)

    def step_gradients(self, batch: Batch, steps) -> np.ndarray:
        """Per-step policy gradient contributions at the current parameters."""
        self.prepare(batch)
        out = []
        for t in steps:
            sl = slice(t, t + 1)
            _, grads, _ = policy_loss_grad(
                self.policy, batch.obs[sl], batch.actions[sl], batch.logp[sl],
                batch.advantages[sl], self.config.clip, self.config.entropy_coef, self.config.minibatch,
            )
            out.append(np.concatenate([g.ravel() for g in grads]))
        return np.array(out)

    # persistence ------------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "policy": [p.copy() for p in self.policy.net.params],
            "value": [p.copy() for p in self.value.params],
            "pi_opt": self.pi_opt.state(),
            "v_opt": self.v_opt.state(),
            "rng": self.rng.bit_generator.state,
        }

    def load_state_dict(self, state: dict) -> None:
        for p, q in zip(self.policy.net.params, state["policy"]):
            p[...] = q
        for p, q in zip(self.value.params, state["value"]):
            p[...] = q
        self.pi_opt.load(state["pi_opt"])
        self.v_opt.load(state["v_opt"])
        self.rng.bit_generator.state = state["rng"]


class PPOFAgent(PPOAgent):
    name = "ppof"

    def __init__(self, obs_dim: int, n_actions: int, config: PpoConfig | None = None, seed: int | list[int] = 0) -> None:
        super().__init__(obs_dim, n_actions, config, seed, factorized=True)


def ppo_update(agent: PPOAgent, batch: Batch, config: PpoConfig) -> dict:
    if len(batch) == 0:
        raise EmptyBatch("PPO update needs at least one transition")
    if batch.advantages is None:
        agent.prepare(batch)
    n = len(batch)
    mb = min(config.minibatch, n)
    info: dict = {}
    for _ in range(config.epochs):
        order = agent.rng.permutation(n)
        for start in range(0, n, mb):
            idx = order[start:start + mb]
            _, grads, info = policy_loss_grad(
                agent.policy, batch.obs[idx], batch.actions[idx], batch.logp[idx],
                batch.advantages[idx], config.clip, config.entropy_coef, len(idx),
            )
            agent.pi_opt.step(agent.policy.net.params, grads)
            vloss, vgrads = value_loss_grad(agent.value, batch.obs[idx], batch.returns[idx], len(idx))
            agent.v_opt.step(agent.value.params, vgrads)
            info["value_loss"] = float(vloss)
    return info
