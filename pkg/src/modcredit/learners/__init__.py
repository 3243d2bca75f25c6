"""Learning algorithms: PPO, factorized PPO, the cloned Vickrey society and tabular TD."""

from .cvs import CVSAgent, CvsConfig, EmptyBids, cvs_act, cvs_update, vickrey_select, vickrey_utility
from .nn import Adam, MlpStack, ShapeError, adam_step, mlp_backward, mlp_forward
from .ppo import EmptyBatch, PPOAgent, PPOFAgent, PpoConfig, policy_forward_ppof, ppo_update
from .returns import gae
from .tabular import TabularAgent, tabular_td_update

AGENTS = {"ppo": PPOAgent, "ppof": PPOFAgent, "cvs": CVSAgent}


def make_agent(name: str, obs_dim: int, n_actions: int, seed: int | list[int] = 0, **overrides):
    if name not in AGENTS:
        raise KeyError(f"unknown algorithm {name!r}; choose from {sorted(AGENTS)}")
    cfg = (CvsConfig if name == "cvs" else PpoConfig)(**overrides)
    return AGENTS[name](obs_dim, n_actions, cfg, seed=seed)


__all__ = [
    "AGENTS", "Adam", "CVSAgent", "CvsConfig", "EmptyBatch", "EmptyBids", "MlpStack", "PPOAgent",
    "PPOFAgent", "PpoConfig", "ShapeError", "TabularAgent", "adam_step", "cvs_act", "cvs_update", "gae",
    "make_agent", "mlp_backward", "mlp_forward", "policy_forward_ppof", "ppo_update", "tabular_td_update",
    "vickrey_select", "vickrey_utility",
]
