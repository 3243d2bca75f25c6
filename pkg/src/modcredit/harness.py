"""Multi-leg training protocols with convergence and efficiency metrics.

A *chain* is a sequence of tasks learned one after another by one agent and
seed: ``train -> transfer`` for the triplets, ``a -> b -> a`` for forgetting.
Each leg starts from the agent state the previous leg ended with.  Chains are
independent, so a suite fans them out over processes and merges the results
sorted by (cell, algorithm, seed).
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import kernels
from .env import VecEnv, make_task, task_from_id, transfer_variants
from .learners import AGENTS, make_agent

log = logging.getLogger(__name__)

EPOCH_SIZE = 4096
DESK_H = 2_000_000 // EPOCH_SIZE * EPOCH_SIZE
FULL_H = 10_000_000 // EPOCH_SIZE * EPOCH_SIZE
TOPOLOGIES = ("linear_chain", "common_ancestor", "common_descendant")
SUITES = ("training", "triplets", "forgetting", "bids")
CSV_FIELDS = ("suite", "cell", "algorithm", "seed", "epoch", "samples", "mean_return")


class ConfigError(ValueError):
    pass


class Undefined(ValueError):
    """An efficiency ratio was requested where one side never converged."""


class _NotConverged:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self) -> str:
        return "NotConverged"

    def __bool__(self) -> bool:
        return False


NotConverged = _NotConverged()


@dataclass
class Convergence:
    target: float = 0.8
    eps: float = 0.01
    window: int = 30


@dataclass
class ExperimentConfig:
    """Everything that determines a suite's output.

    ``cells`` restricts the suite to the listed cell names (``topology/variant``
    for triplets); empty means all.  ``overrides`` are learner hyperparameters.
    """

    suite: str = "triplets"
    algorithms: list[str] = field(default_factory=lambda: ["cvs", "ppo", "ppof"])
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    base_seed: int = 0
    H: int = DESK_H
    epoch_size: int = EPOCH_SIZE
    eval_episodes: int = 128
    topologies: list[str] = field(default_factory=lambda: list(TOPOLOGIES))
    cells: list[str] = field(default_factory=list)
    convergence: Convergence = field(default_factory=Convergence)
    overrides: dict = field(default_factory=dict)
    jobs: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.convergence, dict):
            self.convergence = Convergence(**self.convergence)
        self.validate()

    def validate(self) -> None:
        if self.suite not in SUITES:
            raise ConfigError(f"unknown suite {self.suite!r}; choose from {list(SUITES)}")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if any(not isinstance(s, int) or s < 0 for s in [*self.seeds, self.base_seed]):
            raise ConfigError("seeds must be nonnegative integers")
        if self.epoch_size <= 0 or self.H <= 0 or self.H % self.epoch_size:
            raise ConfigError(f"H={self.H} must be a positive multiple of epoch_size={self.epoch_size}")
        for a in self.algorithms:
            if a not in AGENTS:
                raise ConfigError(f"unknown algorithm {a!r}; choose from {sorted(AGENTS)}")
        for t in self.topologies:
            if t not in TOPOLOGIES:
                raise ConfigError(f"unknown topology {t!r}")
        if self.convergence.window < 1:
            raise ConfigError("convergence window must be at least 1")

    @property
    def n_epochs(self) -> int:
        return self.H // self.epoch_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | os.PathLike, full: bool = False) -> "ExperimentConfig":
        """Read a YAML or JSON config; ``full`` swaps in the full-scale sample budget."""
        import yaml  # JSON is a subset of YAML

        try:
            text = Path(path).read_text()
            d = yaml.safe_load(text) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError(f"config {path} must be a mapping")
        if full:
            d["H"] = FULL_H
        return cls.from_dict(d)


# curves and metrics ---------------------------------------------------------


@dataclass
class LearningCurve:
    """Evaluation return after each training epoch; epoch ``e`` has consumed ``e * epoch_size`` samples."""

    seed: int
    epoch_size: int = EPOCH_SIZE
    returns: list[float] = field(default_factory=list)

    @property
    def epochs(self) -> np.ndarray:
        return np.arange(1, len(self.returns) + 1)

    @property
    def samples(self) -> np.ndarray:
        return self.epochs * self.epoch_size

    def append(self, value: float) -> None:
        self.returns.append(float(value))

    def __len__(self) -> int:
        return len(self.returns)


def convergence_samples(curve, target: float = 0.8, eps: float = 0.01, window: int = 30,
                        epoch_size: int | None = None):
    """Samples at the first epoch that opens ``window`` consecutive in-band epochs.

    ``curve`` is a :class:`LearningCurve` or a plain sequence of returns (then
    ``epoch_size`` defaults to 4096).  Returns ``NotConverged`` if no such run exists.
    """
    if window < 1:
        raise ValueError("window must be at least 1")
    if isinstance(curve, LearningCurve):
        returns, size = curve.returns, curve.epoch_size
    else:
        returns, size = list(curve), EPOCH_SIZE
    size = epoch_size or size
    run = 0
    for i, r in enumerate(returns):
        run = run + 1 if abs(r - target) <= eps else 0
        if run == window:
            return (i - window + 2) * size
    return NotConverged


@dataclass
class EfficiencyReport:
    """Convergence samples per (cell, algorithm, seed) and derived ratios."""

    samples: dict[str, dict[str, dict[int, object]]] = field(default_factory=dict)

    def add(self, cell: str, algorithm: str, seed: int, value) -> None:
        self.samples.setdefault(cell, {}).setdefault(algorithm, {})[seed] = value

    def converged(self, cell: str, algorithm: str) -> list[float]:
        vals = self.samples.get(cell, {}).get(algorithm, {}).values()
        return [float(v) for v in vals if v is not NotConverged]

    def mean(self, cell: str, algorithm: str) -> float:
        vals = self.converged(cell, algorithm)
        if not vals:
            raise Undefined(f"{algorithm} never converged on {cell}")
        return float(np.mean(vals))

    def to_json_dict(self) -> dict:
        table = {}
        for cell, algs in sorted(self.samples.items()):
            table[cell] = {}
            for alg, seeds in sorted(algs.items()):
                conv = self.converged(cell, alg)
                table[cell][alg] = {
                    "per_seed": {str(s): (None if v is NotConverged else int(v)) for s, v in sorted(seeds.items())},
                    "converged": len(conv),
                    "not_converged": len(seeds) - len(conv),
                    "mean": float(np.mean(conv)) if conv else None,
                    "std": float(np.std(conv)) if conv else None,
                }
        ratios = {}
        for cell, algs in sorted(self.samples.items()):
            for a in sorted(algs):
                for b in sorted(algs):
                    if a == b:
                        continue
                    try:
                        ratios[f"{cell}:{a}_vs_{b}"] = relative_efficiency(self, a, b, cell)
                    except Undefined:
                        ratios[f"{cell}:{a}_vs_{b}"] = None
        return {"convergence": table, "ratios": ratios}


def relative_efficiency(report: EfficiencyReport, algo_a: str, algo_b: str, task: str) -> float:
    """How many times fewer samples ``algo_a`` needs than ``algo_b`` (mean over converged seeds)."""
    return report.mean(task, algo_b) / report.mean(task, algo_a)


# training -------------------------------------------------------------------


def _leg_seed(base: int, seed: int, leg: int, stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([base, seed, leg, stream])


def agent_seed(config: ExperimentConfig, seed: int) -> list[int]:
    """Entropy for an agent's initialisation and sampling streams."""
    return [config.base_seed, seed]


def evaluate(agent, task, episodes: int, rng: np.random.Generator) -> float:
    """Mean undiscounted return of the current stochastic policy over ``episodes`` episodes."""
    env = VecEnv(task, episodes, rng)
    ret = np.zeros(episodes)
    alive = np.ones(episodes, dtype=bool)
    while alive.any():
        r, done, _, _ = env.step(agent.act(env.observe(), rng))
        ret += r * alive
        alive &= ~done
    return float(ret.mean())


class Trainer:
    """One leg of a chain: an agent learning one task for ``n_epochs`` epochs.

    The full state (agent, environment batch, epoch, curve) round-trips through
    :meth:`save` / :meth:`load`, and resuming yields the uninterrupted curve.
    """

    def __init__(self, agent, task, seed: int, leg: int, config: ExperimentConfig) -> None:
        self.agent, self.task, self.seed, self.leg, self.config = agent, task, seed, leg, config
        n_envs = agent.config.n_envs
        self.venv = VecEnv(task, n_envs, np.random.default_rng(_leg_seed(config.base_seed, seed, leg, 0)))
        self.epoch = 0
        self.curve = LearningCurve(seed, config.epoch_size)
        self.on_epoch = None

    def run_epoch(self) -> float:
        batch = self.agent.collect(self.venv, self.config.epoch_size)
        self.agent.update(batch)
        self.epoch += 1
        rng = np.random.default_rng(_leg_seed(self.config.base_seed, self.seed, self.leg, 1000 + self.epoch))
        value = evaluate(self.agent, self.task, self.config.eval_episodes, rng)
        self.curve.append(value)
        if self.on_epoch is not None:
            self.on_epoch(self)
        return value

    def run(self, n_epochs: int | None = None) -> LearningCurve:
        stop = self.config.n_epochs if n_epochs is None else min(self.config.n_epochs, self.epoch + n_epochs)
        while self.epoch < stop:
            self.run_epoch()
        return self.curve

    # checkpoints ------------------------------------------------------------

    def state(self) -> dict:
        v = self.venv
        return {
            "agent": self.agent.state_dict(),
            "env": {"room": v.room.copy(), "subtask": v.subtask.copy(), "steps": v.steps.copy(),
                    "rng": v.rng.bit_generator.state},
            "epoch": self.epoch,
            "returns": list(self.curve.returns),
        }

    def restore(self, state: dict) -> None:
        self.agent.load_state_dict(state["agent"])
        v = self.venv
        v.room[...] = state["env"]["room"]
        v.subtask[...] = state["env"]["subtask"]
        v.steps[...] = state["env"]["steps"]
        v.rng.bit_generator.state = state["env"]["rng"]
        self.epoch = int(state["epoch"])
        self.curve.returns = [float(x) for x in state["returns"]]

    def save(self, path: str | os.PathLike) -> None:
        save_checkpoint(path, self.state())

    def load(self, path: str | os.PathLike) -> None:
        self.restore(load_checkpoint(path))


def _split(obj, arrays: dict):
    if isinstance(obj, np.ndarray):
        key = f"a{len(arrays)}"
        arrays[key] = obj
        return {"__array__": key}
    if isinstance(obj, dict):
        return {k: _split(v, arrays) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_split(v, arrays) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _join(obj, arrays):
    if isinstance(obj, dict):
        if set(obj) == {"__array__"}:
            return arrays[obj["__array__"]]
        return {k: _join(v, arrays) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_join(v, arrays) for v in obj]
    return obj


def save_checkpoint(path, state: dict) -> None:
    """Arrays go to an ``.npz``; the rest (including RNG states) to JSON inside it."""
    arrays: dict = {}
    skeleton = _split(state, arrays)
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(skeleton).encode(), dtype=np.uint8), **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> dict:
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
        skeleton = json.loads(bytes(z["__meta__"]).decode())
    return _join(skeleton, arrays)


def train(config: ExperimentConfig, task, algorithm: str, seed: int, leg: int = 0,
          initial: dict | None = None, checkpoint: str | os.PathLike | None = None,
          on_epoch=None):
    """Run one leg and return ``(curve, final agent state)``.

    ``initial`` is a previous leg's final agent state, loaded verbatim.  If
    ``checkpoint`` names an existing file the leg resumes from it; the file is
    rewritten after every epoch.
    """
    agent = make_agent(algorithm, task.obs_dim, task.n_doors, seed=agent_seed(config, seed), **config.overrides)
    if initial is not None:
        agent.load_state_dict(initial)
    tr = Trainer(agent, task, seed, leg, config)
    tr.on_epoch = on_epoch
    if checkpoint is not None and Path(checkpoint).exists():
        tr.load(checkpoint)
    while tr.epoch < config.n_epochs:
        tr.run_epoch()
        if checkpoint is not None:
            tr.save(checkpoint)
    return tr.curve, agent.state_dict()


# suites -----------------------------------------------------------------------


@dataclass
class Chain:
    suite: str
    algorithm: str
    seed: int
    legs: list[tuple[str, str]]  # (cell name, task id); each leg starts where the previous ended
    # legs sharing a training prefix: map leg index -> index of the leg to start from
    parents: list[int | None]

    @property
    def key(self) -> str:
        return f"{self.suite}-{self.legs[0][0].replace('/', '_')}-{self.algorithm}-{self.seed}"


def _triplet_chains(config: ExperimentConfig, suite: str) -> list[Chain]:
    chains = []
    for topo in config.topologies:
        variants = [] if suite == "training" else transfer_variants(topo)
        names = [f"{topo}/train"] + [f"{topo}/{v}" for v in variants]
        if config.cells:
            keep = [n for n in names[1:] if n in config.cells]
            if not keep and names[0] not in config.cells:
                continue
            names = [names[0]] + keep
        for alg in config.algorithms:
            for seed in config.seeds:
                legs = [(n, n) for n in names]
                chains.append(Chain(suite, alg, seed, legs, [None] + [0] * (len(legs) - 1)))
    return chains


def _forgetting_chains(config: ExperimentConfig) -> list[Chain]:
    legs = [("forgetting/a", "forgetting/a"), ("forgetting/b", "forgetting/b"), ("forgetting/a-again", "forgetting/a")]
    return [Chain("forgetting", alg, seed, list(legs), [None, 0, 1])
            for alg in config.algorithms for seed in config.seeds]


def _bids_chains(config: ExperimentConfig) -> list[Chain]:
    legs = [("linear_chain/train", "linear_chain/train"), ("linear_chain/transfer_last", "linear_chain/transfer_last")]
    return [Chain("bids", alg, seed, list(legs), [None, 0]) for alg in config.algorithms for seed in config.seeds]


def plan(config: ExperimentConfig) -> list[Chain]:
    if config.suite in ("training", "triplets"):
        return _triplet_chains(config, config.suite)
    if config.suite == "forgetting":
        return _forgetting_chains(config)
    return _bids_chains(config)


def bid_states(task) -> list[tuple[str, np.ndarray]]:
    """Observations along the task's optimal path, named ``s0``, ``s1``, ..."""
    from .env import encode_batch

    out = []
    for si, sub in enumerate(task.subtasks):
        for room in range(task.path_length):
            key = task.key(room, si)
            obs = encode_batch(task, np.array([room]), np.array([key]), np.array([float(sub.context)]))[0]
            name = f"s{room}" if len(task.subtasks) == 1 else f"{sub.name}:s{room}"
            out.append((name, obs))
    return out


def decision_bids(agent, obs: np.ndarray) -> np.ndarray:
    """Per-decision bids: mean auction bids for CVS, action probabilities otherwise."""
    if hasattr(agent, "society"):
        return agent.society.mean_bids(obs)[0].T
    return agent.policy.probs(obs)


@lru_cache(maxsize=None)
def source_fingerprint() -> str:
    """Hash of the package sources and kernel backend; cached results are tied to it.

    Computed once per process, so edits made during a run do not split its cache.
    """
    h = hashlib.sha256(kernels.BACKEND.encode())
    root = Path(__file__).parent
    for p in sorted(root.rglob("*.py")) + sorted(root.rglob("*.pyx")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def run_chain(config: ExperimentConfig, chain: Chain) -> dict:
    """Run every leg of a chain; returns curve rows and, for the bids suite, bid rows."""
    rows, bid_rows = [], []
    finals: list[dict | None] = []
    for i, ((cell, task_id), parent) in enumerate(zip(chain.legs, chain.parents)):
        task = task_from_id(task_id)
        on_epoch = None
        if chain.suite == "bids" and i > 0:
            states = bid_states(task)
            names = [n for n, _ in states]
            obs = np.stack([o for _, o in states])

            def on_epoch(tr, cell=cell, names=names, obs=obs):
                b = decision_bids(tr.agent, obs)
                row = {"suite": chain.suite, "cell": cell, "algorithm": chain.algorithm, "seed": chain.seed,
                       "epoch": tr.epoch, "samples": tr.epoch * config.epoch_size}
                for si, n in enumerate(names):
                    for k in range(task.n_doors):
                        row[f"{n}:{'ABCDEF'[k]}"] = repr(float(b[si, k]))
                bid_rows.append(row)

        initial = finals[parent] if parent is not None else None
        log.info("%s %s seed=%d leg=%s", chain.suite, chain.algorithm, chain.seed, cell)
        curve, final = train(config, task, chain.algorithm, chain.seed, leg=i, initial=initial, on_epoch=on_epoch)
        finals.append(final)
        for e, s, r in zip(curve.epochs, curve.samples, curve.returns):
            rows.append({"suite": chain.suite, "cell": cell, "algorithm": chain.algorithm, "seed": chain.seed,
                         "epoch": int(e), "samples": int(s), "mean_return": repr(float(r))})
    return {"rows": rows, "bids": bid_rows}


def _run_chain_cached(args) -> dict:
    config, chain, cache_dir = args
    if cache_dir is None:
        return run_chain(config, chain)
    fp = hashlib.sha256(json.dumps([_chain_config(config), asdict(chain), source_fingerprint()],
                                   sort_keys=True).encode()).hexdigest()[:16]
    path = Path(cache_dir) / f"{chain.key}-{fp}.json"
    if path.exists():
        return json.loads(path.read_text())
    out = run_chain(config, chain)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(out))
    tmp.replace(path)
    return out


def _chain_config(config: ExperimentConfig) -> dict:
    # fields that change a chain's numbers
    d = config.to_dict()
    return {k: d[k] for k in ("H", "epoch_size", "eval_episodes", "base_seed", "overrides")}


@dataclass
class SuiteResult:
    config: ExperimentConfig
    rows: list[dict]
    bid_rows: list[dict]
    report: EfficiencyReport

    def curves(self, cell: str, algorithm: str) -> dict[int, LearningCurve]:
        out: dict[int, LearningCurve] = {}
        for r in self.rows:
            if r["cell"] == cell and r["algorithm"] == algorithm:
                out.setdefault(int(r["seed"]), LearningCurve(int(r["seed"]), self.config.epoch_size)).append(float(r["mean_return"]))
        return out


def build_report(config: ExperimentConfig, rows: list[dict]) -> EfficiencyReport:
    report = EfficiencyReport()
    grouped: dict[tuple, list[float]] = {}
    for r in rows:
        grouped.setdefault((r["cell"], r["algorithm"], int(r["seed"])), []).append(float(r["mean_return"]))
    c = config.convergence
    for (cell, alg, seed), rets in sorted(grouped.items()):
        report.add(cell, alg, seed, convergence_samples(rets, c.target, c.eps, c.window, config.epoch_size))
    return report


def run_suite(config: ExperimentConfig, out_dir: str | os.PathLike | None = None,
              cache_dir: str | os.PathLike | None = None) -> SuiteResult:
    """Execute every chain of the suite and write CSVs and a report under ``out_dir``."""
    chains = plan(config)
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
    jobs = config.jobs or (os.cpu_count() or 1)
    args = [(config, ch, cache_dir) for ch in chains]
    if jobs > 1 and len(chains) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            outs = list(ex.map(_run_chain_cached, args))
    else:
        outs = [_run_chain_cached(a) for a in args]
    order = lambda r: (r["cell"], r["algorithm"], int(r["seed"]), int(r["epoch"]))  # noqa: E731
    rows = sorted((r for o in outs for r in o["rows"]), key=order)
    bid_rows = sorted((r for o in outs for r in o["bids"]), key=order)
    result = SuiteResult(config, rows, bid_rows, build_report(config, rows))
    if out_dir is not None:
        write_outputs(result, Path(out_dir))
    return result


def _write_csv(path: Path, rows: list[dict], fields) -> None:
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def write_outputs(result: SuiteResult, out: Path) -> None:
    """One curve CSV per cell, a combined ``curves.csv``, ``bids.csv`` and ``report.json``."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(result.config.to_dict(), indent=2, sort_keys=True) + "\n")
    _write_csv(out / "curves.csv", result.rows, CSV_FIELDS)
    cells = sorted({r["cell"] for r in result.rows})
    (out / "cells").mkdir(exist_ok=True)
    for cell in cells:
        _write_csv(out / "cells" / f"{cell.replace('/', '__')}.csv", [r for r in result.rows if r["cell"] == cell], CSV_FIELDS)
    if result.bid_rows:
        fields = list(CSV_FIELDS[:-1]) + [k for k in result.bid_rows[0] if k not in CSV_FIELDS]
        _write_csv(out / "bids.csv", result.bid_rows, fields)
    report = result.report.to_json_dict()
    report["convergence_metric"] = asdict(result.config.convergence)
    report["suite"] = result.config.suite
    report["source_fingerprint"] = source_fingerprint()
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def chain_count(config: ExperimentConfig) -> int:
    return len(plan(config))


def cell_names(config: ExperimentConfig) -> list[str]:
    return sorted({c for ch in plan(config) for c, _ in ch.legs})


def optimal_return(task) -> float:
    """Undiscounted return of the optimal policy: the final reward, always reachable in time."""
    return 1.0 if task.path_length <= task.max_steps else 0.0


__all__ = [
    "Chain", "ConfigError", "Convergence", "EfficiencyReport", "ExperimentConfig", "LearningCurve",
    "NotConverged", "SuiteResult", "Trainer", "Undefined", "build_report", "convergence_samples",
    "evaluate", "load_checkpoint", "make_task", "optimal_return", "plan", "relative_efficiency",
    "run_chain", "run_suite", "save_checkpoint", "train",
]
