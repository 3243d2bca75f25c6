"""Modularity verdicts for credit-assignment schemes.

The execution graph of a rollout is built in the societal decision-making
layout.  At every step each decision mechanism ``f^k`` reads the state and
emits a bid.  A selection node turns the bids into a flag, which the
environment combines with the state to give the next state and a reward.
:func:`build_acml` then adds
the gradient-producing internals of an algorithm class on top, and
:func:`check_criterion` asks whether the gradient nodes are d-separated by the
trace together with the mechanisms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Hashable, Sequence

from .causal_graph import (
    ComputationalGraph,
    NodeId,
    VariableDag,
    d_separated,
    first_open_path,
    to_variable_dag,
)


class Kind(str, Enum):
    POLICY_GRADIENT = "policy-gradient"
    TD_N = "tdn"
    TD0 = "td0"


class Sharing(str, Enum):
    MONOLITHIC = "monolithic"
    FACTORIZED = "factorized"
    TABULAR = "tabular"


MONTE_CARLO = "mc"


@dataclass(frozen=True)
class AlgorithmClass:
    kind: Kind
    sharing: Sharing = Sharing.FACTORIZED
    n: int | str | None = None  # TD(n) horizon, or MONTE_CARLO
    on_policy: bool = True  # TD(0) only
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "sharing", Sharing(self.sharing))
        if self.kind is Kind.TD_N:
            if self.n != MONTE_CARLO and not (isinstance(self.n, int) and self.n >= 2):
                raise ValueError(f"TD(n) needs n >= 2 or {MONTE_CARLO!r}, got {self.n!r}")
        elif self.n is not None:
            raise ValueError("n is only meaningful for TD(n)")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.kind is Kind.TD_N:
            return "td-mc" if self.n == MONTE_CARLO else f"td{self.n}"
        if self.kind is Kind.TD0:
            return "td0" if self.on_policy else "td0-offpolicy"
        return self.kind.value


# The algorithms used in the experiments and the modularity table.
CVS = AlgorithmClass(Kind.TD0, Sharing.FACTORIZED, on_policy=True, name="cvs")
PPO = AlgorithmClass(Kind.POLICY_GRADIENT, Sharing.MONOLITHIC, name="ppo")
PPOF = AlgorithmClass(Kind.POLICY_GRADIENT, Sharing.FACTORIZED, name="ppof")
TABULAR_Q = AlgorithmClass(Kind.TD0, Sharing.TABULAR, on_policy=False, name="q-learning")
TABULAR_SARSA = AlgorithmClass(Kind.TD0, Sharing.TABULAR, on_policy=True, name="sarsa")
DQN_LIKE = AlgorithmClass(Kind.TD0, Sharing.MONOLITHIC, on_policy=False, name="dqn-like")
REINFORCE = AlgorithmClass(Kind.POLICY_GRADIENT, Sharing.FACTORIZED, name="reinforce")

NAMED_CLASSES = {
    a.name: a for a in (CVS, PPO, PPOF, TABULAR_Q, TABULAR_SARSA, DQN_LIKE, REINFORCE)
}


@dataclass(frozen=True)
class TraceSkeleton:
    """States ``s_0..s_T`` (opaque hashables) and selected decisions ``k_0..k_{T-1}``.

    Decisions are numbered ``1..N``.
    """

    states: tuple[Hashable, ...]
    selected: tuple[int, ...]
    n_decisions: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "selected", tuple(self.selected))
        if len(self.states) != len(self.selected) + 1:
            raise ValueError("need exactly one more state than selected decisions")
        if self.n_decisions < 1:
            raise ValueError("need at least one decision")
        for k in self.selected:
            if not 1 <= k <= self.n_decisions:
                raise ValueError(f"decision {k} outside 1..{self.n_decisions}")

    @property
    def T(self) -> int:
        return len(self.selected)

    @classmethod
    def acyclic(cls, T: int, N: int) -> "TraceSkeleton":
        return cls(tuple(f"s{t}" for t in range(T + 1)), tuple(t % N + 1 for t in range(T)), N)

    @classmethod
    def with_collision(cls, T: int, N: int, at: int) -> "TraceSkeleton":
        """Acyclic trace except that step ``at`` lands in the same state as step ``at-1``.

        This is what a wrong door does in the key-door task: the room does not
        change, so two consecutive steps share a successor.
        """
        if not 1 <= at < T:
            raise ValueError(f"collision step must be in 1..{T - 1}")
        states = [f"s{t}" for t in range(T + 1)]
        states[at + 1] = states[at]
        return cls(tuple(states), tuple(t % N + 1 for t in range(T)), N)


@dataclass
class Acml:
    graph: ComputationalGraph
    dag: VariableDag
    conditioning: list[NodeId]
    gradients: list[NodeId]
    gradient_index: dict[NodeId, tuple[int, int]] = field(default_factory=dict)


def _label_bid(k: int, t: int) -> str:
    return f"b^{k}_{t}"


def _execution(skel: TraceSkeleton) -> tuple[ComputationalGraph, dict]:
    g = ComputationalGraph()
    T, N = skel.T, skel.n_decisions
    ids: dict = {}
    ids["f"] = [g.add_variable(f"f^{k}") for k in range(1, N + 1)] if T > 0 else []
    ids["s"] = [g.add_variable("s_0")]
    ids["b"], ids["w"], ids["r"] = [], [], []
    for t in range(T):
        s_t = ids["s"][t]
        bids = []
        for k in range(1, N + 1):
            b = g.add_variable(_label_bid(k, t))
            g.add_function(f"APPLY^{k}_{t}", [ids["f"][k - 1], s_t], [b])
            bids.append(b)
        w = g.add_variable(f"w_{t}")
        g.add_function(f"SELECT_{t}", bids, [w])
        s_next = g.add_variable(f"s_{t + 1}")
        r = g.add_variable(f"r_{t}")
        g.add_function(f"STEP_{t}", [s_t, w], [s_next, r])
        ids["b"].append(bids)
        ids["w"].append(w)
        ids["s"].append(s_next)
        ids["r"].append(r)
    return g, ids


def build_execution_graph(skeleton: TraceSkeleton) -> ComputationalGraph:
    return _execution(skeleton)[0].finalize()


def _grad_label(k: int, t: int) -> str:
    return f"delta^{k}_{t}"


def build_acml(algo: AlgorithmClass, skeleton: TraceSkeleton) -> Acml:
    g, ids = _execution(skeleton)
    T, N = skeleton.T, skeleton.n_decisions
    f, s, b, w, r = ids["f"], ids["s"], ids["b"], ids["w"], ids["r"]
    conditioning = [*f, *s, *[x for row in b for x in row], *w, *r]
    gradients: list[NodeId] = []
    index: dict[NodeId, tuple[int, int]] = {}

    def add_grad(k: int, t: int, parents: list[NodeId]) -> None:
        d = g.add_variable(_grad_label(k, t))
        g.add_function(f"PI_{k}_{t}", parents, [d])
        gradients.append(d)
        index[d] = (t, k)

    if algo.kind is Kind.POLICY_GRADIENT:
        if T > 0:
            ret = g.add_variable("sum_t r_t")
            g.add_function("RETURN", list(r), [ret])
        for t in range(T):
            norm = g.add_variable(f"sum_k b^k_{t}")
            g.add_function(f"NORMALIZE_{t}", list(b[t]), [norm])
            # Softmax coupling: every mechanism receives a gradient at every step.
            for k in range(1, N + 1):
                add_grad(k, t, [f[k - 1], s[t], b[t][k - 1], w[t], norm, ret])

    elif algo.kind is Kind.TD_N:
        if algo.n == MONTE_CARLO or T <= algo.n:
            windows = [(0, T)] if T > 0 else []
        else:
            windows = [(j, j + algo.n) for j in range(T - algo.n + 1)]
        shared: list[tuple[tuple[int, int], NodeId]] = []
        for lo, hi in windows:
            label = "sum_t r_t" if (lo, hi) == (0, T) else f"sum r[{lo}:{hi}]"
            node = g.add_variable(label)
            bootstrap = list(b[hi]) if hi < T else [s[hi]]
            g.add_function(f"NSTEP[{lo}:{hi}]", [*r[lo:hi], *bootstrap], [node])
            shared.append(((lo, hi), node))
        for t in range(T):
            k = skeleton.selected[t]
            inside = [node for (lo, hi), node in shared if lo <= t < hi]
            add_grad(k, t, [f[k - 1], s[t], b[t][k - 1], *inside])

    else:  # TD(0)
        # Targets are keyed by successor state: repeated successors share one node.
        targets: dict[Hashable, NodeId] = {}
        for t in range(T):
            key = skeleton.states[t + 1]
            if key in targets:
                continue
            occurrences = [j for j in range(T + 1) if skeleton.states[j] == key]
            if algo.on_policy:
                parents = [x for j in occurrences if j < T for x in (*b[j], w[j])]
                parents = parents or [s[j] for j in occurrences]
                label = f"max_k b^k[{key}]"
            else:
                parents = [*(s[j] for j in occurrences), *f]
                label = f"max_k Q[{key}]"
            node = g.add_variable(label)
            g.add_function(f"TARGET[{key}]", parents, [node])
            targets[key] = node
        for t in range(T):
            k = skeleton.selected[t]
            add_grad(
                k,
                t,
                [f[k - 1], s[t], b[t][k - 1], s[t + 1], r[t], targets[skeleton.states[t + 1]]],
            )

    g.finalize()
    return Acml(g, to_variable_dag(g), conditioning, gradients, index)


def detect_cycle(skeleton: TraceSkeleton) -> bool:
    successors = skeleton.states[1:]
    return len(set(successors)) != len(successors)


def _ordered_gradients(acml: Acml) -> list[NodeId]:
    return sorted(acml.gradients, key=lambda d: acml.gradient_index[d])


def check_criterion(
    algo: AlgorithmClass, skeleton: TraceSkeleton, acml: Acml | None = None
) -> tuple[bool, list[str] | None]:
    """Pairwise d-separation of all gradient nodes given trace and mechanisms.

    Gradient pairs are visited in (step, decision) order; the witness is the
    label-lexicographically first open path of the first connected pair.
    """
    acml = acml or build_acml(algo, skeleton)
    Z = set(acml.conditioning)
    grads = _ordered_gradients(acml)
    for i, a in enumerate(grads):
        for c in grads[i + 1:]:
            if not d_separated(acml.dag, {a}, {c}, Z):
                path = first_open_path(acml.dag, a, c, Z)
                assert path is not None
                return False, [acml.dag.label(v) for v in path]
    return True, None


def check_static_modularity(algo: AlgorithmClass) -> bool:
    return algo.sharing in (Sharing.FACTORIZED, Sharing.TABULAR)


@dataclass(frozen=True)
class ModularityVerdict:
    algorithm: str
    T: int
    N: int
    criterion_satisfied: bool
    static_modularity: bool
    dynamic_modularity: bool
    cyclic_trace: bool
    witness: tuple[str, ...] | None = None

    def to_json_dict(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "T": self.T,
            "N": self.N,
            "criterion": self.criterion_satisfied,
            "static": self.static_modularity,
            "dynamic": self.dynamic_modularity,
            "cyclic": self.cyclic_trace,
            "witness": list(self.witness) if self.witness else [],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), ensure_ascii=False)


def check_dynamic_modularity(algo: AlgorithmClass, skeleton: TraceSkeleton) -> ModularityVerdict:
    criterion, witness = check_criterion(algo, skeleton)
    static = check_static_modularity(algo)
    return ModularityVerdict(
        algorithm=algo.label,
        T=skeleton.T,
        N=skeleton.n_decisions,
        criterion_satisfied=criterion,
        static_modularity=static,
        dynamic_modularity=criterion and static,
        cyclic_trace=detect_cycle(skeleton),
        witness=tuple(witness) if witness else None,
    )


def factorization_report(algo: AlgorithmClass, skeleton: TraceSkeleton) -> str:
    """Plain-text statement of whether the joint gradient description factorizes.

    No description lengths are computed; the verdict comes from the graph.
    """
    v = check_dynamic_modularity(algo, skeleton)
    head = f"algorithm {v.algorithm}, T={v.T}, N={v.N}"
    if v.T == 0:
        return f"{head}: no gradients; vacuously modular.\n"
    lines = [head + ":"]
    if v.criterion_satisfied:
        lines.append(
            "  the gradients are d-separated by the trace and the mechanisms, so the joint "
            "description of the gradients factorizes into per-step descriptions."
        )
    else:
        hidden = [lab for lab in v.witness[1:-1] if lab.startswith(("sum", "max"))]
        lines.append(
            "  the joint description of the gradients does not factorize per step: "
            f"{v.witness[0]} and {v.witness[-1]} are connected through the shared hidden "
            f"variable {hidden[0] if hidden else v.witness[1]!s}."
        )
        lines.append("  open path: " + " - ".join(v.witness))
    lines.append(f"  trace cyclic: {v.cyclic_trace}")
    lines.append(
        f"  static modularity: {v.static_modularity}; dynamic modularity: {v.dynamic_modularity}"
    )
    return "\n".join(lines) + "\n"


def relabel(skeleton: TraceSkeleton, decision_perm: Sequence[int], state_map: dict) -> TraceSkeleton:
    """Apply a decision permutation (``perm[k-1]`` is the new index of ``k``) and state renaming."""
    return TraceSkeleton(
        tuple(state_map[s] for s in skeleton.states),
        tuple(decision_perm[k - 1] for k in skeleton.selected),
        skeleton.n_decisions,
    )
