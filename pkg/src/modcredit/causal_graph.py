"""Directed acyclic factor graphs and d-separation.

A :class:`ComputationalGraph` is bipartite: variable nodes hold data, function
nodes compute their outputs from their inputs.  Independence queries run on the
:class:`VariableDag` obtained by dissolving every function node into parent
relations (each input of ``f`` becomes a parent of each output of ``f``).

Two d-separation routines are provided.  :func:`d_separated` is a linear-time
reachability search; :func:`d_separated_bruteforce` enumerates every simple
undirected path and checks the blocking rules one path at a time.  The second
exists to check the first.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Iterator, NewType, Sequence

NodeId = NewType("NodeId", int)

VARIABLE = "variable"
FUNCTION = "function"

BRUTEFORCE_MAX_NODES = 25


class GraphError(Exception):
    """Base class for graph construction and query errors."""


class CycleError(GraphError):
    pass


class UnknownNode(GraphError, KeyError):
    pass


class ArityError(GraphError, ValueError):
    pass


class FinalizedError(GraphError):
    pass


class OverlapError(GraphError, ValueError):
    pass


class SizeError(GraphError, ValueError):
    pass


class ComputationalGraph:
    """Bipartite DAG of variable and function nodes.

    Acyclicity is checked on every :meth:`add_function` call, so a graph is
    acyclic at all times.  After :meth:`finalize` the graph is read-only.
    """

    def __init__(self) -> None:
        self._labels: list[str] = []
        self._kinds: list[str] = []
        self._succ: list[list[int]] = []
        self._pred: list[list[int]] = []
        self._finalized = False

    # construction -----------------------------------------------------------

    def _new_node(self, label: str, kind: str) -> NodeId:
        if self._finalized:
            raise FinalizedError("graph is finalized")
        self._labels.append(str(label))
        self._kinds.append(kind)
        self._succ.append([])
        self._pred.append([])
        return NodeId(len(self._labels) - 1)

    def add_variable(self, label: str) -> NodeId:
        return self._new_node(label, VARIABLE)

    def add_function(
        self, label: str, inputs: Sequence[NodeId], outputs: Sequence[NodeId]
    ) -> NodeId:
        if self._finalized:
            raise FinalizedError("graph is finalized")
        inputs = list(dict.fromkeys(inputs))
        outputs = list(dict.fromkeys(outputs))
        if not inputs:
            raise ArityError(f"function {label!r} needs at least one input")
        if not outputs:
            raise ArityError(f"function {label!r} needs at least one output")
        for v in (*inputs, *outputs):
            if not (isinstance(v, int) and 0 <= v < len(self._kinds)):
                raise UnknownNode(v)
            if self._kinds[v] != VARIABLE:
                raise GraphError(f"node {v} ({self._labels[v]!r}) is not a variable")
        shared = set(inputs) & set(outputs)
        if shared:
            raise CycleError(f"{label!r} lists {sorted(shared)} as both input and output")
        # The new function node closes a cycle iff some output already reaches an input.
        targets = set(inputs)
        if self._reaches_any(outputs, targets):
            raise CycleError(f"{label!r} would create a directed cycle")
        fn = self._new_node(label, FUNCTION)
        for v in inputs:
            self._succ[v].append(fn)
            self._pred[fn].append(v)
        for v in outputs:
            self._succ[fn].append(v)
            self._pred[v].append(fn)
        return fn

    def _reaches_any(self, sources: Iterable[int], targets: set[int]) -> bool:
        seen: set[int] = set()
        stack = list(sources)
        while stack:
            v = stack.pop()
            if v in targets:
                return True
            if v in seen:
                continue
            seen.add(v)
            stack.extend(self._succ[v])
        return False

    def finalize(self) -> "ComputationalGraph":
        self._finalized = True
        return self

    # inspection -------------------------------------------------------------

    @property
    def finalized(self) -> bool:
        return self._finalized

    def __len__(self) -> int:
        return len(self._labels)

    def label(self, node: NodeId) -> str:
        return self._labels[node]

    def kind(self, node: NodeId) -> str:
        return self._kinds[node]

    @property
    def variable_nodes(self) -> list[NodeId]:
        return [NodeId(i) for i, k in enumerate(self._kinds) if k == VARIABLE]

    @property
    def function_nodes(self) -> list[NodeId]:
        return [NodeId(i) for i, k in enumerate(self._kinds) if k == FUNCTION]

    def inputs(self, fn: NodeId) -> list[NodeId]:
        return [NodeId(v) for v in self._pred[fn]]

    def outputs(self, fn: NodeId) -> list[NodeId]:
        return [NodeId(v) for v in self._succ[fn]]

    def edges(self) -> list[tuple[NodeId, NodeId]]:
        return [
            (NodeId(u), NodeId(v))
            for u in range(len(self._succ))
            for v in sorted(self._succ[u])
        ]

    def find(self, label: str) -> NodeId:
        """Return the unique node carrying ``label``."""
        hits = [i for i, lab in enumerate(self._labels) if lab == label]
        if len(hits) != 1:
            raise UnknownNode(label)
        return NodeId(hits[0])


@dataclass(frozen=True)
class VariableDag:
    """DAG over variable nodes only.

    ``parents`` maps every node to a frozenset of its parents.  Node ids are the
    ids of the originating :class:`ComputationalGraph`, so they need not be
    contiguous.
    """

    nodes: tuple[NodeId, ...]
    parents: dict[NodeId, frozenset[NodeId]]
    labels: dict[NodeId, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        children: dict[NodeId, set[NodeId]] = {v: set() for v in self.nodes}
        for v, ps in self.parents.items():
            for p in ps:
                children[p].add(v)
        object.__setattr__(
            self, "_children", {v: frozenset(c) for v, c in children.items()}
        )
        object.__setattr__(self, "_path_cache", {})

    @classmethod
    def from_edges(
        cls,
        n_or_nodes: int | Iterable[int],
        edges: Iterable[tuple[int, int]],
        labels: dict[int, str] | None = None,
    ) -> "VariableDag":
        nodes = range(n_or_nodes) if isinstance(n_or_nodes, int) else n_or_nodes
        nodes = tuple(sorted(NodeId(v) for v in nodes))
        parents: dict[NodeId, set[NodeId]] = {v: set() for v in nodes}
        for u, v in edges:
            if u not in parents or v not in parents:
                raise UnknownNode((u, v))
            parents[NodeId(v)].add(NodeId(u))
        dag = cls(nodes, {v: frozenset(p) for v, p in parents.items()}, dict(labels or {}))
        if not dag.is_acyclic():
            raise CycleError("edge list contains a directed cycle")
        return dag

    def children(self, v: NodeId) -> frozenset[NodeId]:
        return self._children[v]  # type: ignore[attr-defined]

    def label(self, v: NodeId) -> str:
        return self.labels.get(v, str(v))

    def find(self, label: str) -> NodeId:
        hits = [v for v in self.nodes if self.label(v) == label]
        if len(hits) != 1:
            raise UnknownNode(label)
        return hits[0]

    def edges(self) -> list[tuple[NodeId, NodeId]]:
        return [(p, v) for v in self.nodes for p in sorted(self.parents[v])]

    def is_acyclic(self) -> bool:
        indeg = {v: len(self.parents[v]) for v in self.nodes}
        queue = deque(v for v in self.nodes if indeg[v] == 0)
        seen = 0
        while queue:
            v = queue.popleft()
            seen += 1
            for c in self.children(v):
                indeg[c] -= 1
                if indeg[c] == 0:
                    queue.append(c)
        return seen == len(self.nodes)

    def descendants(self, v: NodeId) -> set[NodeId]:
        out: set[NodeId] = set()
        stack = list(self.children(v))
        while stack:
            u = stack.pop()
            if u not in out:
                out.add(u)
                stack.extend(self.children(u))
        return out

    def ancestors_of(self, nodes: Iterable[NodeId]) -> set[NodeId]:
        """``nodes`` together with all their ancestors."""
        out: set[NodeId] = set()
        stack = list(nodes)
        while stack:
            u = stack.pop()
            if u not in out:
                out.add(u)
                stack.extend(self.parents[u])
        return out

    def neighbors(self, v: NodeId) -> frozenset[NodeId]:
        return self.parents[v] | self.children(v)


def to_variable_dag(graph: ComputationalGraph) -> VariableDag:
    nodes = tuple(graph.variable_nodes)
    parents: dict[NodeId, set[NodeId]] = {v: set() for v in nodes}
    for fn in graph.function_nodes:
        ins = graph.inputs(fn)
        for out in graph.outputs(fn):
            parents[out].update(ins)
    labels = {v: graph.label(v) for v in nodes}
    return VariableDag(nodes, {v: frozenset(p) for v, p in parents.items()}, labels)


def _check_sets(dag: VariableDag, X, Y, Z) -> tuple[set, set, set]:
    X, Y, Z = set(X), set(Y), set(Z)
    known = set(dag.nodes)
    for s in (X, Y, Z):
        bad = s - known
        if bad:
            raise UnknownNode(sorted(bad))
    if X & Y or X & Z or Y & Z:
        raise OverlapError("X, Y and Z must be pairwise disjoint")
    return X, Y, Z


def d_connected_nodes(dag: VariableDag, X: Iterable[NodeId], Z: Iterable[NodeId]) -> set[NodeId]:
    """Nodes reachable from ``X`` along an active trail given ``Z``.

    Reachability ("Bayes-ball") over (node, direction) states.  ``up`` means the
    trail entered the node from one of its children, ``down`` from a parent.
    """
    Z = set(Z)
    anc_z = dag.ancestors_of(Z)
    visited: set[tuple[NodeId, bool]] = set()
    reached: set[NodeId] = set()
    queue: deque[tuple[NodeId, bool]] = deque((x, True) for x in X)
    while queue:
        v, up = queue.popleft()
        if (v, up) in visited:
            continue
        visited.add((v, up))
        if v not in Z:
            reached.add(v)
        if up:
            if v not in Z:
                queue.extend((p, True) for p in dag.parents[v])
                queue.extend((c, False) for c in dag.children(v))
        else:
            if v not in Z:
                queue.extend((c, False) for c in dag.children(v))
            if v in anc_z:
                # collider with itself or a descendant observed
                queue.extend((p, True) for p in dag.parents[v])
    return reached


def d_separated(dag: VariableDag, X, Y, Z) -> bool:
    """True iff ``Z`` blocks every undirected path between ``X`` and ``Y``."""
    X, Y, Z = _check_sets(dag, X, Y, Z)
    if not X or not Y:
        return True
    return not (d_connected_nodes(dag, X, Z) & Y)


def _simple_paths(dag: VariableDag, x: NodeId, y: NodeId) -> list[tuple[NodeId, ...]]:
    cache = dag._path_cache  # type: ignore[attr-defined]
    key = (x, y)
    if key in cache:
        return cache[key]
    paths: list[tuple[NodeId, ...]] = []
    path = [x]
    on_path = {x}

    def walk(v: NodeId) -> None:
        for u in sorted(dag.neighbors(v)):
            if u == y:
                paths.append((*path, y))
            elif u not in on_path:
                path.append(u)
                on_path.add(u)
                walk(u)
                path.pop()
                on_path.discard(u)

    walk(x)
    cache[key] = paths
    return paths


def is_collider(dag: VariableDag, a: NodeId, m: NodeId, b: NodeId) -> bool:
    return a in dag.parents[m] and b in dag.parents[m]


def path_blocked(dag: VariableDag, path: Sequence[NodeId], Z: set[NodeId]) -> bool:
    """Blocking rules applied to one path, node triple by node triple."""
    for a, m, b in zip(path, path[1:], path[2:]):
        if is_collider(dag, a, m, b):
            if m not in Z and not (dag.descendants(m) & Z):
                return True
        elif m in Z:
            return True
    return False


def d_separated_bruteforce(dag: VariableDag, X, Y, Z) -> bool:
    """Path-enumeration oracle for :func:`d_separated` (small graphs only)."""
    if len(dag.nodes) > BRUTEFORCE_MAX_NODES:
        raise SizeError(
            f"{len(dag.nodes)} nodes exceeds the oracle limit of {BRUTEFORCE_MAX_NODES}"
        )
    X, Y, Z = _check_sets(dag, X, Y, Z)
    for x in sorted(X):
        for y in sorted(Y):
            for path in _simple_paths(dag, x, y):
                if not path_blocked(dag, path, Z):
                    return False
    return True


def iter_open_paths(
    dag: VariableDag, x: NodeId, y: NodeId, Z: Iterable[NodeId]
) -> Iterator[list[NodeId]]:
    """Yield unblocked simple paths from ``x`` to ``y`` in label order.

    Depth-first search that visits neighbours sorted by label and drops a prefix
    as soon as one of its interior nodes is blocked, so the first path yielded
    is the lexicographically smallest one.  Prefixes whose endpoint cannot reach
    ``y`` along any active trail are pruned using :func:`d_connected_nodes`.
    """
    Z = set(Z)
    if x in Z or y in Z:
        return
    desc_in_z = {v: bool(dag.descendants(v) & Z) for v in dag.nodes}

    def blocked(a: NodeId, m: NodeId, b: NodeId) -> bool:
        if is_collider(dag, a, m, b):
            return m not in Z and not desc_in_z[m]
        return m in Z

    if not (d_connected_nodes(dag, [x], Z) & {y}):
        return
    order = lambda v: (dag.label(v), v)  # noqa: E731
    path = [x]
    on_path = {x}

    def walk() -> Iterator[list[NodeId]]:
        v = path[-1]
        for u in sorted(dag.neighbors(v), key=order):
            if u in on_path:
                continue
            if len(path) >= 2 and blocked(path[-2], v, u):
                continue
            if u == y:
                yield [*path, y]
                continue
            path.append(u)
            on_path.add(u)
            yield from walk()
            path.pop()
            on_path.discard(u)

    yield from walk()


def first_open_path(
    dag: VariableDag, x: NodeId, y: NodeId, Z: Iterable[NodeId]
) -> list[NodeId] | None:
    return next(iter_open_paths(dag, x, y, Z), None)


def random_dag(n: int, rng, edge_prob: float = 0.35) -> VariableDag:
    """Random DAG on ``n`` nodes: edges respect a random topological order."""
    order = list(rng.permutation(n))
    edges = [
        (order[i], order[j])
        for i, j in combinations(range(n), 2)
        if rng.random() < edge_prob
    ]
    return VariableDag.from_edges(n, edges)


def _dot_quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def export_dot(graph: ComputationalGraph, name: str = "G") -> str:
    """DOT text: variables as ellipses, functions as boxes, sorted by node id."""
    lines = [f"digraph {_dot_quote(name)} {{"]
    for v in range(len(graph)):
        shape = "ellipse" if graph.kind(NodeId(v)) == VARIABLE else "box"
        lines.append(f"  n{v} [label={_dot_quote(graph.label(NodeId(v)))}, shape={shape}];")
    for u, v in graph.edges():
        lines.append(f"  n{u} -> n{v};")
    lines.append("}")
    return "\n".join(lines) + "\n"
