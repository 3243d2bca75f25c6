"""Key-door room navigation tasks.

Every room holds one key.  Going through the door whose key is present moves
the agent to the next room; any other door leaves it where it is.  Opening the
keyed door of the last room ends the episode with reward 1.  States are the
concatenation of a one-hot room vector and a one-hot key vector, plus context
bits for the forgetting pair.

Tasks are addressed by ``"<topology>/<variant>"`` ids, e.g.
``"linear_chain/transfer_last"`` or ``"forgetting/a"``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

DOORS = "ABCDEF"
MAX_STEPS = 20

ANY = "*"  # subtask wildcard in key schedules

TOPOLOGIES = ("linear_chain", "common_ancestor", "common_descendant", "forgetting")


class UnknownVariant(KeyError):
    pass


@dataclass(frozen=True)
class Subtask:
    name: str
    weight: float
    context: int = 0


@dataclass(frozen=True)
class TaskSpec:
    """Immutable description of one key-door task.

    ``key_schedule`` maps ``(room, subtask name or ANY)`` to a door index.  A
    subtask-specific entry overrides the wildcard entry for the same room.
    Rooms ``0 .. path_length-1`` are decision rooms; room ``path_length`` is the
    terminal room and is never observed by the agent.
    """

    topology: str
    variant: str
    n_rooms: int
    doors: str
    path_length: int
    key_schedule: tuple[tuple[tuple[int, str], int], ...]
    subtasks: tuple[Subtask, ...]
    context_bits: int = 0
    max_steps: int = MAX_STEPS
    intervention: str | None = None

    @property
    def task_id(self) -> str:
        return f"{self.topology}/{self.variant}"

    @property
    def n_doors(self) -> int:
        return len(self.doors)

    @property
    def obs_dim(self) -> int:
        return self.n_rooms + self.n_doors + self.context_bits

    @property
    def schedule(self) -> dict[tuple[int, str], int]:
        return dict(self.key_schedule)

    def key(self, room: int, subtask: int) -> int:
        sched = self.schedule
        name = self.subtasks[subtask].name
        if (room, name) in sched:
            return sched[(room, name)]
        return sched[(room, ANY)]

    @property
    def reward_door(self) -> dict[str, int]:
        """Correct final door per subtask."""
        last = self.path_length - 1
        return {st.name: self.key(last, i) for i, st in enumerate(self.subtasks)}

    def key_table(self) -> np.ndarray:
        """``table[room, subtask]`` -> key door (decision rooms only)."""
        return np.array(
            [[self.key(r, i) for i in range(len(self.subtasks))] for r in range(self.path_length)],
            dtype=np.int64,
        )

    def to_json_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "topology": self.topology,
            "variant": self.variant,
            "n_rooms": self.n_rooms,
            "doors": list(self.doors),
            "path_length": self.path_length,
            "obs_dim": self.obs_dim,
            "context_bits": self.context_bits,
            "max_steps": self.max_steps,
            "key_schedule": [
                {"room": room, "subtask": st, "door": self.doors[d]}
                for (room, st), d in sorted(self.key_schedule)
            ],
            "subtasks": [
                {
                    "name": st.name,
                    "weight": st.weight,
                    "context": st.context,
                    "optimal_sequence": [self.doors[d] for d in optimal_sequence(self, i)],
                }
                for i, st in enumerate(self.subtasks)
            ],
            "reward_door": {k: self.doors[v] for k, v in self.reward_door.items()},
            "intervention": self.intervention,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)


@dataclass
class EnvState:
    room: int
    key: int
    subtask: int
    steps_taken: int = 0


@dataclass(frozen=True)
class StepResult:
    next_state: EnvState
    reward: float
    done: bool


def _d(label: str) -> int:
    return DOORS.index(label)


def _sched(entries: Iterable[tuple[int, str, str]]) -> tuple:
    return tuple(sorted(((room, st), _d(door)) for room, st, door in entries))


# Transfer edits: variant -> (room, subtask, new door).  The letters b, c, d
# alias the three variants in this order.
_TRANSFERS: dict[str, dict[str, tuple[int, str, str]]] = {
    "linear_chain": {
        "transfer_first": (0, ANY, "F"),
        "transfer_middle": (1, ANY, "E"),
        "transfer_last": (2, ANY, "D"),
    },
    "common_ancestor": {
        "transfer_root": (0, ANY, "F"),
        "transfer_left": (1, "AB", "D"),
        "transfer_right": (1, "AC", "E"),
    },
    "common_descendant": {
        "transfer_left": (0, "AC", "E"),
        "transfer_right": (0, "BC", "F"),
        "transfer_sink": (1, ANY, "D"),
    },
}

_LETTERS = {"a": "train"}


def transfer_variants(topology: str) -> list[str]:
    if topology not in _TRANSFERS:
        raise UnknownVariant(topology)
    return list(_TRANSFERS[topology])


def _training_task(topology: str) -> TaskSpec:
    if topology == "linear_chain":
        return TaskSpec(
            topology, "train", n_rooms=4, doors=DOORS, path_length=3,
            key_schedule=_sched([(0, ANY, "A"), (1, ANY, "B"), (2, ANY, "C")]),
            subtasks=(Subtask("ABC", 1.0),),
        )
    if topology == "common_ancestor":
        return TaskSpec(
            topology, "train", n_rooms=3, doors=DOORS, path_length=2,
            key_schedule=_sched([(0, ANY, "A"), (1, "AB", "B"), (1, "AC", "C")]),
            subtasks=(Subtask("AB", 0.5), Subtask("AC", 0.5)),
        )
    if topology == "common_descendant":
        return TaskSpec(
            topology, "train", n_rooms=3, doors=DOORS, path_length=2,
            key_schedule=_sched([(0, "AC", "A"), (0, "BC", "B"), (1, ANY, "C")]),
            subtasks=(Subtask("AC", 0.5), Subtask("BC", 0.5)),
        )
    raise UnknownVariant(topology)


def _forgetting_task(variant: str) -> TaskSpec:
    # Start states differ by key (s_0 vs s_1); the middle state s_2 carries the context bit.
    if variant == "a":
        entries, sub = [(0, ANY, "A"), (1, ANY, "C")], Subtask("AC", 1.0, context=0)
    elif variant == "b":
        entries, sub = [(0, ANY, "B"), (1, ANY, "D")], Subtask("BD", 1.0, context=1)
    else:
        raise UnknownVariant(f"forgetting/{variant}")
    return TaskSpec(
        "forgetting", variant, n_rooms=3, doors=DOORS[:4], path_length=2,
        key_schedule=_sched(entries), subtasks=(sub,), context_bits=1,
    )


def make_task(topology: str, variant: str = "train", *, max_steps: int = MAX_STEPS) -> TaskSpec:
    if topology == "forgetting":
        task = _forgetting_task(variant)
    elif topology in _TRANSFERS:
        letters = {**_LETTERS, **dict(zip("bcd", _TRANSFERS[topology]))}
        variant = letters.get(variant, variant)
        task = _training_task(topology)
        if variant != "train":
            task = apply_intervention(task, variant)
    else:
        raise UnknownVariant(topology)
    return replace(task, max_steps=max_steps) if max_steps != task.max_steps else task


def task_from_id(task_id: str, **kw) -> TaskSpec:
    topology, _, variant = task_id.partition("/")
    return make_task(topology, variant or "train", **kw)


def all_task_ids() -> list[str]:
    ids = []
    for topo in ("linear_chain", "common_ancestor", "common_descendant"):
        ids.append(f"{topo}/train")
        ids.extend(f"{topo}/{v}" for v in _TRANSFERS[topo])
    ids.extend(["forgetting/a", "forgetting/b"])
    return ids


def apply_intervention(task: TaskSpec, which: str) -> TaskSpec:
    """Replace exactly one key-schedule entry of a training task.

    ``which`` is a transfer variant of the task's topology, or ``"train"`` to
    undo a previous intervention.
    """
    if task.topology not in _TRANSFERS:
        raise UnknownVariant(f"{task.topology} has no transfer edits")
    base = _training_task(task.topology)
    base = replace(base, max_steps=task.max_steps)
    if which == "train":
        return base
    edits = _TRANSFERS[task.topology]
    if which not in edits:
        raise UnknownVariant(f"{task.topology}/{which}")
    room, st, door = edits[which]
    sched = dict(base.key_schedule)
    assert (room, st) in sched
    old = sched[(room, st)]
    sched[(room, st)] = _d(door)
    note = f"room {room} ({'all subtasks' if st == ANY else st}): key {DOORS[old]} -> {door}"
    return replace(base, variant=which, key_schedule=tuple(sorted(sched.items())), intervention=note)


def schedule_diff(a: TaskSpec, b: TaskSpec) -> dict:
    sa, sb = a.schedule, b.schedule
    keys = set(sa) | set(sb)
    return {k: (sa.get(k), sb.get(k)) for k in sorted(keys) if sa.get(k) != sb.get(k)}


def encode(task: TaskSpec, state: EnvState) -> np.ndarray:
    v = np.zeros(task.obs_dim)
    v[state.room] = 1.0
    v[task.n_rooms + state.key] = 1.0
    if task.context_bits and state.room > 0:
        v[task.n_rooms + task.n_doors] = task.subtasks[state.subtask].context
    return v


def sample_subtask(task: TaskSpec, rng: np.random.Generator) -> int:
    if len(task.subtasks) == 1:
        return 0
    w = np.array([st.weight for st in task.subtasks], dtype=float)
    return int(rng.choice(len(w), p=w / w.sum()))


def reset(task: TaskSpec, rng: np.random.Generator) -> EnvState:
    sub = sample_subtask(task, rng)
    return EnvState(room=0, key=task.key(0, sub), subtask=sub, steps_taken=0)


def step(task: TaskSpec, state: EnvState, action: int) -> StepResult:
    if not 0 <= action < task.n_doors:
        raise ValueError(f"action {action} outside 0..{task.n_doors - 1}")
    steps = state.steps_taken + 1
    if action == state.key:
        room = state.room + 1
        if room == task.path_length:
            return StepResult(EnvState(room, state.key, state.subtask, steps), 1.0, True)
        nxt = EnvState(room, task.key(room, state.subtask), state.subtask, steps)
    else:
        nxt = EnvState(state.room, state.key, state.subtask, steps)
    return StepResult(nxt, 0.0, steps >= task.max_steps)


def optimal_sequence(task: TaskSpec, subtask: int = 0) -> list[int]:
    return [task.key(room, subtask) for room in range(task.path_length)]


@dataclass
class VecEnv:
    """Batch of independent episodes of one task, stepped in lockstep.

    Finished episodes are reset immediately; the caller sees ``done`` for the
    step that ended them.
    """

    task: TaskSpec
    n: int
    rng: np.random.Generator
    room: np.ndarray = field(init=False)
    subtask: np.ndarray = field(init=False)
    steps: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self._keys = self.task.key_table()
        w = np.array([st.weight for st in self.task.subtasks], dtype=float)
        self._cum = np.cumsum(w / w.sum())
        self._ctx = np.array([st.context for st in self.task.subtasks], dtype=float)
        self.room = np.zeros(self.n, dtype=np.int64)
        self.subtask = np.zeros(self.n, dtype=np.int64)
        self.steps = np.zeros(self.n, dtype=np.int64)
        self._reset(np.arange(self.n))

    def _reset(self, idx: np.ndarray) -> None:
        if len(idx) == 0:
            return
        self.room[idx] = 0
        self.steps[idx] = 0
        if len(self._cum) > 1:
            u = self.rng.random(len(idx))
            self.subtask[idx] = np.searchsorted(self._cum, u, side="right")
        else:
            self.subtask[idx] = 0

    @property
    def key(self) -> np.ndarray:
        return self._keys[self.room, self.subtask]

    def observe(self) -> np.ndarray:
        return encode_batch(self.task, self.room, self.key, self._ctx[self.subtask])

    def state_ids(self) -> np.ndarray:
        """Integer id per episode, distinct for distinct observations."""
        t = self.task
        return (self.room * t.n_doors + self.key) * (1 + t.context_bits) + (
            self._ctx[self.subtask].astype(np.int64) * (self.room > 0) if t.context_bits else 0
        )

    def step(self, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Advance every episode by one step.

        Returns ``(rewards, done, truncated, next_obs)`` where ``next_obs`` is
        the observation reached by this step, taken before finished episodes
        are reset (needed to bootstrap truncated episodes).
        """
        correct = actions == self.key
        self.room = self.room + correct
        self.steps = self.steps + 1
        success = self.room == self.task.path_length
        rewards = success.astype(np.float64)
        truncated = (~success) & (self.steps >= self.task.max_steps)
        done = success | truncated
        last = self.task.path_length - 1
        next_obs = encode_batch(
            self.task,
            self.room,
            self._keys[np.minimum(self.room, last), self.subtask],
            self._ctx[self.subtask],
        )
        self.room[success] = 0
        self._reset(np.flatnonzero(done))
        return rewards, done, truncated, next_obs


def encode_batch(task: TaskSpec, room: np.ndarray, key: np.ndarray, ctx: np.ndarray | None = None) -> np.ndarray:
    n = len(room)
    out = np.zeros((n, task.obs_dim))
    rows = np.arange(n)
    out[rows, room] = 1.0
    out[rows, task.n_rooms + key] = 1.0
    if task.context_bits and ctx is not None:
        # the context bit marks the states past the start room
        out[:, task.n_rooms + task.n_doors] = ctx * (room > 0)
    return out
