"""Small ReLU MLPs with hand-written backprop, and Adam.

An :class:`MlpStack` holds ``M`` independent networks of identical shape in
stacked arrays, so a society of per-decision networks runs as one batched
call while every network keeps its own disjoint slice of parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import kernels

HIDDEN = (20, 20)


class ShapeError(ValueError):
    pass


class MlpStack:
    def __init__(
        self,
        n_in: int,
        n_out: int,
        n_nets: int = 1,
        hidden: tuple[int, int] = HIDDEN,
        seed: int | np.random.SeedSequence = 0,
    ) -> None:
        self.sizes = (n_in, *hidden, n_out)
        self.n_nets = n_nets
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        # One independent stream per network.
        rngs = [np.random.default_rng(s) for s in ss.spawn(n_nets)]
        self.params = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            W = np.stack([r.uniform(-bound, bound, (fan_in, fan_out)) for r in rngs])
            b = np.stack([r.uniform(-bound, bound, fan_out) for r in rngs])
            self.params += [W, b]

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def forward(self, x: np.ndarray):
        """``x (B, n_in)`` -> ``out (M, B, n_out)`` and a cache for :meth:`backward`."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"expected input of width {self.n_in}, got shape {x.shape}")
        x = np.ascontiguousarray(x)
        h1, h2, out = kernels.stack_forward(*self.params, x)
        return out, (x, h1, h2)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache, dout: np.ndarray) -> list[np.ndarray]:
        x, h1, h2 = cache
        dout = np.ascontiguousarray(dout, dtype=np.float64)
        if dout.shape != (self.n_nets, x.shape[0], self.n_out):
            raise ShapeError(
                f"output gradient must be {(self.n_nets, x.shape[0], self.n_out)}, got {dout.shape}"
            )
        W1, b1, W2, b2, W3, b3 = self.params
        return list(kernels.stack_backward(W2, W3, x, h1, h2, dout))

    def copy(self) -> "MlpStack":
        new = object.__new__(MlpStack)
        new.sizes, new.n_nets = self.sizes, self.n_nets
        new.params = [p.copy() for p in self.params]
        return new

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def net_indices(self, k: int) -> set[int]:
        """Flat parameter indices owned by network ``k``."""
        out, offset = set(), 0
        for p in self.params:
            block = np.arange(p.size).reshape(p.shape)[k].ravel()
            out.update((block + offset).tolist())
            offset += p.size
        return out


def mlp_forward(net: MlpStack, x: np.ndarray):
    return net.forward(x)


def mlp_backward(net: MlpStack, cache, grad_out: np.ndarray) -> list[np.ndarray]:
    return net.backward(cache, grad_out)


@dataclass
class Adam:
    """Adam over the arrays of one :class:`MlpStack`, with per-network step counts.

    Networks listed as inactive in a call keep their parameters and moments
    untouched, so an update of one network never writes another's state.
    """

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def bind(self, net: MlpStack) -> "Adam":
        self.m = [np.zeros_like(p) for p in net.params]
        self.v = [np.zeros_like(p) for p in net.params]
        self.t = np.zeros(net.n_nets, dtype=np.int64)
        return self

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], active=None) -> None:
        if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
            raise ShapeError("gradient shapes do not match parameter shapes")
        n = params[0].shape[0]
        active = np.ones(n, dtype=bool) if active is None else np.asarray(active, dtype=bool)
        self.t = self.t + active
        act = active.astype(np.uint8)
        steps = self.t.astype(np.float64)
        for p, g, m, v in zip(params, grads, self.m, self.v):
            kernels.adam_update(p, np.ascontiguousarray(g), m, v, self.lr, self.beta1, self.beta2, self.eps, steps, act)

    def state(self) -> dict:
        return {"m": self.m, "v": self.v, "t": self.t, "lr": self.lr}

    def load(self, state: dict) -> None:
        self.m = [np.array(a) for a in state["m"]]
        self.v = [np.array(a) for a in state["v"]]
        self.t = np.array(state["t"], dtype=np.int64)


def adam_step(state: Adam, params: list[np.ndarray], grads: list[np.ndarray], active=None) -> list[np.ndarray]:
    state.step(params, grads, active)
    return params
