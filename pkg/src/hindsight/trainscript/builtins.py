"""Builtin semantics for TrainScript: pure math plus a few stateful objects.

Stateful objects count their own mutations in ``version`` so the
interpreter can tell which bindings a loop changed.  They follow the usual
training-library contract: an optimizer updates the model it was built
with, a scheduler updates its optimizer.  ``sneaky`` deliberately breaks
that contract by mutating an argument from a plain function call.
"""

from __future__ import annotations

import math
from typing import Any, Callable

import numpy as np

from ..errors import ScriptRuntimeError


class ScriptObject:
    """Base for stateful builtins; methods listed in ``METHODS`` are callable."""

    METHODS: frozenset[str] = frozenset()
    MUTATING: frozenset[str] = frozenset()

    def __init__(self):
        self.version = 0

    def _touch(self) -> None:
        self.version += 1

    def state_dict(self) -> dict:
        raise NotImplementedError

    def load_state_dict(self, state: dict) -> None:
        raise NotImplementedError

    def call(self, method: str, args: tuple, kwargs: dict) -> Any:
        if method not in self.METHODS:
            from ..errors import UnknownBuiltinError

            raise UnknownBuiltinError(f"{type(self).__name__} has no method {method!r}")
        if method in self.MUTATING:
            self._touch()
        return getattr(self, "m_" + method)(*args, **kwargs)


def _vec(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Linear(ScriptObject):
    """Elementwise linear model ``pred = w * x`` with an explicit gradient buffer."""

    METHODS = frozenset({"fwd", "loss", "backward", "zero_grad", "norm", "update"})
    MUTATING = frozenset({"backward", "zero_grad", "update"})

    def __init__(self, n: int, seed: int = 0):
        super().__init__()
        n = int(n)
        if n < 1:
            raise ScriptRuntimeError("Linear needs a positive size")
        self.w = np.random.default_rng(int(seed)).standard_normal(n) * 0.1
        self.grad = np.zeros(n)

    def m_fwd(self, x):
        return self.w * _vec(x)

    def m_loss(self, x, y):
        return float(np.mean((self.w * _vec(x) - _vec(y)) ** 2))

    def m_backward(self, x, y):
        x, y = _vec(x), _vec(y)
        self.grad += 2.0 * (self.w * x - y) * x / self.w.size
        return float(np.mean((self.w * x - y) ** 2))

    def m_zero_grad(self):
        self.grad[:] = 0.0

    def m_norm(self):
        return float(np.linalg.norm(self.w))

    def m_update(self, delta):
        self.w += _vec(delta)

    def state_dict(self) -> dict:
        return {"w": self.w, "grad": self.grad}

    def load_state_dict(self, state: dict) -> None:
        self.w[...] = state["w"]
        self.grad[...] = state["grad"]
        self._touch()


class SGD(ScriptObject):
    METHODS = frozenset({"step", "zero_grad", "get_lr"})
    MUTATING = frozenset({"step", "zero_grad"})

    def __init__(self, model: Linear, lr: float = 0.1, mu: float = 0.0):
        super().__init__()
        if not isinstance(model, Linear):
            raise ScriptRuntimeError("optimizers take a Linear model")
        self.model = model
        self.lr = float(lr)
        self.mu = float(mu)
        self.steps = 0
        self.buf = np.zeros_like(model.w)

    def m_step(self):
        self.buf = self.mu * self.buf + self.model.grad
        self.model.w -= self.lr * self.buf
        self.model._touch()
        self.steps += 1

    def m_zero_grad(self):
        self.model.grad[:] = 0.0
        self.model._touch()

    def m_get_lr(self):
        return self.lr

    def state_dict(self) -> dict:
        return {"lr": self.lr, "mu": self.mu, "steps": self.steps, "buf": self.buf}

    def load_state_dict(self, state: dict) -> None:
        self.lr = float(state["lr"])
        self.mu = float(state["mu"])
        self.steps = int(state["steps"])
        self.buf = np.array(state["buf"], dtype=np.float64)
        self._touch()


class Momentum(SGD):
    def __init__(self, model: Linear, lr: float = 0.1, mu: float = 0.9):
        super().__init__(model, lr, mu)


class Adam(SGD):
    """Adam-flavoured step: normalizes by a running second moment."""

    def __init__(self, model: Linear, lr: float = 0.01, beta: float = 0.9):
        super().__init__(model, lr, 0.0)
        self.beta = float(beta)
        self.sq = np.zeros_like(model.w)

    def m_step(self):
        g = self.model.grad
        self.sq = self.beta * self.sq + (1.0 - self.beta) * g * g
        self.model.w -= self.lr * g / (np.sqrt(self.sq) + 1e-8)
        self.model._touch()
        self.steps += 1

    def state_dict(self) -> dict:
        return {**super().state_dict(), "beta": self.beta, "sq": self.sq}

    def load_state_dict(self, state: dict) -> None:
        super().load_state_dict(state)
        self.beta = float(state["beta"])
        self.sq = np.array(state["sq"], dtype=np.float64)


class StepLR(ScriptObject):
    METHODS = frozenset({"step", "get_lr"})
    MUTATING = frozenset({"step"})

    def __init__(self, optimizer: SGD, step_size: int = 1, gamma: float = 0.5):
        super().__init__()
        if not isinstance(optimizer, SGD):
            raise ScriptRuntimeError("schedulers take an optimizer")
        self.optimizer = optimizer
        self.base_lr = optimizer.lr
        self.step_size = max(1, int(step_size))
        self.gamma = float(gamma)
        self.epoch = 0

    def m_step(self):
        self.epoch += 1
        self.optimizer.lr = self.base_lr * self.gamma ** (self.epoch // self.step_size)
        self.optimizer._touch()

    def m_get_lr(self):
        return self.optimizer.lr

    def state_dict(self) -> dict:
        return {"epoch": self.epoch, "base_lr": self.base_lr}

    def load_state_dict(self, state: dict) -> None:
        self.epoch = int(state["epoch"])
        self.base_lr = float(state["base_lr"])
        self._touch()


class ExponentialLR(StepLR):
    def __init__(self, optimizer: SGD, gamma: float = 0.9):
        super().__init__(optimizer, 1, gamma)


class Accumulator(ScriptObject):
    METHODS = frozenset({"add", "value", "reset"})
    MUTATING = frozenset({"add", "reset"})

    def __init__(self):
        super().__init__()
        self.total = 0.0
        self.count = 0

    def m_add(self, x):
        self.total += float(np.sum(x))
        self.count += 1

    def m_value(self):
        return self.total / self.count if self.count else 0.0

    def m_reset(self):
        self.total, self.count = 0.0, 0

    def state_dict(self) -> dict:
        return {"total": self.total, "count": self.count}

    def load_state_dict(self, state: dict) -> None:
        self.total = float(state["total"])
        self.count = int(state["count"])
        self._touch()


class Dataset(ScriptObject):
    """Deterministic synthetic regression data; reading it changes nothing."""

    METHODS = frozenset({"x", "y"})

    def __init__(self, n: int, seed: int = 0):
        super().__init__()
        self.n = int(n)
        self.seed = int(seed)
        self.target = np.random.default_rng([self.seed, 7]).standard_normal(self.n)

    def _x(self, i):
        return np.random.default_rng([self.seed, int(i)]).standard_normal(self.n)

    def m_x(self, i):
        return self._x(i)

    def m_y(self, i):
        return self._x(i) * self.target

    def state_dict(self) -> dict:
        return {"n": self.n, "seed": self.seed}

    def load_state_dict(self, state: dict) -> None:
        self.n, self.seed = int(state["n"]), int(state["seed"])
        self.target = np.random.default_rng([self.seed, 7]).standard_normal(self.n)
        self._touch()


def _sneaky(obj, *rest):
    """Mutates its first argument even though it is called like a pure function."""
    if isinstance(obj, Linear):
        obj.w *= 0.5
        obj._touch()
    elif isinstance(obj, ScriptObject):
        obj._touch()
    return 0.0


def _pair(a, b):
    return (a, b)


def _num(x) -> float:
    if isinstance(x, np.ndarray):
        raise ScriptRuntimeError("expected a scalar, got an array")
    return float(x)


PURE_FUNCTIONS: dict[str, Callable] = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
    "scale": lambda x, s: x * s,
    "relu": lambda x: np.maximum(x, 0.0) if isinstance(x, np.ndarray) else max(float(x), 0.0),
    "mean": lambda x: float(np.mean(x)),
    "total": lambda x: float(np.sum(x)),
    "norm": lambda x: float(np.linalg.norm(np.atleast_1d(x))),
    "sqrt": lambda x: np.sqrt(x) if isinstance(x, np.ndarray) else math.sqrt(_num(x)),
    "abs": lambda x: np.abs(x) if isinstance(x, np.ndarray) else abs(_num(x)),
    "exp": lambda x: np.exp(x) if isinstance(x, np.ndarray) else math.exp(_num(x)),
    "tanh": lambda x: np.tanh(x) if isinstance(x, np.ndarray) else math.tanh(_num(x)),
    "square": lambda x: x * x,
    "dot": lambda a, b: float(np.dot(_vec(a), _vec(b))),
    "mse": lambda a, b: float(np.mean((_vec(a) - _vec(b)) ** 2)),
    "maximum": lambda a, b: np.maximum(a, b),
    "minimum": lambda a, b: np.minimum(a, b),
    "clip": lambda x, lo, hi: np.clip(x, lo, hi),
    "zeros": lambda n: np.zeros(int(n)),
    "ones": lambda n: np.ones(int(n)),
    "randn": lambda seed, n: np.random.default_rng(int(seed)).standard_normal(int(n)),
    "float": _num,
    "int": lambda x: int(_num(x)),
    "pair": _pair,
}

CONSTRUCTORS: dict[str, Callable] = {
    "Linear": Linear,
    "SGD": SGD,
    "Momentum": Momentum,
    "Adam": Adam,
    "StepLR": StepLR,
    "ExponentialLR": ExponentialLR,
    "Accumulator": Accumulator,
    "Dataset": Dataset,
}

ADVERSARIAL: dict[str, Callable] = {"sneaky": _sneaky}


def default_builtins() -> dict[str, Callable]:
    return {**PURE_FUNCTIONS, **CONSTRUCTORS, **ADVERSARIAL}
