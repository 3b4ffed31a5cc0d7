"""Parameters, modules and the small set of reusable layers."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable tensor carrying its dotted module path as ``name``."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class Initializer:
    """Deterministic parameter initialization keyed by parameter name.

    Each array is drawn from a Philox stream whose key derives from
    (seed, name), so values do not depend on construction order.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)

    def rng(self, name: str) -> np.random.Generator:
        digest = hashlib.blake2b(name.encode(), digest_size=8).digest()
        key = [self.seed & 0xFFFFFFFFFFFFFFFF, int.from_bytes(digest, "little")]
        return np.random.Generator(np.random.Philox(key=key))

    def normal(self, name: str, shape, std: float) -> np.ndarray:
        return self.rng(name).standard_normal(shape) * std

    def uniform(self, name: str, shape, bound: float) -> np.ndarray:
        return self.rng(name).uniform(-bound, bound, size=shape)


@dataclass
class Context:
    """Per-forward mode flags plus a counter-based dropout seed source."""

    train: bool = False
    seed: int = 0
    step: int = 0
    _calls: int = field(default=0, repr=False)

    def dropout_seed(self) -> int:
        self._calls += 1
        mixed = hashlib.blake2b(f"{self.seed}:{self.step}:{self._calls}".encode(), digest_size=8)
        return int.from_bytes(mixed.digest(), "little")


EVAL = Context(train=False)


class Module:
    """Container of parameters, buffers and child modules.

    Children and parameters are discovered from instance attributes in
    assignment order; lists of modules are supported.
    """

    def __init__(self, path: str):
        self.path = path

    def child_path(self, name: str) -> str:
        return f"{self.path}.{name}" if self.path else name

    def param(self, name: str, data) -> Parameter:
        return Parameter(self.child_path(name), data)

    def children(self) -> Iterator["Module"]:
        seen: set[int] = set()
        for child in self._children():
            if id(child) not in seen:
                seen.add(id(child))
                yield child

    def _children(self) -> Iterator["Module"]:
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                for v in value:
                    if isinstance(v, Module):
                        yield v
            elif isinstance(value, dict):
                for v in value.values():
                    if isinstance(v, Module):
                        yield v

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        seen: set[int] = set()
        self._collect(out, seen)
        return out

    def _collect(self, out, seen) -> None:
        for value in vars(self).values():
            if isinstance(value, (list, tuple)):
                items = value
            elif isinstance(value, dict):
                items = value.values()
            else:
                items = (value,)
            for v in items:
                if isinstance(v, Parameter) and id(v) not in seen:
                    seen.add(id(v))
                    out.append(v)
        for child in self.children():
            child._collect(out, seen)

    def named_parameters(self) -> dict[str, Parameter]:
        named = {}
        for p in self.parameters():
            if p.name in named:
                raise ValueError(f"duplicate parameter name {p.name!r}")
            named[p.name] = p
        return named

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable state arrays, keyed by dotted path."""
        out: dict[str, np.ndarray] = {}
        for name, arr in getattr(self, "_buffers", {}).items():
            out[self.child_path(name)] = arr
        for child in self.children():
            out.update(child.buffers())
        return out

    def register_buffer(self, name: str, arr: np.ndarray) -> np.ndarray:
        if not hasattr(self, "_buffers"):
            self._buffers = {}
        self._buffers[name] = np.asarray(arr, dtype=np.float64)
        return self._buffers[name]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    """Affine map over the last axis: x @ W + b."""

    def __init__(self, path: str, d_in: int, d_out: int, init: Initializer, bias: bool = True):
        super().__init__(path)
        if d_in < 1 or d_out < 1:
            raise ValueError(f"{path}: linear dims must be positive, got {d_in}->{d_out}")
        self.d_in, self.d_out = d_in, d_out
        std = math.sqrt(2.0 / (d_in + d_out))
        self.weight = self.param("weight", init.normal(self.child_path("weight"), (d_in, d_out), std))
        self.bias = self.param("bias", np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise T.ShapeError(f"{self.path}: expected last dim {self.d_in}, got {x.shape}")
        y = T.matmul(x, self.weight) if x.ndim >= 2 else T.reshape(
            T.matmul(T.reshape(x, (1, -1)), self.weight), (self.d_out,))
        return T.add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, path: str, dim: int, eps: float = 1e-5):
        super().__init__(path)
        self.eps = eps
        self.gamma = self.param("gamma", np.ones(dim))
        self.beta = self.param("beta", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, axis=-1, eps=self.eps)


class BatchNorm(Module):
    """Batch normalization with running statistics (momentum 0.1, eps 1e-5)."""

    def __init__(self, path: str, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__(path)
        self.momentum, self.eps = momentum, eps
        self.gamma = self.param("gamma", np.ones(dim))
        self.beta = self.param("beta", np.zeros(dim))
        self.running_mean = self.register_buffer("running_mean", np.zeros(dim))
        self.running_var = self.register_buffer("running_var", np.ones(dim))

    def __call__(self, x: Tensor, ctx: Context) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            train=ctx.train, momentum=self.momentum, eps=self.eps)


class Embedding(Module):
    """Lookup table whose row 0 is the out-of-vocabulary row."""

    def __init__(self, path: str, vocab: int, dim: int, init: Initializer, std: float = 0.1):
        super().__init__(path)
        if vocab < 1:
            raise ValueError(f"{path}: vocabulary size must be >= 1")
        self.vocab = vocab
        self.table = self.param("table", init.normal(self.child_path("table"), (vocab, dim), std))
        self.oov_count = 0

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        bad = (ids < 0) | (ids >= self.vocab)
        if bad.any():
            self.oov_count += int(bad.sum())
            ids = np.where(bad, 0, ids)
        return T.embedding(self.table, ids)


def load_state(module: Module, params: dict[str, np.ndarray], buffers: dict[str, np.ndarray] | None = None,
               strict: bool = True) -> None:
    """Copy named arrays into a module in place, checking names and shapes."""
    own = module.named_parameters()
    problems = []
    if strict:
        missing = sorted(set(own) - set(params))
        extra = sorted(set(params) - set(own))
        problems += [f"missing {n}" for n in missing] + [f"unexpected {n}" for n in extra]
    for name, arr in params.items():
        p = own.get(name)
        if p is not None and p.shape != tuple(np.shape(arr)):
            problems.append(f"shape mismatch {name}: {p.shape} vs {np.shape(arr)}")
    if problems:
        raise ValueError("incompatible parameters: " + "; ".join(problems))
    for name, arr in params.items():
        if name in own:
            own[name].data[...] = arr
    if buffers:
        mine = module.buffers()
        for name, arr in buffers.items():
            if name in mine:
                mine[name][...] = arr
