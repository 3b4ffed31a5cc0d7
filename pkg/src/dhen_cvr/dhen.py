"""Hierarchical sum-ensemble of crossing modules plus per-head towers."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Context, Initializer, Linear, Module, Tensor
from .config import DhenConfig, HeadConfig, module_name
from .crossing import MLP, CrossingInput, build_crossing
from .errors import ConfigError


class DhenLayer(Module):
    def __init__(self, path: str, modules, n_tokens: int, token_dim: int, width: int,
                 init: Initializer, residual_dim: int | None = None):
        super().__init__(path)
        self.width = width
        # summation order is fixed by module name, so declaring modules in another order is bit-identical
        ordered = sorted(modules, key=module_name)
        self.names = [module_name(m) for m in ordered]
        self.blocks = [build_crossing(path, m, n_tokens, token_dim, width, init) for m in ordered]
        self.residual = (Linear(self.child_path("residual"), residual_dim, width, init)
                         if residual_dim is not None else None)

    def __call__(self, inp: CrossingInput, ctx: Context) -> Tensor:
        h = None
        for block in self.blocks:
            y = block(inp, ctx)
            h = y if h is None else ag.add(h, y)
        if self.residual is not None:
            h = ag.add(h, self.residual(inp.flat))
        return h


class DHEN(Module):
    """h_k = sum of layer-k modules applied to h_{k-1}; flat outputs are re-tokenized between layers."""

    def __init__(self, path: str, cfg: DhenConfig, n_tokens: int, token_dim: int, init: Initializer):
        super().__init__(path)
        self.cfg = cfg
        self.layers: list[DhenLayer] = []
        self.grids: list[tuple[int, int]] = []
        l, d = n_tokens, token_dim
        for i, layer in enumerate(cfg.layers):
            self.grids.append((l, d))
            res = l * d if cfg.residual else None
            self.layers.append(DhenLayer(self.child_path(f"layer{i + 1}"), layer.modules, l, d, layer.width,
                                         init, residual_dim=res))
            if i + 1 < len(cfg.layers):
                if layer.width % layer.reshape_dim:
                    raise ConfigError(f"width {layer.width} not divisible by reshape_dim {layer.reshape_dim}",
                                      f"model.dhen.layers[{i}].reshape_dim")
                l, d = layer.width // layer.reshape_dim, layer.reshape_dim
        self.out_dim = cfg.layers[-1].width

    def __call__(self, tokens: Tensor, ctx: Context) -> Tensor:
        x = tokens
        h = None
        for layer, (l, d) in zip(self.layers, self.grids):
            if h is not None:
                x = ag.reshape(h, (h.shape[0], l, d))
            h = layer(CrossingInput(x), ctx)
        return h


class Head(Module):
    """Tower MLP ending in one logit; probabilities are sigmoid(logit)."""

    def __init__(self, path: str, cfg: HeadConfig, d_in: int, init: Initializer):
        super().__init__(path)
        self.cfg = cfg
        self.name, self.train_only, self.weight = cfg.name, cfg.train_only, cfg.weight
        self.tower = MLP(self.child_path("tower"), d_in, list(cfg.tower) + [1], init)

    def logit(self, h: Tensor) -> Tensor:
        return ag.reshape(self.tower(h), (h.shape[0],))

    def __call__(self, h: Tensor) -> Tensor:
        return ag.sigmoid(self.logit(h))


def head_probabilities(heads: dict[str, Head], h: Tensor, include_train_only: bool = False) -> dict[str, np.ndarray]:
    return {n: hd(h).data for n, hd in heads.items() if include_train_only or not hd.train_only}
