"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


class NondeterministicFunctionError(RuntimeError):
    pass


class GradCheckError(AssertionError):
    pass


def grad_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
               tolerance: float | None = None, max_coords: int | None = None,
               seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` takes no arguments and reads the tensors in ``inputs`` (which are
    perturbed in place).  The error per coordinate is
    |a - c| / max(|a|, |c|, 1e-8).  With ``max_coords`` a seeded subset of
    coordinates per input is checked instead of all of them.
    """
    if step <= 0:
        raise ValueError("finite-difference step must be positive")
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None

    def value() -> float:
        out = fn()
        if out.size != 1:
            raise ValueError(f"function under test must return a scalar, got {out.shape}")
        return float(out.data.reshape(-1)[0])

    base = value()
    if value() != base:
        raise NondeterministicFunctionError(
            "function is not deterministic; fix every seed (e.g. dropout seeds) before checking")

    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_at = None
    for i, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        a_flat = analytic[i].reshape(-1)
        for j in coords:
            orig = flat[j]
            flat[j] = orig + step
            fp = value()
            flat[j] = orig - step
            fm = value()
            flat[j] = orig
            c = (fp - fm) / (2.0 * step)
            a = a_flat[j]
            err = abs(a - c) / max(abs(a), abs(c), 1e-8)
            if err > worst:
                worst, worst_at = err, (i, int(j), a, c)
    for t in inputs:
        t.grad = None
    if tolerance is not None and worst >= tolerance:
        raise GradCheckError(f"gradient check failed: rel. error {worst:.3e} at "
                             f"(input, coord, analytic, numeric)={worst_at}")
    return worst
