"""SGD with momentum and a central-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class ParamGroup:
    name: str
    tensor: Tensor
    momentum_buffer: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.momentum_buffer is None:
            self.momentum_buffer = np.zeros_like(self.tensor.data)
        if self.momentum_buffer.shape != self.tensor.shape:
            raise ValueError(f"momentum buffer shape {self.momentum_buffer.shape} != {self.tensor.shape} for {self.name}")


def make_groups(named: Iterable[tuple[str, Tensor]]) -> list[ParamGroup]:
    groups = [ParamGroup(name, t) for name, t in named]
    names = [g.name for g in groups]
    if len(set(names)) != len(names):
        raise ValueError("parameter names must be unique")
    return groups


def sgd_step(params: list[ParamGroup], lr: float, momentum: float, weight_decay: float) -> None:
    """buf <- momentum*buf + (grad + wd*theta); theta <- theta - lr*buf; grads zeroed."""
    for p in params:
        if p.tensor.grad is None:
            raise ValueError(f"parameter {p.name!r} has no gradient")
    for p in params:
        theta = p.tensor.data
        buf = p.momentum_buffer
        buf = momentum * buf + (p.tensor.grad + weight_decay * theta)
        p.momentum_buffer = buf.astype(theta.dtype, copy=False)
        p.tensor.data = (theta - lr * p.momentum_buffer).astype(theta.dtype, copy=False)
        p.tensor.grad = None


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f: Callable[[], Tensor], x: Tensor, h: float) -> np.ndarray:
    flat = x.data.reshape(-1)
    out = np.zeros(flat.size)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> float:
    """Max relative error between autodiff and central differences of ``f`` at ``x``.

    The check runs on a float64 copy of ``x`` so that the difference quotient
    is not swamped by float32 rounding of ``f``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True, dtype=np.float64)
    f(x64).backward()
    analytic = x64.grad.copy()
    x64.grad = None
    numeric = numeric_grad(lambda: f(x64), x64, h)
    return float(relative_error(analytic, numeric).max())


def grad_check_many(
    loss: Callable[[], Tensor], tensors: Mapping[str, Tensor], h: float = 1e-3
) -> dict[str, float]:
    """Per-tensor max relative error for a closure over float64 parameters."""
    for t in tensors.values():
        t.grad = None
    loss().backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}
    report = {}
    for name, t in tensors.items():
        numeric = numeric_grad(loss, t, h)
        report[name] = float(relative_error(analytic[name], numeric).max()) if t.size else 0.0
    return report
