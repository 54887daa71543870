"""Reverse-mode differentiation on float64 tensors.

Backed by torch's autograd: every primitive below validates shapes, records
its name on the active :class:`Tape` (if any) and faults on non-finite output.
``grad_as_graph`` keeps the backward pass differentiable, which is what
training on conservative forces needs.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import NonFiniteError, ShapeError

DTYPE = torch.float64

_local = threading.local()


def _tapes():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def fault_on_nonfinite() -> bool:
    return getattr(_local, "check", True)


@contextmanager
def nonfinite_checks(enabled: bool):
    old = fault_on_nonfinite()
    _local.check = enabled
    try:
        yield
    finally:
        _local.check = old


class Tape:
    """Records the primitive names executed while active, in execution order.

    Gradient bookkeeping itself lives in torch's autograd graph; the tape is a
    per-thread trace useful for inspection and tests.
    """

    def __init__(self):
        self.ops: list = []

    def __enter__(self):
        _tapes().append(self)
        self._grad_mode = torch.is_grad_enabled()
        torch.set_grad_enabled(True)
        return self

    def __exit__(self, *exc):
        _tapes().pop()
        torch.set_grad_enabled(self._grad_mode)
        return False


def check_finite(name: str, x: torch.Tensor) -> torch.Tensor:
    if fault_on_nonfinite() and x.numel() and not bool(torch.isfinite(x).all()):
        raise NonFiniteError(f"{name} produced non-finite values")
    return x


def _record(name: str, out: torch.Tensor) -> torch.Tensor:
    tapes = _tapes()
    if tapes:
        tapes[-1].ops.append(name)
    return check_finite(name, out)


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    if isinstance(data, torch.Tensor):
        t = data.detach().to(DTYPE).clone()
    else:
        t = torch.as_tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE).clone()
    return t.requires_grad_(requires_grad)


def _broadcast_check(name, a, b):
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"{name}: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}") from None


def add(a, b):
    _broadcast_check("add", a, b)
    return _record("add", a + b)


def sub(a, b):
    _broadcast_check("sub", a, b)
    return _record("sub", a - b)


def mul(a, b):
    _broadcast_check("mul", a, b)
    return _record("mul", a * b)


def matmul(a, b):
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[0 if b.dim() == 1 else -2]:
        raise ShapeError(f"matmul: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")
    return _record("matmul", a @ b)


def _axis_check(name, x, axis):
    if not -x.dim() <= axis < x.dim():
        raise ShapeError(f"{name}: axis {axis} out of range for shape {tuple(x.shape)}")


def sum_axis(x, axis):
    _axis_check("sum_axis", x, axis)
    return _record("sum_axis", x.sum(dim=axis))


def mean_axis(x, axis):
    _axis_check("mean_axis", x, axis)
    return _record("mean_axis", x.mean(dim=axis))


def max_axis(x, axis):
    _axis_check("max_axis", x, axis)
    return _record("max_axis", x.max(dim=axis).values)


def concat(xs: Sequence[torch.Tensor], axis: int = 0):
    xs = list(xs)
    if not xs:
        raise ShapeError("concat: nothing to concatenate")
    ref = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        if len(other) != len(ref) or any(
            p != q for k, (p, q) in enumerate(zip(ref, other)) if k != axis % len(ref)
        ):
            raise ShapeError(f"concat: incompatible shapes {tuple(ref)} and {tuple(other)}")
    return _record("concat", torch.cat(xs, dim=axis))


def _index(idx) -> torch.Tensor:
    if isinstance(idx, torch.Tensor):
        return idx.to(torch.int64)
    return torch.as_tensor(np.asarray(idx, dtype=np.int64))


def gather_rows(x, idx):
    idx = _index(idx)
    if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= x.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {x.shape[0]} rows")
    return _record("gather_rows", x.index_select(0, idx))


def scatter_add_rows(src, idx, num_rows: int):
    """Sum rows of ``src`` into ``num_rows`` buckets, visiting indices in order."""
    idx = _index(idx)
    if idx.dim() != 1 or idx.shape[0] != src.shape[0]:
        raise ShapeError(f"scatter_add_rows: index shape {tuple(idx.shape)} vs source {tuple(src.shape)}")
    if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= num_rows):
        raise ShapeError(f"scatter_add_rows: index out of range for {num_rows} rows")
    out = src.new_zeros((num_rows,) + tuple(src.shape[1:]))
    return _record("scatter_add_rows", out.index_add(0, idx, src))


def exp(x):
    return _record("exp", torch.exp(x))


def tanh(x):
    return _record("tanh", torch.tanh(x))


def silu(x):
    return _record("silu", torch.nn.functional.silu(x))


def square(x):
    return _record("square", x * x)


def sqrt(x):
    return _record("sqrt", torch.sqrt(x))


def norm_rows(x):
    if x.dim() != 2:
        raise ShapeError(f"norm_rows: expected a matrix, got shape {tuple(x.shape)}")
    return _record("norm_rows", torch.linalg.vector_norm(x, dim=1))


def broadcast(x, shape):
    try:
        return _record("broadcast", x.expand(*shape))
    except RuntimeError:
        raise ShapeError(f"broadcast: cannot broadcast {tuple(x.shape)} to {tuple(shape)}") from None


def backward(scalar: torch.Tensor, leaves: Sequence[torch.Tensor]) -> list:
    """Gradients of ``scalar`` with respect to each leaf (zeros when unused)."""
    if scalar.dim() != 0:
        raise ShapeError(f"backward needs a scalar root, got shape {tuple(scalar.shape)}")
    leaves = list(leaves)
    if not scalar.requires_grad:
        return [torch.zeros_like(l) for l in leaves]
    grads = torch.autograd.grad(scalar, leaves, allow_unused=True, retain_graph=True)
    out = [torch.zeros_like(l) if g is None else g for l, g in zip(leaves, grads)]
    for g in out:
        check_finite("backward", g)
    return out


def grad_as_graph(scalar: torch.Tensor, wrt: torch.Tensor) -> torch.Tensor:
    """d scalar / d wrt, itself recorded for further differentiation."""
    if scalar.dim() != 0:
        raise ShapeError(f"grad_as_graph needs a scalar, got shape {tuple(scalar.shape)}")
    if not scalar.requires_grad:
        return torch.zeros_like(wrt)
    (g,) = torch.autograd.grad(scalar, [wrt], create_graph=True, allow_unused=True)
    if g is None:
        return torch.zeros_like(wrt)
    return _record("grad_as_graph", g)


def finite_difference_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of a float64 array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(a, b, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
