"""Parameter containers: a tiny Module base class and a Linear layer."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def parameter(values, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(values, dtype=T.get_default_dtype()), requires_grad=True, name=name)


class Module:
    """Walks attributes for tensors, sub-modules, and lists/dicts of either.

    Tensors with ``requires_grad`` are trainable parameters; other tensor
    attributes are fixed buffers that still belong to the state dict.
    """

    def named_tensors(self, prefix: str = ""):
        for key, val in vars(self).items():
            yield from _walk(val, f"{prefix}{key}")

    def named_parameters(self):
        return ((k, t) for k, t in self.named_tensors() if t.requires_grad)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.named_tensors()}

    def load_state_dict(self, state: dict, strict: bool = True) -> list[str]:
        """Copy arrays into tensors; returns names present here but missing in ``state``."""
        own = dict(self.named_tensors())
        unexpected = sorted(set(state) - set(own))
        missing = sorted(set(own) - set(state))
        if strict and (unexpected or missing):
            raise KeyError(f"state mismatch: missing={missing}, unexpected={unexpected}")
        for k, p in own.items():
            if k in state:
                arr = np.asarray(state[k])
                if arr.shape != p.shape:
                    raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
                p.data = arr.astype(p.dtype)
        return missing

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to_dtype(self, dtype) -> None:
        for _, t in self.named_tensors():
            t.data = t.data.astype(dtype)


def _walk(val, name):
    if isinstance(val, Tensor):
        yield name, val
    elif isinstance(val, Module):
        yield from val.named_tensors(name + ".")
    elif isinstance(val, (list, tuple)):
        for i, v in enumerate(val):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(val, dict):
        for k, v in val.items():
            yield from _walk(v, f"{name}.{k}")


def count_parameters(module: Module) -> int:
    return sum(p.size for p in module.parameters())


class Linear(Module):
    """``y = x @ weight + bias`` with ``weight`` stored as ``[d_in, d_out]``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 init_scale: float = 1.0):
        bound = init_scale / np.sqrt(d_in)
        self.weight = parameter(rng.uniform(-bound, bound, size=(d_in, d_out)))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y
