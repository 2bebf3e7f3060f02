"""Named parameter collections with per-entry learning rates."""

from __future__ import annotations

from typing import Dict, Iterator, Mapping

import numpy as np

from .numerics import as_tensor


class ParamSet:
    """Ordered map name -> float64 tensor, plus an optional per-name
    learning rate. Gradient ParamSets must align name-by-name and
    shape-by-shape with the parameters they update."""

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None,
                 lrs: Mapping[str, float] | None = None):
        self._data: Dict[str, np.ndarray] = {}
        self.lrs: Dict[str, float] = {}
        if tensors:
            for name, t in tensors.items():
                self[name] = t
        if lrs:
            for name, a in lrs.items():
                self.set_lr(name, a)

    def __setitem__(self, name: str, value) -> None:
        self._data[name] = as_tensor(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __contains__(self, name: str) -> bool:
        return name in self._data

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def names(self):
        return list(self._data)

    def items(self):
        return self._data.items()

    def set_lr(self, name: str, alpha: float) -> None:
        if alpha <= 0:
            raise ValueError("learning rate must be positive")
        self.lrs[name] = float(alpha)

    def lr(self, name: str, default: float) -> float:
        return self.lrs.get(name, default)

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, t in self.items():
            out[name] = t.copy()
        out.lrs = dict(self.lrs)
        return out

    def check_aligned(self, other: "ParamSet") -> None:
        if self.names() != other.names():
            raise ValueError(f"name mismatch: {self.names()} vs {other.names()}")
        for name in self:
            if self[name].shape != other[name].shape:
                raise ValueError(
                    f"shape mismatch at {name!r}: "
                    f"{self[name].shape} vs {other[name].shape}")

    # elementwise arithmetic used by estimators -----------------------------
    def combine(self, other: "ParamSet", fn) -> "ParamSet":
        self.check_aligned(other)
        return ParamSet({n: fn(self[n], other[n]) for n in self})

    def __sub__(self, other: "ParamSet") -> "ParamSet":
        return self.combine(other, lambda a, b: a - b)

    def __add__(self, other: "ParamSet") -> "ParamSet":
        return self.combine(other, lambda a, b: a + b)

    def scale(self, c: float) -> "ParamSet":
        return ParamSet({n: c * t for n, t in self.items()})

    def ravel(self) -> np.ndarray:
        """Flatten all tensors into one vector (fixed name order)."""
        if not self._data:
            return np.zeros(0)
        return np.concatenate([t.ravel() for t in self._data.values()])

    def map(self, fn) -> "ParamSet":
        return ParamSet({n: fn(t) for n, t in self.items()})
