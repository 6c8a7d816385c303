"""Flat gradient vectors with a named segmentation map."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import DomainError

Segments = Mapping[str, tuple[int, int]]


@dataclass(frozen=True, eq=False)
class GradientVector:
    """A flat float64 vector partitioned into named, contiguous segments.

    Segments are stored in flat order. ``norm`` is computed once and cached.
    """

    values: np.ndarray
    segments: dict[str, tuple[int, int]]
    _norm: float = field(init=False, repr=False)

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "segments", dict(self.segments))
        pos = 0
        for name, (lo, hi) in self.segments.items():
            if lo != pos or hi < lo:
                raise DomainError(f"segment {name!r} [{lo}, {hi}) does not continue at {pos}")
            pos = hi
        if pos != values.size or values.ndim != 1:
            raise DomainError(
                f"segments cover {pos} entries but vector has shape {values.shape}"
            )
        object.__setattr__(self, "_norm", float(np.linalg.norm(values)))

    @classmethod
    def from_parts(cls, parts: Iterable[tuple[str, np.ndarray]]) -> "GradientVector":
        chunks, segments, pos = [], {}, 0
        for name, arr in parts:
            flat = np.asarray(arr, dtype=np.float64).ravel()
            segments[name] = (pos, pos + flat.size)
            pos += flat.size
            chunks.append(flat)
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, segments)

    @classmethod
    def zeros_like(cls, other: "GradientVector") -> "GradientVector":
        return cls(np.zeros_like(other.values), other.segments)

    @property
    def norm(self) -> float:
        return self._norm

    @property
    def size(self) -> int:
        return self.values.size

    def segment(self, name: str) -> np.ndarray:
        lo, hi = self.segments[name]
        return self.values[lo:hi]

    def restrict(self, keep: Callable[[str], bool] | Iterable[str]) -> "GradientVector":
        """Sub-vector made of the segments selected by ``keep`` (predicate or names)."""
        if callable(keep):
            names = [n for n in self.segments if keep(n)]
        else:
            wanted = set(keep)
            names = [n for n in self.segments if n in wanted]
        return GradientVector.from_parts((n, self.segment(n)) for n in names)

    def check_compatible(self, other: "GradientVector") -> None:
        if self.segments != other.segments:
            raise DomainError("gradient vectors have different segmentation maps")

    def dot(self, other: "GradientVector") -> float:
        self.check_compatible(other)
        return float(self.values @ other.values)

    def with_values(self, values: np.ndarray) -> "GradientVector":
        return GradientVector(values, self.segments)

    def __add__(self, other: "GradientVector") -> "GradientVector":
        self.check_compatible(other)
        return self.with_values(self.values + other.values)

    def __sub__(self, other: "GradientVector") -> "GradientVector":
        self.check_compatible(other)
        return self.with_values(self.values - other.values)

    def __mul__(self, k: float) -> "GradientVector":
        return self.with_values(self.values * float(k))

    __rmul__ = __mul__

    def __neg__(self) -> "GradientVector":
        return self.with_values(-self.values)

    def __repr__(self) -> str:
        return f"GradientVector(size={self.size}, segments={len(self.segments)}, norm={self.norm:.4g})"


def is_shared_segment(name: str) -> bool:
    """True for low-rank adapter segments (the shared-parameter view)."""
    return name.startswith("lora_A.") or name.startswith("lora_B.")
