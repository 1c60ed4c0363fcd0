"""Dense float64 tensors and (primal, tangent) pairs for forward-mode derivatives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class TensorError(ValueError):
    pass


def as_array(values) -> np.ndarray:
    """Coerce a Tensor, ndarray, list, or scalar to a float64 ndarray."""
    if isinstance(values, Tensor):
        return values.array
    return np.asarray(values, dtype=np.float64)


class Tensor:
    """Row-major float64 array with explicit shape metadata.

    Tensors are immutable by contract: `array` is marked read-only so shared
    instances are safe to read from multiple threads.
    """

    __slots__ = ("array",)

    def __init__(self, values, shape=None):
        arr = np.array(as_array(values), dtype=np.float64, order="C", copy=True)
        if shape is not None:
            if int(np.prod(shape)) != arr.size:
                raise TensorError(
                    f"shape {tuple(shape)} incompatible with {arr.size} values"
                )
            arr = arr.reshape(shape)
        arr.flags.writeable = False
        object.__setattr__(self, "array", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.array.shape)

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the underlying values."""
        return self.array.reshape(-1)

    @property
    def size(self) -> int:
        return self.array.size

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.array)))

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, data={self.data!r})"

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and bool(np.all(self.array == other.array))

    def __hash__(self):
        return hash((self.shape, self.array.tobytes()))


@dataclass(frozen=True)
class DualTensor:
    """Value and directional-derivative pair returned by forward-mode evaluation."""

    primal: Tensor
    tangent: Tensor

    def __post_init__(self):
        if self.primal.shape != self.tangent.shape:
            raise TensorError(
                f"primal shape {self.primal.shape} != tangent shape {self.tangent.shape}"
            )
