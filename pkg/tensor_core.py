#!/usr/bin/env python3
"""
Dense tensor algebra shared by every model in the toolkit.

Tensor is an immutable float64 array in row-major order. The contraction
helpers here are the only place the models multiply numbers, which lets
count_multiplies() instrument a whole forward pass.
"""

import contextvars
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from errors import AxisOutOfRange, ShapeMismatch


ArrayLike = Union["Tensor", np.ndarray, Sequence[float], float]


@dataclass(frozen=True, eq=False)
class Tensor:
    """Read-only dense tensor; full contractions yield shape (1,), never a bare scalar."""

    array: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.array, dtype=np.float64, order="C", copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(extent < 1 for extent in arr.shape):
            raise ShapeMismatch(f"Tensor extents must be >= 1, got {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "array", arr)

    @classmethod
    def from_flat(cls, shape: Sequence[int], data: Sequence[float]) -> "Tensor":
        flat = np.asarray(data, dtype=np.float64).ravel()
        if int(np.prod(shape)) != flat.size:
            raise ShapeMismatch(f"shape {tuple(shape)} needs {int(np.prod(shape))} values, got {flat.size}")
        return cls(flat.reshape(tuple(shape)))

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.array.shape)

    @property
    def rank(self) -> int:
        return self.array.ndim

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the values."""
        return self.array.reshape(-1)

    def __getitem__(self, index) -> Union[float, "Tensor"]:
        """A float for a full index, a Tensor for a partial index or slice."""
        value = self.array[index]
        if np.ndim(value) == 0:
            return float(value)
        return Tensor(value)

    def numpy(self) -> np.ndarray:
        return self.array

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def as_array(value: ArrayLike) -> np.ndarray:
    """Return a float64 ndarray for either a Tensor or anything numpy accepts."""
    if isinstance(value, Tensor):
        return value.array
    return np.asarray(value, dtype=np.float64)


def _as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float64))


def _check_axis(t: Tensor, axis: int, name: str) -> int:
    if not -t.rank <= axis < t.rank:
        raise AxisOutOfRange(f"{name}: axis {axis} out of range for rank {t.rank}")
    return axis % t.rank


# --- Operations ---

def reshape(t: ArrayLike, new_shape: Sequence[int]) -> Tensor:
    t = _as_tensor(t)
    new_shape = tuple(int(e) for e in new_shape)
    if int(np.prod(new_shape)) != int(np.prod(t.shape)):
        raise ShapeMismatch(f"cannot reshape {t.shape} into {new_shape}")
    return Tensor(t.array.reshape(new_shape))


def transpose(t: ArrayLike, axes: Sequence[int]) -> Tensor:
    t = _as_tensor(t)
    if sorted(a % t.rank for a in axes) != list(range(t.rank)):
        raise AxisOutOfRange(f"{tuple(axes)} is not a permutation of {t.rank} axes")
    return Tensor(np.transpose(t.array, tuple(axes)))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.rank != 2 or b.rank != 2:
        raise ShapeMismatch(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"inner dimensions differ: {a.shape} x {b.shape}")
    return Tensor(einsum("ij,jk->ik", a.array, b.array))


def contract_axes(a: ArrayLike, axes_a: Sequence[int], b: ArrayLike, axes_b: Sequence[int]) -> Tensor:
    """Sum over paired axes; result axes are a's free axes followed by b's."""
    a, b = _as_tensor(a), _as_tensor(b)
    if len(axes_a) != len(axes_b):
        raise ShapeMismatch(f"{len(axes_a)} axes of a paired with {len(axes_b)} axes of b")
    axes_a = [_check_axis(a, ax, "a") for ax in axes_a]
    axes_b = [_check_axis(b, ax, "b") for ax in axes_b]
    for ax_a, ax_b in zip(axes_a, axes_b):
        if a.shape[ax_a] != b.shape[ax_b]:
            raise ShapeMismatch(
                f"contracted extents differ: a.shape[{ax_a}]={a.shape[ax_a]} vs b.shape[{ax_b}]={b.shape[ax_b]}"
            )
    result = np.tensordot(a.array, b.array, axes=(axes_a, axes_b))
    _record(int(np.prod(a.shape)) * int(np.prod([b.shape[i] for i in range(b.rank) if i not in axes_b] or [1])))
    return Tensor(result)


def contract_index(a: ArrayLike, axis_a: int, b: ArrayLike, axis_b: int) -> Tensor:
    return contract_axes(a, [axis_a], b, [axis_b])


def outer(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _record(a.array.size * b.array.size)
    return Tensor(np.multiply.outer(a.array, b.array))


# --- Instrumented contraction ---

class MultiplyCounter:
    """Accumulates naive multiply counts while active."""

    def __init__(self) -> None:
        self.count = 0


_ACTIVE_COUNTER: contextvars.ContextVar = contextvars.ContextVar("active_multiply_counter", default=None)


@contextmanager
def count_multiplies() -> Iterator[MultiplyCounter]:
    counter = MultiplyCounter()
    token = _ACTIVE_COUNTER.set(counter)
    try:
        yield counter
    finally:
        _ACTIVE_COUNTER.reset(token)


def _record(multiplies: int) -> None:
    counter: Optional[MultiplyCounter] = _ACTIVE_COUNTER.get()
    if counter is not None:
        counter.count += int(multiplies)


def _naive_multiplies(subscripts: str, operands: Sequence[np.ndarray]) -> int:
    inputs = subscripts.split("->")[0].split(",")
    extents: Dict[str, int] = {}
    for letters, op in zip(inputs, operands):
        for letter, extent in zip(letters, op.shape):
            extents[letter] = extent
    total = 1
    for extent in extents.values():
        total *= extent
    return (len(operands) - 1) * total


def einsum(subscripts: str, *operands: np.ndarray) -> np.ndarray:
    """np.einsum over explicit subscripts, counted when a counter is active."""
    if "..." in subscripts or "->" not in subscripts:
        raise ValueError(f"explicit subscripts required, got '{subscripts}'")
    if _ACTIVE_COUNTER.get() is not None:
        _record(_naive_multiplies(subscripts, operands))
    return np.einsum(subscripts, *operands, optimize=len(operands) > 2)
