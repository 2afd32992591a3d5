"""Base-b sub-token codec.

A token ``x`` in ``{0..C-1}`` is written as ``length`` digits in base ``b``,
most-significant digit first, where ``b`` is the smallest base with
``b**length >= C``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EAGER_CODE_CAP = 2 ** 20


class InvalidCode(ValueError):
    """Digit sequence whose positional value is not a valid token."""


def minimal_base(num_classes: int, length: int) -> int:
    """Smallest integer b with b**length >= num_classes (exact)."""
    b = max(1, int(round(num_classes ** (1.0 / length))))
    while b ** length < num_classes:
        b += 1
    while b > 1 and (b - 1) ** length >= num_classes:
        b -= 1
    return b


@dataclass(frozen=True)
class SubTokenCodec:
    num_classes: int
    length: int
    base: int
    _codes: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def mask_value(self) -> int:
        # sentinel used for the mask state in sub-token grids
        return self.base

    @property
    def weights(self) -> np.ndarray:
        return self.base ** np.arange(self.length - 1, -1, -1, dtype=np.int64)

    @property
    def valid_codes(self) -> np.ndarray:
        """(C, length) array; row x is encode(x)."""
        if self._codes is not None:
            return self._codes
        return self.encode_array(np.arange(self.num_classes))

    def encode_array(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.int64)
        if x.size and (x.min() < 0 or x.max() >= self.num_classes):
            raise ValueError(f"token out of range [0, {self.num_classes})")
        return (x[..., None] // self.weights) % self.base

    def decode_array(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.int64)
        if y.shape[-1] != self.length:
            raise ValueError(f"expected trailing dimension {self.length}, got {y.shape}")
        if y.size and (y.min() < 0 or y.max() >= self.base):
            raise ValueError("digit outside [0, base)")
        x = y @ self.weights
        if x.size and x.max() >= self.num_classes:
            raise InvalidCode(f"positional value {int(x.max())} >= C={self.num_classes}")
        return x


def make_codec(num_classes: int, length: int, eager_cap: int = EAGER_CODE_CAP) -> SubTokenCodec:
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if length < 1:
        raise ValueError("length must be >= 1")
    base = minimal_base(num_classes, length)
    codec = SubTokenCodec(num_classes, length, base)
    if num_classes <= eager_cap:
        codes = codec.encode_array(np.arange(num_classes))
        codes.setflags(write=False)
        object.__setattr__(codec, "_codes", codes)
    return codec


def encode(codec: SubTokenCodec, x: int) -> tuple[int, ...]:
    if not 0 <= x < codec.num_classes:
        raise ValueError(f"token {x} out of range [0, {codec.num_classes})")
    return tuple(int(d) for d in codec.encode_array(x))


def decode(codec: SubTokenCodec, y) -> int:
    y = tuple(y)
    if len(y) != codec.length:
        raise ValueError(f"expected {codec.length} digits, got {len(y)}")
    value = 0
    for d in y:
        if not 0 <= d < codec.base:
            raise ValueError(f"digit {d} outside [0, {codec.base})")
        value = value * codec.base + int(d)
    if value >= codec.num_classes:
        raise InvalidCode(f"{y} has value {value} >= C={codec.num_classes}")
    return value


def intermediate_state_count(codec: SubTokenCodec) -> int:
    """Number of partially-masked token states, (b+1)^l - (C+1)."""
    return (codec.base + 1) ** codec.length - (codec.num_classes + 1)
