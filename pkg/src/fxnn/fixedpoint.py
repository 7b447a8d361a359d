"""Exact two's-complement fixed-point arithmetic.

All values are represented as integer codes scaled by 2**-frac_bits. Quantization,
encoding and bit manipulation are defined so that every operation is reproducible
bit-for-bit across the float interpreter, the integer interpreter and emitted C.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ROUND_HALF_EVEN = "rne"
ROUND_TRUNCATE = "trunc"
OVERFLOW_SATURATE = "sat"
OVERFLOW_WRAP = "wrap"

_ROUNDING_MODES = (ROUND_HALF_EVEN, ROUND_TRUNCATE)
_OVERFLOW_MODES = (OVERFLOW_SATURATE, OVERFLOW_WRAP)


@dataclass(frozen=True)
class FixedPointFormat:
    """Width/scaling description of a fixed-point number.

    ``total_bits`` includes the sign bit for signed formats; ``int_bits`` counts
    the sign bit as well, so a signed format spans [-2**(int_bits-1),
    2**(int_bits-1) - 2**-frac_bits] and an unsigned one [0, 2**int_bits - 2**-frac_bits],
    both with step 2**-frac_bits.
    """

    total_bits: int
    int_bits: int
    signed: bool = True
    rounding: str = ROUND_HALF_EVEN
    overflow: str = OVERFLOW_SATURATE

    def __post_init__(self) -> None:
        if not (2 <= self.total_bits <= 32):
            raise ValueError(f"total_bits must be in [2, 32], got {self.total_bits}")
        if not (1 <= self.int_bits <= self.total_bits):
            raise ValueError(
                f"int_bits must be in [1, {self.total_bits}], got {self.int_bits}"
            )
        if self.rounding not in _ROUNDING_MODES:
            raise ValueError(f"unknown rounding mode {self.rounding!r}")
        if self.overflow not in _OVERFLOW_MODES:
            raise ValueError(f"unknown overflow mode {self.overflow!r}")

    @property
    def frac_bits(self) -> int:
        return self.total_bits - self.int_bits

    @property
    def step(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def min_code(self) -> int:
        return -(1 << (self.total_bits - 1)) if self.signed else 0

    @property
    def max_code(self) -> int:
        return (1 << (self.total_bits - 1)) - 1 if self.signed else (1 << self.total_bits) - 1

    @property
    def min_value(self) -> float:
        return self.min_code * self.step

    @property
    def max_value(self) -> float:
        return self.max_code * self.step

    def to_json(self) -> dict:
        return {
            "W": self.total_bits,
            "I": self.int_bits,
            "signed": self.signed,
            "round": self.rounding,
            "overflow": self.overflow,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FixedPointFormat":
        known = {"W", "I", "signed", "round", "overflow"}
        extra = set(obj) - known
        if extra:
            raise ValueError(f"unknown format keys: {sorted(extra)}")
        return cls(
            total_bits=int(obj["W"]),
            int_bits=int(obj["I"]),
            signed=bool(obj.get("signed", True)),
            rounding=str(obj.get("round", ROUND_HALF_EVEN)),
            overflow=str(obj.get("overflow", OVERFLOW_SATURATE)),
        )


@dataclass(frozen=True)
class BitCode:
    """A single stored value: integer code plus its format. Bit 0 is the LSB,
    bit total_bits-1 the sign/MSB."""

    code: int
    fmt: FixedPointFormat = field(repr=False)

    def __post_init__(self) -> None:
        if not (self.fmt.min_code <= self.code <= self.fmt.max_code):
            raise ValueError(
                f"code {self.code} outside [{self.fmt.min_code}, {self.fmt.max_code}]"
            )

    @property
    def value(self) -> float:
        return self.code * self.fmt.step


def _check_finite(x) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError("quantize requires finite input")


def quantize_codes(x, fmt: FixedPointFormat):
    """Map real value(s) to integer codes under the format's rounding and
    overflow modes. Works elementwise on arrays; returns int64."""
    _check_finite(x)
    # scaling by a power of two is exact in binary floating point
    u = np.asarray(x, dtype=np.float64) * float(1 << fmt.frac_bits)
    if fmt.rounding == ROUND_HALF_EVEN:
        code = np.rint(u)
    else:
        code = np.floor(u)
    code = code.astype(np.int64)
    if fmt.overflow == OVERFLOW_SATURATE:
        code = np.clip(code, fmt.min_code, fmt.max_code)
    else:
        span = np.int64(1) << fmt.total_bits
        code = (code - fmt.min_code) % span + fmt.min_code
    return code


def quantize(x, fmt: FixedPointFormat):
    """Nearest representable value under ``fmt``. Scalar in, scalar out;
    arrays are handled elementwise."""
    code = quantize_codes(x, fmt)
    out = code.astype(np.float64) * fmt.step
    if np.isscalar(x) or np.ndim(x) == 0:
        return float(out)
    return out


def encode(x: float, fmt: FixedPointFormat) -> BitCode:
    return BitCode(int(quantize_codes(x, fmt)), fmt)


def decode(c: BitCode) -> float:
    return c.value


def flip_bit(c: BitCode, j: int) -> BitCode:
    return BitCode(flip_code_bit(c.code, j, c.fmt), c.fmt)


def flip_code_bit(code: int, j: int, fmt: FixedPointFormat) -> int:
    """XOR-toggle bit ``j`` of the W-bit two's-complement representation."""
    w = fmt.total_bits
    if not (0 <= j < w):
        raise ValueError(f"bit index {j} outside [0, {w})")
    raw = int(code) & ((1 << w) - 1)
    raw ^= 1 << j
    if fmt.signed and raw >= (1 << (w - 1)):
        raw -= 1 << w
    return raw


def bit_value_delta(c: BitCode, j: int) -> float:
    """Value change caused by flipping bit ``j``: decode(flip) - decode(c)."""
    return flip_bit(c, j).value - c.value


def code_bit_deltas(codes: np.ndarray, fmt: FixedPointFormat) -> np.ndarray:
    """Vectorized ``bit_value_delta`` for an array of codes.

    Returns an array of shape codes.shape + (total_bits,) whose [..., j] entry is
    the value delta of flipping bit j. For bit j below the sign position the
    delta is +-2**(j-F); for the sign bit of a signed format the sign is reversed.
    """
    w, f = fmt.total_bits, fmt.frac_bits
    codes = np.asarray(codes, dtype=np.int64)
    bits = (codes[..., None] >> np.arange(w)) & 1
    mag = np.ldexp(1.0, np.arange(w) - f)
    if fmt.signed:
        mag[-1] = -mag[-1]
    return np.where(bits == 0, mag, -mag)
