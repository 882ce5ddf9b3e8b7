"""IEEE 754 binary16 conversion kernels.

Accelerator-side operands are binary16; the host works in binary32.
Narrowing rounds to nearest-even, overflows saturate to infinity, and
subnormal results are produced exactly.  Widening is exact for every one
of the 65536 bit patterns.  NaNs are canonicalized to a single quiet
pattern on narrowing so bit-exact tests stay simple.

All functions operate on raw bit patterns (uint32 <-> uint16) and are
vectorized over numpy arrays; scalar helpers wrap them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CANONICAL_QNAN16 = np.uint16(0x7E00)

_F32_SIGN = np.uint32(0x8000_0000)
_F32_EXP = np.uint32(0x7F80_0000)
_F32_MAN = np.uint32(0x007F_FFFF)


def fp32_bits_to_fp16_bits(bits32) -> np.ndarray:
    """Narrow binary32 bit patterns to binary16 with round-to-nearest-even."""
    u = np.atleast_1d(np.asarray(bits32, dtype=np.uint32))
    sign16 = ((u >> np.uint32(16)) & np.uint32(0x8000)).astype(np.uint32)
    exp = ((u >> np.uint32(23)) & np.uint32(0xFF)).astype(np.int64)
    man = (u & _F32_MAN).astype(np.uint32)

    out = np.zeros(u.shape, dtype=np.uint32)

    is_nan = (exp == 255) & (man != 0)
    is_inf_or_big = ((exp == 255) & (man == 0)) | ((exp >= 143) & (exp < 255))
    normal = (exp >= 113) & (exp <= 142)
    sub = (exp >= 102) & (exp <= 112)
    # exp <= 101 (including fp32 subnormals) underflows to signed zero.

    # Normal candidates: round the 23-bit mantissa to 10 bits; a carry out of
    # the mantissa bumps the exponent and, at e16 == 30, rolls into infinity.
    e16 = np.clip(exp - 112, 0, 31).astype(np.uint32)
    keep = man >> np.uint32(13)
    rem = man & np.uint32(0x1FFF)
    roundup = (rem > 0x1000) | ((rem == 0x1000) & ((keep & 1) == 1))
    h = (e16 << np.uint32(10)) + keep + roundup.astype(np.uint32)
    out[normal] = h[normal]

    # Subnormal results: shift the 24-bit significand down to the fixed
    # 2^-24 grid, rounding to nearest-even on the discarded bits.
    sig = man | np.uint32(0x0080_0000)
    shift = np.clip(126 - exp, 1, 31).astype(np.uint32)
    keep_s = sig >> shift
    rem_s = sig & ((np.uint32(1) << shift) - np.uint32(1))
    half_s = np.uint32(1) << (shift - np.uint32(1))
    roundup_s = (rem_s > half_s) | ((rem_s == half_s) & ((keep_s & 1) == 1))
    out[sub] = (keep_s + roundup_s.astype(np.uint32))[sub]

    out[is_inf_or_big] = 0x7C00
    out = out | sign16
    out[is_nan] = CANONICAL_QNAN16
    return out.astype(np.uint16).reshape(np.shape(bits32))


def fp16_bits_to_fp32_bits(bits16) -> np.ndarray:
    """Widen binary16 bit patterns to binary32 exactly (payloads preserved)."""
    u = np.atleast_1d(np.asarray(bits16, dtype=np.uint16)).astype(np.uint32)
    sign = (u & np.uint32(0x8000)) << np.uint32(16)
    exp = (u >> np.uint32(10)) & np.uint32(0x1F)
    man = u & np.uint32(0x3FF)

    out = sign.copy()

    normal = (exp >= 1) & (exp <= 30)
    out[normal] |= (((exp + np.uint32(112)) << np.uint32(23)) | (man << np.uint32(13)))[normal]

    special = exp == 31
    out[special] |= (np.uint32(0x7F80_0000) | (man << np.uint32(13)))[special]

    # Subnormals renormalize: shift the mantissa up until the hidden bit
    # appears, decrementing the exponent from 2^-14 accordingly.
    sub = (exp == 0) & (man != 0)
    if np.any(sub):
        m = man.copy()
        e = np.full(u.shape, 113, dtype=np.int64)  # biased fp32 exponent for 2^-14
        pending = sub.copy()
        for _ in range(10):
            need = pending & ((m & np.uint32(0x400)) == 0)
            if not np.any(need):
                break
            m[need] <<= np.uint32(1)
            e[need] -= 1
        out[sub] |= ((e.astype(np.uint32) << np.uint32(23)) | ((m & np.uint32(0x3FF)) << np.uint32(13)))[sub]

    return out.astype(np.uint32).reshape(np.shape(bits16))


def fp32_array_to_fp16(values: np.ndarray) -> np.ndarray:
    """fp32 array -> fp16 array under the engine's narrowing semantics."""
    bits = np.ascontiguousarray(values, dtype=np.float32).view(np.uint32)
    return fp32_bits_to_fp16_bits(bits).view(np.float16)


def fp16_array_to_fp32(values: np.ndarray) -> np.ndarray:
    """fp16 array -> fp32 array, exact widening."""
    bits = np.ascontiguousarray(values, dtype=np.float16).view(np.uint16)
    return fp16_bits_to_fp32_bits(bits).view(np.float32)


@dataclass(frozen=True)
class Fp16Scalar:
    """A binary16 value carried as its raw 16-bit pattern."""

    bits: int

    def __post_init__(self):
        if not 0 <= self.bits <= 0xFFFF:
            raise ValueError(f"not a 16-bit pattern: {self.bits:#x}")

    @classmethod
    def from_float(cls, x: float) -> "Fp16Scalar":
        bits32 = np.float32(x).view(np.uint32)
        return cls(int(fp32_bits_to_fp16_bits(np.uint32(bits32))[()]))

    def to_float(self) -> float:
        return float(np.uint32(fp16_bits_to_fp32_bits(np.uint16(self.bits))[()]).view(np.float32))

    def is_nan(self) -> bool:
        return (self.bits & 0x7C00) == 0x7C00 and (self.bits & 0x3FF) != 0


def fp32_to_fp16(x: float) -> Fp16Scalar:
    return Fp16Scalar.from_float(x)


def fp16_to_fp32(x: "Fp16Scalar | int") -> float:
    if isinstance(x, Fp16Scalar):
        return x.to_float()
    return Fp16Scalar(x).to_float()
