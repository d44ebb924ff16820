"""Uniform and power quantization operators.

A power quantizer with exponent ``a`` maps ``x`` to
``round(sign(x) |x|^a / s)`` where ``s`` is the max-abs of the transformed
tensor divided by the largest code. ``a == 1`` is plain symmetric uniform
quantization. Codes are symmetric, ``[-(2^(b-1) - 1), 2^(b-1) - 1]``, with no
zero point.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import PER_TENSOR, Granularity, group_view, reduce_max_abs, ungroup

MIN_BITS, MAX_BITS = 2, 8
MIN_EXPONENT, MAX_EXPONENT = 0.05, 2.0


class QuantConfigError(ValueError):
    pass


def max_code(bits: int) -> int:
    return 2 ** (bits - 1) - 1


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 4
    exponent: float = 1.0
    granularity: Granularity = field(default=PER_TENSOR)

    def __post_init__(self):
        if not MIN_BITS <= self.bits <= MAX_BITS:
            raise QuantConfigError(f"bits must lie in [{MIN_BITS}, {MAX_BITS}], got {self.bits}")
        if not MIN_EXPONENT <= self.exponent <= MAX_EXPONENT:
            raise QuantConfigError(
                f"exponent must lie in [{MIN_EXPONENT}, {MAX_EXPONENT}], got {self.exponent}"
            )

    @property
    def max_code(self) -> int:
        return max_code(self.bits)


def round_half_away(v: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (exact in float64)."""
    v = np.asarray(v, dtype=np.float64)
    whole = np.trunc(v)
    return whole + np.sign(v) * (np.abs(v - whole) >= 0.5)


def power_transform(x, a: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if a == 1.0:
        return x.copy()
    return np.sign(x) * np.abs(x) ** a


def inverse_power_transform(u, a: float) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if a == 1.0:
        return u.copy()
    return np.sign(u) * np.abs(u) ** (1.0 / a)


def compute_scale(x, bits: int, granularity: Granularity = PER_TENSOR) -> np.ndarray:
    """Per-group scale ``max|x| / (2^(b-1) - 1)``; all-zero groups get scale 1."""
    peak = reduce_max_abs(np.asarray(x, dtype=np.float64), granularity)
    return np.where(peak > 0, peak / max_code(bits), 1.0)


@dataclass
class QuantizedTensor:
    codes: np.ndarray          # int8, same shape as the source
    scales: np.ndarray         # float64, (channels, groups)
    exponent: float
    bits: int
    granularity: Granularity = field(default=PER_TENSOR)

    def __post_init__(self):
        B = max_code(self.bits)
        if np.any(np.abs(self.codes.astype(np.int64)) > B):
            raise QuantConfigError(f"codes outside [-{B}, {B}]")
        if np.any(self.scales <= 0):
            raise QuantConfigError("scales must be positive")

    @property
    def shape(self) -> tuple:
        return tuple(self.codes.shape)

    def header(self) -> dict:
        g = self.granularity
        return {
            "shape": list(self.shape),
            "bits": self.bits,
            "exponent": float(self.exponent),
            "granularity": g.kind,
            "group_size": g.group_size if g.kind == "per-group" else None,
            "scales_shape": list(self.scales.shape),
        }

    def to_bytes(self) -> bytes:
        """Length-prefixed JSON header, int8 codes, then float32 scales (all LE)."""
        header = json.dumps(self.header(), sort_keys=True).encode()
        codes = self.codes.astype("<i1").tobytes()
        scales = self.scales.astype("<f4").tobytes()
        return struct.pack("<Q", len(header)) + header + codes + scales

    @classmethod
    def from_bytes(cls, blob: bytes) -> "QuantizedTensor":
        if len(blob) < 8:
            raise ValueError("truncated quantized tensor header")
        (n,) = struct.unpack_from("<Q", blob)
        if len(blob) < 8 + n:
            raise ValueError("truncated quantized tensor header")
        head = json.loads(blob[8 : 8 + n])
        shape = tuple(head["shape"])
        n_codes = int(np.prod(shape))
        sshape = tuple(head["scales_shape"])
        n_scales = int(np.prod(sshape))
        body = blob[8 + n :]
        if len(body) != n_codes + 4 * n_scales:
            raise ValueError(
                f"quantized tensor payload has {len(body)} bytes, expected {n_codes + 4 * n_scales}"
            )
        codes = np.frombuffer(body[:n_codes], dtype="<i1").reshape(shape).astype(np.int8)
        scales = np.frombuffer(body[n_codes:], dtype="<f4").reshape(sshape).astype(np.float64)
        kind = head["granularity"]
        gran = Granularity(kind, head["group_size"]) if kind == "per-group" else Granularity(kind)
        return cls(codes, scales, head["exponent"], head["bits"], gran)

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "QuantizedTensor":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def quantize(x, cfg: QuantConfig, scales=None) -> QuantizedTensor:
    """Quantize ``x``; pass ``scales`` to reuse frozen scales instead of max-abs ones."""
    x = np.asarray(x, dtype=np.float64)
    t = power_transform(x, cfg.exponent)
    if scales is None:
        scales = compute_scale(t, cfg.bits, cfg.granularity)
    scales = np.asarray(scales, dtype=np.float64).reshape(group_view(t, cfg.granularity).shape[:2])
    grouped = group_view(t, cfg.granularity) / scales[..., None]
    B = cfg.max_code
    codes = np.clip(round_half_away(grouped), -B, B)
    codes = ungroup(codes, x.shape, cfg.granularity).astype(np.int8)
    return QuantizedTensor(codes, scales, float(cfg.exponent), cfg.bits, cfg.granularity)


def power_dequantize(codes, scales, exponent: float) -> np.ndarray:
    """``sign(c) (|c| s)^(1/a)`` in float64 with scales already broadcastable."""
    u = np.asarray(codes, dtype=np.float64) * np.asarray(scales, dtype=np.float64)
    return inverse_power_transform(u, exponent)


def dequantize(q: QuantizedTensor, dtype=np.float32) -> np.ndarray:
    grouped = group_view(q.codes.astype(np.float64), q.granularity)
    u = grouped * q.scales[..., None]
    out = inverse_power_transform(u, q.exponent)
    return ungroup(out, q.shape, q.granularity).astype(dtype)


def fake_quantize(x, cfg: QuantConfig, scales=None, dtype=np.float32) -> np.ndarray:
    return dequantize(quantize(x, cfg, scales), dtype=dtype)


def reconstruction_error(x, cfg: QuantConfig, p: int = 2) -> float:
    """``||x - fake_quantize(x)||_p`` accumulated in float64."""
    if p not in (1, 2):
        raise QuantConfigError(f"p must be 1 or 2, got {p}")
    x = np.asarray(x, dtype=np.float64)
    diff = (x - fake_quantize(x, cfg, dtype=np.float64)).ravel()
    if p == 1:
        return float(np.abs(diff).sum())
    return float(np.sqrt(np.dot(diff, diff)))


# Reference symmetric uniform quantizer, written without the power transform.
# Kept separate so that power quantization at a == 1 can be checked against it.

def uniform_quantize(x, bits: int, granularity: Granularity = PER_TENSOR, scales=None):
    x = np.asarray(x, dtype=np.float64)
    grouped = group_view(x, granularity)
    if scales is None:
        peak = np.abs(grouped).max(axis=-1)
        scales = np.where(peak > 0, peak / (2 ** (bits - 1) - 1), 1.0)
    scales = np.asarray(scales, dtype=np.float64).reshape(grouped.shape[:2])
    q = grouped / scales[..., None]
    codes = np.trunc(q) + np.sign(q) * (np.abs(q - np.trunc(q)) >= 0.5)
    B = 2 ** (bits - 1) - 1
    codes = np.minimum(np.maximum(codes, -B), B)
    return ungroup(codes, x.shape, granularity).astype(np.int8), scales


def uniform_dequantize(codes, scales, granularity: Granularity = PER_TENSOR, dtype=np.float32):
    codes = np.asarray(codes)
    grouped = group_view(codes.astype(np.float64), granularity) * scales[..., None]
    return ungroup(grouped, codes.shape, granularity).astype(dtype)


# Level sets for comparing number formats at unit scale.

def generate_levels(fmt: str, bits: int = 4, exponent: float = 0.5) -> np.ndarray:
    """Sorted representable values on ``[-1, 1]``.

    ``fmt`` is one of ``uniform``, ``power``, ``log2`` or ``fp4-e2m1``. The log2
    format spends one magnitude code on zero and uses the rest for ``2^-k``.
    """
    B = max_code(bits)
    k = np.arange(-B, B + 1, dtype=np.float64)
    if fmt == "uniform":
        levels = k / B
    elif fmt == "power":
        levels = np.sign(k) * (np.abs(k) / B) ** (1.0 / exponent)
    elif fmt == "log2":
        mags = 2.0 ** -np.arange(0, B, dtype=np.float64)
        levels = np.concatenate([-mags, [0.0], mags])
    elif fmt == "fp4-e2m1":
        if bits != 4:
            raise QuantConfigError("fp4-e2m1 is a 4-bit format")
        mags = []
        for e in range(4):
            for m in range(2):
                # exponent bias 1, e == 0 is subnormal
                mags.append((m / 2) if e == 0 else (1 + m / 2) * 2.0 ** (e - 1))
        mags = np.array(mags) / max(mags)
        levels = np.concatenate([-mags, mags])
    else:
        raise QuantConfigError(f"unsupported format {fmt!r}")
    return np.unique(levels)
