"""Gray-mapped QAM constellations with unit average power.

Bit-to-axis convention: the first ceil(b/2) bits of a symbol label select the
real level, the rest the imaginary level, so the two axes can be detected
independently. On the real axis, two-bit labels run 00, 01, 11, 10 from the
most negative to the most positive level and a single bit 1 means positive.
The imaginary axis mirrors this (leading bit 0 means positive), matching the
4-QAM rule that bit 0 selects the upper half-plane.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import logsumexp

from .coding import as_bits

__all__ = ["Constellation", "ModulationError", "build_constellation", "modulate",
           "detect", "bit_llrs"]

# ascending level index for a two-bit Gray label b1 b2 (00, 01, 11, 10)
_GRAY2 = (0, 1, 3, 2)


class ModulationError(ValueError):
    """Unsupported constellation or malformed modulator input."""


@dataclass(frozen=True, eq=False)
class Constellation:
    M: int
    bits_per_symbol: int
    real_levels: np.ndarray
    imag_levels: np.ndarray
    nominal_tau: float | None
    gray_map: dict = field(repr=False)

    @property
    def re_bits(self) -> int:
        return (self.bits_per_symbol + 1) // 2

    @property
    def im_bits(self) -> int:
        return self.bits_per_symbol - self.re_bits

    @property
    def min_level(self) -> float:
        """Half the minimum level spacing; the unit of physical safety margins."""
        return float(np.min(np.abs(self.real_levels)))


def _axis_level_index(bits: tuple[int, ...], mirror: bool) -> int:
    if len(bits) == 1:
        return 1 - bits[0] if mirror else bits[0]
    idx = _GRAY2[(bits[0] << 1) | bits[1]]
    return 3 - idx if mirror else idx


@lru_cache(maxsize=None)
def build_constellation(M: int) -> Constellation:
    """Gray-coded unit-power QAM for M in {4, 8, 16}.

    8-QAM is the rectangular 4x2 grid: two bits on the real axis, one on the
    imaginary axis.
    """
    if M == 4:
        real = np.array([-1.0, 1.0]) / np.sqrt(2.0)
        imag = np.array([-1.0, 1.0]) / np.sqrt(2.0)
        tau = None
    elif M == 8:
        real = np.array([-3.0, -1.0, 1.0, 3.0]) / np.sqrt(6.0)
        imag = np.array([-1.0, 1.0]) / np.sqrt(6.0)
        tau = 2.0 / np.sqrt(6.0)
    elif M == 16:
        real = np.array([-3.0, -1.0, 1.0, 3.0]) / np.sqrt(10.0)
        imag = np.array([-3.0, -1.0, 1.0, 3.0]) / np.sqrt(10.0)
        tau = 2.0 / np.sqrt(10.0)
    else:
        raise ModulationError(f"unsupported constellation size M={M}")
    bps = int(np.log2(M))
    re_bits = (bps + 1) // 2
    gray = {}
    for label in range(M):
        bits = tuple((label >> (bps - 1 - i)) & 1 for i in range(bps))
        re = real[_axis_level_index(bits[:re_bits], mirror=False)]
        im = imag[_axis_level_index(bits[re_bits:], mirror=True)]
        gray[bits] = complex(re, im)
    return Constellation(M=M, bits_per_symbol=bps, real_levels=real,
                         imag_levels=imag, nominal_tau=tau, gray_map=gray)


@lru_cache(maxsize=None)
def _level_lookup(M: int):
    """Per-axis tables mapping packed bit labels to level indices."""
    c = build_constellation(M)
    re_tab = np.array([_axis_level_index(tuple((v >> (c.re_bits - 1 - i)) & 1
                                                for i in range(c.re_bits)), False)
                       for v in range(2**c.re_bits)])
    im_tab = np.array([_axis_level_index(tuple((v >> (c.im_bits - 1 - i)) & 1
                                                for i in range(c.im_bits)), True)
                       for v in range(2**c.im_bits)])
    return re_tab, im_tab


def modulate(codeword, c: Constellation) -> np.ndarray:
    """Map a coded bit sequence to complex symbols, bits_per_symbol at a time."""
    bits = as_bits(codeword)
    if bits.size % c.bits_per_symbol:
        raise ModulationError(
            f"codeword length {bits.size} not divisible by {c.bits_per_symbol}")
    if bits.size == 0:
        return np.zeros(0, dtype=np.complex128)
    groups = bits.reshape(-1, c.bits_per_symbol).astype(np.int64)
    re_label = groups[:, : c.re_bits] @ (1 << np.arange(c.re_bits)[::-1])
    im_label = groups[:, c.re_bits :] @ (1 << np.arange(c.im_bits)[::-1])
    re_tab, im_tab = _level_lookup(c.M)
    return c.real_levels[re_tab[re_label]] + 1j * c.imag_levels[im_tab[im_label]]


def _axis_bits(values: np.ndarray, nbits: int, mirror: bool, tau: float | None):
    """Threshold-slice one axis; boundaries resolve toward +inf (half-open)."""
    if nbits == 1:
        b = (values >= 0).astype(np.uint8)
        return [(1 - b) if mirror else b]
    region = ((values >= -tau).astype(np.int64) + (values >= 0) + (values >= tau))
    if mirror:
        b1 = np.array([1, 1, 0, 0], np.uint8)[region]
        b2 = np.array([0, 1, 1, 0], np.uint8)[region]
    else:
        b1 = np.array([0, 0, 1, 1], np.uint8)[region]
        b2 = np.array([0, 1, 1, 0], np.uint8)[region]
    return [b1, b2]


def detect(received, c: Constellation, tau: float | None = None) -> np.ndarray:
    """Per-axis threshold detection of a symbol sequence back to coded bits.

    tau is the inner decision threshold for 8/16-QAM; ignored for 4-QAM.
    """
    y = np.atleast_1d(np.asarray(received, dtype=np.complex128))
    if c.M in (8, 16):
        if tau is None or tau <= 0:
            raise ModulationError(f"{c.M}-QAM detection needs tau > 0")
    flat = y.reshape(-1)
    cols = (_axis_bits(flat.real, c.re_bits, False, tau)
            + _axis_bits(flat.imag, c.im_bits, True, tau))
    bits = np.stack(cols, axis=1)  # (n_symbols, bits_per_symbol)
    return bits.reshape(y.shape[:-1] + (y.shape[-1] * c.bits_per_symbol,))


def bit_llrs(received, c: Constellation, noise_var: float) -> np.ndarray:
    """Full-sum log-likelihood ratios per bit under circular Gaussian noise.

    Positive LLR favors bit 0. Input of shape (...,) yields (..., bits_per_symbol).
    """
    if noise_var <= 0:
        raise ModulationError("noise_var must be positive")
    y = np.asarray(received, dtype=np.complex128)
    labels = np.array(sorted(c.gray_map), dtype=np.uint8)          # (M, bps)
    points = np.array([c.gray_map[tuple(l)] for l in labels])       # (M,)
    loglik = -np.abs(y[..., None] - points) ** 2 / noise_var        # (..., M)
    out = np.empty(y.shape + (c.bits_per_symbol,))
    for i in range(c.bits_per_symbol):
        zero = labels[:, i] == 0
        out[..., i] = logsumexp(loglik[..., zero], axis=-1) - logsumexp(
            loglik[..., ~zero], axis=-1)
    return out
