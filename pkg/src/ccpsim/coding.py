"""Channel codes: repetition, the Hamming family, and rate-1/2 convolutional codes.

Encoders/decoders operate on 1-D uint8 bit arrays. Convolutional blocks are
zero-terminated: ``constraint_length - 1`` tail bits are appended before
encoding and the trellis is traced back from the all-zero state.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "CodeSpec",
    "CodingError",
    "as_bits",
    "repetition_code",
    "hamming_code",
    "convolutional_code",
    "encode",
    "decode",
    "decode_soft",
    "free_distance",
]


class CodingError(ValueError):
    """Bad code specification or malformed coder input."""


def as_bits(bits) -> np.ndarray:
    """Validate and convert a bit sequence to a 1-D uint8 array."""
    b = np.asarray(bits)
    if b.ndim != 1:
        raise CodingError(f"expected a 1-D bit sequence, got shape {b.shape}")
    if b.size and not np.isin(b, (0, 1)).all():
        raise CodingError("bit sequence contains values outside {0, 1}")
    return b.astype(np.uint8)


@dataclass(frozen=True)
class CodeSpec:
    """Parameters of a channel code, including its error-correcting capacity.

    ``epsilon_c`` is the guaranteed number of correctable bit errors per
    codeword: (n-1)//2 for repetition, 1 for Hamming, and
    floor((d_free - 1)/2) for convolutional codes.
    """

    family: str
    n: int
    k: int
    epsilon_c: int
    generators: tuple[int, ...] = ()
    constraint_length: int = 0
    d_free: int = 0

    def __post_init__(self):
        if self.family not in ("repetition", "hamming", "convolutional"):
            raise CodingError(f"unsupported code family {self.family!r}")
        if not 0 < self.k < self.n:
            raise CodingError(f"need 0 < k < n, got k={self.k}, n={self.n}")
        if self.family == "hamming":
            m = self.n - self.k
            if m < 2 or self.n != 2**m - 1:
                raise CodingError(f"[{self.n},{self.k}] is not a Hamming code")
        if self.family == "convolutional":
            if len(self.generators) != self.n or self.constraint_length < 2:
                raise CodingError("convolutional spec needs n generators and constraint length >= 2")

    @property
    def rate(self) -> float:
        return self.k / self.n


def repetition_code(n: int) -> CodeSpec:
    return CodeSpec("repetition", n=n, k=1, epsilon_c=(n - 1) // 2)


def hamming_code(n: int, k: int) -> CodeSpec:
    return CodeSpec("hamming", n=n, k=k, epsilon_c=1)


def convolutional_code(generators: tuple[int, int] = (0o133, 0o171),
                       constraint_length: int = 7) -> CodeSpec:
    """Rate-1/k convolutional code from octal-valued generator polynomials."""
    spec = CodeSpec("convolutional", n=len(generators), k=1, epsilon_c=0,
                    generators=tuple(int(g) for g in generators),
                    constraint_length=int(constraint_length))
    d_free = free_distance(spec)
    return CodeSpec("convolutional", n=spec.n, k=1, epsilon_c=(d_free - 1) // 2,
                    generators=spec.generators,
                    constraint_length=spec.constraint_length, d_free=d_free)


# ---------------------------------------------------------------------------
# Hamming codes: systematic G = [I_k | P], H = [P^T | I_m]. The parity-check
# columns are the binary expansions of 1..n with the power-of-two columns
# (the parity positions) moved to the back, which fixes the codeword identity.
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _hamming_tables(n: int, k: int):
    m = n - k
    values = np.arange(1, n + 1)
    cols = ((values[None, :] >> np.arange(m)[:, None]) & 1).astype(np.uint8)  # m x n
    is_parity = (values & (values - 1)) == 0
    order = np.concatenate([values[~is_parity], values[is_parity]])
    H = cols[:, order - 1]
    P = H[:, :k].T
    G = np.concatenate([np.eye(k, dtype=np.uint8), P], axis=1)
    # syndrome integer (sum_i s_i 2^i) -> erroneous position in the reordered layout
    pos_of_syndrome = np.full(2**m, -1, dtype=np.int64)
    pos_of_syndrome[order] = np.arange(n)
    return G, H, pos_of_syndrome


def hamming_generator(spec: CodeSpec) -> np.ndarray:
    return _hamming_tables(spec.n, spec.k)[0].copy()


def hamming_parity_check(spec: CodeSpec) -> np.ndarray:
    return _hamming_tables(spec.n, spec.k)[1].copy()


# ---------------------------------------------------------------------------
# Convolutional codes. The encoder register holds [current bit, previous
# constraint_length-1 bits]; generator bit i (MSB first) taps the input delayed
# by i. State = previous bits, most recent in the high position.
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _trellis(generators: tuple[int, ...], constraint_length: int):
    kc = constraint_length
    n_states = 1 << (kc - 1)
    n_out = len(generators)
    next_state = np.zeros((n_states, 2), dtype=np.int64)
    out_bits = np.zeros((n_states, 2, n_out), dtype=np.uint8)
    for s in range(n_states):
        for b in (0, 1):
            reg = (b << (kc - 1)) | s
            for j, g in enumerate(generators):
                out_bits[s, b, j] = bin(reg & g).count("1") & 1
            next_state[s, b] = reg >> 1
    prev_state = np.zeros((n_states, 2), dtype=np.int64)
    prev_bit = np.zeros((n_states, 2), dtype=np.uint8)
    slot = np.zeros(n_states, dtype=np.int64)
    for s in range(n_states):
        for b in (0, 1):
            ns = next_state[s, b]
            prev_state[ns, slot[ns]] = s
            prev_bit[ns, slot[ns]] = b
            slot[ns] += 1
    return next_state, out_bits, prev_state, prev_bit


def _conv_encode(info: np.ndarray, spec: CodeSpec) -> np.ndarray:
    kc = spec.constraint_length
    u = np.concatenate([info, np.zeros(kc - 1, dtype=np.uint8)])  # zero tail
    padded = np.concatenate([np.zeros(kc - 1, dtype=np.uint8), u])
    streams = []
    for g in spec.generators:
        acc = np.zeros(u.size, dtype=np.uint8)
        for i in range(kc):
            if (g >> (kc - 1 - i)) & 1:
                acc ^= padded[kc - 1 - i : kc - 1 - i + u.size]
        streams.append(acc)
    return np.stack(streams, axis=1).ravel()


def _viterbi(llrs: np.ndarray, spec: CodeSpec) -> np.ndarray:
    """Maximum-correlation trellis search; positive LLR favors bit 0.

    The correlation metric sum_t (1 - 2 out_t) * llr_t is an affine function
    of the Hamming distance when the LLRs are +-1, so the same search performs
    hard minimum-distance decoding.
    """
    kc = spec.constraint_length
    _, out_bits, prev_state, prev_bit = _trellis(spec.generators, kc)
    n_states = out_bits.shape[0]
    steps = llrs.shape[0]
    if steps < kc - 1:
        raise CodingError("block shorter than the zero tail")
    branch_pm = (1.0 - 2.0 * out_bits)[prev_state, prev_bit]  # (n_states, 2, n_out)
    metric = np.full(n_states, -np.inf)
    metric[0] = 0.0
    back = np.zeros((steps, n_states), dtype=np.uint8)
    for t in range(steps):
        cand = metric[prev_state] + branch_pm @ llrs[t]
        back[t] = np.argmax(cand, axis=1)
        metric = np.take_along_axis(cand, back[t][:, None], axis=1)[:, 0]
    s = 0  # zero-terminated: trace back from the all-zero state
    bits = np.empty(steps, dtype=np.uint8)
    for t in range(steps - 1, -1, -1):
        i = back[t, s]
        bits[t] = prev_bit[s, i]
        s = prev_state[s, i]
    return bits[: steps - (kc - 1)]


# ---------------------------------------------------------------------------
# Public coder operations
# ---------------------------------------------------------------------------

def encode(info, spec: CodeSpec) -> np.ndarray:
    """Encode information bits; output length is (len(info)/k) * n.

    Convolutional encoding appends the zero tail first, so the output covers
    len(info) + constraint_length - 1 trellis steps.
    """
    info = as_bits(info)
    if spec.family == "repetition":
        return np.repeat(info, spec.n)
    if spec.family == "hamming":
        if info.size % spec.k:
            raise CodingError(f"info length {info.size} not divisible by k={spec.k}")
        G, _, _ = _hamming_tables(spec.n, spec.k)
        return (info.reshape(-1, spec.k) @ G % 2).astype(np.uint8).ravel()
    return _conv_encode(info, spec)


def decode(received, spec: CodeSpec) -> np.ndarray:
    """Hard-decision decoding: majority vote, syndrome correction, or Viterbi."""
    r = as_bits(received)
    if spec.family == "repetition":
        if r.size % spec.n:
            raise CodingError(f"received length {r.size} not divisible by n={spec.n}")
        sums = r.reshape(-1, spec.n).sum(axis=1)
        return (2 * sums > spec.n).astype(np.uint8)
    if spec.family == "hamming":
        if r.size % spec.n:
            raise CodingError(f"received length {r.size} not divisible by n={spec.n}")
        _, H, pos_of_syndrome = _hamming_tables(spec.n, spec.k)
        words = r.reshape(-1, spec.n)
        syndromes = words @ H.T % 2
        syn_val = syndromes @ (1 << np.arange(spec.n - spec.k))
        corrected = words.copy()
        bad = syn_val > 0
        if bad.any():
            rows = np.nonzero(bad)[0]
            corrected[rows, pos_of_syndrome[syn_val[rows]]] ^= 1
        return corrected[:, : spec.k].ravel()
    if r.size % spec.n:
        raise CodingError(f"received length {r.size} not divisible by n={spec.n}")
    llrs = (1.0 - 2.0 * r.astype(np.float64)).reshape(-1, spec.n)
    return _viterbi(llrs, spec)


def decode_soft(llrs, spec: CodeSpec) -> np.ndarray:
    """Soft-input Viterbi over per-coded-bit LLRs (positive favors bit 0)."""
    if spec.family != "convolutional":
        raise CodingError("soft decoding is only defined for convolutional codes")
    arr = np.asarray(llrs, dtype=np.float64)
    if arr.ndim != 1 or arr.size % spec.n:
        raise CodingError("need one LLR per coded bit")
    if not np.isfinite(arr).all():
        raise CodingError("LLRs must be finite")
    return _viterbi(arr.reshape(-1, spec.n), spec)


def free_distance(spec: CodeSpec) -> int:
    """Minimum output weight over trellis paths detouring from the zero state.

    Dijkstra search on the state graph, seeded by the diverging input-1 edge
    and terminated on remerge with state zero.
    """
    if spec.family != "convolutional":
        raise CodingError("free distance is only defined for convolutional codes")
    next_state, out_bits, _, _ = _trellis(spec.generators, spec.constraint_length)
    weights = out_bits.sum(axis=2).astype(np.int64)
    start = int(next_state[0, 1])
    best = {start: int(weights[0, 1])}
    heap = [(best[start], start)]
    while heap:
        w, s = heapq.heappop(heap)
        if s == 0:
            return w
        if w > best.get(s, np.inf):
            continue
        for b in (0, 1):
            ns = int(next_state[s, b])
            nw = w + int(weights[s, b])
            if nw < best.get(ns, np.inf):
                best[ns] = nw
                heapq.heappush(heap, (nw, ns))
    raise CodingError("zero state unreachable; malformed trellis")
