"""MISO channel sampling, CSI corruption, AWGN transmission, and real expansion."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["Channel", "ChannelEstimate", "ChannelError", "sample_channel",
           "corrupt_csi", "transmit", "real_expand", "save_channel", "load_channel"]

_FORMAT_TAG = "ccpsim-channel v1"


class ChannelError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Channel:
    """K x N downlink channel with per-user large-scale gains.

    sigma is the complex noise standard deviation: each real dimension of the
    receiver noise has variance sigma**2 / 2.
    """

    H: np.ndarray
    gammas: np.ndarray
    distances: np.ndarray
    sigma: float = 0.0

    def __post_init__(self):
        K, N = self.H.shape
        if K < 1 or N < 1:
            raise ChannelError("need K >= 1 and N >= 1")
        if np.any(np.asarray(self.gammas) <= 0):
            raise ChannelError("large-scale gains must be positive")
        if self.sigma < 0:
            raise ChannelError("sigma must be nonnegative")

    @property
    def K(self) -> int:
        return self.H.shape[0]

    @property
    def N(self) -> int:
        return self.H.shape[1]

    def with_sigma(self, sigma: float) -> "Channel":
        return dataclasses.replace(self, sigma=float(sigma))


@dataclass(frozen=True, eq=False)
class ChannelEstimate:
    """Transmitter-side channel estimate with per-element error variance."""

    H_hat: np.ndarray
    eps2: float

    def __post_init__(self):
        if self.eps2 < 0:
            raise ChannelError("error variance must be nonnegative")


def sample_channel(K: int, N: int, *, gamma0_db: float = -30.0, nu: float = 2.6,
                   d_range: tuple[float, float] = (200.0, 300.0),
                   rng: np.random.Generator) -> Channel:
    """Draw an i.i.d. Rayleigh channel with distance-based path loss.

    User k at distance d_k ~ Uniform(d_range) gets gain
    gamma_k = 10**(gamma0_db/10) * d_k**(-nu), and row k entries are
    i.i.d. CN(0, gamma_k).
    """
    lo, hi = d_range
    if not (0 < lo <= hi):
        raise ChannelError(f"invalid distance range {d_range}")
    d = rng.uniform(lo, hi, size=K)
    gammas = 10.0 ** (gamma0_db / 10.0) * d ** (-nu)
    amp = np.sqrt(gammas / 2.0)[:, None]
    H = amp * (rng.standard_normal((K, N)) + 1j * rng.standard_normal((K, N)))
    return Channel(H=H, gammas=gammas, distances=d)


def corrupt_csi(ch: Channel, nmse: float, rng: np.random.Generator) -> ChannelEstimate:
    """Additive CSI error scaled so that K*N*eps2 / ||H||_F^2 equals nmse."""
    if nmse < 0:
        raise ChannelError("nmse must be nonnegative")
    if nmse == 0:
        return ChannelEstimate(H_hat=ch.H.copy(), eps2=0.0)
    K, N = ch.H.shape
    eps2 = nmse * np.linalg.norm(ch.H) ** 2 / (K * N)
    E = np.sqrt(eps2 / 2.0) * (rng.standard_normal((K, N)) + 1j * rng.standard_normal((K, N)))
    return ChannelEstimate(H_hat=ch.H + E, eps2=float(eps2))


def transmit(ch: Channel, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Y = H X + noise with i.i.d. CN(0, sigma^2) entries."""
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[0] != ch.N:
        raise ChannelError(f"transmit matrix shape {X.shape} does not match N={ch.N}")
    Y = ch.H @ X
    if ch.sigma > 0:
        Y = Y + ch.sigma / np.sqrt(2.0) * (
            rng.standard_normal(Y.shape) + 1j * rng.standard_normal(Y.shape))
    return Y


def real_expand(h: np.ndarray) -> np.ndarray:
    """2 x 2N real matrix mapping [Re x; Im x] to (Re{h^T x}, Im{h^T x})."""
    h = np.asarray(h).reshape(-1)
    return np.array([np.concatenate([h.real, -h.imag]),
                     np.concatenate([h.imag, h.real])])


def save_channel(path, ch: Channel) -> None:
    """Plain-text dump: header, K N sigma, then H rows as re/im pairs,
    then the gain and distance rows."""
    lines = [f"# {_FORMAT_TAG}", f"{ch.K} {ch.N} {float(ch.sigma)!r}"]
    for row in ch.H:
        lines.append(" ".join(f"{float(v.real)!r} {float(v.imag)!r}" for v in row))
    lines.append(" ".join(repr(float(g)) for g in ch.gammas))
    lines.append(" ".join(repr(float(d)) for d in ch.distances))
    Path(path).write_text("\n".join(lines) + "\n")


def load_channel(path) -> Channel:
    lines = [l for l in Path(path).read_text().splitlines() if l.strip()]
    if not lines or lines[0] != f"# {_FORMAT_TAG}":
        raise ChannelError(f"{path}: not a {_FORMAT_TAG} file")
    k_s, n_s, sigma_s = lines[1].split()
    K, N = int(k_s), int(n_s)
    H = np.zeros((K, N), dtype=np.complex128)
    for i in range(K):
        vals = np.fromstring(lines[2 + i], sep=" ")
        H[i] = vals[0::2] + 1j * vals[1::2]
    gammas = np.fromstring(lines[2 + K], sep=" ")
    distances = np.fromstring(lines[3 + K], sep=" ")
    return Channel(H=H, gammas=gammas, distances=distances, sigma=float(sigma_s))
