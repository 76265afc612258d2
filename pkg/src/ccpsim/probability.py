"""Coded-bit error probabilities per slot and per block, with analytic gradients.

Every per-axis probability is a short sum ``const + sum_j s_j *
Phi(sqrt(2) (a_j tau + b_j z) / sd)`` over terms with coefficients s in
{-1,+1}, a in {-1,0,+1} (threshold sign) and b in {-1,+1} (signal sign).
The term tables below enumerate the four two-bit-axis cases and the two
single-bit cases; gradients follow mechanically from the same tables since

    d/dz   Phi(sqrt(2)(a tau + b z)/sd) = b  exp(-(a tau + b z)^2/sd^2) / (sd sqrt(pi))
    d/dtau Phi(sqrt(2)(a tau + b z)/sd) = a  exp(-(a tau + b z)^2/sd^2) / (sd sqrt(pi))

Under imperfect transmitter-side channel knowledge the noiseless signal z is
replaced by its estimate and sd by the per-slot effective deviation
sqrt(sigma^2 + eps2 ||x_t||^2), whose dependence on the transmit signal adds a
chain-rule term supported on the slot's own coordinates.

The block-level success probability (at most one coded-bit error across the
block) is evaluated in the log domain so products over hundreds of slots do
not underflow, and its gradient is assembled in O(L_s) via leave-one-out
products rather than the literal double sum.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import log_ndtr, ndtr

from .channel import real_expand
from .modulation import Constellation, _axis_bits

__all__ = [
    "SlotBitProbs",
    "EffectiveNoise",
    "ProbabilityError",
    "gaussian_cdf",
    "gaussian_log_cdf",
    "slot_bit_probs",
    "slot_bit_probs_mc_oracle",
    "block_success_prob",
    "block_error_prob_exact_oracle",
    "block_success_grad",
    "user_block_success",
    "BlockProbabilityModel",
]

_SQRT2 = np.sqrt(2.0)
_SQRT_PI = np.sqrt(np.pi)
_P_FLOOR = 1e-300  # slot probabilities are floored here before taking logs


class ProbabilityError(ValueError):
    pass


def gaussian_cdf(t):
    """Standard normal CDF."""
    return ndtr(t)


def gaussian_log_cdf(t):
    """log Phi(t), stable for t << 0."""
    return log_ndtr(t)


@dataclass(frozen=True)
class SlotBitProbs:
    """Probabilities of exactly 0/1 bit errors on each axis of one user-slot."""

    p_re_e0: float
    p_re_e1: float
    p_im_e0: float
    p_im_e1: float

    def as_array(self) -> np.ndarray:
        return np.array([self.p_re_e0, self.p_re_e1, self.p_im_e0, self.p_im_e1])


@dataclass(frozen=True)
class EffectiveNoise:
    """Receiver noise level plus transmitter-side CSI error variance.

    eps2 = 0 models perfect channel knowledge; otherwise the per-slot
    effective deviation grows with the transmit power spent on the slot.
    """

    sigma: float
    eps2: float = 0.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ProbabilityError("sigma must be positive")
        if self.eps2 < 0:
            raise ProbabilityError("eps2 must be nonnegative")

    def slot_sd(self, x_slots: np.ndarray) -> np.ndarray:
        """Effective deviation per slot for x_slots of shape (L_s, 2N)."""
        if self.eps2 == 0.0:
            return np.full(x_slots.shape[0], self.sigma)
        return np.sqrt(self.sigma**2 + self.eps2 * (x_slots**2).sum(axis=1))


# ---------------------------------------------------------------------------
# Term tables. Single-bit axes follow the real-axis convention (bit 1 on the
# positive side); pair axes are keyed by (b1, b2) with ascending Gray order
# 00, 01, 11, 10. Mirrored (imaginary) axes remap the leading bit before the
# lookup, which realizes the reflected level order exactly.
# ---------------------------------------------------------------------------

_SINGLE = {
    0: {"e0": (0.0, ((+1, 0, -1),)), "e1": (1.0, ((-1, 0, -1),))},
    1: {"e0": (0.0, ((+1, 0, +1),)), "e1": (1.0, ((-1, 0, +1),))},
}

_PAIR = {
    (0, 0): {"e0": (0.0, ((+1, -1, -1),)),
             "e1": (0.0, ((+1, 0, -1), (-1, -1, -1), (+1, -1, +1)))},
    (0, 1): {"e0": (0.0, ((+1, 0, -1), (-1, -1, -1))),
             "e1": (0.0, ((+1, -1, -1), (+1, +1, -1), (-1, 0, -1)))},
    (1, 0): {"e0": (0.0, ((+1, -1, +1),)),
             "e1": (0.0, ((+1, -1, -1), (+1, +1, -1), (-1, 0, -1)))},
    (1, 1): {"e0": (0.0, ((+1, +1, -1), (-1, 0, -1))),
             "e1": (0.0, ((+1, 0, -1), (-1, -1, -1), (+1, -1, +1)))},
}


@lru_cache(maxsize=None)
def _packed_tables(nbits: int):
    """Dense (case, term) arrays: const, s, a, b per error count."""
    if nbits == 1:
        cases = [_SINGLE[c] for c in (0, 1)]
    else:
        cases = [_PAIR[(b1, b2)] for b1 in (0, 1) for b2 in (0, 1)]
    out = {}
    for err in ("e0", "e1"):
        width = max(len(c[err][1]) for c in cases)
        const = np.array([c[err][0] for c in cases])
        s = np.zeros((len(cases), width))
        a = np.zeros((len(cases), width))
        b = np.zeros((len(cases), width))
        for i, c in enumerate(cases):
            for j, (sj, aj, bj) in enumerate(c[err][1]):
                s[i, j], a[i, j], b[i, j] = sj, aj, bj
        out[err] = (const, s, a, b)
    return out


def _axis_cases(bits: np.ndarray, nbits: int, mirror: bool) -> np.ndarray:
    """Case index per (user, slot) from the axis bits, shape (..., nbits)."""
    if nbits == 1:
        c = bits[..., 0].astype(np.int64)
        return 1 - c if mirror else c
    b1 = bits[..., 0].astype(np.int64)
    if mirror:
        b1 = 1 - b1
    return 2 * b1 + bits[..., 1].astype(np.int64)


class BlockProbabilityModel:
    """Per-block probability/gradient engine for fixed coded bits and channel.

    Precomputes the gathered term tables once so the thousands of objective
    and gradient evaluations inside the precoder loops only touch the
    transmit-signal-dependent parts.
    """

    def __init__(self, H: np.ndarray, coded_bits: np.ndarray,
                 constellation: Constellation, noise: EffectiveNoise):
        H = np.atleast_2d(np.asarray(H, dtype=np.complex128))
        C = np.atleast_2d(np.asarray(coded_bits))
        bps = constellation.bits_per_symbol
        if C.shape[1] % bps:
            raise ProbabilityError(
                f"coded block length {C.shape[1]} not divisible by {bps}")
        self.K, self.N = H.shape
        self.L_s = C.shape[1] // bps
        self.constellation = constellation
        self.noise = noise
        self.Gre = np.hstack([H.real, -H.imag])  # (K, 2N)
        self.Gim = np.hstack([H.imag, H.real])
        slot_bits = C.reshape(self.K, self.L_s, bps)
        re_n, im_n = constellation.re_bits, constellation.im_bits
        case_re = _axis_cases(slot_bits[..., :re_n], re_n, mirror=False)
        case_im = _axis_cases(slot_bits[..., re_n:], im_n, mirror=True)
        self._tabs = {}
        for axis, (case, nbits) in (("re", (case_re, re_n)), ("im", (case_im, im_n))):
            packed = _packed_tables(nbits)
            for err in ("e0", "e1"):
                const, s, a, b = packed[err]
                self._tabs[axis, err] = (const[case], s[case], a[case], b[case])
        self._uses_tau = re_n == 2 or im_n == 2

    # -- probability evaluation ------------------------------------------------

    def _axis_prob(self, key, z, sd, tau):
        const, s, a, b = self._tabs[key]
        arg = _SQRT2 * (a * tau + b * z[..., None]) / sd[..., None]
        return np.clip(const + (s * ndtr(arg)).sum(axis=-1), 0.0, 1.0)

    def slot_probs(self, x_slots: np.ndarray, tau: float | None):
        """Per-axis 0/1-error probabilities for all users and slots."""
        tau = self._check_tau(tau)
        Z_re = self.Gre @ x_slots.T  # (K, L_s)
        Z_im = self.Gim @ x_slots.T
        sd = self.noise.slot_sd(x_slots)
        pre0 = self._axis_prob(("re", "e0"), Z_re, sd, tau)
        pre1 = self._axis_prob(("re", "e1"), Z_re, sd, tau)
        pim0 = self._axis_prob(("im", "e0"), Z_im, sd, tau)
        pim1 = self._axis_prob(("im", "e1"), Z_im, sd, tau)
        return {"pre0": pre0, "pre1": pre1, "pim0": pim0, "pim1": pim1,
                "Z_re": Z_re, "Z_im": Z_im, "sd": sd}

    def objectives(self, x_slots: np.ndarray, tau: float | None = None):
        """P[at most one coded-bit error] per user, plus the evaluation cache."""
        cache = self.slot_probs(x_slots, tau)
        lp = (np.log(np.maximum(cache["pre0"], _P_FLOOR))
              + np.log(np.maximum(cache["pim0"], _P_FLOOR)))
        L = lp.sum(axis=1)
        leave_one = np.exp(L[:, None] - lp)
        one_err = cache["pre1"] * cache["pim0"] + cache["pre0"] * cache["pim1"]
        P = np.exp(L) + (one_err * leave_one).sum(axis=1)
        cache.update(lp=lp, L=L, leave_one=leave_one, one_err=one_err)
        return np.clip(P, 0.0, 1.0), cache

    # -- gradient assembly -----------------------------------------------------

    def _axis_grad_coefs(self, key, z, sd, tau):
        """Per-slot derivative coefficients of one axis probability.

        Returns (d/dz, d/dtau, du) where du multiplies the slot's own signal
        coordinates through the effective-deviation chain rule.
        """
        _, s, a, b = self._tabs[key]
        lin = a * tau + b * z[..., None]
        E = np.exp(-((lin / sd[..., None]) ** 2))
        dz = (s * b * E).sum(axis=-1) / (_SQRT_PI * sd)
        dtau = (s * a * E).sum(axis=-1) / (_SQRT_PI * sd) if self._uses_tau else 0.0
        du = 0.0
        if self.noise.eps2 > 0:
            du = -(s * lin * E).sum(axis=-1) * self.noise.eps2 / (_SQRT_PI * sd**3)
        return dz, dtau, du

    def grad(self, x_slots: np.ndarray, tau: float | None, k: int, cache):
        """Gradient of user k's block success probability.

        Returns (G, g_tau) with G of shape (L_s, 2N); g_tau is 0.0 when the
        constellation has no inner threshold.
        """
        tau_val = self._check_tau(tau)
        pre0, pre1 = cache["pre0"][k], cache["pre1"][k]
        pim0, pim1 = cache["pim0"][k], cache["pim1"][k]
        lp, L = cache["lp"][k], cache["L"][k]
        leave_one = cache["leave_one"][k]
        one_err = cache["one_err"][k]
        sd = cache["sd"]
        # leave-two-out weights: c3[i] = sum_{t != i} one_err[t] prod_{j not in {i,t}} p0[j]
        with np.errstate(divide="ignore"):
            u = np.log(one_err, out=np.full_like(one_err, -np.inf),
                       where=one_err > 0) - lp
        m = u.max() if u.size else -np.inf
        if np.isfinite(m):
            v = np.exp(u - m)
            V = v.sum()
            with np.errstate(divide="ignore"):
                c3 = np.exp(L - lp + m + np.log(np.maximum(V - v, 0.0)))
        else:
            c3 = np.zeros_like(lp)
        a_re0 = pim0 * (leave_one + c3) + pim1 * leave_one
        a_re1 = pim0 * leave_one
        a_im0 = pre0 * (leave_one + c3) + pre1 * leave_one
        a_im1 = pre0 * leave_one

        k_idx = slice(k, k + 1)
        dz_re0, dt_re0, du_re0 = self._axis_grad_coefs(("re", "e0"), cache["Z_re"][k_idx], sd, tau_val)
        dz_re1, dt_re1, du_re1 = self._axis_grad_coefs(("re", "e1"), cache["Z_re"][k_idx], sd, tau_val)
        dz_im0, dt_im0, du_im0 = self._axis_grad_coefs(("im", "e0"), cache["Z_im"][k_idx], sd, tau_val)
        dz_im1, dt_im1, du_im1 = self._axis_grad_coefs(("im", "e1"), cache["Z_im"][k_idx], sd, tau_val)

        coef_re = (a_re0 * dz_re0 + a_re1 * dz_re1)[0]
        coef_im = (a_im0 * dz_im0 + a_im1 * dz_im1)[0]
        G = coef_re[:, None] * self.Gre[k] + coef_im[:, None] * self.Gim[k]
        if self.noise.eps2 > 0:
            coef_u = (a_re0 * du_re0 + a_re1 * du_re1
                      + a_im0 * du_im0 + a_im1 * du_im1)[0]
            G = G + coef_u[:, None] * x_slots
        g_tau = 0.0
        if self._uses_tau:
            g_tau = float((a_re0 * dt_re0 + a_re1 * dt_re1
                           + a_im0 * dt_im0 + a_im1 * dt_im1).sum())
        return G, g_tau

    def _check_tau(self, tau):
        if self._uses_tau:
            if tau is None or tau <= 0:
                raise ProbabilityError("this constellation needs tau > 0")
            return float(tau)
        return 0.0


# ---------------------------------------------------------------------------
# Scalar / sequence front-ends
# ---------------------------------------------------------------------------

def _single_slot_model(slot_bits, constellation, noise_sd):
    noise = EffectiveNoise(sigma=float(noise_sd))
    h = np.array([[1.0 + 0.0j]])  # z passes straight through
    return BlockProbabilityModel(h, np.asarray(slot_bits)[None, :], constellation, noise)


def slot_bit_probs(z_re: float, z_im: float, noise_sd: float, slot_bits,
                   c: Constellation, tau: float | None = None) -> SlotBitProbs:
    """Closed-form 0/1-bit-error probabilities per axis of one user-slot."""
    slot_bits = np.asarray(slot_bits)
    if slot_bits.size != c.bits_per_symbol:
        raise ProbabilityError(
            f"expected {c.bits_per_symbol} slot bits, got {slot_bits.size}")
    model = _single_slot_model(slot_bits, c, noise_sd)
    x = np.array([[z_re, z_im]])  # (L_s=1, 2N=2): identity channel reproduces z
    p = model.slot_probs(x, tau if model._uses_tau else None)
    return SlotBitProbs(float(p["pre0"][0, 0]), float(p["pre1"][0, 0]),
                        float(p["pim0"][0, 0]), float(p["pim1"][0, 0]))


def slot_bit_probs_mc_oracle(z_re: float, z_im: float, noise_sd: float, slot_bits,
                             c: Constellation, tau: float | None, trials: int,
                             rng: np.random.Generator) -> SlotBitProbs:
    """Monte-Carlo estimate of slot_bit_probs by noisy detection counting."""
    if trials < 10_000:
        raise ProbabilityError("need at least 1e4 trials for a useful estimate")
    slot_bits = np.asarray(slot_bits, dtype=np.uint8)
    axis_sd = noise_sd / _SQRT2
    re_n, im_n = c.re_bits, c.im_bits
    y_re = z_re + axis_sd * rng.standard_normal(trials)
    y_im = z_im + axis_sd * rng.standard_normal(trials)
    re_hat = np.stack(_axis_bits(y_re, re_n, False, tau), axis=1)
    im_hat = np.stack(_axis_bits(y_im, im_n, True, tau), axis=1)
    re_err = (re_hat != slot_bits[:re_n]).sum(axis=1)
    im_err = (im_hat != slot_bits[re_n:]).sum(axis=1)
    return SlotBitProbs(
        float((re_err == 0).mean()), float((re_err == 1).mean()),
        float((im_err == 0).mean()), float((im_err == 1).mean()))


def block_success_prob(probs) -> float:
    """P[at most one coded-bit error in the block] from per-slot probabilities.

    Evaluated as the zero-error product plus one-error substitutions, all in
    the log domain with slot probabilities floored at 1e-300.
    """
    arr = np.array([p.as_array() for p in probs])
    if arr.size == 0:
        raise ProbabilityError("need at least one slot")
    if np.any(arr < -1e-12) or np.any(arr > 1 + 1e-12):
        raise ProbabilityError("slot probabilities must lie in [0, 1]")
    arr = np.clip(arr, 0.0, 1.0)
    pre0, pre1, pim0, pim1 = arr.T
    lp = np.log(np.maximum(pre0, _P_FLOOR)) + np.log(np.maximum(pim0, _P_FLOOR))
    L = lp.sum()
    one_err = pre1 * pim0 + pre0 * pim1
    return float(min(np.exp(L) + (one_err * np.exp(L - lp)).sum(), 1.0))


def block_error_prob_exact_oracle(slot_error_dists, epsilon_c: int) -> float:
    """Exact P[total bit errors <= epsilon_c] from full per-slot distributions.

    Dynamic programming over the slot error-count distributions; intended as a
    small-block validation oracle, hence the hard cap on total bits.
    """
    dists = [np.asarray(d, dtype=np.float64) for d in slot_error_dists]
    total_bits = sum(d.size - 1 for d in dists)
    if total_bits > 24:
        raise ProbabilityError(f"oracle limited to 24 coded bits, got {total_bits}")
    for d in dists:
        if np.any(d < -1e-12) or abs(d.sum() - 1.0) > 1e-9:
            raise ProbabilityError("each slot distribution must be a probability vector")
    dp = np.array([1.0])
    for d in dists:
        dp = np.convolve(dp, d)[: epsilon_c + 1]
    return float(dp.sum())


def _split_domain_point(x, n_antennas: int, c: Constellation):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    has_tau = c.M != 4
    tau = None
    if has_tau:
        tau, x = float(x[0]), x[1:]
    if x.size % (2 * n_antennas):
        raise ProbabilityError("domain point length inconsistent with 2N per slot")
    return x.reshape(-1, 2 * n_antennas), tau


def user_block_success(x, coded_bits, h_row, noise: EffectiveNoise,
                       c: Constellation) -> float:
    """Block success probability for one user at a stacked real domain point.

    x is the concatenated per-slot [Re x_t; Im x_t] vector, prefixed by tau
    for constellations with an inner threshold.
    """
    h_row = np.asarray(h_row).reshape(-1)
    x_slots, tau = _split_domain_point(x, h_row.size, c)
    model = BlockProbabilityModel(h_row[None, :], coded_bits, c, noise)
    P, _ = model.objectives(x_slots, tau)
    return float(P[0])


def block_success_grad(x, coded_bits, h_row, noise: EffectiveNoise,
                       c: Constellation) -> np.ndarray:
    """Analytic gradient of user_block_success w.r.t. the same domain point."""
    h_row = np.asarray(h_row).reshape(-1)
    x_slots, tau = _split_domain_point(x, h_row.size, c)
    model = BlockProbabilityModel(h_row[None, :], coded_bits, c, noise)
    _, cache = model.objectives(x_slots, tau)
    G, g_tau = model.grad(x_slots, tau, 0, cache)
    flat = G.reshape(-1)
    if c.M == 4:
        return flat
    return np.concatenate([[g_tau], flat])
