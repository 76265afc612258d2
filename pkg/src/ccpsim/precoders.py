"""Transmit-signal designers: linear baselines, symbol-level precoding, and
channel-coded precoding (CCP).

Safety margins are reported as physical distances from the noiseless received
point to its nearest decision boundary. The per-slot margin maximization is
solved by eliminating the margin variable: with constraints homogeneous in
(x, margin), the optimum over the unit ball is v*/||v*|| where v* is the
least-norm point satisfying the margin-1 constraints, and the margin is
1/||v*|| (in units of half the constellation level spacing).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from cvxopt import matrix as _cvx_matrix
from cvxopt import solvers as _cvx_solvers

from .modulation import Constellation
from .probability import BlockProbabilityModel, EffectiveNoise

__all__ = [
    "CcpParams",
    "TransmitBlock",
    "PrecoderError",
    "SlpSolverError",
    "linear_precoder",
    "scale_to_power",
    "slp_slot",
    "slp_power_allocation",
    "slp_block",
    "ccp_repetition",
    "project_power",
    "ccp_ec1",
    "ccp_multibit",
    "x_slots_from_matrix",
    "matrix_from_x_slots",
]

_cvx_solvers.options.update(
    {"show_progress": False, "abstol": 1e-10, "reltol": 1e-9, "feastol": 1e-9}
)

_POWER_RTOL = 1e-9


class PrecoderError(ValueError):
    pass


class SlpSolverError(RuntimeError):
    """Margin-maximization subproblem did not reach an acceptable solution."""


@dataclass(frozen=True)
class CcpParams:
    """Hyperparameters of the projected-gradient designers.

    Defaults: step alpha decaying from alpha0 by eta after kappa_max
    non-improving iterations until alpha_min, capped at ell_max iterations;
    zeta/xi grow/shrink the shared threshold in the sub-block designer;
    n_sb sub-blocks partition the transmission block.
    """

    alpha0: float = 1.0
    alpha_min: float = 1e-5
    eta: float = 0.95
    kappa_max: int = 50
    ell_max: int = 5000
    zeta: float = 1.05
    xi: float = 0.99
    n_sb: int = 1

    def __post_init__(self):
        if not self.alpha0 > self.alpha_min > 0:
            raise PrecoderError("need alpha0 > alpha_min > 0")
        if not 0 < self.eta < 1:
            raise PrecoderError("need 0 < eta < 1")
        if not 0 < self.xi < 1 < self.zeta:
            raise PrecoderError("need xi < 1 < zeta")
        if self.kappa_max < 1 or self.ell_max < 0 or self.n_sb < 1:
            raise PrecoderError("kappa_max >= 1, ell_max >= 0, n_sb >= 1 required")


@dataclass(eq=False)
class TransmitBlock:
    """Designed transmit matrix with its power budget and receiver threshold."""

    X: np.ndarray
    P: float
    tau: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        used = float(np.linalg.norm(self.X) ** 2)
        if used > self.P * (1 + _POWER_RTOL):
            raise PrecoderError(
                f"block power {used:.6g} exceeds budget {self.P:.6g}")
        if self.tau is not None and self.tau <= 0:
            raise PrecoderError("tau must be positive when present")


def x_slots_from_matrix(X: np.ndarray) -> np.ndarray:
    """(N, L_s) complex transmit matrix -> (L_s, 2N) stacked real slots."""
    X = np.asarray(X)
    return np.concatenate([X.real, X.imag], axis=0).T.copy()


def matrix_from_x_slots(x_slots: np.ndarray) -> np.ndarray:
    """(L_s, 2N) stacked real slots -> (N, L_s) complex transmit matrix."""
    n = x_slots.shape[1] // 2
    return (x_slots[:, :n] + 1j * x_slots[:, n:]).T.copy()


def project_power(v: np.ndarray, P: float) -> np.ndarray:
    """Euclidean projection onto the ball of squared radius P."""
    v = np.asarray(v, dtype=np.float64)
    nrm2 = float((v**2).sum())
    if nrm2 <= P:
        return v
    return np.sqrt(P) * v / np.sqrt(nrm2)


# ---------------------------------------------------------------------------
# Linear precoders
# ---------------------------------------------------------------------------

def linear_precoder(H: np.ndarray, kind: str, sigma: float = 0.0,
                    rho: float = 1.0) -> np.ndarray:
    """Unscaled MRT/ZF/MMSE precoding matrix (N x K).

    The caller normalizes per block via scale_to_power so the realized
    transmit energy matches the budget exactly.
    """
    H = np.asarray(H, dtype=np.complex128)
    K, N = H.shape
    Hh = H.conj().T
    if kind == "mrt":
        return Hh
    if kind == "zf":
        gram = H @ Hh
        cond = np.linalg.cond(gram)
        if not np.isfinite(cond) or cond > 1e12:
            raise PrecoderError(
                f"channel too ill-conditioned for ZF (cond(HH^H) = {cond:.3g})")
        return Hh @ np.linalg.inv(gram)
    if kind == "mmse":
        # (H^H H + reg I_N)^{-1} H^H written in its K x K push-through form,
        # which stays well conditioned as the regularizer vanishes
        reg = K * sigma**2 / rho
        return Hh @ np.linalg.inv(H @ Hh + reg * np.eye(K))
    raise PrecoderError(f"unknown linear precoder kind {kind!r}")


def scale_to_power(P_mat: np.ndarray, S: np.ndarray, power: float):
    """Scale so that ||beta * P_mat @ S||_F^2 equals the block budget."""
    X = P_mat @ S
    energy = np.linalg.norm(X) ** 2
    if energy == 0:
        raise PrecoderError("precoded block has zero energy")
    beta = np.sqrt(power / energy)
    return beta * X, beta


# ---------------------------------------------------------------------------
# Symbol-level precoding
# ---------------------------------------------------------------------------

def _real_rows(H: np.ndarray):
    H = np.asarray(H, dtype=np.complex128)
    return np.hstack([H.real, -H.imag]), np.hstack([H.imag, H.real])


def _min_norm_point(A_in, b_in, A_eq=None, b_eq=None) -> np.ndarray:
    """argmin ||v||^2 subject to A_in v >= b_in and A_eq v = b_eq."""
    if A_in is None or np.size(A_in) == 0:
        # equalities only: the least-norm solution of the linear system
        return np.linalg.lstsq(np.asarray(A_eq, dtype=np.float64),
                               np.asarray(b_eq, dtype=np.float64), rcond=None)[0]
    n = A_in.shape[1]
    P = _cvx_matrix(2.0 * np.eye(n))
    q = _cvx_matrix(np.zeros(n))
    G = _cvx_matrix(-np.ascontiguousarray(A_in, dtype=np.float64))
    h = _cvx_matrix(-np.ascontiguousarray(b_in, dtype=np.float64))
    args = [P, q, G, h]
    if A_eq is not None and len(A_eq):
        args += [_cvx_matrix(np.ascontiguousarray(A_eq, dtype=np.float64)),
                 _cvx_matrix(np.ascontiguousarray(b_eq, dtype=np.float64))]
    try:
        sol = _cvx_solvers.qp(*args)
    except ValueError:
        # equality block rank-deficient for this instance: enforce it as a
        # pair of inequalities with a small slack instead
        if A_eq is None or not len(A_eq):
            raise
        slack = 1e-8
        A2 = np.vstack([A_in, A_eq, -np.asarray(A_eq)])
        b2 = np.concatenate([b_in, np.asarray(b_eq) - slack, -np.asarray(b_eq) - slack])
        return _min_norm_point(A2, b2)
    v = np.array(sol["x"]).ravel()
    ineq_viol = float(np.max(b_in - A_in @ v, initial=0.0))
    eq_viol = 0.0
    if A_eq is not None and len(A_eq):
        eq_viol = float(np.max(np.abs(A_eq @ v - b_eq)))
    if sol["status"] != "optimal" and (ineq_viol > 1e-7 or eq_viol > 1e-7):
        raise SlpSolverError(
            f"margin subproblem ended with status {sol['status']!r} "
            f"(ineq violation {ineq_viol:.2e}, eq violation {eq_viol:.2e})")
    return v


def _slot_constraints(Gre, Gim, s_t: np.ndarray, c: Constellation):
    """Margin-1 constraint rows for one slot in the scaled-constellation form.

    Outer levels give inequalities sign(v) g^T x >= |v|; inner levels pin the
    received coordinate with an equality g^T x = v.
    """
    max_re = np.max(np.abs(c.real_levels))
    max_im = np.max(np.abs(c.imag_levels))
    A_in, b_in, A_eq, b_eq = [], [], [], []
    for k in range(len(s_t)):
        for row, val, vmax in ((Gre[k], s_t[k].real, max_re),
                               (Gim[k], s_t[k].imag, max_im)):
            if abs(val) >= vmax - 1e-12:
                A_in.append(np.sign(val) * row)
                b_in.append(abs(val))
            else:
                A_eq.append(row)
                b_eq.append(val)
    return (np.array(A_in), np.array(b_in),
            np.array(A_eq) if A_eq else None,
            np.array(b_eq) if b_eq else None)


def slp_slot(H: np.ndarray, s_t: np.ndarray, c: Constellation):
    """Max-margin transmit direction for one slot of data symbols.

    Returns (x_unit, margin): a unit-power complex direction and the physical
    safety margin it achieves (distance to the nearest decision boundary,
    which scales linearly with allocated amplitude).
    """
    H = np.atleast_2d(np.asarray(H, dtype=np.complex128))
    Gre, Gim = _real_rows(H)
    A_in, b_in, A_eq, b_eq = _slot_constraints(Gre, Gim, np.atleast_1d(s_t), c)
    v = _min_norm_point(A_in, b_in, A_eq, b_eq)
    nrm = np.linalg.norm(v)
    if nrm == 0:
        raise SlpSolverError("degenerate margin subproblem (zero solution)")
    n = H.shape[1]
    unit = v / nrm
    x_unit = unit[:n] + 1j * unit[n:]
    return x_unit, float(c.min_level / nrm)


def slp_power_allocation(margins, P: float) -> np.ndarray:
    """Per-slot amplitudes equalizing the block-wide worst margin.

    Closed form delta* = sqrt(P / sum margins^-2), rho_t = delta*/margin_t;
    nonpositive margins fall back to a uniform split.
    """
    margins = np.asarray(margins, dtype=np.float64)
    if margins.size == 0:
        raise PrecoderError("need at least one slot margin")
    if np.any(margins <= 0):
        return np.full(margins.size, np.sqrt(P / margins.size))
    delta_star = np.sqrt(P / np.sum(margins**-2.0))
    return delta_star / margins


def slp_block(H: np.ndarray, S: np.ndarray, c: Constellation, P: float) -> TransmitBlock:
    """Conventional symbol-level precoding of a whole block.

    Solves the per-slot margin problems, equalizes margins across the block
    under the power budget, and derives the receiver threshold from the
    resulting constellation scale.
    """
    H = np.atleast_2d(np.asarray(H, dtype=np.complex128))
    S = np.atleast_2d(np.asarray(S))
    L_s = S.shape[1]
    dirs = np.zeros((H.shape[1], L_s), dtype=np.complex128)
    margins = np.zeros(L_s)
    for t in range(L_s):
        dirs[:, t], margins[t] = slp_slot(H, S[:, t], c)
    rho = slp_power_allocation(margins, P)
    X = dirs * rho
    scale = float(np.min(rho * margins)) / c.min_level
    tau = None
    if c.nominal_tau is not None:
        tau = max(scale, 1e-9) * c.nominal_tau
    return TransmitBlock(X=X, P=P, tau=tau,
                         meta={"margins": margins, "rho": rho, "scale": scale})


def ccp_repetition(H: np.ndarray, info_bits: np.ndarray, P: float,
                   n_rep: int) -> TransmitBlock:
    """Margin-maximizing design for repetition-coded bits with diagonal signaling.

    Each information bit occupies n_rep consecutive slots; slot t for bit b is
    constrained to the half-space (1-2b)(Re z + Im z)/sqrt(2) >= margin, the
    enlarged region spanned by the two codeword points. The matched receiver
    takes one diagonal decision per slot and majority-votes per bit.
    """
    H = np.atleast_2d(np.asarray(H, dtype=np.complex128))
    info_bits = np.atleast_2d(np.asarray(info_bits))
    if n_rep < 1:
        raise PrecoderError("repetition length must be >= 1")
    Gre, Gim = _real_rows(H)
    diag_rows = (Gre + Gim) / np.sqrt(2.0)
    n = H.shape[1]
    L_info = info_bits.shape[1]
    bit_dirs = np.zeros((n, L_info), dtype=np.complex128)
    bit_margins = np.zeros(L_info)
    for m in range(L_info):
        signs = 1.0 - 2.0 * info_bits[:, m].astype(np.float64)
        v = _min_norm_point(signs[:, None] * diag_rows, np.ones(len(signs)))
        nrm = np.linalg.norm(v)
        unit = v / nrm
        bit_dirs[:, m] = unit[:n] + 1j * unit[n:]
        bit_margins[m] = 1.0 / nrm
    dirs = np.repeat(bit_dirs, n_rep, axis=1)
    margins = np.repeat(bit_margins, n_rep)
    rho = slp_power_allocation(margins, P)
    return TransmitBlock(X=dirs * rho, P=P, tau=None,
                         meta={"margins": margins, "rho": rho, "n_rep": n_rep})


# ---------------------------------------------------------------------------
# Projected-gradient channel-coded precoding
# ---------------------------------------------------------------------------

def _pg_ascent(model: BlockProbabilityModel, x_slots, tau, power: float,
               params: CcpParams, optimize_tau: bool, tau_floor: float):
    """Worst-user projected-gradient ascent with best-so-far tracking.

    Per iteration: pick the user with the lowest block success probability,
    step along its gradient, project the signal back into the power ball and
    clamp the threshold; decay the step after kappa_max non-improving
    iterations, restoring the best point, until alpha_min or ell_max.

    The step-size unit is calibrated once from the initial gradient so that
    alpha = 1 moves the iterate by about a tenth of the power-sphere radius.
    The raw channel entries are tiny under realistic path loss, so an
    uncalibrated unit step either vanishes relative to the sphere or
    saturates every slot; calibration makes the stated alpha schedule
    scale-free.
    """
    xs = np.array(x_slots, dtype=np.float64)
    best_xs, best_tau, p_best = xs.copy(), tau, 0.0
    alpha = params.alpha0
    kappa = 0
    ell = 0
    step_unit = None
    while True:
        P_users, cache = model.objectives(xs, tau)
        khat = int(np.argmin(P_users))
        p_min = float(P_users[khat])
        if p_min > p_best:
            p_best = p_min
            best_xs, best_tau = xs.copy(), tau
            kappa = 0
        else:
            kappa += 1
            if kappa == params.kappa_max:
                alpha *= params.eta
                if alpha <= params.alpha_min:
                    break
                kappa = 0
                xs, tau = best_xs.copy(), best_tau
        if ell == params.ell_max:
            break
        G, g_tau = model.grad(xs, tau, khat, cache)
        if step_unit is None:
            g0 = np.linalg.norm(G)
            step_unit = 0.1 * np.sqrt(power) / g0 if g0 > 0 else 1.0
        xs = project_power((xs + alpha * step_unit * G).reshape(-1),
                           power).reshape(xs.shape)
        if optimize_tau:
            tau = max(tau + alpha * step_unit * g_tau, tau_floor)
        ell += 1
    return best_xs, best_tau, p_best, ell


def _check_init_power(X, power):
    used = float(np.linalg.norm(X) ** 2)
    if used > power * (1 + _POWER_RTOL):
        raise PrecoderError(
            f"initialization power {used:.6g} exceeds budget {power:.6g}")


def ccp_ec1(H: np.ndarray, coded_bits: np.ndarray, power: float,
            c: Constellation, params: CcpParams, noise: EffectiveNoise,
            init: TransmitBlock, *, optimize_tau: bool | None = None) -> TransmitBlock:
    """Single-block design maximizing the worst-user P[<= 1 coded-bit error].

    4-QAM optimizes the stacked real transmit vector; 8/16-QAM additionally
    ascends the shared decision threshold unless optimize_tau is False. Pass
    the channel estimate and an EffectiveNoise with eps2 > 0 for the robust
    variant.
    """
    H = np.atleast_2d(np.asarray(H, dtype=np.complex128))
    if optimize_tau is None:
        optimize_tau = c.M != 4
    _check_init_power(init.X, power)
    tau = init.tau if c.M != 4 else None
    if c.M != 4 and (tau is None or tau <= 0):
        raise PrecoderError("initialization must carry tau > 0 for this constellation")
    model = BlockProbabilityModel(H, coded_bits, c, noise)
    tau_floor = 1e-3 * c.nominal_tau if c.nominal_tau is not None else 0.0
    best_xs, best_tau, p_best, iters = _pg_ascent(
        model, x_slots_from_matrix(init.X), tau, power, params, optimize_tau,
        tau_floor)
    return TransmitBlock(X=matrix_from_x_slots(best_xs), P=power, tau=best_tau,
                         meta={"p_min": p_best, "iterations": iters})


def _sub_block_slices(L_s: int, n_sb: int):
    """Slot ranges per sub-block; the last one absorbs any remainder."""
    if n_sb > L_s:
        raise PrecoderError(f"cannot split {L_s} slots into {n_sb} sub-blocks")
    base = L_s // n_sb
    bounds = [i * base for i in range(n_sb)] + [L_s]
    return [(bounds[i], bounds[i + 1]) for i in range(n_sb)]


def ccp_multibit(H: np.ndarray, coded_bits: np.ndarray, power: float,
                 c: Constellation, params: CcpParams, noise: EffectiveNoise,
                 init: TransmitBlock) -> TransmitBlock:
    """Sub-blocked design for codes correcting more than one bit error.

    The block splits into params.n_sb sub-blocks, each granted a power budget
    proportional to its slot count and designed for at most one bit error.
    For thresholded constellations a single shared threshold is grown by zeta
    while the worst sub-block probability improves and otherwise shrunk by xi
    until it falls back to the best accepted value.
    """
    H = np.atleast_2d(np.asarray(H, dtype=np.complex128))
    coded_bits = np.atleast_2d(np.asarray(coded_bits))
    bps = c.bits_per_symbol
    L_s = coded_bits.shape[1] // bps
    _check_init_power(init.X, power)
    slices = _sub_block_slices(L_s, params.n_sb)
    budgets = [power * (hi - lo) / L_s for lo, hi in slices]
    models = [BlockProbabilityModel(H, coded_bits[:, lo * bps: hi * bps], c, noise)
              for lo, hi in slices]
    # block-level power allocation need not respect the per-sub-block budgets,
    # so initialization slices exceeding theirs are projected back in
    init_xs = []
    for (lo, hi), budget in zip(slices, budgets):
        xs = x_slots_from_matrix(init.X[:, lo:hi])
        if (xs**2).sum() > budget * (1 + _POWER_RTOL):
            xs = project_power(xs.reshape(-1), budget).reshape(xs.shape)
        init_xs.append(xs)
    tau_floor = 1e-3 * c.nominal_tau if c.nominal_tau is not None else 0.0

    if c.M == 4:
        parts, p_mins, iters = [], [], 0
        for model, xs, budget in zip(models, init_xs, budgets):
            best_xs, _, p_best, it = _pg_ascent(model, xs, None, budget, params,
                                                False, tau_floor)
            parts.append(matrix_from_x_slots(best_xs))
            p_mins.append(p_best)
            iters += it
        return TransmitBlock(X=np.concatenate(parts, axis=1), P=power, tau=None,
                             meta={"p_min": min(p_mins), "iterations": iters,
                                   "n_sb": params.n_sb})

    tau_star = init.tau
    if tau_star is None or tau_star <= 0:
        raise PrecoderError("initialization must carry tau > 0 for this constellation")
    xs_star = [xs.copy() for xs in init_xs]
    p_star = min(float(model.objectives(xs, tau_star)[0].min())
                 for model, xs in zip(models, xs_star))
    tau = params.zeta * tau_star
    accepted_taus = [tau_star]
    iters = 0
    while True:
        cand_xs, cand_p = [], []
        for model, xs, budget in zip(models, xs_star, budgets):
            best_xs, _, p_best, it = _pg_ascent(model, xs, tau, budget, params,
                                                False, tau_floor)
            cand_xs.append(best_xs)
            cand_p.append(p_best)
            iters += it
        p_min = min(cand_p)
        if p_min <= p_star:
            tau = params.xi * tau
            if tau <= tau_star:
                break
        else:
            p_star, xs_star, tau_star = p_min, cand_xs, tau
            accepted_taus.append(tau)
            tau = params.zeta * tau
    X = np.concatenate([matrix_from_x_slots(xs) for xs in xs_star], axis=1)
    return TransmitBlock(X=X, P=power, tau=tau_star,
                         meta={"p_min": p_star, "iterations": iters,
                               "n_sb": params.n_sb, "accepted_taus": accepted_taus})
