import time

import numpy as np
import pytest
from scipy.special import ndtr

from ccpsim.modulation import build_constellation, modulate
from ccpsim.precoders import (
    CcpParams,
    PrecoderError,
    TransmitBlock,
    ccp_ec1,
    ccp_multibit,
    ccp_repetition,
    linear_precoder,
    matrix_from_x_slots,
    project_power,
    scale_to_power,
    slp_block,
    slp_power_allocation,
    slp_slot,
    x_slots_from_matrix,
)
from ccpsim.probability import EffectiveNoise

C4 = build_constellation(4)
C16 = build_constellation(16)


def rand_channel(rng, K, N, scale=1.0):
    return scale * (rng.standard_normal((K, N)) + 1j * rng.standard_normal((K, N)))


def slot_margin(H, x, s, c):
    """Physical margin of a noiseless slot: worst distance to a decision boundary
    of the constellation scaled to match the intended point."""
    z = H @ x
    vals = []
    max_re = np.max(np.abs(c.real_levels))
    max_im = np.max(np.abs(c.imag_levels))
    for k in range(len(s)):
        for got, want, vmax in ((z[k].real, s[k].real, max_re),
                                (z[k].imag, s[k].imag, max_im)):
            if abs(want) >= vmax - 1e-12:
                vals.append(np.sign(want) * got / abs(want))
            else:
                vals.append(got / want)  # equality slots must sit on the point
    return min(vals) * c.min_level


class TestLinearPrecoders:
    def test_zf_inverts_channel(self):
        rng = np.random.default_rng(0)
        H = rand_channel(rng, 3, 5)
        P = linear_precoder(H, "zf")
        np.testing.assert_allclose(H @ P, np.eye(3), atol=1e-9)

    def test_zf_interference_nulling(self):
        rng = np.random.default_rng(1)
        H = rand_channel(rng, 4, 4)
        P = linear_precoder(H, "zf")
        G = H @ P
        off = G - np.diag(np.diag(G))
        assert np.abs(off).max() <= 1e-9 * np.linalg.norm(G)

    def test_mmse_approaches_zf(self):
        rng = np.random.default_rng(2)
        H = rand_channel(rng, 3, 4)
        P_zf = linear_precoder(H, "zf")
        P_mmse = linear_precoder(H, "mmse", sigma=1e-6, rho=1.0)
        norm = lambda A: A / np.linalg.norm(A)
        assert np.linalg.norm(norm(P_mmse) - norm(P_zf)) <= 1e-6

    def test_single_user_mrt_is_matched_filter(self):
        rng = np.random.default_rng(3)
        H = rand_channel(rng, 1, 4)
        P = linear_precoder(H, "mrt")
        np.testing.assert_allclose(P[:, 0], H.conj()[0])

    def test_zf_rank_deficiency(self):
        H = np.array([[1.0 + 0j, 2.0], [2.0, 4.0]])  # repeated direction
        with pytest.raises(PrecoderError):
            linear_precoder(H, "zf")

    def test_unknown_kind(self):
        with pytest.raises(PrecoderError):
            linear_precoder(np.eye(2, dtype=complex), "dpc")

    def test_scale_to_power_exact(self):
        rng = np.random.default_rng(4)
        H = rand_channel(rng, 2, 3)
        S = rand_channel(rng, 2, 10)
        X, beta = scale_to_power(linear_precoder(H, "mrt"), S, 7.0)
        assert np.linalg.norm(X) ** 2 == pytest.approx(7.0, rel=1e-12)
        assert beta > 0


class TestSlpSlot:
    def test_single_user_analytic(self):
        H = np.array([[1.0 + 0j]])
        s = np.array([(1 + 1j) / np.sqrt(2)])
        x, margin = slp_slot(H, s, C4)
        np.testing.assert_allclose(x, [(1 + 1j) / np.sqrt(2)], atol=1e-8)
        assert margin == pytest.approx(1 / np.sqrt(2), abs=1e-8)

    def test_feasibility_contract(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            K = N = int(rng.integers(1, 4))
            H = rand_channel(rng, K, N)
            s = modulate(rng.integers(0, 2, 2 * K).astype(np.uint8), C4).reshape(K)
            x, margin = slp_slot(H, s, C4)
            assert np.linalg.norm(x) <= 1 + 1e-9
            assert slot_margin(H, x, s, C4) >= margin - 1e-6

    def test_matches_random_search_oracle_4qam(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            K = N = 2
            H = rand_channel(rng, K, N)
            s = modulate(rng.integers(0, 2, 2 * K).astype(np.uint8), C4).reshape(K)
            _, margin = slp_slot(H, s, C4)
            oracle = self._search(H, s, C4, rng)
            assert margin == pytest.approx(oracle, abs=1e-3)

    def test_matches_random_search_oracle_16qam(self):
        rng = np.random.default_rng(7)
        for _ in range(3):
            K = N = 2
            H = rand_channel(rng, K, N)
            s = modulate(rng.integers(0, 2, 4 * K).astype(np.uint8), C16).reshape(K)
            x, margin = slp_slot(H, s, C16)
            oracle = self._search(H, s, C16, rng)
            assert margin == pytest.approx(oracle, abs=1e-3)

    @staticmethod
    def _search(H, s, c, rng, rounds=80, batch=4000):
        """Derivative-free search oracle, assembled independently of the solver.

        Without inner points: anneal over unit vectors maximizing the worst
        scaled constraint ratio. With inner (equality) points: anneal over the
        equality-feasible affine manifold minimizing the norm of the margin-1
        point, whose inverse is the achievable margin scale.
        """
        from scipy.linalg import lstsq, null_space

        N = H.shape[1]
        A_in, b_in, A_eq, b_eq = [], [], [], []
        for k in range(len(s)):
            g_re = np.concatenate([H[k].real, -H[k].imag])
            g_im = np.concatenate([H[k].imag, H[k].real])
            for row, val, levels in ((g_re, s[k].real, c.real_levels),
                                     (g_im, s[k].imag, c.imag_levels)):
                if abs(val) >= np.max(np.abs(levels)) - 1e-12:
                    A_in.append(np.sign(val) * row)
                    b_in.append(abs(val))
                else:
                    A_eq.append(row)
                    b_eq.append(val)
        A_in, b_in = np.array(A_in), np.array(b_in)

        if not A_eq:
            best = -np.inf
            best_u = None
            radius = 1.0
            for _ in range(rounds):
                if best_u is None:
                    cand = rng.standard_normal((batch, 2 * N))
                else:
                    cand = best_u + radius * rng.standard_normal((batch, 2 * N))
                cand /= np.linalg.norm(cand, axis=1, keepdims=True)
                vals = (cand @ A_in.T / b_in).min(axis=1)
                i = int(np.argmax(vals))
                if vals[i] > best:
                    best, best_u = float(vals[i]), cand[i]
                radius = max(radius * 0.85, 1e-4)
            return best * c.min_level

        A_eq, b_eq = np.array(A_eq), np.array(b_eq)
        v0 = lstsq(A_eq, b_eq)[0]
        W = null_space(A_eq)
        best = np.inf
        best_w = np.zeros(W.shape[1])
        radius = 4.0
        for _ in range(rounds):
            cand_w = best_w + radius * rng.standard_normal((batch, W.shape[1]))
            cand_v = v0 + cand_w @ W.T
            feas = (cand_v @ A_in.T >= b_in - 1e-12).all(axis=1)
            if feas.any():
                norms = np.linalg.norm(cand_v[feas], axis=1)
                i = int(np.argmin(norms))
                if norms[i] < best:
                    best = float(norms[i])
                    best_w = cand_w[feas][i]
                radius = max(radius * 0.8, 1e-5)
            else:
                radius *= 1.5
        return c.min_level / best


class TestPowerAllocation:
    def test_uniform_for_equal_margins(self):
        rho = slp_power_allocation(np.full(8, 0.3), P=2.0)
        np.testing.assert_allclose(rho, np.full(8, 0.5))

    def test_closed_form_example(self):
        rho = slp_power_allocation([1.0, 2.0], P=5.0)
        np.testing.assert_allclose(rho, [2.0, 1.0])
        # KKT: equalized products, active power constraint
        np.testing.assert_allclose(rho * [1.0, 2.0], [2.0, 2.0])

    def test_budget_exhausted_exactly(self):
        rng = np.random.default_rng(8)
        margins = rng.uniform(0.1, 3.0, 20)
        rho = slp_power_allocation(margins, P=4.2)
        assert np.sum(rho**2) == pytest.approx(4.2, abs=1e-12)

    def test_no_feasible_allocation_beats_optimum(self):
        rng = np.random.default_rng(9)
        margins = rng.uniform(0.2, 2.0, 10)
        P = 3.0
        rho = slp_power_allocation(margins, P)
        delta_star = np.min(rho * margins)
        for _ in range(2000):
            w = rng.random(10)
            cand = np.sqrt(P) * w / np.linalg.norm(w)
            assert np.min(cand * margins) <= delta_star + 1e-9

    def test_nonpositive_margin_fallback(self):
        rho = slp_power_allocation([0.5, -0.1, 0.2], P=3.0)
        np.testing.assert_allclose(rho, np.ones(3))

    def test_empty_rejected(self):
        with pytest.raises(PrecoderError):
            slp_power_allocation([], P=1.0)


class TestSlpBlock:
    def test_power_and_tau(self):
        rng = np.random.default_rng(10)
        H = rand_channel(rng, 2, 3)
        S = np.stack([modulate(rng.integers(0, 2, 4 * 6).astype(np.uint8), C16)
                      for _ in range(2)])
        blk = slp_block(H, S, C16, P=6.0)
        assert np.linalg.norm(blk.X) ** 2 == pytest.approx(6.0, rel=1e-9)
        assert blk.tau is not None and blk.tau > 0
        # inner points land on the scaled constellation: threshold separates levels
        scale = blk.meta["scale"]
        assert blk.tau == pytest.approx(scale * C16.nominal_tau)


class TestRepetitionDesign:
    def test_single_user_enlarged_margin(self):
        H = np.array([[1.0 + 0j]])
        blk = ccp_repetition(H, np.array([[0]]), P=1.0, n_rep=1)
        np.testing.assert_allclose(blk.X[:, 0], [(1 + 1j) / np.sqrt(2)], atol=1e-8)
        assert blk.meta["margins"][0] == pytest.approx(1.0, abs=1e-8)
        # strictly larger than the conventional margin for the same channel
        _, slp_margin = slp_slot(H, np.array([(1 + 1j) / np.sqrt(2)]), C4)
        assert blk.meta["margins"][0] > slp_margin

    def test_bit_flip_mirrors_design(self):
        rng = np.random.default_rng(11)
        H = rand_channel(rng, 2, 2)
        b0 = np.array([[0], [1]])
        b1 = 1 - b0
        X0 = ccp_repetition(H, b0, P=1.0, n_rep=1).X
        X1 = ccp_repetition(H, b1, P=1.0, n_rep=1).X
        np.testing.assert_allclose(X1, -X0, atol=1e-7)

    def test_feasible_at_returned_margin(self):
        rng = np.random.default_rng(12)
        H = rand_channel(rng, 3, 3)
        bits = rng.integers(0, 2, (3, 4))
        blk = ccp_repetition(H, bits, P=4.0, n_rep=3)
        assert blk.X.shape == (3, 12)
        Z = H @ blk.X
        rho = blk.meta["rho"]
        margins = blk.meta["margins"]
        for t in range(12):
            m = bits[:, t // 3]
            proj = (1 - 2 * m) * (Z[:, t].real + Z[:, t].imag) / np.sqrt(2)
            assert proj.min() >= rho[t] * margins[t] - 1e-6


class TestProjectPower:
    def test_inside_unchanged(self):
        v = np.array([0.3, -0.4])
        np.testing.assert_array_equal(project_power(v, 1.0), v)

    def test_radial_scaling(self):
        v = np.zeros(5)
        v[0] = 2 * np.sqrt(3.0)
        out = project_power(v, 3.0)
        np.testing.assert_allclose(out[0], np.sqrt(3.0))

    def test_idempotent(self):
        rng = np.random.default_rng(13)
        v = 10 * rng.standard_normal(8)
        once = project_power(v, 2.0)
        np.testing.assert_array_equal(project_power(once, 2.0), once)


class TestCcpEc1:
    def _setup(self, rng, K=2, N=2, L_s=4, M=4, sigma=0.6):
        c = build_constellation(M)
        H = rand_channel(rng, K, N)
        bits = rng.integers(0, 2, (K, L_s * c.bits_per_symbol)).astype(np.uint8)
        S = np.stack([modulate(bits[k], c) for k in range(K)])
        P = float(L_s)
        init = slp_block(H, S, c, P)
        return c, H, bits, P, init, EffectiveNoise(sigma=sigma)

    def test_never_worse_than_init(self):
        rng = np.random.default_rng(14)
        c, H, bits, P, init, noise = self._setup(rng)
        from ccpsim.probability import BlockProbabilityModel

        model = BlockProbabilityModel(H, bits, c, noise)
        p_init = model.objectives(x_slots_from_matrix(init.X), None)[0].min()
        blk = ccp_ec1(H, bits, P, c, CcpParams(ell_max=400), noise, init)
        assert blk.meta["p_min"] >= p_init - 1e-15

    def test_zero_iterations_returns_init(self):
        rng = np.random.default_rng(15)
        c, H, bits, P, init, noise = self._setup(rng)
        blk = ccp_ec1(H, bits, P, c, CcpParams(ell_max=0), noise, init)
        np.testing.assert_array_equal(blk.X, init.X)

    def test_power_constraint_respected(self):
        rng = np.random.default_rng(16)
        c, H, bits, P, init, noise = self._setup(rng)
        blk = ccp_ec1(H, bits, P, c, CcpParams(ell_max=300), noise, init)
        assert np.linalg.norm(blk.X) ** 2 <= P * (1 + 1e-9)

    def test_infeasible_init_rejected(self):
        rng = np.random.default_rng(17)
        c, H, bits, P, init, noise = self._setup(rng)
        big = TransmitBlock(X=init.X, P=P)
        with pytest.raises(PrecoderError):
            ccp_ec1(H, bits, P / 100, c, CcpParams(), noise, big)

    def test_matches_random_search_oracle(self):
        # K=N=1, two slots: compare against an annealed search on the power sphere
        rng = np.random.default_rng(18)
        h = 1.0 + 0.3j
        L_s, P, sigma = 2, 2.0, 0.8
        bits = np.array([1, 0, 0, 1], dtype=np.uint8)
        H = np.array([[h]])
        S = modulate(bits, C4).reshape(1, -1)
        init = slp_block(H, S, C4, P)
        noise = EffectiveNoise(sigma=sigma)
        blk = ccp_ec1(H, bits[None], P, C4, CcpParams(ell_max=4000), noise, init)

        batch = 200_000
        best_val, best_x = -np.inf, None
        radius = 1.0
        for _ in range(10):
            if best_x is None:
                cand = rng.standard_normal((batch, 4))
            else:
                cand = best_x + radius * rng.standard_normal((batch, 4))
            cand *= np.sqrt(P) / np.linalg.norm(cand, axis=1, keepdims=True)
            x = cand.reshape(batch, 2, 2)
            z_re = h.real * x[..., 0] - h.imag * x[..., 1]
            z_im = h.imag * x[..., 0] + h.real * x[..., 1]
            q1 = 2.0 * bits[0::2] - 1
            q2 = 2.0 * bits[1::2] - 1
            pre0 = ndtr(np.sqrt(2) * q1 * z_re / sigma)
            pim0 = ndtr(-np.sqrt(2) * q2 * z_im / sigma)
            A = np.maximum(pre0 * pim0, 1e-280)
            B = (1 - pre0) * pim0 + pre0 * (1 - pim0)
            vals = A.prod(axis=1) * (1 + (B / A).sum(axis=1))
            i = int(np.argmax(vals))
            if vals[i] > best_val:
                best_val, best_x = float(vals[i]), cand[i]
            radius *= 0.5
        assert blk.meta["p_min"] == pytest.approx(best_val, abs=1e-3)

    def test_16qam_optimizes_tau(self):
        rng = np.random.default_rng(19)
        c, H, bits, P, init, noise = self._setup(rng, M=16, sigma=0.4)
        blk = ccp_ec1(H, bits, P, c, CcpParams(ell_max=300), noise, init)
        assert blk.tau is not None and blk.tau > 0
        fixed = ccp_ec1(H, bits, P, c, CcpParams(ell_max=300), noise, init,
                        optimize_tau=False)
        assert fixed.tau == init.tau

    def test_iteration_cost_scales_linearly(self):
        rng = np.random.default_rng(20)
        params = CcpParams(ell_max=150, kappa_max=1000)
        noise = EffectiveNoise(sigma=0.5)

        def run(K, N, L_s):
            H = rand_channel(rng, K, N)
            bits = rng.integers(0, 2, (K, 2 * L_s)).astype(np.uint8)
            S = np.stack([modulate(bits[k], C4) for k in range(K)])
            init = slp_block(H, S, C4, float(L_s))
            best = np.inf
            for _ in range(3):
                t0 = time.perf_counter()
                blk = ccp_ec1(H, bits, float(L_s), C4, params, noise, init)
                best = min(best, (time.perf_counter() - t0) / max(blk.meta["iterations"], 1))
            return best

        base = run(4, 8, 96)
        assert run(8, 8, 96) <= 2.5 * base
        assert run(4, 16, 96) <= 2.5 * base
        assert run(4, 8, 192) <= 2.5 * base


class TestCcpMultibit:
    def _setup(self, rng, K=2, N=2, L_s=6, M=4, sigma=0.6):
        c = build_constellation(M)
        H = rand_channel(rng, K, N)
        bits = rng.integers(0, 2, (K, L_s * c.bits_per_symbol)).astype(np.uint8)
        S = np.stack([modulate(bits[k], c) for k in range(K)])
        P = float(L_s)
        init = slp_block(H, S, c, P)
        return c, H, bits, P, init, EffectiveNoise(sigma=sigma)

    def test_single_subblock_reduces_to_ec1(self):
        rng = np.random.default_rng(21)
        c, H, bits, P, init, noise = self._setup(rng)
        params = CcpParams(ell_max=200, n_sb=1)
        a = ccp_multibit(H, bits, P, c, params, noise, init)
        b = ccp_ec1(H, bits, P, c, params, noise, init, optimize_tau=False)
        np.testing.assert_allclose(a.X, b.X)
        assert a.meta["p_min"] == pytest.approx(b.meta["p_min"])

    def test_power_split_contract(self):
        rng = np.random.default_rng(22)
        c, H, bits, P, init, noise = self._setup(rng, L_s=7)
        params = CcpParams(ell_max=100, n_sb=3)
        blk = ccp_multibit(H, bits, P, c, params, noise, init)
        # 7 slots over 3 sub-blocks: 2 + 2 + 3, proportional budgets
        bounds = [(0, 2), (2, 4), (4, 7)]
        for lo, hi in bounds:
            used = np.linalg.norm(blk.X[:, lo:hi]) ** 2
            assert used <= P * (hi - lo) / 7 * (1 + 1e-9)
        assert np.linalg.norm(blk.X) ** 2 <= P * (1 + 1e-9)

    def test_tau_trajectory_nondecreasing(self):
        rng = np.random.default_rng(23)
        c, H, bits, P, init, noise = self._setup(rng, M=16, L_s=6, sigma=0.4)
        params = CcpParams(ell_max=150, n_sb=2)
        blk = ccp_multibit(H, bits, P, c, params, noise, init)
        taus = blk.meta["accepted_taus"]
        assert all(b >= a for a, b in zip(taus, taus[1:]))
        assert blk.tau == pytest.approx(taus[-1])

    def test_too_many_subblocks_rejected(self):
        rng = np.random.default_rng(24)
        c, H, bits, P, init, noise = self._setup(rng, L_s=4)
        with pytest.raises(PrecoderError):
            ccp_multibit(H, bits, P, c, CcpParams(n_sb=9), noise, init)


class TestTransmitBlockInvariants:
    def test_power_violation_rejected(self):
        with pytest.raises(PrecoderError):
            TransmitBlock(X=np.ones((2, 2), complex), P=1.0)

    def test_bad_tau_rejected(self):
        with pytest.raises(PrecoderError):
            TransmitBlock(X=np.zeros((2, 2), complex), P=1.0, tau=-0.5)

    def test_roundtrip_slots(self):
        rng = np.random.default_rng(25)
        X = rng.standard_normal((3, 5)) + 1j * rng.standard_normal((3, 5))
        np.testing.assert_allclose(matrix_from_x_slots(x_slots_from_matrix(X)), X)
