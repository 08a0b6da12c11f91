import math

import numpy as np
import pytest

from gridmarket.model import baseline_state, compute_trade_mask, der_revenue, load_expense
from gridmarket.transform import (Weights, active_pairs, der_term_values,
                                  jensen_surrogate_der, jensen_surrogate_load,
                                  load_term_values, log_domain_der_objective,
                                  log_domain_load_objective, posy_coefficients,
                                  posy_der_objective, posy_load_objective,
                                  scalarized_gradient, scalarized_objective,
                                  state_from_active,
                                  surrogate_scalarized_objective)
from conftest import make_instance, random_feasible_state


class TestWeights:
    def test_valid(self):
        Weights([0.1, 0.3, 0.6]).validate(1, 1)

    def test_wrong_length(self):
        with pytest.raises(ValueError, match="length"):
            Weights([0.5, 0.5]).validate(1, 1)

    def test_not_normalized(self):
        with pytest.raises(ValueError, match="sum to 1"):
            Weights([0.1, 0.3, 0.7]).validate(1, 1)

    def test_out_of_range(self):
        with pytest.raises(ValueError, match="0, 1"):
            Weights([-0.2, 0.6, 0.6]).validate(1, 1)


class TestPosyCoefficients:
    def test_structure(self, inst_2x2):
        c = posy_coefficients(inst_2x2)
        assert c.der_exponents[0] == 0.0 and np.all(c.der_exponents[1:] == 1.0)
        assert np.all(c.der_coeffs[:, 0] == inst_2x2.pcc_buy_price)
        assert np.all(c.der_coeffs[:, 1:] == 1.0)
        assert c.load_exponents[0] == 0.0 and np.all(c.load_exponents[1:] == 1.0)
        assert np.all(c.load_coeffs[:, 0] == inst_2x2.pcc_sell_price)


class TestPosynomialForms:
    def test_der_small_example(self):
        inst = make_instance([10.0], [5.0], gamma=[1.0])
        c = posy_coefficients(inst)
        val = posy_der_objective(inst, c, np.array([2.0]), np.array([6.0, 4.0]), 0)
        assert val == pytest.approx(14.0)

    def test_exponent_zero_kills_dummy_price(self):
        inst = make_instance([10.0], [5.0])
        c = posy_coefficients(inst)
        val = posy_der_objective(inst, c, np.array([33.0]), np.array([10.0, 0.0]), 0)
        assert val == pytest.approx(20.0 * 10.0)

    def test_matches_der_revenue(self, inst_2x2, rng):
        c = posy_coefficients(inst_2x2)
        for _ in range(50):
            st = random_feasible_state(inst_2x2, rng)
            for i in range(2):
                direct = der_revenue(inst_2x2, st, i)
                posy = posy_der_objective(inst_2x2, c, st.prices[i], st.alloc[i], i)
                assert posy == pytest.approx(direct, rel=1e-12)

    def test_load_matches_expense(self, inst_2x2, rng):
        c = posy_coefficients(inst_2x2)
        for _ in range(50):
            st = random_feasible_state(inst_2x2, rng)
            for i in range(2):
                direct = load_expense(inst_2x2, st, i)
                posy = posy_load_objective(inst_2x2, c, st.prices[:, i],
                                           st.dem[i], st.disc[i], i)
                assert posy == pytest.approx(direct, rel=1e-12)


class TestLogDomainForms:
    def test_exp_log_identity(self):
        inst = make_instance([10.0], [5.0], gamma=[1.0])
        c = posy_coefficients(inst)
        val = log_domain_der_objective(inst, c, np.array([2.0]),
                                       np.array([1.0, 3.0]), 0, {1})
        assert val == pytest.approx(6.0)

    def test_pcc_only_support(self):
        inst = make_instance([10.0], [5.0])
        c = posy_coefficients(inst)
        val = log_domain_der_objective(inst, c, np.array([2.0]),
                                       np.array([10.0, 0.0]), 0, {0})
        assert val == pytest.approx(200.0)

    def test_full_support_matches_posynomial(self, inst_2x2, rng):
        c = posy_coefficients(inst_2x2)
        full_d = range(inst_2x2.num_loads + 1)
        full_l = range(inst_2x2.num_ders + 1)
        for _ in range(50):
            st = random_feasible_state(inst_2x2, rng)
            for i in range(2):
                posy = posy_der_objective(inst_2x2, c, st.prices[i], st.alloc[i], i)
                logd = log_domain_der_objective(inst_2x2, c, st.prices[i],
                                                st.alloc[i], i, full_d)
                assert logd == pytest.approx(posy, rel=1e-12)
                posy_l = posy_load_objective(inst_2x2, c, st.prices[:, i],
                                             st.dem[i], st.disc[i], i)
                logd_l = log_domain_load_objective(inst_2x2, c, st.prices[:, i],
                                                   st.dem[i], st.disc[i], i, full_l)
                assert logd_l == pytest.approx(posy_l, rel=1e-12)

    def test_nonpositive_on_support_raises(self):
        inst = make_instance([10.0], [5.0])
        c = posy_coefficients(inst)
        with pytest.raises(ValueError, match="nonpositive"):
            log_domain_der_objective(inst, c, np.array([2.0]),
                                     np.array([10.0, 0.0]), 0, {0, 1})


class TestScalarizedObjective:
    def test_pcc_term_zero_at_target(self):
        inst = make_instance([10.0], [5.0], target=[[2.0]])
        lam = Weights([0.0, 0.0, 1.0])
        ap = active_pairs(compute_trade_mask(inst))
        st = state_from_active(inst, ap, np.array([30.0]), np.array([2.0]),
                               np.array([0.0]))
        assert scalarized_objective(inst, lam, st) == pytest.approx(0.0, abs=1e-15)

    def test_uniform_weights_baseline(self):
        inst = make_instance([10.0], [5.0], target=[[5.0]])
        lam = Weights(np.full(3, 1.0 / 3.0))
        val = scalarized_objective(inst, lam, baseline_state(inst))
        assert val == pytest.approx(8.4077145171, abs=1e-9)

    def test_scaling_shifts_log_terms_additively(self, inst_2x2, rng):
        # scaling a full allocation row scales its revenue linearly, so the
        # log moves by an additive constant
        from gridmarket.transform import posy_coefficients as pc
        c = pc(inst_2x2)
        st = random_feasible_state(inst_2x2, rng)
        kappa = 1.7
        for i in range(2):
            base = posy_der_objective(inst_2x2, c, st.prices[i], st.alloc[i], i)
            scaled = posy_der_objective(inst_2x2, c, st.prices[i],
                                        kappa * st.alloc[i], i)
            assert math.log(scaled) - math.log(base) == pytest.approx(
                math.log(kappa), rel=1e-12)

    def test_permutation_symmetry(self, rng):
        inst = make_instance([30.0, 20.0], [60.0, 80.0], cap=[55.0, 60.0],
                             alpha=0.25, target=[[5.0, 3.0], [4.0, 6.0]])
        st = random_feasible_state(inst, rng)
        lam = Weights(np.array([0.05, 0.10, 0.15, 0.20, 0.24, 0.26]))
        val = scalarized_objective(inst, lam, st)

        # swap the two DERs everywhere, weights included
        inst_sw = make_instance([20.0, 30.0], [60.0, 80.0], cap=[60.0, 55.0],
                                alpha=0.25, target=[[3.0, 5.0], [6.0, 4.0]])
        from gridmarket.model import TradeState
        st_sw = TradeState(st.prices[::-1], st.alloc[::-1],
                           st.dem[:, [0, 2, 1]], st.disc[:, ::-1])
        lam_sw = Weights(np.array([0.10, 0.05, 0.15, 0.20, 0.24, 0.26]))
        assert scalarized_objective(inst_sw, lam_sw, st_sw) == pytest.approx(
            val, rel=1e-12)

    def test_nonpositive_expense_raises(self):
        inst = make_instance([10.0], [5.0], alpha=1.0)
        from gridmarket.model import TradeState
        # full discount and full trade drive the expense to zero
        st = TradeState([[30.0]], [[5.0, 5.0]], [[0.0, 5.0]], [[30.0]])
        lam = Weights([0.2, 0.5, 0.3])
        with pytest.raises(ValueError, match="nonpositive buyer"):
            scalarized_objective(inst, lam, st)


class TestScalarizedGradient:
    def test_matches_finite_differences(self, inst_2x2, rng):
        lam = Weights(np.array([0.05, 0.10, 0.15, 0.20, 0.24, 0.26]))
        mask = compute_trade_mask(inst_2x2)
        ap = active_pairs(mask)

        def value(x):
            n = ap.n
            st = state_from_active(inst_2x2, ap, x[:n], x[n:2 * n], x[2 * n:])
            return scalarized_objective(inst_2x2, lam, st)

        worst = 0.0
        for _ in range(25):
            st = random_feasible_state(inst_2x2, rng)
            from gridmarket.transform import active_from_state
            p, d, sig = active_from_state(inst_2x2, ap, st)
            x = np.concatenate([p, d, sig])
            g = scalarized_gradient(inst_2x2, lam, st, mask)
            for i in range(x.size):
                h = 1e-6 * max(abs(x[i]), 1.0)
                xp, xm = x.copy(), x.copy()
                xp[i] += h
                xm[i] -= h
                fd = (value(xp) - value(xm)) / (2 * h)
                worst = max(worst, abs(g[i] - fd) / max(abs(fd), abs(g[i]), 1e-6))
        assert worst < 1e-4

    def test_pcc_gradient_zero_at_target(self):
        inst = make_instance([10.0], [5.0], target=[[2.0]])
        lam = Weights([0.0, 0.0, 1.0])
        mask = compute_trade_mask(inst)
        ap = active_pairs(mask)
        st = state_from_active(inst, ap, np.array([30.0]), np.array([2.0]),
                               np.array([0.5]))
        g = scalarized_gradient(inst, lam, st, mask)
        assert g[1] == pytest.approx(0.0, abs=1e-12)  # demand coordinate

    def test_demand_gradient_after_slack_elimination(self):
        # with weight only on the seller, d u/d d = -(p - gamma)/u
        inst = make_instance([10.0], [5.0], target=[[0.0]])
        lam = Weights([1.0, 0.0, 0.0])
        mask = compute_trade_mask(inst)
        ap = active_pairs(mask)
        p, d = 30.0, 2.0
        st = state_from_active(inst, ap, np.array([p]), np.array([d]),
                               np.array([0.0]))
        g = scalarized_gradient(inst, lam, st, mask)
        u = der_revenue(inst, st, 0)
        assert g[1] == pytest.approx(-(p - 20.0) / u, rel=1e-12)


class TestJensenSurrogate:
    def test_inequality_direction(self, inst_1x1):
        y = np.array([2.0, 8.0])
        lhs = jensen_surrogate_der(inst_1x1, y) / y.size
        rhs = math.log(y.mean())
        assert lhs <= rhs

    def test_equality_at_equal_terms(self, inst_1x1):
        c = 3.7
        val = jensen_surrogate_der(inst_1x1, np.array([c, c]))
        assert val == pytest.approx(2 * math.log(c), rel=1e-12)

    def test_nonpositive_raises(self, inst_1x1):
        with pytest.raises(ValueError, match="nonpositive"):
            jensen_surrogate_der(inst_1x1, np.array([1.0, 0.0]))
        with pytest.raises(ValueError, match="nonpositive"):
            jensen_surrogate_load(inst_1x1, np.array([-1.0]))

    def test_term_values_feed_surrogate(self, inst_2x2, rng):
        c = posy_coefficients(inst_2x2)
        st = random_feasible_state(inst_2x2, rng)
        y = der_term_values(inst_2x2, c, st.prices[0], st.alloc[0], 0, {0, 1, 2})
        assert y.shape == (3,)
        assert jensen_surrogate_der(inst_2x2, y) == pytest.approx(
            np.log(y).sum(), rel=1e-14)
        z = load_term_values(inst_2x2, c, st.prices[:, 0], st.dem[0],
                             st.disc[0], 0, {0, 1, 2})
        assert np.all(z > 0)

    def test_jensen_holds_on_random_vectors(self, inst_1x1, rng):
        for _ in range(200):
            y = rng.uniform(0.01, 50.0, rng.integers(1, 6))
            assert jensen_surrogate_der(inst_1x1, y) <= \
                y.size * math.log(y.mean()) + 1e-12

    def test_grid_argmax_conservation(self, rng):
        # the surrogate's box-constrained maximizer also maximizes the plain
        # sum when the demand cap keeps the split on its boundary
        inst = make_instance([10.0], [4.0], alpha=0.2, cap=[70.0])
        lo, hi = 20.0, min(70.0, 50.0 / 0.8)
        ps = np.linspace(lo, hi, 101)
        hs = np.linspace(1e-3, 4.0, 101)
        pp, hh = np.meshgrid(ps, hs, indexing="ij")
        y0 = 20.0 * (10.0 - hh)
        y1 = pp * hh
        sum_y = y0 + y1
        sum_log = np.log(y0) + np.log(y1)
        assert np.argmax(sum_y) == np.argmax(sum_log)


class TestSurrogateScalarization:
    def test_finite_on_interior_state(self, inst_2x2, rng):
        lam = Weights(np.array([0.05, 0.10, 0.15, 0.20, 0.24, 0.26]))
        st = random_feasible_state(inst_2x2, rng)
        val = surrogate_scalarized_objective(inst_2x2, lam, st)
        assert math.isfinite(val)

    def test_infinite_when_slack_hits_zero(self, inst_2x2):
        lam = Weights(np.array([0.05, 0.10, 0.15, 0.20, 0.24, 0.26]))
        mask = compute_trade_mask(inst_2x2)
        ap = active_pairs(mask)
        # overrun DER 2's capacity so its PCC slack goes nonpositive
        d = np.array([15.0, 8.0, 15.0, 6.0])
        st = state_from_active(inst_2x2, ap, np.full(4, 30.0), d, np.zeros(4))
        assert surrogate_scalarized_objective(inst_2x2, lam, st) == math.inf
