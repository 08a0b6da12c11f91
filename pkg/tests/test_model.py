import numpy as np
import pytest

from gridmarket.model import (TradeState, baseline_state, check_feasible,
                              compute_trade_mask, der_revenue, load_expense,
                              pcc_distance, rationality_check, report_distance,
                              validate_instance)
from conftest import make_instance, random_feasible_state


class TestValidateInstance:
    def test_valid_instance(self):
        inst = make_instance([10.0], [5.0], target=[[5.0]])
        assert validate_instance(inst) == []

    def test_discount_cap_out_of_range(self):
        inst = make_instance([10.0], [5.0], alpha=1.5, target=[[5.0]])
        problems = validate_instance(inst)
        assert any("discount_cap out of [0,1]" in p for p in problems)

    def test_target_exceeds_demand(self):
        inst = make_instance([10.0], [5.0], target=[[7.0]])
        problems = validate_instance(inst)
        assert any("target exceeds demand for load 1" in p for p in problems)

    def test_wrong_lengths_and_negatives(self):
        inst = make_instance([10.0, 3.0], [5.0], target=[[5.0, 0.0]])
        inst.surplus = np.array([10.0])
        assert any("surplus" in p for p in validate_instance(inst))
        inst2 = make_instance([-1.0], [5.0], target=[[0.0]])
        assert any("nonnegative" in p for p in validate_instance(inst2))

    def test_region_lengths(self):
        inst = make_instance([10.0], [5.0], target=[[0.0]], regions=((1, 2), (1,)))
        assert any("der_regions" in p for p in validate_instance(inst))


class TestObjectives:
    def test_der_revenue_small(self):
        # one 4 kWh trade at price 2, remainder to the PCC at price 1
        inst = make_instance([10.0], [5.0], gamma=[1.0])
        st = TradeState([[2.0]], [[6.0, 4.0]], [[1.0, 4.0]], [[0.0]])
        assert der_revenue(inst, st, 0) == pytest.approx(14.0)

    def test_der_revenue_all_to_pcc(self):
        inst = make_instance([10.0], [5.0])
        assert der_revenue(inst, baseline_state(inst), 0) == pytest.approx(200.0)

    def test_der_revenue_two_loads(self):
        inst = make_instance([10.0], [5.0, 5.0])
        st = TradeState([[55.0, 60.0]], [[5.0, 3.0, 2.0]],
                        [[2.0, 3.0], [3.0, 2.0]], [[0.0], [0.0]])
        assert der_revenue(inst, st, 0) == pytest.approx(385.0)

    def test_der_revenue_index_error(self):
        inst = make_instance([10.0], [5.0])
        with pytest.raises(IndexError):
            der_revenue(inst, baseline_state(inst), 1)

    def test_load_expense_baseline(self):
        inst = make_instance([10.0], [5.0])
        assert load_expense(inst, baseline_state(inst), 0) == pytest.approx(250.0)

    def test_load_expense_discounted(self):
        inst = make_instance([10.0], [5.0])
        st = TradeState([[60.0]], [[6.0, 4.0]], [[1.0, 4.0]], [[12.0]])
        assert load_expense(inst, st, 0) == pytest.approx(242.0)

    def test_load_expense_zero_discount(self):
        inst = make_instance([10.0], [5.0], alpha=0.0)
        st = TradeState([[30.0]], [[7.0, 3.0]], [[2.0, 3.0]], [[0.0]])
        assert load_expense(inst, st, 0) == pytest.approx(30.0 * 3 + 2 * 50.0)

    def test_pcc_distance(self):
        inst = make_instance([10.0, 10.0], [9.0], target=[[1.0, 2.0]])
        at_target = TradeState([[30.0], [30.0]], [[9.0, 1.0], [8.0, 2.0]],
                               [[6.0, 1.0, 2.0]], [[0.0, 0.0]])
        assert pcc_distance(inst, at_target, 0) == 0.0
        off = TradeState([[30.0], [30.0]], [[7.0, 3.0], [10.0, 0.0]],
                         [[6.0, 3.0, 0.0]], [[0.0, 0.0]])
        assert pcc_distance(inst, off, 0) == pytest.approx(8.0)
        zero = baseline_state(inst)
        assert pcc_distance(inst, zero, 0) == pytest.approx(5.0)

    def test_report_distance(self):
        inst = make_instance([10.0, 10.0], [9.0], target=[[1.0, 2.0]])
        off = TradeState([[30.0], [30.0]], [[7.0, 3.0], [10.0, 0.0]],
                         [[6.0, 3.0, 0.0]], [[0.0, 0.0]])
        assert report_distance(inst, off) == pytest.approx(np.sqrt(8.0))

    def test_report_distance_sums_norms(self):
        # residual vectors of norm 3 and 4 across the two loads
        inst = make_instance([20.0, 20.0], [9.0, 9.0],
                             target=[[3.0, 0.0], [0.0, 4.0]])
        st = baseline_state(inst)
        assert report_distance(inst, st) == pytest.approx(7.0)

    def test_report_distance_zero_at_target(self, inst_2x2):
        from gridmarket.transform import active_pairs, state_from_active
        ap = active_pairs(compute_trade_mask(inst_2x2))
        t = inst_2x2.target_demand[ap.loads, ap.ders]
        st = state_from_active(inst_2x2, ap, np.full(ap.n, 30.0), t, np.zeros(ap.n))
        assert report_distance(inst_2x2, st) == pytest.approx(0.0, abs=1e-12)


class TestFeasibility:
    def test_baseline_always_feasible(self, rng):
        for _ in range(10):
            G, L = rng.integers(1, 4), rng.integers(1, 4)
            inst = make_instance(rng.uniform(1, 30, G), rng.uniform(1, 30, L),
                                 alpha=float(rng.uniform(0, 1)))
            assert check_feasible(inst, baseline_state(inst)) == []

    def test_consistency_breach(self):
        inst = make_instance([10.0], [5.0])
        st = TradeState([[30.0]], [[5.0, 5.0]], [[1.0, 4.0]], [[0.0]])
        problems = check_feasible(inst, st)
        assert any(p.startswith("consistency (1,1)") for p in problems)

    def test_discount_cap_breach(self):
        inst = make_instance([10.0], [5.0], alpha=0.2)
        st = TradeState([[30.0]], [[6.0, 4.0]], [[1.0, 4.0]], [[9.0]])
        problems = check_feasible(inst, st)
        assert any(p.startswith("discount_cap (1,1)") for p in problems)

    def test_surplus_and_demand_caps(self):
        inst = make_instance([10.0], [5.0])
        st = TradeState([[30.0]], [[0.0, 11.0]], [[0.0, 11.0]], [[0.0]])
        kinds = {p.split()[0] for p in check_feasible(inst, st)}
        assert "surplus_cap" in kinds and "demand_cap" in kinds

    def test_random_states_feasible(self, inst_2x2, rng):
        for _ in range(25):
            st = random_feasible_state(inst_2x2, rng)
            assert check_feasible(inst_2x2, st) == []


class TestTradeMask:
    def test_window_open(self):
        inst = make_instance([10.0], [5.0], alpha=0.21, cap=[100.0])
        assert compute_trade_mask(inst).active[0, 0]

    def test_buy_above_sell_price(self):
        inst = make_instance([10.0], [5.0], gamma=[60.0], pi=[50.0], alpha=0.0,
                             cap=[100.0])
        assert not compute_trade_mask(inst).active[0, 0]

    def test_cap_below_buy_price(self):
        inst = make_instance([10.0], [5.0], cap=[15.0])
        assert not compute_trade_mask(inst).active[0, 0]

    def test_full_discount_unbounded_window(self):
        # at full discount only the price cap limits the window
        inst = make_instance([10.0], [5.0], gamma=[60.0], pi=[50.0], alpha=1.0,
                             cap=[70.0])
        assert compute_trade_mask(inst).active[0, 0]

    def test_mixed_pairs(self):
        inst = make_instance([10.0, 10.0], [5.0], gamma=[20.0, 60.0],
                             pi=[50.0], alpha=0.0, cap=[80.0, 80.0])
        active = compute_trade_mask(inst).active
        assert active[0, 0] and not active[1, 0]


class TestRationality:
    def test_baseline_ok(self, inst_2x2):
        assert rationality_check(inst_2x2, baseline_state(inst_2x2)) == []

    def test_profitable_trade_ok(self):
        inst = make_instance([10.0], [5.0], alpha=0.1)
        st = TradeState([[30.0]], [[6.0, 4.0]], [[1.0, 4.0]], [[3.0]])
        assert rationality_check(inst, st) == []

    def test_price_below_pcc_buy(self):
        inst = make_instance([10.0], [5.0])
        st = TradeState([[19.0]], [[6.0, 4.0]], [[1.0, 4.0]], [[0.0]])
        problems = rationality_check(inst, st)
        assert any("seller loses at (1,1)" in p for p in problems)

    def test_discounted_price_above_pcc_sell(self):
        inst = make_instance([10.0], [5.0], alpha=0.1, cap=[80.0])
        st = TradeState([[60.0]], [[6.0, 4.0]], [[1.0, 4.0]], [[2.0]])
        problems = rationality_check(inst, st)
        assert any("buyer loses at (1,1)" in p for p in problems)

    def test_masked_pair_trading_flagged(self):
        inst = make_instance([10.0], [5.0], gamma=[60.0], pi=[50.0], alpha=0.0)
        st = TradeState([[61.0]], [[6.0, 4.0]], [[1.0, 4.0]], [[0.0]])
        problems = rationality_check(inst, st)
        assert any("masked pair trades" in p for p in problems)


class TestBaselineIdentity:
    def test_exact_revenues_and_expenses(self, rng):
        for _ in range(10):
            G, L = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            inst = make_instance(rng.uniform(0.5, 40, G), rng.uniform(0.5, 40, L))
            st = baseline_state(inst)
            for i in range(G):
                assert der_revenue(inst, st, i) == inst.surplus[i] * inst.pcc_buy_price[i]
            for j in range(L):
                assert load_expense(inst, st, j) == inst.demand[j] * inst.pcc_sell_price[j]


class TestMaskSoundness:
    @pytest.mark.parametrize("kind", ["price_floor", "cap_window"])
    def test_reroute_improves(self, kind):
        # a trade on a pair the mask excludes can always be rerouted to the
        # PCC with strict benefit for one side
        if kind == "price_floor":
            inst = make_instance([10.0], [5.0], cap=[15.0])  # p <= 15 < 20
            p = 12.0
        else:
            inst = make_instance([10.0], [5.0], gamma=[60.0], pi=[50.0],
                                 alpha=0.05, cap=[80.0])
            p = 70.0
        assert not compute_trade_mask(inst).active[0, 0]
        q = 3.0
        st = TradeState([[p]], [[10.0 - q, q]], [[5.0 - q, q]],
                        [[inst.discount_cap * p]])
        assert check_feasible(inst, st) == []
        rerouted = TradeState([[p]], [[10.0, 0.0]], [[5.0, 0.0]],
                              [[inst.discount_cap * p]])
        der_delta = der_revenue(inst, rerouted, 0) - der_revenue(inst, st, 0)
        load_delta = load_expense(inst, st, 0) - load_expense(inst, rerouted, 0)
        assert der_delta > 1e-9 or load_delta > 1e-9


class TestNonConvexityWitness:
    def test_indefinite_hessian(self):
        inst = make_instance([10.0], [5.0])

        def u(p, h):
            st = TradeState([[p]], [[10.0 - h, h]], [[5.0 - h, h]], [[0.0]])
            return der_revenue(inst, st, 0)

        # bilinear objective: no truncation error, so a wide step beats roundoff
        p0, h0, eps = 30.0, 2.0, 1e-2
        dpp = (u(p0 + eps, h0) - 2 * u(p0, h0) + u(p0 - eps, h0)) / eps ** 2
        dhh = (u(p0, h0 + eps) - 2 * u(p0, h0) + u(p0, h0 - eps)) / eps ** 2
        dph = (u(p0 + eps, h0 + eps) - u(p0 + eps, h0 - eps)
               - u(p0 - eps, h0 + eps) + u(p0 - eps, h0 - eps)) / (4 * eps ** 2)
        hess = np.array([[dpp, dph], [dph, dhh]])
        z1 = np.array([1.0, 1.0])
        z2 = np.array([1.0, -1.0])
        assert z1 @ hess @ z1 == pytest.approx(2.0, abs=1e-6)
        assert z2 @ hess @ z2 == pytest.approx(-2.0, abs=1e-6)


class TestFeasibilityClosure:
    def test_convex_combinations(self, inst_2x2, rng):
        # combinations stay feasible except possibly the bilinear discount cap
        for _ in range(30):
            a = random_feasible_state(inst_2x2, rng)
            b = random_feasible_state(inst_2x2, rng)
            th = rng.uniform()
            mix = TradeState(th * a.prices + (1 - th) * b.prices,
                             th * a.alloc + (1 - th) * b.alloc,
                             th * a.dem + (1 - th) * b.dem,
                             th * a.disc + (1 - th) * b.disc)
            problems = [p for p in check_feasible(inst_2x2, mix)
                        if not p.startswith("discount_cap")]
            assert problems == []
