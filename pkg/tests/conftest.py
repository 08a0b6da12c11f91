import numpy as np
import pytest

from gridmarket.model import MarketInstance, compute_trade_mask
from gridmarket.transform import active_pairs, state_from_active


def make_instance(surplus, demand, *, gamma=None, pi=None, cap=None, alpha=0.2,
                  target=None, regions=None):
    """Instance builder with the usual PCC prices (buy 20, sell 50)."""
    surplus = np.asarray(surplus, dtype=float)
    demand = np.asarray(demand, dtype=float)
    G, L = surplus.size, demand.size
    if target is None:
        target = np.zeros((L, G))
    der_regions = load_regions = None
    if regions is not None:
        der_regions, load_regions = regions
    return MarketInstance(
        num_ders=G, num_loads=L,
        surplus=surplus, demand=demand,
        pcc_buy_price=np.full(G, 20.0) if gamma is None else np.asarray(gamma, float),
        pcc_sell_price=np.full(L, 50.0) if pi is None else np.asarray(pi, float),
        price_cap=np.full(G, 80.0) if cap is None else np.asarray(cap, float),
        discount_cap=alpha,
        target_demand=np.asarray(target, dtype=float),
        der_regions=der_regions, load_regions=load_regions,
    )


def random_feasible_state(inst, rng, lo_frac=0.2, hi_frac=0.85):
    """Strictly positive feasible state: every active pair trades somewhere
    inside its capacity share and price window, discounts strictly inside
    their caps, slacks strictly positive."""
    ap = active_pairs(compute_trade_mask(inst))
    G, L = inst.num_ders, inst.num_loads
    share = np.minimum(inst.demand[ap.loads] / G, inst.surplus[ap.ders] / L)
    d = rng.uniform(lo_frac, hi_frac, ap.n) * share * 0.9
    lo = inst.pcc_buy_price[ap.ders]
    hi = np.minimum(inst.price_cap[ap.ders],
                    inst.pcc_sell_price[ap.loads] / (1 - inst.discount_cap)
                    if inst.discount_cap < 1 else inst.price_cap[ap.ders])
    p = rng.uniform(lo + 0.05 * (hi - lo), lo + 0.95 * (hi - lo))
    sig = rng.uniform(0.05, 0.95, ap.n)
    return state_from_active(inst, ap, p, d, sig)


@pytest.fixture
def inst_1x1():
    return make_instance([10.0], [5.0], alpha=0.3, target=[[5.0]])


@pytest.fixture
def inst_2x2():
    return make_instance([30.0, 20.0], [100.0, 100.0], cap=[55.0, 55.0],
                         alpha=0.25, target=[[15.0, 8.0], [9.0, 6.0]])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
