"""Market model: instances, trade states, objectives, feasibility and rationality.

A market couples G sellers (DERs, each with a surplus to sell) and L buyers
(loads, each with a fixed demand) through a grid root node (the PCC).  The PCC
buys surplus at per-DER prices ``pcc_buy_price`` and sells at per-load prices
``pcc_sell_price``; peer-to-peer trades happen at DER-proposed prices that the
PCC may discount by at most a fraction ``discount_cap`` of the price.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "MarketInstance",
    "TradeState",
    "TradeMask",
    "ObjectiveValues",
    "validate_instance",
    "der_revenue",
    "load_expense",
    "pcc_distance",
    "report_distance",
    "check_feasible",
    "compute_trade_mask",
    "rationality_check",
    "baseline_state",
    "objective_values",
    "price_window",
]

#: quantities below this many kWh do not count as a trade
TOL_ZERO = 1e-6


def _as_float_array(x, shape=None):
    try:
        a = np.asarray(x, dtype=float)
    except (TypeError, ValueError):
        return None
    if shape is not None and a.shape != shape:
        return None
    return a


@dataclass
class MarketInstance:
    """Immutable description of one market clearing problem.

    ``target_demand`` is the L x G matrix of electrically optimal demands
    (how much each load should draw from each DER); it is an input produced
    by whatever electrical optimizer the grid operator runs, never computed
    here.  Column 0 slack toward the PCC is implied as the gap between a
    load's demand and its target row sum.
    """

    num_ders: int
    num_loads: int
    surplus: np.ndarray
    demand: np.ndarray
    pcc_buy_price: np.ndarray
    pcc_sell_price: np.ndarray
    price_cap: np.ndarray
    discount_cap: float
    target_demand: np.ndarray
    der_regions: tuple[int, ...] | None = None
    load_regions: tuple[int, ...] | None = None

    def __post_init__(self):
        for name in ("surplus", "demand", "pcc_buy_price", "pcc_sell_price",
                     "price_cap", "target_demand"):
            arr = _as_float_array(getattr(self, name))
            if arr is not None:
                setattr(self, name, arr)
        if self.der_regions is not None:
            self.der_regions = tuple(int(r) for r in self.der_regions)
        if self.load_regions is not None:
            self.load_regions = tuple(int(r) for r in self.load_regions)


@dataclass
class TradeState:
    """One point of the decision space.

    prices : (G, L) unit price DER i proposes to load j
    alloc  : (G, L+1) energy sold by each DER; column 0 goes to the PCC
    dem    : (L, G+1) energy bought by each load; column 0 comes from the PCC
    disc   : (L, G) discount the PCC applies when load i buys from DER j
    """

    prices: np.ndarray
    alloc: np.ndarray
    dem: np.ndarray
    disc: np.ndarray

    def __post_init__(self):
        self.prices = np.asarray(self.prices, dtype=float)
        self.alloc = np.asarray(self.alloc, dtype=float)
        self.dem = np.asarray(self.dem, dtype=float)
        self.disc = np.asarray(self.disc, dtype=float)

    def copy(self) -> "TradeState":
        return TradeState(self.prices.copy(), self.alloc.copy(),
                          self.dem.copy(), self.disc.copy())


@dataclass
class TradeMask:
    """Boolean activity of each (DER, load) pair; False pairs cannot trade."""

    active: np.ndarray

    def pairs(self) -> np.ndarray:
        """Active (der, load) index pairs in row-major order, shape (n, 2)."""
        return np.argwhere(self.active)


@dataclass
class ObjectiveValues:
    der_revenue: np.ndarray
    load_expense: np.ndarray
    pcc_distance: np.ndarray


def validate_instance(inst: MarketInstance) -> list[str]:
    """Return every violated instance invariant; an empty list means valid.

    Violations are data, not faults: malformed instances never raise here.
    """
    out: list[str] = []
    G, L = inst.num_ders, inst.num_loads
    if not isinstance(G, int) or G < 1:
        out.append(f"num_ders must be a positive integer, got {G!r}")
    if not isinstance(L, int) or L < 1:
        out.append(f"num_loads must be a positive integer, got {L!r}")
    if out:
        return out

    def vec(name, n, positive=False):
        a = getattr(inst, name)
        if not isinstance(a, np.ndarray) or a.ndim != 1 or a.shape[0] != n:
            out.append(f"{name} must be a vector of length {n}")
            return None
        if not np.all(np.isfinite(a)):
            out.append(f"{name} has non-finite entries")
            return None
        bad = np.where(a <= 0)[0] if positive else np.where(a < 0)[0]
        if bad.size:
            kind = "positive" if positive else "nonnegative"
            out.append(f"{name} must be {kind}, offending indices "
                       f"{[int(i) + 1 for i in bad]}")
        return a

    vec("surplus", G)
    D = vec("demand", L)
    vec("pcc_buy_price", G, positive=True)
    vec("pcc_sell_price", L, positive=True)
    vec("price_cap", G, positive=True)

    a = inst.discount_cap
    if not (isinstance(a, (int, float)) and math.isfinite(a) and 0.0 <= a <= 1.0):
        out.append(f"discount_cap out of [0,1]: {a!r}")

    T = inst.target_demand
    if not isinstance(T, np.ndarray) or T.ndim != 2 or T.shape != (L, G):
        out.append(f"target_demand must be an {L}x{G} matrix")
    else:
        if not np.all(np.isfinite(T)):
            out.append("target_demand has non-finite entries")
        elif np.any(T < 0):
            out.append("target_demand must be nonnegative")
        elif D is not None:
            row = T.sum(axis=1)
            for i in np.where(row > D + 1e-9 * np.maximum(D, 1.0))[0]:
                out.append(
                    f"target exceeds demand for load {i + 1}: {row[i]:g} > {D[i]:g}")

    for name, n in (("der_regions", G), ("load_regions", L)):
        r = getattr(inst, name)
        if r is not None:
            if len(r) != n:
                out.append(f"{name} must assign all {n} agents")
            elif any(k < 1 for k in r):
                out.append(f"{name} ids must be >= 1")
    return out


def der_revenue(inst: MarketInstance, state: TradeState, i: int) -> float:
    """Money DER ``i`` earns: peer trades plus surplus sold to the PCC."""
    if not 0 <= i < inst.num_ders:
        raise IndexError(f"DER index {i} out of range")
    p = state.prices[i]
    h = state.alloc[i, 1:]
    sold = float(h.sum())
    return float(p @ h) + (inst.surplus[i] - sold) * inst.pcc_buy_price[i]


def load_expense(inst: MarketInstance, state: TradeState, i: int) -> float:
    """Money load ``i`` spends: discounted peer trades plus PCC purchases."""
    if not 0 <= i < inst.num_loads:
        raise IndexError(f"load index {i} out of range")
    p_in = state.prices[:, i]
    d = state.dem[i, 1:]
    s = state.disc[i]
    return float((p_in - s) @ d) + float(state.dem[i, 0]) * inst.pcc_sell_price[i]


def pcc_distance(inst: MarketInstance, state: TradeState, i: int) -> float:
    """Squared distance of load ``i``'s DER-facing demand from its target row."""
    if not 0 <= i < inst.num_loads:
        raise IndexError(f"load index {i} out of range")
    r = state.dem[i, 1:] - inst.target_demand[i]
    return float(r @ r)


def report_distance(inst: MarketInstance, state: TradeState) -> float:
    """Sum over loads of the (non-squared) demand-to-target norms.

    This is the reporting metric for sweeps; the optimization objective uses
    the squared per-load distances instead.
    """
    r = state.dem[:, 1:] - inst.target_demand
    return float(np.linalg.norm(r, axis=1).sum())


def objective_values(inst: MarketInstance, state: TradeState) -> ObjectiveValues:
    return ObjectiveValues(
        der_revenue=np.array([der_revenue(inst, state, i) for i in range(inst.num_ders)]),
        load_expense=np.array([load_expense(inst, state, i) for i in range(inst.num_loads)]),
        pcc_distance=np.array([pcc_distance(inst, state, i) for i in range(inst.num_loads)]),
    )


def check_feasible(inst: MarketInstance, state: TradeState,
                   tol_eq: float | None = None) -> list[str]:
    """Return all constraint violations of ``state``; empty list means feasible.

    ``tol_eq`` defaults to 1e-9 scaled by the largest surplus/demand so the
    explicit PCC slack columns are reconciled without punishing round-off.
    """
    G, L = inst.num_ders, inst.num_loads
    if tol_eq is None:
        tol_eq = 1e-9 * max(float(inst.surplus.max(initial=0.0)),
                            float(inst.demand.max(initial=0.0)), 1.0)
    out: list[str] = []
    P, H, Dm, S = state.prices, state.alloc, state.dem, state.disc
    if P.shape != (G, L) or H.shape != (G, L + 1) or Dm.shape != (L, G + 1) \
            or S.shape != (L, G):
        out.append("state matrices have wrong shapes")
        return out

    for i, j in zip(*np.where(P <= 0)):
        out.append(f"price_positive ({i + 1},{j + 1}): p={P[i, j]:g}")
    cap_tol = 1e-9 * max(float(inst.price_cap.max()), 1.0)
    for i, j in zip(*np.where(P > inst.price_cap[:, None] + cap_tol)):
        out.append(f"price_cap ({i + 1},{j + 1}): p={P[i, j]:g} > {inst.price_cap[i]:g}")

    for name, M in (("alloc", H), ("demand", Dm), ("discount", S)):
        if np.any(M < -tol_eq):
            i, j = np.unravel_index(np.argmin(M), M.shape)
            out.append(f"{name}_negative ({i + 1},{j + 1}): {M[i, j]:g}")

    sold = H[:, 1:].sum(axis=1)
    for i in np.where(sold > inst.surplus + tol_eq)[0]:
        out.append(f"surplus_cap DER {i + 1}: sells {sold[i]:g} > {inst.surplus[i]:g}")
    total_h = H.sum(axis=1)
    for i in np.where(np.abs(total_h - inst.surplus) > tol_eq)[0]:
        out.append(f"alloc_total DER {i + 1}: {total_h[i]:g} != surplus {inst.surplus[i]:g}")

    bought = Dm[:, 1:].sum(axis=1)
    for i in np.where(bought > inst.demand + tol_eq)[0]:
        out.append(f"demand_cap load {i + 1}: buys {bought[i]:g} > {inst.demand[i]:g}")
    total_d = Dm.sum(axis=1)
    for i in np.where(np.abs(total_d - inst.demand) > tol_eq)[0]:
        out.append(f"demand_total load {i + 1}: {total_d[i]:g} != demand {inst.demand[i]:g}")

    s_tol = 1e-9 * max(1.0, inst.discount_cap * float(inst.price_cap.max()))
    s_cap = inst.discount_cap * P.T  # (L, G)
    for i, j in zip(*np.where(S > s_cap + s_tol)):
        out.append(f"discount_cap ({i + 1},{j + 1}): s={S[i, j]:g} > "
                   f"{inst.discount_cap:g}*p={s_cap[i, j]:g}")

    mism = np.abs(H[:, 1:] - Dm[:, 1:].T)
    for i, j in zip(*np.where(mism > tol_eq)):
        out.append(f"consistency ({i + 1},{j + 1}): h={H[i, j + 1]:g} != d={Dm[j, i + 1]:g}")
    return out


def price_window(inst: MarketInstance, i: int, j: int) -> tuple[float, float]:
    """Feasible price interval for the (DER i, load j) pair.

    Lower end is the PCC buying price (below it the DER prefers the PCC),
    upper end is the smaller of the price cap and the price whose maximal
    discount still undercuts the PCC selling price.  At full discount the
    latter bound disappears and only the cap remains.
    """
    lo = float(inst.pcc_buy_price[i])
    hi = float(inst.price_cap[i])
    a = inst.discount_cap
    if a < 1.0:
        hi = min(hi, float(inst.pcc_sell_price[j]) / (1.0 - a))
    return lo, hi


def compute_trade_mask(inst: MarketInstance) -> TradeMask:
    """Mark each pair active iff some price satisfies both trading conditions.

    A pair can trade only when a price exists that at once beats the PCC
    buying price for the seller and, after the maximal discount, undercuts
    the PCC selling price for the buyer, without exceeding the price cap.
    """
    G, L = inst.num_ders, inst.num_loads
    active = np.zeros((G, L), dtype=bool)
    for i in range(G):
        for j in range(L):
            lo, hi = price_window(inst, i, j)
            active[i, j] = lo <= hi
    return TradeMask(active=active)


def rationality_check(inst: MarketInstance, state: TradeState,
                      tol_zero: float = TOL_ZERO,
                      tol_price: float = 1e-6) -> list[str]:
    """Verify that ``state`` makes economic sense for every agent.

    Every realized trade must earn the DER more than the PCC would pay and
    cost the load less than the PCC would charge; masked-out pairs must not
    trade; and nobody ends up worse than the no-trade baseline.  ``tol_price``
    absorbs solutions that rest exactly on an indifference boundary.
    """
    out: list[str] = []
    mask = compute_trade_mask(inst)
    H, Dm = state.alloc, state.dem
    for i in range(inst.num_ders):
        for j in range(inst.num_loads):
            q = 0.5 * (H[i, j + 1] + Dm[j, i + 1])
            if q <= tol_zero:
                continue
            if not mask.active[i, j]:
                out.append(f"masked pair trades ({i + 1},{j + 1}): q={q:g}")
                continue
            p = state.prices[i, j]
            if p < inst.pcc_buy_price[i] - tol_price:
                out.append(f"seller loses at ({i + 1},{j + 1}): "
                           f"p={p:g} < pcc buy {inst.pcc_buy_price[i]:g}")
            disc_p = p - state.disc[j, i]
            if disc_p > inst.pcc_sell_price[j] + tol_price:
                out.append(f"buyer loses at ({i + 1},{j + 1}): discounted "
                           f"p={disc_p:g} > pcc sell {inst.pcc_sell_price[j]:g}")

    tol_money = tol_price * max(1.0, float(inst.surplus.max(initial=0.0)),
                                float(inst.demand.max(initial=0.0)))
    for i in range(inst.num_ders):
        base = inst.surplus[i] * inst.pcc_buy_price[i]
        rev = der_revenue(inst, state, i)
        if rev < base - tol_money:
            out.append(f"DER {i + 1} below baseline: {rev:g} < {base:g}")
    for j in range(inst.num_loads):
        base = inst.demand[j] * inst.pcc_sell_price[j]
        exp = load_expense(inst, state, j)
        if exp > base + tol_money:
            out.append(f"load {j + 1} above baseline: {exp:g} > {base:g}")
    return out


def baseline_state(inst: MarketInstance) -> TradeState:
    """No-trade state: DERs sell everything to the PCC, loads buy everything
    from it.  Always feasible; prices sit at the lesser of the PCC buying
    price and the cap so the price domain holds."""
    G, L = inst.num_ders, inst.num_loads
    prices = np.tile(np.minimum(inst.pcc_buy_price, inst.price_cap)[:, None], (1, L))
    alloc = np.zeros((G, L + 1))
    alloc[:, 0] = inst.surplus
    dem = np.zeros((L, G + 1))
    dem[:, 0] = inst.demand
    disc = np.zeros((L, G))
    return TradeState(prices, alloc, dem, disc)
