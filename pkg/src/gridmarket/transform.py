"""Objective reformulations: posynomial, log-domain, scalarized and surrogate.

Seller revenue and buyer expense are posynomials of the prices and traded
quantities, so a log change of variables makes each of them a sum of
exponentials.  The scalarized objective combines minus-log revenues, log
expenses and the quadratic demand-to-target distances under one weight
vector on the simplex.  The consensus solver additionally replaces each
log-of-sum with the sum of logs of its terms, which keeps the favored point
of each term family while making the objective separable pair by pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (MarketInstance, TradeMask, TradeState, compute_trade_mask,
                    der_revenue, load_expense)

__all__ = [
    "PosyCoefficients",
    "Weights",
    "posy_coefficients",
    "posy_der_objective",
    "posy_load_objective",
    "log_domain_der_objective",
    "log_domain_load_objective",
    "scalarized_objective",
    "scalarized_gradient",
    "jensen_surrogate_der",
    "jensen_surrogate_load",
    "der_term_values",
    "load_term_values",
    "surrogate_scalarized_objective",
    "ActivePairs",
    "ActiveEval",
    "active_pairs",
    "solver_pairs",
    "state_from_active",
    "active_from_state",
]

#: positivity floor for quantities entering logarithms, in kWh
VAR_FLOOR = 1e-8

#: dummy price attached to the PCC column; its exponent is zero so any
#: positive value works
DUMMY_PRICE = 1.0


@dataclass(frozen=True)
class PosyCoefficients:
    """Monomial exponents and coefficients of the two posynomial families.

    Index 0 is the PCC column: exponent 0 and coefficient equal to the PCC
    price; every other index has exponent 1 and coefficient 1.
    """

    der_exponents: np.ndarray   # (L+1,)
    der_coeffs: np.ndarray      # (G, L+1)
    load_exponents: np.ndarray  # (G+1,)
    load_coeffs: np.ndarray     # (L, G+1)


def posy_coefficients(inst: MarketInstance) -> PosyCoefficients:
    G, L = inst.num_ders, inst.num_loads
    de = np.ones(L + 1)
    de[0] = 0.0
    dc = np.ones((G, L + 1))
    dc[:, 0] = inst.pcc_buy_price
    le = np.ones(G + 1)
    le[0] = 0.0
    lc = np.ones((L, G + 1))
    lc[:, 0] = inst.pcc_sell_price
    return PosyCoefficients(de, dc, le, lc)


@dataclass(frozen=True)
class Weights:
    """Scalarization weights on the simplex, ordered DERs, loads, PCC terms."""

    lam: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lam", np.asarray(self.lam, dtype=float))

    def validate(self, num_ders: int, num_loads: int) -> None:
        n = num_ders + 2 * num_loads
        if self.lam.shape != (n,):
            raise ValueError(f"weight vector must have length {n}, got {self.lam.shape}")
        if np.any(self.lam < 0) or np.any(self.lam > 1):
            raise ValueError("weights must lie in [0, 1]")
        if abs(float(self.lam.sum()) - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1, got {self.lam.sum()!r}")

    def split(self, num_ders: int, num_loads: int):
        G, L = num_ders, num_loads
        return self.lam[:G], self.lam[G:G + L], self.lam[G + L:G + 2 * L]


def posy_der_objective(inst: MarketInstance, coeffs: PosyCoefficients,
                       p_row: np.ndarray, h_row: np.ndarray, i: int) -> float:
    """Seller revenue as a posynomial: sum of c * p^e * h over columns 0..L.

    ``h_row`` has length L+1 with the PCC quantity first; ``p_row`` has
    length L and gets the dummy price prepended for the PCC column.
    """
    p_full = np.concatenate(([DUMMY_PRICE], np.asarray(p_row, dtype=float)))
    h = np.asarray(h_row, dtype=float)
    return float(np.sum(coeffs.der_coeffs[i] * p_full ** coeffs.der_exponents * h))


def posy_load_objective(inst: MarketInstance, coeffs: PosyCoefficients,
                        p_col: np.ndarray, d_row: np.ndarray,
                        s_row: np.ndarray, i: int) -> float:
    """Buyer expense as a posynomial over the discounted prices p - s."""
    disc_p = np.asarray(p_col, dtype=float) - np.asarray(s_row, dtype=float)
    p_full = np.concatenate(([DUMMY_PRICE], disc_p))
    d = np.asarray(d_row, dtype=float)
    return float(np.sum(coeffs.load_coeffs[i] * p_full ** coeffs.load_exponents * d))


def log_domain_der_objective(inst: MarketInstance, coeffs: PosyCoefficients,
                             p_row: np.ndarray, h_row: np.ndarray, i: int,
                             support) -> float:
    """Seller revenue in log coordinates, restricted to ``support``.

    Raises ValueError on a nonpositive variable inside the support, where
    the logarithm is undefined.
    """
    vals = der_term_values(inst, coeffs, p_row, h_row, i, support)
    return float(vals.sum())


def log_domain_load_objective(inst: MarketInstance, coeffs: PosyCoefficients,
                              p_col: np.ndarray, d_row: np.ndarray,
                              s_row: np.ndarray, i: int, support) -> float:
    vals = load_term_values(inst, coeffs, p_col, d_row, s_row, i, support)
    return float(vals.sum())


def der_term_values(inst: MarketInstance, coeffs: PosyCoefficients,
                    p_row: np.ndarray, h_row: np.ndarray, i: int,
                    support) -> np.ndarray:
    """Per-column terms exp(e*log p + log h + log c) of the seller objective."""
    p_full = np.concatenate(([DUMMY_PRICE], np.asarray(p_row, dtype=float)))
    h = np.asarray(h_row, dtype=float)
    idx = np.asarray(sorted(support), dtype=int)
    if np.any(h[idx] <= 0) or np.any(p_full[idx] <= 0):
        raise ValueError(f"nonpositive variable on support of DER {i + 1}")
    e = coeffs.der_exponents[idx]
    c = coeffs.der_coeffs[i, idx]
    return np.exp(e * np.log(p_full[idx]) + np.log(h[idx]) + np.log(c))


def load_term_values(inst: MarketInstance, coeffs: PosyCoefficients,
                     p_col: np.ndarray, d_row: np.ndarray, s_row: np.ndarray,
                     i: int, support) -> np.ndarray:
    """Per-column terms of the buyer objective, at discounted prices."""
    disc_p = np.asarray(p_col, dtype=float) - np.asarray(s_row, dtype=float)
    p_full = np.concatenate(([DUMMY_PRICE], disc_p))
    d = np.asarray(d_row, dtype=float)
    idx = np.asarray(sorted(support), dtype=int)
    if np.any(d[idx] <= 0) or np.any(p_full[idx] <= 0):
        raise ValueError(f"nonpositive variable on support of load {i + 1}")
    e = coeffs.load_exponents[idx]
    c = coeffs.load_coeffs[i, idx]
    return np.exp(e * np.log(p_full[idx]) + np.log(d[idx]) + np.log(c))


def jensen_surrogate_der(inst: MarketInstance, y_row: np.ndarray) -> float:
    """Sum of logs of the seller's per-column terms (lower bounds the log of
    their mean, with equality when all terms agree)."""
    y = np.asarray(y_row, dtype=float)
    if np.any(y <= 0):
        raise ValueError("nonpositive surrogate term")
    return float(np.log(y).sum())


def jensen_surrogate_load(inst: MarketInstance, z_row: np.ndarray) -> float:
    z = np.asarray(z_row, dtype=float)
    if np.any(z <= 0):
        raise ValueError("nonpositive surrogate term")
    return float(np.log(z).sum())


# ---------------------------------------------------------------------------
# Active-pair parametrization shared with the solvers.
#
# Free variables are one price, one demand and one discount fraction per
# active pair; allocations mirror demands through the consistency constraint
# and the PCC slack columns absorb the remainders.

@dataclass(frozen=True)
class ActivePairs:
    """Row-major list of tradeable (DER, load) pairs plus gather indices."""

    ders: np.ndarray
    loads: np.ndarray

    @property
    def n(self) -> int:
        return int(self.ders.shape[0])


def active_pairs(mask: TradeMask) -> ActivePairs:
    pairs = mask.pairs()
    return ActivePairs(ders=pairs[:, 0].astype(int), loads=pairs[:, 1].astype(int))


def solver_pairs(inst: MarketInstance, mask: TradeMask,
                 floor: float = VAR_FLOOR) -> ActivePairs:
    """Active pairs that can actually move energy: pairs whose seller or
    buyer has (essentially) no capacity are dropped from the free variables,
    since their trade is pinned at zero anyway."""
    ap = active_pairs(mask)
    cap = np.minimum(inst.demand[ap.loads], inst.surplus[ap.ders])
    keep = cap > 10 * floor
    return ActivePairs(ders=ap.ders[keep], loads=ap.loads[keep])


def active_from_state(inst: MarketInstance, ap: ActivePairs, state: TradeState):
    """Extract (p, d, sigma) arrays over the active pairs from a full state."""
    p = state.prices[ap.ders, ap.loads]
    d = state.dem[ap.loads, ap.ders + 1]
    a = inst.discount_cap
    if a > 0:
        with np.errstate(divide="ignore", invalid="ignore"):
            sig = np.where(p > 0, state.disc[ap.loads, ap.ders] / (a * p), 0.0)
        sig = np.clip(sig, 0.0, 1.0)
    else:
        sig = np.zeros(ap.n)
    return p, d, sig


def state_from_active(inst: MarketInstance, ap: ActivePairs, p: np.ndarray,
                      d: np.ndarray, sig: np.ndarray) -> TradeState:
    """Assemble a full feasible state from active-pair variables.

    Inactive prices sit at the smaller of the PCC buying price and the cap;
    slack columns take up whatever is not traded (clipped at zero against
    round-off from the projections).
    """
    G, L = inst.num_ders, inst.num_loads
    prices = np.tile(np.minimum(inst.pcc_buy_price, inst.price_cap)[:, None], (1, L))
    prices[ap.ders, ap.loads] = p
    dem = np.zeros((L, G + 1))
    dem[ap.loads, ap.ders + 1] = d
    dem[:, 0] = np.maximum(inst.demand - dem[:, 1:].sum(axis=1), 0.0)
    alloc = np.zeros((G, L + 1))
    alloc[:, 1:] = dem[:, 1:].T
    alloc[:, 0] = np.maximum(inst.surplus - alloc[:, 1:].sum(axis=1), 0.0)
    disc = np.zeros((L, G))
    disc[ap.loads, ap.ders] = sig * inst.discount_cap * p
    return TradeState(prices, alloc, dem, disc)


def _masked_target_sq(inst: MarketInstance, ap: ActivePairs) -> np.ndarray:
    """Per-load squared targets of the pairs that cannot trade (their demand
    is pinned at zero, so they contribute a constant to the distances)."""
    off = np.ones((inst.num_loads, inst.num_ders), dtype=bool)
    off[ap.loads, ap.ders] = False
    return (np.where(off, inst.target_demand, 0.0) ** 2).sum(axis=1)


class ActiveEval:
    """Cached evaluator of the reduced objectives over active-pair arrays.

    Precomputes every index gather and constant so the inner solver loop
    touches only small elementwise numpy work.  ``surrogate`` switches from
    the scalarized objective to the sum-of-term-logs form.
    """

    def __init__(self, inst: MarketInstance, lam: Weights, ap: ActivePairs,
                 surrogate: bool = False):
        lam.validate(inst.num_ders, inst.num_loads)
        self.inst = inst
        self.ap = ap
        self.surrogate = surrogate
        self.alpha = float(inst.discount_cap)
        self.G, self.L = inst.num_ders, inst.num_loads
        lg, ll, lp = lam.split(self.G, self.L)
        self.lg, self.ll, self.lp = lg, ll, lp
        self.gam_pair = inst.pcc_buy_price[ap.ders]
        self.pi_pair = inst.pcc_sell_price[ap.loads]
        self.lg_pair = lg[ap.ders]
        self.ll_pair = ll[ap.loads]
        self.lp_pair = lp[ap.loads]
        self.t_act = inst.target_demand[ap.loads, ap.ders]
        self.masked_sq = _masked_target_sq(inst, ap)
        self.quad_const = float(lp @ self.masked_sq)
        if surrogate:
            self.log_const = float(-(lg @ np.log(inst.pcc_buy_price))
                                   + ll @ np.log(inst.pcc_sell_price))

    def utilities(self, p, d, sig):
        inst, ap = self.inst, self.ap
        u_der = np.bincount(ap.ders, weights=p * d, minlength=self.G) \
            + (inst.surplus - np.bincount(ap.ders, weights=d, minlength=self.G)) \
            * inst.pcc_buy_price
        eff = p * (1.0 - sig * self.alpha)
        bought = np.bincount(ap.loads, weights=d, minlength=self.L)
        u_load = np.bincount(ap.loads, weights=eff * d, minlength=self.L) \
            + (inst.demand - bought) * inst.pcc_sell_price
        dist2 = np.bincount(ap.loads, weights=(d - self.t_act) ** 2,
                            minlength=self.L) + self.masked_sq
        return u_der, u_load, dist2

    # -- scalarized form ----------------------------------------------------
    def value(self, p, d, sig) -> float:
        if self.surrogate:
            return self._surrogate_value(p, d, sig)
        u_der, u_load, dist2 = self.utilities(p, d, sig)
        if np.any(u_der <= 0) or np.any(u_load <= 0):
            return float("inf")
        return float(-(self.lg @ np.log(u_der)) + self.ll @ np.log(u_load)
                     + self.lp @ dist2)

    def grad(self, p, d, sig) -> np.ndarray:
        if self.surrogate:
            return self._surrogate_grad(p, d, sig)
        u_der, u_load, _ = self.utilities(p, d, sig)
        wg = self.lg_pair / u_der[self.ap.ders]
        wl = self.ll_pair / u_load[self.ap.loads]
        eff_f = 1.0 - sig * self.alpha
        g_p = (-wg + wl * eff_f) * d
        g_d = -wg * (p - self.gam_pair) + wl * (p * eff_f - self.pi_pair) \
            + 2.0 * self.lp_pair * (d - self.t_act)
        if self.alpha > 0:
            g_s = -wl * self.alpha * p * d
            return np.concatenate([g_p, g_d, g_s])
        return np.concatenate([g_p, g_d])

    # -- surrogate form ------------------------------------------------------
    def _slacks(self, d):
        inst, ap = self.inst, self.ap
        h0 = inst.surplus - np.bincount(ap.ders, weights=d, minlength=self.G)
        d0 = inst.demand - np.bincount(ap.loads, weights=d, minlength=self.L)
        return h0, d0

    def _surrogate_value(self, p, d, sig) -> float:
        h0, d0 = self._slacks(d)
        if np.any(h0 <= 0) or np.any(d0 <= 0) or np.any(p <= 0) or np.any(d <= 0):
            return float("inf")
        eff = p * (1.0 - sig * self.alpha)
        if np.any(eff <= 0):
            return float("inf")
        logs = np.log(d)
        val = self.log_const + self.quad_const
        val += float(-(self.lg_pair @ (np.log(p) + logs))
                     + self.ll_pair @ (np.log(eff) + logs))
        val += float(-(self.lg @ np.log(h0)) + self.ll @ np.log(d0))
        val += float(self.lp_pair @ ((d - self.t_act) ** 2))
        return val

    def _surrogate_grad(self, p, d, sig) -> np.ndarray:
        h0, d0 = self._slacks(d)
        g_p = (self.ll_pair - self.lg_pair) / p
        g_d = (self.ll_pair - self.lg_pair) / d \
            + self.lg_pair / h0[self.ap.ders] - self.ll_pair / d0[self.ap.loads] \
            + 2.0 * self.lp_pair * (d - self.t_act)
        if self.alpha > 0:
            g_s = -self.ll_pair * self.alpha / (1.0 - sig * self.alpha)
            return np.concatenate([g_p, g_d, g_s])
        return np.concatenate([g_p, g_d])


def scalarized_objective(inst: MarketInstance, lam: Weights,
                         state: TradeState) -> float:
    """Weighted combination of -log revenues, log expenses and distances.

    Raises ValueError when a revenue or expense is nonpositive, which makes
    the logarithm undefined and signals a degenerate state.
    """
    lam.validate(inst.num_ders, inst.num_loads)
    ug = np.array([der_revenue(inst, state, i) for i in range(inst.num_ders)])
    ul = np.array([load_expense(inst, state, i) for i in range(inst.num_loads)])
    dist2 = ((state.dem[:, 1:] - inst.target_demand) ** 2).sum(axis=1)
    if np.any(ug <= 0):
        raise ValueError(f"nonpositive seller objective at DER {int(np.argmin(ug)) + 1}")
    if np.any(ul <= 0):
        raise ValueError(f"nonpositive buyer objective at load {int(np.argmin(ul)) + 1}")
    lg, ll, lp = lam.split(inst.num_ders, inst.num_loads)
    return float(-(lg @ np.log(ug)) + ll @ np.log(ul) + lp @ dist2)


def scalarized_value_active(inst: MarketInstance, lam: Weights, ap: ActivePairs,
                            p, d, sig) -> float:
    """Reduced form of :func:`scalarized_objective` over active-pair arrays."""
    return ActiveEval(inst, lam, ap).value(p, d, sig)


def scalarized_gradient(inst: MarketInstance, lam: Weights, state: TradeState,
                        active_mask: TradeMask) -> np.ndarray:
    """Analytic gradient of the scalarized objective over the free variables.

    Layout: prices of the active pairs in row-major pair order, then demands,
    then discount fractions (the last block only when the discount cap is
    positive, since otherwise discounts are fixed at zero).  Pairs without
    tradeable capacity carry no free variables.
    """
    ap = solver_pairs(inst, active_mask)
    p, d, sig = active_from_state(inst, ap, state)
    return scalarized_grad_active(inst, lam, ap, p, d, sig)


def scalarized_grad_active(inst: MarketInstance, lam: Weights, ap: ActivePairs,
                           p, d, sig) -> np.ndarray:
    return ActiveEval(inst, lam, ap).grad(p, d, sig)


# ---------------------------------------------------------------------------
# Surrogate scalarization (sum of per-term logs) used by the consensus solver.

def surrogate_scalarized_objective(inst: MarketInstance, lam: Weights,
                                   state: TradeState,
                                   mask: TradeMask | None = None) -> float:
    """Scalarization with each log-of-sum replaced by the sum of term logs.

    The support of each agent is its active pairs plus the PCC slack column;
    slack quantities must stay strictly positive for the value to be finite.
    """
    lam.validate(inst.num_ders, inst.num_loads)
    if mask is None:
        mask = compute_trade_mask(inst)
    ap = solver_pairs(inst, mask)
    p, d, sig = active_from_state(inst, ap, state)
    return surrogate_value_active(inst, lam, ap, p, d, sig)


def surrogate_value_active(inst: MarketInstance, lam: Weights, ap: ActivePairs,
                           p, d, sig) -> float:
    return ActiveEval(inst, lam, ap, surrogate=True).value(p, d, sig)


def surrogate_grad_active(inst: MarketInstance, lam: Weights, ap: ActivePairs,
                          p, d, sig) -> np.ndarray:
    return ActiveEval(inst, lam, ap, surrogate=True).grad(p, d, sig)
