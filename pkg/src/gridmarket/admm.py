"""Region-partitioned consensus solver for the surrogate scalarization.

Agents are grouped into regions by the feeder branch that connects them to
the grid root.  Every objective term whose endpoints live in one region goes
to that region's local problem; terms straddling regions form a cross term
kept at the coordinator.  Each region minimizes its local terms plus a
proximal penalty over private copies of the variables it touches, the
coordinator averages copies into the global point (refining cross-pair
entries against the cross term), and scaled duals tie the two together.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .model import (MarketInstance, TradeState, baseline_state, check_feasible,
                    compute_trade_mask, objective_values, price_window,
                    validate_instance)
from .solver import (Solution, SolverOptions, _box_residual, _DemandProjector,
                     _spg)
from .transform import (ActivePairs, Weights, solver_pairs, state_from_active,
                        surrogate_scalarized_objective)

__all__ = [
    "RegionPartition",
    "AdmmTrace",
    "partition_by_branch",
    "split_objective",
    "SplitObjective",
    "admm_solve",
    "residual_trace",
    "write_trace_csv",
]


@dataclass(frozen=True)
class RegionPartition:
    """Disjoint, covering grouping of DERs and loads into regions 1..K."""

    num_regions: int
    der_members: tuple[tuple[int, ...], ...]
    load_members: tuple[tuple[int, ...], ...]

    def region_of_der(self, g: int) -> int:
        for k, members in enumerate(self.der_members):
            if g in members:
                return k
        raise KeyError(f"DER {g} not in partition")

    def region_of_load(self, l: int) -> int:
        for k, members in enumerate(self.load_members):
            if l in members:
                return k
        raise KeyError(f"load {l} not in partition")


def partition_by_branch(inst: MarketInstance) -> RegionPartition:
    """Group agents by their region ids; the topology is an input, never
    inferred.  Raises on missing, non-contiguous or empty regions."""
    if inst.der_regions is None or inst.load_regions is None:
        raise ValueError("instance carries no region assignment")
    if len(inst.der_regions) != inst.num_ders:
        raise ValueError("der_regions must assign every DER")
    if len(inst.load_regions) != inst.num_loads:
        raise ValueError("load_regions must assign every load")
    ids = set(inst.der_regions) | set(inst.load_regions)
    if min(ids) < 1:
        raise ValueError("region ids must be >= 1")
    K = max(ids)
    if ids != set(range(1, K + 1)):
        missing = sorted(set(range(1, K + 1)) - ids)
        raise ValueError(f"region ids must cover 1..{K}, missing {missing}")
    ders = tuple(tuple(g for g, r in enumerate(inst.der_regions) if r == k + 1)
                 for k in range(K))
    loads = tuple(tuple(l for l, r in enumerate(inst.load_regions) if r == k + 1)
                  for k in range(K))
    return RegionPartition(K, ders, loads)


# ---------------------------------------------------------------------------
# objective splitting

@dataclass
class SplitObjective:
    """Assignment of every surrogate term to one region or the cross sum."""

    inst: MarketInstance
    lam: Weights
    partition: RegionPartition
    ap: ActivePairs
    pair_region: np.ndarray   # region index per active pair, -1 for cross
    der_region: np.ndarray
    load_region: np.ndarray

    def _pieces(self, p, d, sig):
        inst = self.inst
        a = inst.discount_cap
        G, L = inst.num_ders, inst.num_loads
        lg, ll, lp = self.lam.split(G, L)
        with np.errstate(divide="ignore", invalid="ignore"):
            trade = (-lg[self.ap.ders] * (np.log(p) + np.log(d))
                     + ll[self.ap.loads] * (np.log(p * (1 - sig * a)) + np.log(d)))
            sold = np.bincount(self.ap.ders, weights=d, minlength=G)
            bought = np.bincount(self.ap.loads, weights=d, minlength=L)
            der_slack = -lg * (np.log(inst.pcc_buy_price)
                               + np.log(inst.surplus - sold))
            load_slack = ll * (np.log(inst.pcc_sell_price)
                               + np.log(inst.demand - bought))
        t_act = inst.target_demand[self.ap.loads, self.ap.ders]
        quad = np.bincount(self.ap.loads, weights=(d - t_act) ** 2, minlength=L)
        off = inst.target_demand.copy()
        off[self.ap.loads, self.ap.ders] = 0.0
        quad = lp * (quad + (off ** 2).sum(axis=1))
        return trade, der_slack, load_slack, quad

    def _arrays(self, state: TradeState):
        from .transform import active_from_state
        return active_from_state(self.inst, self.ap, state)

    def region_value(self, k: int, state: TradeState) -> float:
        p, d, sig = self._arrays(state)
        trade, der_slack, load_slack, quad = self._pieces(p, d, sig)
        val = trade[self.pair_region == k].sum()
        val += der_slack[self.der_region == k].sum()
        val += (load_slack + quad)[self.load_region == k].sum()
        return float(val)

    def cross_value(self, state: TradeState) -> float:
        p, d, sig = self._arrays(state)
        trade, _, _, _ = self._pieces(p, d, sig)
        return float(trade[self.pair_region == -1].sum())


def split_objective(inst: MarketInstance, lam: Weights,
                    partition: RegionPartition) -> SplitObjective:
    """Assign each surrogate term to the region holding both its endpoints,
    or to the cross sum when they straddle regions.  PCC slack and distance
    terms follow the agent that owns them.  Summing all assignments
    reproduces the surrogate scalarization exactly."""
    lam.validate(inst.num_ders, inst.num_loads)
    ap = solver_pairs(inst, compute_trade_mask(inst))
    der_region = np.array([partition.region_of_der(g) for g in range(inst.num_ders)])
    load_region = np.array([partition.region_of_load(l) for l in range(inst.num_loads)])
    pr = np.where(der_region[ap.ders] == load_region[ap.loads],
                  der_region[ap.ders], -1)
    return SplitObjective(inst, lam, partition, ap, pr, der_region, load_region)


# ---------------------------------------------------------------------------
# local subproblems

class _LocalProblem:
    """Region subproblem over private copies of every variable the region
    touches: assigned surrogate terms plus the proximal consensus penalty."""

    def __init__(self, split: SplitObjective, k: int, opts: SolverOptions,
                 has_sigma: bool):
        inst = split.inst
        self.inst = inst
        self.split = split
        self.k = k
        self.opts = opts
        self.has_sigma = has_sigma
        self.alpha = inst.discount_cap
        ap = split.ap
        touched = np.where((split.der_region[ap.ders] == k)
                           | (split.load_region[ap.loads] == k))[0]
        self.local_pairs = touched                    # indices into ap order
        self.ders = ap.ders[touched]
        self.loads = ap.loads[touched]
        self.intra = split.pair_region[touched] == k
        self.own_ders = np.array(split.partition.der_members[k], dtype=int)
        self.own_loads = np.array(split.partition.load_members[k], dtype=int)
        # consensus applies to the demand copies of cross pairs; everything
        # else in the copy vector is private to this region (or, for cross
        # prices and discounts, owned by the coordinator's cross term)
        n_loc = touched.size
        shared = np.zeros(self.nvar_for(n_loc), dtype=bool)
        shared[n_loc:2 * n_loc] = ~self.intra
        self.shared = shared

        n = touched.size
        lo = np.empty(n)
        hi = np.empty(n)
        for j in range(n):
            w_lo, w_hi = price_window(inst, int(self.ders[j]), int(self.loads[j]))
            lo[j], hi[j] = max(w_lo, opts.floor), w_hi
        self.p_lo, self.p_hi = lo, hi

        margin_row = 1e-6 * np.maximum(inst.demand, 1.0)
        margin_col = 1e-6 * np.maximum(inst.surplus, 1.0)
        row_caps = inst.demand - margin_row
        col_caps = inst.surplus - margin_col
        own_rows = [(np.where(self.loads == l)[0], row_caps[l]) for l in self.own_loads]
        own_cols = [(np.where(self.ders == g)[0], col_caps[g]) for g in self.own_ders]
        self.proj_d = _DemandProjector(own_rows, own_cols, opts.floor)

        G, L = inst.num_ders, inst.num_loads
        lg, ll, lp = split.lam.split(G, L)
        self.lg_pair = lg[self.ders]
        self.ll_pair = ll[self.loads]
        self.lg_own = lg[self.own_ders]
        self.ll_own = ll[self.own_loads]
        self.lp_own = lp[self.own_loads]
        self.t_act = inst.target_demand[self.loads, self.ders]
        off = inst.target_demand.copy()
        off[split.ap.loads, split.ap.ders] = 0.0
        self.quad_const = float((lp[self.own_loads]
                                 * (off[self.own_loads] ** 2).sum(axis=1)).sum())
        self.slack_const = float(
            -(self.lg_own * np.log(inst.pcc_buy_price[self.own_ders])).sum()
            + (self.ll_own * np.log(inst.pcc_sell_price[self.own_loads])).sum())
        # the load-side quadratic covers every pair of an owned load
        self.lp_pair = np.zeros(self.loads.size)
        for j, l in enumerate(self.own_loads):
            self.lp_pair[self.loads == l] = self.lp_own[j]
        self.quad_mask = np.isin(self.loads, self.own_loads)
        self.rho = 1.0
        self.center = None

    def nvar_for(self, n: int) -> int:
        return 3 * n if self.has_sigma else 2 * n

    @property
    def nvar(self) -> int:
        return self.nvar_for(self.local_pairs.size)

    def set_prox(self, rho: float, center: np.ndarray) -> None:
        """Anchor the shared (cross-pair demand) copies; private entries
        carry no penalty."""
        self.rho = rho
        self.center = center

    def unpack(self, v):
        n = self.local_pairs.size
        p, d = v[:n], v[n:2 * n]
        sig = v[2 * n:] if self.has_sigma else np.zeros(n)
        return p, d, sig

    def pack(self, p, d, sig):
        if self.has_sigma:
            return np.concatenate([p, d, sig])
        return np.concatenate([p, d])

    def blocks(self) -> list[slice]:
        n = self.local_pairs.size
        out = [slice(0, n), slice(n, 2 * n)]
        if self.has_sigma:
            out.append(slice(2 * n, 3 * n))
        return out

    def project(self, v):
        p, d, sig = self.unpack(v)
        p = np.clip(p, self.p_lo, self.p_hi)
        d = self.proj_d(d)
        if self.has_sigma:
            sig = np.clip(sig, 0.0, 1.0)
        return self.pack(p, d, sig)

    def _slacks(self, d):
        inst = self.inst
        h0 = inst.surplus[self.own_ders].copy()
        for j, idx in enumerate(self.own_ders):
            h0[j] -= d[self.ders == idx].sum()
        d0 = inst.demand[self.own_loads].copy()
        for j, idx in enumerate(self.own_loads):
            d0[j] -= d[self.loads == idx].sum()
        return h0, d0

    def value(self, v) -> float:
        p, d, sig = self.unpack(v)
        if np.any(p <= 0) or np.any(d <= 0):
            return float("inf")
        eff = p * (1.0 - sig * self.alpha)
        if np.any(eff <= 0):
            return float("inf")
        h0, d0 = self._slacks(d)
        if np.any(h0 <= 0) or np.any(d0 <= 0):
            return float("inf")
        val = self.slack_const + self.quad_const
        m = self.intra
        val += float((-self.lg_pair[m] * (np.log(p[m]) + np.log(d[m]))).sum())
        val += float((self.ll_pair[m] * (np.log(eff[m]) + np.log(d[m]))).sum())
        val += float(-(self.lg_own * np.log(h0)).sum()
                     + (self.ll_own * np.log(d0)).sum())
        q = self.quad_mask
        val += float((self.lp_pair[q] * (d[q] - self.t_act[q]) ** 2).sum())
        if self.center is not None:
            r = (v - self.center)[self.shared]
            val += 0.5 * self.rho * float(r @ r)
        return val

    def grad(self, v) -> np.ndarray:
        p, d, sig = self.unpack(v)
        eff_f = 1.0 - sig * self.alpha
        h0, d0 = self._slacks(d)
        m = self.intra
        g_p = np.zeros_like(p)
        g_d = np.zeros_like(d)
        g_s = np.zeros_like(sig)
        g_p[m] = (self.ll_pair[m] - self.lg_pair[m]) / p[m]
        g_d[m] = (self.ll_pair[m] - self.lg_pair[m]) / d[m]
        if self.has_sigma:
            g_s[m] = -self.ll_pair[m] * self.alpha / eff_f[m]
        for j, g in enumerate(self.own_ders):
            sel = self.ders == g
            g_d[sel] += self.lg_own[j] / h0[j]
        for j, l in enumerate(self.own_loads):
            sel = self.loads == l
            g_d[sel] += -self.ll_own[j] / d0[j] \
                + 2.0 * self.lp_own[j] * (d[sel] - self.t_act[sel])
        out = self.pack(g_p, g_d, g_s)
        if self.center is not None:
            out = out + np.where(self.shared, self.rho * (v - self.center), 0.0)
        return out

    def box_residual(self, v, g) -> float:
        p, _, sig = self.unpack(v)
        n = self.local_pairs.size
        out = _box_residual(p, g[:n], self.p_lo, self.p_hi).max(initial=0.0)
        if self.has_sigma:
            out = max(out, _box_residual(sig, g[2 * n:], np.zeros(n),
                                         np.ones(n)).max(initial=0.0))
        return float(out)

    def residual(self, v, g) -> float:
        _, d, _ = self.unpack(v)
        n = self.local_pairs.size
        gd = g[n:2 * n]
        demand_part = np.abs(d - self.proj_d(d - gd)).max(initial=0.0)
        return max(self.box_residual(v, g), float(demand_part))


# ---------------------------------------------------------------------------
# coordinator

@dataclass
class AdmmTrace:
    rows: list  # (iteration, primal_residual, dual_residual, objective)

    def __len__(self):
        return len(self.rows)


def residual_trace(trace: AdmmTrace) -> list[tuple[float, float]]:
    """Per-iteration (primal, dual) residual pairs of a consensus run."""
    if not trace.rows:
        raise ValueError("empty trace")
    return [(row[1], row[2]) for row in trace.rows]


def write_trace_csv(trace: AdmmTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "primal_residual", "dual_residual", "objective"])
        for row in trace.rows:
            w.writerow([row[0], f"{row[1]:.10g}", f"{row[2]:.10g}", f"{row[3]:.10g}"])


def admm_solve(inst: MarketInstance, lam: Weights, partition: RegionPartition,
               rho: float = 1.0, opts: SolverOptions | None = None, *,
               tol_admm: float = 1e-6,
               max_outer: int = 300) -> tuple[Solution, AdmmTrace]:
    """Consensus minimization of the surrogate scalarization.

    Each outer iteration runs the region subproblems (independent, could be
    dispatched concurrently), averages copies into the global point while
    refining cross-pair entries against the cross term, and lifts the scaled
    duals.  Stops when the root-mean-square primal and dual residuals both
    drop below ``tol_admm``; otherwise the best reconciled iterate comes
    back flagged unconverged.
    """
    if rho <= 0:
        raise ValueError("rho must be > 0")
    opts = opts or SolverOptions()
    problems = validate_instance(inst)
    if problems:
        raise ValueError("invalid instance: " + "; ".join(problems))
    lam.validate(inst.num_ders, inst.num_loads)

    split = split_objective(inst, lam, partition)
    ap = split.ap
    mask = compute_trade_mask(inst)
    if ap.n == 0:
        state = baseline_state(inst)
        obj = surrogate_scalarized_objective(inst, lam, state, mask)
        sol = Solution(state, obj, objective_values(inst, state), 0.0, True,
                       0, 1, "surrogate")
        return sol, AdmmTrace(rows=[])

    has_sigma = inst.discount_cap > 0
    nblk = 3 if has_sigma else 2
    nvar = nblk * ap.n
    locals_ = [_LocalProblem(split, k, opts, has_sigma)
               for k in range(partition.num_regions)]
    idx_maps = []
    for lp_ in locals_:
        blocks = [lp_.local_pairs + b * ap.n for b in range(nblk)]
        idx_maps.append(np.concatenate(blocks))

    cross = np.where(split.pair_region == -1)[0]
    intra = np.where(split.pair_region >= 0)[0]
    shared_global = ap.n + cross                       # demand entries of cross pairs
    # private entries belong to the region owning the pair; cross prices and
    # discount fractions belong to the coordinator's cross term
    private_of = {}
    for k, lp_ in enumerate(locals_):
        for pos, j in enumerate(lp_.local_pairs):
            if split.pair_region[j] == k:
                for b in range(nblk):
                    private_of[b * ap.n + j] = (k, pos + b * lp_.local_pairs.size)
    copies = np.zeros(nvar)
    for k, lp_ in enumerate(locals_):
        copies[idx_maps[k][lp_.shared]] += 1.0

    x = _initial_global(inst, ap, opts, has_sigma)
    vs = [x[idx].copy() for idx in idx_maps]
    us = [np.zeros(idx.size) for idx in idx_maps]

    inner_opts = replace(opts, num_restarts=1,
                         max_iter=min(opts.max_iter, 500),
                         tol_grad=min(opts.tol_grad, 0.01 * tol_admm))
    lg, ll, _ = lam.split(inst.num_ders, inst.num_loads)

    rows = []
    best = None
    converged = False
    it = 0
    n_shared_copies = int(copies.sum())
    for it in range(1, max_outer + 1):
        inner_ok = True
        for k, lp_ in enumerate(locals_):
            lp_.set_prox(rho, x[idx_maps[k]] - us[k])
            out = _spg(lp_, vs[k], inner_opts)
            if out is not None:
                vs[k] = out[0]
                inner_ok = inner_ok and out[3]
            else:
                inner_ok = False
        x_prev = x.copy()
        # private entries pass straight through from their owning region
        for entry, (k, pos) in private_of.items():
            x[entry] = vs[k][pos]
        # shared demand copies: average with duals, then pull against the
        # cross term's log weight
        for j in cross:
            g, l = int(ap.ders[j]), int(ap.loads[j])
            entry = ap.n + j
            m_acc = 0.0
            for k, lp_ in enumerate(locals_):
                where = np.where(idx_maps[k] == entry)[0]
                if where.size:
                    m_acc += vs[k][where[0]] + us[k][where[0]]
            m = m_acc / copies[entry]
            d_hi = max(min(float(inst.demand[l]), float(inst.surplus[g])),
                       2 * opts.floor)
            x[entry] = _prox_log_quad(ll[l] - lg[g], rho * copies[entry], m,
                                      opts.floor, d_hi)
            # coordinator-owned price and discount of the cross pair
            w_lo, w_hi = price_window(inst, g, l)
            w_lo = max(w_lo, opts.floor)
            weight = ll[l] - lg[g]
            if weight > 0:
                x[j] = w_lo
            elif weight < 0:
                x[j] = w_hi
            else:
                x[j] = min(max(x[j], w_lo), w_hi)
            if has_sigma:
                x[2 * ap.n + j] = 1.0 if ll[l] > 0 else x[2 * ap.n + j]
        for k, lp_ in enumerate(locals_):
            sh = lp_.shared
            us[k][sh] += vs[k][sh] - x[idx_maps[k][sh]]

        if n_shared_copies:
            primal_sq = sum(float(((vs[k][lp_.shared]
                                    - x[idx_maps[k][lp_.shared]]) ** 2).sum())
                            for k, lp_ in enumerate(locals_))
            primal = (primal_sq / n_shared_copies) ** 0.5
            dual_sq = sum(float(((x[idx_maps[k][lp_.shared]]
                                  - x_prev[idx_maps[k][lp_.shared]]) ** 2).sum())
                          for k, lp_ in enumerate(locals_))
            dual = rho * (dual_sq / n_shared_copies) ** 0.5
        else:
            primal = dual = 0.0

        state = _reconcile(inst, ap, x, has_sigma, opts)
        obj = surrogate_scalarized_objective(inst, lam, state, mask)
        rows.append((it, primal, dual, obj))
        if best is None or obj < best[0]:
            best = (obj, x.copy())
        if primal < tol_admm and dual < tol_admm and inner_ok:
            converged = True
            break

    x_final = x if converged else best[1]
    state = _reconcile(inst, ap, x_final, has_sigma, opts)
    obj = surrogate_scalarized_objective(inst, lam, state, mask)
    sol = Solution(state, obj, objective_values(inst, state),
                   _global_residual(inst, lam, mask, state, opts), converged,
                   it, 1, "surrogate")
    leftovers = check_feasible(inst, state)
    if leftovers:
        sol.notes = tuple(["reconciliation left violations"] + leftovers)
    return sol, AdmmTrace(rows=rows)


def _prox_log_quad(c: float, k_pen: float, m: float, lo: float, hi: float) -> float:
    """Minimize c*log(w) + (k/2)(w - m)^2 over [lo, hi] in closed form.

    Stationary points solve k w^2 - k m w + c = 0; with c > 0 the function
    may be monotone or carry an interior max/min pair, so bound candidates
    are compared explicitly.
    """
    if hi - lo < 1e-14:
        return lo

    def fun(w):
        return c * np.log(max(w, 1e-300)) + 0.5 * k_pen * (w - m) ** 2

    cands = [lo, hi]
    disc = m * m - 4.0 * c / k_pen
    if disc >= 0:
        root = 0.5 * (m + disc ** 0.5)
        if lo < root < hi:
            cands.append(root)
    return min(cands, key=fun)


def _initial_global(inst, ap, opts, has_sigma):
    lo = np.empty(ap.n)
    hi = np.empty(ap.n)
    for k in range(ap.n):
        w_lo, w_hi = price_window(inst, int(ap.ders[k]), int(ap.loads[k]))
        lo[k], hi[k] = max(w_lo, opts.floor), w_hi
    p = 0.5 * (lo + hi)
    t = np.maximum(inst.target_demand[ap.loads, ap.ders], opts.floor)
    margin_row = 1e-6 * np.maximum(inst.demand, 1.0)
    margin_col = 1e-6 * np.maximum(inst.surplus, 1.0)
    proj = _DemandProjector.for_pairs(ap, opts.floor, inst.demand - margin_row,
                                      inst.surplus - margin_col)
    d = proj(0.5 * t)
    sig = np.full(ap.n, 0.5)
    if has_sigma:
        return np.concatenate([p, d, sig])
    return np.concatenate([p, d])


def _reconcile(inst, ap, x, has_sigma, opts):
    n = ap.n
    p = np.clip(x[:n], *_price_bounds(inst, ap, opts))
    margin_row = 1e-6 * np.maximum(inst.demand, 1.0)
    margin_col = 1e-6 * np.maximum(inst.surplus, 1.0)
    proj = _DemandProjector.for_pairs(ap, opts.floor, inst.demand - margin_row,
                                      inst.surplus - margin_col)
    d = proj(x[n:2 * n])
    sig = np.clip(x[2 * n:], 0.0, 1.0) if has_sigma else np.zeros(n)
    return state_from_active(inst, ap, p, d, sig)


def _price_bounds(inst, ap, opts):
    lo = np.empty(ap.n)
    hi = np.empty(ap.n)
    for k in range(ap.n):
        w_lo, w_hi = price_window(inst, int(ap.ders[k]), int(ap.loads[k]))
        lo[k], hi[k] = max(w_lo, opts.floor), w_hi
    return lo, hi


def _global_residual(inst, lam, mask, state, opts):
    from .solver import _Workspace
    from .transform import active_from_state
    ws = _Workspace(inst, lam, mask, opts, surrogate=True)
    if ws.ap.n == 0:
        return 0.0
    p, d, sig = active_from_state(inst, ws.ap, state)
    x = ws.project(ws.pack(p, d, sig))
    return ws.residual(x, ws.grad(x))
