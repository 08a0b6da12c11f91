"""Centralized solver: projected spectral gradient descent with multi-start,
first-order optimality residuals, a grid-search oracle and weight sweeps.

The decision space is reduced to one (price, demand, discount fraction)
triple per tradeable pair: allocations mirror demands through the
consistency constraint, PCC slack columns absorb remainders, and the
bilinear discount cap becomes a box by writing each discount as a fraction
of its price.  Projections are exact per block; the coupled row/column
demand polytope is projected with Dykstra's alternating scheme.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .model import (MarketInstance, ObjectiveValues, TradeState, baseline_state,
                    compute_trade_mask, objective_values, price_window,
                    validate_instance)
from .transform import (ActiveEval, ActivePairs, Weights, active_from_state,
                        scalarized_objective, solver_pairs, state_from_active,
                        surrogate_scalarized_objective)

__all__ = [
    "SolverOptions",
    "Solution",
    "SolverError",
    "solve_scalarized",
    "kkt_residual",
    "brute_force_oracle",
    "oracle_cell_bound",
    "pareto_sweep",
    "default_lambda",
]


class SolverError(RuntimeError):
    """Raised when no restart produced a finite objective."""


@dataclass(frozen=True)
class SolverOptions:
    max_iter: int = 5000
    tol_grad: float = 1e-7
    tol_step: float = 1e-10
    num_restarts: int = 8
    rng_seed: int = 0
    floor: float = 1e-8

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        for name in ("tol_grad", "tol_step", "floor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.num_restarts < 1:
            raise ValueError("num_restarts must be >= 1")


@dataclass
class Solution:
    state: TradeState
    objective: float
    objective_parts: ObjectiveValues
    kkt_residual: float
    converged: bool
    iterations: int
    restarts_used: int
    objective_kind: str = "scalarized"
    notes: tuple[str, ...] = ()


def default_lambda(num_ders: int, num_loads: int) -> Weights:
    """Reference weights: every load counts 1/0.3 of a DER and every
    distance term ten times a DER, normalized onto the simplex."""
    if num_ders < 1 or num_loads < 1:
        raise ValueError("need at least one DER and one load")
    base = np.concatenate([
        np.ones(num_ders),
        np.full(num_loads, 1.0 / 0.3),
        np.full(num_loads, 10.0),
    ])
    return Weights(base / base.sum())


# ---------------------------------------------------------------------------
# projections

def _project_floor_sum(v: np.ndarray, floor: float, cap: float) -> np.ndarray:
    """Euclidean projection onto {x >= floor, sum(x) <= cap}."""
    if v.size == 1:
        return np.clip(v, floor, max(cap, floor))
    u = v - floor
    budget = cap - floor * v.size
    if budget <= 0:
        return np.full_like(v, floor)
    w = np.maximum(u, 0.0)
    if w.sum() <= budget:
        return floor + w
    srt = np.sort(u)[::-1]
    theta = (np.cumsum(srt) - budget) / np.arange(1, u.size + 1)
    k = np.nonzero(srt > theta)[0][-1]
    return floor + np.maximum(u - theta[k], 0.0)


class _DemandProjector:
    """Dykstra projection onto the intersection of per-load row caps and
    per-DER column caps, with a positivity floor on every entry."""

    def __init__(self, row_sets, col_sets, floor: float):
        self.floor = floor
        self.rows = [(idx, float(cap)) for idx, cap in row_sets if idx.size]
        self.cols = [(idx, float(cap)) for idx, cap in col_sets if idx.size]
        caps = [cap for _, cap in self.rows] + [cap for _, cap in self.cols]
        self.scale = max(caps + [1.0])

    @classmethod
    def for_pairs(cls, ap: ActivePairs, floor: float,
                  row_caps: np.ndarray, col_caps: np.ndarray):
        rows = [(np.where(ap.loads == l)[0], row_caps[l]) for l in np.unique(ap.loads)]
        cols = [(np.where(ap.ders == g)[0], col_caps[g]) for g in np.unique(ap.ders)]
        return cls(rows, cols, floor)

    def _rows(self, v):
        out = v.copy()
        for idx, cap in self.rows:
            out[idx] = _project_floor_sum(v[idx], self.floor, cap)
        return out

    def _cols(self, v):
        out = v.copy()
        for idx, cap in self.cols:
            out[idx] = _project_floor_sum(v[idx], self.floor, cap)
        return out

    def __call__(self, v: np.ndarray) -> np.ndarray:
        x = np.asarray(v, dtype=float).copy()
        covered = np.zeros(x.size, dtype=bool)
        for idx, _ in self.rows + self.cols:
            covered[idx] = True
        # entries under no sum constraint only carry the floor
        x[~covered] = np.maximum(x[~covered], self.floor)
        if not self.rows and not self.cols:
            return x
        p_corr = np.zeros_like(x)
        q_corr = np.zeros_like(x)
        tol = 1e-13 * self.scale
        for _ in range(500):
            y = self._rows(x + p_corr)
            p_corr = x + p_corr - y
            x_new = self._cols(y + q_corr)
            q_corr = y + q_corr - x_new
            if np.max(np.abs(x_new - x)) < tol:
                return x_new
            x = x_new
        return x


class _Workspace:
    """Bounds, projections and objective callbacks for one (instance, weights,
    mask) triple.  ``surrogate=True`` switches to the sum-of-term-logs
    objective, which additionally needs strictly positive PCC slacks and so
    shrinks the row/column caps by a relative margin."""

    def __init__(self, inst: MarketInstance, lam: Weights, mask, opts: SolverOptions,
                 surrogate: bool = False):
        self.inst = inst
        self.lam = lam
        self.opts = opts
        self.surrogate = surrogate
        self.ap = solver_pairs(inst, mask, opts.floor)
        n = self.ap.n
        self.has_sigma = inst.discount_cap > 0
        self.nvar = 3 * n if self.has_sigma else 2 * n

        lo = np.empty(n)
        hi = np.empty(n)
        for k in range(n):
            w_lo, w_hi = price_window(inst, int(self.ap.ders[k]), int(self.ap.loads[k]))
            lo[k], hi[k] = max(w_lo, opts.floor), w_hi
        self.p_lo, self.p_hi = lo, hi

        margin_row = 1e-6 * np.maximum(inst.demand, 1.0) if surrogate else 0.0
        margin_col = 1e-6 * np.maximum(inst.surplus, 1.0) if surrogate else 0.0
        self.row_caps = inst.demand - margin_row
        self.col_caps = inst.surplus - margin_col
        self.proj_d = _DemandProjector.for_pairs(self.ap, opts.floor,
                                                 self.row_caps, self.col_caps)
        self.d_cap_entry = np.minimum(self.row_caps[self.ap.loads],
                                      self.col_caps[self.ap.ders])

        lg, ll, lp = lam.split(inst.num_ders, inst.num_loads)
        if np.any((inst.surplus <= 0) & (lg > 0)) or \
                np.any((inst.demand <= 0) & (ll > 0)):
            raise ValueError("agent with zero capacity carries positive weight; "
                             "its log term is undefined")
        self.eval = ActiveEval(inst, lam, self.ap, surrogate=surrogate)

    # -- packing -----------------------------------------------------------
    def pack(self, p, d, sig):
        if self.has_sigma:
            return np.concatenate([p, d, sig])
        return np.concatenate([p, d])

    def unpack(self, x):
        n = self.ap.n
        p, d = x[:n], x[n:2 * n]
        sig = x[2 * n:] if self.has_sigma else np.zeros(n)
        return p, d, sig

    def blocks(self) -> list[slice]:
        n = self.ap.n
        out = [slice(0, n), slice(n, 2 * n)]
        if self.has_sigma:
            out.append(slice(2 * n, 3 * n))
        return out

    # -- geometry ----------------------------------------------------------
    def project(self, x):
        p, d, sig = self.unpack(x)
        p = np.clip(p, self.p_lo, self.p_hi)
        d = self.proj_d(d)
        if self.has_sigma:
            sig = np.clip(sig, 0.0, 1.0)
        return self.pack(p, d, sig)

    def value(self, x) -> float:
        p, d, sig = self.unpack(x)
        return self.eval.value(p, d, sig)

    def grad(self, x) -> np.ndarray:
        p, d, sig = self.unpack(x)
        return self.eval.grad(p, d, sig)

    def box_residual(self, x, g) -> float:
        """The cheap residual parts: price and discount boxes only."""
        p, _, sig = self.unpack(x)
        n = self.ap.n
        out = _box_residual(p, g[:n], self.p_lo, self.p_hi).max(initial=0.0)
        if self.has_sigma:
            out = max(out, _box_residual(sig, g[2 * n:], np.zeros(n),
                                         np.ones(n)).max(initial=0.0))
        return float(out)

    def residual(self, x, g) -> float:
        """First-order optimality measure: plain gradient magnitude on
        interior coordinates, inward directional slope at active bounds,
        unit-step projected-gradient displacement on the coupled demand
        block.  Zero at a stationary point."""
        _, d, _ = self.unpack(x)
        n = self.ap.n
        gd = g[n:2 * n]
        demand_part = np.abs(d - self.proj_d(d - gd)).max(initial=0.0)
        return max(self.box_residual(x, g), float(demand_part))


def _box_residual(x, g, lo, hi):
    btol = 1e-12 + 1e-9 * (hi - lo)
    r = np.abs(g)
    r = np.where(x <= lo + btol, np.maximum(0.0, -g), r)
    r = np.where(x >= hi - btol, np.maximum(0.0, g), r)
    return np.where(hi - lo <= 2 * btol, 0.0, r)


# ---------------------------------------------------------------------------
# spectral projected gradient engine

def _spg(ws, x0: np.ndarray, opts: SolverOptions):
    """Minimize ws.value over the feasible set from x0.

    Projected spectral descent: per-block Barzilai-Borwein step lengths
    (the price, demand and discount blocks carry very different curvature)
    inside the projection arc, safeguarded by a nonmonotone Armijo search
    with 10-step memory.  Returns (x, f, residual, converged, iterations)
    or None when the start has no finite value.
    """
    x = ws.project(np.asarray(x0, dtype=float))
    f = ws.value(x)
    if not np.isfinite(f):
        return None
    g = ws.grad(x)
    hist = [f]
    blocks = ws.blocks()
    t = np.empty(len(blocks))
    for b, sl in enumerate(blocks):
        t[b] = 1.0 / max(float(np.max(np.abs(g[sl]), initial=0.0)), 1e-8)
    scaled = np.empty_like(x)
    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        if ws.box_residual(x, g) < opts.tol_grad and \
                ws.residual(x, g) < opts.tol_grad:
            converged = True
            break
        for b, sl in enumerate(blocks):
            scaled[sl] = t[b] * g[sl]
        step_dir = ws.project(x - scaled) - x
        if np.max(np.abs(step_dir)) <= opts.tol_step * (1.0 + np.max(np.abs(x))):
            break
        slope = float(g @ step_dir)
        f_ref = max(hist[-10:])
        alpha = 1.0
        accepted = False
        for _ in range(40):
            x_new = x + alpha * step_dir
            f_new = ws.value(x_new)
            if np.isfinite(f_new) and f_new <= f_ref + 1e-4 * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        g_new = ws.grad(x_new)
        s = x_new - x
        y = g_new - g
        for b, sl in enumerate(blocks):
            sty = float(s[sl] @ y[sl])
            ss = float(s[sl] @ s[sl])
            if sty > 1e-30 and ss > 0:
                t[b] = min(max(ss / sty, 1e-11), 1e11)
            elif ss > 0:
                t[b] = min(t[b] * 2.0, 1e11)
        x, f, g = x_new, f_new, g_new
        hist.append(f)
    res = ws.residual(x, ws.grad(x))
    return x, f, res, res < opts.tol_grad or converged, it


def _start_points(ws: _Workspace, rng: np.random.Generator) -> list[np.ndarray]:
    inst, opts, ap = ws.inst, ws.opts, ws.ap
    n = ap.n
    p_mid = 0.5 * (ws.p_lo + ws.p_hi)
    floor_d = np.full(n, opts.floor)
    starts = [ws.pack(p_mid, floor_d, np.zeros(n))]
    t_act = inst.target_demand[ap.loads, ap.ders]
    starts.append(ws.pack(p_mid, np.maximum(t_act, opts.floor), np.ones(n)))
    while len(starts) < opts.num_restarts:
        p = rng.uniform(ws.p_lo, ws.p_hi)
        d = rng.uniform(opts.floor, np.maximum(ws.d_cap_entry, 2 * opts.floor))
        sig = rng.uniform(0.0, 1.0, n)
        starts.append(ws.pack(p, d, sig))
    return starts[:opts.num_restarts]


def solve_scalarized(inst: MarketInstance, lam: Weights,
                     opts: SolverOptions | None = None, *,
                     surrogate: bool = False) -> Solution:
    """Best feasible state found by multi-start projected descent.

    With ``surrogate=True`` the sum-of-term-logs objective used by the
    consensus solver is minimized instead of the scalarized one; the
    returned ``objective`` then reports that value (``objective_kind`` says
    which).  When no pair can trade the no-trade baseline is returned
    directly, with a note if the demand targets are thereby unreachable.
    """
    opts = opts or SolverOptions()
    problems = validate_instance(inst)
    if problems:
        raise ValueError("invalid instance: " + "; ".join(problems))
    lam.validate(inst.num_ders, inst.num_loads)

    mask = compute_trade_mask(inst)
    kind = "surrogate" if surrogate else "scalarized"
    if not mask.active.any():
        state = baseline_state(inst)
        notes = []
        _, _, lp = lam.split(inst.num_ders, inst.num_loads)
        if float(lp @ (inst.target_demand ** 2).sum(axis=1)) > 0:
            notes.append("target unreachable: no pair may trade")
        obj = (surrogate_scalarized_objective(inst, lam, state, mask) if surrogate
               else scalarized_objective(inst, lam, state))
        return Solution(state, obj, objective_values(inst, state), 0.0, True,
                        0, 0, kind, tuple(notes))

    ws = _Workspace(inst, lam, mask, opts, surrogate=surrogate)
    rng = np.random.default_rng(np.random.SeedSequence(opts.rng_seed))
    starts = _start_points(ws, rng)
    best = None
    for x0 in starts:
        out = _spg(ws, x0, opts)
        if out is None:
            continue
        x, f, res, conv, iters = out
        key = tuple(x)
        if best is None or f < best[1] or (f == best[1] and key < best[5]):
            best = (x, f, res, conv, iters, key)
    if best is None:
        raise SolverError("all restarts produced non-finite objectives")

    x, f, res, conv, iters, _ = best
    p, d, sig = ws.unpack(x)
    state = state_from_active(inst, ws.ap, p, d, sig)
    obj = (surrogate_scalarized_objective(inst, lam, state, mask) if surrogate
           else scalarized_objective(inst, lam, state))
    return Solution(state, obj, objective_values(inst, state), res, conv,
                    iters, len(starts), kind)


def kkt_residual(inst: MarketInstance, lam: Weights, solution: Solution) -> float:
    """First-order stationarity residual of a solution state.

    The state is first snapped onto the solver parametrization (demands
    floored, discounts read as fractions of their prices); coordinates with
    no room to move contribute nothing.
    """
    mask = compute_trade_mask(inst)
    if not mask.active.any():
        return 0.0
    ws = _Workspace(inst, lam, mask, SolverOptions(),
                    surrogate=solution.objective_kind == "surrogate")
    p, d, sig = active_from_state(inst, ws.ap, solution.state)
    x = ws.project(ws.pack(p, d, sig))
    return ws.residual(x, ws.grad(x))


# ---------------------------------------------------------------------------
# grid-search oracle

def _axis(lo: float, hi: float, n: int) -> np.ndarray:
    if n == 1:
        return np.array([0.5 * (lo + hi)])
    return np.linspace(lo, hi, n)


def brute_force_oracle(inst: MarketInstance, lam: Weights,
                       grid_per_axis: int) -> tuple[TradeState, float]:
    """Exhaustive grid search over the active (price, demand, fraction) axes.

    Only instances with at most two active pairs are accepted; beyond that
    the axis product explodes.  Demand axes start at zero so the no-trade
    state is always a candidate.  Returns the grid-best feasible state and
    its objective value.
    """
    lam.validate(inst.num_ders, inst.num_loads)
    mask = compute_trade_mask(inst)
    ap = solver_pairs(inst, mask)
    if ap.n > 2:
        raise ValueError(f"too many active pairs ({ap.n}) for a grid oracle")
    if ap.n == 0:
        state = baseline_state(inst)
        return state, scalarized_objective(inst, lam, state)

    a = inst.discount_cap
    n = grid_per_axis
    axes = []
    for k in range(ap.n):
        g, l = int(ap.ders[k]), int(ap.loads[k])
        lo, hi = price_window(inst, g, l)
        axes.append(_axis(lo, hi, n))
    for k in range(ap.n):
        g, l = int(ap.ders[k]), int(ap.loads[k])
        cap = min(float(inst.demand[l]), float(inst.surplus[g]))
        axes.append(_axis(0.0, cap, n))
    for k in range(ap.n):
        axes.append(_axis(0.0, 1.0, n) if a > 0 else np.array([0.0]))

    sizes = [ax.size for ax in axes]
    total = math.prod(sizes)
    lg, ll, lp = lam.split(inst.num_ders, inst.num_loads)
    gam = inst.pcc_buy_price
    pi = inst.pcc_sell_price
    t_act = inst.target_demand[ap.loads, ap.ders]

    # agents untouched by any active pair contribute constants
    touched_g = set(int(g) for g in ap.ders)
    touched_l = set(int(l) for l in ap.loads)
    const = 0.0
    for g in range(inst.num_ders):
        if g not in touched_g and lg[g] > 0:
            const -= lg[g] * math.log(inst.surplus[g] * gam[g])
    off_sq = inst.target_demand.copy()
    off_sq[ap.loads, ap.ders] = 0.0
    for l in range(inst.num_loads):
        if l not in touched_l and ll[l] > 0:
            const += ll[l] * math.log(inst.demand[l] * pi[l])
        const += lp[l] * float((off_sq[l] ** 2).sum())

    best_val = np.inf
    best_combo = None
    chunk = max(1, int(2e6) // max(1, 3 * ap.n))
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        coords = np.unravel_index(idx, sizes)
        vals = [axes[i][coords[i]] for i in range(len(axes))]
        ps = vals[:ap.n]
        ds = vals[ap.n:2 * ap.n]
        sgs = vals[2 * ap.n:]

        ok = np.ones(idx.size, dtype=bool)
        for l in touched_l:
            tot = sum(ds[k] for k in range(ap.n) if ap.loads[k] == l)
            ok &= tot <= inst.demand[l] + 1e-12
        for g in touched_g:
            tot = sum(ds[k] for k in range(ap.n) if ap.ders[k] == g)
            ok &= tot <= inst.surplus[g] + 1e-12

        obj = np.full(idx.size, const)
        for g in touched_g:
            u = inst.surplus[g] * gam[g]
            for k in range(ap.n):
                if ap.ders[k] == g:
                    u = u + (ps[k] - gam[g]) * ds[k]
            if lg[g] > 0:
                obj = obj - lg[g] * np.log(np.maximum(u, 1e-300))
                ok &= u > 0
        for l in touched_l:
            u = inst.demand[l] * pi[l]
            dist = 0.0
            for k in range(ap.n):
                if ap.loads[k] == l:
                    u = u - (pi[l] - ps[k] * (1.0 - sgs[k] * a)) * ds[k]
                    dist = dist + (ds[k] - t_act[k]) ** 2
            if ll[l] > 0:
                obj = obj + ll[l] * np.log(np.maximum(u, 1e-300))
                ok &= u > 0
            obj = obj + lp[l] * dist
        obj = np.where(ok, obj, np.inf)
        k = int(np.argmin(obj))
        if obj[k] < best_val:
            best_val = float(obj[k])
            best_combo = tuple(c[k] for c in coords)

    if best_combo is None:
        raise SolverError("grid search found no feasible point")
    picked = [axes[i][best_combo[i]] for i in range(len(axes))]
    p = np.array(picked[:ap.n])
    d = np.array(picked[ap.n:2 * ap.n])
    sig = np.array(picked[2 * ap.n:])
    state = state_from_active(inst, ap, p, d, sig)
    return state, scalarized_objective(inst, lam, state)


def oracle_cell_bound(inst: MarketInstance, lam: Weights,
                      grid_per_axis: int) -> float:
    """Upper bound on the objective error of the grid oracle.

    Sums, over active pairs and axes, a per-axis Lipschitz bound of the
    objective times half the grid spacing.  Uses conservative lower bounds
    on the revenues and expenses over the feasible box.
    """
    lam.validate(inst.num_ders, inst.num_loads)
    ap = solver_pairs(inst, compute_trade_mask(inst))
    if ap.n == 0:
        return 0.0
    a = inst.discount_cap
    lg, ll, lp = lam.split(inst.num_ders, inst.num_loads)
    n = grid_per_axis

    lo = np.empty(ap.n)
    hi = np.empty(ap.n)
    capd = np.empty(ap.n)
    for k in range(ap.n):
        g, l = int(ap.ders[k]), int(ap.loads[k])
        lo[k], hi[k] = price_window(inst, g, l)
        capd[k] = min(float(inst.demand[l]), float(inst.surplus[g]))

    ug_min = inst.surplus * inst.pcc_buy_price
    ul_min = inst.demand * inst.pcc_sell_price
    for k in range(ap.n):
        l = int(ap.loads[k])
        ul_min[l] -= capd[k] * max(inst.pcc_sell_price[l] - lo[k] * (1.0 - a), 0.0)
    if np.any(ug_min[np.unique(ap.ders)] <= 0) or np.any(ul_min[np.unique(ap.loads)] <= 0):
        return float("inf")

    spacing = 1.0 if n == 1 else 1.0 / (n - 1)
    bound = 0.0
    for k in range(ap.n):
        g, l = int(ap.ders[k]), int(ap.loads[k])
        t = inst.target_demand[l, g]
        wg = lg[g] / ug_min[g]
        wl = ll[l] / ul_min[l]
        a_p = capd[k] * (wg + wl)
        eff_err = max(inst.pcc_sell_price[l] - lo[k] * (1.0 - a),
                      abs(hi[k] - inst.pcc_sell_price[l]))
        a_d = wg * (hi[k] - lo[k]) + wl * eff_err + 2 * lp[l] * max(t, abs(capd[k] - t))
        a_s = wl * a * hi[k] * capd[k]
        bound += 0.5 * spacing * (a_p * (hi[k] - lo[k]) + a_d * capd[k] + a_s)
    return float(bound)


# ---------------------------------------------------------------------------
# sweeps

def pareto_sweep(inst: MarketInstance, lam_list, alpha_list,
                 opts: SolverOptions | None = None, jobs: int = 1) -> list:
    """Solve once per (weight vector, discount cap) and report gain metrics.

    Records arrive weight-major, cap-minor, in input order.  A failing solve
    yields a flagged record instead of aborting the sweep.
    """
    from .scenarios import SweepRecord, der_gain, load_gain  # cycle-free at call time
    from .model import report_distance

    opts = opts or SolverOptions()
    points = [(lam, float(alpha)) for lam in lam_list for alpha in alpha_list]

    def run(point):
        lam, alpha = point
        inst_a = replace(inst, discount_cap=alpha)
        try:
            sol = solve_scalarized(inst_a, lam, opts)
            return SweepRecord(
                alpha=_round6(alpha),
                der_gain_pct=_round6(der_gain(inst_a, sol)),
                load_gain_pct=_round6(load_gain(inst_a, sol)),
                distance=_round6(report_distance(inst_a, sol.state)),
                objective=_round6(sol.objective),
                converged=sol.converged,
                solution=sol,
            )
        except Exception as exc:  # noqa: BLE001 - per-point failures become records
            return SweepRecord(alpha=_round6(alpha), der_gain_pct=float("nan"),
                               load_gain_pct=float("nan"), distance=float("nan"),
                               objective=float("nan"), converged=False,
                               error=str(exc))

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run, points))
    return [run(pt) for pt in points]


def _round6(x: float) -> float:
    """Reduce to the 6-significant-digit reporting precision used in CSVs."""
    if not math.isfinite(x) or x == 0:
        return float(x)
    return float(f"{x:.6g}")
