"""Scenario definitions, gain metrics, sweep execution and CSV emission.

Three 2-DER / 2-load scenarios ship with the package.  They share PCC prices
(buy 20, sell 50 per kWh), a price cap of 55 and the reference weights; they
differ in how each DER's surplus relates to the column sum of the demand
targets it should serve:

* ``tight``            - every DER offers exactly what its targets need.
* ``unbalanced_tight`` - totals match but DER 1 offers 10 kWh too much and
                         DER 2 ten too little, so the targets are unreachable.
* ``loose``            - DER 1 offers 20 kWh beyond a 50 kWh flagship target
                         toward load 1; DER 2 is exact.

The numbers are illustrative constructions chosen to exhibit those
structural properties; supply a JSON config for any other setup.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .model import MarketInstance, validate_instance
from .solver import Solution, SolverOptions, default_lambda, pareto_sweep
from .transform import Weights

__all__ = [
    "Scenario",
    "SweepRecord",
    "der_gain",
    "load_gain",
    "run_scenario",
    "builtin_scenarios",
    "emit_csv",
    "parse_csv",
    "load_config",
    "CSV_HEADER",
]

CSV_HEADER = "alpha,der_gain_pct,load_gain_pct,distance,objective,converged"


@dataclass
class SweepRecord:
    """One sweep point, stored at the 6-significant-digit CSV precision."""

    alpha: float
    der_gain_pct: float
    load_gain_pct: float
    distance: float
    objective: float
    converged: bool
    solution: Solution | None = field(default=None, compare=False, repr=False)
    error: str | None = field(default=None, compare=False)


@dataclass
class Scenario:
    name: str
    instance: MarketInstance
    alpha_grid: tuple[float, ...]
    lam: Weights | str = "default"
    solver: str = "central"
    notes: str = ""

    def weights(self) -> Weights:
        if isinstance(self.lam, Weights):
            return self.lam
        return default_lambda(self.instance.num_ders, self.instance.num_loads)

    def validate(self) -> list[str]:
        out = validate_instance(self.instance)
        grid = self.alpha_grid
        if not grid:
            out.append("alpha_grid is empty")
        elif any(not (0.0 <= a <= 1.0) for a in grid):
            out.append("alpha_grid entries must lie in [0,1]")
        elif any(b <= a for a, b in zip(grid, grid[1:])):
            out.append("alpha_grid must be strictly increasing")
        if self.solver not in ("central", "admm"):
            out.append(f"unknown solver {self.solver!r}")
        return out


def der_gain(inst: MarketInstance, solution: Solution) -> float:
    """Aggregated seller revenue gain over the sell-everything-to-PCC
    baseline, in percent.  NaN when the baseline revenue is zero."""
    base = float(inst.surplus @ inst.pcc_buy_price)
    if base <= 0:
        return float("nan")
    opt = float(solution.objective_parts.der_revenue.sum())
    return (opt - base) / base * 100.0


def load_gain(inst: MarketInstance, solution: Solution) -> float:
    """Aggregated buyer expense saving over the buy-everything-from-PCC
    baseline, in percent.  NaN when the baseline expense is zero."""
    base = float(inst.demand @ inst.pcc_sell_price)
    if base <= 0:
        return float("nan")
    opt = float(solution.objective_parts.load_expense.sum())
    return (base - opt) / base * 100.0


def run_scenario(scenario: Scenario, opts: SolverOptions | None = None,
                 csv_path=None, jobs: int = 1) -> list[SweepRecord]:
    """Sweep the scenario's discount-cap grid and optionally write the CSV.

    Per-point solver failures are recorded and the sweep continues.
    """
    problems = scenario.validate()
    if problems:
        raise ValueError(f"invalid scenario {scenario.name!r}: " + "; ".join(problems))
    lam = scenario.weights()
    if scenario.solver == "admm":
        records = _admm_sweep(scenario, lam, opts)
    else:
        records = pareto_sweep(scenario.instance, [lam], scenario.alpha_grid,
                               opts, jobs=jobs)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            fh.write(emit_csv(records))
    return records


def _admm_sweep(scenario: Scenario, lam: Weights,
                opts: SolverOptions | None) -> list[SweepRecord]:
    from dataclasses import replace
    from .admm import RegionPartition, admm_solve, partition_by_branch
    from .model import report_distance
    from .solver import _round6

    inst = scenario.instance
    if inst.der_regions is not None and inst.load_regions is not None:
        partition = partition_by_branch(inst)
    else:
        partition = RegionPartition(1, (tuple(range(inst.num_ders)),),
                                    (tuple(range(inst.num_loads)),))
    out = []
    for alpha in scenario.alpha_grid:
        inst_a = replace(inst, discount_cap=float(alpha))
        try:
            sol, _ = admm_solve(inst_a, lam, partition, opts=opts)
            out.append(SweepRecord(
                alpha=_round6(float(alpha)),
                der_gain_pct=_round6(der_gain(inst_a, sol)),
                load_gain_pct=_round6(load_gain(inst_a, sol)),
                distance=_round6(report_distance(inst_a, sol.state)),
                objective=_round6(sol.objective),
                converged=sol.converged,
                solution=sol))
        except Exception as exc:  # noqa: BLE001
            out.append(SweepRecord(alpha=_round6(float(alpha)),
                                   der_gain_pct=float("nan"),
                                   load_gain_pct=float("nan"),
                                   distance=float("nan"), objective=float("nan"),
                                   converged=False, error=str(exc)))
    return out


# ---------------------------------------------------------------------------
# CSV

def emit_csv(records: list[SweepRecord]) -> str:
    lines = [CSV_HEADER]
    for r in records:
        lines.append(",".join([
            f"{r.alpha:.6g}", f"{r.der_gain_pct:.6g}", f"{r.load_gain_pct:.6g}",
            f"{r.distance:.6g}", f"{r.objective:.6g}",
            "true" if r.converged else "false",
        ]))
    return "\n".join(lines) + "\n"


def parse_csv(text: str) -> list[SweepRecord]:
    lines = [ln for ln in text.strip().splitlines() if ln]
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError("unexpected CSV header")
    out = []
    for ln in lines[1:]:
        a, dg, lg, dist, obj, conv = ln.split(",")
        out.append(SweepRecord(alpha=float(a), der_gain_pct=float(dg),
                               load_gain_pct=float(lg), distance=float(dist),
                               objective=float(obj), converged=conv == "true"))
    return out


# ---------------------------------------------------------------------------
# built-in scenarios

def _alpha_grid_default() -> tuple[float, ...]:
    return tuple(round(0.10 + 0.01 * k, 10) for k in range(81))


def _make_instance(surplus, target_cols, name_hint="") -> MarketInstance:
    """2x2 instance with PCC buy 20 / sell 50, cap 55 and 100 kWh demands.

    ``target_cols``: per-DER column of the target matrix, listed load-major.
    """
    target = np.array(target_cols, dtype=float).T  # (L, G)
    return MarketInstance(
        num_ders=2,
        num_loads=2,
        surplus=np.asarray(surplus, dtype=float),
        demand=np.array([100.0, 100.0]),
        pcc_buy_price=np.array([20.0, 20.0]),
        pcc_sell_price=np.array([50.0, 50.0]),
        price_cap=np.array([55.0, 55.0]),
        discount_cap=0.10,
        target_demand=target,
    )


def builtin_scenarios() -> list[Scenario]:
    """The three bundled 2x2 experiments (see the module docstring)."""
    grid = _alpha_grid_default()
    tight = Scenario(
        name="tight",
        instance=_make_instance(surplus=[30.0, 20.0],
                                target_cols=[[20.0, 10.0], [10.0, 10.0]]),
        alpha_grid=grid,
        notes="each DER offers exactly the column sum of its targets",
    )
    unbalanced = Scenario(
        name="unbalanced_tight",
        instance=_make_instance(surplus=[40.0, 10.0],
                                target_cols=[[20.0, 10.0], [0.0, 20.0]]),
        alpha_grid=grid,
        notes="DER 1 offers 10 kWh above its target column, DER 2 ten below; "
              "totals match but the targets are unreachable",
    )
    loose = Scenario(
        name="loose",
        instance=_make_instance(surplus=[80.0, 20.0],
                                target_cols=[[50.0, 10.0], [10.0, 10.0]]),
        alpha_grid=grid,
        notes="DER 1 offers 20 kWh beyond its targets, which include a "
              "50 kWh delivery to load 1; DER 2 is exact",
    )
    return [tight, unbalanced, loose]


# ---------------------------------------------------------------------------
# JSON scenario configs

_REQUIRED_FIELDS = {
    "name", "num_ders", "num_loads", "surplus", "demand", "pcc_buy_price",
    "pcc_sell_price", "price_cap", "alpha_grid", "target_demand", "lambda",
}
_OPTIONAL_FIELDS = {"regions", "solver"}


def load_config(path) -> Scenario:
    """Parse and validate a scenario config document.

    Unknown fields are rejected by name; structural problems raise
    ValueError with the offending field.
    """
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed JSON in {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValueError("config must be a JSON object")
    unknown = set(doc) - _REQUIRED_FIELDS - _OPTIONAL_FIELDS
    if unknown:
        raise ValueError(f"unknown config fields: {sorted(unknown)}")
    missing = _REQUIRED_FIELDS - set(doc)
    if missing:
        raise ValueError(f"missing config fields: {sorted(missing)}")

    G, L = doc["num_ders"], doc["num_loads"]
    if not isinstance(G, int) or not isinstance(L, int):
        raise ValueError("num_ders and num_loads must be integers")
    grid = doc["alpha_grid"]
    if not isinstance(grid, list) or not all(isinstance(a, (int, float)) for a in grid):
        raise ValueError("alpha_grid must be a list of numbers")

    der_regions = load_regions = None
    if "regions" in doc:
        der_regions, load_regions = _parse_regions(doc["regions"], G, L)

    inst = MarketInstance(
        num_ders=G, num_loads=L,
        surplus=doc["surplus"], demand=doc["demand"],
        pcc_buy_price=doc["pcc_buy_price"], pcc_sell_price=doc["pcc_sell_price"],
        price_cap=doc["price_cap"],
        discount_cap=float(grid[0]) if grid else 0.0,
        target_demand=doc["target_demand"],
        der_regions=der_regions, load_regions=load_regions,
    )

    lam_doc = doc["lambda"]
    if lam_doc == "default":
        lam = "default"
    elif isinstance(lam_doc, list):
        lam = _weights_from_list(lam_doc, G, L)
    else:
        raise ValueError('lambda must be "default" or a list of weights')

    solver = doc.get("solver", "central")
    return Scenario(name=str(doc["name"]), instance=inst,
                    alpha_grid=tuple(float(a) for a in grid),
                    lam=lam, solver=solver)


def _weights_from_list(values, G: int, L: int) -> Weights:
    arr = np.asarray(values, dtype=float)
    if arr.shape != (G + 2 * L,):
        raise ValueError(f"lambda must have {G + 2 * L} entries, got {arr.size}")
    total = float(arr.sum())
    if not math.isfinite(total) or abs(total - 1.0) > 1e-6 or np.any(arr < 0):
        raise ValueError("lambda must be nonnegative and sum to 1")
    return Weights(arr / total)


def _parse_regions(regions, G: int, L: int):
    if not isinstance(regions, list) or not regions:
        raise ValueError("regions must be a non-empty list of "
                         '{"ders": [...], "loads": [...]} objects')
    der_regions = [0] * G
    load_regions = [0] * L
    for k, entry in enumerate(regions, start=1):
        if not isinstance(entry, dict) or set(entry) - {"ders", "loads"}:
            raise ValueError(f"regions[{k - 1}] must contain only 'ders' and 'loads'")
        for agent_id in entry.get("ders", []):
            if not isinstance(agent_id, int) or not 1 <= agent_id <= G:
                raise ValueError(f"regions[{k - 1}]: bad DER id {agent_id!r}")
            if der_regions[agent_id - 1]:
                raise ValueError(f"DER {agent_id} assigned to two regions")
            der_regions[agent_id - 1] = k
        for agent_id in entry.get("loads", []):
            if not isinstance(agent_id, int) or not 1 <= agent_id <= L:
                raise ValueError(f"regions[{k - 1}]: bad load id {agent_id!r}")
            if load_regions[agent_id - 1]:
                raise ValueError(f"load {agent_id} assigned to two regions")
            load_regions[agent_id - 1] = k
    if 0 in der_regions or 0 in load_regions:
        raise ValueError("regions must cover every DER and load")
    return tuple(der_regions), tuple(load_regions)
