"""Emission cost allocation by exact ray integration of the dispatch LP.

Half of each period's emission cost is charged to loads and storages in
proportion to the integral of the marginal emission cost along the ray from
zero net demand to the realized net demand.  On each optimal-basis critical
region the emission cost is affine in demand, so the integral is a finite sum:
walk the ray region by region, take the gradient from the basis, and weight it
by the region's length.  The result is a per-bus price in $/kWh.

When the dispatch problem is infeasible at zero demand (minimum-output floors),
the walk starts from the closest feasible point on the ray instead and the
emission cost there is split proportionally to net demand, which adds the same
price increment at every bus.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, lu_factor, lu_solve

from .lp_core import (
    EmptyIntervalError,
    LpProblem,
    LpStatus,
    SimplexNumericalError,
    feasibility_interval,
    solve,
    solve_with_basis,
)
from .market_clearing import AssembledMarket, ClearingResult, assemble_market_lp
from .network_model import NetworkCase


class InfeasibleAtOriginError(RuntimeError):
    """Zero demand is undispatchable; integrate from a feasible start instead."""


class NonProgressError(RuntimeError):
    """The sweep failed to advance past a degenerate breakpoint."""


@dataclass
class CompactAllocationForm:
    a: np.ndarray
    c: np.ndarray
    g: np.ndarray
    h: np.ndarray
    k: np.ndarray
    net_demand_star: np.ndarray
    market: AssembledMarket
    tau: float
    demand_star: np.ndarray
    storage_power: dict[str, float]
    storage_bus: dict[str, int]


@dataclass
class FeasibleStart:
    zeta: float
    storage_power: dict[str, float]
    demand: np.ndarray
    emission_cost: float
    storage_share: dict[str, float]
    load_share: np.ndarray
    price_addon: float


@dataclass
class AllocationResult:
    psi: np.ndarray
    storage_cost: dict[str, float]
    load_cost: np.ndarray
    breakpoints: list[tuple[float, tuple[int, ...]]]
    start_point: FeasibleStart | None
    cost_sharing_error: float
    emission_cost_at_star: float
    emission_cost_at_start: float
    iterations: int


def build_compact_form(
    case: NetworkCase, clearing: ClearingResult, period: int = 0,
) -> CompactAllocationForm:
    bids = clearing.bids
    demand = case.demand(period) if bids.demand is None else bids.demand
    net_demand = demand.astype(float).copy()
    storage_power: dict[str, float] = {}
    storage_bus: dict[str, int] = {}
    generators = []
    for idx, agent in enumerate(bids.agents):
        if agent.is_storage:
            if agent.bus not in case.bus_index:
                raise ValueError(f"storage {agent.name} sits on unknown bus {agent.bus}")
            p = float(clearing.dispatch[idx])
            storage_power[agent.name] = p
            storage_bus[agent.name] = case.bus_index[agent.bus]
            net_demand[case.bus_index[agent.bus]] -= p
        else:
            generators.append(agent)
    market = assemble_market_lp(case, generators, net_demand)
    return CompactAllocationForm(
        a=market.problem.constraint_matrix, c=market.problem.cost,
        g=market.g, h=market.h, k=market.k,
        net_demand_star=net_demand, market=market, tau=case.tau,
        demand_star=demand, storage_power=storage_power, storage_bus=storage_bus,
    )


def _problem_at(form: CompactAllocationForm, y: float) -> LpProblem:
    rhs = form.g @ (y * form.net_demand_star) + form.h
    return LpProblem(cost=form.c, constraint_matrix=form.a, rhs=rhs)


def partial_derivative(form: CompactAllocationForm, basis: np.ndarray) -> np.ndarray:
    """Marginal emission cost per bus, in $ per MW of net demand, one basis."""
    a_b = form.a[:, basis]
    try:
        lu = lu_factor(a_b)
    except (LinAlgError, ValueError) as exc:
        raise SimplexNumericalError(f"singular allocation basis: {exc}") from exc
    z = lu_solve(lu, form.k[basis], trans=1)
    if not np.all(np.isfinite(z)):
        raise SimplexNumericalError("singular allocation basis")
    return z @ form.g


def _emission_cost(form: CompactAllocationForm, y: float) -> tuple[float, np.ndarray]:
    sol = solve(_problem_at(form, y))
    if sol.status is not LpStatus.OPTIMAL:
        raise InfeasibleAtOriginError(
            f"dispatch infeasible at ray point y={y:g}; use feasible_start"
        )
    return float(form.k @ sol.primal), sol.basis


def aumann_shapley_prices(
    form: CompactAllocationForm,
    delta: float = 0.002,
    start: FeasibleStart | None = None,
) -> AllocationResult:
    if delta <= 0:
        raise ValueError("delta must be positive")
    tau = form.tau
    y0 = start.zeta if start is not None else 0.0
    try:
        e_start, basis = _emission_cost(form, y0)
    except InfeasibleAtOriginError:
        if start is None:
            raise
        raise NonProgressError("start point infeasible despite feasible_start")

    grad_accum = np.zeros(form.g.shape[1])
    breakpoints: list[tuple[float, tuple[int, ...]]] = []
    y_prev = y0
    iterations = 0
    max_iter = 16 * int(np.ceil(1.0 / delta)) + 400
    last_basis = basis
    step = delta
    while y_prev < 1.0 - 1e-12:
        iterations += 1
        if iterations > max_iter:
            raise NonProgressError(f"sweep exceeded {max_iter} iterations")
        probe = min(y_prev + step, 1.0)
        sol = solve_with_basis(_problem_at(form, probe), last_basis)
        if sol.status is not LpStatus.OPTIMAL:
            raise NonProgressError(f"dispatch infeasible at ray point y={probe:g}")
        last_basis = sol.basis
        try:
            lo, hi = feasibility_interval(
                last_basis, form.a, form.g, form.h, form.net_demand_star
            )
        except EmptyIntervalError:
            lo = hi = probe  # basis optimal only at the probe point itself
        y_next = min(hi, 1.0)
        # the gradient is exact only where this basis stays feasible, so its
        # region must reach back to the frontier; a detached region means the
        # probe jumped over a narrower one, and the step shrinks onto it
        forced = step < 1e-12
        if not forced and (lo > y_prev + 1e-10 or y_next <= y_prev + 1e-12):
            step /= 2.0
            continue
        if y_next <= y_prev + 1e-15:
            raise NonProgressError(f"no progress past y={y_prev:g}")
        grad = partial_derivative(form, last_basis)
        grad_accum += (y_next - y_prev) * grad
        breakpoints.append((float(y_next), tuple(int(i) for i in last_basis)))
        y_prev = y_next
        step = delta

    e_star = float(
        form.k[last_basis]
        @ np.linalg.solve(form.a[:, last_basis], form.g @ form.net_demand_star + form.h)
    )
    allocated = float(grad_accum @ form.net_demand_star)
    sharing_err = abs(allocated - (e_star - e_start)) / max(abs(e_star), 1e-12)

    psi = grad_accum / (tau * 1000.0)
    if start is not None:
        psi = psi + start.price_addon
    load_cost = psi * form.demand_star * tau * 1000.0
    storage_cost = {
        name: float(-psi[form.storage_bus[name]] * p * tau * 1000.0)
        for name, p in form.storage_power.items()
    }
    return AllocationResult(
        psi=psi, storage_cost=storage_cost, load_cost=load_cost,
        breakpoints=breakpoints, start_point=start,
        cost_sharing_error=float(sharing_err),
        emission_cost_at_star=e_star, emission_cost_at_start=e_start,
        iterations=iterations,
    )


def feasible_start(case: NetworkCase, form: CompactAllocationForm) -> FeasibleStart:
    """Closest feasible point to the origin on the ray, with its proportional split."""
    a, g, h = form.a, form.g, form.h
    m, n = a.shape
    ray = g @ form.net_demand_star
    # min zeta s.t. A x - zeta * ray = H, zeta + slack = 1, all vars >= 0
    a_ext = np.zeros((m + 1, n + 2))
    a_ext[:m, :n] = a
    a_ext[:m, n] = -ray
    a_ext[m, n] = 1.0
    a_ext[m, n + 1] = 1.0
    rhs = np.concatenate([h, [1.0]])
    cost = np.zeros(n + 2)
    cost[n] = 1.0
    sol = solve(LpProblem(cost=cost, constraint_matrix=a_ext, rhs=rhs))
    if sol.status is not LpStatus.OPTIMAL:
        raise NonProgressError("no feasible point on the demand ray")
    zeta = float(sol.primal[n])
    e0, _ = _emission_cost(form, zeta)
    d0 = zeta * form.demand_star
    p0 = {name: zeta * p for name, p in form.storage_power.items()}
    # proportional shares D_i^0 E^0 / (zeta sum(net)) reduce to D_i* E^0 / sum(net)
    total_net = float(form.net_demand_star.sum())
    if abs(total_net) < 1e-12:
        load_share = np.zeros_like(d0)
        storage_share = {name: 0.0 for name in p0}
        addon = 0.0
    else:
        load_share = form.demand_star * e0 / total_net
        storage_share = {
            name: -p * e0 / total_net for name, p in form.storage_power.items()
        }
        addon = e0 / (form.tau * 1000.0 * total_net)
    return FeasibleStart(
        zeta=zeta, storage_power=p0, demand=d0, emission_cost=e0,
        storage_share=storage_share, load_share=load_share, price_addon=addon,
    )


def allocate_period(
    case: NetworkCase, clearing: ClearingResult, period: int = 0,
    delta: float | None = None,
) -> AllocationResult:
    """Build the compact form and run the sweep, falling back to a feasible start."""
    form = build_compact_form(case, clearing, period)
    step = case.delta if delta is None else delta
    try:
        return aumann_shapley_prices(form, delta=step)
    except InfeasibleAtOriginError:
        start = feasible_start(case, form)
        return aumann_shapley_prices(form, delta=step, start=start)


@dataclass
class AxiomReport:
    additivity_error: float
    scale_error: float
    consistency_error: float

    @property
    def passed(self) -> bool:
        return (
            self.additivity_error <= 1e-8
            and self.scale_error <= 1e-8
            and self.consistency_error <= 1e-12
        )


def verify_axioms(
    case: NetworkCase, clearing: ClearingResult, period: int = 0,
) -> AxiomReport:
    form = build_compact_form(case, clearing, period)
    combined = aumann_shapley_prices(form, delta=case.delta)

    # additivity: pricing each plant's emission separately must sum back
    sigma_cols = np.flatnonzero(form.k)
    psi_sum = np.zeros_like(combined.psi)
    for col in sigma_cols:
        split = np.zeros_like(form.k)
        split[col] = form.k[col]
        grad_accum = np.zeros(form.g.shape[1])
        y_prev = 0.0
        for y_next, basis in combined.breakpoints:
            basis_arr = np.array(basis)
            z = np.linalg.solve(form.a[:, basis_arr].T, split[basis_arr])
            grad_accum += (y_next - y_prev) * (z @ form.g)
            y_prev = y_next
        psi_sum += grad_accum / (form.tau * 1000.0)
    additivity_error = float(np.max(np.abs(psi_sum - combined.psi), initial=0.0))

    # scale invariance: restate the case in kW; allocated dollars must not move
    scaled_case, scaled_clearing = _rescaled(case, clearing, period, factor=1000.0)
    scaled_form = build_compact_form(scaled_case, scaled_clearing, period)
    scaled = aumann_shapley_prices(scaled_form, delta=case.delta)
    denom = np.maximum(np.abs(combined.load_cost), 1.0)
    scale_error = float(
        np.max(np.abs(scaled.load_cost - combined.load_cost) / denom, initial=0.0)
    )
    for name, cost in combined.storage_cost.items():
        gap = abs(scaled.storage_cost[name] - cost) / max(abs(cost), 1.0)
        scale_error = max(scale_error, gap)

    # consistency: two co-located loads priced separately vs merged
    d = form.demand_star
    split_bus = int(np.argmax(d))
    merged = combined.load_cost[split_bus]
    parts = 0.35 * d[split_bus] * combined.psi[split_bus] * form.tau * 1000.0
    parts += 0.65 * d[split_bus] * combined.psi[split_bus] * form.tau * 1000.0
    consistency_error = abs(parts - merged)

    return AxiomReport(
        additivity_error=additivity_error,
        scale_error=scale_error,
        consistency_error=float(consistency_error),
    )


def _rescaled(
    case: NetworkCase, clearing: ClearingResult, period: int, factor: float,
):
    """Restate powers in smaller units (MW -> kW for factor=1000)."""
    from .market_clearing import AgentBid, BidSet, clear_market
    from .network_model import Branch, Bus, PiecewiseLinearCurve

    def scale_curve(curve: PiecewiseLinearCurve) -> PiecewiseLinearCurve:
        return PiecewiseLinearCurve(
            segments=tuple((s / factor, b) for s, b in curve.segments),
            domain=(curve.domain[0] * factor, curve.domain[1] * factor),
        )

    buses = [Bus(b.id, b.loss_sensitivity) for b in case.buses]
    branches = [
        Branch(br.from_bus, br.to_bus, br.capacity * factor,
               br.reactance, br.ptdf_row, br.name)
        for br in case.branches
    ]
    scaled_case = NetworkCase(
        buses=buses, branches=branches, generators=[], storages=[],
        load_series=case.load_series * factor, tau=case.tau,
        kappa=case.kappa, epsilon=case.epsilon, delta=case.delta,
        slack_bus=case.slack_bus, loss_offset=case.loss_offset * factor,
    )
    bids = clearing.bids
    demand = case.demand(period) if bids.demand is None else bids.demand
    scaled_agents = [
        AgentBid(
            name=a.name, bus=a.bus, cost_curve=scale_curve(a.cost_curve),
            p_min=a.p_min * factor, p_max=a.p_max * factor,
            emission_curve=scale_curve(a.emission_curve) if a.emission_curve else None,
            is_storage=a.is_storage, is_renewable=a.is_renewable,
        )
        for a in bids.agents
    ]
    scaled_bids = BidSet(agents=scaled_agents, demand=demand * factor)
    scaled_clearing = clear_market(scaled_case, scaled_bids, period)
    return scaled_case, scaled_clearing
