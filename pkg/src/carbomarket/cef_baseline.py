"""Carbon-emission-flow baseline.

Attaches emissions to the cleared power flows: every bus mixes its inflows
(local generation plus line imports) and sends power out at one uniform
intensity.  Solved as a linear system over bus intensities so cyclic flow
patterns need no special casing.  Storage is a "container of liquid" whose
content carries a mass-weighted average intensity.

Units: intensities are kgCO2/kWh, powers MW, energies MWh.  The 1000s cancel
inside the nodal balance, so the system is assembled in composite units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .market_clearing import ClearingResult
from .network_model import NetworkCase

FLOW_TOL = 1e-9


class CefSingularError(RuntimeError):
    """The intensity balance system is singular beyond zero-throughput buses."""


class DischargeFromEmptyError(RuntimeError):
    pass


@dataclass
class FlowGraph:
    bus_ids: list[int]
    edges: list[tuple[int, int, float]]  # (from position, to position, MW > 0)
    generation: list[list[tuple[float, float]]]  # per bus: (MW, kgCO2/kWh)
    demand: np.ndarray  # effective withdrawal per bus, MW

    @property
    def n_buses(self) -> int:
        return len(self.bus_ids)

    def throughput(self) -> np.ndarray:
        """Total inflow (local generation plus imports) per bus."""
        total = np.array([sum(p for p, _ in gens) for gens in self.generation])
        for _, j, p in self.edges:
            total[j] += p
        return total

    def conservation_residual(self) -> np.ndarray:
        outflow = self.demand.astype(float).copy()
        for i, _, p in self.edges:
            outflow[i] += p
        return self.throughput() - outflow

    @classmethod
    def from_clearing(
        cls,
        case: NetworkCase,
        clearing: ClearingResult,
        storage_intensity: dict[str, float] | None = None,
    ) -> "FlowGraph":
        storage_intensity = storage_intensity or {}
        bus_index = case.bus_index
        n = case.n_buses
        bids = clearing.bids
        demand = case.demand(clearing.period) if bids.demand is None else bids.demand
        demand = demand.astype(float).copy()
        generation: list[list[tuple[float, float]]] = [[] for _ in range(n)]
        sigma_by_agent = dict(zip(clearing.sigma_agents, clearing.sigma))
        for idx, agent in enumerate(bids.agents):
            p = float(clearing.dispatch[idx])
            pos = bus_index[agent.bus]
            if agent.is_storage:
                if p < -FLOW_TOL:
                    demand[pos] += -p  # charging behaves like extra load
                elif p > FLOW_TOL:
                    rate = float(storage_intensity.get(agent.name, 0.0))
                    generation[pos].append((p, rate))
            elif p > FLOW_TOL:
                sigma = float(sigma_by_agent.get(idx, 0.0))  # kg/h
                generation[pos].append((p, sigma / (1000.0 * p)))
        edges = []
        for l, br in enumerate(case.branches):
            f = float(clearing.flows[l])
            if f > FLOW_TOL:
                edges.append((bus_index[br.from_bus], bus_index[br.to_bus], f))
            elif f < -FLOW_TOL:
                edges.append((bus_index[br.to_bus], bus_index[br.from_bus], -f))
        graph = cls(bus_ids=list(case.bus_ids), edges=edges,
                    generation=generation, demand=demand)
        # fold any loss residual into the withdrawals so flows conserve exactly
        residual = graph.conservation_residual()
        graph.demand = graph.demand + residual
        if np.any(graph.demand < -1e-6):
            worst = int(np.argmin(graph.demand))
            raise CefSingularError(
                f"negative effective withdrawal {graph.demand[worst]:.3g} MW "
                f"at bus {graph.bus_ids[worst]}"
            )
        graph.demand = np.maximum(graph.demand, 0.0)
        return graph


def cef_solve(graph: FlowGraph) -> np.ndarray:
    """Uniform outflow intensity per bus, zero at zero-throughput buses."""
    n = graph.n_buses
    through = graph.throughput()
    emitted = np.array(
        [sum(p * rate for p, rate in gens) for gens in graph.generation]
    )
    live = through > FLOW_TOL
    rho = np.zeros(n)
    if not live.any():
        return rho
    m = np.diag(through[live].astype(float))
    pos = {b: k for k, b in enumerate(np.flatnonzero(live))}
    for i, j, p in graph.edges:
        if live[j] and live[i]:
            m[pos[j], pos[i]] -= p
    try:
        sol = np.linalg.solve(m, emitted[live])
    except np.linalg.LinAlgError as exc:
        raise CefSingularError(f"intensity system singular: {exc}") from exc
    if not np.all(np.isfinite(sol)):
        raise CefSingularError("intensity system produced non-finite values")
    rho[live] = sol
    return rho


@dataclass
class CefStorageState:
    stored_energy: float  # MWh
    stored_intensity: float = 0.0  # kgCO2/kWh


def cef_storage_step(
    state: CefStorageState,
    power: float,
    inflow_intensity: float,
    tau: float,
) -> tuple[CefStorageState, float]:
    """Container update; negative power charges, positive discharges.

    Returns the new state and the attributed emission in kg: positive when
    charging (emissions stored away are attributed to the unit), negative on
    discharge (credit at the stored intensity, which does not change).
    """
    if power < -FLOW_TOL:
        energy_in = -power * tau
        mass = state.stored_energy * state.stored_intensity + energy_in * inflow_intensity
        total = state.stored_energy + energy_in
        new = CefStorageState(stored_energy=total, stored_intensity=mass / total)
        return new, inflow_intensity * energy_in * 1000.0
    if power > FLOW_TOL:
        energy_out = power * tau
        if energy_out > state.stored_energy + 1e-9:
            raise DischargeFromEmptyError(
                f"discharge of {energy_out:.6g} MWh exceeds stored "
                f"{state.stored_energy:.6g} MWh"
            )
        new = CefStorageState(
            stored_energy=state.stored_energy - energy_out,
            stored_intensity=state.stored_intensity,
        )
        return new, -state.stored_intensity * energy_out * 1000.0
    return CefStorageState(state.stored_energy, state.stored_intensity), 0.0


def cef_emission_prices(rho: np.ndarray, kappa: float) -> np.ndarray:
    """Half the outflow intensity, priced at kappa $/kg, giving $/kWh."""
    return kappa * np.asarray(rho, dtype=float) / 2.0
