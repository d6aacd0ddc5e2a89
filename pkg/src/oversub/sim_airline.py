"""Airline ticket overbooking environment.

Quarterly histories for a set of carriers: seasonal demand peaking in Q2/Q3,
no-show rates decaying over the years (electronic ticketing), and a baseline
overbooking habit of 3-5% of seats.  The action a in [0, 1] scales a maximum
overbook margin M (default 10%), so sold = min(demand, floor((1+a*M)*seats)).
Passengers that show beyond capacity are offloaded at a compensation cost;
tickets sold beyond capacity earn extra fare revenue.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .encoder import Trajectory
from .errors import ContractViolation

QUARTERS = (1, 2, 3, 4)
SEASONAL = {1: 1.00, 2: 1.25, 3: 1.32, 4: 1.05}
STATE_WIDTH = 8


@dataclass
class OverbookConfig:
    max_margin: float = 0.10          # M: fraction of seats sellable beyond capacity at a=1
    compensation_unit: float = 800.0  # per offloaded passenger
    fare_unit: float = 200.0          # per ticket sold beyond capacity
    deterministic: bool = True        # expected shows vs binomial draws


@dataclass
class AirlineQuarter:
    airline_id: str
    year: int
    quarter: int
    seats: int
    demand: int
    no_show_rate: float
    expert_rate: float                # baseline overbook fraction in [0.03, 0.05]
    sold: float = 0.0
    shows: float = 0.0
    onboard: float = 0.0
    offloaded: float = 0.0
    cost: float = 0.0
    profit: float = 0.0


@dataclass
class AirlineRecord:
    id: str
    seats: int
    quarters: list[AirlineQuarter]


@dataclass
class AirlineHistory:
    airlines: list[AirlineRecord]
    years: int
    start_year: int
    config: OverbookConfig

    @property
    def quarters_per_airline(self) -> int:
        return self.years * 4


def overbook_outcome(a: float, quarter: AirlineQuarter, config: OverbookConfig,
                     rng: np.random.Generator | None = None) -> AirlineQuarter:
    """Play one quarter at overbook action ``a``.

    In deterministic mode shows are the binomial expectation; otherwise they
    are drawn from the provided generator.
    """
    if not (0.0 <= a <= 1.0):
        raise ContractViolation(f"action must lie in [0, 1], got {a}")
    sold = min(float(quarter.demand), np.floor((1.0 + a * config.max_margin) * quarter.seats))
    show_prob = 1.0 - quarter.no_show_rate
    if config.deterministic:
        shows = sold * show_prob
    else:
        if rng is None:
            raise ContractViolation("stochastic mode requires a generator")
        shows = float(rng.binomial(int(sold), show_prob))
    onboard = min(shows, float(quarter.seats))
    offloaded = shows - onboard
    cost = offloaded * config.compensation_unit
    profit = max(0.0, sold - quarter.seats) * config.fare_unit
    return replace(quarter, sold=sold, shows=shows, onboard=onboard,
                   offloaded=offloaded, cost=cost, profit=profit)


def generate_history(seed: int, airlines: int = 32, years: int = 24,
                     start_year: int = 1998,
                     config: OverbookConfig | None = None) -> AirlineHistory:
    """Semi-synthetic quarterly records, realized under each carrier's own
    baseline overbooking rates (the expert policy)."""
    if years < 1:
        raise ContractViolation("need at least one year")
    config = config or OverbookConfig()
    rng = np.random.default_rng(seed)
    decay = np.log(4.0) / max(years - 1, 1)   # final-year no-show ~ 25% of initial
    records: list[AirlineRecord] = []
    for a_idx in range(airlines):
        seats = int(np.round(10 ** rng.uniform(3.7, 5.0)))
        demand_base = rng.uniform(0.95, 1.12)
        season_jitter = {q: rng.uniform(-0.03, 0.03) for q in QUARTERS}
        r0 = rng.uniform(0.05, 0.12)
        base_rate = rng.uniform(0.033, 0.047)
        season_sensitivity = rng.uniform(0.4, 1.6)
        quarters: list[AirlineQuarter] = []
        for y in range(years):
            ns = r0 * np.exp(-decay * y)
            for q in QUARTERS:
                mult = SEASONAL[q] + season_jitter[q]
                demand = int(np.round(seats * demand_base * mult
                                      * (1.0 + rng.normal(0.0, 0.03))))
                rate = float(np.clip(
                    base_rate
                    + 0.006 * season_sensitivity * (SEASONAL[q] - 1.155)
                    + rng.normal(0.0, 0.0012),
                    0.03, 0.05))
                quarter = AirlineQuarter(
                    airline_id=f"air-{a_idx:02d}", year=start_year + y, quarter=q,
                    seats=seats, demand=max(demand, 1), no_show_rate=float(ns),
                    expert_rate=rate)
                action = rate / config.max_margin
                quarters.append(overbook_outcome(action, quarter, config,
                                                 rng=None if config.deterministic else rng))
        records.append(AirlineRecord(id=f"air-{a_idx:02d}", seats=seats, quarters=quarters))
    return AirlineHistory(airlines=records, years=years, start_year=start_year, config=config)


def expert_rates(history: AirlineHistory) -> np.ndarray:
    """Expert actions per airline per quarter: overbook rate / max margin, (A, T)."""
    m = history.config.max_margin
    return np.array([[q.expert_rate / m for q in rec.quarters] for rec in history.airlines])


@dataclass
class AirlineOutcome:
    cost: float
    profit: float
    rewards: np.ndarray               # (T,) summed across airlines, -cost+profit per quarter
    offloaded: float


def run_rates(history: AirlineHistory, rates: np.ndarray,
              config: OverbookConfig | None = None,
              seed: int = 0) -> AirlineOutcome:
    """Play the whole history at the given (A, T) action matrix."""
    config = config or history.config
    A = len(history.airlines)
    T = history.quarters_per_airline
    if rates.shape != (A, T):
        raise ContractViolation(f"rate matrix must be {(A, T)}, got {rates.shape}")
    rng = np.random.default_rng(seed)
    rewards = np.zeros(T)
    cost = profit = offloaded = 0.0
    for i, rec in enumerate(history.airlines):
        for t, quarter in enumerate(rec.quarters):
            out = overbook_outcome(float(rates[i, t]), quarter, config,
                                   rng=None if config.deterministic else rng)
            rewards[t] += -out.cost + out.profit
            cost += out.cost
            profit += out.profit
            offloaded += out.offloaded
    return AirlineOutcome(cost=cost, profit=profit, rewards=rewards, offloaded=offloaded)


def build_trajectories(history: AirlineHistory) -> list[Trajectory]:
    """One expert trajectory per airline.

    Features are lagged one quarter (what the operator could observe when
    deciding): sold and onboard ratios, realized offload and no-show rates,
    log seats, quarter-of-year phase, position in the record.
    """
    m = history.config.max_margin
    out: list[Trajectory] = []
    T = history.quarters_per_airline
    for rec in history.airlines:
        states = np.zeros((T, STATE_WIDTH))
        actions = np.zeros(T)
        for t, q in enumerate(rec.quarters):
            if t > 0:
                prev = rec.quarters[t - 1]
                sold_prev = max(prev.sold, 1.0)
                states[t, 0] = prev.sold / prev.seats
                states[t, 1] = prev.onboard / prev.seats
                states[t, 2] = prev.offloaded / sold_prev
                states[t, 3] = (prev.sold - prev.shows) / sold_prev
            states[t, 4] = np.log10(q.seats)
            states[t, 5] = np.sin(2.0 * np.pi * (q.quarter - 1) / 4.0)
            states[t, 6] = np.cos(2.0 * np.pi * (q.quarter - 1) / 4.0)
            states[t, 7] = t / T
            actions[t] = q.expert_rate / m
        out.append(Trajectory(entity_id=rec.id, states=states, actions=actions,
                              domain_tag="airline"))
    return out
