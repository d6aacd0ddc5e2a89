"""Virtual-CPU oversubscription environment.

A fleet of services runs VMs on a small pool of physical nodes.  Each VM
carries an hourly peak-usage trace over two weeks.  An oversubscription rate
``a`` shrinks a VM's allocated cores to ceil(a * requested); Best-Fit packs
the shrunken VMs onto nodes.  Usage is *not* capped by the allocation — that
is the point of oversubscribing — so a node whose hosted VMs spike together
can exceed the hot threshold (85% of physical capacity).  The benefit of a
policy is the cores left unallocated; the risk is hot node-hours.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import Trajectory
from .errors import ContractViolation

HOURS_PER_WEEK = 168
DEFAULT_HOURS = 2 * HOURS_PER_WEEK
HOT_THRESHOLD = 0.85
EXPERT_WINDOW = 24
EXPERT_FLOOR = 0.1

PATTERNS = ("diurnal", "evening", "flat")
STATE_WIDTH = 7
# user-facing patterns carry heavier burst noise than configured services
SPIKE_PROB = {"diurnal": 0.008, "evening": 0.008, "flat": 0.004}
SPIKE_RANGE = (0.08, 0.22)


@dataclass
class Service:
    id: str
    pattern: str
    vm_count: int
    cores_per_vm: int
    mem_per_vm: float
    base_level: float
    peak_level: float
    noise_scale: float


@dataclass
class Node:
    id: int
    core_capacity: int
    mem_capacity: float


@dataclass
class VMSpec:
    id: str
    service_id: str
    cores: int          # requested vCPU
    mem: float


@dataclass
class Fleet:
    services: list[Service]
    nodes: list[Node]
    vms: list[VMSpec]                  # request order
    traces: np.ndarray                 # (n_vms, T) usage fraction of requested cores
    hours: int

    def vms_of(self, service_id: str) -> list[int]:
        return [i for i, vm in enumerate(self.vms) if vm.service_id == service_id]

    def service_usage(self) -> np.ndarray:
        """Mean usage fraction per service per hour, (S, T)."""
        out = np.zeros((len(self.services), self.hours))
        for s_idx, svc in enumerate(self.services):
            rows = self.vms_of(svc.id)
            out[s_idx] = self.traces[rows].mean(axis=0)
        return out


def _pattern_profile(pattern: str, rng: np.random.Generator,
                     base: float, peak: float, hours: int) -> np.ndarray:
    t = np.arange(hours)
    hod = t % 24
    day = t // 24
    weekday = (day % 7) < 5
    if pattern == "diurnal":
        day_shape = np.interp(hod, [0, 7, 9, 17, 19, 24], [base, base, peak, peak, base, base])
        level = np.where(weekday, day_shape, base)
    elif pattern == "evening":
        level = np.interp(hod, [0, 17, 19, 23, 24], [base, base, peak, peak, base])
    elif pattern == "flat":
        level = np.full(hours, base)
    else:
        raise ContractViolation(f"unknown pattern {pattern!r}")
    return level


def generate_fleet(seed: int, services: int = 30, nodes: int = 8,
                   core_capacity: int = 48, mem_capacity: float = 512.0,
                   hours: int = DEFAULT_HOURS) -> Fleet:
    """Deterministic synthetic fleet: ~40% diurnal-weekday services, ~30%
    evening-peak, ~30% flat, with per-VM noise on a shared service profile."""
    if services < 1:
        raise ContractViolation("need at least one service")
    rng = np.random.default_rng(seed)
    n_diurnal = round(0.4 * services)
    n_evening = round(0.3 * services)
    patterns = (["diurnal"] * n_diurnal + ["evening"] * n_evening
                + ["flat"] * (services - n_diurnal - n_evening))
    rng.shuffle(patterns)

    svc_list: list[Service] = []
    vms: list[VMSpec] = []
    trace_rows: list[np.ndarray] = []
    for s in range(services):
        pattern = patterns[s]
        if pattern == "flat":
            base = rng.uniform(0.25, 0.60)
            peak = base
            noise = 0.02
        else:
            base = rng.uniform(0.12, 0.28)
            peak = base + rng.uniform(0.35, 0.50)
            noise = 0.04
        vm_count = int(rng.integers(1, 4))
        cores = int(rng.choice([2, 4, 8], p=[0.4, 0.4, 0.2]))
        svc = Service(id=f"svc-{s:02d}", pattern=pattern, vm_count=vm_count,
                      cores_per_vm=cores, mem_per_vm=4.0 * cores,
                      base_level=base, peak_level=peak, noise_scale=noise)
        svc_list.append(svc)
        profile = _pattern_profile(pattern, rng, base, peak, hours)
        for v in range(vm_count):
            offset = rng.normal(0.0, 0.02)
            wobble = rng.normal(0.0, noise, size=hours)
            # sporadic load spikes: the variance that makes the expert labels jitter
            spikes = ((rng.random(hours) < SPIKE_PROB[pattern])
                      * rng.uniform(*SPIKE_RANGE, size=hours))
            trace = np.clip(profile + offset + wobble + spikes, 0.02, 1.0)
            vms.append(VMSpec(id=f"svc-{s:02d}/vm-{v}", service_id=svc.id,
                              cores=cores, mem=svc.mem_per_vm))
            trace_rows.append(trace)

    node_list = [Node(id=i, core_capacity=core_capacity, mem_capacity=mem_capacity)
                 for i in range(nodes)]
    return Fleet(services=svc_list, nodes=node_list, vms=vms,
                 traces=np.vstack(trace_rows), hours=hours)


# -- allocation ---------------------------------------------------------------


@dataclass
class Placement:
    """Result of one Best-Fit round: which node each VM landed on."""

    vm_node: list[int | None]          # index into nodes, None if unplaced
    allocated: np.ndarray              # (n_vms,) cores actually allocated
    node_alloc: np.ndarray             # (n_nodes,) allocated cores per node
    node_mem: np.ndarray               # (n_nodes,) allocated memory per node

    @property
    def unplaced(self) -> list[int]:
        return [i for i, n in enumerate(self.vm_node) if n is None]


def allocation_for(rates: np.ndarray, cores: np.ndarray) -> np.ndarray:
    """Allocated cores per VM: ceil(rate * requested), at least 1."""
    return np.maximum(np.ceil(np.asarray(rates) * np.asarray(cores)), 1.0)


def allocate_best_fit(vms: list[VMSpec], nodes: list[Node],
                      rates: np.ndarray) -> Placement:
    """Place VMs in request order on the feasible node with the least
    remaining core capacity after placement (ties to the lowest node id)."""
    alloc = allocation_for(rates, np.array([vm.cores for vm in vms], dtype=np.float64))
    cap = np.array([n.core_capacity for n in nodes], dtype=np.float64)
    mem_cap = np.array([n.mem_capacity for n in nodes], dtype=np.float64)
    node_alloc = np.zeros(len(nodes))
    node_mem = np.zeros(len(nodes))
    vm_node: list[int | None] = []
    for i, vm in enumerate(vms):
        remaining_after = cap - node_alloc - alloc[i]
        feasible = (remaining_after >= 0) & (mem_cap - node_mem - vm.mem >= 0)
        if not feasible.any():
            vm_node.append(None)
            continue
        masked = np.where(feasible, remaining_after, np.inf)
        best = int(masked.argmin())
        vm_node.append(best)
        node_alloc[best] += alloc[i]
        node_mem[best] += vm.mem
    return Placement(vm_node=vm_node, allocated=alloc,
                     node_alloc=node_alloc, node_mem=node_mem)


# -- outcome accounting --------------------------------------------------------


@dataclass
class CloudOutcome:
    hot_node_rate: float               # fraction of node-hours hot
    remain_cores: int                  # summed over evaluated hours
    rewards: np.ndarray                # (T,) -hot_t + remain_t
    hot_node_hours: int = 0
    unplaced_vm_hours: int = 0


def node_usage(placement: Placement, vms: list[VMSpec], traces: np.ndarray,
               n_nodes: int) -> np.ndarray:
    """Actual core usage per node per hour (requested cores times usage
    fraction; never capped by the allocation)."""
    usage = np.zeros((n_nodes, traces.shape[1]))
    for i, vm in enumerate(vms):
        node = placement.vm_node[i]
        if node is None:
            continue
        usage[node] += vm.cores * traces[i]
    return usage


def evaluate(placement: Placement, traces: np.ndarray, fleet: Fleet,
             hot_threshold: float = HOT_THRESHOLD) -> CloudOutcome:
    """Score a fixed placement against usage traces.

    remain_cores counts (capacity - allocated) across nodes, identically
    every hour since the placement does not change here.
    """
    cap = np.array([n.core_capacity for n in fleet.nodes], dtype=np.float64)
    usage = node_usage(placement, fleet.vms, traces, len(fleet.nodes))
    hot = usage > hot_threshold * cap[:, None]            # (nodes, T)
    hot_per_hour = hot.sum(axis=0)
    remain_per_hour = float(cap.sum() - placement.node_alloc.sum())
    hours = traces.shape[1]
    rewards = -hot_per_hour.astype(np.float64) + remain_per_hour
    return CloudOutcome(
        hot_node_rate=float(hot.sum()) / (len(fleet.nodes) * hours),
        remain_cores=int(round(remain_per_hour * hours)),
        rewards=rewards,
        hot_node_hours=int(hot.sum()),
        unplaced_vm_hours=len(placement.unplaced) * hours,
    )


def run_rates(fleet: Fleet, service_rates: np.ndarray,
              hot_threshold: float = HOT_THRESHOLD) -> CloudOutcome:
    """Episode with hourly re-allocation.

    ``service_rates`` is (S, T); each hour every service's VMs are allocated
    at that hour's rate and re-packed by Best-Fit, then that hour's usage is
    scored.  Totals accumulate across hours.
    """
    S, T = service_rates.shape
    if S != len(fleet.services) or T != fleet.hours:
        raise ContractViolation("rate matrix shape does not match fleet")
    svc_index = {svc.id: k for k, svc in enumerate(fleet.services)}
    vm_service = np.array([svc_index[vm.service_id] for vm in fleet.vms])
    cap = np.array([n.core_capacity for n in fleet.nodes], dtype=np.float64)
    total_cap = cap.sum()

    hot_hours = 0
    remain_total = 0.0
    unplaced_hours = 0
    rewards = np.zeros(T)
    for t in range(T):
        vm_rates = service_rates[vm_service, t]
        placement = allocate_best_fit(fleet.vms, fleet.nodes, vm_rates)
        usage = np.zeros(len(fleet.nodes))
        for i, vm in enumerate(fleet.vms):
            node = placement.vm_node[i]
            if node is None:
                continue
            usage[node] += vm.cores * fleet.traces[i, t]
        h_t = int((usage > hot_threshold * cap).sum())
        m_t = float(total_cap - placement.node_alloc.sum())
        hot_hours += h_t
        remain_total += m_t
        unplaced_hours += len(placement.unplaced)
        rewards[t] = -h_t + m_t
    return CloudOutcome(hot_node_rate=hot_hours / (len(fleet.nodes) * T),
                        remain_cores=int(round(remain_total)),
                        rewards=rewards, hot_node_hours=hot_hours,
                        unplaced_vm_hours=unplaced_hours)


# -- expert policy and trajectories ---------------------------------------------


def expert_rates(traces: np.ndarray, window: int = EXPERT_WINDOW,
                 floor: float = EXPERT_FLOOR) -> np.ndarray:
    """Trailing-window max usage per VM, clamped to [floor, 1]."""
    traces = np.asarray(traces, dtype=np.float64)
    n, T = traces.shape
    out = np.empty_like(traces)
    for t in range(T):
        lo = max(0, t - window + 1)
        out[:, t] = traces[:, lo:t + 1].max(axis=1)
    return np.clip(out, floor, 1.0)


def service_expert_rates(fleet: Fleet, window: int = EXPERT_WINDOW,
                         floor: float = EXPERT_FLOOR) -> np.ndarray:
    """Service-level expert action: the trailing-max rate of the service's
    mean usage trace, (S, T).

    The mean trace is what the policy observes, so the label stays a
    deterministic function of the observable history.
    """
    return expert_rates(fleet.service_usage(), window, floor)


def service_states(fleet: Fleet) -> np.ndarray:
    """Per-service hourly feature rows, (S, T, STATE_WIDTH).

    Deliberately raw: current mean usage plus request sizes and clock
    features.  Tracking the usage envelope over time is the sequence
    model's job, not the feature pipeline's.
    """
    S, T = len(fleet.services), fleet.hours
    usage = fleet.service_usage()
    t = np.arange(T)
    hod = t % 24
    weekday = ((t // 24) % 7 < 5).astype(np.float64)
    out = np.zeros((S, T, STATE_WIDTH))
    for k, svc in enumerate(fleet.services):
        out[k, :, 0] = usage[k]
        out[k, :, 1] = svc.cores_per_vm
        out[k, :, 2] = svc.vm_count
        out[k, :, 3] = svc.mem_per_vm
        out[k, :, 4] = np.sin(2.0 * np.pi * hod / 24.0)
        out[k, :, 5] = np.cos(2.0 * np.pi * hod / 24.0)
        out[k, :, 6] = weekday
    return out


def build_trajectories(fleet: Fleet) -> list[Trajectory]:
    """One expert trajectory per service (states plus expert rate labels)."""
    states = service_states(fleet)
    actions = service_expert_rates(fleet)
    return [Trajectory(entity_id=svc.id, states=states[k], actions=actions[k],
                       domain_tag="cloud")
            for k, svc in enumerate(fleet.services)]
