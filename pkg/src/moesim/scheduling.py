"""Intra-layer schedule construction for one MoE layer.

Every activated expert of a layer must be computed exactly once, either on
the CPU, directly on the GPU (its weights are cache-resident), or on the GPU
after a PCIe upload. The planner builds a static schedule before execution by
iteratively filling three device timelines; at each step it commits, among
the devices' next candidate actions, the one with the earliest completion
time. Per-device candidate orderings follow fixed priority rules:

* GPU: highest-load cached (or already-arrived) expert first,
* CPU: lowest-load uncached expert first; when its own queue is empty it may
  steal the lowest-load cached expert from the GPU queue,
* PCIe: highest-load uncached expert first; an expert being transferred is
  off-limits to the CPU, and a completed transfer inserts the expert into
  the GPU queue in load order.

Because the schedule is a plan computed up front, commits need not happen in
global time order; only per-device contiguity and the transfer-before-compute
constraint matter. ``select_plan`` guards the heuristic with the two
degenerate plans (all-CPU, all-GPU) and returns the best of the three.
``oracle_optimal`` exhaustively enumerates CPU/GPU assignments under the same
ordering rules, as an independent check of plan quality.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple

from .core import CacheState, ExpertRef, LayerRequest
from .costs import HardwareProfile, cpu_time, gpu_time, transfer_time

DEVICE_CPU = "cpu"
DEVICE_GPU = "gpu"
DEVICE_PCIE = "pcie"

KIND_COMPUTE = "compute"
KIND_TRANSFER = "transfer"

ASSIGN_CPU = "cpu"
ASSIGN_GPU_CACHED = "gpu_cached"
ASSIGN_GPU_TRANSFER = "gpu_after_transfer"

# Device priority on completion-time ties: transfers first, then GPU, then CPU.
_TIE_ORDER = {DEVICE_PCIE: 0, DEVICE_GPU: 1, DEVICE_CPU: 2}


class ExpertTask(NamedTuple):
    ref: ExpertRef
    load: int


class TimelineEvent(NamedTuple):
    device: str
    expert: ExpertRef
    kind: str
    start: float
    end: float


@dataclass(frozen=True)
class SchedulePlan:
    """A committed layer schedule: events, per-expert assignment, makespan."""

    events: tuple[TimelineEvent, ...]
    assignment: dict[ExpertRef, str]
    makespan: float

    def compute_events(self) -> list[TimelineEvent]:
        return [e for e in self.events if e.kind == KIND_COMPUTE]

    def transfer_events(self) -> list[TimelineEvent]:
        return [e for e in self.events if e.kind == KIND_TRANSFER]


class PlanInvariantError(ValueError):
    """A produced plan violated a schedule invariant."""


def check_plan(plan: SchedulePlan) -> None:
    """Validate a plan: per-device non-overlap, transfer-before-compute,
    exactly one compute per expert, makespan equals the latest event end."""
    by_device: dict[str, list[TimelineEvent]] = {}
    for ev in plan.events:
        if ev.end < ev.start:
            raise PlanInvariantError(f"event ends before it starts: {ev}")
        if (ev.device == DEVICE_PCIE) != (ev.kind == KIND_TRANSFER):
            raise PlanInvariantError(f"device/kind mismatch: {ev}")
        by_device.setdefault(ev.device, []).append(ev)

    for device, evs in by_device.items():
        evs = sorted(evs, key=lambda e: e.start)
        for a, b in zip(evs, evs[1:]):
            if b.start < a.end:
                raise PlanInvariantError(f"overlap on {device}: {a} vs {b}")

    computed: dict[ExpertRef, TimelineEvent] = {}
    for ev in plan.events:
        if ev.kind != KIND_COMPUTE:
            continue
        if ev.expert in computed:
            raise PlanInvariantError(f"expert computed twice: {ev.expert}")
        computed[ev.expert] = ev
    if set(computed) != set(plan.assignment):
        raise PlanInvariantError(
            f"assignment covers {sorted(plan.assignment)} but computes cover {sorted(computed)}"
        )

    transfer_end = {ev.expert: ev.end for ev in plan.events if ev.kind == KIND_TRANSFER}
    for ref, how in plan.assignment.items():
        if how == ASSIGN_GPU_TRANSFER:
            if ref not in transfer_end:
                raise PlanInvariantError(f"{ref} marked gpu_after_transfer but has no transfer")
            if computed[ref].start < transfer_end[ref]:
                raise PlanInvariantError(
                    f"{ref} computed at {computed[ref].start} before transfer end {transfer_end[ref]}"
                )

    if plan.events:
        max_end = max(ev.end for ev in plan.events)
        if plan.makespan != max_end:
            raise PlanInvariantError(f"makespan {plan.makespan} != max event end {max_end}")
    elif plan.makespan != 0.0:
        raise PlanInvariantError("empty plan must have makespan 0")


def activated_tasks(request: LayerRequest) -> list[ExpertTask]:
    """All activated experts of a request as (ref, load), in ref order."""
    return [
        ExpertTask(ExpertRef(request.layer, i), request.loads[i])
        for i in sorted(request.activated)
    ]


def build_queues(
    request: LayerRequest, cache: CacheState
) -> tuple[list[ExpertTask], list[ExpertTask]]:
    """Split activated experts into the GPU queue (cached, load descending)
    and the CPU queue (uncached, load ascending); ties break by expert ref."""
    tasks = activated_tasks(request)
    gpu_q = sorted(
        (t for t in tasks if t.ref in cache.resident), key=lambda t: (-t.load, t.ref)
    )
    cpu_q = sorted(
        (t for t in tasks if t.ref not in cache.resident), key=lambda t: (t.load, t.ref)
    )
    return gpu_q, cpu_q


def _finalize(
    events: list[TimelineEvent], assignment: dict[ExpertRef, str]
) -> SchedulePlan:
    events_t = tuple(sorted(events, key=lambda e: (e.start, e.end, _TIE_ORDER[e.device])))
    makespan = max((e.end for e in events_t), default=0.0)
    plan = SchedulePlan(events=events_t, assignment=assignment, makespan=makespan)
    check_plan(plan)
    return plan


def simulate_schedule(
    gpu_queue: Iterable[ExpertTask],
    cpu_queue: Iterable[ExpertTask],
    profile: HardwareProfile,
    expert_size_bytes: float,
) -> SchedulePlan:
    """Greedy three-timeline fill; see the module docstring for the rules."""
    gpu_q = list(gpu_queue)
    cpu_q = list(cpu_queue)
    if {t.ref for t in gpu_q} & {t.ref for t in cpu_q}:
        raise ValueError("gpu and cpu queues must be disjoint")
    if any(t.load < 1 for t in gpu_q + cpu_q):
        raise ValueError("every scheduled expert needs load >= 1")

    tdur = transfer_time(profile, expert_size_bytes)

    # (task, available_at): cached experts are available immediately,
    # transferred ones from their transfer's end.
    gpu_pool: list[tuple[ExpertTask, float]] = [(t, 0.0) for t in gpu_q]
    cpu_pending: list[ExpertTask] = sorted(cpu_q, key=lambda t: (t.load, t.ref))
    transfer_pending: list[ExpertTask] = sorted(cpu_q, key=lambda t: (-t.load, t.ref))

    clocks = {DEVICE_CPU: 0.0, DEVICE_GPU: 0.0, DEVICE_PCIE: 0.0}
    claimed: set[ExpertRef] = set()
    in_flight: set[ExpertRef] = set()
    transferred: set[ExpertRef] = set()
    events: list[TimelineEvent] = []
    assignment: dict[ExpertRef, str] = {}
    cpu_position = 0
    total = len(gpu_q) + len(cpu_q)

    def gpu_candidate() -> tuple[float, ExpertTask, float] | None:
        if not gpu_pool:
            return None
        ready = [(t, a) for (t, a) in gpu_pool if a <= clocks[DEVICE_GPU]]
        if ready:
            start = clocks[DEVICE_GPU]
        else:
            # Wait for the next arrival; the GPU clock jumps, leaving idle time.
            start = max(clocks[DEVICE_GPU], min(a for _, a in gpu_pool))
            ready = [(t, a) for (t, a) in gpu_pool if a <= start]
        task = min(ready, key=lambda ta: (-ta[0].load, ta[0].ref))[0]
        return start + gpu_time(profile, task.load), task, start

    def cpu_candidate() -> tuple[float, ExpertTask, bool] | None:
        own = next((t for t in cpu_pending if t.ref not in in_flight and t.ref not in claimed), None)
        if own is not None:
            return clocks[DEVICE_CPU] + cpu_time(profile, own.load, cpu_position), own, False
        ready = [(t, a) for (t, a) in gpu_pool if a <= clocks[DEVICE_CPU]]
        if not ready:
            return None
        task = min(ready, key=lambda ta: (ta[0].load, ta[0].ref))[0]
        return clocks[DEVICE_CPU] + cpu_time(profile, task.load, cpu_position), task, True

    def pcie_candidate() -> tuple[float, ExpertTask] | None:
        nxt = next(
            (t for t in transfer_pending if t.ref not in claimed and t.ref not in in_flight), None
        )
        if nxt is None:
            return None
        return clocks[DEVICE_PCIE] + tdur, nxt

    while len(claimed) < total:
        proposals: list[tuple[float, int, str]] = []
        pcie = pcie_candidate()
        if pcie is not None:
            proposals.append((pcie[0], _TIE_ORDER[DEVICE_PCIE], DEVICE_PCIE))
        gpu = gpu_candidate()
        if gpu is not None:
            proposals.append((gpu[0], _TIE_ORDER[DEVICE_GPU], DEVICE_GPU))
        cpu = cpu_candidate()
        if cpu is not None:
            proposals.append((cpu[0], _TIE_ORDER[DEVICE_CPU], DEVICE_CPU))
        if not proposals:
            raise RuntimeError("scheduler stalled with unscheduled experts")

        _, _, device = min(proposals)
        if device == DEVICE_PCIE:
            end, task = pcie
            start = clocks[DEVICE_PCIE]
            events.append(TimelineEvent(DEVICE_PCIE, task.ref, KIND_TRANSFER, start, end))
            clocks[DEVICE_PCIE] = end
            in_flight.add(task.ref)
            transferred.add(task.ref)
            transfer_pending.remove(task)
            if task in cpu_pending:
                cpu_pending.remove(task)
            gpu_pool.append((task, end))
        elif device == DEVICE_GPU:
            end, task, start = gpu
            events.append(TimelineEvent(DEVICE_GPU, task.ref, KIND_COMPUTE, start, end))
            clocks[DEVICE_GPU] = end
            claimed.add(task.ref)
            gpu_pool[:] = [(t, a) for (t, a) in gpu_pool if t.ref != task.ref]
            assignment[task.ref] = (
                ASSIGN_GPU_TRANSFER if task.ref in transferred else ASSIGN_GPU_CACHED
            )
        else:
            end, task, stolen = cpu
            start = clocks[DEVICE_CPU]
            events.append(TimelineEvent(DEVICE_CPU, task.ref, KIND_COMPUTE, start, end))
            clocks[DEVICE_CPU] = end
            claimed.add(task.ref)
            cpu_position += 1
            if stolen:
                gpu_pool[:] = [(t, a) for (t, a) in gpu_pool if t.ref != task.ref]
            else:
                cpu_pending.remove(task)
            assignment[task.ref] = ASSIGN_CPU

    return _finalize(events, assignment)


def plan_all_cpu(tasks: Iterable[ExpertTask], profile: HardwareProfile) -> SchedulePlan:
    """Degenerate plan: every expert on the CPU, ascending load, one burst."""
    ordered = sorted(tasks, key=lambda t: (t.load, t.ref))
    events: list[TimelineEvent] = []
    assignment: dict[ExpertRef, str] = {}
    clock = 0.0
    for pos, task in enumerate(ordered):
        end = clock + cpu_time(profile, task.load, pos)
        events.append(TimelineEvent(DEVICE_CPU, task.ref, KIND_COMPUTE, clock, end))
        assignment[task.ref] = ASSIGN_CPU
        clock = end
    return _finalize(events, assignment)


def plan_all_gpu(
    cached: Iterable[ExpertTask],
    uncached: Iterable[ExpertTask],
    profile: HardwareProfile,
    expert_size_bytes: float,
) -> SchedulePlan:
    """Degenerate plan: cached experts on the GPU load-descending, uncached
    transferred load-descending and computed as they arrive."""
    cached_o = sorted(cached, key=lambda t: (-t.load, t.ref))
    uncached_o = sorted(uncached, key=lambda t: (-t.load, t.ref))
    tdur = transfer_time(profile, expert_size_bytes) if uncached_o else 0.0

    events: list[TimelineEvent] = []
    assignment: dict[ExpertRef, str] = {}
    gclock = 0.0
    for task in cached_o:
        end = gclock + gpu_time(profile, task.load)
        events.append(TimelineEvent(DEVICE_GPU, task.ref, KIND_COMPUTE, gclock, end))
        assignment[task.ref] = ASSIGN_GPU_CACHED
        gclock = end
    pclock = 0.0
    for task in uncached_o:
        arrive = pclock + tdur
        events.append(TimelineEvent(DEVICE_PCIE, task.ref, KIND_TRANSFER, pclock, arrive))
        pclock = arrive
        start = max(gclock, arrive)
        end = start + gpu_time(profile, task.load)
        events.append(TimelineEvent(DEVICE_GPU, task.ref, KIND_COMPUTE, start, end))
        assignment[task.ref] = ASSIGN_GPU_TRANSFER
        gclock = end
    return _finalize(events, assignment)


def _select_plan_tasks(
    cached: list[ExpertTask],
    uncached: list[ExpertTask],
    profile: HardwareProfile,
    expert_size_bytes: float,
) -> SchedulePlan:
    gpu_q = sorted(cached, key=lambda t: (-t.load, t.ref))
    cpu_q = sorted(uncached, key=lambda t: (t.load, t.ref))
    best = simulate_schedule(gpu_q, cpu_q, profile, expert_size_bytes)
    for alt in (
        plan_all_cpu(cached + uncached, profile),
        plan_all_gpu(cached, uncached, profile, expert_size_bytes),
    ):
        if alt.makespan < best.makespan:
            best = alt
    return best


def select_plan(
    request: LayerRequest,
    cache: CacheState,
    profile: HardwareProfile,
    expert_size_bytes: float,
) -> SchedulePlan:
    """Best of the greedy plan and the two degenerate plans (ties keep greedy).

    The degenerate guards mean the hybrid plan is never worse than running the
    whole layer on one device.
    """
    gpu_q, cpu_q = build_queues(request, cache)
    return _select_plan_tasks(gpu_q, cpu_q, profile, expert_size_bytes)


ORACLE_LIMIT = 12


def oracle_optimal(
    request: LayerRequest,
    cache: CacheState,
    profile: HardwareProfile,
    expert_size_bytes: float,
    limit: int = ORACLE_LIMIT,
) -> float:
    """Exhaustive minimum makespan over all CPU/GPU assignments.

    For each of the 2^n assignments, CPU experts run ascending by load, GPU
    cached experts descending, and GPU uncached experts transfer descending
    with compute after arrival -- the same ordering rules the planner uses.
    Exponential: refuses instances above ``limit`` activated experts.
    """
    tasks = activated_tasks(request)
    n = len(tasks)
    if n > limit:
        raise ValueError(f"oracle limited to {limit} activated experts, got {n}")
    resident = cache.resident
    tdur = transfer_time(profile, expert_size_bytes)

    asc = sorted(range(n), key=lambda i: (tasks[i].load, tasks[i].ref))
    desc = sorted(range(n), key=lambda i: (-tasks[i].load, tasks[i].ref))
    cached_mask = [tasks[i].ref in resident for i in range(n)]

    best = float("inf")
    for mask in range(1 << n):
        # bit set -> CPU
        cpu_total = 0.0
        pos = 0
        for i in asc:
            if mask >> i & 1:
                cpu_total += cpu_time(profile, tasks[i].load, pos)
                pos += 1
        if cpu_total >= best:
            continue
        gclock = 0.0
        for i in desc:
            if not (mask >> i & 1) and cached_mask[i]:
                gclock += gpu_time(profile, tasks[i].load)
        arrivals = 0
        for i in desc:
            if not (mask >> i & 1) and not cached_mask[i]:
                arrivals += 1
                gclock = max(gclock, arrivals * tdur) + gpu_time(profile, tasks[i].load)
        best = min(best, max(cpu_total, gclock))
    return best


def pcie_idle_budget(plan: SchedulePlan) -> float:
    """PCIe time left inside the plan's span once demand transfers are done.

    Demand transfers are committed back-to-back from t=0, so the idle window
    is the tail of the PCIe timeline up to the makespan.
    """
    busy = sum(e.end - e.start for e in plan.events if e.kind == KIND_TRANSFER)
    return max(0.0, plan.makespan - busy)


def device_busy(plan: SchedulePlan) -> dict[str, float]:
    busy = {DEVICE_CPU: 0.0, DEVICE_GPU: 0.0, DEVICE_PCIE: 0.0}
    for ev in plan.events:
        busy[ev.device] += ev.end - ev.start
    return busy


def format_plan(plan: SchedulePlan) -> str:
    """Debug dump: one event per line, `device layer expert kind start end`."""
    lines = []
    for ev in plan.events:
        lines.append(
            f"{ev.device}\t{ev.expert.layer}\t{ev.expert.expert}\t{ev.kind}"
            f"\t{ev.start:.6f}\t{ev.end:.6f}"
        )
    return "\n".join(lines)


class MakespanEvaluator:
    """Memoized select-plan makespans, keyed by cached/uncached load multisets.

    The time structure of a plan depends only on the sorted load lists, not on
    expert identities, so prefetch gain evaluation and decode-heavy replay hit
    a tiny table instead of re-simulating identical layer shapes.
    """

    def __init__(self, profile: HardwareProfile, expert_size_bytes: float) -> None:
        self.profile = profile
        self.expert_size_bytes = expert_size_bytes
        self._memo: dict[tuple[tuple[int, ...], tuple[int, ...]], float] = {}

    def makespan(self, cached_loads: Iterable[int], uncached_loads: Iterable[int]) -> float:
        key = (tuple(sorted(cached_loads)), tuple(sorted(uncached_loads)))
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        cached = [ExpertTask(ExpertRef(0, i), load) for i, load in enumerate(key[0])]
        uncached = [
            ExpertTask(ExpertRef(0, len(key[0]) + i), load) for i, load in enumerate(key[1])
        ]
        value = _select_plan_tasks(cached, uncached, self.profile, self.expert_size_bytes).makespan
        self._memo[key] = value
        return value

    def makespan_for_request(self, request: LayerRequest, resident: set[ExpertRef]) -> float:
        cached = []
        uncached = []
        for i in sorted(request.activated):
            ref = ExpertRef(request.layer, i)
            (cached if ref in resident else uncached).append(request.loads[i])
        return self.makespan(cached, uncached)
