"""End-to-end trace replay: scheduling, cache management and prefetching.

``run_trace`` replays a trace pass by pass and layer by layer on a virtual
clock. Per layer it (1) pins the layer's cache-resident activated experts,
(2) builds a plan according to the configured scheduling policy, (3) advances
the clock by the plan makespan plus fixed shared-expert/non-expert time,
(4) counts cache lookups (a hit means resident before the plan was built)
and inserts demand-transferred experts through the cache policy, (5) folds
the layer's scores into the score-aware cache state, (6) optionally issues
prefetches into the plan's idle PCIe time, then (7) unpins.

Scheduling policies:

* ``hybrid``       dynamic CPU/GPU/PCIe plan selection per layer
* ``static_layer_split``  a layer boundary: GPU below, CPU above, no cache
* ``fixed_frequency_map`` a fixed GPU-pinned expert set chosen from historical
                          activation frequency; misses run on the CPU
* ``gpu_ondemand`` every activated expert runs on the GPU, misses are
                   transferred on demand
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .caching import (
    CacheStats,
    EvictionError,
    MrsState,
    POLICY_MRS,
    POLICIES,
    insert_with_eviction,
    lookup,
    make_mrs_state,
    mrs_update,
)
from .core import CacheState, ExpertRef, LayerRequest, ModelConfig, STAGE_PREFILL, Trace, expert_bytes
from .costs import HardwareProfile, gpu_time, transfer_time
from .prefetch import (
    PredictionModel,
    PrefetchCandidate,
    evaluate_gain,
    predict_activations,
    select_prefetches,
)
from .scheduling import (
    ASSIGN_GPU_CACHED,
    DEVICE_CPU,
    DEVICE_GPU,
    DEVICE_PCIE,
    KIND_COMPUTE,
    KIND_TRANSFER,
    MakespanEvaluator,
    SchedulePlan,
    TimelineEvent,
    _finalize,
    activated_tasks,
    device_busy,
    pcie_idle_budget,
    plan_all_cpu,
    plan_all_gpu,
    select_plan,
)

SCHED_HYBRID = "hybrid"
SCHED_STATIC_SPLIT = "static_layer_split"
SCHED_FIXED_MAP = "fixed_frequency_map"
SCHED_GPU_ONDEMAND = "gpu_ondemand"
SCHEDULINGS = (SCHED_HYBRID, SCHED_STATIC_SPLIT, SCHED_FIXED_MAP, SCHED_GPU_ONDEMAND)

# Policies with a fixed residency; the dynamic cache machinery is bypassed.
_STATIC_SCHEDULINGS = (SCHED_STATIC_SPLIT, SCHED_FIXED_MAP)


@dataclass(frozen=True)
class EnginePolicy:
    """Full policy of one run: scheduling, cache policy, prefetch settings."""

    scheduling: str = SCHED_HYBRID
    cache_policy: str = POLICY_MRS
    prefetch: bool = False
    prediction: PredictionModel = field(default_factory=PredictionModel)
    static_split_point: int | None = None  # None: derived from the cache ratio
    pin_top_fraction: float | None = None  # None: pin up to cache capacity
    mrs_alpha: float = 0.5
    mrs_p: int | None = None  # None: 2 * num_activated
    calibration_prefix_fraction: float = 0.1
    validate: bool = False  # re-plan after prefetch and assert makespan unchanged

    def __post_init__(self) -> None:
        if self.scheduling not in SCHEDULINGS:
            raise ValueError(f"unknown scheduling {self.scheduling!r}")
        if self.cache_policy not in POLICIES:
            raise ValueError(f"unknown cache policy {self.cache_policy!r}")
        if self.pin_top_fraction is not None and not 0.0 <= self.pin_top_fraction <= 1.0:
            raise ValueError(f"pin_top_fraction must be in [0, 1], got {self.pin_top_fraction}")
        if not 0.0 < self.calibration_prefix_fraction <= 1.0:
            raise ValueError("calibration_prefix_fraction must be in (0, 1]")
        if self.prefetch and self.scheduling in _STATIC_SCHEDULINGS:
            raise ValueError(f"prefetch is meaningless with {self.scheduling} (fixed residency)")
        if not 0.0 <= self.mrs_alpha <= 1.0:
            raise ValueError(f"mrs_alpha must be in [0, 1], got {self.mrs_alpha}")


@dataclass
class RunMetrics:
    """Aggregated outcome of one run."""

    ttft: float | None
    tbt: tuple[float, ...]
    cache: CacheStats
    device_busy: dict[str, float]
    device_idle: dict[str, float]
    prefetch_issued: int
    prefetch_hits: int
    prefetch_expired: int
    elapsed: float
    plans: list[SchedulePlan] | None = None  # only when collect_plans is set

    @property
    def mean_tbt(self) -> float | None:
        return sum(self.tbt) / len(self.tbt) if self.tbt else None

    @property
    def median_tbt(self) -> float | None:
        if not self.tbt:
            return None
        vals = sorted(self.tbt)
        mid = len(vals) // 2
        return vals[mid] if len(vals) % 2 else (vals[mid - 1] + vals[mid]) / 2

    @property
    def hit_rate(self) -> float | None:
        return self.cache.hits / self.cache.lookups if self.cache.lookups else None

    def to_record(self) -> dict:
        total = self.elapsed if self.elapsed > 0 else 1.0
        return {
            "ttft": self.ttft,
            "mean_tbt": self.mean_tbt,
            "median_tbt": self.median_tbt,
            "decode_passes": len(self.tbt),
            "hit_rate": self.hit_rate,
            "lookups": self.cache.lookups,
            "hits": self.cache.hits,
            "inserts": self.cache.inserts,
            "evictions": self.cache.evictions,
            "gpu_util": self.device_busy[DEVICE_GPU] / total,
            "cpu_util": self.device_busy[DEVICE_CPU] / total,
            "pcie_util": self.device_busy[DEVICE_PCIE] / total,
            "prefetch_issued": self.prefetch_issued,
            "prefetch_hits": self.prefetch_hits,
            "prefetch_expired": self.prefetch_expired,
            "elapsed": self.elapsed,
        }


@dataclass
class PassResult:
    latency: float
    layer_makespans: list[float]
    cache_stats: CacheStats
    busy: dict[str, float]
    prefetch_issued: int = 0
    prefetch_hits: int = 0
    prefetch_expired: int = 0
    plans: list[SchedulePlan] | None = None


def _serial_gpu_events(
    tasks, profile: HardwareProfile
) -> tuple[list[TimelineEvent], dict[ExpertRef, str]]:
    events: list[TimelineEvent] = []
    assignment: dict[ExpertRef, str] = {}
    clock = 0.0
    for t in sorted(tasks, key=lambda t: (-t.load, t.ref)):
        end = clock + gpu_time(profile, t.load)
        events.append(TimelineEvent(DEVICE_GPU, t.ref, KIND_COMPUTE, clock, end))
        assignment[t.ref] = ASSIGN_GPU_CACHED
        clock = end
    return events, assignment


def static_layer_split_plan(
    request: LayerRequest, profile: HardwareProfile, split_point: int
) -> SchedulePlan:
    """Whole-layer mapping: layers below the split on GPU, the rest on CPU."""
    tasks = activated_tasks(request)
    if request.layer < split_point:
        return _finalize(*_serial_gpu_events(tasks, profile))
    return plan_all_cpu(tasks, profile)


def fixed_frequency_map_plan(
    request: LayerRequest, pinned_set: frozenset[ExpertRef], profile: HardwareProfile
) -> SchedulePlan:
    """Pinned activated experts on the GPU (load descending), everything else
    on the CPU (load ascending); no demand transfers ever."""
    tasks = activated_tasks(request)
    events, assignment = _serial_gpu_events((t for t in tasks if t.ref in pinned_set), profile)
    cpu_plan = plan_all_cpu((t for t in tasks if t.ref not in pinned_set), profile)
    events.extend(cpu_plan.events)
    assignment.update(cpu_plan.assignment)
    return _finalize(events, assignment)


def compute_fixed_pinned_set(
    trace: Trace, capacity: int, prefix_fraction: float, pin_top_fraction: float | None
) -> frozenset[ExpertRef]:
    """Top experts by activation count over a calibration prefix of the trace.

    Ties break by expert ref. The pinned set never exceeds the cache capacity.
    """
    n_prefix = max(1, math.floor(prefix_fraction * len(trace.passes)))
    counts: dict[ExpertRef, int] = {}
    for fwd in trace.passes[:n_prefix]:
        for req in fwd.layers:
            for i in req.activated:
                ref = ExpertRef(req.layer, i)
                counts[ref] = counts.get(ref, 0) + 1
    size = capacity
    if pin_top_fraction is not None:
        size = min(capacity, math.floor(pin_top_fraction * trace.config.total_routed_experts))
    universe = [
        ExpertRef(layer, e)
        for layer in range(trace.config.num_layers)
        for e in range(trace.config.num_routed)
    ]
    ordered = sorted(universe, key=lambda r: (-counts.get(r, 0), r))
    return frozenset(ordered[:size])


def _build_plan(
    request: LayerRequest,
    policy: EnginePolicy,
    cache: CacheState,
    profile: HardwareProfile,
    size_bytes: float,
    split_point: int,
    fixed_pinned: frozenset[ExpertRef],
) -> SchedulePlan:
    if policy.scheduling == SCHED_HYBRID:
        return select_plan(request, cache, profile, size_bytes)
    if policy.scheduling == SCHED_GPU_ONDEMAND:
        tasks = activated_tasks(request)
        cached = [t for t in tasks if t.ref in cache.resident]
        uncached = [t for t in tasks if t.ref not in cache.resident]
        return plan_all_gpu(cached, uncached, profile, size_bytes)
    if policy.scheduling == SCHED_STATIC_SPLIT:
        return static_layer_split_plan(request, profile, split_point)
    return fixed_frequency_map_plan(request, fixed_pinned, profile)


def run_pass(
    trace: Trace,
    pass_index: int,
    policy: EnginePolicy,
    cache: CacheState,
    profile: HardwareProfile,
    mrs: MrsState | None,
    seed: int,
    *,
    split_point: int = 0,
    fixed_pinned: frozenset[ExpertRef] = frozenset(),
    evaluator: MakespanEvaluator | None = None,
    collect_plans: bool = False,
) -> PassResult:
    """Replay one forward pass; mutates cache and mrs, returns the latency."""
    fwd = trace.passes[pass_index]
    size_bytes = expert_bytes(trace.config)
    tdur = transfer_time(profile, size_bytes)
    if evaluator is None:
        evaluator = MakespanEvaluator(profile, size_bytes)
    static_scheduling = policy.scheduling in _STATIC_SCHEDULINGS
    track_cache = policy.scheduling != SCHED_STATIC_SPLIT

    result = PassResult(
        latency=0.0,
        layer_makespans=[],
        cache_stats=CacheStats(),
        busy={DEVICE_CPU: 0.0, DEVICE_GPU: 0.0, DEVICE_PCIE: 0.0},
        plans=[] if collect_plans else None,
    )
    # expert -> whether it was looked-up/hit while prefetch-pinned
    prefetch_pins: dict[ExpertRef, bool] = {}

    for request in fwd.layers:
        layer = request.layer
        refs = [ExpertRef(layer, i) for i in sorted(request.activated)]

        # (1) lookups first: a hit means resident before this layer's plan.
        if track_cache:
            for ref in refs:
                result.cache_stats.lookups += 1
                if lookup(cache, ref, policy.cache_policy):
                    result.cache_stats.hits += 1
                    if ref in prefetch_pins and not prefetch_pins[ref]:
                        prefetch_pins[ref] = True
                        result.prefetch_hits += 1

        layer_pins = {ref for ref in refs if ref in cache.resident and ref not in cache.pinned}
        cache.pinned |= layer_pins

        # (2) plan, (3) clock advance
        plan = _build_plan(request, policy, cache, profile, size_bytes, split_point, fixed_pinned)
        layer_time = plan.makespan + profile.shared_expert_time + profile.non_expert_time
        result.layer_makespans.append(plan.makespan)
        result.latency += layer_time
        busy = device_busy(plan)
        for dev in result.busy:
            result.busy[dev] += busy[dev]
        result.busy[DEVICE_GPU] += profile.shared_expert_time + profile.non_expert_time
        if collect_plans:
            result.plans.append(plan)

        # (4) demand-transferred experts enter the cache through the policy.
        if track_cache and not static_scheduling and cache.capacity > 0:
            arrived = sorted(
                (e for e in plan.events if e.kind == KIND_TRANSFER), key=lambda e: e.start
            )
            for ev in arrived:
                if ev.expert in cache.resident:
                    continue
                evicted = insert_with_eviction(cache, ev.expert, policy.cache_policy, mrs)
                result.cache_stats.inserts += 1
                if evicted is not None:
                    result.cache_stats.evictions += 1
                    if evicted in prefetch_pins:  # unpinned prefetch got evicted
                        del prefetch_pins[evicted]

        # (5) score-aware cache state follows every executed layer.
        if track_cache and policy.cache_policy == POLICY_MRS and mrs is not None:
            mrs_update(mrs, layer, request.scores)

        # (6) prefetch into the plan's idle PCIe time.
        if policy.prefetch and not static_scheduling and cache.capacity > 0:
            predicted = predict_activations(trace, pass_index, layer, policy.prediction, seed)
            budget = pcie_idle_budget(plan)
            candidates: list[PrefetchCandidate] = []
            for dist, pred in enumerate(predicted, start=1):
                for i in sorted(pred.activated):
                    ref = ExpertRef(pred.layer, i)
                    if ref in cache.resident:
                        continue
                    gain = evaluate_gain(ref, pred, cache, evaluator)
                    candidates.append(
                        PrefetchCandidate(
                            expert=ref,
                            predicted_load=pred.loads[i],
                            gain=gain,
                            cost=tdur,
                            layer_distance=dist,
                        )
                    )
            chosen = select_prefetches(candidates, budget)
            for ref in chosen:
                if ref in cache.resident:
                    continue
                try:
                    evicted = insert_with_eviction(cache, ref, policy.cache_policy, mrs)
                except EvictionError:
                    break  # pins filled the cache; prefetch is opportunistic
                result.cache_stats.inserts += 1
                result.prefetch_issued += 1
                result.busy[DEVICE_PCIE] += tdur
                if evicted is not None:
                    result.cache_stats.evictions += 1
                    if evicted in prefetch_pins:
                        del prefetch_pins[evicted]
                cache.pinned.add(ref)
                prefetch_pins.setdefault(ref, False)
            if policy.validate:
                replan = _build_plan(
                    request, policy, cache, profile, size_bytes, split_point, fixed_pinned
                )
                if replan.makespan != plan.makespan:
                    raise AssertionError(
                        f"prefetch changed the committed layer makespan: "
                        f"{plan.makespan} -> {replan.makespan}"
                    )

        # (7) unpin this layer, expire prefetch pins whose layer just ran.
        cache.pinned -= layer_pins
        for ref in [r for r in prefetch_pins if r.layer <= layer]:
            used = prefetch_pins.pop(ref)
            cache.pinned.discard(ref)
            if not used:
                result.prefetch_expired += 1

    # Predictions never used because the pass ended count as expired.
    for ref, used in prefetch_pins.items():
        cache.pinned.discard(ref)
        if not used:
            result.prefetch_expired += 1

    result.cache_stats.check()
    return result


def cache_capacity(config: ModelConfig, capacity_ratio: float) -> int:
    if not 0.0 < capacity_ratio <= 1.0:
        raise ValueError(f"capacity_ratio must be in (0, 1], got {capacity_ratio}")
    return math.floor(capacity_ratio * config.total_routed_experts)


def run_trace(
    trace: Trace,
    policy: EnginePolicy,
    capacity_ratio: float,
    profile: HardwareProfile,
    seed: int,
    *,
    collect_plans: bool = False,
) -> RunMetrics:
    """Replay a whole trace under one policy and aggregate metrics."""
    config = trace.config
    capacity = cache_capacity(config, capacity_ratio)
    cache = CacheState(capacity)
    mrs = make_mrs_state(config, alpha=policy.mrs_alpha, p=policy.mrs_p)
    evaluator = MakespanEvaluator(profile, expert_bytes(config))

    split_point = policy.static_split_point
    if split_point is None:
        split_point = math.floor(capacity_ratio * config.num_layers)
    if not 0 <= split_point <= config.num_layers:
        raise ValueError(f"static_split_point must be in [0, num_layers], got {split_point}")

    fixed_pinned: frozenset[ExpertRef] = frozenset()
    if policy.scheduling == SCHED_FIXED_MAP:
        fixed_pinned = compute_fixed_pinned_set(
            trace, capacity, policy.calibration_prefix_fraction, policy.pin_top_fraction
        )
        cache.resident = set(fixed_pinned)

    ttft = None
    tbt: list[float] = []
    stats = CacheStats()
    busy = {DEVICE_CPU: 0.0, DEVICE_GPU: 0.0, DEVICE_PCIE: 0.0}
    prefetch_issued = prefetch_hits = prefetch_expired = 0
    elapsed = 0.0
    all_plans: list[SchedulePlan] = []

    for pass_index, fwd in enumerate(trace.passes):
        res = run_pass(
            trace,
            pass_index,
            policy,
            cache,
            profile,
            mrs,
            seed,
            split_point=split_point,
            fixed_pinned=fixed_pinned,
            evaluator=evaluator,
            collect_plans=collect_plans,
        )
        elapsed += res.latency
        stats.merge(res.cache_stats)
        for dev in busy:
            busy[dev] += res.busy[dev]
        prefetch_issued += res.prefetch_issued
        prefetch_hits += res.prefetch_hits
        prefetch_expired += res.prefetch_expired
        if fwd.stage == STAGE_PREFILL and ttft is None:
            ttft = res.latency
        elif fwd.stage != STAGE_PREFILL:
            tbt.append(res.latency)
        if collect_plans:
            all_plans.extend(res.plans)

    idle = {dev: elapsed - busy[dev] for dev in busy}
    metrics = RunMetrics(
        ttft=ttft,
        tbt=tuple(tbt),
        cache=stats,
        device_busy=busy,
        device_idle=idle,
        prefetch_issued=prefetch_issued,
        prefetch_hits=prefetch_hits,
        prefetch_expired=prefetch_expired,
        elapsed=elapsed,
    )
    if collect_plans:
        metrics.plans = all_plans  # type: ignore[attr-defined]
    return metrics
