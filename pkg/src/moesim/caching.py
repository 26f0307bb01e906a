"""GPU expert-cache replacement policies.

Three policies share one cache container: classic LRU and LFU baselines, and
a score-aware policy, "minus recent score" (MRS), that keeps an exponential
moving average S of each expert's routing score and evicts the expert with
the smallest S. Only the top-p scores of a layer are accumulated into S
(p defaults to twice the number of activated experts); entries outside the
top p decay geometrically, since they receive an update of alpha * 0.

``replay_trace`` feeds a trace's activated-expert stream straight through a
cache, with no scheduling involved, for isolated policy comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass

from .core import CacheState, ExpertRef, ModelConfig, Trace

POLICY_MRS = "mrs"
POLICY_LRU = "lru"
POLICY_LFU = "lfu"
POLICIES = (POLICY_MRS, POLICY_LRU, POLICY_LFU)


class EvictionError(RuntimeError):
    """Cache full and every resident expert is pinned."""


@dataclass
class MrsState:
    """Estimated priority score per expert plus the averaging parameters."""

    scores: dict[ExpertRef, float]
    alpha: float = 0.5
    p: int = 4

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.p < 1:
            raise ValueError(f"p must be >= 1, got {self.p}")


def make_mrs_state(config: ModelConfig, alpha: float = 0.5, p: int | None = None) -> MrsState:
    """Uniform prior (1/num_routed) over every expert; p defaults to 2K."""
    if p is None:
        p = 2 * config.num_activated
    prior = 1.0 / config.num_routed
    scores = {
        ExpertRef(layer, e): prior
        for layer in range(config.num_layers)
        for e in range(config.num_routed)
    }
    return MrsState(scores=scores, alpha=alpha, p=p)


def top_p_filter(scores: tuple[float, ...] | list[float], p: int) -> list[float]:
    """Zero all but the p largest entries; ties keep the lower index."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep = set(order[:p])
    return [scores[i] if i in keep else 0.0 for i in range(len(scores))]


def mrs_update(state: MrsState, layer: int, scores: tuple[float, ...] | list[float]) -> MrsState:
    """Fold one layer's routing scores into S (in place; returns state).

    S[i] <- alpha * TopP(scores)[i] + (1 - alpha) * S[i] for every expert i of
    this layer; other layers are untouched.
    """
    filtered = top_p_filter(scores, state.p)
    a = state.alpha
    for i, t in enumerate(filtered):
        ref = ExpertRef(layer, i)
        state.scores[ref] = a * t + (1.0 - a) * state.scores.get(ref, 0.0)
    return state


def lookup(cache: CacheState, expert: ExpertRef, policy: str) -> bool:
    """Hit iff resident; LRU refreshes recency, LFU bumps frequency on hit.

    MRS metadata never changes on lookup; its scores move only through
    mrs_update.
    """
    hit = expert in cache.resident
    if hit:
        if policy == POLICY_LRU:
            cache.last_access[expert] = cache.next_tick()
        elif policy == POLICY_LFU:
            cache.frequency[expert] = cache.frequency.get(expert, 0) + 1
    return hit


def _victim(cache: CacheState, policy: str, mrs: MrsState | None) -> ExpertRef:
    candidates = cache.resident - cache.pinned
    if not candidates:
        raise EvictionError(
            f"cache full ({len(cache.resident)}/{cache.capacity}) and all residents pinned"
        )
    if policy == POLICY_MRS:
        if mrs is None:
            raise ValueError("MRS eviction needs an MrsState")
        return min(candidates, key=lambda e: (mrs.scores.get(e, 0.0), e))
    if policy == POLICY_LRU:
        return min(candidates, key=lambda e: (cache.last_access.get(e, 0), e))
    if policy == POLICY_LFU:
        return min(candidates, key=lambda e: (cache.frequency.get(e, 0), e))
    raise ValueError(f"unknown policy {policy!r}")


def insert_with_eviction(
    cache: CacheState, expert: ExpertRef, policy: str, mrs: MrsState | None = None
) -> ExpertRef | None:
    """Insert a non-resident expert, evicting the policy's victim if full."""
    if expert in cache.resident:
        raise ValueError(f"{expert} is already resident")
    evicted: ExpertRef | None = None
    if len(cache.resident) >= cache.capacity:
        evicted = _victim(cache, policy, mrs)
        cache.resident.discard(evicted)
        cache.last_access.pop(evicted, None)
        cache.frequency.pop(evicted, None)
    cache.resident.add(expert)
    if policy == POLICY_LRU:
        cache.last_access[expert] = cache.next_tick()
    elif policy == POLICY_LFU:
        cache.frequency[expert] = 1
    return evicted


@dataclass
class CacheStats:
    lookups: int = 0
    hits: int = 0
    inserts: int = 0
    evictions: int = 0

    def merge(self, other: "CacheStats") -> None:
        self.lookups += other.lookups
        self.hits += other.hits
        self.inserts += other.inserts
        self.evictions += other.evictions

    def check(self) -> None:
        if self.hits > self.lookups:
            raise ValueError("hits exceed lookups")
        if self.evictions > self.inserts:
            raise ValueError("evictions exceed inserts")


def hit_rate(stats: CacheStats) -> float | None:
    """hits / lookups; absent (None) when nothing was looked up."""
    if stats.lookups < 1:
        return None
    return stats.hits / stats.lookups


def replay_trace(
    trace: Trace,
    policy: str,
    capacity: int,
    alpha: float = 0.5,
    p: int | None = None,
) -> CacheStats:
    """Pure cache replay: look up each layer's activated experts, insert the
    misses, then (for MRS) fold in the layer's scores. No scheduling; a hit
    means the expert was resident before the layer was touched.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    cache = CacheState(capacity)
    mrs = make_mrs_state(trace.config, alpha=alpha, p=p) if policy == POLICY_MRS else None
    stats = CacheStats()
    for fwd in trace.passes:
        for req in fwd.layers:
            refs = [ExpertRef(req.layer, i) for i in sorted(req.activated)]
            pinned_here = [r for r in refs if r in cache.resident]
            cache.pinned.update(pinned_here)
            misses = []
            for ref in refs:
                stats.lookups += 1
                if lookup(cache, ref, policy):
                    stats.hits += 1
                else:
                    misses.append(ref)
            for ref in misses:
                if len(cache.pinned) >= cache.capacity:
                    break  # nothing evictable would remain; skip the rest
                if insert_with_eviction(cache, ref, policy, mrs) is not None:
                    stats.evictions += 1
                stats.inserts += 1
                cache.pinned.add(ref)
            if policy == POLICY_MRS:
                mrs_update(mrs, req.layer, req.scores)
            cache.pinned.clear()
    stats.check()
    return stats
