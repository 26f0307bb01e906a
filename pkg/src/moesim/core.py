"""Shared domain types for the hybrid CPU-GPU MoE offloading simulator.

The simulator replays routing traces. For every forward pass and every MoE
layer a trace records how many tokens were routed to each expert (loads) and
the gate's softmax weights over all routed experts (scores). Scheduling,
caching and prefetching all consume these records; none of them ever touch
real model weights or hidden states.

Loads and scores are kept as plain tuples so that records are immutable,
hashable where needed, and round-trip exactly through the text trace format.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

STAGE_PREFILL = "prefill"
STAGE_DECODE = "decode"
STAGES = (STAGE_PREFILL, STAGE_DECODE)

# Tolerance for "scores form a probability vector" checks.
SCORE_SUM_TOL = 1e-9


class ExpertRef(NamedTuple):
    """Identity of one routed expert: (layer index, expert index).

    The unit of caching, transfer and compute. Tuple ordering gives the
    lexicographic total order used for deterministic tie-breaking everywhere.
    Shared experts are not ExpertRefs; they live outside the cache.
    """

    layer: int
    expert: int


@dataclass(frozen=True)
class ModelConfig:
    """Static shape of one MoE model.

    num_routed is the number of routed experts per layer (N), num_activated
    the number the gate selects per token (K). Dims are (hidden,
    intermediate) of one expert FFN; bytes_per_weight may be fractional to
    express sub-byte quantization (0.5 for 4-bit).
    """

    num_layers: int
    num_routed: int
    num_shared: int
    num_activated: int
    routed_expert_dims: tuple[int, int]
    shared_expert_dims: tuple[int, int] | None = None
    bytes_per_weight: float = 0.5

    def __post_init__(self) -> None:
        if self.num_layers < 1:
            raise ValueError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.num_routed < 1:
            raise ValueError(f"num_routed must be >= 1, got {self.num_routed}")
        if not 1 <= self.num_activated <= self.num_routed:
            raise ValueError(
                f"num_activated must be in [1, num_routed], got "
                f"{self.num_activated} with num_routed={self.num_routed}"
            )
        if self.num_shared < 0:
            raise ValueError(f"num_shared must be >= 0, got {self.num_shared}")
        hidden, intermediate = self.routed_expert_dims
        if hidden < 1 or intermediate < 1:
            raise ValueError(f"expert dims must be >= 1, got {self.routed_expert_dims}")
        if self.shared_expert_dims is not None:
            sh, si = self.shared_expert_dims
            if sh < 1 or si < 1:
                raise ValueError(f"shared dims must be >= 1, got {self.shared_expert_dims}")
        if self.bytes_per_weight <= 0:
            raise ValueError(f"bytes_per_weight must be > 0, got {self.bytes_per_weight}")

    @property
    def total_routed_experts(self) -> int:
        return self.num_layers * self.num_routed


def expert_bytes(config: ModelConfig) -> float:
    """Weight bytes of one routed expert: gate, up and down projections.

    May be fractional for sub-byte quantization; callers that need whole
    bytes (the transfer-cost boundary) round up.
    """
    hidden, intermediate = config.routed_expert_dims
    return 3 * hidden * intermediate * config.bytes_per_weight


def rank_by_score(scores: Iterable[float]) -> list[int]:
    """Expert indices sorted by score descending, ties broken by lower index."""
    vals = list(scores)
    return sorted(range(len(vals)), key=lambda i: (-vals[i], i))


@dataclass(frozen=True)
class LayerRequest:
    """One MoE layer's work in one forward pass.

    loads[i] is the number of tokens routed to expert i this pass; scores is
    the gate's softmax over all routed experts (token-averaged in prefill).
    activated is exactly the set of experts with a nonzero load.
    """

    layer: int
    loads: tuple[int, ...]
    scores: tuple[float, ...]
    activated: frozenset[int]


def make_layer_request(layer: int, loads: Iterable[int], scores: Iterable[float]) -> LayerRequest:
    loads_t = tuple(int(v) for v in loads)
    scores_t = tuple(float(v) for v in scores)
    activated = frozenset(i for i, v in enumerate(loads_t) if v > 0)
    return LayerRequest(layer=layer, loads=loads_t, scores=scores_t, activated=activated)


@dataclass(frozen=True)
class ForwardPass:
    """One auto-regressive step: a stage tag plus one request per layer."""

    stage: str
    token_count: int
    layers: tuple[LayerRequest, ...]


@dataclass(frozen=True)
class Trace:
    """A full replayable workload: model config plus an ordered pass list."""

    config: ModelConfig
    passes: tuple[ForwardPass, ...]
    metadata: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class Violation:
    """One failed trace invariant, locatable by pass and layer."""

    pass_index: int
    layer: int
    rule: str
    detail: str

    def __str__(self) -> str:
        return f"pass {self.pass_index} layer {self.layer}: {self.rule}: {self.detail}"


def _validate_request(
    config: ModelConfig, pass_index: int, fwd: ForwardPass, req: LayerRequest
) -> list[Violation]:
    out: list[Violation] = []
    n = config.num_routed

    def bad(rule: str, detail: str) -> None:
        out.append(Violation(pass_index, req.layer, rule, detail))

    if len(req.loads) != n:
        bad("loads-length", f"expected {n} entries, got {len(req.loads)}")
        return out
    if len(req.scores) != n:
        bad("scores-length", f"expected {n} entries, got {len(req.scores)}")
        return out

    if any(v < 0 for v in req.loads):
        bad("negative-load", f"loads={req.loads}")
    nonzero = frozenset(i for i, v in enumerate(req.loads) if v > 0)
    if nonzero != req.activated:
        bad(
            "activated-load-mismatch",
            f"activated={sorted(req.activated)} but loads>0 at {sorted(nonzero)}",
        )

    if any(v < 0 for v in req.scores):
        bad("negative-score", "scores must be nonnegative")
    total = math.fsum(req.scores)
    if abs(total - 1.0) > SCORE_SUM_TOL:
        bad("score-normalization", f"scores sum to {total!r}")

    k = len(req.activated)
    if 0 < k <= n:
        top = set(rank_by_score(req.scores)[:k])
        if top != set(req.activated):
            bad(
                "activated-not-top-scores",
                f"activated={sorted(req.activated)} but top-{k} scores at {sorted(top)}",
            )

    if fwd.stage == STAGE_DECODE and fwd.token_count == 1:
        if k != config.num_activated:
            bad(
                "decode-activated-count",
                f"expected {config.num_activated} activated experts, got {k}",
            )
        if any(req.loads[i] != 1 for i in req.activated):
            bad("decode-unit-load", "every activated load must be 1 in single-token decode")

    expected_total = fwd.token_count * config.num_activated
    load_total = sum(req.loads[i] for i in req.activated)
    if load_total != expected_total:
        bad(
            "load-total",
            f"activated loads sum to {load_total}, expected token_count*K={expected_total}",
        )
    return out


def validate_trace(trace: Trace) -> list[Violation]:
    """Check every trace invariant; violations are data, not exceptions."""
    out: list[Violation] = []
    cfg = trace.config
    for p, fwd in enumerate(trace.passes):
        if fwd.stage not in STAGES:
            out.append(Violation(p, -1, "bad-stage", f"stage={fwd.stage!r}"))
            continue
        if fwd.token_count < 1:
            out.append(Violation(p, -1, "bad-token-count", f"token_count={fwd.token_count}"))
        if len(fwd.layers) != cfg.num_layers:
            out.append(
                Violation(p, -1, "layer-count", f"expected {cfg.num_layers}, got {len(fwd.layers)}")
            )
            continue
        for idx, req in enumerate(fwd.layers):
            if req.layer != idx:
                out.append(Violation(p, idx, "layer-order", f"request carries layer={req.layer}"))
                continue
            out.extend(_validate_request(cfg, p, fwd, req))
    return out


class CacheState:
    """GPU-resident expert set with per-policy bookkeeping.

    capacity is a global slot count across all layers (one pool, no per-layer
    quotas). pinned entries are never evicted; the owning engine keeps the
    pinned set strictly smaller than capacity. Policy metadata (recency and
    frequency) lives here so that the same state can be replayed under any
    policy; the score table of the score-aware policy is separate.
    """

    __slots__ = ("capacity", "resident", "pinned", "last_access", "frequency", "_tick")

    def __init__(self, capacity: int) -> None:
        if capacity < 0:
            raise ValueError(f"capacity must be >= 0, got {capacity}")
        self.capacity = capacity
        self.resident: set[ExpertRef] = set()
        self.pinned: set[ExpertRef] = set()
        self.last_access: dict[ExpertRef, int] = {}
        self.frequency: dict[ExpertRef, int] = {}
        self._tick = 0

    def next_tick(self) -> int:
        self._tick += 1
        return self._tick

    def check(self) -> None:
        if len(self.resident) > self.capacity:
            raise ValueError(f"resident set ({len(self.resident)}) exceeds capacity {self.capacity}")
        if not self.pinned <= self.resident:
            raise ValueError("pinned experts must be resident")
