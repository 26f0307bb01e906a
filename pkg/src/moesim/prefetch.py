"""Impact-driven prefetching over a short look-ahead horizon.

Before a layer finishes, the engine predicts which experts the next few
layers will activate, estimates for each uncached candidate how much the
predicted layer's makespan would shrink if the expert were already resident
(by planning that layer twice, with and without it), and greedily issues the
highest-gain transfers into the PCIe idle time left inside the current
layer's plan. Prefetched experts are pinned until their layer executes or
the prediction expires, so a speculative upload can never thrash an expert
that is about to be used.

Prediction is modeled as noisy ground truth: with probability
(1 - accuracy), each activated expert of a future layer is swapped with a
uniformly random non-activated expert of the same layer. This reproduces the
premise that gate outputs of nearby layers approximate future routing well,
without simulating hidden states.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CacheState, ExpertRef, LayerRequest, Trace
from .scheduling import MakespanEvaluator

# Mixed into prediction RNG streams so they are decoupled from other seeded
# draws made from the same run seed.
_PREDICT_STREAM = 0x5EED


@dataclass(frozen=True)
class PredictionModel:
    horizon: int = 3
    accuracy: float = 0.85

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy must be in [0, 1], got {self.accuracy}")


@dataclass(frozen=True)
class PrefetchCandidate:
    expert: ExpertRef
    predicted_load: int
    gain: float
    cost: float
    layer_distance: int


def predict_activations(
    trace: Trace,
    pass_index: int,
    current_layer: int,
    model: PredictionModel,
    seed: int,
) -> list[LayerRequest]:
    """Future layer requests of this pass, perturbed per the model accuracy.

    The horizon truncates at the last layer. accuracy=1 returns ground truth;
    otherwise each activated expert is independently swapped (loads and
    scores exchanged) with a random non-activated expert of the same layer,
    which keeps every request invariant intact.
    """
    fwd = trace.passes[pass_index]
    n_layers = trace.config.num_layers
    if not 0 <= current_layer < n_layers:
        raise ValueError(f"layer {current_layer} out of range")
    last = min(current_layer + model.horizon, n_layers - 1)
    out: list[LayerRequest] = []
    rng = np.random.default_rng([seed, pass_index, current_layer, _PREDICT_STREAM])
    for layer in range(current_layer + 1, last + 1):
        req = fwd.layers[layer]
        if model.accuracy >= 1.0:
            out.append(req)
            continue
        loads = list(req.loads)
        scores = list(req.scores)
        activated = set(req.activated)
        for i in sorted(req.activated):
            if rng.random() < 1.0 - model.accuracy:
                others = sorted(set(range(len(loads))) - activated)
                if not others:
                    continue
                j = others[int(rng.integers(len(others)))]
                loads[i], loads[j] = loads[j], loads[i]
                scores[i], scores[j] = scores[j], scores[i]
                activated.discard(i)
                activated.add(j)
        out.append(
            LayerRequest(
                layer=layer,
                loads=tuple(loads),
                scores=tuple(scores),
                activated=frozenset(activated),
            )
        )
    return out


def evaluate_gain(
    candidate: ExpertRef,
    predicted_request: LayerRequest,
    cache: CacheState,
    evaluator: MakespanEvaluator,
) -> float:
    """Makespan reduction of the predicted layer if candidate were resident.

    Plans the layer twice through the regular plan selection; the cache is
    never mutated.
    """
    if candidate in cache.resident:
        raise ValueError(f"{candidate} is already resident")
    base = evaluator.makespan_for_request(predicted_request, cache.resident)
    with_it = evaluator.makespan_for_request(
        predicted_request, cache.resident | {candidate}
    )
    return base - with_it


def select_prefetches(
    candidates: list[PrefetchCandidate], idle_budget: float
) -> list[ExpertRef]:
    """Admit highest-gain candidates while their transfer cost fits the idle
    budget; gains <= 0 are dropped; ties prefer the nearer layer, then the
    expert ref."""
    if idle_budget < 0:
        raise ValueError(f"idle_budget must be >= 0, got {idle_budget}")
    ordered = sorted(
        (c for c in candidates if c.gain > 0),
        key=lambda c: (-c.gain, c.layer_distance, c.expert),
    )
    chosen: list[ExpertRef] = []
    spent = 0.0
    for cand in ordered:
        if spent + cand.cost > idle_budget:
            break
        spent += cand.cost
        chosen.append(cand.expert)
    return chosen
