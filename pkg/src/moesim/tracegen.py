"""Synthetic routing-trace generation, ingestion and statistics.

The generator keeps one latent logit vector per layer and evolves it with
three orthogonal knobs:

* ``skew`` scales the logits; larger values concentrate the softmax on fewer
  experts (a more skewed activation CDF),
* ``temporal_rho`` is the AR(1) autocorrelation of the logits across passes;
  it controls how strongly high-score experts get reused next pass,
* ``layer_sim`` mixes the previous layer's logits into the next layer's fresh
  noise, producing the adjacent-layer activation similarity that makes
  gate-reuse prediction work.

Decode passes route one token to the top-K experts by score. Prefill passes
perturb the layer logits per token and accumulate token counts per expert,
yielding the uneven per-expert loads typical of batch routing.

Trace files are line-delimited JSON: line 1 is the config record, then one
record per (pass, layer). Key order is fixed (see _CONFIG_KEYS and
_LAYER_KEYS) and floats round-trip exactly, so identical inputs produce
byte-identical files.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .core import (
    ForwardPass,
    LayerRequest,
    ModelConfig,
    STAGE_DECODE,
    STAGE_PREFILL,
    Trace,
    make_layer_request,
)

# Per-token logit perturbation in prefill, as a fraction of skew.
_TOKEN_NOISE = 0.5
# Tiny symmetric jitter so top-K never depends on float ties (skew=0 stays
# uniformly random instead of always picking the lowest indices).
_TIE_JITTER = 1e-9


@dataclass(frozen=True)
class GenParams:
    """Knobs of the synthetic routing model; see the module docstring."""

    skew: float = 1.0
    temporal_rho: float = 0.85
    layer_sim: float = 0.6
    seed: int = 0

    def __post_init__(self) -> None:
        if self.skew < 0:
            raise ValueError(f"skew must be >= 0, got {self.skew}")
        if not 0.0 <= self.temporal_rho < 1.0:
            raise ValueError(f"temporal_rho must be in [0, 1), got {self.temporal_rho}")
        if not 0.0 <= self.layer_sim < 1.0:
            raise ValueError(f"layer_sim must be in [0, 1), got {self.layer_sim}")


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _repair_scores(scores: np.ndarray, activated: np.ndarray) -> np.ndarray:
    """Reassign score values so the activated set is exactly the top-|A| set.

    Token-averaged prefill scores can rank a never-routed expert above a
    rarely-routed one; swapping score values (never inventing new mass) fixes
    the ordering while preserving the sum and positivity.
    """
    m = int(activated.sum())
    n = len(scores)
    if m == 0 or m == n:
        return scores
    vals = np.sort(scores)[::-1]
    out = np.empty_like(scores)
    act_idx = np.flatnonzero(activated)
    rest_idx = np.flatnonzero(~activated)
    # Largest values go to activated experts, keeping each group's own order.
    act_order = act_idx[np.argsort(-scores[act_idx], kind="stable")]
    rest_order = rest_idx[np.argsort(-scores[rest_idx], kind="stable")]
    out[act_order] = vals[:m]
    out[rest_order] = vals[m:]
    if vals[m - 1] <= vals[m]:  # boundary tie: nudge without changing the sum
        out[act_order[-1]] += 1e-12
        out[rest_order[0]] -= 1e-12
    return out


def generate_trace(
    config: ModelConfig,
    params: GenParams,
    num_prefill_tokens: int,
    num_decode_steps: int,
) -> Trace:
    """Build a trace of one optional prefill pass plus decode passes."""
    if num_prefill_tokens < 0 or num_decode_steps < 0:
        raise ValueError("token and step counts must be >= 0")
    rng = np.random.default_rng(params.seed)
    n, layers, k = config.num_routed, config.num_layers, config.num_activated
    rho = params.temporal_rho
    sim = params.layer_sim
    fresh_keep = math.sqrt(1.0 - sim * sim)
    rho_keep = math.sqrt(1.0 - rho * rho)

    z = np.zeros((layers, n))
    passes: list[ForwardPass] = []
    plan: list[tuple[str, int]] = []
    if num_prefill_tokens > 0:
        plan.append((STAGE_PREFILL, num_prefill_tokens))
    plan.extend((STAGE_DECODE, 1) for _ in range(num_decode_steps))

    for pass_idx, (stage, tokens) in enumerate(plan):
        new_z = np.empty_like(z)
        for layer in range(layers):
            eps = params.skew * rng.standard_normal(n)
            fresh = eps if layer == 0 else sim * new_z[layer - 1] + fresh_keep * eps
            if pass_idx == 0:
                new_z[layer] = fresh
            else:
                new_z[layer] = rho * z[layer] + rho_keep * fresh
            new_z[layer] += _TIE_JITTER * rng.standard_normal(n)
        z = new_z

        requests: list[LayerRequest] = []
        for layer in range(layers):
            if stage == STAGE_DECODE:
                scores = _softmax(z[layer])
                order = np.lexsort((np.arange(n), -scores))
                loads = np.zeros(n, dtype=int)
                loads[order[:k]] = 1
                requests.append(make_layer_request(layer, loads.tolist(), scores.tolist()))
            else:
                tok = z[layer][None, :] + _TOKEN_NOISE * params.skew * rng.standard_normal(
                    (tokens, n)
                )
                top = np.argpartition(-tok, k - 1, axis=1)[:, :k]
                loads = np.bincount(top.ravel(), minlength=n)
                scores = _softmax(tok).mean(axis=0)
                scores = scores / scores.sum()
                scores = _repair_scores(scores, loads > 0)
                requests.append(make_layer_request(layer, loads.tolist(), scores.tolist()))
        passes.append(ForwardPass(stage=stage, token_count=tokens, layers=tuple(requests)))

    metadata = {
        "seed": str(params.seed),
        "skew": repr(params.skew),
        "temporal_rho": repr(params.temporal_rho),
        "layer_sim": repr(params.layer_sim),
        "prefill_tokens": str(num_prefill_tokens),
        "decode_steps": str(num_decode_steps),
    }
    return Trace(config=config, passes=tuple(passes), metadata=metadata)


# ---------------------------------------------------------------------------
# Statistics


@dataclass(frozen=True)
class TraceStats:
    """Summary statistics of a trace's routing behaviour.

    activation_cdf: cumulative activation share vs fraction of experts (both
    in [0, 1], experts sorted most- to least-activated). reuse_by_decile maps
    a per-layer score decile to the probability the expert is activated in
    the next pass (None when the trace has fewer than two passes).
    load_imbalance is max/mean activated load per prefill layer.
    """

    activation_cdf: tuple[tuple[float, float], ...]
    cdf_auc: float
    reuse_by_decile: dict[int, float] | None
    load_imbalance: tuple[float, ...]

    def summary(self) -> str:
        lines = [f"activation CDF area: {self.cdf_auc:.4f}"]
        if self.reuse_by_decile is not None:
            dec = ", ".join(f"{d}:{p:.3f}" for d, p in sorted(self.reuse_by_decile.items()))
            lines.append(f"reuse probability by score decile: {dec}")
        if self.load_imbalance:
            lines.append(
                f"prefill load imbalance (max/mean): "
                f"{float(np.mean(self.load_imbalance)):.2f} mean over layers"
            )
        return "\n".join(lines)


def _activation_cdf(trace: Trace) -> tuple[tuple[tuple[float, float], ...], float]:
    cfg = trace.config
    counts = np.zeros((cfg.num_layers, cfg.num_routed))
    for fwd in trace.passes:
        for req in fwd.layers:
            for i in req.activated:
                counts[req.layer, i] += 1
    flat = np.sort(counts.ravel())[::-1]
    total = flat.sum()
    if total == 0:
        return ((0.0, 0.0), (1.0, 1.0)), 0.5
    cum = np.cumsum(flat) / total
    x = np.arange(1, len(flat) + 1) / len(flat)
    curve = tuple(zip(x.tolist(), cum.tolist()))
    auc = float(np.trapezoid(np.concatenate([[0.0], cum]), np.concatenate([[0.0], x])))
    return curve, auc


def _reuse_by_decile(trace: Trace) -> dict[int, float] | None:
    if len(trace.passes) < 2:
        return None
    n = trace.config.num_routed
    hits = np.zeros(10)
    totals = np.zeros(10)
    ranks_to_decile = (np.arange(n) * 10) // n  # rank 0 = lowest score
    for prev, nxt in zip(trace.passes, trace.passes[1:]):
        for req, req_next in zip(prev.layers, nxt.layers):
            order = np.lexsort((np.arange(n), np.asarray(req.scores)))  # ascending
            deciles = np.empty(n, dtype=int)
            deciles[order] = ranks_to_decile
            for i in range(n):
                d = deciles[i]
                totals[d] += 1
                if i in req_next.activated:
                    hits[d] += 1
    out: dict[int, float] = {}
    for d in range(10):
        if totals[d] > 0:
            out[d] = float(hits[d] / totals[d])
    return out


def analyze_trace(trace: Trace) -> TraceStats:
    if not trace.passes:
        raise ValueError("cannot analyze an empty trace")
    curve, auc = _activation_cdf(trace)
    reuse = _reuse_by_decile(trace)
    imbalance = []
    for fwd in trace.passes:
        if fwd.stage != STAGE_PREFILL:
            continue
        for req in fwd.layers:
            loads = [req.loads[i] for i in req.activated]
            if loads:
                imbalance.append(max(loads) / (sum(loads) / len(loads)))
    return TraceStats(
        activation_cdf=curve,
        cdf_auc=auc,
        reuse_by_decile=reuse,
        load_imbalance=tuple(imbalance),
    )


def reference_neuron_cdf() -> tuple[tuple[float, float], ...]:
    """Shipped neuron-sparsity reference curve (heavily skewed activations)."""
    text = resources.files("moesim.data").joinpath("neuron_activation_cdf.csv").read_text()
    curve = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        x, y = line.split(",")
        curve.append((float(x), float(y)))
    return tuple(curve)


def curve_auc(curve: tuple[tuple[float, float], ...]) -> float:
    xs = np.concatenate([[0.0], [p[0] for p in curve]])
    ys = np.concatenate([[0.0], [p[1] for p in curve]])
    return float(np.trapezoid(ys, xs))


# ---------------------------------------------------------------------------
# Trace file format: line-delimited JSON with fixed key order.

_CONFIG_KEYS = (
    "record",
    "num_layers",
    "num_routed",
    "num_shared",
    "num_activated",
    "routed_expert_dims",
    "shared_expert_dims",
    "bytes_per_weight",
    "metadata",
)
_LAYER_KEYS = ("record", "pass", "stage", "token_count", "layer", "loads", "scores")


class TraceFormatError(ValueError):
    """Malformed trace file; message carries the line number and field."""


def save_trace(trace: Trace, path: str | Path) -> None:
    cfg = trace.config
    lines = [
        json.dumps(
            {
                "record": "config",
                "num_layers": cfg.num_layers,
                "num_routed": cfg.num_routed,
                "num_shared": cfg.num_shared,
                "num_activated": cfg.num_activated,
                "routed_expert_dims": list(cfg.routed_expert_dims),
                "shared_expert_dims": (
                    list(cfg.shared_expert_dims) if cfg.shared_expert_dims else None
                ),
                "bytes_per_weight": cfg.bytes_per_weight,
                "metadata": dict(sorted(trace.metadata.items())),
            }
        )
    ]
    for p, fwd in enumerate(trace.passes):
        for req in fwd.layers:
            lines.append(
                json.dumps(
                    {
                        "record": "layer",
                        "pass": p,
                        "stage": fwd.stage,
                        "token_count": fwd.token_count,
                        "layer": req.layer,
                        "loads": list(req.loads),
                        "scores": list(req.scores),
                    }
                )
            )
    Path(path).write_text("\n".join(lines) + "\n")


def _require(record: dict, key: str, lineno: int):
    if key not in record:
        raise TraceFormatError(f"line {lineno}: missing field {key!r}")
    return record[key]


def load_trace(path: str | Path) -> Trace:
    p = Path(path)
    lines = p.read_text().splitlines()
    if not lines:
        raise TraceFormatError("line 1: empty trace file")

    def parse(lineno: int, text: str) -> dict:
        try:
            rec = json.loads(text)
        except json.JSONDecodeError as exc:
            raise TraceFormatError(f"line {lineno}: invalid record: {exc}") from exc
        if not isinstance(rec, dict):
            raise TraceFormatError(f"line {lineno}: record must be an object")
        return rec

    head = parse(1, lines[0])
    if _require(head, "record", 1) != "config":
        raise TraceFormatError("line 1: first record must be the config")
    try:
        shared = head.get("shared_expert_dims")
        config = ModelConfig(
            num_layers=int(_require(head, "num_layers", 1)),
            num_routed=int(_require(head, "num_routed", 1)),
            num_shared=int(_require(head, "num_shared", 1)),
            num_activated=int(_require(head, "num_activated", 1)),
            routed_expert_dims=tuple(_require(head, "routed_expert_dims", 1)),
            shared_expert_dims=tuple(shared) if shared else None,
            bytes_per_weight=float(_require(head, "bytes_per_weight", 1)),
        )
    except ValueError as exc:
        raise TraceFormatError(f"line 1: bad config: {exc}") from exc
    metadata = {str(k): str(v) for k, v in head.get("metadata", {}).items()}

    by_pass: dict[int, dict] = {}
    for lineno, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        rec = parse(lineno, text)
        if _require(rec, "record", lineno) != "layer":
            raise TraceFormatError(f"line {lineno}: expected a layer record")
        pass_idx = int(_require(rec, "pass", lineno))
        layer = int(_require(rec, "layer", lineno))
        loads = _require(rec, "loads", lineno)
        scores = _require(rec, "scores", lineno)
        if len(loads) != config.num_routed:
            raise TraceFormatError(
                f"line {lineno}: field 'loads' has {len(loads)} entries, "
                f"config says {config.num_routed}"
            )
        if len(scores) != config.num_routed:
            raise TraceFormatError(
                f"line {lineno}: field 'scores' has {len(scores)} entries, "
                f"config says {config.num_routed}"
            )
        slot = by_pass.setdefault(
            pass_idx,
            {
                "stage": _require(rec, "stage", lineno),
                "token_count": int(_require(rec, "token_count", lineno)),
                "layers": {},
            },
        )
        if layer in slot["layers"]:
            raise TraceFormatError(f"line {lineno}: duplicate layer {layer} in pass {pass_idx}")
        slot["layers"][layer] = make_layer_request(layer, loads, scores)

    passes = []
    for pass_idx in range(len(by_pass)):
        if pass_idx not in by_pass:
            raise TraceFormatError(f"pass indices not contiguous: missing pass {pass_idx}")
        slot = by_pass[pass_idx]
        if set(slot["layers"]) != set(range(config.num_layers)):
            missing = sorted(set(range(config.num_layers)) - set(slot["layers"]))
            raise TraceFormatError(f"pass {pass_idx}: missing layers {missing} (truncated file?)")
        passes.append(
            ForwardPass(
                stage=slot["stage"],
                token_count=slot["token_count"],
                layers=tuple(slot["layers"][i] for i in range(config.num_layers)),
            )
        )
    return Trace(config=config, passes=tuple(passes), metadata=metadata)
