"""Analytical latency model for expert compute and transfer.

Three cost primitives drive the whole simulation, all in dimensionless
simulation units:

* GPU expert compute is load-independent up to a saturation load (the GPU is
  latency-bound for small batches), then grows linearly.
* CPU expert compute grows linearly with load, and the first expert of a
  CPU burst pays a warm-up factor (cold caches); subsequent back-to-back
  experts run at the nominal slope.
* PCIe transfer cost is a fixed latency plus bytes over bandwidth, identical
  for every routed expert of a given model.

``calibrate`` recovers a profile from measured (device, load, position,
duration) samples the way a warm-up measurement phase would.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEVICE_CPU = "cpu"
DEVICE_GPU = "gpu"
DEVICE_PCIE = "pcie"
DEVICES = (DEVICE_CPU, DEVICE_GPU, DEVICE_PCIE)


@dataclass(frozen=True)
class HardwareProfile:
    """Calibrated cost-model parameters, immutable after construction."""

    gpu_time_per_expert: float
    cpu_slope: float
    transfer_bandwidth: float
    transfer_latency: float = 0.0
    gpu_saturation_load: int = 256
    gpu_slope: float = 0.0
    cpu_first_expert_penalty: float = 1.4
    shared_expert_time: float = 0.0
    non_expert_time: float = 0.0

    def __post_init__(self) -> None:
        for name in (
            "gpu_time_per_expert",
            "cpu_slope",
            "gpu_slope",
            "transfer_latency",
            "shared_expert_time",
            "non_expert_time",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.cpu_first_expert_penalty < 1.0:
            raise ValueError(
                f"cpu_first_expert_penalty must be >= 1, got {self.cpu_first_expert_penalty}"
            )
        if self.transfer_bandwidth <= 0:
            raise ValueError(f"transfer_bandwidth must be > 0, got {self.transfer_bandwidth}")
        if self.gpu_saturation_load < 1:
            raise ValueError(f"gpu_saturation_load must be >= 1, got {self.gpu_saturation_load}")


def gpu_time(profile: HardwareProfile, load: int) -> float:
    """GPU compute time for one expert: flat below saturation, linear above."""
    if load < 1:
        raise ValueError(f"load must be >= 1, got {load}")
    if load <= profile.gpu_saturation_load:
        return profile.gpu_time_per_expert
    return profile.gpu_time_per_expert + profile.gpu_slope * (load - profile.gpu_saturation_load)


def cpu_time(profile: HardwareProfile, load: int, position_in_burst: int) -> float:
    """CPU compute time for one expert at a given position in its burst.

    Position 0 (the first expert a CPU computes within one layer's schedule)
    pays the warm-up penalty factor; later positions run at the plain slope.
    """
    if load < 1:
        raise ValueError(f"load must be >= 1, got {load}")
    if position_in_burst < 0:
        raise ValueError(f"position_in_burst must be >= 0, got {position_in_burst}")
    factor = profile.cpu_first_expert_penalty if position_in_burst == 0 else 1.0
    return profile.cpu_slope * load * factor


def transfer_time(profile: HardwareProfile, expert_size_bytes: float) -> float:
    """PCIe upload time for one expert; byte counts round up to whole bytes."""
    if expert_size_bytes < 1:
        raise ValueError(f"expert_size_bytes must be >= 1, got {expert_size_bytes}")
    return profile.transfer_latency + math.ceil(expert_size_bytes) / profile.transfer_bandwidth


class CalibrationError(ValueError):
    """Raised when the sample set cannot determine some profile parameter."""


@dataclass(frozen=True)
class CalibrationSample:
    """One warm-up measurement: device, load (or bytes for pcie), burst position, duration."""

    device: str
    load: float
    position: int
    duration: float


@dataclass(frozen=True)
class CalibrationResult:
    profile: HardwareProfile
    residuals: dict[str, float]  # per-device RMS of observed - predicted
    sample_counts: dict[str, int]

    def report(self) -> str:
        lines = ["calibration residuals (rms):"]
        for dev in DEVICES:
            lines.append(
                f"  {dev:5s} rms={self.residuals[dev]:.6g} over {self.sample_counts[dev]} samples"
            )
        return "\n".join(lines)


def _fit_through_origin(loads: np.ndarray, durs: np.ndarray) -> float:
    denom = float(np.dot(loads, loads))
    if denom == 0.0:
        raise CalibrationError("cpu_slope underdetermined: all loads are zero")
    return float(np.dot(loads, durs) / denom)


def calibrate(
    samples: Sequence[CalibrationSample],
    gpu_saturation_load: int = 256,
) -> CalibrationResult:
    """Least-squares fit of a HardwareProfile from warm-up samples.

    Needs at least two samples per device, CPU samples both at burst position
    0 and at a later position, and transfer samples at two distinct byte
    counts (otherwise latency and bandwidth cannot be separated).
    """
    by_dev: dict[str, list[CalibrationSample]] = {d: [] for d in DEVICES}
    for s in samples:
        if s.device not in by_dev:
            raise CalibrationError(f"unknown device tag {s.device!r}")
        by_dev[s.device].append(s)
    for dev in DEVICES:
        if len(by_dev[dev]) < 2:
            raise CalibrationError(f"need >= 2 {dev} samples, got {len(by_dev[dev])}")

    # CPU: duration = cpu_slope * load, scaled by the penalty at position 0.
    warm = [s for s in by_dev[DEVICE_CPU] if s.position > 0]
    cold = [s for s in by_dev[DEVICE_CPU] if s.position == 0]
    if not cold:
        raise CalibrationError("cpu_first_expert_penalty underdetermined: no position-0 cpu samples")
    if not warm:
        raise CalibrationError("cpu_slope underdetermined: no position>0 cpu samples")
    cpu_slope = _fit_through_origin(
        np.array([s.load for s in warm]), np.array([s.duration for s in warm])
    )
    cold_slope = _fit_through_origin(
        np.array([s.load for s in cold]), np.array([s.duration for s in cold])
    )
    if cpu_slope <= 0:
        raise CalibrationError("cpu_slope underdetermined: fitted slope is not positive")
    penalty = max(1.0, cold_slope / cpu_slope)

    # GPU: mean of flat-region samples; optional slope from beyond saturation.
    gpu = by_dev[DEVICE_GPU]
    flat = [s for s in gpu if s.load <= gpu_saturation_load]
    if not flat:
        raise CalibrationError("gpu_time_per_expert underdetermined: no flat-region gpu samples")
    gpu_per_expert = float(np.mean([s.duration for s in flat]))
    beyond = [s for s in gpu if s.load > gpu_saturation_load]
    gpu_slope = 0.0
    if beyond:
        xs = np.array([s.load - gpu_saturation_load for s in beyond])
        ys = np.array([s.duration - gpu_per_expert for s in beyond])
        gpu_slope = max(0.0, _fit_through_origin(xs, ys))

    # PCIe: duration = latency + bytes / bandwidth, an affine fit in bytes.
    pcie = by_dev[DEVICE_PCIE]
    sizes = np.array([s.load for s in pcie])
    durs = np.array([s.duration for s in pcie])
    if len(set(sizes.tolist())) < 2:
        raise CalibrationError(
            "transfer_latency/transfer_bandwidth underdetermined: "
            "all pcie samples share one byte count"
        )
    coeffs, *_ = np.linalg.lstsq(np.stack([np.ones_like(sizes), sizes], axis=1), durs, rcond=None)
    latency, inv_bw = float(coeffs[0]), float(coeffs[1])
    if inv_bw <= 0:
        raise CalibrationError("transfer_bandwidth underdetermined: fitted bandwidth not positive")
    latency = max(0.0, latency)

    profile = HardwareProfile(
        gpu_time_per_expert=gpu_per_expert,
        cpu_slope=cpu_slope,
        transfer_bandwidth=1.0 / inv_bw,
        transfer_latency=latency,
        gpu_saturation_load=gpu_saturation_load,
        gpu_slope=gpu_slope,
        cpu_first_expert_penalty=penalty,
    )

    def rms(dev: str, pred) -> float:
        errs = [s.duration - pred(s) for s in by_dev[dev]]
        return float(np.sqrt(np.mean(np.square(errs)))) if errs else 0.0

    residuals = {
        DEVICE_CPU: rms(DEVICE_CPU, lambda s: cpu_time(profile, max(1, int(round(s.load))), s.position)
                        if s.load >= 1 else 0.0),
        DEVICE_GPU: rms(DEVICE_GPU, lambda s: gpu_time(profile, max(1, int(round(s.load))))),
        DEVICE_PCIE: rms(DEVICE_PCIE, lambda s: transfer_time(profile, s.load)),
    }
    counts = {d: len(by_dev[d]) for d in DEVICES}
    return CalibrationResult(profile=profile, residuals=residuals, sample_counts=counts)


def parse_samples(lines: Iterable[str], source: str = "<samples>") -> list[CalibrationSample]:
    """Parse calibration samples: `device load position duration` per line.

    Fields may be separated by whitespace or commas; '#' starts a comment.
    """
    out: list[CalibrationSample] = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p for p in line.replace(",", " ").split() if p]
        if len(parts) != 4:
            raise CalibrationError(f"{source}:{lineno}: expected 4 fields, got {len(parts)}")
        dev, load_s, pos_s, dur_s = parts
        try:
            out.append(
                CalibrationSample(
                    device=dev, load=float(load_s), position=int(pos_s), duration=float(dur_s)
                )
            )
        except ValueError as exc:
            raise CalibrationError(f"{source}:{lineno}: {exc}") from exc
    return out


def load_samples(path: str | Path) -> list[CalibrationSample]:
    p = Path(path)
    return parse_samples(p.read_text().splitlines(), source=str(p))


_PROFILE_FIELDS = (
    "gpu_time_per_expert",
    "cpu_slope",
    "transfer_bandwidth",
    "transfer_latency",
    "gpu_saturation_load",
    "gpu_slope",
    "cpu_first_expert_penalty",
    "shared_expert_time",
    "non_expert_time",
)


def save_profile(profile: HardwareProfile, path: str | Path) -> None:
    """Write a profile as flat key=value text (the config-file convention)."""
    lines = []
    for name in _PROFILE_FIELDS:
        val = getattr(profile, name)
        lines.append(f"{name}={val!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_profile(path: str | Path, **overrides) -> HardwareProfile:
    values: dict[str, float] = {}
    p = Path(path)
    for lineno, raw in enumerate(p.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{p}:{lineno}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in _PROFILE_FIELDS:
            raise ValueError(f"{p}:{lineno}: unknown profile field {key!r}")
        values[key] = float(val.strip())
    if "gpu_saturation_load" in values:
        values["gpu_saturation_load"] = int(values["gpu_saturation_load"])
    values.update(overrides)
    return HardwareProfile(**values)  # type: ignore[arg-type]


def with_model_times(profile: HardwareProfile, shared_expert_time: float) -> HardwareProfile:
    return replace(profile, shared_expert_time=shared_expert_time)
