"""Analytic hardware-efficiency model for compute groups.

N homogeneous devices run the convolution phase, partitioned into g groups
of k = N/g devices; a single serial server runs the fully-connected phase
(compute and model co-located, so FC staleness and FC model transfer are
zero by construction).  Three measured scalars drive the model:

* ``T_cc`` -- single-device convolution compute time,
* ``T_nc`` -- single-copy conv-model transfer time (one direction),
* ``t_fc`` -- FC serve time for one group, network included.

Compute scales down linearly with k, network congestion scales up linearly,
and the iteration time is the larger of the FC-saturated and conv-saturated
regimes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence


@dataclass(frozen=True)
class ClusterSpec:
    """Homogeneous device pool (conv devices plus one FC device)."""

    n_conv_devices: int
    device_tflops: float
    net_bandwidth: float  # bytes/s
    fc_device_tflops: float

    def __post_init__(self) -> None:
        if self.n_conv_devices < 1:
            raise ValueError("n_conv_devices must be >= 1")
        if min(self.device_tflops, self.net_bandwidth, self.fc_device_tflops) <= 0:
            raise ValueError("throughput figures must be positive")


@dataclass(frozen=True)
class PhaseProfile:
    """The three scalars the iteration-time model runs on (seconds)."""

    T_cc: float
    T_nc: float
    t_fc: float

    def __post_init__(self) -> None:
        if self.T_cc < 0 or self.T_nc < 0:
            raise ValueError("phase times must be non-negative")
        if self.t_fc <= 0:
            raise ValueError("t_fc must be positive")


@dataclass(frozen=True)
class ExecutionPlan:
    """N conv devices split into g groups of k = N/g devices each."""

    N: int
    g: int

    def __post_init__(self) -> None:
        if self.N < 1 or self.g < 1:
            raise ValueError("N and g must be >= 1")
        if self.N % self.g != 0:
            raise ValueError(f"g={self.g} does not divide N={self.N}")

    @property
    def k(self) -> int:
        return self.N // self.g

    @property
    def staleness(self) -> int:
        return self.g - 1


def t_conv(k: int, p: PhaseProfile) -> float:
    """Group convolution time: max of compute (T_cc/k) and network (T_nc*k)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return max(p.T_cc / k, p.T_nc * k)


def he_predict(plan: ExecutionPlan, p: PhaseProfile) -> float:
    """Predicted seconds per iteration: max(t_fc, (t_conv(k) + t_fc)/g)."""
    return max(p.t_fc, (t_conv(plan.k, p) + p.t_fc) / plan.g)


def he_predict_pipelined(plan: ExecutionPlan, p: PhaseProfile) -> float:
    """Iteration time when FC work overlaps the next conv pass.

    The conv-saturated branch drops its t_fc term; the FC-saturated branch
    is unchanged.  Never worse than the unpipelined prediction.
    """
    return max(p.t_fc, t_conv(plan.k, p) / plan.g)


def fc_saturated(plan: ExecutionPlan, p: PhaseProfile) -> bool:
    """True when the serial FC server never idles: t_conv(k) + t_fc < g*t_fc."""
    return t_conv(plan.k, p) + p.t_fc < plan.g * p.t_fc


def power_of_two_divisors(N: int) -> list[int]:
    """Powers of two that divide N, ascending (the candidate group counts)."""
    out = []
    g = 1
    while N % g == 0:
        out.append(g)
        g *= 2
    return out


class GroupChoice(NamedTuple):
    g: int
    saturates: bool


def min_saturating_groups(
    N: int, p: PhaseProfile, candidates: Sequence[int] | None = None
) -> GroupChoice:
    """Smallest candidate group count that saturates the FC server.

    Falls back to the largest candidate (full asynchrony) with
    ``saturates=False`` when no candidate saturates.
    """
    if candidates is None:
        candidates = power_of_two_divisors(N)
    if not candidates:
        raise ValueError("candidate set is empty")
    for g in sorted(candidates):
        if fc_saturated(ExecutionPlan(N, g), p):
            return GroupChoice(g, True)
    return GroupChoice(max(candidates), False)


def he_penalty(S: int, N: int, p: PhaseProfile) -> float:
    """Iteration-time ratio HE(S)/HE(0); <= 1 since more groups never slow an iteration."""
    if S < 0:
        raise ValueError("staleness must be >= 0")
    return he_predict(ExecutionPlan(N, S + 1), p) / he_predict(ExecutionPlan(N, 1), p)


def profile_from_cluster(
    cluster: ClusterSpec,
    conv_flops: float,
    fc_flops: float,
    conv_model_bytes: float,
) -> PhaseProfile:
    """Derive phase times from device peaks and workload operation counts.

    T_nc counts the model broadcast down plus the gradient collection up,
    hence the factor 2.
    """
    if min(conv_flops, fc_flops) <= 0 or conv_model_bytes < 0:
        raise ValueError("workload figures must be positive")
    return PhaseProfile(
        T_cc=conv_flops / (cluster.device_tflops * 1e12),
        T_nc=2.0 * conv_model_bytes / cluster.net_bandwidth,
        t_fc=fc_flops / (cluster.fc_device_tflops * 1e12),
    )


def flops_split(device_tflops: Sequence[float]) -> list[float]:
    """Batch fractions proportional to each device's throughput; sums to 1."""
    if not device_tflops:
        raise ValueError("need at least one device")
    if min(device_tflops) <= 0:
        raise ValueError("throughputs must be positive")
    total = float(sum(device_tflops))
    return [f / total for f in device_tflops]
