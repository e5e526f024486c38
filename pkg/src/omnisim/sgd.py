"""Momentum SGD with optionally stale gradients, and the training loop.

The update at step t is

    V' = mu * V - eta * (gradient + lambda * W_read)
    W' = W + V'

where the gradient (and the regularization term) may have been evaluated at
an older snapshot ``W_read`` of the model.  Divergence is a flagged outcome
of a run, never an exception.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

#: A run is flagged divergent when loss exceeds this multiple of the initial loss.
DIVERGENCE_FACTOR = 1e6

#: Trailing-window length for smoothed-loss convergence detection.
LOSS_WINDOW = 50


def batch_stream(seed: int, group: int = 0) -> np.random.Generator:
    """Batch-sampling RNG stream for one compute group.

    The synchronous loop and the event simulator both draw group 0's batches
    from this stream, which is what makes a one-group simulation reproduce
    ``run_sync`` bit-exactly.
    """
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, group)))


def service_stream(seed: int, group: int) -> np.random.Generator:
    """Service-time RNG stream, independent of the batch stream per group."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2, group)))


def child_seed(seed: int, *key: int) -> int:
    """Derive a decorrelated integer seed for a nested run."""
    ss = np.random.SeedSequence(seed, spawn_key=tuple(key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class Hyperparams:
    eta: float
    mu: float = 0.0
    lam: float = 0.0
    b: int = 1

    def __post_init__(self) -> None:
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if not 0.0 <= self.mu < 1.0:
            raise ValueError("mu must be in [0, 1)")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.b < 1:
            raise ValueError("batch size must be >= 1")

    def replace(self, **kw) -> "Hyperparams":
        d = {"eta": self.eta, "mu": self.mu, "lam": self.lam, "b": self.b}
        d.update(kw)
        return Hyperparams(**d)


@dataclass(frozen=True)
class SGDState:
    W: np.ndarray
    V: np.ndarray
    t: int = 0

    def __post_init__(self) -> None:
        W = np.asarray(self.W, dtype=np.float64)
        V = np.asarray(self.V, dtype=np.float64)
        if W.shape != V.shape or W.ndim != 1:
            raise ValueError("W and V must be 1-D vectors of equal length")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "V", V)

    @classmethod
    def fresh(cls, W: np.ndarray) -> "SGDState":
        W = np.asarray(W, dtype=np.float64)
        return cls(W=W, V=np.zeros_like(W), t=0)


def sgd_step(
    state: SGDState, hp: Hyperparams, gradient: np.ndarray, w_for_reg: np.ndarray
) -> SGDState:
    """One momentum update; the gradient may come from a stale snapshot."""
    gradient = np.asarray(gradient, dtype=np.float64)
    w_for_reg = np.asarray(w_for_reg, dtype=np.float64)
    if gradient.shape != state.W.shape or w_for_reg.shape != state.W.shape:
        raise ValueError("gradient / regularization vector dimension mismatch")
    V = hp.mu * state.V - hp.eta * (gradient + hp.lam * w_for_reg)
    return SGDState(W=state.W + V, V=V, t=state.t + 1)


def stale_step(
    state: SGDState,
    hp: Hyperparams,
    problem: "TrainingProblem",
    w_read: np.ndarray,
    batch: Any,
) -> SGDState:
    """Update the master state with a gradient evaluated at snapshot ``w_read``."""
    return sgd_step(state, hp, problem.grad(w_read, batch), w_read)


class TrainingProblem(abc.ABC):
    """A differentiable training objective over a flat weight vector.

    Batches are opaque to the optimizer; each problem samples them with
    replacement from its own data.  ``grad`` uses the mean-over-batch
    convention so learning rates are comparable across batch sizes.
    ``full_loss``/``full_grad`` evaluate the noise-free objective (whole
    dataset, or the expectation where it is known in closed form) and are
    what traces and convergence checks record.
    """

    #: loss value at the minimizer, where known (used by tests and demos)
    reference_loss: Optional[float] = None

    @property
    @abc.abstractmethod
    def dim(self) -> int: ...

    @abc.abstractmethod
    def initial_weights(self) -> np.ndarray: ...

    @abc.abstractmethod
    def sample_batch(self, rng: np.random.Generator, b: int) -> Any: ...

    @abc.abstractmethod
    def loss(self, W: np.ndarray, batch: Any) -> float: ...

    @abc.abstractmethod
    def grad(self, W: np.ndarray, batch: Any) -> np.ndarray: ...

    @abc.abstractmethod
    def full_loss(self, W: np.ndarray) -> float: ...

    @abc.abstractmethod
    def full_grad(self, W: np.ndarray) -> np.ndarray: ...

    def initial_state(self) -> SGDState:
        return SGDState.fresh(self.initial_weights())


@dataclass(frozen=True)
class StopRule:
    """Terminate at a target smoothed loss, a step cap, or divergence."""

    max_steps: int
    target_loss: Optional[float] = None

    def __post_init__(self) -> None:
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass
class LossTrace:
    """Per-run record of sampled losses against steps and simulated time."""

    steps: np.ndarray
    sim_times: np.ndarray
    losses: np.ndarray
    final_state: SGDState
    diverged: bool = False

    def write_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("step,sim_time_s,loss\n")
            for s, t, l in zip(self.steps, self.sim_times, self.losses):
                f.write(f"{int(s)},{t:.6f},{l!r}\n")


def smoothed(losses: np.ndarray, window: int = LOSS_WINDOW) -> np.ndarray:
    """Trailing-window mean; entry i averages samples max(0, i-window+1)..i."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        return losses
    csum = np.cumsum(losses)
    out = np.empty_like(losses)
    for i in range(losses.size):
        lo = max(0, i - window + 1)
        out[i] = (csum[i] - (csum[lo - 1] if lo > 0 else 0.0)) / (i - lo + 1)
    return out


def iterations_to_loss(
    trace: LossTrace, target: float, window: int = LOSS_WINDOW
) -> Optional[int]:
    """First recorded step whose trailing-window smoothed loss is <= target."""
    if not np.isfinite(target):
        raise ValueError("target must be finite")
    sm = smoothed(trace.losses, window)
    hits = np.nonzero(sm <= target)[0]
    if hits.size == 0:
        return None
    return int(trace.steps[hits[0]])


def run_sync(
    problem: TrainingProblem,
    hp: Hyperparams,
    init: SGDState,
    stop: StopRule,
    seed: int,
    sample_interval: int = 1,
    time_per_step: float = 1.0,
) -> LossTrace:
    """Synchronous training: sample, compute gradient at the current model, step.

    Deterministic per seed.  The trace records the noise-free loss every
    ``sample_interval`` steps; divergence (non-finite or exploded loss) halts
    the run with the flag set.
    """
    rng = batch_stream(seed)
    state = init
    initial_loss = problem.full_loss(state.W)
    bound = DIVERGENCE_FACTOR * max(abs(initial_loss), 1.0)
    steps, times, losses = [0], [0.0], [initial_loss]
    diverged = not np.isfinite(initial_loss)
    recent = [initial_loss]

    while not diverged and state.t < stop.max_steps:
        batch = problem.sample_batch(rng, hp.b)
        state = stale_step(state, hp, problem, state.W, batch)
        if state.t % sample_interval == 0 or state.t == stop.max_steps:
            loss = problem.full_loss(state.W)
            steps.append(state.t)
            times.append(state.t * time_per_step)
            losses.append(loss)
            if not np.isfinite(loss) or loss > bound:
                diverged = True
                break
            recent.append(loss)
            if len(recent) > LOSS_WINDOW:
                recent.pop(0)
            if stop.target_loss is not None and np.mean(recent) <= stop.target_loss:
                break

    return LossTrace(
        steps=np.array(steps),
        sim_times=np.array(times),
        losses=np.array(losses),
        final_state=state,
        diverged=diverged,
    )
