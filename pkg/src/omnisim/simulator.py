"""Deterministic discrete-event simulator of asynchronous compute groups.

g groups share one serial FC server.  Each group loops: snapshot the master
model, draw a batch, compute for the group's convolution time, enqueue at
the FC server (FIFO by enqueue time), and at FC completion apply one
momentum-SGD update to the master using the gradient evaluated at its own
snapshot.  The group restarts immediately after its write.

Asynchrony is logical: the loop is single threaded and bit-reproducible per
seed.  Service times are either the analytic means ("deterministic") or
exponential draws with those means ("exponential"); batches and service
times come from independent per-group RNG streams, so the realized event
interleaving never perturbs the batch sequence of any group.

The estimator at the bottom measures the momentum that asynchrony induces
on its own: with explicit momentum zero, consecutive master increments
V(t) = W(t) - W(t-1) are regressed as V(t+1) ~ a * V(t) - c * grad(W(t));
the fitted ``a`` is the implicit momentum, which queueing theory predicts
to be 1 - 1/g for g groups under exponential service.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .cluster import ExecutionPlan, PhaseProfile, t_conv
from .sgd import (
    DIVERGENCE_FACTOR,
    Hyperparams,
    LossTrace,
    SGDState,
    TrainingProblem,
    batch_stream,
    child_seed,
    iterations_to_loss,
    service_stream,
    sgd_step,
    smoothed,
)

DEFAULT_BURN_IN = 100


@dataclass(frozen=True)
class SimConfig:
    plan: ExecutionPlan
    profile: PhaseProfile
    hp: Hyperparams
    problem: TrainingProblem
    service_mode: str = "deterministic"
    max_updates: Optional[int] = None
    max_sim_seconds: Optional[float] = None
    seed: int = 0
    init: Optional[SGDState] = None
    loss_sample_interval: int = 1
    record_models: bool = False

    def __post_init__(self) -> None:
        if self.service_mode not in ("deterministic", "exponential"):
            raise ValueError(f"unknown service_mode {self.service_mode!r}")
        if self.max_updates is None and self.max_sim_seconds is None:
            raise ValueError("need max_updates and/or max_sim_seconds")
        if self.max_updates is not None and self.max_updates < 1:
            raise ValueError("max_updates must be >= 1")
        if self.loss_sample_interval < 1:
            raise ValueError("loss_sample_interval must be >= 1")


@dataclass(frozen=True, slots=True)
class SimEvent:
    """One applied update: who wrote, what it read, and when."""

    group_id: int
    read_step: int
    write_step: int
    staleness: int
    start_time: float
    fc_enqueue_time: float
    finish_time: float


@dataclass
class SimTrace:
    events: list[SimEvent]
    loss_steps: np.ndarray
    loss_times: np.ndarray
    loss_values: np.ndarray
    final_state: SGDState
    diverged: bool = False
    models: Optional[np.ndarray] = None  # (n_updates + 1, dim) when recorded

    @property
    def write_times(self) -> np.ndarray:
        return np.array([e.finish_time for e in self.events])

    def to_loss_trace(self) -> LossTrace:
        return LossTrace(
            steps=self.loss_steps,
            sim_times=self.loss_times,
            losses=self.loss_values,
            final_state=self.final_state,
            diverged=self.diverged,
        )

    def write_csv(self, path) -> None:
        """Event log; the loss column carries the latest sampled loss forward."""
        sampled = dict(zip(self.loss_steps.tolist(), self.loss_values.tolist()))
        with open(path, "w") as f:
            f.write("write_step,group_id,read_step,staleness,start_s,finish_s,loss\n")
            last = sampled.get(0, float("nan"))
            for e in self.events:
                last = sampled.get(e.write_step, last)
                f.write(
                    f"{e.write_step},{e.group_id},{e.read_step},{e.staleness},"
                    f"{e.start_time:.6f},{e.finish_time:.6f},{last!r}\n"
                )


def simulate(cfg: SimConfig) -> SimTrace:
    """Run the event loop until the update or sim-time budget, or divergence."""
    g = cfg.plan.g
    conv_mean = t_conv(cfg.plan.k, cfg.profile)
    fc_mean = cfg.profile.t_fc
    exponential = cfg.service_mode == "exponential"

    batch_rngs = [batch_stream(cfg.seed, i) for i in range(g)]
    svc_rngs = [service_stream(cfg.seed, i) for i in range(g)] if exponential else None

    state = cfg.init if cfg.init is not None else cfg.problem.initial_state()
    initial_loss = cfg.problem.full_loss(state.W)
    bound = DIVERGENCE_FACTOR * max(abs(initial_loss), 1.0)

    events: list[SimEvent] = []
    loss_steps, loss_times, loss_values = [state.t], [0.0], [initial_loss]
    models = [state.W.copy()] if cfg.record_models else None
    diverged = not np.isfinite(initial_loss)
    t0 = state.t

    def draw_services(i: int) -> tuple[float, float]:
        if exponential:
            r = svc_rngs[i]
            return r.exponential(conv_mean), r.exponential(fc_mean)
        return conv_mean, fc_mean

    # heap entries: (conv_done_time, seq, group, snapshot, read_step, read_time, batch, fc_service)
    heap: list = []
    seq = 0
    for i in range(g):
        conv_delay, fc_service = draw_services(i)
        batch = cfg.problem.sample_batch(batch_rngs[i], cfg.hp.b)
        heapq.heappush(heap, (conv_delay, seq, i, state.W.copy(), state.t, 0.0, batch, fc_service))
        seq += 1

    fc_free = 0.0
    while not diverged:
        if cfg.max_updates is not None and state.t - t0 >= cfg.max_updates:
            break
        conv_done, _, i, snapshot, read_step, read_time, batch, fc_service = heap[0]
        finish = max(fc_free, conv_done) + fc_service
        if cfg.max_sim_seconds is not None and finish > cfg.max_sim_seconds:
            break
        heapq.heappop(heap)
        fc_free = finish

        gradient = cfg.problem.grad(snapshot, batch)
        state = sgd_step(state, cfg.hp, gradient, snapshot)
        events.append(
            SimEvent(
                group_id=i,
                read_step=read_step,
                write_step=state.t,
                staleness=state.t - 1 - read_step,
                start_time=read_time,
                fc_enqueue_time=conv_done,
                finish_time=finish,
            )
        )
        if models is not None:
            models.append(state.W.copy())

        if not np.all(np.isfinite(state.W)):
            diverged = True
        if (state.t - t0) % cfg.loss_sample_interval == 0 or diverged:
            loss = cfg.problem.full_loss(state.W)
            loss_steps.append(state.t)
            loss_times.append(finish)
            loss_values.append(loss)
            if not np.isfinite(loss) or loss > bound:
                diverged = True
        if diverged:
            break

        conv_delay, next_fc = draw_services(i)
        next_batch = cfg.problem.sample_batch(batch_rngs[i], cfg.hp.b)
        heapq.heappush(
            heap,
            (finish + conv_delay, seq, i, state.W.copy(), state.t, finish, next_batch, next_fc),
        )
        seq += 1

    return SimTrace(
        events=events,
        loss_steps=np.array(loss_steps),
        loss_times=np.array(loss_times),
        loss_values=np.array(loss_values),
        final_state=state,
        diverged=diverged,
        models=np.array(models) if models is not None else None,
    )


def measured_he(trace: SimTrace, burn_in: int = DEFAULT_BURN_IN) -> float:
    """Mean inter-write interval after discarding the first burn_in events."""
    if len(trace.events) <= burn_in + 1:
        raise ValueError(
            f"trace has {len(trace.events)} events; need more than burn_in + 1 = {burn_in + 1}"
        )
    times = trace.write_times[burn_in:]
    return float(np.diff(times).mean())


@dataclass(frozen=True)
class StalenessStats:
    mean: float
    histogram: dict[int, int]


def staleness_stats(trace: SimTrace, burn_in: int = 0) -> StalenessStats:
    """Per-update staleness counts, optionally after a warm-up discard."""
    staleness = np.array([e.staleness for e in trace.events[burn_in:]])
    if staleness.size == 0:
        raise ValueError("trace has no events past burn_in")
    values, counts = np.unique(staleness, return_counts=True)
    return StalenessStats(
        mean=float(staleness.mean()),
        histogram={int(v): int(c) for v, c in zip(values, counts)},
    )


def estimate_implicit_momentum(
    cfg: SimConfig,
    n_runs: int,
    burn_in: Optional[int] = None,
    signal_floor: float = 0.02,
) -> float:
    """Regression estimate of the momentum that asynchrony induces.

    Pools (V(t), V(t+1), grad(W(t))) triples across seeded runs by averaging
    the master trajectories elementwise (the implicit-momentum law is a
    statement about expected paths; per-sample regression is attenuated by
    the staleness randomness itself), then fits the least-squares ``a`` in
    V(t+1) ~ a * V(t) - c * grad(W(t)) over the window where the averaged
    signal is alive, pooling time steps and coordinates.

    Protocol details, all tied to the measurement physics:

    * the window starts at ``burn_in`` (default 3g + 10) because early
      updates replay the initial model's gradient with full step size
      before the staleness process matures;
    * the window ends once the averaged increment falls below
      ``signal_floor`` of its early level, after which Monte-Carlo noise
      (anti-correlated between consecutive increments by differencing)
      would drag the fit toward -1/2;
    * estimates converge to the stationary coefficient as runs grow; a few
      hundred runs give ~0.05 accuracy on desk-scale quadratics.

    Requires explicit momentum zero and exponential service; a profile with
    t_conv(k) >> t_fc keeps the queue in the memoryless-race regime the law
    describes.
    """
    if cfg.hp.mu != 0.0:
        raise ValueError("implicit-momentum estimation requires explicit momentum 0")
    if cfg.service_mode != "exponential":
        raise ValueError("implicit-momentum estimation requires exponential service")
    if cfg.max_updates is None:
        raise ValueError("cfg.max_updates must be set")
    if burn_in is None:
        burn_in = 3 * cfg.plan.g + 10

    paths = []
    for r in range(n_runs):
        run_cfg = replace(cfg, seed=child_seed(cfg.seed, 3, r), record_models=True)
        trace = simulate(run_cfg)
        if trace.diverged or trace.models is None:
            continue
        if trace.models.shape[0] != cfg.max_updates + 1:
            continue
        paths.append(trace.models)
    if not paths:
        raise ValueError("no usable runs (all diverged or cut short)")

    mean_path = np.mean(paths, axis=0)
    V = np.diff(mean_path, axis=0)  # V[t-1] = W(t) - W(t-1)
    mags = np.max(np.abs(V), axis=1)
    if burn_in + 21 >= V.shape[0]:
        raise ValueError("max_updates too small for the burn-in window")
    threshold = signal_floor * float(np.mean(mags[burn_in : burn_in + 10]))
    t_end = mean_path.shape[0] - 1
    for t in range(burn_in + 20, mean_path.shape[0] - 1):
        if mags[t] < threshold:
            t_end = t
            break

    xs, ys = [], []
    for t in range(burn_in + 1, t_end):
        grad_t = cfg.problem.full_grad(mean_path[t])
        xs.append(np.column_stack([V[t - 1], -grad_t]))
        ys.append(V[t])
    if not xs:
        raise ValueError("signal window is empty; lower burn_in or raise max_updates")
    X = np.concatenate(xs)
    y = np.concatenate(ys)
    n_triples = len(paths) * X.shape[0]
    if n_triples < 1000:
        raise ValueError(f"insufficient samples: {n_triples} pooled triples < 1000")
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    return float(beta[0])


@dataclass(frozen=True)
class SECurveRow:
    g: int
    k: int
    mu_star: float
    eta_star: float
    iterations: Optional[int]
    he_s_per_iter: float
    total_time_s: Optional[float]
    p_se: Optional[float] = None
    p_he: Optional[float] = None


def se_curve(
    problem: TrainingProblem,
    mus: Sequence[float],
    etas: Sequence[float],
    plans: Sequence[ExecutionPlan],
    target_loss: float,
    seed: int,
    profile: PhaseProfile,
    batch_size: int = 1,
    service_mode: str = "exponential",
    max_updates: int = 20_000,
    init: Optional[SGDState] = None,
    burn_in: int = DEFAULT_BURN_IN,
) -> list[SECurveRow]:
    """Grid-sweep every plan: best (mu, eta) by iterations-to-target.

    All candidates start from the same state with the same batch-stream
    seed, so comparisons are paired.  Total time is iterations times the
    measured per-iteration time; penalty columns are normalized to the
    g = 1 row when present.
    """
    if len({p.N for p in plans}) > 1:
        raise ValueError("plans must share N")
    if init is None:
        init = problem.initial_state()

    rows: list[SECurveRow] = []
    for plan in sorted(plans, key=lambda p: p.g):
        best: tuple | None = None  # (iters, eta, mu, he)
        for eta in etas:
            for mu in mus:
                cfg = SimConfig(
                    plan=plan,
                    profile=profile,
                    hp=Hyperparams(eta=eta, mu=mu, b=batch_size),
                    problem=problem,
                    service_mode=service_mode,
                    max_updates=max_updates,
                    seed=seed,
                    init=init,
                )
                trace = simulate(cfg)
                if trace.diverged:
                    continue
                iters = iterations_to_loss(trace.to_loss_trace(), target_loss)
                if iters is None:
                    continue
                bi = min(burn_in, max(1, len(trace.events) // 4))
                he = measured_he(trace, burn_in=bi)
                cand = (iters, eta, mu, he)
                if best is None or (cand[0], cand[1], cand[2]) < (best[0], best[1], best[2]):
                    best = cand
        if best is None:
            # nothing reached the target at this g; report with a bare HE probe
            probe = SimConfig(
                plan=plan,
                profile=profile,
                hp=Hyperparams(eta=min(etas), mu=0.0, b=batch_size),
                problem=problem,
                service_mode=service_mode,
                max_updates=max(2 * burn_in + 10, 200),
                seed=seed,
                init=init,
            )
            trace = simulate(probe)
            bi = min(burn_in, max(1, len(trace.events) // 4))
            he = measured_he(trace, burn_in=bi)
            rows.append(SECurveRow(plan.g, plan.k, float("nan"), float("nan"), None, he, None))
            continue
        iters, eta, mu, he = best
        rows.append(SECurveRow(plan.g, plan.k, mu, eta, iters, he, iters * he))

    base = next((r for r in rows if r.g == 1), None)
    if base is not None and base.iterations is not None:
        rows = [
            replace(
                r,
                p_se=(r.iterations / base.iterations) if r.iterations is not None else None,
                p_he=r.he_s_per_iter / base.he_s_per_iter,
            )
            for r in rows
        ]
    return rows
