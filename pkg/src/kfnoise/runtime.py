"""Closed-loop adaptive filtering with a learned noise predictor.

Every step the runtime picks the noise covariances, runs one predict/update
cycle, and appends the new measurement and innovation to fixed-size
buffers. While the buffers are filling the default labels are used; after
that the predictor sees the latest ``m`` measurements and innovations
together with its own previous prediction.

Step ``k`` uses only measurements ``0..k-1`` to choose its covariances, so
running on a prefix of a trajectory reproduces the prefix of the full trace.
"""

from __future__ import annotations

import csv
import io
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, InsufficientDataError, NumericOverflowError
from .filter_core import FilterState, predict, steady_state, update
from .numerics import RandomSource
from .predictor import NetworkParams, assemble_features, forward_batch
from .training import ModelContext
from .vehicle import (
    DEFAULT_LABELS,
    MANEUVERS,
    ManeuverSpec,
    ModelOptions,
    NoiseLabels,
    TrajectoryRecord,
    VehicleParams,
    sample_labels,
    simulate,
)

ORACLE = "oracle"
TRACE_COLUMNS = (
    "time", "beta_true", "beta_hat", "psidot_true", "psidot_hat", "err_beta", "err_psidot",
    "sig3_beta", "sig3_psidot", "qa_hat", "qb_hat", "r_hat", "warmup",
)

# A predictor is trained parameters, a callable mapping features ``(B, m, 5)``
# to labels ``(B, 3)``, ``ORACLE`` for the true labels, or ``None`` to keep
# the default labels throughout.
Predictor = NetworkParams | Callable[[np.ndarray], np.ndarray] | str | None


class RuntimeBuffers:
    """Ring buffers of the latest ``m`` measurements and innovations."""

    def __init__(self, m: int, prev_labels=DEFAULT_LABELS.as_array()):
        if m < 1:
            raise ConfigurationError("buffer capacity must be at least 1")
        self.m = m
        self.y_buffer: deque[float] = deque(maxlen=m)
        self.nu_buffer: deque[float] = deque(maxlen=m)
        self.prev_labels = np.array(prev_labels, dtype=float)

    @property
    def full(self) -> bool:
        return len(self.y_buffer) == self.m and len(self.nu_buffer) == self.m

    def append(self, y: float, nu: float) -> None:
        self.y_buffer.append(float(y))
        self.nu_buffer.append(float(nu))

    def features(self) -> np.ndarray:
        """``(m, 5)`` predictor features; only valid once the buffers are full."""
        if not self.full:
            raise InsufficientDataError(f"buffers hold {len(self.y_buffer)} of {self.m} samples")
        return assemble_features(
            np.array(self.y_buffer)[None], np.array(self.nu_buffer)[None], self.prev_labels[None]
        )[0]


@dataclass
class EstimateTrace:
    times: np.ndarray
    x_hat: np.ndarray
    sig3: np.ndarray
    labels: np.ndarray
    warmup: np.ndarray
    innovations: np.ndarray
    S: np.ndarray
    truth: np.ndarray | None = None
    diverged: bool = False

    def __len__(self) -> int:
        return self.times.size

    @property
    def errors(self) -> np.ndarray:
        if self.truth is None:
            raise InsufficientDataError("trace has no ground truth")
        return self.truth - self.x_hat

    def to_csv(self, path=None) -> str:
        """CSV text with ``TRACE_COLUMNS``; also written to ``path`` if given."""
        truth = self.truth if self.truth is not None else np.full_like(self.x_hat, np.nan)
        err = truth - self.x_hat
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for k in range(len(self)):
            writer.writerow([
                repr(float(self.times[k])),
                repr(float(truth[k, 0])), repr(float(self.x_hat[k, 0])),
                repr(float(truth[k, 1])), repr(float(self.x_hat[k, 1])),
                repr(float(err[k, 0])), repr(float(err[k, 1])),
                repr(float(self.sig3[k, 0])), repr(float(self.sig3[k, 1])),
                *(repr(float(v)) for v in self.labels[k]),
                int(self.warmup[k]),
            ])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def _predict_labels(predictor, features: np.ndarray, truths: np.ndarray) -> np.ndarray:
    if isinstance(predictor, str):
        if predictor != ORACLE:
            raise ConfigurationError(f"unknown predictor mode {predictor!r}")
        return truths.copy()
    if isinstance(predictor, NetworkParams):
        return forward_batch(predictor, features)[0]
    out = np.asarray(predictor(features), dtype=float).reshape(features.shape[0], 3)
    if not np.all((out > 0) & (out <= 1e-3)):
        raise ConfigurationError("predictor returned labels outside (0, 1e-3]")
    return out


def _noise(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Q = np.zeros(labels.shape[:-1] + (2, 2))
    Q[..., 0, 0] = labels[..., 0]
    Q[..., 1, 1] = labels[..., 1]
    return Q, labels[..., 2:3, None]


def _filter_step(state: FilterState, ctx: ModelContext, labels, u_prev, z, first: bool) -> FilterState:
    noise = _noise(labels)
    if first:
        state = replace(state, x_prior=state.x_post, P_prior=state.P_post)
    else:
        state = predict(state, ctx.model, noise, u_prev)
    return update(state, ctx.model, noise, z)


def run_many(
    ctx: ModelContext,
    predictor: Predictor,
    trajectories: Sequence[TrajectoryRecord],
    default_labels: NoiseLabels = DEFAULT_LABELS,
    m: int = 100,
    stride: int = 1,
    P0=None,
) -> list[EstimateTrace]:
    """Run independent adaptive filters over equal-length trajectories in lockstep."""
    if not trajectories:
        return []
    if stride < 1:
        raise ConfigurationError("stride must be at least 1")
    N = len(trajectories[0])
    if any(len(t) != N for t in trajectories):
        raise ConfigurationError("lockstep runs need trajectories of equal length")
    B, n = len(trajectories), ctx.model.n
    defaults = default_labels.as_array()
    if P0 is None:
        P0 = steady_state(ctx.model, default_labels.noise_cov()).P_prior
    truths = np.array([t.labels.as_array() for t in trajectories])
    z_all = np.array([t.measurements for t in trajectories]).reshape(B, N, 1)
    u_all = np.array([t.steering for t in trajectories]).reshape(B, N, 1)

    x_hat = np.zeros((B, N, n))
    sig3 = np.zeros((B, N, n))
    labels_out = np.zeros((B, N, 3))
    nu_out = np.zeros((B, N))
    S_out = np.zeros((B, N))
    warmup = np.arange(N) < m
    alive = np.full(B, N)

    y_hist = np.zeros((B, N))
    current = np.tile(defaults, (B, 1))
    prev = current.copy()
    state = FilterState.initial(np.zeros((B, n)), np.broadcast_to(P0, (B, n, n)).copy())
    for k in range(N):
        if k >= m and predictor is not None and (k - m) % stride == 0:
            features = assemble_features(y_hist[:, k - m : k], nu_out[:, k - m : k], prev)
            current = _predict_labels(predictor, features, truths)
            prev = current.copy()
        active = alive > k
        try:
            state = _filter_step(state, ctx, current, u_all[:, k - 1] if k else None, z_all[:, k], k == 0)
        except NumericOverflowError:
            state = _step_individually(state, ctx, current, u_all, z_all, k, alive)
            active = alive > k
        labels_out[:, k] = current
        x_hat[:, k] = state.x_post
        sig3[:, k] = 3.0 * np.sqrt(np.maximum(np.diagonal(state.P_post, axis1=1, axis2=2), 0.0))
        nu_out[:, k] = state.innovation[:, 0]
        S_out[:, k] = state.S[:, 0, 0]
        y_hist[:, k] = z_all[:, k, 0]
        if not active.all():
            nu_out[~active, k] = 0.0

    traces = []
    for b, traj in enumerate(trajectories):
        end = int(alive[b])
        traces.append(EstimateTrace(
            times=traj.times[:end].copy(),
            x_hat=x_hat[b, :end],
            sig3=sig3[b, :end],
            labels=labels_out[b, :end],
            warmup=warmup[:end].copy(),
            innovations=nu_out[b, :end],
            S=S_out[b, :end],
            truth=traj.states[:end].copy(),
            diverged=end < N,
        ))
    return traces


def _step_individually(state, ctx, current, u_all, z_all, k, alive) -> FilterState:
    """Advance each run alone so one diverging run cannot stop the others.

    Diverged runs are reset to a finite placeholder state and stop
    contributing to the trace from step ``k`` on.
    """
    B, n = current.shape[0], ctx.model.n
    rows = []
    for b in range(B):
        single = FilterState.initial(state.x_post[b], state.P_post[b])
        try:
            if alive[b] <= k:
                raise NumericOverflowError("run already diverged")
            u = u_all[b, k - 1] if k else None
            rows.append(_filter_step(single, ctx, current[b], u, z_all[b, k], k == 0))
        except NumericOverflowError:
            alive[b] = min(alive[b], k)
            rows.append(FilterState(
                x_post=np.zeros(n), P_post=np.eye(n), innovation=np.zeros(1), S=np.ones((1, 1)),
            ))
    return FilterState(
        x_post=np.array([r.x_post for r in rows]),
        P_post=np.array([r.P_post for r in rows]),
        innovation=np.array([r.innovation for r in rows]),
        S=np.array([r.S for r in rows]),
    )


def run(
    ctx: ModelContext,
    predictor: Predictor,
    trajectory: TrajectoryRecord,
    default_labels: NoiseLabels = DEFAULT_LABELS,
    m: int = 100,
    stride: int = 1,
) -> EstimateTrace:
    """Adaptive filter over one trajectory."""
    return run_many(ctx, predictor, [trajectory], default_labels, m, stride)[0]


def coverage(trace: EstimateTrace) -> np.ndarray:
    """Fraction of post-warmup steps with ``|error| <= 3 sigma``, per state."""
    mask = ~trace.warmup
    if not mask.any():
        raise InsufficientDataError("trace has no post-warmup steps")
    err = np.abs(trace.errors[mask])
    return np.mean(err <= trace.sig3[mask], axis=0)


@dataclass
class RunTable:
    """Post-warmup state RMSE per predictor over a shared set of runs."""

    names: list[str]
    rmse: np.ndarray
    runs: int
    diverged: dict[str, int] = field(default_factory=dict)
    traces: dict[str, list[EstimateTrace]] = field(default_factory=dict, repr=False)

    def row(self, name: str) -> np.ndarray:
        return self.rmse[self.names.index(name)]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["variant", "rmse_beta", "rmse_psidot", "runs", "diverged"])
        for name, (rb, rp) in zip(self.names, self.rmse):
            writer.writerow([name, repr(float(rb)), repr(float(rp)), self.runs, self.diverged.get(name, 0)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def validation_trajectories(
    count: int,
    rng: RandomSource,
    params: VehicleParams = VehicleParams(),
    maneuvers: Sequence[ManeuverSpec] | None = None,
    options: ModelOptions = ModelOptions(),
    load_transfer: float = 0.0,
) -> list[TrajectoryRecord]:
    """Fresh trajectories with freshly sampled labels, cycling through the maneuvers."""
    if maneuvers is None:
        maneuvers = [ManeuverSpec(kind=k) for k in MANEUVERS]
    out = []
    for i in range(count):
        sub = rng.spawn(i)
        labels = sample_labels(sub)
        out.append(simulate(params, maneuvers[i % len(maneuvers)], labels, sub, options, load_transfer))
    return out


def evaluate_runs(
    ctx: ModelContext,
    predictors: Mapping[str, Predictor],
    count: int = 25,
    rng: RandomSource | None = None,
    default_labels: NoiseLabels = DEFAULT_LABELS,
    m: int = 100,
    stride: int = 1,
    trajectories: Sequence[TrajectoryRecord] | None = None,
    **sim_kwargs,
) -> RunTable:
    """RMSE of beta and yaw rate over post-warmup steps, pooled across ``count`` runs.

    A ``baseline`` row using ``default_labels`` throughout is always appended.
    """
    if trajectories is None:
        trajectories = validation_trajectories(count, rng or RandomSource(0), **sim_kwargs)
    lengths = sorted({len(t) for t in trajectories})
    names, rows, diverged, traces = [], [], {}, {}
    for name, predictor in [*predictors.items(), ("baseline", None)]:
        all_traces = []
        for length in lengths:
            group = [t for t in trajectories if len(t) == length]
            all_traces.extend(run_many(ctx, predictor, group, default_labels, m, stride))
        sq = np.zeros(2)
        steps = 0
        for tr in all_traces:
            mask = ~tr.warmup
            sq += np.sum(tr.errors[mask] ** 2, axis=0)
            steps += int(mask.sum())
        names.append(name)
        rows.append(np.sqrt(sq / steps) if steps else np.full(2, np.nan))
        diverged[name] = sum(tr.diverged for tr in all_traces)
        traces[name] = all_traces
    return RunTable(names, np.array(rows), len(trajectories), diverged, traces)
