"""Loss variants, physics penalties, and the training/evaluation loop.

Four losses share the label term ``W1 * |Y - Yhat|_1``:

* ``L1``  label term only
* ``L2``  + ``W2 * sum_{i=1}^{M-1} |C_i|``  (sample innovation correlations)
* ``L3``  + ``W3 * |eps - nis_target|``       (time-averaged NIS)
* ``L4``  + both penalties

The penalties come from re-filtering a sample's stored innovation window
with the steady-state gain implied by the predicted covariances. The stored
innovations were produced by a steady-state filter tuned to the sample's
previous-step labels, so for two fixed gains ``W`` (generator) and ``W'``
(prediction) the innovations are related by::

    nu'_k = nu_k + H e_k
    e_{k+1} = F (I - W' H) e_k + F (W - W') nu_k,     e_0 = 0

The control input cancels, so no steering history is needed. Penalty
gradients with respect to the three network outputs are taken by central
finite differences and chained into backpropagation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, TrainingStalledError
from .filter_core import SystemModel, steady_state_batch
from .numerics import RandomSource
from .predictor import (
    NetworkParams,
    PredictorInput,
    AdamState,
    adam_step,
    assemble_features,
    backward_batch,
    forward_batch,
)
from .vehicle import Dataset

VARIANTS = ("L1", "L2", "L3", "L4")
LABEL_NAMES = ("Q_a", "Q_b", "R")
EVAL_CHUNK = 512


@dataclass(frozen=True)
class LossWeights:
    W1: float = 1.0
    W2: float = 0.1
    W3: float = 0.1
    variant: str = "L1"
    nis_target: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown loss variant {self.variant!r}")
        if min(self.W1, self.W2, self.W3) < 0:
            raise ConfigurationError("loss weights must be non-negative")

    @property
    def uses_correlation(self) -> bool:
        return self.variant in ("L2", "L4")

    @property
    def uses_nis(self) -> bool:
        return self.variant in ("L3", "L4")

    @property
    def uses_physics(self) -> bool:
        return self.variant != "L1"


@dataclass(frozen=True)
class ModelContext:
    """Filter model used to evaluate physics penalties on stored windows."""

    model: SystemModel
    M: int = 5
    fd_rel_step: float = 1e-6
    riccati_rtol: float = 1e-13


@dataclass(frozen=True)
class TrainingSample:
    input: PredictorInput
    label: np.ndarray

    @classmethod
    def from_dataset(cls, ds: Dataset, index: int) -> "TrainingSample":
        window = np.stack([ds.y[index], ds.nu[index]], axis=1)
        return cls(PredictorInput(window, ds.prev_labels[index]), ds.labels[index].copy())


@dataclass
class EvalSummary:
    label_rmse: dict = field(default_factory=dict)
    state_rmse: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"label_rmse": self.label_rmse, "state_rmse": self.state_rmse}


# --------------------------------------------------------------------------
# losses


def penalty(weights: LossWeights, C_hat, eps_bar) -> np.ndarray:
    """Physics part of the loss; ``C_hat`` is ``(..., M-1)`` and ``eps_bar`` ``(...)``."""
    eps_bar = np.asarray(eps_bar, dtype=float)
    total = np.zeros_like(eps_bar)
    if weights.uses_correlation:
        total = total + weights.W2 * np.sum(np.abs(np.asarray(C_hat, dtype=float)), axis=-1)
    if weights.uses_nis:
        total = total + weights.W3 * np.abs(eps_bar - weights.nis_target)
    return total


def loss(weights: LossWeights, Y, Yhat, physics=None) -> float:
    """Single-sample loss. ``physics`` is ``(C_hat, eps_bar)`` for L2-L4."""
    Y = np.asarray(Y, dtype=float)
    Yhat = np.asarray(Yhat, dtype=float)
    value = weights.W1 * float(np.sum(np.abs(Y - Yhat)))
    if weights.uses_physics:
        if physics is None:
            raise ConfigurationError(f"loss {weights.variant} needs physics terms")
        C_hat, eps_bar = physics
        value += float(penalty(weights, np.atleast_1d(C_hat), eps_bar))
    return value


# --------------------------------------------------------------------------
# physics terms


def _label_covariances(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels, dtype=float).reshape(-1, 3)
    Q = np.zeros((labels.shape[0], 2, 2))
    Q[:, 0, 0] = labels[:, 0]
    Q[:, 1, 1] = labels[:, 1]
    return Q, labels[:, 2].reshape(-1, 1, 1)


def steady_gains(ctx: ModelContext, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Steady-state gains ``(B, n, 1)``, innovation variances ``(B,)`` and a validity mask."""
    Q, R = _label_covariances(labels)
    _, W, S, ok = steady_state_batch(ctx.model, Q, R, rtol=ctx.riccati_rtol)
    return W, S[:, 0, 0], ok


def refilter(ctx: ModelContext, nu: np.ndarray, gen_gain: np.ndarray, gain: np.ndarray) -> np.ndarray:
    """Innovations ``(B, m)`` of a gain-``gain`` filter from a gain-``gen_gain`` record."""
    model = ctx.model
    F, h = model.F, model.H[0]
    B, m = nu.shape
    closed = F @ (np.eye(model.n) - gain @ model.H)
    drive = (F @ (gen_gain - gain))[:, :, 0]
    e = np.zeros((B, model.n))
    out = np.empty_like(nu)
    with np.errstate(all="ignore"):
        for k in range(m):
            out[:, k] = nu[:, k] + e @ h
            e = np.einsum("bij,bj->bi", closed, e) + drive * nu[:, k : k + 1]
    return out


def correlation_terms(nu: np.ndarray, M: int) -> np.ndarray:
    """Lags ``1..M-1`` of the sample correlation for a batch of scalar windows."""
    B, m = nu.shape
    if m <= M:
        raise ConfigurationError(f"window of {m} steps is too short for M={M}")
    count = m - M
    head = nu[:, :count]
    return np.stack([np.sum(head * nu[:, i : i + count], axis=1) / count for i in range(1, M)], axis=1)


def physics_terms_batch(ctx: ModelContext, nu, prev, predicted, gen_gain=None):
    """``(C_hat (B, M-1), eps_bar (B,), ok (B,))`` for a batch of windows."""
    nu = np.asarray(nu, dtype=float)
    if gen_gain is None:
        gen_gain, _, gen_ok = steady_gains(ctx, prev)
    else:
        gen_ok = np.ones(nu.shape[0], dtype=bool)
    gain, S, ok = steady_gains(ctx, predicted)
    nu_p = refilter(ctx, nu, gen_gain, gain)
    with np.errstate(all="ignore"):
        C_hat = correlation_terms(nu_p, ctx.M)
        eps_bar = np.mean(nu_p * nu_p, axis=1) / S
    ok = ok & gen_ok & np.isfinite(eps_bar) & np.all(np.isfinite(C_hat), axis=1)
    return C_hat, eps_bar, ok


def physics_terms(sample: TrainingSample, predicted, ctx: ModelContext) -> tuple[np.ndarray, float]:
    """Correlation lags ``1..M-1`` and NIS of the re-filtered window."""
    nu = sample.input.window[None, :, 1]
    C_hat, eps_bar, ok = physics_terms_batch(
        ctx, nu, sample.input.prev_labels[None], np.asarray(predicted, dtype=float)[None]
    )
    if not ok[0]:
        raise ArithmeticError("filter diverged under the predicted covariances")
    return C_hat[0], float(eps_bar[0])


# --------------------------------------------------------------------------
# gradients


@dataclass
class BatchResult:
    losses: np.ndarray
    output_grad: np.ndarray
    used: np.ndarray
    C_hat: np.ndarray | None = None
    eps_bar: np.ndarray | None = None

    @property
    def n_used(self) -> int:
        return int(np.count_nonzero(self.used))

    @property
    def skipped(self) -> int:
        return int(self.used.size - self.n_used)

    @property
    def mean_loss(self) -> float:
        if self.n_used == 0:
            return float("nan")
        return math.fsum(self.losses[self.used]) / self.n_used


def output_objective(
    weights: LossWeights, ctx: ModelContext | None, Y, Yhat, nu=None, prev=None,
    gen_gain=None, with_grad: bool = True,
) -> BatchResult:
    """Per-sample losses and their gradients with respect to the outputs."""
    Y = np.asarray(Y, dtype=float)
    Yhat = np.asarray(Yhat, dtype=float)
    B = Y.shape[0]
    losses = weights.W1 * np.sum(np.abs(Y - Yhat), axis=1)
    grad = weights.W1 * np.sign(Yhat - Y) if with_grad else None
    used = np.ones(B, dtype=bool)
    if not weights.uses_physics:
        return BatchResult(losses, grad, used)
    if ctx is None:
        raise ConfigurationError(f"loss {weights.variant} needs a model context")

    if gen_gain is None:
        gen_gain, _, gen_ok = steady_gains(ctx, prev)
        used &= gen_ok
    if with_grad:
        steps = ctx.fd_rel_step * Yhat
        probes = [Yhat]
        for c in range(3):
            for sign in (1.0, -1.0):
                shifted = Yhat.copy()
                shifted[:, c] += sign * steps[:, c]
                probes.append(shifted)
        stacked = np.concatenate(probes)
        reps = len(probes)
        C_all, eps_all, ok_all = physics_terms_batch(
            ctx, np.tile(nu, (reps, 1)), None, stacked, np.tile(gen_gain, (reps, 1, 1))
        )
        pen = penalty(weights, C_all, eps_all).reshape(reps, B)
        ok = ok_all.reshape(reps, B).all(axis=0)
        for c in range(3):
            grad[:, c] += (pen[1 + 2 * c] - pen[2 + 2 * c]) / (2.0 * steps[:, c])
        C_hat, eps_bar, base_pen = C_all[:B], eps_all[:B], pen[0]
    else:
        C_hat, eps_bar, ok = physics_terms_batch(ctx, nu, None, Yhat, gen_gain)
        base_pen = penalty(weights, C_hat, eps_bar)
    used &= ok
    losses = losses + np.where(used, base_pen, 0.0)
    if with_grad:
        grad[~used] = 0.0
    return BatchResult(losses, grad, used, C_hat, eps_bar)


def batch_loss_and_grad(params: NetworkParams, features, labels, weights: LossWeights,
                        ctx: ModelContext | None = None, nu=None, gen_gain=None):
    """Mean loss over usable samples and its parameter gradients."""
    Yhat, cache = forward_batch(params, features)
    res = output_objective(weights, ctx, labels, Yhat, nu, None, gen_gain)
    if res.n_used == 0:
        raise TrainingStalledError("every sample in the batch was skipped")
    grads = backward_batch(params, cache, res.output_grad / res.n_used)
    return res.mean_loss, grads, res


def loss_gradient(weights: LossWeights, sample: TrainingSample, params: NetworkParams,
                  cache, ctx: ModelContext | None = None) -> dict[str, np.ndarray]:
    """Parameter gradient of one sample's loss, given its forward cache."""
    Yhat = params.bound * cache.sig
    res = output_objective(
        weights, ctx, sample.label[None], Yhat, sample.input.window[None, :, 1],
        sample.input.prev_labels[None],
    )
    if res.n_used == 0:
        raise TrainingStalledError("sample skipped: filter diverged")
    return backward_batch(params, cache, res.output_grad)


# --------------------------------------------------------------------------
# training


def split_by_trajectory(ds: Dataset, val_fraction: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Every ``round(1/val_fraction)``-th trajectory goes to validation."""
    if not 0.0 < val_fraction < 1.0:
        raise ConfigurationError("val_fraction must lie in (0, 1)")
    period = int(round(1.0 / val_fraction))
    is_val = ds.trajectory_ids % period == period - 1
    return np.flatnonzero(~is_val), np.flatnonzero(is_val)


@dataclass
class PreparedData:
    features: np.ndarray
    labels: np.ndarray
    nu: np.ndarray
    prev: np.ndarray
    gen_gain: np.ndarray | None
    gen_ok: np.ndarray

    @classmethod
    def build(cls, ds: Dataset, ctx: ModelContext | None, physics: bool) -> "PreparedData":
        features = assemble_features(ds.y, ds.nu, ds.prev_labels)
        if physics:
            gain, _, ok = steady_gains(ctx, ds.prev_labels)
        else:
            gain, ok = None, np.ones(len(ds), dtype=bool)
        return cls(features, ds.labels, ds.nu, ds.prev_labels, gain, ok)


def evaluate_loss(params: NetworkParams, data: PreparedData, index, weights: LossWeights,
                  ctx: ModelContext | None = None) -> dict:
    """Mean loss and penalty statistics over ``index`` without gradients."""
    index = np.asarray(index)
    losses, used, eps, corr = [], [], [], []
    for start in range(0, index.size, EVAL_CHUNK):
        idx = index[start : start + EVAL_CHUNK]
        Yhat, _ = forward_batch(params, data.features[idx])
        gain = None if data.gen_gain is None else data.gen_gain[idx]
        res = output_objective(weights, ctx, data.labels[idx], Yhat, data.nu[idx], None, gain,
                               with_grad=False)
        ok = res.used & data.gen_ok[idx]
        losses.append(res.losses[ok])
        used.append(ok)
        if res.eps_bar is not None:
            eps.append(res.eps_bar[ok])
            corr.append(np.sum(np.abs(res.C_hat[ok]), axis=1))
    all_losses = np.concatenate(losses) if losses else np.array([])
    out = {
        "loss": math.fsum(all_losses) / max(all_losses.size, 1),
        "skipped": int(index.size - all_losses.size),
    }
    if eps:
        eps_all = np.concatenate(eps)
        corr_all = np.concatenate(corr)
        out["eps_bar"] = float(np.mean(eps_all)) if eps_all.size else float("nan")
        out["corr_penalty"] = weights.W2 * float(np.mean(corr_all)) if corr_all.size else float("nan")
        out["nis_penalty"] = (
            weights.W3 * float(np.mean(np.abs(eps_all - weights.nis_target)))
            if eps_all.size else float("nan")
        )
    return out


def label_rmse(params: NetworkParams, features: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    if labels.shape[0] == 0:
        raise ConfigurationError("cannot evaluate an empty split")
    preds = np.vstack([
        forward_batch(params, features[s : s + EVAL_CHUNK])[0]
        for s in range(0, labels.shape[0], EVAL_CHUNK)
    ])
    err = np.sqrt(np.mean((preds - labels) ** 2, axis=0))
    return {name: float(v) for name, v in zip(LABEL_NAMES, err)}


def train(
    dataset: Dataset,
    params: NetworkParams,
    weights: LossWeights,
    ctx: ModelContext | None = None,
    epochs: int = 25,
    batch_size: int = 128,
    lr: float = 1e-4,
    rng: RandomSource | None = None,
    split: tuple[np.ndarray, np.ndarray] | None = None,
    log=None,
) -> tuple[NetworkParams, list[dict]]:
    """Mini-batch ADAM training; returns the final parameters and per-epoch history.

    Each epoch shuffles the training indices with ``rng``, takes
    ``ceil(n / batch_size)`` optimizer steps, then evaluates the
    validation loss and label RMSE.
    """
    if len(dataset) == 0:
        raise ConfigurationError("dataset is empty")
    if weights.uses_physics and ctx is None:
        raise ConfigurationError(f"loss {weights.variant} needs a model context")
    rng = rng or RandomSource(0)
    train_idx, val_idx = split if split is not None else split_by_trajectory(dataset)
    if train_idx.size == 0:
        raise ConfigurationError("training split is empty")
    data = PreparedData.build(dataset, ctx, weights.uses_physics)
    train_idx = train_idx[data.gen_ok[train_idx]]
    state = AdamState.zeros_like(params)
    history = []
    for epoch in range(1, epochs + 1):
        order = train_idx[rng.permutation(train_idx.size)]
        batch_losses, skipped, steps = [], 0, 0
        for start in range(0, order.size, batch_size):
            idx = order[start : start + batch_size]
            gain = None if data.gen_gain is None else data.gen_gain[idx]
            value, grads, res = batch_loss_and_grad(
                params, data.features[idx], data.labels[idx], weights, ctx, data.nu[idx], gain
            )
            params, state = adam_step(params, grads, state, lr)
            batch_losses.append(value)
            skipped += res.skipped
            steps += 1
        row = {
            "epoch": epoch,
            "variant": weights.variant,
            "steps": steps,
            "train_loss": math.fsum(batch_losses) / len(batch_losses),
            "skipped": skipped,
        }
        if val_idx.size:
            val = evaluate_loss(params, data, val_idx, weights, ctx)
            row["val_loss"] = val["loss"]
            rmse = label_rmse(params, data.features[val_idx], data.labels[val_idx])
            row.update({f"rmse_{k}": v for k, v in rmse.items()})
            if weights.uses_physics:
                row["corr_penalty"] = val["corr_penalty"]
                row["nis_penalty"] = val["nis_penalty"]
                row["eps_bar"] = val["eps_bar"]
                _, eps_true, ok = physics_terms_batch(
                    ctx, data.nu[val_idx], None, data.labels[val_idx], data.gen_gain[val_idx]
                )
                row["eps_bar_true_labels"] = float(np.mean(eps_true[ok]))
        history.append(row)
        if log is not None:
            log(row)
    return params, history


def evaluate_labels(params: NetworkParams, dataset: Dataset,
                    split: tuple[np.ndarray, np.ndarray] | None = None) -> EvalSummary:
    """Per-label RMSE on the training and validation splits."""
    train_idx, val_idx = split if split is not None else split_by_trajectory(dataset)
    features = assemble_features(dataset.y, dataset.nu, dataset.prev_labels)
    return EvalSummary(label_rmse={
        "train": label_rmse(params, features[train_idx], dataset.labels[train_idx]),
        "validation": label_rmse(params, features[val_idx], dataset.labels[val_idx]),
    })
