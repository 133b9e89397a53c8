"""Discrete linear Kalman filter.

The time update and the measurement update are pure functions: a
:class:`FilterState` goes in and a new one comes out. The covariance update
always uses the Joseph form, so it stays positive semidefinite for
suboptimal gains (the adaptive loop runs with predicted, not true, noise
covariances).

``predict`` and ``update`` also accept states carrying a leading batch
axis (``x`` of shape ``(B, n)``, ``P`` of shape ``(B, n, n)`` and
per-member ``Q``/``R``), which lets many independent filters advance in
lockstep.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    DimensionError,
    NumericOverflowError,
    SingularInnovationCovarianceError,
    SingularMatrixError,
)
from .numerics import as_matrix, cholesky_factor, solve_linear, symmetrize


@dataclass(frozen=True)
class SystemModel:
    """``x[k+1] = F x[k] + B u[k] + Gamma w[k]``,  ``z[k] = H x[k] + v[k]``."""

    F: np.ndarray
    B: np.ndarray
    H: np.ndarray
    Gamma: np.ndarray

    def __post_init__(self):
        F = as_matrix(self.F, "F")
        B = as_matrix(self.B, "B")
        H = as_matrix(self.H, "H")
        G = as_matrix(self.Gamma, "Gamma")
        n = F.shape[0]
        if F.shape != (n, n):
            raise DimensionError(f"F must be square, got {F.shape}")
        if B.shape[0] != n or G.shape[0] != n or H.shape[1] != n:
            raise DimensionError(
                f"inconsistent shapes F{F.shape} B{B.shape} H{H.shape} Gamma{G.shape}"
            )
        for name, value in (("F", F), ("B", B), ("H", H), ("Gamma", G)):
            object.__setattr__(self, name, value)

    @property
    def n(self) -> int:
        return self.F.shape[0]

    @property
    def p(self) -> int:
        return self.H.shape[0]

    @property
    def q(self) -> int:
        return self.Gamma.shape[1]


@dataclass(frozen=True)
class NoiseCov:
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        Q = as_matrix(self.Q, "Q")
        R = as_matrix(self.R, "R")
        # raises NotPositiveDefiniteError for non-SPD input
        cholesky_factor(Q)
        cholesky_factor(R)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)

    @classmethod
    def diagonal(cls, q_diag, r_diag) -> "NoiseCov":
        return cls(np.diag(np.atleast_1d(q_diag)), np.diag(np.atleast_1d(r_diag)))


@dataclass(frozen=True)
class FilterState:
    """Posterior and prior moments plus the quantities of the last update.

    Fields that have not been computed yet are ``None``.
    """

    x_post: np.ndarray
    P_post: np.ndarray
    x_prior: np.ndarray | None = None
    P_prior: np.ndarray | None = None
    innovation: np.ndarray | None = None
    S: np.ndarray | None = None
    gain: np.ndarray | None = None

    @classmethod
    def initial(cls, x0, P0) -> "FilterState":
        return cls(x_post=np.array(x0, dtype=float), P_post=np.array(P0, dtype=float))


@dataclass(frozen=True)
class SteadyStateSolution:
    P_prior: np.ndarray
    gain: np.ndarray
    S: np.ndarray
    iterations: int
    converged: bool


def _t(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _check_finite(*arrays: np.ndarray, what: str) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericOverflowError(f"non-finite value in {what}")


def _noise_arrays(noise) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(noise, NoiseCov):
        return noise.Q, noise.R
    Q, R = noise
    return np.asarray(Q, dtype=float), np.asarray(R, dtype=float)


def _kalman_gain(P_prior: np.ndarray, H: np.ndarray, S: np.ndarray) -> np.ndarray:
    """``W = P H^T S^-1`` computed as a solve against the symmetric ``S``."""
    HP = H @ P_prior
    try:
        if S.ndim == 2:
            return solve_linear(S, HP).T
        return _t(np.linalg.solve(S, HP))
    except (SingularMatrixError, np.linalg.LinAlgError) as exc:
        raise SingularInnovationCovarianceError(str(exc)) from None


def predict(state: FilterState, model: SystemModel, noise, u=None) -> FilterState:
    """Time update ``x- = F x+ + B u`` and ``P- = F P+ F^T + Gamma Q Gamma^T``."""
    Q, _ = _noise_arrays(noise)
    F, G = model.F, model.Gamma
    x = state.x_post[..., :, None]
    x_prior = F @ x
    if u is not None:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        x_prior = x_prior + model.B @ u[..., :, None]
    P_prior = symmetrize(F @ state.P_post @ F.T + G @ Q @ G.T)
    x_prior = x_prior[..., 0]
    _check_finite(x_prior, P_prior, what="predict")
    return replace(state, x_prior=x_prior, P_prior=P_prior)


def update(state: FilterState, model: SystemModel, noise, z) -> FilterState:
    """Measurement update with Joseph-form covariance."""
    if state.x_prior is None or state.P_prior is None:
        raise ValueError("update() needs a predicted state; call predict() first")
    _, R = _noise_arrays(noise)
    H = model.H
    P = state.P_prior
    z = np.asarray(z, dtype=float)
    nu = z - (H @ state.x_prior[..., :, None])[..., 0]
    S = symmetrize(H @ P @ H.T + R)
    W = _kalman_gain(P, H, S)
    x_post = state.x_prior + (W @ nu[..., :, None])[..., 0]
    A = np.eye(model.n) - W @ H
    P_post = symmetrize(A @ P @ _t(A) + W @ R @ _t(W))
    _check_finite(x_post, P_post, what="update")
    return replace(state, x_post=x_post, P_post=P_post, innovation=nu, S=S, gain=W)


def riccati_step(P_prior, model: SystemModel, Q, R) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One pass of the prior-covariance recursion; returns ``(P_next, W, S)``."""
    H, F, G = model.H, model.F, model.Gamma
    S = symmetrize(H @ P_prior @ H.T + R)
    W = _kalman_gain(P_prior, H, S)
    A = np.eye(model.n) - W @ H
    P_post = symmetrize(A @ P_prior @ _t(A) + W @ R @ _t(W))
    return symmetrize(F @ P_post @ F.T + G @ Q @ G.T), W, S


def steady_state(
    model: SystemModel,
    noise: NoiseCov,
    tol: float = 1e-12,
    max_iter: int = 100_000,
    P0=None,
) -> SteadyStateSolution:
    """Iterate the Riccati recursion from ``P0`` (identity by default).

    Stops once ``max|P_{k+1} - P_k| < tol``. Hitting ``max_iter`` is not an
    error: the solution is returned with ``converged=False``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    P = np.eye(model.n) if P0 is None else as_matrix(P0, "P0")
    converged = False
    it = 0
    while it < max_iter:
        P_next, _, _ = riccati_step(P, model, noise.Q, noise.R)
        it += 1
        _check_finite(P_next, what="steady_state")
        delta = np.max(np.abs(P_next - P))
        P = P_next
        if delta < tol:
            converged = True
            break
    S = symmetrize(model.H @ P @ model.H.T + noise.R)
    return SteadyStateSolution(P, _kalman_gain(P, model.H, S), S, it, converged)


def steady_state_batch(
    model: SystemModel,
    Q: np.ndarray,
    R: np.ndarray,
    rtol: float = 1e-13,
    max_iter: int = 20_000,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised Riccati fixed point for a stack of noise covariances.

    ``Q`` has shape ``(B, q, q)`` and ``R`` shape ``(B, p, p)``. Each member
    is iterated until ``max|dP| <= rtol * max|P|`` and then frozen, so its
    result does not depend on the rest of the batch. Returns
    ``(P_prior, gain, S, converged)``; members that produced non-finite
    values come back with ``converged`` false.
    """
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    batch = Q.shape[0]
    P = np.broadcast_to(np.eye(model.n), (batch, model.n, model.n)).copy()
    GQG = model.Gamma @ Q @ model.Gamma.T
    H, F = model.H, model.F
    eye = np.eye(model.n)
    done = np.zeros(batch, dtype=bool)
    failed = np.zeros(batch, dtype=bool)
    active = np.arange(batch)
    with np.errstate(all="ignore"):
        for _ in range(max_iter):
            if active.size == 0:
                break
            Pa, Ra = P[active], R[active]
            S, W = _batch_gain(Pa, H, Ra)
            A = eye - W @ H
            P_next = symmetrize(F @ (A @ Pa @ _t(A) + W @ Ra @ _t(W)) @ F.T + GQG[active])
            delta = np.max(np.abs(P_next - Pa), axis=(1, 2))
            scale = np.max(np.abs(P_next), axis=(1, 2))
            P[active] = P_next
            finished = delta <= rtol * scale
            bad = ~np.isfinite(delta)
            done[active[finished]] = True
            failed[active[bad]] = True
            active = active[~(finished | bad)]
        S, W = _batch_gain(P, H, R)
    ok = done & ~failed & np.all(np.isfinite(P), axis=(1, 2))
    return P, W, S, ok


def _batch_gain(P: np.ndarray, H: np.ndarray, R: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    S = symmetrize(H @ P @ H.T + R)
    if S.shape[-1] == 1:
        return S, (P @ H.T) / S
    return S, _t(np.linalg.solve(S, H @ P))


def fixed_gain_covariance(
    model: SystemModel, noise: NoiseCov, gain, tol: float = 1e-14, max_iter: int = 100_000
) -> np.ndarray:
    """Stationary prior error covariance of a filter run with a fixed, possibly suboptimal, gain.

    Iterates the Joseph-form recursion with ``gain`` held constant; raises
    :class:`NumericOverflowError` if the closed loop is unstable.
    """
    W = as_matrix(gain, "gain")
    A = np.eye(model.n) - W @ model.H
    drive = W @ noise.R @ W.T
    GQG = model.Gamma @ noise.Q @ model.Gamma.T
    P = np.zeros((model.n, model.n))
    for _ in range(max_iter):
        P_next = symmetrize(model.F @ (A @ P @ A.T + drive) @ model.F.T + GQG)
        _check_finite(P_next, what="fixed_gain_covariance")
        delta = np.max(np.abs(P_next - P))
        P = P_next
        if delta <= tol * max(np.max(np.abs(P)), 1e-300):
            return P
    raise NumericOverflowError("fixed-gain covariance did not converge; closed loop may be unstable")


def closed_loop(model: SystemModel, gain) -> np.ndarray:
    """``F (I - W H)``, the prior-error transition under a fixed gain."""
    return model.F @ (np.eye(model.n) - as_matrix(gain, "gain") @ model.H)


def recursive_error_expand(model: SystemModel, gain, w, v, initial_error) -> np.ndarray:
    """Prior error after ``m`` fixed-gain steps, written as noise sums.

    ``w`` (shape ``(m, q)``) and ``v`` (shape ``(m, p)``) are in
    chronological order, i.e. ``w[0]`` is the oldest process noise. The
    result is::

        A^m e0 - sum_j A^(j-1) F W v[k-j] + sum_j A^(j-1) Gamma w[k-j]

    with ``A = F (I - W H)`` and ``j = 1..m``.
    """
    W = as_matrix(gain, "gain")
    if W.shape != (model.n, model.p):
        raise DimensionError(f"gain must be {model.n}x{model.p}, got {W.shape}")
    w = np.asarray(w, dtype=float).reshape(-1, model.q) if np.size(w) else np.zeros((0, model.q))
    v = np.asarray(v, dtype=float).reshape(-1, model.p) if np.size(v) else np.zeros((0, model.p))
    if w.shape[0] != v.shape[0]:
        raise DimensionError(f"noise sequences differ in length: {w.shape[0]} vs {v.shape[0]}")
    e0 = np.asarray(initial_error, dtype=float)
    if e0.shape != (model.n,):
        raise DimensionError(f"initial_error must have length {model.n}")
    m = w.shape[0]
    A = closed_loop(model, W)
    FW = model.F @ W
    total = np.linalg.matrix_power(A, m) @ e0
    power = np.eye(model.n)
    for j in range(1, m + 1):
        total = total - power @ FW @ v[m - j] + power @ model.Gamma @ w[m - j]
        power = power @ A
    return total


def run_fixed_gain(model: SystemModel, gain, z, u=None, x0=None) -> tuple[np.ndarray, np.ndarray]:
    """Steady-state filter pass over a measurement record.

    Step ``k`` forms the prior from the previous posterior with input
    ``u[k-1]`` (the initial prior is ``x0``, zero by default), then updates
    with ``z[k]``. Returns the innovations ``(N, p)`` and posteriors ``(N, n)``.
    """
    W = as_matrix(gain, "gain")
    z = np.asarray(z, dtype=float).reshape(len(z), -1)
    N = z.shape[0]
    u = np.zeros((N, model.B.shape[1])) if u is None else np.asarray(u, dtype=float).reshape(N, -1)
    x_prior = np.zeros(model.n) if x0 is None else np.asarray(x0, dtype=float)
    F, B, H = model.F, model.B, model.H
    nus = np.empty((N, model.p))
    posts = np.empty((N, model.n))
    for k in range(N):
        nu = z[k] - H @ x_prior
        x_post = x_prior + W @ nu
        nus[k] = nu
        posts[k] = x_post
        x_prior = F @ x_post + B @ u[k]
    _check_finite(posts, what="run_fixed_gain")
    return nus, posts
