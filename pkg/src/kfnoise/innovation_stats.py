"""Innovation-sequence diagnostics.

Covers sample and theoretical lag correlations, the time-averaged
autocorrelation used for whiteness testing, the time-averaged normalized
innovation squared (NIS), and a combined consistency report with 95%
acceptance bounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .errors import (
    DimensionError,
    InsufficientDataError,
    SingularInnovationCovarianceError,
    SingularMatrixError,
    UndefinedStatisticError,
)
from .filter_core import NoiseCov, SystemModel, closed_loop
from .numerics import as_matrix, solve_linear

DEFAULT_M = 5
DEFAULT_LAGS = 20
MIN_WHITENESS_FRACTION = 0.9


@dataclass(frozen=True)
class InnovationSequence:
    """Innovations ``values`` (N x p) with their covariances ``S_values`` (N x p x p)."""

    values: np.ndarray
    S_values: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        object.__setattr__(self, "values", values)
        if self.S_values is not None:
            S = np.asarray(self.S_values, dtype=float)
            if S.ndim == 1:
                S = S[:, None, None]
            if S.shape != (values.shape[0], values.shape[1], values.shape[1]):
                raise DimensionError(f"S_values shape {S.shape} does not match values {values.shape}")
            object.__setattr__(self, "S_values", S)

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]


def _seq(seq) -> InnovationSequence:
    return seq if isinstance(seq, InnovationSequence) else InnovationSequence(seq)


def normal_quantile(prob: float) -> float:
    return NormalDist().inv_cdf(prob)


def chi2_quantile(prob: float, dof: int) -> float:
    """Wilson-Hilferty approximation to the chi-square quantile."""
    if dof <= 0:
        raise ValueError("dof must be positive")
    z = normal_quantile(prob)
    c = 2.0 / (9.0 * dof)
    return dof * (1.0 - c + z * np.sqrt(c)) ** 3


def sample_correlation(seq, M: int) -> list[np.ndarray]:
    """``C_i = 1/(N-M) * sum_{j=1}^{N-M} nu_j nu_{j+i}^T`` for ``i = 0..M-1``."""
    nu = _seq(seq).values
    N = nu.shape[0]
    if M < 1:
        raise ValueError("M must be at least 1")
    if N <= M:
        raise InsufficientDataError(f"need N > M, got N={N}, M={M}")
    count = N - M
    head = nu[:count]
    return [head.T @ nu[i : i + count] / count for i in range(M)]


def theoretical_correlation(
    model: SystemModel, noise: NoiseCov, P_prior, gain, m: int
) -> np.ndarray:
    """Stationary lag-``m`` innovation correlation under a fixed gain.

    ``C_0 = H P H^T + R`` and, for ``m > 0``,
    ``C_m = H A^(m-1) F (P H^T - W C_0)`` with ``A = F (I - W H)``.
    """
    if m < 0:
        raise ValueError("lag must be non-negative")
    P = as_matrix(P_prior, "P_prior")
    W = as_matrix(gain, "gain")
    if P.shape != (model.n, model.n) or W.shape != (model.n, model.p):
        raise DimensionError(f"P {P.shape} / gain {W.shape} do not fit the model")
    H = model.H
    C0 = H @ P @ H.T + noise.R
    if m == 0:
        return C0
    A = closed_loop(model, W)
    return H @ np.linalg.matrix_power(A, m - 1) @ model.F @ (P @ H.T - W @ C0)


def _rho(x: np.ndarray, j: int) -> float:
    a = x[: x.size - j]
    b = x[j:]
    denom = np.sqrt(np.dot(a, a) * np.dot(b, b))
    if denom == 0.0:
        raise UndefinedStatisticError(f"zero-variance window at lag {j}")
    return float(np.dot(a, b) / denom)


def time_avg_autocorrelation(seq, component: int = 0, lags: int = DEFAULT_LAGS) -> np.ndarray:
    """Normalized lag products for ``j = 1..lags`` of one innovation component.

    Both the numerator and the two normalizing sums run over the
    overlapping range ``k = 1..N-j``.
    """
    x = _seq(seq).values[:, component]
    if lags < 1:
        raise ValueError("lags must be at least 1")
    if x.size <= lags:
        raise InsufficientDataError(f"need N > lags, got N={x.size}, lags={lags}")
    return np.array([_rho(x, j) for j in range(1, lags + 1)])


def time_avg_nis(seq) -> float:
    """Mean of ``nu_k^T S_k^-1 nu_k``."""
    seq = _seq(seq)
    if seq.S_values is None:
        raise ValueError("time_avg_nis needs innovation covariances")
    if seq.N < 1:
        raise InsufficientDataError("empty innovation sequence")
    nu, S = seq.values, seq.S_values
    if seq.p == 1:
        s = S[:, 0, 0]
        if np.any(s == 0.0):
            raise SingularInnovationCovarianceError("zero innovation variance")
        return float(np.mean(nu[:, 0] ** 2 / s))
    total = 0.0
    for k in range(seq.N):
        try:
            total += float(nu[k] @ solve_linear(S[k], nu[k]))
        except SingularMatrixError as exc:
            raise SingularInnovationCovarianceError(f"S at step {k}: {exc}") from None
    return total / seq.N


@dataclass
class StatsReport:
    rho_bar: np.ndarray
    eps_bar: float | None
    C_hat: list
    whiteness_pass_fraction: float | None
    nis_in_interval: bool | None
    bounds: dict = field(default_factory=dict)

    @property
    def whiteness_pass(self) -> bool | None:
        if self.whiteness_pass_fraction is None:
            return None
        return self.whiteness_pass_fraction >= MIN_WHITENESS_FRACTION

    def to_json(self) -> dict:
        return {
            "rho_bar": np.asarray(self.rho_bar).tolist(),
            "eps_bar": self.eps_bar,
            "c_hat": [np.asarray(c).tolist() for c in self.C_hat],
            "bounds": self.bounds,
            "flags": {
                "whiteness_pass_fraction": self.whiteness_pass_fraction,
                "whiteness_pass": self.whiteness_pass,
                "nis_in_interval": self.nis_in_interval,
            },
        }


def nis_interval(N: int, p: int, alpha: float = 0.05) -> tuple[float, float]:
    dof = N * p
    return chi2_quantile(alpha / 2, dof) / N, chi2_quantile(1 - alpha / 2, dof) / N


def consistency_report(
    seq, M: int = DEFAULT_M, lags: int = DEFAULT_LAGS, alpha: float = 0.05
) -> StatsReport:
    """Consistency checks of an innovation sequence at significance ``alpha``.

    ``lags=0`` skips the whiteness test and ``M=0`` skips the correlation
    matrices. Without innovation covariances the NIS fields are ``None``.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    seq = _seq(seq)
    N, p = seq.N, seq.p
    eps_bar = time_avg_nis(seq) if seq.S_values is not None else None
    lo, hi = nis_interval(N, p, alpha)
    bounds = {"alpha": alpha, "nis": [lo, hi]}

    C_hat = sample_correlation(seq, M) if M > 0 else []

    if lags > 0:
        rho = np.array([time_avg_autocorrelation(seq, l, lags) for l in range(p)])
        limit = normal_quantile(1 - alpha / 2) / np.sqrt(N)
        bounds["whiteness"] = limit
        fraction = float(np.mean(np.abs(rho) <= limit))
    else:
        rho = np.zeros((p, 0))
        fraction = None
    return StatsReport(
        rho_bar=rho,
        eps_bar=eps_bar,
        C_hat=C_hat,
        whiteness_pass_fraction=fraction,
        nis_in_interval=None if eps_bar is None else bool(lo <= eps_bar <= hi),
        bounds=bounds,
    )
