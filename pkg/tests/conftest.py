import numpy as np
import pytest

from kfnoise.filter_core import NoiseCov, SystemModel
from kfnoise.training import ModelContext
from kfnoise.vehicle import VehicleParams, system_model


@pytest.fixture(scope="session")
def bicycle():
    return system_model(VehicleParams(), 0.01)


@pytest.fixture(scope="session")
def ctx(bicycle):
    return ModelContext(bicycle)


@pytest.fixture
def scalar_model():
    return SystemModel(F=[[1.0]], B=[[0.0]], H=[[1.0]], Gamma=[[1.0]])


def scalar_noise(q=1.0, r=1.0):
    return NoiseCov([[q]], [[r]])


def random_spd(rng: np.random.Generator, n: int) -> np.ndarray:
    M = rng.standard_normal((n, n))
    return M.T @ M + n * np.eye(n)


def simulate_scalar(F, H, Q, R, gain, N, seed):
    """Truth and a fixed-gain filter on a scalar system; returns the innovations."""
    from kfnoise.numerics import RandomSource

    rng = RandomSource(seed)
    w = rng.normal(N) * np.sqrt(Q)
    v = rng.normal(N) * np.sqrt(R)
    x = 0.0
    x_prior = 0.0
    nu = np.empty(N)
    for k in range(N):
        z = H * x + v[k]
        nu[k] = z - H * x_prior
        x_prior = F * (x_prior + gain * nu[k])
        x = F * x + w[k]
    return nu


def slalom_innovations(labels, filter_noise, N=5000, seed=0, burn_in=200):
    """Innovations and their variance from a steady-state filter on a simulated slalom."""
    from kfnoise.filter_core import run_fixed_gain, steady_state
    from kfnoise.numerics import RandomSource
    from kfnoise.vehicle import ManeuverSpec, VehicleParams, simulate, system_model

    params = VehicleParams()
    spec = ManeuverSpec("slalom", duration=(N + burn_in) * 0.01)
    rec = simulate(params, spec, labels, RandomSource(seed))
    model = system_model(params, 0.01)
    sol = steady_state(model, filter_noise)
    nu, _ = run_fixed_gain(model, sol.gain, rec.measurements, rec.steering)
    return nu[burn_in:, 0], float(sol.S[0, 0])


def _dataset(count, m=100, seed=0):
    from kfnoise.vehicle import MANEUVERS, DatasetSpec, ManeuverSpec, generate_dataset

    return generate_dataset(
        DatasetSpec(count=count, m=m), VehicleParams(), [ManeuverSpec(k) for k in MANEUVERS], seed
    )


@pytest.fixture(scope="session")
def small_dataset():
    return _dataset(500)


@pytest.fixture(scope="session")
def desk_dataset():
    return _dataset(5000)
