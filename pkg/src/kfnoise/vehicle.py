"""Single-track (bicycle) lateral dynamics and labelled noise datasets.

States are vehicle slip angle ``beta`` and yaw rate ``psidot``; the only
measurement is the yaw rate. Each simulated trajectory gets its own
randomly drawn process/measurement noise variances, which become the
training labels.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .container import dumps_header, read_container, write_container
from .errors import ConfigurationError, DatasetFormatError, DomainError, UnstableSimulationError
from .filter_core import NoiseCov, SystemModel, run_fixed_gain, steady_state
from .numerics import RandomSource

GRAVITY = 9.81
LABEL_LOW = 1e-8
LABEL_HIGH = 1e-3
MANEUVERS = ("skidpad", "slalom", "fishhook")
DATASET_MAGIC = b"KFND"
DATASET_VERSION = 1


@dataclass(frozen=True)
class VehicleParams:
    m: float = 1500.0
    I_z: float = 2500.0
    a: float = 1.2
    b: float = 1.6
    C_alpha_f: float = 80_000.0
    C_alpha_r: float = 80_000.0
    V: float = 20.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not (value > 0 and math.isfinite(value)):
                raise ConfigurationError(f"vehicle parameter {name} must be positive, got {value}")

    @property
    def wheelbase(self) -> float:
        return self.a + self.b


@dataclass(frozen=True)
class ModelOptions:
    """Switches between the literal printed model and its common variants.

    ``b_over_v`` divides the slip-angle input gain by ``V``.
    ``printed_yaw_damping`` uses ``a^2 Cf - b^2 Cr`` in the yaw-damping
    entry; the default uses the sum, which keeps the reference vehicle
    stable.
    """

    b_over_v: bool = False
    printed_yaw_damping: bool = False


@dataclass(frozen=True)
class ManeuverSpec:
    kind: str = "slalom"
    amplitude: float = 0.05
    frequency: float = 0.5
    duration: float = 11.0
    dt: float = 0.01

    def __post_init__(self):
        if self.kind not in MANEUVERS:
            raise ConfigurationError(f"unknown maneuver {self.kind!r}; expected one of {MANEUVERS}")
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        if self.duration < self.dt:
            raise ConfigurationError("duration must be at least dt")
        if abs(self.amplitude) > 0.5:
            raise ConfigurationError("steering amplitude must lie within +-0.5 rad")

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.dt))


@dataclass(frozen=True)
class NoiseLabels:
    Q_a: float
    Q_b: float
    R: float

    def __post_init__(self):
        for name in ("Q_a", "Q_b", "R"):
            value = getattr(self, name)
            if not 0.0 < value <= LABEL_HIGH:
                raise DomainError(f"label {name}={value} outside (0, {LABEL_HIGH}]")

    def as_array(self) -> np.ndarray:
        return np.array([self.Q_a, self.Q_b, self.R])

    @classmethod
    def from_array(cls, values) -> "NoiseLabels":
        qa, qb, r = (float(v) for v in values)
        return cls(qa, qb, r)

    def noise_cov(self) -> NoiseCov:
        return NoiseCov.diagonal([self.Q_a, self.Q_b], [self.R])


DEFAULT_LABELS = NoiseLabels(5e-4, 5e-4, 5e-4)


@dataclass
class TrajectoryRecord:
    times: np.ndarray
    states: np.ndarray
    steering: np.ndarray
    measurements: np.ndarray
    labels: NoiseLabels
    seed: int
    kind: str = ""
    process_noise: np.ndarray | None = field(default=None, repr=False)
    measurement_noise: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.times.size


def continuous_matrices(
    params: VehicleParams, options: ModelOptions = ModelOptions(), C_f=None, C_r=None
) -> tuple[np.ndarray, np.ndarray]:
    """Linear-tire bicycle model ``xdot = F_c x + B_c delta`` (``Gamma = I``)."""
    m, Iz, a, b, V = params.m, params.I_z, params.a, params.b, params.V
    Cf = params.C_alpha_f if C_f is None else C_f
    Cr = params.C_alpha_r if C_r is None else C_r
    yaw_moment = a * Cf - b * Cr
    yaw_damping = a * a * Cf - b * b * Cr if options.printed_yaw_damping else a * a * Cf + b * b * Cr
    F_c = np.array(
        [
            [-(Cf + Cr) / (m * V), -yaw_moment / (m * V * V)],
            [-yaw_moment / Iz, -yaw_damping / (Iz * V)],
        ]
    )
    B_c = np.array([[Cf / (m * V) if options.b_over_v else Cf / m], [a * Cf / Iz]])
    return F_c, B_c


def discretize(F_c, B_c, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Forward Euler: ``F_d = I + F_c dt``, ``B_d = B_c dt``."""
    if not dt > 0:
        raise ConfigurationError("dt must be positive")
    F_c = np.asarray(F_c, dtype=float)
    return np.eye(F_c.shape[0]) + F_c * dt, np.asarray(B_c, dtype=float) * dt


def system_model(
    params: VehicleParams, dt: float, options: ModelOptions = ModelOptions()
) -> SystemModel:
    F_d, B_d = discretize(*continuous_matrices(params, options), dt)
    return SystemModel(F=F_d, B=B_d, H=np.array([[0.0, 1.0]]), Gamma=np.eye(2))


def steering(spec: ManeuverSpec, t: float) -> float:
    """Steering angle at time ``t``.

    The fishhook ramps to ``+A`` over the first 20% of the run, holds, and
    steps to ``-A`` at 60% of the run.
    """
    if t < 0 or t > spec.duration + 1e-12:
        raise DomainError(f"t={t} outside [0, {spec.duration}]")
    A = spec.amplitude
    if spec.kind == "skidpad":
        return A
    if spec.kind == "slalom":
        return A * math.sin(2.0 * math.pi * spec.frequency * t)
    ramp_end = 0.2 * spec.duration
    if t < ramp_end:
        return A * t / ramp_end
    if t < 0.6 * spec.duration:
        return A
    return -A


def _stiffness_scale(a_y: float, kappa: float) -> float:
    # lateral acceleration saturates at the 1 g friction limit
    ratio = min(abs(a_y) / GRAVITY, 1.0)
    return 1.0 - kappa * ratio * ratio


def simulate(
    params: VehicleParams,
    spec: ManeuverSpec,
    labels: NoiseLabels,
    rng: RandomSource,
    options: ModelOptions = ModelOptions(),
    load_transfer: float = 0.0,
) -> TrajectoryRecord:
    """Noisy rollout from ``x0 = 0``.

    ``x[k+1] = F_d x[k] + B_d delta[k] + w[k]`` with
    ``w ~ N(0, diag(Q_a, Q_b))`` and ``y[k] = psidot[k] + v[k]`` with
    ``v ~ N(0, R)``. A positive ``load_transfer`` scales both axle
    stiffnesses by ``1 - load_transfer * (a_y/g)^2`` each step, a stress
    test plant that differs from the filter model. The lateral acceleration
    is taken quasi-steady, ``a_y = V psidot``, and saturates at 1 g.
    """
    N = spec.steps
    dt = spec.dt
    times = np.arange(N) * dt
    delta = np.array([steering(spec, t) for t in times])
    w = rng.normal(2 * N).reshape(N, 2) * np.sqrt([labels.Q_a, labels.Q_b])
    v = rng.normal(N) * math.sqrt(labels.R)

    F_d, B_d = discretize(*continuous_matrices(params, options), dt)
    f00, f01, f10, f11 = F_d.ravel()
    b0, b1 = B_d.ravel()
    states = np.empty((N, 2))
    beta, r = 0.0, 0.0
    for k in range(N):
        states[k, 0] = beta
        states[k, 1] = r
        if load_transfer:
            a_y = params.V * r
            scale = _stiffness_scale(a_y, load_transfer)
            Fk, Bk = discretize(
                *continuous_matrices(
                    params, options, params.C_alpha_f * scale, params.C_alpha_r * scale
                ),
                dt,
            )
            f00, f01, f10, f11 = Fk.ravel()
            b0, b1 = Bk.ravel()
        d = delta[k]
        beta, r = (
            f00 * beta + f01 * r + b0 * d + w[k, 0],
            f10 * beta + f11 * r + b1 * d + w[k, 1],
        )
        if not (abs(beta) < 1e6 and abs(r) < 1e6):
            raise UnstableSimulationError(f"state left the stable region at step {k}")
    return TrajectoryRecord(
        times=times,
        states=states,
        steering=delta,
        measurements=states[:, 1] + v,
        labels=labels,
        seed=rng.seed,
        kind=spec.kind,
        process_noise=w,
        measurement_noise=v,
    )


def sample_labels(rng: RandomSource) -> NoiseLabels:
    """Three independent variances, uniform on ``(1e-8, 1e-3]``."""
    return NoiseLabels.from_array(rng.uniform(3, LABEL_LOW, LABEL_HIGH))


# --------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class DatasetSpec:
    count: int = 5000
    m: int = 100
    windows_per_trajectory: int = 10
    burn_in: int = 100

    def __post_init__(self):
        if self.count < 1:
            raise ConfigurationError("count must be at least 1")
        if self.m < 2 or self.windows_per_trajectory < 1 or self.burn_in < 0:
            raise ConfigurationError("invalid dataset window settings")

    @property
    def record_length(self) -> int:
        return 2 * self.m + 6

    @property
    def n_trajectories(self) -> int:
        return -(-self.count // self.windows_per_trajectory)


@dataclass
class Dataset:
    """In-memory dataset: windows, previous labels, labels and provenance."""

    y: np.ndarray
    nu: np.ndarray
    prev_labels: np.ndarray
    labels: np.ndarray
    header: dict

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def m(self) -> int:
        return self.y.shape[1]

    @property
    def trajectory_ids(self) -> np.ndarray:
        return np.arange(len(self)) // int(self.header["windows_per_trajectory"])

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.y[index], self.nu[index], self.prev_labels[index], self.labels[index], self.header)

    def records(self) -> np.ndarray:
        return np.hstack([self.y, self.nu, self.prev_labels, self.labels])


def _trajectory_windows(job) -> np.ndarray:
    index, seed, spec, params, options, dspec, load_transfer = job
    rng = RandomSource(seed)
    labels = sample_labels(rng)
    prev = sample_labels(rng)
    traj = simulate(params, spec, labels, rng, options, load_transfer)
    model = system_model(params, spec.dt, options)
    gain = steady_state(model, prev.noise_cov()).gain
    nu, _ = run_fixed_gain(model, gain, traj.measurements, traj.steering)
    needed = dspec.burn_in + dspec.windows_per_trajectory * dspec.m
    if len(traj) < needed:
        raise ConfigurationError(
            f"{spec.kind} trajectory has {len(traj)} steps; windows need {needed}"
        )
    rows = []
    for j in range(dspec.windows_per_trajectory):
        start = dspec.burn_in + j * dspec.m
        stop = start + dspec.m
        rows.append(
            np.concatenate(
                [traj.measurements[start:stop], nu[start:stop, 0], prev.as_array(), labels.as_array()]
            )
        )
    return np.array(rows)


def dataset_manifest(
    dspec: DatasetSpec,
    params: VehicleParams,
    maneuvers: list[ManeuverSpec],
    seed: int,
    options: ModelOptions = ModelOptions(),
    load_transfer: float = 0.0,
) -> dict:
    n_traj = dspec.n_trajectories
    return {
        "format": "kfnoise-dataset",
        "version": DATASET_VERSION,
        "count": dspec.count,
        "m": dspec.m,
        "windows_per_trajectory": dspec.windows_per_trajectory,
        "burn_in": dspec.burn_in,
        "record_length": dspec.record_length,
        "columns": ["y"] * dspec.m + ["nu"] * dspec.m
        + ["qa_prev", "qb_prev", "r_prev", "qa", "qb", "r"],
        "master_seed": int(seed),
        "trajectory_seeds": [int(seed) + i for i in range(n_traj)],
        "trajectory_maneuvers": [maneuvers[i % len(maneuvers)].kind for i in range(n_traj)],
        "maneuvers": [asdict(s) for s in maneuvers],
        "params": asdict(params),
        "model_options": asdict(options),
        "load_transfer": load_transfer,
    }


def generate_dataset(
    dspec: DatasetSpec,
    params: VehicleParams,
    maneuvers: list[ManeuverSpec],
    seed: int,
    path=None,
    options: ModelOptions = ModelOptions(),
    load_transfer: float = 0.0,
    jobs: int = 1,
) -> Dataset:
    """Simulate trajectories round-robin over ``maneuvers`` and cut windows.

    Trajectory ``i`` uses seed ``seed + i`` to draw its labels, the
    "previous estimate" labels that tune the filter producing the stored
    innovations, and its noise. Windows of ``m`` steps start after
    ``burn_in`` steps and do not overlap. When ``path`` is given the
    dataset is also written there.
    """
    if not maneuvers:
        raise ConfigurationError("at least one maneuver is required")
    header = dataset_manifest(dspec, params, maneuvers, seed, options, load_transfer)
    jobs_list = [
        (i, int(seed) + i, maneuvers[i % len(maneuvers)], params, options, dspec, load_transfer)
        for i in range(dspec.n_trajectories)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            blocks = list(pool.map(_trajectory_windows, jobs_list, chunksize=16))
    else:
        blocks = [_trajectory_windows(job) for job in jobs_list]
    records = np.vstack(blocks)[: dspec.count]
    ds = _dataset_from_records(records, header)
    if path is not None:
        write_dataset(ds, path)
    return ds


def _dataset_from_records(records: np.ndarray, header: dict) -> Dataset:
    m = int(header["m"])
    return Dataset(
        y=records[:, :m].copy(),
        nu=records[:, m : 2 * m].copy(),
        prev_labels=records[:, 2 * m : 2 * m + 3].copy(),
        labels=records[:, 2 * m + 3 : 2 * m + 6].copy(),
        header=header,
    )


def write_dataset(ds: Dataset, path) -> None:
    try:
        write_container(path, DATASET_MAGIC, ds.header, ds.records())
    except OSError as exc:
        raise OSError(f"cannot write dataset {path}: {exc}") from exc


def read_dataset(path) -> Dataset:
    header, payload = read_container(path, DATASET_MAGIC, DatasetFormatError)
    if header.get("format") != "kfnoise-dataset" or header.get("version") != DATASET_VERSION:
        raise DatasetFormatError(
            f"{path}: unsupported dataset format {header.get('format')} v{header.get('version')}"
        )
    width = int(header["record_length"])
    count = int(header["count"])
    if payload.size != width * count:
        raise DatasetFormatError(
            f"{path}: expected {count} records of {width} values, found {payload.size} values"
        )
    return _dataset_from_records(payload.reshape(count, width), header)


def export_csv(ds: Dataset, path) -> None:
    m = ds.m
    names = [f"y_{i}" for i in range(m)] + [f"nu_{i}" for i in range(m)]
    names += ["qa_prev", "qb_prev", "r_prev", "qa", "qb", "r"]
    with open(path, "w") as fh:
        fh.write(",".join(names) + "\n")
        for row in ds.records():
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def manifest_hash(header: dict) -> str:
    return hashlib.sha256(dumps_header(header)).hexdigest()


def write_manifest(header: dict, path) -> None:
    Path(path).write_text(json.dumps(header, sort_keys=True, indent=2) + "\n")
