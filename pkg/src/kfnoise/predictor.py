"""LSTM + fully-connected noise predictor, written directly in numpy.

Each window step feeds the LSTM ``[y_j, nu_j, Qa_prev, Qb_prev, R_prev]``
(the previous estimates are repeated at every step). The last hidden state
goes through ReLU, a dense layer and a sigmoid scaled by ``bound``, so
every output lies strictly inside ``(0, bound)``.

Features are standardized with a fixed, non-trainable affine map,
``(x - input_offset) * input_scale``, so raw yaw rates, innovations and
1e-3-sized variances all reach the LSTM at order one. The map is stored
with the weights.

Gate order in the stacked weight matrices is input, forget, cell, output.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .container import read_container, write_container
from .errors import DimensionError, IncompatibleWeightsError, NumericOverflowError
from .numerics import RandomSource

N_FEATURES = 5
N_OUTPUTS = 3
DEFAULT_HIDDEN = 64
DEFAULT_BOUND = 1e-3
# labels are uniform on (0, 1e-3]: mean 5e-4, std 1e-3/sqrt(12)
_LABEL_SCALE = float(np.sqrt(12.0) / 1e-3)
DEFAULT_INPUT_OFFSET = (0.0, 0.0, 5e-4, 5e-4, 5e-4)
DEFAULT_INPUT_SCALE = (1.0, 25.0, _LABEL_SCALE, _LABEL_SCALE, _LABEL_SCALE)
LOGIT_CLIP = 30.0
WEIGHTS_MAGIC = b"KFNW"
WEIGHTS_VERSION = 1
TENSOR_ORDER = ("W_x", "W_h", "b", "W_fc", "b_fc")


@dataclass(frozen=True)
class PredictorInput:
    """One window: ``window`` is ``(m, 2)`` of ``[y, nu]``; ``prev_labels`` has 3 entries."""

    window: np.ndarray
    prev_labels: np.ndarray

    def __post_init__(self):
        window = np.asarray(self.window, dtype=float)
        prev = np.asarray(self.prev_labels, dtype=float).ravel()
        if window.ndim != 2 or window.shape[1] != 2:
            raise DimensionError(f"window must be (m, 2), got {window.shape}")
        if prev.shape != (3,):
            raise DimensionError("prev_labels must have three entries")
        if not (np.all(np.isfinite(window)) and np.all(np.isfinite(prev))):
            raise ValueError("predictor input has non-finite entries")
        object.__setattr__(self, "window", window)
        object.__setattr__(self, "prev_labels", prev)

    def features(self) -> np.ndarray:
        return assemble_features(self.window[None, :, 0], self.window[None, :, 1], self.prev_labels[None])[0]


def assemble_features(y: np.ndarray, nu: np.ndarray, prev: np.ndarray) -> np.ndarray:
    """Stack windows ``(B, m)`` and previous labels ``(B, 3)`` into ``(B, m, 5)``."""
    y = np.asarray(y, dtype=float)
    nu = np.asarray(nu, dtype=float)
    prev = np.asarray(prev, dtype=float)
    B, m = y.shape
    out = np.empty((B, m, N_FEATURES))
    out[:, :, 0] = y
    out[:, :, 1] = nu
    out[:, :, 2:] = prev[:, None, :]
    return out


@dataclass
class NetworkParams:
    tensors: dict[str, np.ndarray]
    hidden: int
    bound: float = DEFAULT_BOUND
    input_scale: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_INPUT_SCALE))
    input_offset: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_INPUT_OFFSET))

    def __post_init__(self):
        h = self.hidden
        self.input_scale = np.asarray(self.input_scale, dtype=float)
        self.input_offset = np.asarray(self.input_offset, dtype=float)
        expected = expected_shapes(h)
        for name, shape in expected.items():
            if name not in self.tensors:
                raise DimensionError(f"missing tensor {name}")
            if self.tensors[name].shape != shape:
                raise DimensionError(f"{name} has shape {self.tensors[name].shape}, expected {shape}")
        if self.input_scale.shape != (N_FEATURES,) or self.input_offset.shape != (N_FEATURES,):
            raise DimensionError("input normalization must have one entry per feature")

    def __getattr__(self, name):
        tensors = self.__dict__.get("tensors", {})
        if name in tensors:
            return tensors[name]
        raise AttributeError(name)

    def with_tensors(self, tensors: Mapping[str, np.ndarray]) -> "NetworkParams":
        return replace(self, tensors=dict(tensors))

    def copy(self) -> "NetworkParams":
        return self.with_tensors({k: v.copy() for k, v in self.tensors.items()})


def expected_shapes(hidden: int) -> dict[str, tuple[int, ...]]:
    g = 4 * hidden
    return {
        "W_x": (N_FEATURES, g),
        "W_h": (hidden, g),
        "b": (g,),
        "W_fc": (hidden, N_OUTPUTS),
        "b_fc": (N_OUTPUTS,),
    }


def fit_normalization(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Offset/scale that standardize the measurement and innovation channels.

    The previous-label channels keep the analytic moments of the label
    distribution.
    """
    flat = np.asarray(features, dtype=float).reshape(-1, N_FEATURES)
    offset = np.array(DEFAULT_INPUT_OFFSET)
    scale = np.array(DEFAULT_INPUT_SCALE)
    offset[:2] = flat[:, :2].mean(axis=0)
    std = flat[:, :2].std(axis=0)
    scale[:2] = np.where(std > 0, 1.0 / np.where(std > 0, std, 1.0), 1.0)
    return offset, scale


def init(rng: RandomSource, hidden: int = DEFAULT_HIDDEN, bound: float = DEFAULT_BOUND,
         input_scale=DEFAULT_INPUT_SCALE, input_offset=DEFAULT_INPUT_OFFSET) -> NetworkParams:
    """Uniform ``+-1/sqrt(h)`` weights, zero biases except forget-gate bias 1."""
    if hidden < 1:
        raise ValueError("hidden size must be at least 1")
    limit = 1.0 / np.sqrt(hidden)
    tensors = {}
    for name, shape in expected_shapes(hidden).items():
        if name.startswith("W"):
            tensors[name] = rng.uniform(int(np.prod(shape)), -limit, limit).reshape(shape)
        else:
            tensors[name] = np.zeros(shape)
    tensors["b"][hidden : 2 * hidden] = 1.0
    return NetworkParams(tensors, hidden, bound, np.array(input_scale, dtype=float),
                         np.array(input_offset, dtype=float))


def zeros(hidden: int, bound: float = DEFAULT_BOUND) -> NetworkParams:
    tensors = {name: np.zeros(shape) for name, shape in expected_shapes(hidden).items()}
    return NetworkParams(tensors, hidden, bound)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class ForwardCache:
    X: np.ndarray
    gates: np.ndarray
    cells: np.ndarray
    cell_tanh: np.ndarray
    hiddens: np.ndarray
    logits: np.ndarray
    clipped: np.ndarray
    sig: np.ndarray
    hidden: int


def forward_batch(params: NetworkParams, features: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Run ``(B, m, 5)`` unscaled features; returns ``(B, 3)`` outputs and a cache."""
    features = np.asarray(features, dtype=float)
    if features.ndim != 3 or features.shape[2] != N_FEATURES:
        raise DimensionError(f"features must be (B, m, {N_FEATURES}), got {features.shape}")
    X = (features - params.input_offset) * params.input_scale
    B, m, _ = X.shape
    H = params.hidden
    W_x, W_h, b = params.tensors["W_x"], params.tensors["W_h"], params.tensors["b"]
    gates = np.empty((m, B, 4 * H))
    cells = np.empty((m + 1, B, H))
    cell_tanh = np.empty((m, B, H))
    hiddens = np.empty((m + 1, B, H))
    cells[0] = 0.0
    hiddens[0] = 0.0
    proj = X @ W_x + b
    for t in range(m):
        z = proj[:, t] + hiddens[t] @ W_h
        g = gates[t]
        g[:, : 2 * H] = _sigmoid(z[:, : 2 * H])
        g[:, 2 * H : 3 * H] = np.tanh(z[:, 2 * H : 3 * H])
        g[:, 3 * H :] = _sigmoid(z[:, 3 * H :])
        cells[t + 1] = g[:, H : 2 * H] * cells[t] + g[:, :H] * g[:, 2 * H : 3 * H]
        cell_tanh[t] = np.tanh(cells[t + 1])
        hiddens[t + 1] = g[:, 3 * H :] * cell_tanh[t]
        if not np.all(np.isfinite(hiddens[t + 1])):
            raise NumericOverflowError(f"non-finite LSTM activation at step {t}")
    relu = np.maximum(hiddens[m], 0.0)
    logits = relu @ params.tensors["W_fc"] + params.tensors["b_fc"]
    clipped = np.abs(logits) > LOGIT_CLIP
    sig = _sigmoid(np.clip(logits, -LOGIT_CLIP, LOGIT_CLIP))
    out = params.bound * sig
    cache = ForwardCache(X, gates, cells, cell_tanh, hiddens, logits, clipped, sig, H)
    return out, cache


def forward(params: NetworkParams, inp: PredictorInput) -> tuple[np.ndarray, ForwardCache]:
    out, cache = forward_batch(params, inp.features()[None])
    return out[0], cache


def backward_batch(params: NetworkParams, cache: ForwardCache, output_grad: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of ``sum(output_grad * output)`` with respect to every tensor."""
    dy = np.asarray(output_grad, dtype=float)
    if dy.ndim == 1:
        dy = dy[None]
    m, B, _ = cache.gates.shape
    H = cache.hidden
    if H != params.hidden or dy.shape != (B, N_OUTPUTS):
        raise DimensionError("cache does not match parameters or output gradient")
    W_h = params.tensors["W_h"]
    da = dy * params.bound * cache.sig * (1.0 - cache.sig)
    da = np.where(cache.clipped, 0.0, da)
    h_last = cache.hiddens[m]
    relu = np.maximum(h_last, 0.0)
    grads = {
        "W_fc": relu.T @ da,
        "b_fc": da.sum(axis=0),
    }
    dh = (da @ params.tensors["W_fc"].T) * (h_last > 0)
    dc = np.zeros((B, H))
    dZ = np.empty((m, B, 4 * H))
    for t in range(m - 1, -1, -1):
        g = cache.gates[t]
        i, f, c_hat, o = g[:, :H], g[:, H : 2 * H], g[:, 2 * H : 3 * H], g[:, 3 * H :]
        tc = cache.cell_tanh[t]
        dc = dc + dh * o * (1.0 - tc * tc)
        dz = dZ[t]
        dz[:, :H] = dc * c_hat * i * (1.0 - i)
        dz[:, H : 2 * H] = dc * cache.cells[t] * f * (1.0 - f)
        dz[:, 2 * H : 3 * H] = dc * i * (1.0 - c_hat * c_hat)
        dz[:, 3 * H :] = dh * tc * o * (1.0 - o)
        dh = dz @ W_h.T
        dc = dc * f
    flat_z = dZ.transpose(1, 0, 2).reshape(B * m, 4 * H)
    grads["W_x"] = cache.X.reshape(B * m, N_FEATURES).T @ flat_z
    grads["W_h"] = cache.hiddens[:m].transpose(1, 0, 2).reshape(B * m, H).T @ flat_z
    grads["b"] = flat_z.sum(axis=0)
    return grads


def backward(params: NetworkParams, cache: ForwardCache, output_grad) -> dict[str, np.ndarray]:
    return backward_batch(params, cache, np.asarray(output_grad, dtype=float).reshape(1, N_OUTPUTS))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        tensors = params.tensors if isinstance(params, NetworkParams) else params
        return cls({k: np.zeros_like(v) for k, v in tensors.items()},
                   {k: np.zeros_like(v) for k, v in tensors.items()})


def adam_step(params, grads: Mapping[str, np.ndarray], state: AdamState, lr: float = 1e-4):
    """One bias-corrected ADAM update; returns ``(new_params, new_state)``.

    ``params`` may be a :class:`NetworkParams` or a plain name->array dict.
    Inputs are not modified.
    """
    tensors = params.tensors if isinstance(params, NetworkParams) else params
    if set(grads) != set(tensors):
        raise DimensionError("gradient names do not match parameter names")
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    new_tensors, new_m, new_v = {}, {}, {}
    for name, value in tensors.items():
        g = np.asarray(grads[name], dtype=float)
        if g.shape != value.shape:
            raise DimensionError(f"gradient {name} has shape {g.shape}, expected {value.shape}")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        new_tensors[name] = value - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_m[name] = m
        new_v[name] = v
    new_state = replace(state, m=new_m, v=new_v, step=t)
    if isinstance(params, NetworkParams):
        return params.with_tensors(new_tensors), new_state
    return new_tensors, new_state


def save(params: NetworkParams, path, meta: dict | None = None) -> None:
    header = {
        "format": "kfnoise-weights",
        "version": WEIGHTS_VERSION,
        "hidden": params.hidden,
        "features": N_FEATURES,
        "outputs": N_OUTPUTS,
        "bound": params.bound,
        "input_scale": [float(v) for v in params.input_scale],
        "input_offset": [float(v) for v in params.input_offset],
        "tensors": [[name, list(params.tensors[name].shape)] for name in TENSOR_ORDER],
        "meta": meta or {},
    }
    payload = np.concatenate([params.tensors[name].ravel() for name in TENSOR_ORDER])
    write_container(path, WEIGHTS_MAGIC, header, payload)


def load(path, with_meta: bool = False):
    header, payload = read_container(path, WEIGHTS_MAGIC, IncompatibleWeightsError)
    if header.get("format") != "kfnoise-weights" or header.get("version") != WEIGHTS_VERSION:
        raise IncompatibleWeightsError(f"{path}: unsupported weights version {header.get('version')}")
    if header.get("features") != N_FEATURES or header.get("outputs") != N_OUTPUTS:
        raise IncompatibleWeightsError(f"{path}: feature/output sizes do not match this model")
    hidden = int(header["hidden"])
    expected = expected_shapes(hidden)
    tensors = {}
    offset = 0
    for name, shape in header["tensors"]:
        shape = tuple(shape)
        if expected.get(name) != shape:
            raise IncompatibleWeightsError(f"{path}: tensor {name} has shape {shape}")
        size = int(np.prod(shape))
        if offset + size > payload.size:
            raise IncompatibleWeightsError(f"{path}: payload truncated")
        tensors[name] = payload[offset : offset + size].reshape(shape).copy()
        offset += size
    if offset != payload.size or set(tensors) != set(expected):
        raise IncompatibleWeightsError(f"{path}: payload size does not match declared tensors")
    params = NetworkParams(tensors, hidden, float(header["bound"]),
                           np.array(header["input_scale"]), np.array(header["input_offset"]))
    return (params, header.get("meta", {})) if with_meta else params
