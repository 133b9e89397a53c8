import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kfnoise.errors import DimensionError, IncompatibleWeightsError, NumericOverflowError
from kfnoise.numerics import RandomSource
from kfnoise.predictor import (
    AdamState,
    PredictorInput,
    TENSOR_ORDER,
    adam_step,
    assemble_features,
    backward,
    backward_batch,
    expected_shapes,
    fit_normalization,
    forward,
    forward_batch,
    init,
    load,
    save,
    zeros,
)


def random_input(rng: RandomSource, m: int) -> PredictorInput:
    window = np.column_stack([rng.normal(m), 0.04 * rng.normal(m)])
    return PredictorInput(window, rng.uniform(3, 1e-8, 1e-3))


def numeric_gradients(params, inp, out_grad, step=1e-5):
    grads = {}
    for name in TENSOR_ORDER:
        tensor = params.tensors[name]
        g = np.zeros_like(tensor)
        for idx in np.ndindex(tensor.shape):
            old = tensor[idx]
            tensor[idx] = old + step
            up = forward(params, inp)[0] @ out_grad
            tensor[idx] = old - step
            down = forward(params, inp)[0] @ out_grad
            tensor[idx] = old
            g[idx] = (up - down) / (2 * step)
        grads[name] = g
    return grads


def rel_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


def test_input_validation():
    with pytest.raises(DimensionError):
        PredictorInput(np.zeros((10, 3)), np.zeros(3))
    with pytest.raises(DimensionError):
        PredictorInput(np.zeros((10, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        PredictorInput(np.full((10, 2), np.nan), np.zeros(3))


def test_features_broadcast_previous_labels():
    f = assemble_features(np.ones((2, 4)), 2 * np.ones((2, 4)), np.array([[1, 2, 3], [4, 5, 6.0]]))
    assert f.shape == (2, 4, 5)
    np.testing.assert_array_equal(f[1, 3], [1, 2, 4, 5, 6])


def test_zero_weights_give_midpoint():
    out, _ = forward(zeros(8), random_input(RandomSource(1), 12))
    np.testing.assert_array_equal(out, [5e-4, 5e-4, 5e-4])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.1, 1e4))
def test_outputs_inside_open_bound(seed, scale):
    rng = RandomSource(seed)
    params = init(rng, 6)
    for name in ("W_fc", "b_fc"):
        params.tensors[name] *= scale
    out, _ = forward(params, random_input(rng, 8))
    assert np.all(out > 0) and np.all(out < 1e-3)


def test_forward_deterministic_and_pure():
    params = init(RandomSource(3), 8)
    inp = random_input(RandomSource(4), 10)
    a, _ = forward(params, inp)
    b, _ = forward(params, inp)
    assert a.tobytes() == b.tobytes()
    batch, _ = forward_batch(params, np.stack([inp.features(), inp.features()]))
    np.testing.assert_allclose(batch[0], a, rtol=1e-14)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_forward_reports_overflow_step():
    params = init(RandomSource(3), 4)
    params.tensors["W_x"][:] = np.inf
    with pytest.raises(NumericOverflowError, match="step 0"):
        forward(params, random_input(RandomSource(4), 5))


def test_backward_zero_output_grad():
    params = init(RandomSource(5), 8)
    _, cache = forward(params, random_input(RandomSource(6), 10))
    for g in backward(params, cache, np.zeros(3)).values():
        assert not np.any(g)


@pytest.mark.parametrize("seed", [10, 11, 12])
def test_bptt_matches_finite_differences(seed):
    rng = RandomSource(seed)
    params = init(rng, 8)
    params.tensors["b"][:] = rng.uniform(32, -0.5, 0.5)
    params.tensors["b_fc"][:] = rng.uniform(3, -0.5, 0.5)
    inp = random_input(rng, 10)
    out_grad = rng.normal(3)
    _, cache = forward(params, inp)
    analytic = backward(params, cache, out_grad)
    numeric = numeric_gradients(params, inp, out_grad)
    for name in TENSOR_ORDER:
        assert rel_error(analytic[name], numeric[name]) <= 1e-4, name


def test_every_gate_bias_receives_gradient():
    params = init(RandomSource(7), 8)
    _, cache = forward(params, random_input(RandomSource(8), 10))
    gb = backward(params, cache, np.ones(3))["b"].reshape(4, 8)
    for gate in range(4):
        assert np.any(gb[gate] != 0)


def test_backward_batch_is_sum_of_singles():
    params = init(RandomSource(9), 6)
    rng = RandomSource(10)
    inputs = [random_input(rng, 7) for _ in range(3)]
    grads_out = rng.normal(9).reshape(3, 3)
    _, cache = forward_batch(params, np.stack([i.features() for i in inputs]))
    batch = backward_batch(params, cache, grads_out)
    for name in TENSOR_ORDER:
        total = sum(backward(params, forward(params, inputs[k])[1], grads_out[k])[name] for k in range(3))
        np.testing.assert_allclose(batch[name], total, rtol=1e-10, atol=1e-18)


def test_backward_rejects_mismatch():
    params = init(RandomSource(9), 6)
    _, cache = forward(params, random_input(RandomSource(1), 5))
    with pytest.raises(DimensionError):
        backward(init(RandomSource(9), 4), cache, np.ones(3))


def test_init_shapes_and_limits():
    params = init(RandomSource(1))
    assert params.hidden == 64
    assert params.W_x.shape == (5, 256) and params.W_h.shape == (64, 256) and params.W_fc.shape == (64, 3)
    for name in ("W_x", "W_h", "W_fc"):
        assert np.max(np.abs(params.tensors[name])) <= 1 / 8
    np.testing.assert_array_equal(params.b[64:128], 1.0)
    assert not np.any(params.b[:64]) and not np.any(params.b[128:]) and not np.any(params.b_fc)
    other = init(RandomSource(1))
    for name in TENSOR_ORDER:
        np.testing.assert_array_equal(params.tensors[name], other.tensors[name])
    assert expected_shapes(3)["b"] == (12,)


def test_fit_normalization_standardizes_signal_channels():
    rng = RandomSource(2)
    y = 3 + 2 * rng.normal(400).reshape(4, 100)
    nu = 0.1 * rng.normal(400).reshape(4, 100)
    offset, scale = fit_normalization(assemble_features(y, nu, np.full((4, 3), 5e-4)))
    assert offset[0] == pytest.approx(y.mean()) and scale[0] == pytest.approx(1 / y.std())
    assert scale[1] == pytest.approx(1 / nu.std())
    np.testing.assert_allclose(offset[2:], 5e-4)


def test_adam_first_step_and_zero_grad():
    params = {"w": np.array([1.0, -2.0])}
    state = AdamState.zeros_like(params)
    new, state1 = adam_step(params, {"w": np.array([0.3, -7.0])}, state, lr=1e-4)
    np.testing.assert_allclose(new["w"] - params["w"], [-1e-4, 1e-4], atol=1e-6 * 1e-4 + 1e-12)
    same, state2 = adam_step(new, {"w": np.zeros(2)}, AdamState.zeros_like(new), lr=1e-4)
    np.testing.assert_array_equal(same["w"], new["w"])
    assert state2.step == 1 and state1.step == 1
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])


def test_adam_quadratic():
    params = {"w": np.array([0.0])}
    state = AdamState.zeros_like(params)
    for _ in range(100):
        params, state = adam_step(params, {"w": params["w"] - 3.0}, state, lr=0.1)
    assert abs(params["w"][0] - 3.0) <= 0.5


def test_adam_rejects_mismatch():
    with pytest.raises(DimensionError):
        adam_step({"w": np.zeros(2)}, {"v": np.zeros(2)}, AdamState.zeros_like({"w": np.zeros(2)}))


def test_save_load_round_trip(tmp_path):
    params = init(RandomSource(4), 8, input_scale=[2, 3, 4, 5, 6], input_offset=[1, 0, 0, 0, 1])
    save(params, tmp_path / "a.kfnw", meta={"variant": "L2"})
    loaded, meta = load(tmp_path / "a.kfnw", with_meta=True)
    assert meta == {"variant": "L2"}
    save(loaded, tmp_path / "b.kfnw", meta={"variant": "L2"})
    assert (tmp_path / "a.kfnw").read_bytes() == (tmp_path / "b.kfnw").read_bytes()
    inp = random_input(RandomSource(5), 10)
    assert forward(params, inp)[0].tobytes() == forward(loaded, inp)[0].tobytes()


def test_load_rejects_bad_files(tmp_path):
    save(init(RandomSource(4), 4), tmp_path / "w.kfnw")
    raw = (tmp_path / "w.kfnw").read_bytes()
    (tmp_path / "t.kfnw").write_bytes(raw[:-16])
    with pytest.raises(IncompatibleWeightsError):
        load(tmp_path / "t.kfnw")
    (tmp_path / "v.kfnw").write_bytes(raw.replace(b'"version":1', b'"version":9'))
    with pytest.raises(IncompatibleWeightsError):
        load(tmp_path / "v.kfnw")
    (tmp_path / "x.kfnw").write_bytes(b"junk")
    with pytest.raises(IncompatibleWeightsError):
        load(tmp_path / "x.kfnw")
