"""
File for testing the ``net.py`` module.
"""
import json
import os

import numpy as np
import pytest

import net
from errors import CheckpointNotFoundError, EmptyInputError, FormatError
from targets import HEAD_ORDER, HEADS

TINY = (4, 5, 6)


def tiny_model(heads=HEAD_ORDER, dropout=0.0):
    return net.MultiHeadNet(net.PointMlpEncoder(TINY), heads, hidden=(5, 4), dropout=dropout)


def random_inputs(count, n=7, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.normal(scale=0.3, size=(n + k, net.INPUT_CHANNELS)) for k in range(count)]


def numeric_grad(f, params, name, h=1e-5):
    p = params[name]
    grad = np.zeros_like(p)
    for index in np.ndindex(p.shape):
        old = p[index]
        p[index] = old + h
        up = f()
        p[index] = old - h
        down = f()
        p[index] = old
        grad[index] = (up - down) / (2 * h)
    return grad


### input ###

def test_prepare_input():
    points = np.array([[0.0, 0.0, 0.0], [1000.0, 2000.0, 3000.0]])
    x = net.prepare_input(points)
    assert x.shape == (2, 6)
    assert np.allclose(x[:, :3], [[-0.5, -1.0, -1.5], [0.5, 1.0, 1.5]])
    assert np.array_equal(x[:, :3], x[:, 3:])


def test_prepare_input_empty():
    with pytest.raises(EmptyInputError):
        net.prepare_input(np.zeros((0, 3)))


### layers ###

def test_gelu_values():
    assert net.gelu(np.array([0.0]))[0] == 0.0
    assert net.gelu(np.array([10.0]))[0] == pytest.approx(10.0)
    assert net.gelu(np.array([-10.0]))[0] == pytest.approx(0.0, abs=1e-12)
    x = np.linspace(-4, 4, 33)
    h = 1e-6
    assert np.allclose(net.gelu_grad(x), (net.gelu(x + h) - net.gelu(x - h)) / (2 * h), atol=1e-7)


def test_layer_norm_statistics():
    x = np.random.default_rng(1).normal(loc=3.0, scale=5.0, size=(4, 32))
    y, _ = net.layer_norm(x, np.ones(32), np.zeros(32))
    assert np.allclose(y.mean(axis=1), 0.0, atol=1e-12)
    assert np.allclose(y.std(axis=1), 1.0, atol=1e-4)


def test_init_linear():
    W, b = net.init_linear(np.random.default_rng(2), 512, 256)
    assert W.shape == (512, 256)
    assert np.array_equal(b, np.zeros(256))
    assert W.var() == pytest.approx(1 / 512, rel=0.02)
    assert np.abs(W).max() <= np.sqrt(3 / 512)


def test_init_deterministic():
    model = net.MultiHeadNet(net.PointMlpEncoder(net.DESK_DIMS))
    a = model.init_params(np.random.default_rng(3))
    b = model.init_params(np.random.default_rng(3))
    assert list(a) == list(b)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert list(a)[0].startswith("encoder.0")
    assert all(np.array_equal(p, np.ones_like(p)) for k, p in a.items() if k.endswith(".gamma"))
    assert all(np.array_equal(p, np.zeros_like(p)) for k, p in a.items() if k.endswith(".b"))


### encoder ###

def test_encoder_permutation_invariant():
    encoder = net.PointMlpEncoder(net.DESK_DIMS)
    params = encoder.init_params(np.random.default_rng(4))
    x = random_inputs(1, n=200)[0]
    perm = np.random.default_rng(5).permutation(len(x))
    a, _ = encoder.forward(params, x)
    b, _ = encoder.forward(params, x[perm])
    assert a.shape == (net.DESK_DIMS[-1],)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-14)


def test_encoder_repeated_points():
    encoder = net.PointMlpEncoder(net.DESK_DIMS)
    params = encoder.init_params(np.random.default_rng(6))
    x = random_inputs(1, n=50)[0]
    a, _ = encoder.forward(params, x)
    b, _ = encoder.forward(params, np.vstack([x, x[:10]]))
    assert np.allclose(a, b, rtol=1e-12, atol=1e-14)


def test_encode_single_point():
    encoder = net.PointMlpEncoder(TINY)
    params = encoder.init_params(np.random.default_rng(7))
    feature = net.encode(encoder, params, np.array([[1.0, 2.0, 3.0]]))
    assert feature.shape == (TINY[-1],)
    assert np.all(np.isfinite(feature))


@pytest.mark.parametrize("dims", [(), (4, 0, 2)])
def test_bad_encoder_dims(dims):
    with pytest.raises(ValueError):
        net.PointMlpEncoder(dims)


def test_encoder_registry():
    assert net.ENCODERS["point_mlp"] is net.PointMlpEncoder


### heads and model ###

def test_output_shapes():
    model = tiny_model()
    params = model.init_params(np.random.default_rng(8))
    outputs, _ = model.forward(params, random_inputs(3))
    assert {name: out.shape for name, out in outputs.items()} == {"H": (3, 1), "A": (3, 3), "BC": (3, 6)}


def test_zero_output_layer():
    model = tiny_model()
    params = model.init_params(np.random.default_rng(9))
    for name in HEAD_ORDER:
        params[f"head.{name}.out.W"][:] = 0.0
        params[f"head.{name}.out.b"][:] = 0.0
    outputs, _ = model.forward(params, random_inputs(2))
    assert all(np.array_equal(out, np.zeros_like(out)) for out in outputs.values())


def test_eval_mode_deterministic():
    model = tiny_model(dropout=0.5)
    params = model.init_params(np.random.default_rng(10))
    inputs = random_inputs(2)
    a, _ = model.forward(params, inputs)
    b, _ = model.forward(params, inputs, rng=np.random.default_rng(99))
    assert all(np.array_equal(a[h], b[h]) for h in HEAD_ORDER)

    c, _ = model.forward(params, inputs, train=True, rng=np.random.default_rng(1))
    d, _ = model.forward(params, inputs, train=True, rng=np.random.default_rng(2))
    assert any(not np.array_equal(c[h], d[h]) for h in HEAD_ORDER)


def test_dropout_streams_per_head():
    full = tiny_model(dropout=0.5)
    params = full.init_params(np.random.default_rng(11))
    only = tiny_model(heads=("H", "BC"), dropout=0.5)
    sub = {k: p for k, p in params.items() if not k.startswith("head.A.")}
    inputs = random_inputs(2)
    a, _ = full.forward(params, inputs, train=True, rng=np.random.default_rng(5))
    b, _ = only.forward(sub, inputs, train=True, rng=np.random.default_rng(5))
    assert np.array_equal(a["BC"], b["BC"])
    assert np.array_equal(a["H"], b["H"])


def test_predict_layout():
    model = tiny_model(heads=("A",))
    params = model.init_params(np.random.default_rng(12))
    pred = model.predict(params, random_inputs(2))
    assert pred.shape == (2, 10)
    assert np.all(np.isnan(pred[:, [0, 4, 5, 6, 7, 8, 9]]))
    assert np.all(np.isfinite(pred[:, list(HEADS["A"].targets)]))


def test_bad_heads():
    with pytest.raises(ValueError):
        tiny_model(heads=())
    with pytest.raises(ValueError):
        tiny_model(heads=("X",))


### gradients ###

def test_gradients_match_finite_differences():
    model = tiny_model()
    params = model.init_params(np.random.default_rng(13))
    inputs = random_inputs(2)
    rng = np.random.default_rng(14)
    coef = {h: rng.normal(size=(2, HEADS[h].output_dim)) for h in HEAD_ORDER}

    def objective():
        outputs, _ = model.forward(params, inputs)
        return sum(float(np.sum(coef[h] * outputs[h])) for h in HEAD_ORDER)

    _, cache = model.forward(params, inputs)
    grads = model.backward(params, cache, coef)
    for name in params:
        assert np.allclose(grads[name], numeric_grad(objective, params, name), rtol=1e-4, atol=1e-7), name


def test_missing_head_gradient_is_zero():
    model = tiny_model()
    params = model.init_params(np.random.default_rng(15))
    inputs = random_inputs(2)
    _, cache = model.forward(params, inputs)
    grads = model.backward(params, cache, {"H": np.ones((2, 1))})
    for name, g in grads.items():
        if name.startswith("head.A.") or name.startswith("head.BC."):
            assert np.array_equal(g, np.zeros_like(g)), name
    assert any(np.any(g != 0) for name, g in grads.items() if name.startswith("encoder."))


### checkpoints ###

def test_checkpoint_round_trip(tmp_path):
    model = tiny_model(heads=("H", "BC"))
    params = model.init_params(np.random.default_rng(16))
    net.save_checkpoint(str(tmp_path / "a"), model, params, seed=3)
    loaded, loaded_params, manifest = net.load_checkpoint(str(tmp_path / "a"))

    assert manifest["seed"] == 3
    assert loaded.head_names == ("H", "BC")
    assert loaded.describe() == model.describe()
    assert all(np.array_equal(params[k], loaded_params[k]) for k in params)

    net.save_checkpoint(str(tmp_path / "b"), loaded, loaded_params, seed=3)
    for name in (net.MANIFEST_FILE, net.PARAMS_FILE):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    inputs = random_inputs(2)
    assert np.array_equal(model.predict(params, inputs), loaded.predict(loaded_params, inputs), equal_nan=True)


def test_checkpoint_not_found(tmp_path):
    with pytest.raises(CheckpointNotFoundError):
        net.load_checkpoint(str(tmp_path / "missing"))


def test_checkpoint_truncated(tmp_path):
    model = tiny_model()
    net.save_checkpoint(str(tmp_path), model, model.init_params(np.random.default_rng(17)))
    path = tmp_path / net.PARAMS_FILE
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(FormatError):
        net.load_checkpoint(str(tmp_path))


@pytest.mark.parametrize("key, value", [
    ("format", 99),
    ("targets", ["height"]),
    ("architecture", {"encoder": {"name": "unknown"}}),
])
def test_checkpoint_bad_manifest(tmp_path, key, value):
    model = tiny_model()
    net.save_checkpoint(str(tmp_path), model, model.init_params(np.random.default_rng(18)))
    path = os.path.join(str(tmp_path), net.MANIFEST_FILE)
    with open(path) as f:
        manifest = json.load(f)
    manifest[key] = value
    with open(path, "w") as f:
        json.dump(manifest, f)
    with pytest.raises(FormatError):
        net.load_checkpoint(str(tmp_path))
