import numpy as np
import pytest
from hypothesis import given, strategies as st

from nerfkit.errors import FormatError, ShapeError, TrainingError, UsageError
from nerfkit.tensor import (
    Activation, AdamState, DenseLayer, ParamStore, activate, adam_step, glorot_uniform,
    load_blob, mlp_backward, mlp_forward, save_blob,
)

from conftest import central_diff, rel_err

ALL_ACTS = list(Activation)


def random_net(rng, dims, acts, dtype=np.float64):
    return [
        DenseLayer(rng.normal(size=(o, i)).astype(dtype), rng.normal(size=o).astype(dtype) * 0.1, a)
        for i, o, a in zip(dims[:-1], dims[1:], acts)
    ]


def reference_forward(layers, x):
    # plain per-sample loop, no fused kernels
    out = []
    for row in np.atleast_2d(x):
        a = row.astype(np.float64)
        for l in layers:
            z = l.weights.astype(np.float64) @ a + l.bias
            if l.activation is Activation.RELU:
                a = np.maximum(z, 0)
            elif l.activation is Activation.SIGMOID:
                a = 1 / (1 + np.exp(-z))
            elif l.activation is Activation.TRUNC_SIGMOID:
                a = (1 - np.exp(-z)) / (1 + np.exp(-z))
            elif l.activation is Activation.EXP:
                a = np.exp(z)
            elif l.activation is Activation.SOFTPLUS:
                a = np.log1p(np.exp(z))
            else:
                a = z
        out.append(a)
    return np.array(out)


def test_identity_linear():
    l = DenseLayer(np.eye(2), np.zeros(2), Activation.LINEAR)
    y, _ = mlp_forward([l], np.array([0.3, -0.2]))
    np.testing.assert_array_equal(y, [0.3, -0.2])


def test_zero_weight_relu():
    l = DenseLayer(np.zeros((2, 3)), np.array([1.0, 2.0]), Activation.RELU)
    y, _ = mlp_forward([l], np.array([5.0, -1.0, 2.0]))
    np.testing.assert_array_equal(y, [1.0, 2.0])


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_forward_matches_reference(rng, dtype):
    layers = random_net(rng, [5, 7, 3], [Activation.RELU, Activation.SIGMOID], dtype)
    x = rng.normal(size=(11, 5)).astype(dtype)
    y, _ = mlp_forward(layers, x)
    np.testing.assert_allclose(y, reference_forward(layers, x), atol=1e-6)


def test_shape_errors(rng):
    layers = random_net(rng, [4, 3], [Activation.LINEAR])
    with pytest.raises(ShapeError):
        mlp_forward(layers, np.zeros(5))
    with pytest.raises(ShapeError):
        mlp_forward([], np.zeros(5))
    with pytest.raises(ShapeError):
        DenseLayer(np.zeros((2, 3)), np.zeros(3))
    broken = random_net(rng, [4, 3], [Activation.LINEAR]) + random_net(rng, [2, 2], [Activation.LINEAR])
    with pytest.raises(ShapeError):
        mlp_forward(broken, np.zeros(4))


def test_linear_backward_is_transpose(rng):
    W = rng.normal(size=(3, 4))
    l = DenseLayer(W, np.zeros(3), Activation.LINEAR)
    x = rng.normal(size=4)
    _, cache = mlp_forward([l], x)
    g = rng.normal(size=3)
    gp, gx = mlp_backward([l], cache, g)
    np.testing.assert_allclose(gx, W.T @ g, atol=1e-12)
    np.testing.assert_allclose(gp[:12].reshape(3, 4), np.outer(g, x), atol=1e-12)
    np.testing.assert_allclose(gp[12:], g, atol=1e-12)


def test_zero_cotangent(rng):
    layers = random_net(rng, [4, 6, 2], [Activation.RELU, Activation.SOFTPLUS])
    x = rng.normal(size=(3, 4))
    _, cache = mlp_forward(layers, x)
    gp, gx = mlp_backward(layers, cache, np.zeros((3, 2)))
    assert not np.any(gp) and not np.any(gx)


def test_stale_cache(rng):
    a = random_net(rng, [4, 2], [Activation.LINEAR])
    b = random_net(rng, [4, 2], [Activation.LINEAR])
    _, cache = mlp_forward(a, np.zeros(4))
    with pytest.raises(UsageError):
        mlp_backward(b, cache, np.zeros(2))
    with pytest.raises(UsageError):
        mlp_backward(a, cache, np.zeros(3))


@pytest.mark.parametrize("act", ALL_ACTS)
def test_layer_fd(rng, act):
    """Every activation: parameter and input gradients vs central differences, 64-bit."""
    worst = 0.0
    for trial in range(25):
        layers = random_net(rng, [3, 4], [act])
        x = rng.normal(size=(2, 3))
        seed = rng.normal(size=(2, 4))

        def f():
            return float(np.sum(seed * mlp_forward(layers, x)[0]))

        _, cache = mlp_forward(layers, x)
        gp, gx = mlp_backward(layers, cache, seed)
        checks = [(layers[0].weights, gp[:12]), (layers[0].bias, gp[12:]), (x, gx)]
        for arr, g in checks:
            for k in range(arr.size):
                fd = central_diff(f, arr, k, 1e-6)
                if abs(fd) < 1e-7 and abs(g.reshape(-1)[k]) < 1e-7:
                    continue
                # ReLU kink: skip components sitting within h of z = 0
                worst = max(worst, rel_err(fd, g.reshape(-1)[k]))
    assert worst <= 1e-4, worst


def test_mlp_fd(rng):
    layers = random_net(rng, [5, 8, 8, 3], [Activation.RELU, Activation.RELU, Activation.SIGMOID])
    x = rng.normal(size=(4, 5))
    seed = rng.normal(size=(4, 3))

    def f():
        return float(np.sum(seed * mlp_forward(layers, x)[0]))

    _, cache = mlp_forward(layers, x)
    gp, gx = mlp_backward(layers, cache, seed)
    offs = np.cumsum([0] + [l.size for l in layers])
    errs = []
    for li, l in enumerate(layers):
        flat = np.concatenate([l.weights.ravel(), l.bias])
        for k in rng.choice(flat.size, 10, replace=False):
            arr, kk = (l.weights, k) if k < l.weights.size else (l.bias, k - l.weights.size)
            fd = central_diff(f, arr, kk, 1e-5)
            # floor: components far below the O(1) gradient scale are pure FD round-off
            errs.append(rel_err(fd, gp[offs[li] + k], 1e-6))
    for k in range(x.size):
        errs.append(rel_err(central_diff(f, x, k, 1e-5), gx.reshape(-1)[k], 1e-6))
    assert max(errs) <= 1e-4


def test_forward_pure(rng):
    layers = random_net(rng, [6, 16, 4], [Activation.RELU, Activation.SIGMOID], np.float32)
    x = rng.normal(size=(64, 6)).astype(np.float32)
    a, _ = mlp_forward(layers, x)
    b, _ = mlp_forward(layers, x.copy())
    assert a.tobytes() == b.tobytes()


@given(st.floats(-1e4, 1e4))
def test_activations_finite(z):
    for act in ALL_ACTS:
        assert np.all(np.isfinite(activate(act, np.array([z], dtype=np.float32))))


def test_glorot_bounds(rng):
    W = glorot_uniform(rng, 30, 50)
    assert np.abs(W).max() <= np.sqrt(6 / 80)


def test_adam_zero_grad():
    p = np.array([1.0, -2.0], dtype=np.float32)
    s = AdamState.fresh(2)
    adam_step(s, p, np.zeros(2, dtype=np.float32))
    np.testing.assert_array_equal(p, [1.0, -2.0])
    assert s.t == 1


def test_adam_first_step():
    p = np.array([0.0])
    s = AdamState.fresh(1, np.float64, lr=0.01)
    adam_step(s, p, np.array([5.0]))
    assert p[0] == pytest.approx(-0.01 * 5 / (5 + 1e-8), rel=1e-9)


def test_adam_monotone():
    p = np.array([0.0])
    s = AdamState.fresh(1, np.float64, lr=0.01)
    prev = p[0]
    for _ in range(100):
        adam_step(s, p, np.array([1.0]))
        assert p[0] < prev
        prev = p[0]


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20))
def test_adam_lr_zero_identity(vals):
    g = np.array(vals, dtype=np.float32)
    p = np.linspace(-1, 1, len(vals)).astype(np.float32)
    before = p.copy()
    adam_step(AdamState.fresh(len(vals), lr=0.0), p, g)
    assert p.tobytes() == before.tobytes()


def test_adam_nonfinite_index():
    p = np.zeros(4, dtype=np.float32)
    s = AdamState.fresh(4)
    with pytest.raises(TrainingError) as exc:
        adam_step(s, p, np.array([0, 0, np.nan, 0], dtype=np.float32))
    assert exc.value.index == 2
    assert s.t == 0 and not np.any(p)


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step(AdamState.fresh(3), np.zeros(2, np.float32), np.zeros(2, np.float32))


def test_param_store_layout():
    s = ParamStore()
    s.add("a.W", (3, 2), "mlp")
    s.add("grid", (10,), "grid")
    s.allocate()
    assert s.size == 16
    s.view("a.W")[...] = 1
    assert s.data[:6].sum() == 6 and s.data[6:].sum() == 0
    assert s.group_mask("grid").sum() == 10


def test_blob_roundtrip(tmp_path):
    data = np.arange(10, dtype=np.float32)
    save_blob(tmp_path / "x.bin", data, {"k": 1})
    raw = (tmp_path / "x.bin").read_bytes()
    assert raw[:16] == b"NERFKIT\x00PARAMS\x00\x00" and raw[16] == 1
    meta, back = load_blob(tmp_path / "x.bin")
    assert meta["k"] == 1 and back.tobytes() == data.tobytes()
    (tmp_path / "bad.bin").write_bytes(b"x" * 40)
    with pytest.raises(FormatError):
        load_blob(tmp_path / "bad.bin")
