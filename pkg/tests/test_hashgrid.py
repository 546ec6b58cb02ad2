import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from nerfkit.errors import UsageError
from nerfkit.hashgrid import (
    HashGrid, HashGridConfig, corner_weights, encode, encode_backward, encode_backward_directional,
    encode_contributions, encode_with_jacobian, hash_index,
)

from conftest import central_diff, rel_err

SMALL = HashGridConfig(levels=4, features_per_level=2, table_size=2**10, base_resolution=4, max_resolution=32)


def make(cfg=SMALL, seed=0, dtype=np.float64, scale=1.0):
    return HashGrid.create(cfg, rng=seed, dtype=dtype, scale=scale)


def brute_encode(grid, x):
    """Explicit 8-corner trilinear blend using hash_index."""
    cfg = grid.config
    u = (np.asarray(x, float) - cfg.bbox_min) / grid.extent
    u = np.clip(u, 0, 1)
    out = []
    for level, n in enumerate(cfg.resolutions):
        p = u * n
        c = np.minimum(np.floor(p).astype(int), n - 1)
        f = p - c
        acc = np.zeros(cfg.features_per_level)
        for corner in range(8):
            b = np.array([corner & 1, (corner >> 1) & 1, corner >> 2])
            w = np.prod(np.where(b, f, 1 - f))
            row = grid.offsets[level] + hash_index(cfg, level, c + b)
            acc += w * grid.tables[row]
        out.append(acc)
    return np.concatenate(out)


def test_hash_trivial_cells():
    cfg = HashGridConfig(levels=2, table_size=2**4, base_resolution=16, max_resolution=32)
    assert not cfg.level_sizes()[1].any()  # both levels hashed
    for level in range(2):
        assert hash_index(cfg, level, (0, 0, 0)) == 0
        assert hash_index(cfg, level, (1, 0, 0)) == 1 % cfg.table_size
    with pytest.raises(UsageError):
        hash_index(cfg, 2, (0, 0, 0))


def test_hash_chi_square(rng):
    T = 2**14
    cfg = HashGridConfig(levels=1, table_size=T, base_resolution=4096, max_resolution=4096)
    cells = rng.integers(0, 4096, size=(10**6, 3))
    idx = (cells[:, 0] ^ cells[:, 1] * 2654435761 ^ cells[:, 2] * 805459861) & (T - 1)
    # the vectorized formula above must be the same function hash_index computes
    for k in range(50):
        assert hash_index(cfg, 0, cells[k]) == idx[k]
    counts = np.bincount(idx, minlength=T)
    chi2 = ((counts - 10**6 / T) ** 2 / (10**6 / T)).sum()
    lo, hi = stats.chi2.ppf([0.0005, 0.9995], T - 1)
    assert lo <= chi2 <= hi


def test_resolutions_and_dims():
    cfg = HashGridConfig()
    r = cfg.resolutions
    assert r[0] == 16 and r[-1] == 1024 and np.all(np.diff(r) >= 0)
    assert cfg.output_dim == 28
    sizes, dense = cfg.level_sizes()
    assert np.all(sizes <= cfg.table_size) and dense[0] and not dense[-1]
    with pytest.raises(UsageError):
        HashGridConfig(table_size=1000)


def test_vertex_exact():
    g = make()
    n = g.config.resolutions[2]
    cell = np.array([1, 2, 3])
    x = np.array(g.config.bbox_min) + cell / n * g.extent
    row = g.offsets[2] + hash_index(g.config, 2, cell)
    g.tables[row] = (0.3, 0.7)
    np.testing.assert_allclose(encode(g, x)[4:6], (0.3, 0.7), atol=1e-12)


def test_cell_center_equal_corners():
    g = make()
    n = g.config.resolutions[1]
    base = np.array([2, 1, 3])
    for corner in range(8):
        b = np.array([corner & 1, (corner >> 1) & 1, corner >> 2])
        g.tables[g.offsets[1] + hash_index(g.config, 1, base + b)] = (0.25, -1.5)
    x = np.array(g.config.bbox_min) + (base + 0.5) / n * g.extent
    np.testing.assert_allclose(encode(g, x)[2:4], (0.25, -1.5), atol=1e-12)


def test_matches_bruteforce(rng):
    g = make(HashGridConfig(levels=5, table_size=2**8, base_resolution=3, max_resolution=40))
    x = rng.uniform(-1, 1, size=(50, 3))
    got = encode(g, x)
    for k in range(len(x)):
        np.testing.assert_allclose(got[k], brute_encode(g, x[k]), atol=1e-6)


@given(st.lists(st.floats(-1.5, 1.5), min_size=3, max_size=3))
def test_weights_convex(p):
    g = make()
    _, w = corner_weights(g, np.array(p))
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)


@given(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3))
def test_total_on_r3(p):
    g = make()
    out = encode(g, np.array(p))
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, encode(g, np.clip(p, -1, 1)))


def test_continuity_at_cell_faces(rng):
    g = make()
    for level, n in enumerate(g.config.resolutions):
        h = 1e-6 * 2.0 / n
        for _ in range(20):
            x = rng.uniform(-0.9, 0.9, 3)
            axis = rng.integers(3)
            x[axis] = -1 + 2.0 * rng.integers(1, n) / n
            a = encode(g, x - h * np.eye(3)[axis])
            b = encode(g, x + h * np.eye(3)[axis])
            assert np.abs(a - b).max() <= 1e-4


def test_vertex_backward_single_entry():
    g = make()
    cell = np.array([1, 1, 1])
    x = np.array(g.config.bbox_min) + cell / g.config.resolutions[0] * g.extent
    contrib = encode_contributions(g, x, np.ones(g.config.output_dim))
    assert sum(1 for (lvl, _) in contrib if lvl == 0) == 1
    assert encode_contributions(g, x, np.zeros(g.config.output_dim)) == {}


def test_backward_fd(rng):
    g = make()
    x = rng.uniform(-1, 1, size=(6, 3))
    seed = rng.normal(size=(6, g.config.output_dim))
    grad = encode_backward(g, x, seed)
    f = lambda: float(np.sum(seed * encode(g, x)))
    touched = np.flatnonzero(np.abs(grad.reshape(-1)) > 1e-6)
    for k in rng.choice(touched, 40, replace=False):
        fd = central_diff(f, g.tables, k, 1e-3)  # f is linear in the tables
        assert rel_err(fd, grad.reshape(-1)[k]) <= 1e-4


def test_backward_float32_matches_float64(rng):
    g64 = make()
    g32 = HashGrid(g64.config, g64.tables.astype(np.float32))
    x = rng.uniform(-1, 1, size=(100, 3))
    seed = rng.normal(size=(100, g64.config.output_dim))
    np.testing.assert_allclose(encode_backward(g32, x, seed), encode_backward(g64, x, seed), atol=1e-4)


def test_vjp_identity(rng):
    g = make()
    x = rng.uniform(-1, 1, size=(10, 3))
    seed = rng.normal(size=(10, g.config.output_dim))
    dt = rng.normal(size=g.tables.shape)
    grad = encode_backward(g, x, seed)
    base = encode(g, x)
    g2 = HashGrid(g.config, g.tables + 1e-3 * dt)
    fd = np.sum(seed * (encode(g2, x) - base)) / 1e-3
    assert rel_err(fd, np.sum(grad * dt)) <= 1e-4


def test_jacobian_fd(rng):
    g = make()
    x = rng.uniform(-0.95, 0.95, size=(20, 3))
    _, J = encode_with_jacobian(g, x)
    h = 1e-7
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        fd = (encode(g, x + e) - encode(g, x - e)) / (2 * h)
        np.testing.assert_allclose(J[..., a], fd, atol=1e-4 * np.abs(fd).max())


def test_directional_backward_fd(rng):
    g = make()
    x = rng.uniform(-0.95, 0.95, size=(5, 3))
    v = rng.normal(size=(5, 3))
    seed = rng.normal(size=(5, g.config.output_dim))

    def f():
        _, J = encode_with_jacobian(g, x)
        return float(np.einsum("sf,sfa,sa->", seed, J, v))

    grad = encode_backward_directional(g, x, v, seed)
    touched = np.flatnonzero(np.abs(grad.reshape(-1)) > 1e-6)
    for k in rng.choice(touched, 30, replace=False):
        assert rel_err(central_diff(f, g.tables, k, 1e-3), grad.reshape(-1)[k]) <= 1e-4


def test_generic_d_matches(rng):
    cfg = HashGridConfig(levels=3, features_per_level=3, table_size=2**9, base_resolution=4, max_resolution=20)
    g = make(cfg)
    x = rng.uniform(-1, 1, size=(20, 3))
    for k in range(5):
        np.testing.assert_allclose(encode(g, x)[k], brute_encode(g, x[k]), atol=1e-9)
