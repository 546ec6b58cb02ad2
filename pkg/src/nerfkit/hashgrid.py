"""Multi-resolution hash encoding.

Each level is a regular lattice over the bounding box; a point's feature at
that level is the trilinear blend of the tables rows at the 8 corners of its
cell. Coarse levels whose lattice fits in the table are indexed densely, finer
ones through the XOR-of-primes spatial hash. Levels are concatenated coarse
to fine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _hashkernels as K
from .errors import UsageError

PRIMES = (1, K.PRIME_Y, K.PRIME_Z)


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 14
    features_per_level: int = 2
    table_size: int = 2**19
    base_resolution: int = 16
    max_resolution: int = 1024
    bbox_min: tuple = (-1.0, -1.0, -1.0)
    bbox_max: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.levels < 1 or self.features_per_level < 1:
            raise UsageError("levels and features_per_level must be positive")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise UsageError(f"table_size must be a power of two, got {self.table_size}")
        if not (1 <= self.base_resolution <= self.max_resolution):
            raise UsageError("need 1 <= base_resolution <= max_resolution")
        lo, hi = np.asarray(self.bbox_min, float), np.asarray(self.bbox_max, float)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
            raise UsageError("bounding box must satisfy min < max on every axis")
        object.__setattr__(self, "bbox_min", tuple(float(v) for v in lo))
        object.__setattr__(self, "bbox_max", tuple(float(v) for v in hi))

    @property
    def growth(self) -> float:
        if self.levels == 1:
            return 1.0
        return math.exp(math.log(self.max_resolution / self.base_resolution) / (self.levels - 1))

    @property
    def resolutions(self) -> np.ndarray:
        g = self.growth
        return np.array(
            [int(math.floor(self.base_resolution * g**i + 1e-9)) for i in range(self.levels)],
            dtype=np.int64,
        )

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level

    def level_sizes(self) -> tuple[np.ndarray, np.ndarray]:
        res = self.resolutions
        full = (res + 1) ** 3
        dense = full <= self.table_size
        sizes = np.where(dense, full, self.table_size).astype(np.int64)
        return sizes, dense

    @property
    def n_entries(self) -> int:
        return int(self.level_sizes()[0].sum())

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "features_per_level": self.features_per_level,
            "table_size": self.table_size,
            "base_resolution": self.base_resolution,
            "max_resolution": self.max_resolution,
            "bbox_min": list(self.bbox_min),
            "bbox_max": list(self.bbox_max),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HashGridConfig":
        return cls(
            levels=int(d["levels"]),
            features_per_level=int(d["features_per_level"]),
            table_size=int(d["table_size"]),
            base_resolution=int(d["base_resolution"]),
            max_resolution=int(d["max_resolution"]),
            bbox_min=tuple(d["bbox_min"]),
            bbox_max=tuple(d["bbox_max"]),
        )


@dataclass
class HashGrid:
    """Feature tables for all levels, stored as one (n_entries, d) array.

    `tables` may be a view into a larger parameter vector; rows for level i
    start at `offsets[i]`.
    """

    config: HashGridConfig
    tables: np.ndarray
    _res: np.ndarray = field(init=False, repr=False)
    _offsets: np.ndarray = field(init=False, repr=False)
    _sizes: np.ndarray = field(init=False, repr=False)
    _dense: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        cfg = self.config
        self._res = cfg.resolutions
        self._sizes, self._dense = cfg.level_sizes()
        self._offsets = np.concatenate([[0], np.cumsum(self._sizes)]).astype(np.int64)
        expected = (int(self._offsets[-1]), cfg.features_per_level)
        if self.tables.shape != expected:
            raise UsageError(f"tables shape {self.tables.shape} != {expected}")

    @classmethod
    def create(cls, config: HashGridConfig, rng=None, dtype=np.float32, scale=1e-4) -> "HashGrid":
        rng = np.random.default_rng(rng)
        tables = rng.uniform(-scale, scale, size=(config.n_entries, config.features_per_level))
        return cls(config, tables.astype(dtype))

    @property
    def offsets(self) -> np.ndarray:
        return self._offsets

    @property
    def resolutions(self) -> np.ndarray:
        return self._res

    @property
    def dense_levels(self) -> np.ndarray:
        return self._dense

    @property
    def extent(self) -> np.ndarray:
        cfg = self.config
        return np.subtract(cfg.bbox_max, cfg.bbox_min)

    def to_unit(self, x: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.config.bbox_min)
        u = (np.asarray(x, dtype=np.float64) - lo) / self.extent
        return np.ascontiguousarray(u.reshape(-1, 3))

    def _args(self):
        return self._res, self._offsets, self._sizes, self._dense, self.config.features_per_level


def hash_index(grid_or_config, level: int, cell) -> int:
    """Row of `cell` (integer lattice coords) inside the table of `level`."""
    cfg = grid_or_config.config if isinstance(grid_or_config, HashGrid) else grid_or_config
    if not 0 <= level < cfg.levels:
        raise UsageError(f"level {level} outside [0, {cfg.levels})")
    sizes, dense = cfg.level_sizes()
    n = int(cfg.resolutions[level])
    x, y, z = (int(c) for c in cell)
    if dense[level]:
        side = n + 1
        return x + side * (y + side * z)
    return (x * PRIMES[0] ^ y * PRIMES[1] ^ z * PRIMES[2]) & (int(sizes[level]) - 1)


def encode(grid: HashGrid, x: np.ndarray) -> np.ndarray:
    """Features of world points `x` (..., 3) -> (..., L*d). Points outside the box are clamped."""
    x = np.asarray(x)
    lead = x.shape[:-1]
    u = grid.to_unit(x)
    res, offsets, sizes, dense, d = grid._args()
    out = np.empty((u.shape[0], grid.config.output_dim), dtype=grid.tables.dtype)
    if d == 2:
        K.encode_fwd_d2(u, grid.tables, res, offsets, sizes, dense, out)
    else:
        K.encode_fwd(u, grid.tables, res, offsets, sizes, dense, d, out)
    return out.reshape(*lead, -1)


def encode_with_jacobian(grid: HashGrid, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Features and their Jacobian with respect to world position, (S, L*d, 3)."""
    u = grid.to_unit(x)
    res, offsets, sizes, dense, d = grid._args()
    out = np.empty((u.shape[0], grid.config.output_dim), dtype=grid.tables.dtype)
    jac = np.empty((u.shape[0], grid.config.output_dim, 3), dtype=grid.tables.dtype)
    if d == 2:
        K.encode_jac_d2(u, grid.tables, res, offsets, sizes, dense, out, jac)
    else:
        K.encode_jac(u, grid.tables, res, offsets, sizes, dense, d, out, jac)
    jac /= grid.extent.astype(jac.dtype)
    return out, jac


def encode_backward(grid: HashGrid, x: np.ndarray, grad_features: np.ndarray, out=None) -> np.ndarray:
    """Accumulate d(loss)/d(tables) for a prior `encode(grid, x)`.

    Returns a dense array shaped like `grid.tables` (rows never touched stay
    zero). Accumulation runs serially in point order, so the result is
    bitwise reproducible.
    """
    u = grid.to_unit(x)
    g = np.ascontiguousarray(grad_features, dtype=grid.tables.dtype).reshape(u.shape[0], -1)
    if out is None:
        out = np.zeros_like(grid.tables)
    res, offsets, sizes, dense, d = grid._args()
    if d == 2:
        K.encode_bwd_d2(u, g, res, offsets, sizes, dense, out)
    else:
        K.encode_bwd(u, g, res, offsets, sizes, dense, d, out)
    return out


def encode_backward_directional(grid: HashGrid, x, v, grad_features, out=None) -> np.ndarray:
    """Table gradient of sum_s <grad_s, J_s v_s>, J_s = d(features)/dx at x_s.

    Used for losses that depend on the spatial gradient of the encoding.
    """
    u = grid.to_unit(x)
    vu = np.ascontiguousarray(np.asarray(v, dtype=np.float64).reshape(-1, 3) / grid.extent)
    g = np.ascontiguousarray(grad_features, dtype=grid.tables.dtype).reshape(u.shape[0], -1)
    if out is None:
        out = np.zeros_like(grid.tables)
    res, offsets, sizes, dense, d = grid._args()
    K.encode_bwd_directional(u, vu, g, res, offsets, sizes, dense, d, out)
    return out


def corner_weights(grid: HashGrid, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(rows, weights), each (S, L, 8): the table rows each point reads and their blend weights."""
    u = grid.to_unit(x)
    res, offsets, sizes, dense, _ = grid._args()
    idx = np.empty((u.shape[0], grid.config.levels, 8), dtype=np.int64)
    w = np.empty((u.shape[0], grid.config.levels, 8), dtype=np.float64)
    K.corner_lookup(u, res, offsets, sizes, dense, idx, w)
    return idx, w


def encode_contributions(grid: HashGrid, x, grad_features) -> dict:
    """Sparse form of `encode_backward` for one point: {(level, row): d-vector}."""
    idx, w = corner_weights(grid, np.asarray(x).reshape(1, 3))
    g = np.asarray(grad_features).reshape(grid.config.levels, grid.config.features_per_level)
    out: dict = {}
    for level in range(grid.config.levels):
        base = grid.offsets[level]
        for c in range(8):
            if w[0, level, c] == 0.0 or not np.any(g[level]):
                continue
            key = (level, int(idx[0, level, c] - base))
            out[key] = out.get(key, 0.0) + w[0, level, c] * g[level]
    return out
