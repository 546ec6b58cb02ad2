"""Scene representations built on the hash grid.

`DensityField` maps (x, d) to a non-negative density and an RGB color.
`SdfField` maps x to a signed distance, plus the same kind of color head; its
renderer squashes the distance with a sharpness `b` that is itself trained.

Both keep every trainable number in one `ParamStore`, so a field is fully
described by its config plus one flat float32 vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, FormatError, UsageError
from .hashgrid import HashGrid, HashGridConfig, encode, encode_backward, encode_backward_directional, encode_with_jacobian
from .tensor import (
    Activation,
    DenseLayer,
    ParamStore,
    glorot_uniform,
    load_blob,
    mlp_backward,
    mlp_forward,
    save_blob,
    sigmoid,
)

SH_DIM = 16


def sh_encode(d: np.ndarray) -> np.ndarray:
    """Real spherical harmonics up to band 3 (16 values) of unit directions (..., 3)."""
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xy, xz, yz = x * y, x * z, y * z
    x2, y2, z2 = x * x, y * y, z * z
    out = np.empty(d.shape[:-1] + (SH_DIM,), dtype=d.dtype)
    out[..., 0] = 0.28209479177387814
    out[..., 1] = -0.48860251190291987 * y
    out[..., 2] = 0.48860251190291987 * z
    out[..., 3] = -0.48860251190291987 * x
    out[..., 4] = 1.0925484305920792 * xy
    out[..., 5] = -1.0925484305920792 * yz
    out[..., 6] = 0.94617469575755997 * z2 - 0.31539156525251999
    out[..., 7] = -1.0925484305920792 * xz
    out[..., 8] = 0.54627421529603959 * (x2 - y2)
    out[..., 9] = 0.59004358992664352 * y * (-3.0 * x2 + y2)
    out[..., 10] = 2.8906114426405538 * xy * z
    out[..., 11] = 0.45704579946446572 * y * (1.0 - 5.0 * z2)
    out[..., 12] = 0.3731763325901154 * z * (5.0 * z2 - 3.0)
    out[..., 13] = 0.45704579946446572 * x * (1.0 - 5.0 * z2)
    out[..., 14] = 1.4453057213202769 * z * (x2 - y2)
    out[..., 15] = 0.59004358992664352 * x * (3.0 * y2 - x2)
    return out


def truncate_sdf(f, b):
    """(1 - e^{-bf}) / (1 + e^{-bf}), i.e. tanh(bf/2); safe for any |bf|."""
    return np.tanh(0.5 * np.multiply(b, f))


def s_density(f, b):
    """Logistic density b e^{-bf} / (1 + e^{-bf})^2.

    Evaluated on |bf| so the exponent never overflows and the result is
    exactly even in f.
    """
    e = np.exp(-np.abs(np.multiply(b, f)))
    return b * e / (1.0 + e) ** 2


def log_sigmoid(y):
    # log(1 / (1 + e^-y)) without overflow
    return -np.logaddexp(0, -y).astype(np.asarray(y).dtype, copy=False)


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    polar = np.arccos(1.0 - 2.0 * i / n)
    azim = math.pi * (1.0 + 5**0.5) * i
    return np.stack(
        [np.cos(azim) * np.sin(polar), np.sin(azim) * np.sin(polar), np.cos(polar)], axis=1
    )


@dataclass(frozen=True)
class FieldConfig:
    backend: str = "density"
    grid: HashGridConfig = field(default_factory=HashGridConfig)
    geo_features: int = 16
    # hidden widths; the density backend defaults to (64,) for its geometry head
    geo_hidden: tuple = (64,)
    color_hidden: tuple = (64, 64)
    init_b: float = 30.0
    init_radius: float = 0.5
    # sphere-shaped SDF start; off leaves the generic random init
    geometric_init: bool = True

    def __post_init__(self):
        if self.backend not in ("density", "sdf"):
            raise UsageError(f"unknown backend {self.backend!r}")
        object.__setattr__(self, "geo_hidden", tuple(int(w) for w in self.geo_hidden))
        object.__setattr__(self, "color_hidden", tuple(int(w) for w in self.color_hidden))

    @classmethod
    def for_backend(cls, backend: str, grid: HashGridConfig | None = None, **kw) -> "FieldConfig":
        grid = grid or HashGridConfig()
        if backend == "sdf":
            kw.setdefault("geo_hidden", (64, 64))
        return cls(backend=backend, grid=grid, **kw)

    def to_dict(self) -> dict:
        return {
            "backend": self.backend,
            "grid": self.grid.to_dict(),
            "geo_features": self.geo_features,
            "geo_hidden": list(self.geo_hidden),
            "color_hidden": list(self.color_hidden),
            "init_b": self.init_b,
            "init_radius": self.init_radius,
            "geometric_init": self.geometric_init,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        return cls(
            backend=d["backend"],
            grid=HashGridConfig.from_dict(d["grid"]),
            geo_features=int(d["geo_features"]),
            geo_hidden=tuple(d["geo_hidden"]),
            color_hidden=tuple(d["color_hidden"]),
            init_b=float(d["init_b"]),
            init_radius=float(d["init_radius"]),
            geometric_init=bool(d.get("geometric_init", True)),
        )


def _register_mlp(store: ParamStore, prefix: str, dims: list, group: str):
    for i in range(len(dims) - 1):
        store.add(f"{prefix}.{i}.weight", (dims[i + 1], dims[i]), group)
        store.add(f"{prefix}.{i}.bias", (dims[i + 1],), group)


def _bind_mlp(store: ParamStore, prefix: str, dims: list, hidden_act, out_act) -> list:
    layers = []
    for i in range(len(dims) - 1):
        act = out_act if i == len(dims) - 2 else hidden_act
        layers.append(
            DenseLayer(store.view(f"{prefix}.{i}.weight"), store.view(f"{prefix}.{i}.bias"), act)
        )
    return layers


def _head_slice(store: ParamStore, prefix: str) -> slice:
    slots = [s for k, s in store.layout.items() if k.startswith(prefix + ".")]
    start = min(s.offset for s in slots)
    stop = max(s.offset + s.size for s in slots)
    return slice(start, stop)


@dataclass
class GeoCache:
    x: np.ndarray
    h: np.ndarray
    geo_in: np.ndarray
    geo_cache: object
    geo: np.ndarray
    color_cache: object
    extra: dict = field(default_factory=dict)


class _FieldBase:
    backend = ""

    def __init__(self, config: FieldConfig, dtype=np.float32, seed=0):
        self.config = config
        self.dtype = np.dtype(dtype)
        gcfg = config.grid
        store = ParamStore(self.dtype)
        store.add("grid.tables", (gcfg.n_entries, gcfg.features_per_level), "grid")
        self._geo_dims = [self._geo_in_dim(), *config.geo_hidden, config.geo_features]
        self._color_dims = [config.geo_features + SH_DIM, *config.color_hidden, 3]
        _register_mlp(store, "geo", self._geo_dims, "mlp")
        _register_mlp(store, "color", self._color_dims, "mlp")
        self._register_extra(store)
        store.allocate()
        self.store = store
        self.grid = HashGrid(gcfg, store.view("grid.tables"))
        self.geo_head = _bind_mlp(store, "geo", self._geo_dims, Activation.RELU, Activation.LINEAR)
        self.color_head = _bind_mlp(store, "color", self._color_dims, Activation.RELU, Activation.SIGMOID)
        self._geo_slice = _head_slice(store, "geo")
        self._color_slice = _head_slice(store, "color")
        self._grid_slot = store.layout["grid.tables"]
        self.initialize(seed)

    # subclasses override
    def _geo_in_dim(self) -> int:
        return self.config.grid.output_dim

    def _register_extra(self, store):
        pass

    @property
    def params(self) -> np.ndarray:
        return self.store.data

    def initialize(self, seed=0):
        rng = np.random.default_rng(seed)
        self.grid.tables[...] = rng.uniform(-1e-4, 1e-4, size=self.grid.tables.shape)
        for layer in self.geo_head + self.color_head:
            layer.weights[...] = glorot_uniform(rng, layer.out_dim, layer.in_dim)
            layer.bias[...] = 0.0

    def zero_grad(self) -> np.ndarray:
        return np.zeros_like(self.store.data)

    def grid_grad_view(self, grad: np.ndarray) -> np.ndarray:
        return ParamStore.slice_of(self._grid_slot, grad)

    def _geo_input(self, x, h):
        return h

    # -- shared forward pieces ------------------------------------------------

    def _forward_geo(self, x):
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        h = encode(self.grid, x)
        geo_in = self._geo_input(x, h)
        geo, gcache = mlp_forward(self.geo_head, geo_in)
        return x, h, geo_in, geo, gcache

    def _forward_color(self, geo, d):
        d = np.asarray(d, dtype=self.dtype).reshape(-1, 3)
        cin = np.concatenate([geo, sh_encode(d)], axis=1)
        rgb, ccache = mlp_forward(self.color_head, cin)
        return rgb, ccache

    def _color_backward(self, cache: GeoCache, g_rgb, grad):
        gparams, g_cin = mlp_backward(self.color_head, cache.color_cache, g_rgb.astype(self.dtype, copy=False))
        grad[self._color_slice] += gparams
        return g_cin[:, : self.config.geo_features]

    def _geo_backward(self, cache: GeoCache, g_geo, grad):
        gparams, g_in = mlp_backward(self.geo_head, cache.geo_cache, g_geo)
        grad[self._geo_slice] += gparams
        g_h = g_in[:, -self.config.grid.output_dim :]
        encode_backward(self.grid, cache.x, g_h, out=self.grid_grad_view(grad))
        return g_in

    # -- serialization ----------------------------------------------------------

    def metadata(self) -> dict:
        return {
            "kind": "field",
            "backend": self.backend,
            "field_config": self.config.to_dict(),
            "layout": self.store.layout_json(),
            "param_count": self.store.size,
        }

    def save(self, path, extra: dict | None = None) -> None:
        meta = self.metadata()
        if extra:
            meta["extra"] = extra
        save_blob(path, self.store.data, meta)

    def copy(self) -> "_FieldBase":
        other = type(self)(self.config, self.dtype, seed=0)
        other.store.data[...] = self.store.data
        return other

    def astype(self, dtype) -> "_FieldBase":
        other = type(self)(self.config, dtype, seed=0)
        other.store.data[...] = self.store.data
        return other


class DensityField(_FieldBase):
    """Hash grid -> geometry head (density logit + latent) -> color head (latent + SH(d))."""

    backend = "density"

    def forward(self, x, d):
        x, h, geo_in, geo, gcache = self._forward_geo(x)
        sigma = np.logaddexp(0, geo[:, 0]).astype(self.dtype, copy=False)
        rgb, ccache = self._forward_color(geo, d)
        return sigma, rgb, GeoCache(x, h, geo_in, gcache, geo, ccache)

    def backward(self, cache: GeoCache, g_sigma, g_rgb, grad: np.ndarray) -> None:
        g_geo = self._color_backward(cache, g_rgb, grad).copy()
        g_geo[:, 0] += g_sigma * sigmoid(cache.geo[:, 0])
        self._geo_backward(cache, g_geo, grad)

    def density(self, x) -> np.ndarray:
        _, _, _, geo, _ = self._forward_geo(x)
        return np.logaddexp(0, geo[:, 0]).astype(self.dtype, copy=False)

    def density_color(self, x, d):
        sigma, rgb, _ = self.forward(x, d)
        return sigma, rgb


class SdfField(_FieldBase):
    """Hash grid + normalized position -> SDF head (distance + latent) -> color head.

    The position input lets the head start from a sphere-shaped distance field
    (see `initialize`); the grid weights of the first layer start at zero.
    """

    backend = "sdf"

    def _geo_in_dim(self) -> int:
        return 3 + self.config.grid.output_dim

    def _register_extra(self, store):
        store.add("log_b", (1,), "scalar")

    def __init__(self, config: FieldConfig, dtype=np.float32, seed=0):
        gcfg = config.grid
        lo, hi = np.asarray(gcfg.bbox_min), np.asarray(gcfg.bbox_max)
        self.center = 0.5 * (lo + hi)
        self.scale = float(np.max(0.5 * (hi - lo)))
        super().__init__(config, dtype, seed)
        self._logb_slice = slice(self.store.layout["log_b"].offset, self.store.layout["log_b"].offset + 1)

    @property
    def log_b(self) -> np.ndarray:
        return self.store.view("log_b")

    @property
    def b(self) -> float:
        return float(np.exp(self.log_b[0]))

    def initialize(self, seed=0):
        super().initialize(seed)
        self.log_b[...] = math.log(self.config.init_b)
        if not self.config.geometric_init:
            return
        rng = np.random.default_rng(seed + 1)
        layers = self.geo_head
        if any(l.activation not in (Activation.RELU, Activation.LINEAR) for l in layers):
            raise UsageError("geometric init needs a ReLU SDF head")
        first = layers[0]
        width = first.out_dim
        first.weights[...] = 0.0
        first.weights[:, :3] = fibonacci_sphere(width)
        first.bias[...] = 0.0
        scale_in = 1.0
        for layer in layers[1:-1]:
            if layer.out_dim != layer.in_dim:
                raise UsageError("geometric init needs equal hidden widths")
            layer.weights[...] = np.eye(layer.out_dim) + rng.normal(0, 1e-3, size=layer.weights.shape)
            layer.bias[...] = 0.0
        last = layers[-1]
        # E over directions of max(0, w.x) is 1/4 for unit w, so the sum of width
        # ReLUs averages width/4 * |p|.
        last.weights[0, :] = 4.0 / width * self.scale * scale_in
        last.bias[0] = -self.config.init_radius * self.scale
        self.log_b[...] = math.log(self.config.init_b)

    def _geo_input(self, x, h):
        p = ((x - self.center) / self.scale).astype(self.dtype)
        return np.concatenate([p, h], axis=1)

    def sdf(self, x) -> np.ndarray:
        _, _, _, geo, _ = self._forward_geo(x)
        return geo[:, 0].copy()

    def sdf_color(self, x, d):
        f, rgb, _ = self.forward(x, d)
        return f, rgb

    def forward(self, x, d):
        x, h, geo_in, geo, gcache = self._forward_geo(x)
        rgb, ccache = self._forward_color(geo, d)
        return geo[:, 0].copy(), rgb, GeoCache(x, h, geo_in, gcache, geo, ccache)

    def backward(self, cache: GeoCache, g_f, g_rgb, grad: np.ndarray, g_log_b: float = 0.0) -> None:
        g_geo = self._color_backward(cache, g_rgb, grad).copy()
        g_geo[:, 0] += g_f
        self._geo_backward(cache, g_geo, grad)
        grad[self._logb_slice] += g_log_b

    # -- spatial gradient -------------------------------------------------------

    def _position_jacobian(self, x):
        """geo input, d(geo input)/dx and the intermediates for a batch of points."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        h, jh = encode_with_jacobian(self.grid, x)
        geo_in = self._geo_input(x, h)
        return x, h, jh, geo_in

    def query_sdf(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Distance and its analytic spatial gradient (N,), (N, 3)."""
        x, h, jh, geo_in = self._position_jacobian(x)
        geo, gcache = mlp_forward(self.geo_head, geo_in)
        seed = np.zeros_like(geo)
        seed[:, 0] = 1.0
        _, g_in = mlp_backward(self.geo_head, gcache, seed)
        grad = g_in[:, :3] / self.scale + np.einsum("sk,skj->sj", g_in[:, 3:], jh)
        return geo[:, 0].copy(), grad

    def eikonal_backward(self, x, weight: float, grad: np.ndarray) -> tuple[float, np.ndarray]:
        """Mean eikonal penalty over points `x`; adds weight * d(penalty)/d(params) to `grad`.

        The head must be piecewise linear (ReLU hidden, linear output) so the
        second-order terms through the activations vanish; what remains is the
        tangent pass below plus the grid term from differentiating the
        trilinear weights.
        """
        from .tensor import mlp_deltas, mlp_tangent_param_grad

        x, h, jh, geo_in = self._position_jacobian(x)
        geo, gcache = mlp_forward(self.geo_head, geo_in)
        seed = np.zeros_like(geo)
        seed[:, 0] = 1.0
        deltas, g_in = mlp_deltas(self.geo_head, gcache, seed)
        g_p, g_h = g_in[:, :3], g_in[:, 3:]
        s = g_p / self.scale + np.einsum("sk,skj->sj", g_h, jh)
        norm = np.linalg.norm(s, axis=1)
        m = x.shape[0]
        loss = float(np.mean((norm - 1.0) ** 2))
        if weight == 0.0:
            return loss, s
        # u = d(weight * loss)/ds
        safe = np.maximum(norm, 1e-12)
        u = (weight * 2.0 / m) * ((norm - 1.0) / safe)[:, None] * s
        u = u.astype(self.dtype)
        # tangent of the head input along u: [u / scale, J_h u]
        q = np.concatenate([u / self.scale, np.einsum("skj,sj->sk", jh, u)], axis=1)
        grad[self._geo_slice] += mlp_tangent_param_grad(self.geo_head, gcache, deltas, q)
        encode_backward_directional(self.grid, x, u, g_h, out=self.grid_grad_view(grad))
        return loss, s


def make_field(config: FieldConfig, dtype=np.float32, seed=0):
    cls = SdfField if config.backend == "sdf" else DensityField
    return cls(config, dtype=dtype, seed=seed)


def load_field(path, dtype=np.float32):
    meta, data = load_blob(path)
    if meta.get("kind") != "field":
        raise FormatError(f"{path}: blob does not hold a field")
    cfg = FieldConfig.from_dict(meta["field_config"])
    fld = make_field(cfg, dtype=dtype)
    if data.size != fld.store.size:
        raise FormatError(f"{path}: expected {fld.store.size} parameters, found {data.size}")
    fld.store.data[...] = data
    return fld, meta


def _check_unit(d):
    n = np.linalg.norm(np.asarray(d, dtype=np.float64).reshape(-1, 3), axis=1)
    if np.any(np.abs(n - 1.0) > 1e-6):
        raise ContractError("view direction must be unit length (tolerance 1e-6)")


def query_density_color(fld: DensityField, x, d):
    """(sigma, rgb) at points x viewed along unit directions d; accepts single points or batches."""
    _check_unit(d)
    single = np.ndim(x) == 1
    xx = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    dd = np.broadcast_to(np.asarray(d, dtype=np.float64).reshape(-1, 3), xx.shape)
    sigma, rgb = fld.density_color(xx, dd)
    return (sigma[0], rgb[0]) if single else (sigma, rgb)


def query_sdf(fld: SdfField, x):
    single = np.ndim(x) == 1
    f, g = fld.query_sdf(np.asarray(x, dtype=np.float64).reshape(-1, 3))
    return (f[0], g[0]) if single else (f, g)
