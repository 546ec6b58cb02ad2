"""Cameras, rays, sampling and the two volume-rendering integrators.

Both backends are composited through the same per-interval optical depth
tau_i: the density backend uses tau_i = sigma_i * delta_i, the SDF backend
the log-ratio of consecutive logistic CDF values, clamped at zero. Then
alpha_i = 1 - exp(-tau_i), T_i = exp(-sum_{j<i} tau_j), w_i = T_i alpha_i.
Working in tau keeps everything finite for arbitrarily sharp surfaces.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BoundsError, ContractError, FormatError, UsageError
from .fields import log_sigmoid, truncate_sdf
from .tensor import sigmoid


@dataclass
class Camera:
    """Pinhole camera; c2w columns are (right, up, back) in world coords plus the center."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    c2w: np.ndarray
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.c2w.shape == (4, 4):
            self.c2w = self.c2w[:3]
        if self.c2w.shape != (3, 4):
            raise ContractError(f"c2w must be 3x4, got {self.c2w.shape}")
        R = self.c2w[:, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ContractError("camera rotation must be orthonormal with determinant +1")
        if not (0 < self.near < self.far):
            raise ContractError(f"need 0 < near < far, got near={self.near} far={self.far}")
        if self.width < 1 or self.height < 1:
            raise ContractError("image size must be positive")

    @property
    def center(self) -> np.ndarray:
        return self.c2w[:, 3].copy()

    def directions(self, i, j) -> np.ndarray:
        """Unit world directions through pixel coords (i, j); integers mean pixel centers."""
        i = np.asarray(i, dtype=np.float64)
        j = np.asarray(j, dtype=np.float64)
        # image rows grow downward, camera y grows upward
        local = np.stack(
            [(i + 0.5 - self.cx) / self.fx, -(j + 0.5 - self.cy) / self.fy, -np.ones_like(i)], axis=-1
        )
        d = local @ self.c2w[:, :3].T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def to_dict(self) -> dict:
        return {
            "width": self.width, "height": self.height, "fx": self.fx, "fy": self.fy,
            "cx": self.cx, "cy": self.cy, "c2w": self.c2w.tolist(),
            "near": self.near, "far": self.far,
        }

    @classmethod
    def from_dict(cls, d) -> "Camera":
        return cls(int(d["width"]), int(d["height"]), float(d["fx"]), float(d["fy"]),
                   float(d["cx"]), float(d["cy"]), np.asarray(d["c2w"]),
                   float(d.get("near", 0.05)), float(d.get("far", 100.0)))


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """3x4 c2w for a camera at `eye` looking at `target` (camera -z toward the target)."""
    eye = np.asarray(eye, dtype=np.float64)
    back = eye - np.asarray(target, dtype=np.float64)
    back /= np.linalg.norm(back)
    right = np.cross(np.asarray(up, dtype=np.float64), back)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross([0.0, 1.0, 0.0], back)
    right /= np.linalg.norm(right)
    upv = np.cross(back, right)
    return np.stack([right, upv, back, eye], axis=1)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise ContractError("ray direction must be unit length")
        if not self.t_near < self.t_far:
            raise ContractError("ray needs t_near < t_far")


@dataclass
class RayBundle:
    origins: np.ndarray
    directions: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray

    def __len__(self):
        return self.origins.shape[0]

    @classmethod
    def from_rays(cls, rays) -> "RayBundle":
        return cls(
            np.stack([r.origin for r in rays]), np.stack([r.direction for r in rays]),
            np.array([r.t_near for r in rays]), np.array([r.t_far for r in rays]),
        )

    def subset(self, idx) -> "RayBundle":
        return RayBundle(self.origins[idx], self.directions[idx], self.t_near[idx], self.t_far[idx])


@dataclass
class RaySamples:
    t: np.ndarray  # (R, n) or (n,)
    deltas: np.ndarray

    def __post_init__(self):
        if np.any(self.deltas <= 0):
            raise ContractError("sample deltas must be positive")


def generate_rays(camera: Camera, pixel, jitter: bool = False, rng=None) -> Ray:
    i, j = pixel
    if not (0 <= i < camera.width and 0 <= j < camera.height):
        raise BoundsError(f"pixel {pixel} outside {camera.width}x{camera.height} image")
    if jitter:
        rng = np.random.default_rng(rng)
        i = np.floor(i) + rng.uniform() - 0.5
        j = np.floor(j) + rng.uniform() - 0.5
    d = camera.directions(i, j)
    return Ray(camera.center, d, camera.near, camera.far)


def intersect_box(origins, directions, lo, hi) -> tuple[np.ndarray, np.ndarray]:
    """Slab test; returns (t_enter, t_exit) with t_enter >= t_exit for misses."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (np.asarray(lo) - origins) * inv
        t1 = (np.asarray(hi) - origins) * inv
    tmin = np.nan_to_num(np.minimum(t0, t1), nan=-np.inf)
    tmax = np.nan_to_num(np.maximum(t0, t1), nan=np.inf)
    return tmin.max(axis=-1), tmax.min(axis=-1)


def camera_bundle(camera: Camera, pixels_i=None, pixels_j=None, bbox=None) -> RayBundle:
    """Rays for chosen pixels (all, row-major, by default), clipped to [near, far] and the box."""
    if pixels_i is None:
        jj, ii = np.mgrid[0 : camera.height, 0 : camera.width]
        pixels_i, pixels_j = ii.ravel(), jj.ravel()
    d = camera.directions(pixels_i, pixels_j).reshape(-1, 3)
    o = np.broadcast_to(camera.center, d.shape).copy()
    tn = np.full(d.shape[0], camera.near)
    tf = np.full(d.shape[0], camera.far)
    if bbox is not None:
        a, b = intersect_box(o, d, bbox[0], bbox[1])
        tn = np.maximum(tn, a)
        tf = np.minimum(tf, b)
    return RayBundle(o, d, tn, tf)


def sample_along_ray(ray, n: int, stratified: bool = False, rng=None, delta_cap=None) -> RaySamples:
    """n samples in [t_near, t_far]: bin midpoints, or one uniform draw per bin.

    Works for a single `Ray` or a `RayBundle` (then t is (R, n)). The last delta
    is `delta_cap`, defaulting to the bin width.
    """
    if n < 2:
        raise UsageError("need at least 2 samples per ray")
    tn = np.atleast_1d(np.asarray(ray.t_near, dtype=np.float64))
    tf = np.atleast_1d(np.asarray(ray.t_far, dtype=np.float64))
    width = (tf - tn) / n
    k = np.arange(n, dtype=np.float64)
    if stratified:
        rng = np.random.default_rng(rng)
        u = rng.uniform(size=(tn.shape[0], n))
    else:
        u = np.full((tn.shape[0], n), 0.5)
    t = tn[:, None] + (k[None, :] + u) * width[:, None]
    deltas = np.empty_like(t)
    deltas[:, :-1] = np.diff(t, axis=1)
    deltas[:, -1] = width if delta_cap is None else delta_cap
    # a stratified pair can in principle coincide in floating point
    deltas = np.maximum(deltas, 1e-12)
    if isinstance(ray, Ray):
        return RaySamples(t[0], deltas[0])
    return RaySamples(t, deltas)


# --------------------------------------------------------------------------
# compositing


def transmittance(sigma, delta):
    """(alpha, T) per sample for piecewise-constant density."""
    tau = np.asarray(sigma, dtype=np.float64) * np.asarray(delta, dtype=np.float64)
    return _alpha_T(tau)


def _alpha_T(tau):
    tau = np.asarray(tau)
    # exclusive prefix sum; cum - tau would round and break monotonicity
    excl = np.zeros_like(tau, dtype=np.result_type(tau, np.float64))
    np.cumsum(tau[..., :-1], axis=-1, out=excl[..., 1:])
    T = np.exp(-excl)
    alpha = -np.expm1(-tau)
    return alpha, T


@dataclass
class Composite:
    rgb: np.ndarray  # (R, 3)
    depth: np.ndarray  # (R,) expected depth, 0 where opacity <= 1e-6
    opacity: np.ndarray
    weights: np.ndarray  # (R, n)
    T: np.ndarray  # (R, n) transmittance before each sample
    T_final: np.ndarray  # (R,)


def composite(tau, colors, t, background) -> Composite:
    tau = np.maximum(tau, 0.0)
    alpha, T = _alpha_T(tau)
    w = T * alpha
    T_fin = T[..., -1] * (1.0 - alpha[..., -1])
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), colors.shape[:-2] + (3,))
    rgb = np.einsum("...n,...nc->...c", w, colors) + T_fin[..., None] * bg
    opacity = w.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        depth = np.where(opacity > 1e-6, (w * t).sum(axis=-1) / np.maximum(opacity, 1e-300), 0.0)
    return Composite(rgb, depth, np.clip(opacity, 0.0, 1.0), w, T, T_fin)


def composite_backward(comp: Composite, tau, colors, background, g_rgb):
    """Given dL/dC (R, 3) return (dL/dtau (R, n), dL/dcolors (R, n, 3))."""
    w = comp.weights
    g_col = w[..., None] * g_rgb[..., None, :]
    wc = np.einsum("...nc,...c->...n", colors, g_rgb) * w
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), g_rgb.shape)
    tail = (comp.T_final * np.einsum("...c,...c->...", bg, g_rgb))[..., None]
    # S_i = sum_{j>i} w_j <c_j, g> + T_n <bg, g>
    suffix = np.cumsum(wc[..., ::-1], axis=-1)[..., ::-1] - wc + tail
    T_next = comp.T * np.exp(-np.maximum(tau, 0.0))
    cg = np.einsum("...nc,...c->...n", colors, g_rgb)
    g_tau = T_next * cg - suffix
    g_tau = np.where(tau >= 0, g_tau, 0.0)
    return g_tau, g_col


def sdf_tau(f, b):
    """Per-interval optical depth from raw SDF samples (R, n); last entry is 0.

    Also returns what the backward pass needs.
    """
    pi = truncate_sdf(f, b)
    y = b * pi
    ls = log_sigmoid(y)
    diff = ls[..., :-1] - ls[..., 1:]
    tau = np.zeros_like(f)
    tau[..., :-1] = np.maximum(diff, 0.0)
    return tau, (pi, y, diff)


def sdf_tau_backward(f, b, aux, g_tau):
    """dL/df (R, n) and dL/dlog_b (scalar) from dL/dtau."""
    pi, y, diff = aux
    active = (diff > 0).astype(g_tau.dtype)
    gd = g_tau[..., :-1] * active
    g_ls = np.zeros_like(f)
    g_ls[..., :-1] += gd
    g_ls[..., 1:] -= gd
    g_y = g_ls * sigmoid(-y)
    sech2 = 1.0 - pi * pi
    g_f = g_y * b * (0.5 * b * sech2)
    # y = b tanh(b f / 2): dy/db = pi + b * (f/2) sech^2
    g_b = float(np.sum(g_y * (pi + 0.5 * b * f * sech2)))
    return g_f, g_b * b


def sdf_weights(f_trunc, b):
    """Discrete logistic-CDF ratio weights from truncated SDF values, in the stable tau form."""
    ls = log_sigmoid(np.multiply(b, f_trunc))
    tau = np.zeros_like(ls)
    tau[..., :-1] = np.maximum(ls[..., :-1] - ls[..., 1:], 0.0)
    alpha, T = _alpha_T(tau)
    return T * alpha


# --------------------------------------------------------------------------
# rendering a bundle through a field


@dataclass
class RenderResult:
    rgb: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    weights: np.ndarray
    samples: RaySamples
    valid: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)


def prepare_samples(bundle: RayBundle, n: int, stratified=False, rng=None):
    valid = bundle.t_far > bundle.t_near
    sub = bundle.subset(valid)
    if len(sub) == 0:
        return valid, None, None, None
    samples = sample_along_ray(sub, n, stratified, rng)
    x = sub.origins[:, None, :] + samples.t[..., None] * sub.directions[:, None, :]
    d = np.repeat(sub.directions, n, axis=0)
    return valid, samples, x.reshape(-1, 3), d


def render_bundle(fld, bundle: RayBundle, n: int = 128, background=(0.0, 0.0, 0.0),
                  stratified=False, rng=None, keep_cache=False) -> RenderResult:
    R = len(bundle)
    bg = np.asarray(background, dtype=np.float64)
    rgb = np.broadcast_to(bg, (R, 3)).copy()
    depth = np.zeros(R)
    opacity = np.zeros(R)
    valid, samples, x, d = prepare_samples(bundle, n, stratified, rng)
    weights = np.zeros((R, n))
    res = RenderResult(rgb, depth, opacity, weights, samples, valid)
    if samples is None:
        return res
    V = samples.t.shape[0]
    if fld.backend == "density":
        sigma, col, fcache = fld.forward(x, d)
        sigma = sigma.reshape(V, n).astype(np.float64)
        tau = sigma * samples.deltas
        aux = None
    else:
        f, col, fcache = fld.forward(x, d)
        f = f.reshape(V, n).astype(np.float64)
        tau, aux = sdf_tau(f, fld.b)
        sigma = f
    col = col.reshape(V, n, 3).astype(np.float64)
    comp = composite(tau, col, samples.t, bg)
    res.rgb[valid] = comp.rgb
    res.depth[valid] = comp.depth
    res.opacity[valid] = comp.opacity
    res.weights[valid] = comp.weights
    if keep_cache:
        res.cache = dict(fcache=fcache, comp=comp, tau=tau, col=col, aux=aux, raw=sigma, bg=bg)
    return res


def render_backward(fld, res: RenderResult, g_rgb: np.ndarray, grad: np.ndarray) -> None:
    """Accumulate dL/dparams into `grad` given dL/dC for every ray of the bundle."""
    if res.samples is None:
        return
    c = res.cache
    g = g_rgb[res.valid].astype(np.float64)
    g_tau, g_col = composite_backward(c["comp"], c["tau"], c["col"], c["bg"], g)
    g_col = g_col.reshape(-1, 3)
    if fld.backend == "density":
        g_sigma = (g_tau * res.samples.deltas).ravel()
        fld.backward(c["fcache"], g_sigma.astype(fld.dtype), g_col.astype(fld.dtype), grad)
    else:
        g_f, g_logb = sdf_tau_backward(c["raw"], fld.b, c["aux"], g_tau)
        fld.backward(c["fcache"], g_f.ravel().astype(fld.dtype), g_col.astype(fld.dtype), grad, g_logb)


def render_density(ray: Ray, fld, samples: RaySamples, background=(0.0, 0.0, 0.0)):
    """(C, depth_expectation, opacity) along one ray."""
    x = ray.origin + samples.t[:, None] * ray.direction
    d = np.broadcast_to(ray.direction, x.shape)
    sigma, col = fld.density_color(x, d)
    comp = composite(sigma.astype(np.float64) * samples.deltas, col.astype(np.float64), samples.t, background)
    return comp.rgb, float(comp.depth), float(comp.opacity)


def render_sdf(ray: Ray, fld, samples: RaySamples, background=(0.0, 0.0, 0.0)):
    x = ray.origin + samples.t[:, None] * ray.direction
    d = np.broadcast_to(ray.direction, x.shape)
    f, col = fld.sdf_color(x, d)
    tau, _ = sdf_tau(f.astype(np.float64), fld.b)
    comp = composite(tau, col.astype(np.float64), samples.t, background)
    return comp.rgb, float(comp.depth), float(comp.opacity)


def render_image(fld, camera: Camera, n: int = 128, background=(0.0, 0.0, 0.0), bbox=None, chunk=4096):
    """(rgb (H, W, 3), depth (H, W), opacity (H, W)); rays are processed in row-major chunks."""
    if bbox is None:
        bbox = (fld.config.grid.bbox_min, fld.config.grid.bbox_max)
    bundle = camera_bundle(camera, bbox=bbox)
    R = len(bundle)
    rgb = np.empty((R, 3))
    depth = np.empty(R)
    opac = np.empty(R)
    for s in range(0, R, chunk):
        out = render_bundle(fld, bundle.subset(slice(s, s + chunk)), n, background)
        rgb[s : s + chunk] = out.rgb
        depth[s : s + chunk] = out.depth
        opac[s : s + chunk] = out.opacity
    H, W = camera.height, camera.width
    return np.clip(rgb, 0.0, 1.0).reshape(H, W, 3), depth.reshape(H, W), opac.reshape(H, W)


# --------------------------------------------------------------------------
# depth maps: 8-byte magic, <II width height, then H*W little-endian float32

DEPTH_MAGIC = b"NKDEPTH1"


def write_depth(path, depth: np.ndarray) -> None:
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())


def read_depth(path) -> tuple[np.ndarray, np.ndarray]:
    """(depth, valid mask); misses are stored as 0."""
    raw = open(path, "rb").read()
    if raw[:8] != DEPTH_MAGIC:
        raise FormatError(f"{path}: not a depth map")
    w, h = struct.unpack_from("<II", raw, 8)
    if len(raw) != 16 + 4 * w * h:
        raise FormatError(f"{path}: truncated depth map")
    depth = np.frombuffer(raw, dtype="<f4", offset=16).reshape(h, w).astype(np.float32)
    return depth, depth > 0
