"""COLMAP text models, pose conversion, LLFF bundles, PNG I/O, datasets on disk,
and the analytic synthetic scenes used as ground truth.

Camera conventions:
  COLMAP stores world-to-camera poses with camera axes (right, down, forward).
  LLFF stores camera-to-world columns in the order (down, right, backward).
  `Camera.c2w` here uses (right, up, backward).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import config as cfg
from .errors import ContractError, FormatError, ParseError, UsageError, ValidationError
from .render import Camera, camera_bundle, intersect_box, look_at, read_depth, write_depth

# --------------------------------------------------------------------------
# COLMAP


@dataclass
class ColmapCamera:
    id: int
    model: str
    width: int
    height: int
    params: tuple

    @property
    def intrinsics(self) -> tuple[float, float, float, float]:
        """(fx, fy, cx, cy)."""
        if self.model == "SIMPLE_PINHOLE":
            f, cx, cy = self.params
            return f, f, cx, cy
        fx, fy, cx, cy = self.params
        return fx, fy, cx, cy


@dataclass
class ColmapImage:
    id: int
    qvec: np.ndarray
    tvec: np.ndarray
    camera_id: int
    name: str

    @property
    def R(self) -> np.ndarray:
        return qvec_to_rotmat(self.qvec)


@dataclass
class ColmapModel:
    cameras: dict
    images: dict
    # point id -> (xyz, set of image ids that observe it)
    points: dict = field(default_factory=dict)


CAMERA_PARAM_COUNT = {"SIMPLE_PINHOLE": 3, "PINHOLE": 4}


def qvec_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion, re-orthonormalized by SVD."""
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    R = np.array([
        [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * z * x + 2 * w * y],
        [2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x],
        [2 * z * x - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y],
    ])
    u, _, vt = np.linalg.svd(R)
    return u @ vt


def _data_lines(path: Path):
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        yield n, line.strip()


def parse_colmap(directory) -> ColmapModel:
    d = Path(directory)
    cam_path, img_path = d / "cameras.txt", d / "images.txt"
    for p in (cam_path, img_path):
        if not p.is_file():
            raise FormatError(f"missing COLMAP file {p}")
    cameras = {}
    for n, line in _data_lines(cam_path):
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            cid, model, w, h = int(parts[0]), parts[1], int(parts[2]), int(parts[3])
            params = tuple(float(v) for v in parts[4:])
        except (IndexError, ValueError):
            raise ParseError("malformed camera line", n, cam_path) from None
        if model not in CAMERA_PARAM_COUNT:
            raise FormatError(f"{cam_path}:{n}: unsupported camera model {model}")
        if len(params) != CAMERA_PARAM_COUNT[model]:
            raise ParseError(f"{model} needs {CAMERA_PARAM_COUNT[model]} parameters", n, cam_path)
        cameras[cid] = ColmapCamera(cid, model, w, h, params)

    images = {}
    lines = list(_data_lines(img_path))
    i = 0
    while i < len(lines):
        n, line = lines[i]
        i += 1
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            iid = int(parts[0])
            q = np.array([float(v) for v in parts[1:5]])
            t = np.array([float(v) for v in parts[5:8]])
            cid = int(parts[8])
            name = " ".join(parts[9:])
            if not name:
                raise ValueError
        except (IndexError, ValueError):
            raise ParseError("malformed image line", n, img_path) from None
        if cid not in cameras:
            raise ParseError(f"image {iid} references unknown camera {cid}", n, img_path)
        if abs(np.linalg.norm(q) - 1.0) > 1e-3:
            raise ParseError(f"quaternion of image {iid} is not unit length", n, img_path)
        images[iid] = ColmapImage(iid, q / np.linalg.norm(q), t, cid, name)
        # every image line is followed by its 2D-point line, possibly empty
        i += 1

    points = {}
    pts_path = d / "points3D.txt"
    if pts_path.is_file():
        for n, line in _data_lines(pts_path):
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                pid = int(parts[0])
                xyz = np.array([float(v) for v in parts[1:4]])
                track = {int(v) for v in parts[8::2]}
            except (IndexError, ValueError):
                raise ParseError("malformed point line", n, pts_path) from None
            points[pid] = (xyz, track)
    return ColmapModel(cameras, images, points)


def _check_rotation(R):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or np.abs(R.T @ R - np.eye(3)).max() > 1e-6:
        raise ContractError("rotation must be orthonormal within 1e-6")
    return R


def w2c_to_c2w(R, t) -> np.ndarray:
    """4x4 camera-to-world matrix [[R^T, -R^T t], [0, 1]]; the translation is the camera center."""
    R = _check_rotation(R)
    t = np.asarray(t, dtype=np.float64).reshape(3)
    M = np.eye(4)
    M[:3, :3] = R.T
    M[:3, 3] = -R.T @ t
    return M


def c2w_to_w2c(M) -> tuple[np.ndarray, np.ndarray]:
    M = np.asarray(M, dtype=np.float64)
    Rt = _check_rotation(M[:3, :3])
    R = Rt.T
    return R, -R @ M[:3, 3]


# column maps between conventions; each is applied as c2w[:, :3] @ P
_COLMAP_TO_GL = np.diag([1.0, -1.0, -1.0])  # (right, down, fwd) -> (right, up, back)
_GL_TO_LLFF = np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])  # -> (down, right, back)


def colmap_c2w_to_gl(M) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    out = M[:3, :4].copy()
    out[:, :3] = M[:3, :3] @ _COLMAP_TO_GL
    return out


def gl_to_llff(c2w) -> np.ndarray:
    c2w = np.asarray(c2w, dtype=np.float64)
    out = c2w[:3, :4].copy()
    out[:, :3] = c2w[:3, :3] @ _GL_TO_LLFF
    return out


def llff_to_gl(block) -> np.ndarray:
    block = np.asarray(block, dtype=np.float64)
    out = block[:3, :4].copy()
    out[:, :3] = block[:3, :3] @ _GL_TO_LLFF.T
    return out


def write_llff(poses, bounds, path, convention: str = "colmap") -> np.ndarray:
    """Write an N x 17 `poses_bounds.npy`.

    poses: list of (M, (height, width, focal)); M is a camera-to-world matrix
    (3x4 or 4x4) in the COLMAP axis convention by default, or ours ("gl").
    Each row is the 3x5 block [R_llff | t | hwf] flattened in C order, then
    near, far; hwf therefore sits at row positions 4, 9 and 14.
    """
    if not poses:
        raise UsageError("no views to write")
    sizes = {(int(h), int(w)) for _, (h, w, _f) in poses}
    if len(sizes) > 1:
        raise UsageError(f"all views must share image dimensions, got {sorted(sizes)}")
    rows = []
    for (M, (h, w, f)), (near, far) in zip(poses, bounds, strict=True):
        gl = colmap_c2w_to_gl(M) if convention == "colmap" else np.asarray(M, dtype=np.float64)[:3, :4]
        block = np.concatenate([gl_to_llff(gl), np.array([[h], [w], [f]], dtype=np.float64)], axis=1)
        rows.append(np.concatenate([block.ravel(), [near, far]]))
    arr = np.asarray(rows, dtype="<f8")
    with open(path, "wb") as fh:
        np.lib.format.write_array(fh, arr, version=(1, 0), allow_pickle=False)
    return arr


def read_llff(path) -> list[dict]:
    """Inverse of `write_llff`: one dict per view with c2w (ours), height, width, focal, near, far."""
    try:
        arr = np.load(path, allow_pickle=False)
    except (ValueError, OSError) as exc:
        raise FormatError(f"{path}: cannot read pose bundle: {exc}") from None
    if arr.ndim != 2 or arr.shape[1] != 17:
        raise FormatError(f"{path}: expected N x 17 pose bundle, got {arr.shape}")
    out = []
    for row in arr:
        block = row[:15].reshape(3, 5)
        out.append({
            "c2w": llff_to_gl(block[:, :4]),
            "height": float(block[0, 4]), "width": float(block[1, 4]), "focal": float(block[2, 4]),
            "near": float(row[15]), "far": float(row[16]),
        })
    return out


# --------------------------------------------------------------------------
# PNG


def read_png(path) -> np.ndarray:
    """(H, W, 3) uint8. Grayscale, palette and alpha images become RGB; 16-bit grey maps by round(v/257)."""
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode in ("I;16", "I;16B", "I;16L", "I"):
                a = np.asarray(img, dtype=np.float64)
                a8 = np.clip(np.floor(a / 257.0 + 0.5), 0, 255).astype(np.uint8)
                return np.repeat(a8[..., None], 3, axis=2)
            return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise FormatError(f"{path}: cannot decode image: {exc}") from None


def write_png(path, image) -> None:
    a = np.asarray(image)
    if a.dtype != np.uint8:
        a = to_uint8(a)
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=2)
    Image.fromarray(np.ascontiguousarray(a[..., :3]), "RGB").save(path, format="PNG")


def to_uint8(img) -> np.ndarray:
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------
# analytic scenes


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray

    def intersect(self, o, d):
        oc = o - self.center
        b = np.einsum("ij,ij->i", oc, d)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius**2
        disc = b * b - c
        hit = disc >= 0
        s = np.sqrt(np.where(hit, disc, 0.0))
        t0, t1 = -b - s, -b + s
        t = np.where(t0 > 1e-9, t0, t1)
        t = np.where(hit & (t > 1e-9), t, np.inf)
        p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        n = (p - self.center) / self.radius
        return t, n

    def sdf(self, x):
        return np.linalg.norm(x - self.center, axis=-1) - self.radius


@dataclass
class Plane:
    normal: np.ndarray
    offset: float
    albedo: np.ndarray

    def intersect(self, o, d):
        nd = d @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.offset - o @ self.normal) / nd
        t = np.where((np.abs(nd) > 1e-12) & (t > 1e-9), t, np.inf)
        n = np.where((nd > 0)[:, None], -self.normal, self.normal)
        return t, np.broadcast_to(n, d.shape)

    def sdf(self, x):
        return x @ self.normal - self.offset


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    albedo: np.ndarray

    def intersect(self, o, d):
        t_in, t_out = intersect_box(o, d, self.lo, self.hi)
        t = np.where(t_in > 1e-9, t_in, t_out)
        t = np.where((t_out >= t_in) & (t > 1e-9), t, np.inf)
        p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        c = 0.5 * (self.lo + self.hi)
        half = 0.5 * (self.hi - self.lo)
        q = (p - c) / half
        axis = np.argmax(np.abs(q), axis=1)
        n = np.zeros_like(p)
        n[np.arange(len(p)), axis] = np.sign(q[np.arange(len(p)), axis])
        return t, n

    def sdf(self, x):
        c = 0.5 * (self.lo + self.hi)
        q = np.abs(x - c) - 0.5 * (self.hi - self.lo)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside


@dataclass
class CameraRing:
    count: int = 72
    radius: float = 2.5
    elevation: tuple = (20.0, -20.0)
    look_at: tuple = (0.0, 0.0, 0.0)
    fov: float = 40.0
    val_every: int = 9


@dataclass
class SceneSpec:
    primitives: list = field(default_factory=list)
    light: tuple = (0.3, -0.5, 0.8)
    background: tuple = (1.0, 1.0, 1.0)
    ring: CameraRing = field(default_factory=CameraRing)
    width: int = 128
    height: int = 128
    bbox_min: tuple = (-1.0, -1.0, -1.0)
    bbox_max: tuple = (1.0, 1.0, 1.0)
    ambient: float = 0.1

    def __post_init__(self):
        if self.ring.count < 1:
            raise ValidationError("cameras.count", "need at least one camera")
        for p in self.primitives:
            if isinstance(p, Sphere) and p.radius <= 0:
                raise ValidationError("sphere.radius", "radius must be positive")
            if np.any(np.asarray(p.albedo) < 0) or np.any(np.asarray(p.albedo) > 1):
                raise ValidationError("albedo", "albedo must lie in [0, 1]")

    @property
    def light_dir(self) -> np.ndarray:
        l = np.asarray(self.light, dtype=np.float64)
        return l / np.linalg.norm(l)

    def cameras(self) -> list[Camera]:
        ring = self.ring
        f = 0.5 * self.height / math.tan(math.radians(ring.fov) / 2.0)
        out = []
        for k in range(ring.count):
            az = 2.0 * math.pi * k / ring.count
            el = math.radians(ring.elevation[k % len(ring.elevation)])
            eye = np.asarray(ring.look_at) + ring.radius * np.array(
                [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
            )
            out.append(Camera(self.width, self.height, f, f, self.width / 2.0, self.height / 2.0,
                              look_at(eye, ring.look_at)))
        return out

    def split_of(self, k: int) -> str:
        v = self.ring.val_every
        return "val" if v > 0 and k % v == 0 else "train"


SCENE_SCHEMA = cfg.Schema(
    {
        "scene.light": cfg.Key("floats", (0.3, -0.5, 0.8), cfg.vec3),
        "scene.background": cfg.Key("floats", (1.0, 1.0, 1.0), cfg.unit_range3),
        "scene.ambient": cfg.Key("float", 0.1, cfg.non_negative),
        "scene.bbox_min": cfg.Key("floats", (-1.0, -1.0, -1.0), cfg.vec3),
        "scene.bbox_max": cfg.Key("floats", (1.0, 1.0, 1.0), cfg.vec3),
        "image.width": cfg.Key("int", 128, cfg.positive),
        "image.height": cfg.Key("int", 128, cfg.positive),
        "cameras.count": cfg.Key("int", 72, lambda v: v >= 1, "need at least one camera"),
        "cameras.radius": cfg.Key("float", 2.5, cfg.positive),
        "cameras.elevation": cfg.Key("floats", (20.0, -20.0), lambda v: len(v) >= 1),
        "cameras.look_at": cfg.Key("floats", (0.0, 0.0, 0.0), cfg.vec3),
        "cameras.fov": cfg.Key("float", 40.0, lambda v: 0 < v < 180),
        "cameras.val_every": cfg.Key("int", 9, cfg.non_negative),
    },
    {
        r"sphere\.\d+\.center": cfg.Key("floats", None, cfg.vec3),
        r"sphere\.\d+\.radius": cfg.Key("float", None, cfg.positive, "radius must be positive"),
        r"sphere\.\d+\.albedo": cfg.Key("floats", None, cfg.unit_range3),
        r"plane\.\d+\.normal": cfg.Key("floats", None, cfg.vec3),
        r"plane\.\d+\.offset": cfg.Key("float", None),
        r"plane\.\d+\.albedo": cfg.Key("floats", None, cfg.unit_range3),
        r"box\.\d+\.min": cfg.Key("floats", None, cfg.vec3),
        r"box\.\d+\.max": cfg.Key("floats", None, cfg.vec3),
        r"box\.\d+\.albedo": cfg.Key("floats", None, cfg.unit_range3),
    },
)

_PRIM_FIELDS = {
    "sphere": ("center", "radius", "albedo"),
    "plane": ("normal", "offset", "albedo"),
    "box": ("min", "max", "albedo"),
}


def scene_from_values(v: dict) -> SceneSpec:
    groups: dict[tuple, dict] = {}
    for key, value in v.items():
        parts = key.split(".")
        if parts[0] in _PRIM_FIELDS and len(parts) == 3:
            groups.setdefault((parts[0], int(parts[1])), {})[parts[2]] = value
    prims = []
    for (kind, idx), fields in sorted(groups.items()):
        for name in _PRIM_FIELDS[kind]:
            if name not in fields:
                raise ValidationError(f"{kind}.{idx}.{name}", "missing")
        if kind == "sphere":
            prims.append(Sphere(np.array(fields["center"]), fields["radius"], np.array(fields["albedo"])))
        elif kind == "plane":
            n = np.array(fields["normal"])
            if np.linalg.norm(n) == 0:
                raise ValidationError(f"plane.{idx}.normal", "normal must be non-zero")
            s = np.linalg.norm(n)
            prims.append(Plane(n / s, fields["offset"] / s, np.array(fields["albedo"])))
        else:
            lo, hi = np.array(fields["min"]), np.array(fields["max"])
            if np.any(hi <= lo):
                raise ValidationError(f"box.{idx}.max", "max must exceed min on every axis")
            prims.append(Box(lo, hi, np.array(fields["albedo"])))
    lo, hi = np.array(v["scene.bbox_min"]), np.array(v["scene.bbox_max"])
    if np.any(hi <= lo):
        raise ValidationError("scene.bbox_max", "must exceed scene.bbox_min on every axis")
    if np.linalg.norm(v["scene.light"]) == 0:
        raise ValidationError("scene.light", "light direction must be non-zero")
    ring = CameraRing(v["cameras.count"], v["cameras.radius"], tuple(v["cameras.elevation"]),
                      tuple(v["cameras.look_at"]), v["cameras.fov"], v["cameras.val_every"])
    return SceneSpec(prims, tuple(v["scene.light"]), tuple(v["scene.background"]), ring,
                     v["image.width"], v["image.height"], tuple(lo), tuple(hi), v["scene.ambient"])


def load_scene_spec(path) -> SceneSpec:
    return scene_from_values(SCENE_SCHEMA.load(path))


def parse_scene_spec(text: str) -> SceneSpec:
    return scene_from_values(SCENE_SCHEMA.parse(text))


class AnalyticSdf:
    """Union of the scene primitives as a signed distance (min of primitive SDFs)."""

    def __init__(self, spec: SceneSpec):
        self.primitives = list(spec.primitives)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if not self.primitives:
            return np.full(x.shape[:-1], np.inf)
        return np.min(np.stack([p.sdf(x) for p in self.primitives]), axis=0)

    def gradient(self, x, h=1e-6) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        e = np.eye(3) * h
        return np.stack([(self(x + e[k]) - self(x - e[k])) / (2 * h) for k in range(3)], axis=-1)


class OpaqueDensity:
    """Density-backend stand-in for an analytic scene: sigma inside solids, zero outside."""

    backend = "density"

    def __init__(self, spec: SceneSpec, sigma: float = 1e3):
        self.spec = spec
        self.sdf = AnalyticSdf(spec)
        self.sigma = sigma
        self.bbox = (spec.bbox_min, spec.bbox_max)

    def density(self, x):
        return np.where(self.sdf(np.asarray(x).reshape(-1, 3)) < 0, self.sigma, 0.0)

    def density_color(self, x, d):
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        return self.density(x), np.broadcast_to(shade_points(self.spec, x), x.shape).copy()


def shade_points(spec: SceneSpec, x) -> np.ndarray:
    """Lambert + ambient color of the primitive nearest to each point (used off-surface too)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if not spec.primitives:
        return np.broadcast_to(np.asarray(spec.background, float), x.shape).copy()
    d = np.stack([np.abs(p.sdf(x)) for p in spec.primitives])
    which = np.argmin(d, axis=0)
    out = np.empty_like(x)
    L = spec.light_dir
    for k, p in enumerate(spec.primitives):
        m = which == k
        if not np.any(m):
            continue
        if isinstance(p, Sphere):
            n = x[m] - p.center
            n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
        elif isinstance(p, Plane):
            n = np.broadcast_to(p.normal, x[m].shape)
        else:
            g = AnalyticSdf(SceneSpec([p])).gradient(x[m])
            n = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
        out[m] = _lambert(p.albedo, n, L, spec.ambient)
    return out


def _lambert(albedo, n, L, ambient):
    return np.clip(np.asarray(albedo) * (np.maximum(n @ L, 0.0)[:, None] + ambient), 0.0, 1.0)


def trace_scene(spec: SceneSpec, origins, dirs):
    """Nearest hit per ray: (t or inf, shaded color (R, 3) with background on misses)."""
    R = origins.shape[0]
    best_t = np.full(R, np.inf)
    color = np.broadcast_to(np.asarray(spec.background, dtype=np.float64), (R, 3)).copy()
    L = spec.light_dir
    for p in spec.primitives:
        t, n = p.intersect(origins, dirs)
        closer = t < best_t
        if np.any(closer):
            best_t[closer] = t[closer]
            color[closer] = _lambert(p.albedo, n[closer], L, spec.ambient)
    return best_t, color


def render_analytic(spec: SceneSpec, camera: Camera):
    """(uint8 image (H, W, 3), depth (H, W) with 0 on misses)."""
    bundle = camera_bundle(camera)
    t, col = trace_scene(spec, bundle.origins, bundle.directions)
    H, W = camera.height, camera.width
    depth = np.where(np.isfinite(t), t, 0.0).reshape(H, W)
    return to_uint8(col.reshape(H, W, 3)), depth


@dataclass
class View:
    name: str
    camera: Camera
    image: np.ndarray | None  # (H, W, 3) uint8
    split: str = "train"
    camera_id: int = 0
    depth: np.ndarray | None = None
    image_path: str | None = None


@dataclass
class Dataset:
    views: list
    background: tuple = (0.0, 0.0, 0.0)
    bbox_min: tuple = (-1.0, -1.0, -1.0)
    bbox_max: tuple = (1.0, 1.0, 1.0)
    sdf: AnalyticSdf | None = None
    spec: SceneSpec | None = None

    def split(self, name: str) -> list:
        return [v for v in self.views if v.split == name]

    @property
    def bbox(self):
        return (self.bbox_min, self.bbox_max)

    def validate(self) -> None:
        train = self.split("train")
        if len(train) < 2:
            raise ValidationError("dataset.views", f"need at least 2 training views, found {len(train)}")
        for v in self.views:
            if v.image is not None and v.image.shape[:2] != (v.camera.height, v.camera.width):
                raise ValidationError(f"views.{v.name}", "image size disagrees with camera")


def _bounds_from_depth(depth: np.ndarray, fallback: tuple) -> tuple[float, float]:
    hit = depth[depth > 0]
    if hit.size == 0:
        return fallback
    return 0.9 * float(hit.min()), 1.1 * float(hit.max())


def synth_scene(spec: SceneSpec, size=None) -> Dataset:
    """Render every ring camera analytically; near/far per view from its depth range (+-10%)."""
    if size is not None:
        w, h = (size, size) if np.isscalar(size) else size
        spec = SceneSpec(spec.primitives, spec.light, spec.background, spec.ring, int(w), int(h),
                         spec.bbox_min, spec.bbox_max, spec.ambient)
    views = []
    lo, hi = np.asarray(spec.bbox_min), np.asarray(spec.bbox_max)
    for k, cam in enumerate(spec.cameras()):
        img, depth = render_analytic(spec, cam)
        dist = np.linalg.norm(cam.center - 0.5 * (lo + hi))
        half = 0.5 * np.linalg.norm(hi - lo)
        near, far = _bounds_from_depth(depth, (max(dist - half, 0.05), dist + half))
        cam = Camera(cam.width, cam.height, cam.fx, cam.fy, cam.cx, cam.cy, cam.c2w, near, far)
        views.append(View(f"{k:03d}", cam, img, spec.split_of(k), k, depth))
    return Dataset(views, tuple(spec.background), tuple(spec.bbox_min), tuple(spec.bbox_max),
                   AnalyticSdf(spec), spec)


# --------------------------------------------------------------------------
# dataset directory: manifest.jsonl + poses_bounds.npy + images/ (+ depth/)

MANIFEST = "manifest.jsonl"


def _view_record(v: View, image_rel: str, depth_rel: str | None) -> dict:
    c = v.camera
    rec = {"image": image_rel, "camera_id": v.camera_id, "split": v.split}
    rec.update(c.to_dict())
    if depth_rel:
        rec["depth"] = depth_rel
    return rec


def save_dataset(ds: Dataset, out_dir, write_images: bool = True) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({
        "kind": "nerfkit-dataset", "version": 1, "background": list(ds.background),
        "bbox_min": list(ds.bbox_min), "bbox_max": list(ds.bbox_max),
    })]
    poses, bounds = [], []
    for v in ds.views:
        if write_images and v.image is not None:
            rel = f"images/{v.name}.png"
            write_png(out / rel, v.image)
        else:
            rel = v.image_path
        drel = None
        if v.depth is not None:
            (out / "depth").mkdir(exist_ok=True)
            drel = f"depth/{v.name}.depth"
            write_depth(out / drel, v.depth)
        lines.append(json.dumps(_view_record(v, rel, drel)))
        c = v.camera
        poses.append((c.c2w, (c.height, c.width, c.fx)))
        bounds.append((c.near, c.far))
    (out / MANIFEST).write_text("\n".join(lines) + "\n")
    write_llff(poses, bounds, out / "poses_bounds.npy", convention="gl")
    return out


def load_dataset(directory, load_images: bool = True) -> Dataset:
    d = Path(directory)
    path = d / MANIFEST
    if not path.is_file():
        raise FormatError(f"{d}: no {MANIFEST}")
    records = []
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad manifest line: {exc.msg}", n, path) from None
    if not records or records[0].get("kind") != "nerfkit-dataset":
        raise FormatError(f"{path}: missing dataset header")
    head = records[0]
    views = []
    for n, rec in enumerate(records[1:], start=2):
        try:
            cam = Camera.from_dict(rec)
            img_path = Path(rec["image"])
            if not img_path.is_absolute():
                img_path = d / img_path
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad view record: {exc}", n, path) from None
        img = read_png(img_path) if load_images else None
        depth = None
        if rec.get("depth") and (d / rec["depth"]).is_file():
            depth = read_depth(d / rec["depth"])[0].astype(np.float64)
        views.append(View(img_path.stem, cam, img, rec.get("split", "train"),
                          int(rec.get("camera_id", 0)), depth, str(img_path)))
    return Dataset(views, tuple(head.get("background", (0, 0, 0))),
                   tuple(head.get("bbox_min", (-1, -1, -1))), tuple(head.get("bbox_max", (1, 1, 1))))


def colmap_views(model: ColmapModel, images_dir, val_every: int = 8, bounds=None):
    """Views for every registered image plus the names that are missing on disk."""
    images_dir = Path(images_dir)
    views, missing = [], []
    for k, iid in enumerate(sorted(model.images)):
        im = model.images[iid]
        cam = model.cameras[im.camera_id]
        fx, fy, cx, cy = cam.intrinsics
        M = w2c_to_c2w(im.R, im.tvec)
        if bounds is not None:
            near, far = bounds
        else:
            near, far = _colmap_bounds(model, iid, im)
        path = images_dir / im.name
        if not path.is_file():
            missing.append(im.name)
        split = "val" if val_every > 0 and k % val_every == 0 and len(model.images) > 1 else "train"
        c = Camera(cam.width, cam.height, fx, fy, cx, cy, colmap_c2w_to_gl(M), near, far)
        views.append(View(Path(im.name).stem, c, None, split, im.camera_id, None, str(path.resolve())))
    return views, missing


def _colmap_bounds(model, iid, im) -> tuple[float, float]:
    pts = [xyz for xyz, track in model.points.values() if iid in track]
    if not pts:
        raise ValidationError(f"images.{im.name}", "no observed 3D points; pass explicit --near/--far")
    z = (np.asarray(pts) @ im.R.T + im.tvec)[:, 2]
    z = z[z > 0]
    if z.size == 0:
        raise ValidationError(f"images.{im.name}", "all observed points behind the camera")
    return float(np.percentile(z, 1)) * 0.9, float(np.percentile(z, 99)) * 1.1
