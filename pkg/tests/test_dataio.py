import math

import numpy as np
import pytest
from PIL import Image

from nerfkit import dataio as dio
from nerfkit.cli import bundled_path
from nerfkit.errors import ContractError, FormatError, ParseError, UsageError, ValidationError
from nerfkit.render import Camera, look_at

SPEC_TEXT = """
scene.background = 1 1 1
scene.light = 0.3 -0.5 0.8
image.width = 32
image.height = 32
cameras.count = 6
cameras.radius = 2.5
sphere.0.center = 0 0 0
sphere.0.radius = 0.5
sphere.0.albedo = 0.8 0.1 0.1
"""


def write_colmap(d, cameras, images, points=None):
    d.mkdir(parents=True, exist_ok=True)
    (d / "cameras.txt").write_text("# Camera list\n" + cameras)
    (d / "images.txt").write_text("# Image list\n# two lines per image\n" + images)
    if points is not None:
        (d / "points3D.txt").write_text(points)
    return d


def rot_z(deg):
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


# -- COLMAP -----------------------------------------------------------------------


def test_simple_pinhole_identity(tmp_path):
    d = write_colmap(tmp_path, "1 SIMPLE_PINHOLE 100 100 100 50 50\n", "1 1 0 0 0 0 0 0 1 a.png\n\n")
    m = dio.parse_colmap(d)
    assert m.cameras[1].intrinsics == (100, 100, 50, 50)
    np.testing.assert_array_equal(m.images[1].R, np.eye(3))
    np.testing.assert_array_equal(m.images[1].tvec, 0)
    assert m.images[1].name == "a.png"


def test_quaternion_rot_z():
    h = math.sqrt(0.5)
    np.testing.assert_allclose(dio.qvec_to_rotmat([h, 0, 0, h]), rot_z(90), atol=1e-12)


def test_empty_images(tmp_path):
    m = dio.parse_colmap(write_colmap(tmp_path, "1 PINHOLE 10 10 5 5 5 5\n", ""))
    assert m.images == {} and len(m.cameras) == 1


def test_unknown_model(tmp_path):
    d = write_colmap(tmp_path, "1 OPENCV 10 10 5 5 5 5 0 0 0 0\n", "")
    with pytest.raises(FormatError, match="OPENCV"):
        dio.parse_colmap(d)


def test_malformed_line_number(tmp_path):
    d = write_colmap(tmp_path, "1 PINHOLE 10 10 5 5 5 5\n", "1 1 0 0 x 0 0 0 1 a.png\n\n")
    with pytest.raises(ParseError) as exc:
        dio.parse_colmap(d)
    assert exc.value.line == 3


def test_points_and_tracks(tmp_path):
    d = write_colmap(tmp_path, "1 PINHOLE 10 10 5 5 5 5\n",
                     "1 1 0 0 0 0 0 0 1 a.png\n1.0 2.0 -1\n2 1 0 0 0 0 0 1 1 b.png\n\n",
                     "7 0 0 5 255 0 0 0.1 1 0 2 3\n")
    m = dio.parse_colmap(d)
    assert set(m.images) == {1, 2}
    np.testing.assert_array_equal(m.points[7][0], (0, 0, 5))
    assert m.points[7][1] == {1, 2}


# -- poses ------------------------------------------------------------------------


def test_w2c_identity():
    np.testing.assert_array_equal(dio.w2c_to_c2w(np.eye(3), np.zeros(3)), np.eye(4))


def test_w2c_rot_z():
    R = rot_z(90)
    M = dio.w2c_to_c2w(R, [1, 0, 0])
    np.testing.assert_allclose(M[:3, 3], (0, 1, 0), atol=1e-12)
    np.testing.assert_allclose(M[:3, :3], R.T, atol=1e-15)


def test_w2c_contract():
    with pytest.raises(ContractError):
        dio.w2c_to_c2w(np.diag([1, 1, 2.0]), np.zeros(3))


def test_colmap_to_gl_looks_forward():
    # COLMAP camera looks down +z of its frame; ours down -z
    M = dio.colmap_c2w_to_gl(np.eye(4))
    c = Camera(10, 10, 10, 10, 5, 5, M)
    np.testing.assert_allclose(c.directions(4.5, 4.5), (0, 0, 1), atol=1e-12)
    # image row 0 is at COLMAP -y
    assert c.directions(4.5, 0)[1] < 0


def test_llff_layout(tmp_path):
    arr = dio.write_llff([(np.eye(4), (100, 100, 100))], [(0.1, 10)], tmp_path / "p.npy")
    assert arr.shape == (1, 17)
    # hwf is the 5th column of the C-order flattened 3x5 block
    np.testing.assert_array_equal(arr[0, [4, 9, 14]], (100, 100, 100))
    np.testing.assert_array_equal(arr[0, 15:], (0.1, 10))
    back = np.load(tmp_path / "p.npy")
    assert back.dtype == np.dtype("<f8") and back.tobytes() == arr.tobytes()
    # LLFF rotation columns are (down, right, back)
    block = arr[0, :15].reshape(3, 5)
    gl = dio.colmap_c2w_to_gl(np.eye(4))
    np.testing.assert_array_equal(block[:, 0], -gl[:, 1])
    np.testing.assert_array_equal(block[:, 1], gl[:, 0])
    np.testing.assert_array_equal(block[:, 2], gl[:, 2])


def test_llff_payload_size(tmp_path):
    poses = [(np.eye(4), (8, 6, 5))] * 5
    dio.write_llff(poses, [(1, 2)] * 5, tmp_path / "p.npy")
    raw = (tmp_path / "p.npy").read_bytes()
    assert raw[:6] == b"\x93NUMPY" and raw[6:8] == b"\x01\x00"
    header_len = int.from_bytes(raw[8:10], "little")
    assert len(raw) - 10 - header_len == 5 * 17 * 8


def test_llff_mixed_sizes(tmp_path):
    with pytest.raises(UsageError):
        dio.write_llff([(np.eye(4), (8, 6, 5)), (np.eye(4), (8, 7, 5))], [(1, 2)] * 2, tmp_path / "p.npy")


def test_llff_roundtrip(tmp_path, rng):
    c2w = [look_at(rng.normal(size=3) * 3) for _ in range(4)]
    dio.write_llff([(M, (10, 12, 9.0)) for M in c2w], [(0.5, 4.0)] * 4, tmp_path / "p.npy", convention="gl")
    for M, v in zip(c2w, dio.read_llff(tmp_path / "p.npy")):
        np.testing.assert_allclose(v["c2w"], M, atol=1e-12)
        assert (v["height"], v["width"], v["focal"]) == (10, 12, 9)


# -- PNG ------------------------------------------------------------------------


def test_png_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
    dio.write_png(tmp_path / "a.png", img)
    assert dio.read_png(tmp_path / "a.png").tobytes() == img.tobytes()


def test_png_red_and_conversions(tmp_path):
    Image.new("RGB", (1, 1), (255, 0, 0)).save(tmp_path / "r.png")
    np.testing.assert_array_equal(dio.read_png(tmp_path / "r.png")[0, 0], (255, 0, 0))
    Image.new("RGBA", (2, 2), (10, 20, 30, 40)).save(tmp_path / "a.png")
    np.testing.assert_array_equal(dio.read_png(tmp_path / "a.png")[1, 1], (10, 20, 30))
    g = np.array([[0, 257, 65535, 32896]], dtype=np.uint16)
    Image.fromarray(g).save(tmp_path / "g16.png")
    out = dio.read_png(tmp_path / "g16.png")
    np.testing.assert_array_equal(out[0, :, 0], (0, 1, 255, 128))
    assert out.shape == (1, 4, 3)


def test_png_corrupt(tmp_path):
    (tmp_path / "x.png").write_bytes(b"\x89PNG garbage")
    with pytest.raises(FormatError):
        dio.read_png(tmp_path / "x.png")


# -- synthetic scenes -------------------------------------------------------------


def test_scene_spec_parse_and_validation():
    spec = dio.parse_scene_spec(SPEC_TEXT)
    assert len(spec.primitives) == 1 and spec.ring.count == 6
    with pytest.raises(ValidationError, match="cameras.count"):
        dio.parse_scene_spec(SPEC_TEXT.replace("count = 6", "count = 0"))
    with pytest.raises(ValidationError, match="sphere"):
        dio.parse_scene_spec(SPEC_TEXT.replace("radius = 0.5", "radius = -1"))
    with pytest.raises(ValidationError):
        dio.parse_scene_spec(SPEC_TEXT.replace("0.8 0.1 0.1", "1.5 0 0"))
    with pytest.raises(ValidationError, match="bogus"):
        dio.parse_scene_spec(SPEC_TEXT + "bogus = 1\n")
    with pytest.raises(ParseError):
        dio.parse_scene_spec(SPEC_TEXT + "cameras.count = 3\n")


def test_bundled_spec_counts():
    ds = dio.synth_scene(dio.load_scene_spec(bundled_path("sphere_ring.spec")))
    assert len(ds.split("train")) == 64 and len(ds.split("val")) == 8
    assert ds.views[0].image.shape == (128, 128, 3)


def test_center_pixel_shading_and_depth():
    spec = dio.parse_scene_spec(SPEC_TEXT.replace("32", "33"))
    ds = dio.synth_scene(spec)
    for v in ds.views:
        c = v.camera
        # odd size: pixel 16 is exactly the principal ray
        hit = c.center + (np.linalg.norm(c.center) - 0.5) * -c.center / np.linalg.norm(c.center)
        n = hit / np.linalg.norm(hit)
        L = np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8])
        expect = np.clip(np.array([0.8, 0.1, 0.1]) * (max(0, n @ L) + 0.1), 0, 1)
        np.testing.assert_array_equal(v.image[16, 16], dio.to_uint8(expect))
        assert abs(v.depth[16, 16] - (2.5 - 0.5)) <= 1e-9
        assert 0 < c.near < c.far


def test_empty_scene_background():
    spec = dio.parse_scene_spec("image.width = 8\nimage.height = 8\ncameras.count = 2\nscene.background = 0 0 1\n")
    ds = dio.synth_scene(spec)
    for v in ds.views:
        assert np.all(v.image == (0, 0, 255)) and np.all(v.depth == 0)


def test_synth_deterministic_and_oracle_consistent():
    spec = dio.parse_scene_spec(SPEC_TEXT)
    a, b = dio.synth_scene(spec), dio.synth_scene(spec)
    for va, vb in zip(a.views, b.views):
        assert va.image.tobytes() == vb.image.tobytes()
        img, _ = dio.render_analytic(spec, va.camera)
        assert img.tobytes() == va.image.tobytes()


def test_primitives_sdf_and_intersections(rng):
    a = np.ones(3)
    s = dio.Sphere(np.zeros(3), 0.5, a)
    p = dio.Plane(np.array([0, 0, 1.0]), -0.2, a)
    b = dio.Box(np.full(3, -0.3), np.full(3, 0.3), a)
    x = rng.uniform(-1, 1, (200, 3))
    np.testing.assert_allclose(s.sdf(x), np.linalg.norm(x, axis=1) - 0.5, atol=1e-12)
    o = np.tile([0, 0, 3.0], (1, 1))
    d = np.array([[0, 0, -1.0]])
    assert s.intersect(o, d)[0][0] == pytest.approx(2.5)
    assert b.intersect(o, d)[0][0] == pytest.approx(2.7)
    assert p.intersect(o, d)[0][0] == pytest.approx(3.2)
    assert abs(p.sdf(np.array([[0, 0, 0.0]]))[0]) == pytest.approx(0.2)


def test_dataset_save_load(tmp_path):
    ds = dio.synth_scene(dio.parse_scene_spec(SPEC_TEXT))
    dio.save_dataset(ds, tmp_path / "d")
    back = dio.load_dataset(tmp_path / "d")
    assert len(back.views) == len(ds.views) and back.background == ds.background
    for a, b in zip(ds.views, back.views):
        assert a.image.tobytes() == b.image.tobytes()
        np.testing.assert_array_equal(a.camera.c2w, b.camera.c2w)
        np.testing.assert_allclose(a.depth, b.depth, rtol=1e-6)
        assert a.split == b.split
    poses = dio.read_llff(tmp_path / "d" / "poses_bounds.npy")
    np.testing.assert_allclose(poses[0]["c2w"], ds.views[0].camera.c2w, atol=1e-12)
    with pytest.raises(FormatError):
        dio.load_dataset(tmp_path)


def test_dataset_validation():
    ds = dio.synth_scene(dio.parse_scene_spec(SPEC_TEXT.replace("count = 6", "count = 1")))
    with pytest.raises(ValidationError):
        ds.validate()


def test_colmap_views_missing(tmp_path):
    d = write_colmap(tmp_path / "sparse", "1 PINHOLE 4 4 4 4 2 2\n",
                     "1 1 0 0 0 0 0 3 1 a.png\n\n2 1 0 0 0 0 0 3 1 b.png\n\n",
                     "1 0 0 0 1 1 1 0 1 0 2 0\n")
    (tmp_path / "images").mkdir()
    dio.write_png(tmp_path / "images" / "a.png", np.zeros((4, 4, 3), np.uint8))
    model = dio.parse_colmap(d)
    views, missing = dio.colmap_views(model, tmp_path / "images")
    assert missing == ["b.png"] and len(views) == 2
    # camera center = -R^T t = (0, 0, -3) and it looks down +z toward the point at the origin
    np.testing.assert_allclose(views[0].camera.center, (0, 0, -3))
    np.testing.assert_allclose(views[0].camera.directions(1.5, 1.5), (0, 0, 1), atol=1e-12)
    assert views[0].camera.near == pytest.approx(0.9 * 3) and views[0].camera.far == pytest.approx(1.1 * 3)
