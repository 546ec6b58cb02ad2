import re

import numpy as np
import pytest

from nerfkit import geometry as geo
from nerfkit.cli import main
from nerfkit.dataio import read_llff, read_png, write_png

TINY = """
image.width = 10
image.height = 10
cameras.count = 4
cameras.val_every = 2
cameras.radius = 2.5
sphere.0.center = 0 0 0
sphere.0.radius = 0.5
sphere.0.albedo = 0.8 0.2 0.1
"""

MICRO = ["--set", "grid_levels=3", "--set", "grid_table_size=512", "--set", "grid_max_resolution=16",
         "--set", "grid_base_resolution=4", "--set", "rays_per_batch=16", "--set", "samples_per_ray=12",
         "--set", "log_interval=2"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.spec").write_text(TINY)
    assert main(["synth", str(d / "tiny.spec"), "--out", str(d / "data")]) == 0
    return d


@pytest.fixture(scope="module")
def checkpoint(workdir):
    code = main(["train", str(workdir / "data"), "--out", str(workdir / "run"), "--iterations", "6",
                 "--seed", "1", "--backend", "sdf", *MICRO])
    assert code == 0
    return workdir / "run" / "model.ckpt"


def test_synth_bundled(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "sphere_ring", "--out", tmp_path / "d")
    assert code == 0 and "64 train, 8 val" in out and "128x128" in out
    assert len(list((tmp_path / "d" / "images").glob("*.png"))) == 72


def test_synth_deterministic(workdir, tmp_path):
    assert main(["synth", str(workdir / "tiny.spec"), "--out", str(tmp_path / "b")]) == 0
    for p in sorted((workdir / "data").rglob("*")):
        if p.is_file():
            assert p.read_bytes() == (tmp_path / "b" / p.relative_to(workdir / "data")).read_bytes()


def test_synth_invalid(tmp_path, capsys):
    (tmp_path / "bad.spec").write_text(TINY.replace("count = 4", "count = 0"))
    code, _, err = run(capsys, "synth", tmp_path / "bad.spec", "--out", tmp_path / "o")
    assert code != 0
    lines = err.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("error[ValidationError]") and "cameras.count" in lines[0]


def _colmap(tmp_path, names=("a.png",)):
    sp = tmp_path / "sparse"
    sp.mkdir()
    (sp / "cameras.txt").write_text("1 SIMPLE_PINHOLE 8 6 7 4 3\n")
    (sp / "images.txt").write_text("".join(f"{k + 1} 1 0 0 0 0 0 3 1 {n}\n\n" for k, n in enumerate(names)))
    (sp / "points3D.txt").write_text("1 0 0 0 1 1 1 0 1 0 2 0\n2 0.1 0.2 0.1 1 1 1 0 1 0 2 0\n")
    (tmp_path / "img").mkdir()
    write_png(tmp_path / "img" / "a.png", np.zeros((6, 8, 3), np.uint8))
    return sp


def test_prepare_single_camera(tmp_path, capsys):
    sp = _colmap(tmp_path)
    for _ in range(2):
        assert run(capsys, "prepare", sp, tmp_path / "img", "--out", tmp_path / "o")[0] == 0
        first = (tmp_path / "o" / "poses_bounds.npy").read_bytes() if _ == 0 else first
    assert (tmp_path / "o" / "poses_bounds.npy").read_bytes() == first
    rows = read_llff(tmp_path / "o" / "poses_bounds.npy")
    assert len(rows) == 1 and (rows[0]["height"], rows[0]["width"], rows[0]["focal"]) == (6, 8, 7)


def test_prepare_missing(tmp_path, capsys):
    sp = _colmap(tmp_path, ("a.png", "gone.png"))
    code, _, err = run(capsys, "prepare", sp, tmp_path / "img", "--out", tmp_path / "o")
    assert code != 0 and "gone.png" in err and "error[UsageError]" in err
    assert run(capsys, "prepare", sp, tmp_path / "img", "--out", tmp_path / "o", "--allow-missing")[0] == 0


def test_train_outputs(workdir, checkpoint):
    run_dir = checkpoint.parent
    assert {"model.ckpt", "config.cfg", "report.jsonl"} <= {p.name for p in run_dir.iterdir()}
    report = (run_dir / "report.jsonl").read_text()
    assert '"l_eik"' in report and '"psnr_val"' in report.splitlines()[-1]


def test_train_zero_iterations_and_seed(workdir, tmp_path, capsys):
    code, out, _ = run(capsys, "train", workdir / "data", "--out", tmp_path / "r", "--iterations", "0", *MICRO)
    assert code == 0 and re.search(r"^seed: \d+$", out, re.M) and "final iteration=0" in out
    assert (tmp_path / "r" / "model.ckpt").is_file()


def test_train_bad_override(workdir, tmp_path, capsys):
    code, _, err = run(capsys, "train", workdir / "data", "--out", tmp_path / "r", "--set", "nonsense=1")
    assert code == 2 and err.startswith("error[ValidationError]")


def test_render_val_and_orbit(workdir, checkpoint, tmp_path, capsys):
    code, out, _ = run(capsys, "render", checkpoint, "--dataset", workdir / "data", "--out", tmp_path / "v",
                       "--samples", "16", "--depth")
    assert code == 0 and sorted(p.name for p in (tmp_path / "v").glob("*.png")) == ["000.png", "002.png"]
    assert "psnr=" in out
    code, _, _ = run(capsys, "render", checkpoint, "--orbit", "8", "--size", "8", "--samples", "8",
                     "--out", tmp_path / "o")
    assert code == 0 and sorted(p.name for p in (tmp_path / "o").glob("*.png")) == [f"{k:03d}.png" for k in range(8)]


def test_extract(checkpoint, workdir, tmp_path, capsys):
    code, out, _ = run(capsys, "extract", checkpoint, "--mode", "mesh", "--resolution", "24", "--out", tmp_path / "m")
    assert code == 0
    mesh = geo.read_obj(tmp_path / "m" / "mesh.obj")
    assert mesh.n_triangles > 100 and mesh.colors is not None
    code, out, _ = run(capsys, "extract", checkpoint, "--mode", "points", "--dataset", workdir / "data",
                       "--split", "all", "--stride", "1000", "--out", tmp_path / "p")
    assert code == 0 and len(geo.read_ply(tmp_path / "p" / "points.ply")) <= 4
    code, _, err = run(capsys, "extract", checkpoint, "--mode", "points", "--texture", "--out", tmp_path / "x")
    assert code != 0 and err.startswith("error[UsageError]")


def test_extract_texture(checkpoint, tmp_path, capsys):
    code, _, _ = run(capsys, "extract", checkpoint, "--mode", "mesh", "--resolution", "16", "--texture",
                     "--texture-size", "64", "--out", tmp_path / "t")
    assert code == 0
    assert read_png(tmp_path / "t" / "mesh.png").shape == (64, 64, 3)
    assert "map_Kd mesh.png" in (tmp_path / "t" / "mesh.mtl").read_text()


def test_eval(workdir, tmp_path, capsys):
    imgs = workdir / "data" / "images"
    code, out, _ = run(capsys, "eval", "psnr", imgs, imgs)
    assert code == 0 and "psnr_mean value=inf" in out
    a = np.full((4, 4, 3), 100, np.uint8)
    write_png(tmp_path / "a.png", a)
    write_png(tmp_path / "b.png", a + 1)
    out = run(capsys, "eval", "psnr", tmp_path / "a.png", tmp_path / "b.png")[1]
    assert abs(float(re.search(r"^psnr value=(\S+)", out, re.M).group(1)) - 48.1308) <= 1e-3
    pc = geo.PointCloud(np.random.default_rng(0).normal(size=(50, 3)), np.zeros((50, 3)))
    geo.write_ply(tmp_path / "c.ply", pc)
    out = run(capsys, "eval", "chamfer", tmp_path / "c.ply", tmp_path / "c.ply", "--seed", "0")[1]
    assert "chamfer value=0.0" in out


def test_missing_file_error(tmp_path, capsys):
    code, _, err = run(capsys, "render", tmp_path / "nope.ckpt", "--orbit", "1", "--out", tmp_path / "o")
    assert code != 0 and len(err.strip().splitlines()) == 1 and err.startswith("error[")


def test_usage_error_exit(capsys):
    code, _, err = run(capsys, "frobnicate")
    assert code == 2 and err.startswith("error[UsageError]")
