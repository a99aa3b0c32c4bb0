import hashlib
import json
import os

import numpy as np
import pytest

from glintforge.cli import EXIT_IO, EXIT_OK, EXIT_SCHEMA, EXIT_USAGE, main
from glintforge.envlight import load_chain, read_pfm, write_pfm
from glintforge.scene import Camera

from conftest import sphere_doc


def run(*argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as e:
        return e.code


def digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture(scope="module")
def assets(tmp_path_factory):
    d = tmp_path_factory.mktemp("assets")
    assert run("bake-lut", "--size", 16, "--samples", 256, "--seed", 1, "--out", d / "lut.bin") == EXIT_OK
    h, w = 32, 64
    v = np.linspace(0, 1, h)[:, None, None]
    write_pfm(d / "sky.pfm", np.broadcast_to(0.4 + 0.8 * (1 - v), (h, w, 3)).astype(np.float32))
    write_pfm(d / "white.pfm", np.ones((h, w, 3), np.float32))
    assert run("bake-env", "--in", d / "sky.pfm", "--faces", 16, "--levels", 4, "--out", d / "sky.cmip") == EXIT_OK
    assert run("bake-env", "--in", d / "white.pfm", "--faces", 16, "--levels", 4,
               "--out", d / "white.cmip") == EXIT_OK
    doc = sphere_doc((0.8, 0.4, 0.2), 0.4, 0.3, march={"samples": 32, "secondary_samples": 16})
    (d / "sphere.json").write_text(json.dumps(doc))
    return d


def shading_args(a, env="sky.cmip", scene="sphere.json"):
    return ["--scene", a / scene, "--env", a / env, "--lut", a / "lut.bin"]


def test_bake_lut_deterministic(tmp_path):
    for name in ("a.bin", "b.bin"):
        assert run("bake-lut", "--size", 8, "--samples", 64, "--seed", 1, "--threads", 2,
                   "--out", tmp_path / name) == EXIT_OK
    assert digest(tmp_path / "a.bin") == digest(tmp_path / "b.bin")
    assert json.loads((tmp_path / "a.bin.manifest.json").read_text())["params"]["size"] == 8


def test_usage_errors(tmp_path, assets):
    assert run("bake-lut", "--size", 1, "--out", tmp_path / "x.bin") == EXIT_USAGE
    assert run("bake-env", "--in", assets / "sky.pfm", "--levels", 1, "--out", tmp_path / "x.cmip") == EXIT_USAGE
    assert run("bake-env", "--in", assets / "sky.pfm", "--faces", 24, "--out", tmp_path / "x.cmip") == EXIT_USAGE
    assert run("render", *shading_args(assets), "--rho-t", 1.5, "--out", tmp_path / "r") == EXIT_USAGE
    assert run("frobnicate") == EXIT_USAGE


@pytest.mark.slow
def test_large_env_flags_accepted(tmp_path):
    # a tiny source keeps the 512-face bake affordable
    write_pfm(tmp_path / "c.pfm", np.full((4, 8, 3), 0.5, np.float32))
    assert run("bake-env", "--in", tmp_path / "c.pfm", "--faces", 512, "--levels", 6,
               "--out", tmp_path / "c.cmip") == EXIT_OK
    chain = load_chain(tmp_path / "c.cmip")
    assert chain.face_size == 512 and chain.n_levels == 6


def test_bad_pfm_is_io_error(tmp_path):
    (tmp_path / "bad.pfm").write_bytes(b"P6\n4 4\n255\n" + bytes(48))
    assert run("bake-env", "--in", tmp_path / "bad.pfm", "--out", tmp_path / "x.cmip") == EXIT_IO
    assert run("bake-env", "--in", tmp_path / "missing.pfm", "--out", tmp_path / "x.cmip") == EXIT_IO


def test_constant_pfm_gives_constant_chain(assets):
    chain = load_chain(assets / "white.cmip")
    for level in chain.levels:
        np.testing.assert_allclose(level, 1.0, atol=1e-5)


def test_render_outputs(tmp_path, assets):
    out = tmp_path / "img"
    assert run("render", *shading_args(assets), "--width", 64, "--height", 64, "--out", out) == EXIT_OK
    images = ["img.pfm", "img.png", "img.normal.pfm", "img.rough.pfm", "img.opacity.pfm"]
    for name in images + ["img.camera.json", "img.manifest.json"]:
        assert (tmp_path / name).is_file(), name
    assert read_pfm(tmp_path / "img.pfm").shape == (64, 64, 3)
    # scalar maps are stored as grey color PFMs
    op = read_pfm(tmp_path / "img.opacity.pfm")
    assert op.shape == (64, 64, 3) and np.all(op[..., 0] == op[..., 2])


def test_builtin_scene(tmp_path, assets):
    args = ["--scene", "builtin:sphere", "--env", assets / "sky.cmip", "--lut", assets / "lut.bin"]
    assert run("render", *args, "--width", 8, "--height", 8, "--out", tmp_path / "b") == EXIT_OK
    assert run("render", *args[:1], "builtin:nope", *args[2:], "--out", tmp_path / "c") == EXIT_IO


def test_relight_with_training_env_matches_render(tmp_path, assets):
    common = [*shading_args(assets), "--width", 24, "--height", 24, "--seed", 5, "--jitter"]
    assert run("render", *common, "--out", tmp_path / "r") == EXIT_OK
    assert run("relight", *common, "--out", tmp_path / "l") == EXIT_OK
    assert digest(tmp_path / "r.pfm") == digest(tmp_path / "l.pfm")


def test_rho_t_zero_equals_indirect_off(tmp_path, assets):
    doc = sphere_doc((0.9, 0.9, 0.9), 0.05, 1.0, march={"samples": 32, "secondary_samples": 16})
    doc["primitives"].append({"type": "box", "center": [-1.6, 0, 0], "size": [0.2, 1.5, 1.5],
                              "material": {"albedo": [0.8, 0.1, 0.1], "roughness": 0.8}})
    (tmp_path / "s.json").write_text(json.dumps(doc))
    common = ["--scene", tmp_path / "s.json", "--env", assets / "sky.cmip", "--lut", assets / "lut.bin",
              "--width", 24, "--height", 24]
    assert run("render", *common, "--rho-t", 0, "--out", tmp_path / "z") == EXIT_OK
    assert run("render", *common, "--no-indirect", "--out", tmp_path / "n") == EXIT_OK
    assert run("render", *common, "--out", tmp_path / "i") == EXIT_OK
    assert digest(tmp_path / "z.pfm") == digest(tmp_path / "n.pfm")
    assert digest(tmp_path / "z.pfm") != digest(tmp_path / "i.pfm")


def test_schema_error_names_field(tmp_path, assets, capsys):
    doc = sphere_doc()
    doc["primitives"][0]["material"]["roughness"] = 2.0
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    code = run("render", "--scene", tmp_path / "bad.json", "--env", assets / "sky.cmip",
               "--lut", assets / "lut.bin", "--out", tmp_path / "x")
    assert code == EXIT_SCHEMA
    assert "primitives[0].material.roughness" in capsys.readouterr().err


def test_missing_inputs_are_io_errors(tmp_path, assets):
    assert run("render", "--scene", tmp_path / "none.json", "--env", assets / "sky.cmip",
               "--lut", assets / "lut.bin", "--out", tmp_path / "x") == EXIT_IO
    assert run("render", *shading_args(assets)[:4], "--lut", tmp_path / "none.bin",
               "--out", tmp_path / "x") == EXIT_IO


def test_compare_mc_report(tmp_path, assets):
    report = tmp_path / "r.json"
    assert run("compare-mc", *shading_args(assets, env="white.cmip"), "--width", 12, "--height", 12,
               "--spp", 128, 256, "--out-error", tmp_path / "e.pfm", "--report", report) == EXIT_OK
    doc = json.loads(report.read_text())
    assert doc["spp"] == 256 and [r["spp"] for r in doc["runs"]] == [128, 256]
    assert {"psnr", "mean_rel_error", "max_rel_error"} <= set(doc)
    v128, v256 = (r["mc_variance"] for r in doc["runs"])
    assert v256 < v128
    assert read_pfm(tmp_path / "e.pfm").shape[:2] == (12, 12)


def _views(tmp_path, assets, n=2):
    vd = tmp_path / "views"
    for k in range(n):
        t = 2 * np.pi * k / n
        cam = Camera((3 * np.sin(t), 0.4, 3 * np.cos(t)), (0, 0, 0), fov_deg=40)
        (tmp_path / f"cam{k}.json").write_text(json.dumps(cam.to_dict()))
        assert run("render", *shading_args(assets), "--camera", tmp_path / f"cam{k}.json",
                   "--width", 12, "--height", 12, "--out", vd / f"v{k}") == EXIT_OK
        (vd / f"v{k}.pfm.manifest.json").unlink(missing_ok=True)
    return vd


def test_estimate_zero_iterations_returns_init(tmp_path, assets):
    vd = _views(tmp_path, assets)
    out = tmp_path / "est.json"
    assert run("estimate", *shading_args(assets), "--views", vd, "--iters", 0, "--init-albedo", 0.5,
               "--init-roughness", 0.5, "--init-metallic", 0.5, "--out", out) == EXIT_OK
    doc = json.loads(out.read_text())
    m = doc["materials"][0]
    assert m["albedo"] == [0.5, 0.5, 0.5] and m["roughness"] == 0.5 and m["metallic"] == 0.5
    assert doc["iterations"] == 0 and doc["views"] == ["v0.pfm", "v1.pfm"]


def test_estimate_short_run_reduces_loss(tmp_path, assets):
    vd = _views(tmp_path, assets)
    out = tmp_path / "est.json"
    assert run("estimate", *shading_args(assets), "--views", vd, "--iters", 20, "--out", out) == EXIT_OK
    doc = json.loads(out.read_text())
    assert doc["final_loss"] < doc["loss_trace"][0] and len(doc["channel_scales"]) == 3


def test_estimate_view_errors(tmp_path, assets, capsys):
    vd = _views(tmp_path, assets)
    (vd / "v1.camera.json").unlink()
    code = run("estimate", *shading_args(assets), "--views", vd, "--iters", 0, "--out", tmp_path / "e.json")
    assert code == EXIT_SCHEMA and "v1.pfm" in capsys.readouterr().err
    empty = tmp_path / "empty"
    empty.mkdir()
    code = run("estimate", *shading_args(assets), "--views", empty, "--iters", 0, "--out", tmp_path / "e.json")
    assert code == EXIT_USAGE


def test_seed_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("GLINTFORGE_SEED", "7")
    assert run("bake-lut", "--size", 4, "--samples", 64, "--out", tmp_path / "a.bin") == EXIT_OK
    assert json.loads((tmp_path / "a.bin.manifest.json").read_text())["seed"] == 7
    monkeypatch.delenv("GLINTFORGE_SEED")
    assert run("bake-lut", "--size", 4, "--samples", 64, "--seed", 7, "--out", tmp_path / "b.bin") == EXIT_OK
    assert digest(tmp_path / "a.bin") == digest(tmp_path / "b.bin")
    monkeypatch.setenv("GLINTFORGE_SEED", "x")
    assert run("bake-lut", "--size", 4, "--samples", 64, "--out", tmp_path / "c.bin") == EXIT_USAGE


@pytest.mark.parametrize("threads", [1, 4, os.cpu_count()])
def test_replay_byte_identical(tmp_path, assets, threads):
    out = tmp_path / "r"
    assert run("render", *shading_args(assets), "--width", 16, "--height", 16, "--jitter", "--seed", 3,
               "--threads", 2, "--out", out) == EXIT_OK
    before = digest(tmp_path / "r.pfm")
    (tmp_path / "r.pfm").unlink()
    assert run("replay", tmp_path / "r.manifest.json", "--threads", threads) == EXIT_OK
    assert digest(tmp_path / "r.pfm") == before
