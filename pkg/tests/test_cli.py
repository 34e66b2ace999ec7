import json

import numpy as np
import pytest

from voxsplat.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    rc = main(["synth", "--out", str(d / "scene"), "--seed", "4", "--boxes", "2",
               "--size", "32", "--views", "3", "--noise", "0.0"])
    assert rc == 0
    return d


def test_manifest_schema_keys(workspace):
    doc = json.loads((workspace / "scene" / "scene.json").read_text())
    assert set(doc) == {"meters_per_unit", "voxel_size", "foreground_box", "frames"}
    assert set(doc["foreground_box"]) == {"min", "max"}
    frame = doc["frames"][0]
    assert set(frame) == {"image", "depth", "intrinsics", "camera_to_world",
                          "width", "height"}
    assert len(frame["intrinsics"]) == 4
    assert len(frame["camera_to_world"]) == 16


def test_fuse_writes_point_file(workspace):
    out = workspace / "cloud.pts"
    rc = main(["fuse", "--scene", str(workspace / "scene" / "scene.json"),
               "--out", str(out)])
    assert rc == 0
    from voxsplat.scene import load_point_cloud
    pos, col = load_point_cloud(out)
    assert pos.shape[0] > 100
    assert np.all((col >= 0) & (col <= 1))


def test_train_infer_render_eval_chain(workspace, capsys):
    scene = str(workspace / "scene" / "scene.json")
    ckpt = str(workspace / "model.ckpt")
    rc = main(["train", "--scene", scene, "--out", ckpt, "--steps", "3",
               "--seed", "0", "--channels", "4", "--quiet"])
    assert rc == 0
    snap = str(workspace / "model.gauss")
    rc = main(["infer", "--scene", scene, "--checkpoint", ckpt, "--out", snap])
    assert rc == 0
    rdir = workspace / "renders"
    rc = main(["render", "--scene", scene, "--snapshot", snap,
               "--out", str(rdir), "--save-ofg"])
    assert rc == 0
    assert (rdir / "render_000.png").exists()
    assert (rdir / "ofg_000.npy").exists()
    ofg = np.load(rdir / "ofg_000.npy")
    assert ofg.shape == (32, 32)
    rc = main(["eval", "--scene", scene,
               "--holdout", str(workspace / "scene" / "holdout.json"),
               "--snapshot", snap])
    assert rc == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert line.startswith("psnr=")


def test_finetune_cli(workspace):
    scene = str(workspace / "scene" / "scene.json")
    ckpt = str(workspace / "model.ckpt")
    out = str(workspace / "tuned.gauss")
    rc = main(["finetune", "--scene", scene, "--checkpoint", ckpt, "--out", out,
               "--steps", "3", "--quiet"])
    assert rc == 0
    from voxsplat.scene import load_snapshot
    assert len(load_snapshot(out)) > 0


def test_cli_error_reporting(tmp_path, capsys):
    rc = main(["fuse", "--scene", str(tmp_path / "missing.json"),
               "--out", str(tmp_path / "x.pts")])
    assert rc == 2
    assert "error:" in capsys.readouterr().err


def test_selftest_smoke(tmp_path, capsys):
    rc = main(["selftest", "--out", str(tmp_path / "st"), "--seed", "1",
               "--steps", "2", "--deterministic"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "sha256" in out
