import csv
import json
import time

import numpy as np
import pytest

from handavatar import cli
from handavatar.avatar_io import import_avatar, load_sequence
from handavatar.state import AvatarState


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def seq(tmp_path_factory):
    out = tmp_path_factory.mktemp("seq")
    assert run("synth", "--out", out, "--frames", 3, "--size", 32, "--texture-size", 16) == 0
    return out


@pytest.fixture(scope="module")
def fitted(seq, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    assert run("fit", "--sequence", seq, "--out", out, "--epochs", "1,1,1", "--texture-size", 16) == 0
    return out


def test_synth_layout(seq):
    ds = load_sequence(seq)
    assert ds.n_frames == 3 and ds.images.shape == (3, 32, 32, 3)
    assert (seq / "ground_truth.json").exists() and (seq / "rig").is_dir()


def test_fit_outputs(fitted):
    for name in ("avatar/avatar.obj", "avatar/state", "energy.csv", "renders/sequence.json", "run.log"):
        assert (fitted / name).exists(), name
    rows = list(csv.reader((fitted / "energy.csv").open()))
    assert rows[0] == ["epoch", "stage", "term", "value"]
    assert {r[1] for r in rows[1:]} == {"geometry", "joint", "appearance"}


def test_zero_epochs_returns_initialization(seq, tmp_path):
    assert run("fit", "--sequence", seq, "--out", tmp_path, "--epochs", "0,0,0", "--texture-size", 8) == 0
    st, rig, _ = import_avatar(tmp_path / "avatar")
    ds = load_sequence(seq)
    init = AvatarState.initial(rig, ds.poses, 8).rounded()
    assert st.gammas.tobytes() == init.gammas.tobytes()
    assert st.albedo.tobytes() == init.albedo.tobytes()
    assert (st.displacement == 0).all()


def test_no_shadow_renders_unit_visibility(seq, tmp_path):
    assert run("fit", "--sequence", seq, "--out", tmp_path, "--epochs", "0,0,0", "--texture-size", 8,
               "--no-shadow") == 0
    st, rig, cam = import_avatar(tmp_path / "avatar")
    imgs, _ = cli.render_state(rig, st, cam, [st.pose(t) for t in range(st.n_frames)], shadows=False)
    got = load_sequence(tmp_path / "renders").images
    np.testing.assert_array_equal(got, np.rint(np.clip(imgs, 0, 1) * 255) / 255)


def test_render_reproduces_fit_renders(fitted, tmp_path):
    assert run("render", "--avatar", fitted / "avatar", "--out", tmp_path) == 0
    a, b = load_sequence(tmp_path), load_sequence(fitted / "renders")
    assert a.images.tobytes() == b.images.tobytes()
    assert a.masks.tobytes() == b.masks.tobytes()


def test_render_empty_poses(fitted, tmp_path):
    (tmp_path / "poses.json").write_text("[]")
    assert run("render", "--avatar", fitted / "avatar", "--poses", tmp_path / "poses.json",
               "--out", tmp_path / "r") == 0
    assert json.loads((tmp_path / "r/sequence.json").read_text())["frames"] == []


def test_eval_identical_folders(seq, tmp_path):
    assert run("eval", "--pred", seq, "--ref", seq, "--out", tmp_path / "m.csv") == 0
    rows = list(csv.DictReader((tmp_path / "m.csv").open()))
    assert [r["frame"] for r in rows] == ["0", "1", "2", "mean"]
    for r in rows:
        assert float(r["iou"]) == 1.0 and float(r["l1"]) == 0.0
        assert float(r["ms_ssim"]) == pytest.approx(1.0, abs=1e-6)


def test_refine_pose_report(fitted, seq, tmp_path):
    assert run("refine-pose", "--avatar", fitted / "avatar", "--sequence", seq, "--mode", "sil",
               "--epochs", 1, "--out", tmp_path) == 0
    rows = list(csv.reader((tmp_path / "pose_error.csv").open()))
    assert rows[0] == ["frame", "init_pa_mpvpe_mm", "pa_mpvpe_mm"]
    assert len(rows) == 1 + 3 + 1
    assert len(json.loads((tmp_path / "poses.json").read_text())) == 3


def test_unknown_config_key_fails_fast(seq, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"weights.sil": 1.0, "weights.bogus": 2.0}))
    t0 = time.perf_counter()
    assert run("fit", "--config", cfg, "--sequence", seq, "--out", tmp_path / "o") == 2
    assert time.perf_counter() - t0 < 1.0
    assert "weights.bogus" in capsys.readouterr().err


@pytest.mark.parametrize("bad", [{"schedule.epochs": [1, 2]}, {"weights.sil": -1}, {"render.shadows": "yes"},
                                 {"mode": "x"}, {"lights.count": 0}])
def test_bad_config_values(bad, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(bad))
    assert run("fit", "--config", cfg, "--sequence", tmp_path, "--out", tmp_path / "o") == 2


def test_missing_sequence_is_config_error(tmp_path):
    assert run("fit", "--sequence", tmp_path / "nope", "--out", tmp_path / "o", "--epochs", "0,0,0") == 2


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 3, "schedule.epochs": [1, 2, 3]}))
    c = cli.load_config(cfg, {"seed": 7})
    assert c["seed"] == 7 and c["schedule.epochs"] == [1, 2, 3] and c["weights.sil"] == 7.0


def test_same_seed_same_outputs(seq, tmp_path):
    for k in ("a", "b"):
        assert run("fit", "--sequence", seq, "--out", tmp_path / k, "--epochs", "1,1,0", "--texture-size", 8,
                   "--seed", 4) == 0
    assert (tmp_path / "a/energy.csv").read_bytes() == (tmp_path / "b/energy.csv").read_bytes()
    assert (tmp_path / "a/renders/images/0001.png").read_bytes() == \
        (tmp_path / "b/renders/images/0001.png").read_bytes()


def test_gradcheck_command(capsys):
    assert run("gradcheck", "--size", 48, "--coords", 30) == 0
    assert "PASS" in capsys.readouterr().out
