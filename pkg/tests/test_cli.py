import json

import jsonschema
import pytest

from esfm import cli
from esfm.equinet import init_params, model_forward
from esfm.errors import NonFiniteLoss
from esfm.geometry import evaluate_metrics, triangulate_tracks
from esfm.pipeline import prepare
from esfm.scene_io import read_tracks

SMALL = {"encoder_widths": [16, 16], "head_widths": [16]}


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "synth.json").write_text(json.dumps({"m": 6, "n": 40, "seed": 2}))
    (tmp_path / "train.json").write_text(json.dumps(SMALL))
    assert cli.dispatch(["synth", "--config", str(tmp_path / "synth.json"),
                         "--out", str(tmp_path / "s.tracks")]) == 0
    return tmp_path


def run_reconstruct(d, *extra, report="r.json"):
    return cli.dispatch(["reconstruct", "--scene", str(d / "s.tracks"), "--config", str(d / "train.json"),
                         "--seed", "1", "--out-report", str(d / report), "--out-ply", str(d / "r.ply"),
                         *extra])


def test_end_to_end_schema(workdir, capsys):
    assert run_reconstruct(workdir, "--epochs", "30") == 0
    out = capsys.readouterr().out
    assert "reproj_px(pre-BA)" in out
    rep = json.loads((workdir / "r.json").read_text())
    jsonschema.validate(rep, cli.REPORT_SCHEMA)
    assert rep["scene"]["m"] == 6 and rep["loss"]["epochs"] == 30
    assert rep["metrics"]["after_ba"]["mean_reprojection_px"] <= rep["metrics"]["before_ba"]["mean_reprojection_px"] + 1e-9
    assert (workdir / "r.ply").read_text().startswith("ply")


def test_zero_epochs_no_ba_is_init_forward(workdir):
    assert run_reconstruct(workdir, "--epochs", "0", "--no-ba") == 0
    rep = json.loads((workdir / "r.json").read_text())
    assert rep["ba"] is None and rep["metrics"]["after_ba"] is None
    prep = prepare(read_tracks(workdir / "s.tracks"))
    p = init_params("calibrated", SMALL["encoder_widths"], SMALL["head_widths"], seed=1)
    cams, net = model_forward(p, prep.tensor, record=False)
    pts, _ = triangulate_tracks(cams.matrices, prep.tensor, fallback=net)
    m = evaluate_metrics(cams, pts, prep.scene.gt_cameras, prep.tensor, prep.transforms)
    assert rep["metrics"]["before_ba"]["mean_reprojection_px"] == pytest.approx(m.mean_reprojection_px, rel=1e-12)


def test_reports_reproducible(workdir):
    run_reconstruct(workdir, "--epochs", "10", report="a.json")
    run_reconstruct(workdir, "--epochs", "10", report="b.json")
    a, b = (json.loads((workdir / f).read_text()) for f in ("a.json", "b.json"))
    a.pop("timings"), b.pop("timings")
    assert a == b


def test_eval_from_report(workdir, capsys):
    run_reconstruct(workdir, "--epochs", "10")
    rep = json.loads((workdir / "r.json").read_text())
    capsys.readouterr()
    assert cli.dispatch(["eval", "--scene", str(workdir / "s.tracks"),
                         "--cameras-from", str(workdir / "r.json")]) == 0
    got = json.loads(capsys.readouterr().out)
    assert got["mean_reprojection_px"] == pytest.approx(rep["metrics"]["after_ba"]["mean_reprojection_px"], rel=1e-12)


def test_train_finetune_eval(workdir, capsys):
    for sub in ("train", "val"):
        (workdir / sub).mkdir()
    for k, sub in enumerate(["train", "train", "val"]):
        cfg = workdir / f"s{k}.json"
        cfg.write_text(json.dumps({"m": 6, "n": 40, "seed": 10 + k}))
        cli.dispatch(["synth", "--config", str(cfg), "--out", str(workdir / sub / f"{k}.tracks")])
    tcfg = dict(SMALL, epochs=4, val_period=2, subset_range=[4, 6])
    (workdir / "tc.json").write_text(json.dumps(tcfg))
    assert cli.dispatch(["train", "--train-dir", str(workdir / "train"), "--val-dir", str(workdir / "val"),
                         "--config", str(workdir / "tc.json"), "--out", str(workdir / "m.ckpt")]) == 0
    assert cli.dispatch(["finetune", "--model", str(workdir / "m.ckpt"), "--scene", str(workdir / "s.tracks"),
                         "--epochs", "5", "--out-report", str(workdir / "f.json")]) == 0
    jsonschema.validate(json.loads((workdir / "f.json").read_text()), cli.REPORT_SCHEMA)
    capsys.readouterr()
    assert cli.dispatch(["eval", "--scene", str(workdir / "s.tracks"),
                         "--cameras-from", str(workdir / "m.ckpt")]) == 0
    assert "mean_reprojection_px" in capsys.readouterr().out


def test_gradcheck_command(capsys):
    assert cli.dispatch(["gradcheck", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    err = float(out.split("max relative error ")[1].split()[0])
    assert err < 1e-5


def test_exit_codes(workdir, monkeypatch, capsys):
    assert cli.dispatch(["nonsense"]) == 2
    assert cli.dispatch(["reconstruct"]) == 2
    assert cli.dispatch(["reconstruct", "--scene", str(workdir / "missing.tracks")]) == 3
    (workdir / "bad.tracks").write_text("ESFM-TRACKS 1\n2 1 3 PROJECTIVE\nO 0 0 1 1\nO 1 0 2 2\n")
    assert cli.dispatch(["reconstruct", "--scene", str(workdir / "bad.tracks")]) == 3
    assert "CountMismatch" in capsys.readouterr().err

    def boom(*a, **k):
        raise NonFiniteLoss(7, float("nan"), "optimize")

    monkeypatch.setattr(cli, "reconstruct", boom)
    assert run_reconstruct(workdir) == 4
    err = capsys.readouterr().err
    assert "reconstruct" in err and "optimize" in err


def test_thread_env(workdir, monkeypatch):
    monkeypatch.setenv("ESFM_THREADS", "1")
    assert run_reconstruct(workdir, "--epochs", "2", "--no-ba") == 0
    monkeypatch.setenv("ESFM_THREADS", "x")
    assert run_reconstruct(workdir, "--epochs", "2", "--no-ba") == 2
