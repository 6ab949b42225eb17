import json
import subprocess
import sys

import pytest

from gmattrib import cli
from gmattrib.evaluation import PredictionRecord, load_records, build_report
from gmattrib.manifest import DatasetManifest


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, ws = root / "data", root / "ws"
    assert cli.main(["synth", "--out", str(data), "--per-source", "10"]) == 0
    rc = cli.main(["run", "--manifest", str(data / "manifest.jsonl"), "--workspace", str(ws),
                   "--phases", "I,II,III", "--seeds", "2021", "--batch-size", "8", "--max-epochs", "1",
                   "--individual", "jpeg"])
    assert rc == 0
    return root, data, ws, ws / "phase_III" / "III__clean__proposed__s2021.gmb"


def test_synth_defaults_and_determinism(tmp_path, capsys):
    assert cli.main(["synth", "--out", str(tmp_path / "a"), "--per-source", "5", "--seed", "4"]) == 0
    first = json.loads(capsys.readouterr().out)
    assert first["sources"] == ["gm0", "gm1", "gm2", "ext0"]
    assert cli.main(["synth", "--out", str(tmp_path / "b"), "--per-source", "5", "--seed", "4"]) == 0
    assert json.loads(capsys.readouterr().out)["digest"] == first["digest"]
    DatasetManifest.load(tmp_path / "a" / "manifest.jsonl").validate()
    for p in (tmp_path / "a" / "images" / "gm0").iterdir():
        assert p.read_bytes() == (tmp_path / "b" / "images" / "gm0" / p.name).read_bytes()


def test_usage_errors(capsys):
    assert cli.main([]) == cli.EXIT_USAGE
    assert cli.main(["frobnicate"]) == cli.EXIT_USAGE
    assert cli.main(["synth"]) == cli.EXIT_USAGE
    assert cli.main(["synth", "--out", "x", "--size", "big"]) == cli.EXIT_USAGE


def test_run_errors(trained, tmp_path):
    root, data, ws, _ = trained
    assert cli.main(["run", "--manifest", str(tmp_path / "nope.jsonl"), "--workspace", str(tmp_path)]) == cli.EXIT_DATA
    assert cli.main(["run", "--manifest", str(data / "manifest.jsonl"), "--workspace", str(tmp_path / "w"),
                     "--phases", "III"]) == cli.EXIT_USAGE
    assert cli.main(["run", "--manifest", str(data / "manifest.jsonl"), "--phases", "V"]) == cli.EXIT_USAGE
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"schema": "gmattrib-manifest", "version": 1, "seed": 0, "image_size": 64}\n'
                   '{"path": "a.png", "label": "fake", "source": "real", "split": "train"}\n')
    assert cli.main(["run", "--manifest", str(bad), "--workspace", str(tmp_path / "w2")]) == cli.EXIT_DATA
    assert not (tmp_path / "w2" / "phase_I").exists()


def test_workspace_env_var(trained, tmp_path, monkeypatch):
    _, data, _, _ = trained
    monkeypatch.setenv(cli.WORKSPACE_ENV, str(tmp_path / "envws"))
    assert cli.main(["run", "--manifest", str(data / "manifest.jsonl"), "--phases", "I", "--seeds", "2021",
                     "--batch-size", "8", "--max-epochs", "1"]) == 0
    assert (tmp_path / "envws" / "lineage.json").is_file()


def test_eval_report_and_replay(trained, tmp_path, capsys):
    _, data, _, bundle = trained
    out = tmp_path / "eval"
    rc = cli.main(["eval", "--bundle", str(bundle), "--manifest", str(data / "manifest.jsonl"),
                   "--splits", "test,val", "--variants", "clean,jpeg", "--out", str(out)])
    assert rc == 0
    reports = json.loads((out / "report.json").read_text())
    assert [(r["table"]["split"], r["table"]["variant"]) for r in reports] == [
        ("test", "clean"), ("val", "clean"), ("test", "jpeg"), ("val", "jpeg")]
    for r in reports:
        t = r["table"]
        assert {"detection", "attribution", "ACC", "EXA", "CR"} <= set(t)
        assert all(v == round(v, 1) for v in t["detection"].values())
    replay = build_report(load_records(out / "records_test_clean.jsonl"), "test", "clean",
                          load_records(out / "records_external_clean.jsonl"))
    assert replay.to_dict() == reports[0]


def test_eval_representation_mismatch(trained, tmp_path):
    _, data, _, bundle = trained
    assert cli.main(["eval", "--bundle", str(bundle), "--manifest", str(data / "manifest.jsonl"),
                     "--representation", "dct", "--out", str(tmp_path)]) == cli.EXIT_DATA
    assert cli.main(["eval", "--bundle", str(tmp_path / "missing.gmb"), "--manifest", str(data / "manifest.jsonl"),
                     "--out", str(tmp_path)]) == cli.EXIT_DATA


def test_probe_grid_counts_and_flags(trained, tmp_path, capsys):
    _, data, _, bundle = trained
    man = DatasetManifest.load(data / "manifest.jsonl")
    paths = [str(man.resolve(r)) for r in man.rows[:16]]
    capsys.readouterr()
    assert cli.main(["probe", "--bundle", str(bundle), *paths, "--cam", "--out", str(tmp_path / "p")]) == 0
    lines = [json.loads(ln) for ln in capsys.readouterr().out.splitlines()]
    assert len(lines) == 16
    heatmaps = [p for p in (tmp_path / "p").iterdir() if p.suffix == ".png"]
    assert len(heatmaps) == 16 * (1 + 3)
    assert len((tmp_path / "p" / "heatmaps.jsonl").read_text().splitlines()) == 16 * 4
    for ln in lines:
        rec = PredictionRecord(ln["image_id"], "", ln["primary_score"], ln["secondary_scores"])
        assert ln["failed_attribution"] == rec.failed_attribution
        assert ln["contradiction"] == rec.contradiction
        assert ln["multiple_attribution"] == rec.multiple_attribution


def test_probe_missing_file_continues(trained, tmp_path, capsys):
    _, data, _, bundle = trained
    good = str(next((data / "images" / "gm0").iterdir()))
    rc = cli.main(["probe", "--bundle", str(bundle), str(tmp_path / "missing.png"), good])
    assert rc == cli.EXIT_DATA
    captured = capsys.readouterr()
    lines = [json.loads(ln) for ln in captured.out.splitlines()]
    assert "error" in lines[0] and "primary_score" in lines[1]
    assert "1 of 2" in captured.err


def test_cam_grid(trained, tmp_path):
    _, data, _, bundle = trained
    assert cli.main(["cam-grid", "--bundle", str(bundle), "--manifest", str(data / "manifest.jsonl"),
                     "--sources", "gm0,real", "--n", "4", "--out", str(tmp_path / "g")]) == 0
    assert len(list((tmp_path / "g").glob("grid_*.png"))) == 2 * 4


def test_console_script_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "gmattrib.cli", "synth", "--out", str(tmp_path / "d"),
                        "--per-source", "3", "--no-external"], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert json.loads(r.stdout)["sources"] == ["gm0", "gm1", "gm2"]
