import csv

import numpy as np
import pytest

from fabtrack.cli import evaluate_results, main
from fabtrack.config import (FIELDS, ConfigError, load_config, parse_config_text,
                             render_config)
from fabtrack.synth import read_ground_truth, write_ground_truth
from fabtrack.mesh import read_obj_vertices

SMALL = ["--grid", "8", "--width", "160", "--height", "128", "--focal", "300",
         "--texture-size", "64"]


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    assert main(["synth", "translation", str(out), "--frames", "5", *SMALL,
                 "--offset", "10", "5", "0"]) == 0
    return out


@pytest.fixture(scope="module")
def tracked(scene):
    assert main(["track", str(scene / "config.ini"), "--max-iters", "5"]) == 0
    return scene / "results"


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- config ------------------------------------------------------------------

def test_reference_config_lists_every_default():
    text = render_config({})
    for f in FIELDS:
        assert f"\n{f.name} = " in text
    cfg_text = render_config({"template": "a", "texture": "b", "frames": "c", "output": "d",
                              "fx": 1.0, "fy": 1.0, "cx": 0.0, "cy": 0.0})
    cfg = parse_config_text(cfg_text)
    assert cfg.lambda_edge == 10.0 and cfg.hog_bins == 36 and cfg.max_iters == 20
    assert cfg.truth is None


def test_missing_required_field_named():
    with pytest.raises(ConfigError, match="'template'"):
        parse_config_text("[camera]\nfx = 1\nfy = 1\ncx = 0\ncy = 0\n")


def test_bad_value_reports_line():
    text = "# c\n[camera]\nfx = abc\n"
    with pytest.raises(ConfigError, match=r"line 3: 'fx = abc'"):
        parse_config_text(text)


def test_unknown_key_and_section():
    with pytest.raises(ConfigError, match="line 2.*unknown key 'bogus'"):
        parse_config_text("[weights]\nbogus = 1\n")
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config_text("[misc]\nx = 1\n")
    with pytest.raises(ConfigError, match="belongs in"):
        parse_config_text("[camera]\nlambda_tex = 1\n")


def test_syntax_error_reports_line():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("[camera]\nthis line has no separator\n")


def test_override_precedence(scene):
    cfg = load_config(scene / "config.ini", {"lambda_tex": 0.0, "fx": "310"})
    assert cfg.lambda_tex == 0.0 and cfg.fx == 310.0
    assert cfg.weights().lambda_tex == 0.0


def test_texture_toggle_zeroes_weight(scene):
    cfg = load_config(scene / "config.ini", {"enable_texture_term": False})
    assert cfg.lambda_tex == 0.5 and cfg.weights().lambda_tex == 0.0


def test_range_validation(scene):
    with pytest.raises(ConfigError, match="lambda_edge"):
        load_config(scene / "config.ini", {"lambda_edge": -1.0})
    with pytest.raises(ConfigError, match="focal"):
        load_config(scene / "config.ini", {"fx": 0.0})


def test_relative_paths_resolved(scene):
    cfg = load_config(scene / "config.ini")
    assert cfg.template == (scene / "template.obj").resolve()


# -- track ---------------------------------------------------------------------

def test_track_output_contract(tracked):
    assert sorted(p.name for p in (tracked / "meshes").iterdir()) == [
        f"frame_{i:04d}.obj" for i in range(5)]
    assert len(list((tracked / "overlays").iterdir())) == 5
    rows = read_csv(tracked / "metrics.csv")
    assert len(rows) == 5
    assert [int(r["frame_index"]) for r in rows] == list(range(5))
    assert (tracked / "config.echo").is_file()
    energy = read_csv(tracked / "energy.csv")
    assert {int(r["frame"]) for r in energy} == set(range(5))
    assert all(float(r["E_tex"]) >= 0 for r in energy)


def test_track_missing_template_names_field(scene, tmp_path, capsys):
    text = (scene / "config.ini").read_text().replace("template = template.obj",
                                                      "template = nowhere.obj")
    cfg = tmp_path / "bad.ini"
    cfg.write_text(text.replace("= frames", f"= {scene / 'frames'}")
                   .replace("= texture.png", f"= {scene / 'texture.png'}"))
    code = main(["track", str(cfg)])
    assert code != 0
    assert "template" in capsys.readouterr().err


def test_track_lambda_tex_override(scene, tmp_path):
    out = tmp_path / "r"
    assert main(["track", str(scene / "config.ini"), "--lambda-tex", "0", "--max-iters", "2",
                 "--output", str(out), "--dump-overlays", "false"]) == 0
    energy = read_csv(out / "energy.csv")
    assert all(float(r["E_tex"]) == 0.0 for r in energy)
    assert not (out / "overlays").exists()
    assert "lambda_tex = 0.0" in (out / "config.echo").read_text()


def test_track_dumps_fields(scene, tmp_path):
    out = tmp_path / "f"
    assert main(["track", str(scene / "config.ini"), "--max-iters", "1", "--output", str(out),
                 "--dump-orientation-field", "true"]) == 0
    assert len(list((out / "fields").glob("*.png"))) == 5


def test_echoed_config_reproduces_metrics(tracked, tmp_path):
    out = tmp_path / "again"
    assert main(["track", str(tracked / "config.echo"), "--output", str(out)]) == 0
    assert (out / "metrics.csv").read_bytes() == (tracked / "metrics.csv").read_bytes()


# -- synth ---------------------------------------------------------------------

def test_synth_rotation_contract(tmp_path):
    assert main(["synth", "rotation", str(tmp_path), "--frames", "30", *SMALL]) == 0
    assert len(list((tmp_path / "frames").glob("*.png"))) == 30
    assert read_ground_truth(tmp_path / "truth.txt").shape == (30, 64, 3)
    cfg = load_config(tmp_path / "config.ini")
    assert cfg.truth is not None


def test_synth_zero_frames(tmp_path, capsys):
    assert main(["synth", "bend", str(tmp_path), "--frames", "0"]) != 0
    assert "frames" in capsys.readouterr().err


def test_synth_invisible_scene(tmp_path, capsys):
    code = main(["synth", "translation", str(tmp_path), "--frames", "5", *SMALL,
                 "--offset", "500", "0", "0"])
    assert code != 0 and "leaves" in capsys.readouterr().err


# -- eval ----------------------------------------------------------------------

def _fake_results(tmp_path, truths, offset):
    from fabtrack.synth import make_grid_mesh
    mesh = make_grid_mesh(2, 2, 1, 1, 5, np.full((4, 4, 3), 9.0))
    from fabtrack.mesh import write_obj
    (tmp_path / "meshes").mkdir()
    for t, V in enumerate(truths):
        write_obj(tmp_path / "meshes" / f"frame_{t:04d}.obj", V + offset, mesh)
    write_ground_truth(tmp_path / "truth.txt", truths)


def test_eval_self_is_zero(tmp_path, rng):
    truths = rng.normal(size=(3, 4, 3))
    _fake_results(tmp_path, truths, 0.0)
    rows, summary = evaluate_results(tmp_path, tmp_path / "truth.txt")
    assert all(r["mean_error"] == 0 and r["max_error"] == 0 for r in rows)
    assert summary["sequence_mean_error"] == 0


def test_eval_uniform_offset(tmp_path, rng, capsys):
    truths = rng.normal(size=(4, 4, 3))
    _fake_results(tmp_path, truths, np.array([3.0, 4.0, 0.0]))
    assert main(["eval", str(tmp_path), str(tmp_path / "truth.txt")]) == 0
    rows = read_csv(tmp_path / "eval.csv")
    for r in rows:
        assert float(r["mean_error"]) == pytest.approx(5.0, abs=1e-12)
        assert float(r["max_error"]) == pytest.approx(5.0, abs=1e-12)
    summary = dict(line.split(" = ") for line in
                   (tmp_path / "eval_summary.txt").read_text().splitlines())
    col = np.mean([float(r["mean_error"]) for r in rows])
    assert abs(float(summary["sequence_mean_error"]) - col) <= 1e-12
    assert "sequence mean" in capsys.readouterr().out


def test_eval_count_mismatch(tmp_path, rng, capsys):
    truths = rng.normal(size=(3, 4, 3))
    _fake_results(tmp_path, truths, 0.0)
    write_ground_truth(tmp_path / "truth.txt", truths[:2])
    assert main(["eval", str(tmp_path), str(tmp_path / "truth.txt")]) != 0
    assert "mismatch" in capsys.readouterr().err


def test_eval_on_tracked_run(tracked, scene):
    rows, summary = evaluate_results(tracked, scene / "truth.txt")
    metrics = read_csv(tracked / "metrics.csv")
    for r, m in zip(rows, metrics):
        assert r["mean_error"] == pytest.approx(float(m["mean_error"]), rel=1e-12)
