import json
import subprocess
import sys
import time

import numpy as np
import pytest

from diffhand.cli import main
from diffhand.data import read_records, write_records
from diffhand.synthetic import handwriting_corpus, style_image
from diffhand.render import read_pgm

TINY_CFG = """\
# tiny model for command line tests
batch_size = 2
total_steps = 3
warmup_steps = 10
d_model = 16
heads = 2
down_levels = 1
style_height = 16
style_width = 32
style_channels = 4,4,8,8
log_every = 0
"""


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_schedule_info_table(capsys):
    code, out, _ = run(["schedule-info", "--T", "60", "--base", "0.02", "--lo", "1e-5", "--hi", "0.4"], capsys)
    assert code == 0
    rows = [line.split("\t") for line in out.strip().splitlines()]
    assert rows[0] == ["t", "beta", "alpha", "alpha_bar", "sigma", "l"]
    assert len(rows) == 62
    assert float(rows[2][1]) == 0.02001 and float(rows[-1][1]) == 0.42


def test_schedule_info_json(capsys):
    code, out, _ = run(["schedule-info", "--json"], capsys)
    table = json.loads(out)
    assert code == 0 and table[0]["alpha_bar"] == 1.0 and table[-1]["t"] == 60


def test_schedule_info_subprocess_is_fast():
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "diffhand.cli", "schedule-info"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert time.perf_counter() - t0 < 5.0  # generous: includes interpreter start-up


def test_usage_errors(capsys):
    code, _, err = run(["no-such-command"], capsys)
    assert code == 2 and "usage:" in err and "error[usage]" in err
    code, _, err = run(["schedule-info", "--bogus"], capsys)
    assert code == 2 and "--bogus" in err
    code, _, err = run(["schedule-info", "--T", "1"], capsys)
    assert code == 3 and err.strip().startswith("diffhand: error[data]:")
    code, _, _ = run([], capsys)
    assert code == 2


def test_abbreviated_flags_rejected(capsys):
    code, _, _ = run(["schedule-info", "--js"], capsys)
    assert code == 2


def test_help_lists_defaults(capsys):
    code, out, _ = run(["prepare", "--help"], capsys)
    assert code == 0
    out = " ".join(out.split())
    assert "--angle-tol" in out and "(default: 5.0)" in out and "(default: 15.0)" in out


# ---------------------------------------------------------------- prepare fixture


FIXTURE = [
    {"id": "r1", "text": "ab", "writer": "w1", "points": [[1, 0, 0], [1, 0, 0], [1, 0, 0], [0, 1, 1]], "style_image": None},
    {"id": "r2", "text": "ba", "writer": "w1", "points": [[1, 1, 1]], "style_image": None},
    {"id": "r3", "text": "a", "writer": "w2", "points": [[1, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 1]], "style_image": None},
]


def test_prepare_hand_audited_fixture(tmp_path, capsys):
    src = tmp_path / "raw.jsonl"
    src.write_text("".join(json.dumps(r) + "\n" for r in FIXTURE), encoding="utf-8")
    code, out, _ = run(["prepare", "--in", str(src), "--out", str(tmp_path / "prep")], capsys)
    assert code == 0
    assert out.strip() == "read 3 kept 2 dropped 0 rejected 1 points 9 -> 6"

    recs = read_records(tmp_path / "prep" / "records.jsonl", load_images=False)
    assert [r.record_id for r in recs] == ["r1", "r3"]
    # r1: pooled std of [1,1,1,0,0,0,0,1] is 0.5, so offsets double; the three
    # collinear moves merge into one.
    np.testing.assert_allclose(recs[0].strokes.offsets, [[6, 0], [0, 2]])
    np.testing.assert_array_equal(recs[0].strokes.pen_lift, [0, 1])
    assert recs[0].scale == pytest.approx(0.5)
    # r3: a unit square, std sqrt(1/2), nothing collinear.
    np.testing.assert_allclose(recs[1].strokes.offsets, np.array([[1, 0], [0, 1], [-1, 0], [0, -1]]) * np.sqrt(2))

    report = (tmp_path / "prep" / "drop_report.txt").read_text().splitlines()
    assert report[1] == "# dropped 0"
    assert report[2].startswith("r2\trejected:") and "fewer than 2 points" in report[2]
    assert (tmp_path / "prep" / "vocab.txt").read_text(encoding="utf-8").splitlines() == ["a", "b"]
    manifest = json.loads((tmp_path / "prep" / "run_manifest.json").read_text())
    assert manifest["command"] == "prepare" and manifest["config"]["outlier_k"] == 15.0


def test_prepare_bad_input(tmp_path, capsys):
    src = tmp_path / "bad.jsonl"
    src.write_text('{"text": "a", "points": [[1, 0, 3]]}\n', encoding="utf-8")
    code, _, err = run(["prepare", "--in", str(src), "--out", str(tmp_path / "o")], capsys)
    assert code == 3 and "error[data]" in err
    code, _, err = run(["prepare", "--in", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "o")], capsys)
    assert code == 5 and "error[io]" in err


def test_out_dir_env_override(tmp_path, capsys, monkeypatch):
    src = tmp_path / "raw.jsonl"
    src.write_text("".join(json.dumps(r) + "\n" for r in FIXTURE), encoding="utf-8")
    monkeypatch.setenv("DIFFHAND_OUT_DIR", str(tmp_path / "base"))
    code, _, _ = run(["prepare", "--in", str(src), "--out", "prep"], capsys)
    assert code == 0 and (tmp_path / "base" / "prep" / "records.jsonl").exists()


# ---------------------------------------------------------------- model commands


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    from PIL import Image

    for w in range(2):
        Image.fromarray(((1 - style_image(w, (16, 32))) * 255).astype(np.uint8)).save(d / f"style{w}.png")
    recs = handwriting_corpus(["ab", "ba", "abba"], points_per_char=3, style_shape=(16, 32))
    for r in recs:
        r.style_path = f"style{int(r.writer_id[-1]) % 2}.png" if r.writer_id else "style0.png"
    write_records(recs, d / "raw.jsonl")
    assert main(["prepare", "--in", str(d / "raw.jsonl"), "--out", str(d / "prep"), "--angle-tol", "0"]) == 0
    (d / "tiny.cfg").write_text(TINY_CFG, encoding="utf-8")
    code = main(["train", "--config", str(d / "tiny.cfg"), "--data", str(d / "prep" / "records.jsonl"), "--out", str(d / "ck")])
    assert code == 0
    return d


def test_train_outputs(trained):
    ck = trained / "ck"
    assert (ck / "manifest.json").exists() and (ck / "vocab.txt").exists()
    lines = (ck / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,loss_stroke,loss_pen,level,grad_norm,lr" and len(lines) == 4
    manifest = json.loads((ck / "run_manifest.json").read_text())
    assert manifest["config"]["total_steps"] == 3 and manifest["seed"] == 0


def test_train_resume_extends(trained, tmp_path, capsys):
    import shutil

    ck = tmp_path / "ck"
    shutil.copytree(trained / "ck", ck)
    data = str(trained / "prep" / "records.jsonl")
    code, out, _ = run(["train", "--data", data, "--out", str(ck), "--resume", "--steps", "5"], capsys)
    assert code == 0 and out.startswith("step 5 ")
    assert len((ck / "metrics.csv").read_text().splitlines()) == 6


def test_train_rejects_unknown_config_key(trained, tmp_path, capsys):
    data = str(trained / "prep" / "records.jsonl")
    code, _, err = run(["train", "--data", data, "--out", str(tmp_path / "x"), "--set", "learning_rate=3"], capsys)
    assert code == 2 and "unknown config keys" in err


def test_sample_is_reproducible_from_manifest(trained, tmp_path, capsys):
    argv = ["sample", "--ckpt", str(trained / "ck"), "--text", "abba", "--style", str(trained / "style0.png"),
            "--steps", "5", "--seed", "3", "--out-dir", str(tmp_path / "s1")]
    code, _, _ = run(argv, capsys)
    assert code == 0
    manifest = json.loads((tmp_path / "s1" / "run_manifest.json").read_text())
    again = [a if a != str(tmp_path / "s1") else str(tmp_path / "s2") for a in manifest["argv"]]
    assert run(again, capsys)[0] == 0
    a = (tmp_path / "s1" / "samples.jsonl").read_text()
    b = (tmp_path / "s2" / "samples.jsonl").read_text()
    assert a == b
    rec = read_records(tmp_path / "s1" / "samples.jsonl", load_images=False)[0]
    assert rec.text == "abba" and len(rec.strokes) == manifest["config"]["length"]
    assert (tmp_path / "s1" / "modified-seed3.svg").exists()


def test_sample_unknown_text_is_data_error(trained, tmp_path, capsys):
    code, _, err = run(["sample", "--ckpt", str(trained / "ck"), "--text", "zzzz", "--steps", "2",
                        "--out-dir", str(tmp_path)], capsys)
    assert code == 3 and "vocabulary" in err


def test_interpolate(trained, tmp_path, capsys):
    code, _, _ = run(["interpolate", "--ckpt", str(trained / "ck"), "--text", "ab", "--style0", str(trained / "style0.png"),
                      "--style1", str(trained / "style1.png"), "--lambdas", "1,0.5,0", "--steps", "3",
                      "--out-dir", str(tmp_path), "--format", "none"], capsys)
    assert code == 0
    assert len(read_records(tmp_path / "samples.jsonl", load_images=False)) == 3
    code, _, err = run(["interpolate", "--ckpt", str(trained / "ck"), "--text", "ab", "--style0", "a", "--style1", "b",
                        "--lambdas", "1.5", "--out-dir", str(tmp_path)], capsys)
    assert code == 2


def test_render_pgm_and_svg(trained, tmp_path, capsys):
    src = str(trained / "prep" / "records.jsonl")
    code, _, _ = run(["render", "--in", src, "--out-dir", str(tmp_path / "p"), "--format", "pgm", "--height", "20", "--width", "40"], capsys)
    assert code == 0
    files = sorted((tmp_path / "p").glob("*.pgm"))
    assert len(files) == 3 and read_pgm(files[0]).shape == (20, 40)
    code, _, _ = run(["render", "--in", src, "--out-dir", str(tmp_path / "v")], capsys)
    assert code == 0 and len(list((tmp_path / "v").glob("*.svg"))) == 3


def test_diagnose_attention(trained, tmp_path, capsys):
    line = (trained / "prep" / "records.jsonl").read_text().splitlines()[0]
    obj = json.loads(line)
    obj["style_image"] = str(trained / "style0.png")
    code, out, _ = run(["diagnose-attention", "--ckpt", str(trained / "ck"), "--record", json.dumps(obj),
                        "--out-dir", str(tmp_path)], capsys)
    assert code == 0 and out.startswith("monotonicity")
    w = np.loadtxt(tmp_path / "attention.csv", delimiter=",", ndmin=2)
    report = json.loads((tmp_path / "alignment.json").read_text())
    assert w.shape == (len(obj["points"]), len(obj["text"]))
    np.testing.assert_allclose(w.sum(1), 1, atol=1e-6)
    assert report["text"] == len(obj["text"])


def test_params_count(capsys):
    code, out, _ = run(["params-count", "--set", "d_model=16", "--set", "heads=2", "--vocab-size", "10"], capsys)
    assert code == 0
    rows = dict(line.split("\t") for line in out.strip().splitlines())
    assert int(rows["total"]) == sum(int(v) for k, v in rows.items() if k != "total")
