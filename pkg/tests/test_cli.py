import csv
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from ulsgan.cli import main
from ulsgan.config import CONFIG_ENV_VAR
from ulsgan.dataset import read_dataset, read_manifest

SMALL_GRID = ["--heights", "0.36,0.48", "--betas", "0", "--grounds", "gravel,asphalt",
              "--rotations", "2", "--reps", "5"]


def tree_bytes(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = {"gan": {"generator_hidden": [8, 8, 8, 8], "discriminator_hidden": [8, 8, 8],
                   "noise_dim": 4, "epochs": 2, "batch_size": 8}}
    (d / "tiny.json").write_text(json.dumps(cfg))
    assert main(["corpus", "--out", str(d / "raw"), "--seed", "3", *SMALL_GRID]) == 0
    assert main(["process", "--in", str(d / "raw"), "--out", str(d / "proc")]) == 0
    assert main(["train", "--config", str(d / "tiny.json"), "--data", str(d / "proc"),
                 "--out", str(d / "m.ulsg"), "--seed", "1"]) == 0
    return d


# -- corpus -----------------------------------------------------------------

def test_corpus_dry_run_default(capsys):
    assert main(["corpus", "--dry-run"]) == 0
    assert capsys.readouterr().out.strip() == "129360 records"


def test_corpus_dry_run_restricted(capsys):
    assert main(["corpus", "--dry-run", "--heights", "0.36,0.48,0.60", "--betas", "0", "--grounds", "gravel"]) == 0
    assert capsys.readouterr().out.strip() == "630 records"


def test_corpus_missing_out(capsys):
    assert main(["corpus"]) == 2
    assert "--out" in capsys.readouterr().err


def test_corpus_bad_flag_value():
    with pytest.raises(SystemExit) as info:
        main(["corpus", "--dry-run", "--grounds", "sand"])
    assert info.value.code == 2


def test_corpus_nonconformant_height_no_output(tmp_path):
    assert main(["corpus", "--out", str(tmp_path / "x"), "--heights", "0.70", "--betas", "0"]) == 2
    assert list(tmp_path.iterdir()) == []


def test_corpus_raw_contents(work):
    m = read_manifest(work / "raw")
    assert m["kind"] == "raw"
    assert len(m["records"]) == 40
    assert m["record_length"] == 9900
    assert m["sample_rate_hz"] == 330_000.0


def test_corpus_deterministic(work, tmp_path):
    assert main(["corpus", "--out", str(tmp_path / "again"), "--seed", "3", *SMALL_GRID]) == 0
    assert tree_bytes(tmp_path / "again") == tree_bytes(work / "raw")


def test_corpus_refuses_existing_without_force(work, tmp_path):
    out = tmp_path / "d"
    assert main(["corpus", "--out", str(out), "--seed", "3", "--processed", *SMALL_GRID]) == 0
    before = tree_bytes(out)
    assert main(["corpus", "--out", str(out), "--seed", "4", "--processed", *SMALL_GRID]) == 2
    assert tree_bytes(out) == before
    assert main(["corpus", "--out", str(out), "--seed", "4", "--processed", "--force", *SMALL_GRID]) == 0
    assert tree_bytes(out) != before


def test_corpus_processed_matches_process(work, tmp_path):
    assert main(["corpus", "--out", str(tmp_path / "p"), "--seed", "3", "--processed", *SMALL_GRID]) == 0
    direct, staged = read_dataset(tmp_path / "p"), read_dataset(work / "proc")
    # the staged path processes float32-quantized raw records
    assert direct.records == staged.records
    np.testing.assert_allclose(direct.samples, staged.samples, rtol=0, atol=1e-5 * staged.samples.max())


# -- process ----------------------------------------------------------------

def test_process_output(work):
    ds = read_dataset(work / "proc")
    assert ds.kind == "processed"
    assert len(ds) == 40
    assert ds.samples.shape == (40, 583)
    assert ds.sample_rate_hz == 20_000.0


def test_process_rejects_processed_input(work, tmp_path):
    assert main(["process", "--in", str(work / "proc"), "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_process_empty_input(tmp_path):
    assert main(["corpus", "--out", str(tmp_path / "e"), "--rotations", "0"]) in (0, 2)
    if (tmp_path / "e").exists():
        assert main(["process", "--in", str(tmp_path / "e"), "--out", str(tmp_path / "o")]) == 2
        assert not (tmp_path / "o").exists()


def test_process_missing_input(tmp_path):
    assert main(["process", "--in", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 3


def test_process_corrupted_input(work, tmp_path):
    import shutil

    shutil.copytree(work / "raw", tmp_path / "raw")
    rec = tmp_path / "raw" / read_manifest(tmp_path / "raw")["records"][5]["file"]
    data = bytearray(rec.read_bytes())
    data[100] ^= 0xFF
    rec.write_bytes(bytes(data))
    assert main(["process", "--in", str(tmp_path / "raw"), "--out", str(tmp_path / "o")]) == 3
    assert not (tmp_path / "o").exists()
    assert [p.name for p in tmp_path.iterdir()] == ["raw"]


# -- analyze ----------------------------------------------------------------

def test_analyze_rows(work, tmp_path):
    out = tmp_path / "t.csv"
    assert main(["analyze", "--in", str(work / "proc"), "--report", str(out), "--bins", "2,3"]) == 0
    rows = list(csv.DictReader(open(out)))
    # 2 grounds x 2 bins x 2 heights x 1 beta
    assert len(rows) == 8
    assert {r["ground"] for r in rows} == {"gravel", "asphalt"}


def test_analyze_deterministic(work, tmp_path):
    for name in ("a.csv", "b.csv"):
        assert main(["analyze", "--in", str(work / "proc"), "--report", str(tmp_path / name), "--bins", "2"]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_analyze_missing_cells(tmp_path, capsys):
    grid = ["--heights", "0.36,0.48", "--betas", "0", "--grounds", "gravel", "--rotations", "1", "--reps", "3"]
    assert main(["corpus", "--out", str(tmp_path / "a"), "--processed", *grid]) == 0
    ds = read_dataset(tmp_path / "a")
    from ulsgan.dataset import Dataset, write_dataset

    keep = [i for i, r in enumerate(ds.records) if r.condition.height_m == 0.36]
    extra = Dataset("processed", ds.sample_rate_hz, ds.record_length,
                    [ds.records[i] for i in keep] + [r for r in ds.records if r.condition.height_m == 0.48][:0],
                    ds.samples[keep])
    # two betas at one height but one beta at another: not rectangular
    from dataclasses import replace as dc_replace

    shifted = [dc_replace(r, condition=dc_replace(r.condition, beta_deg=-1.0, height_m=0.48))
               for r in extra.records[:1]]
    bad = Dataset("processed", ds.sample_rate_hz, ds.record_length,
                  list(extra.records) + [dc_replace(s, file=f"records/{999:06d}.f32") for s in shifted],
                  np.vstack([extra.samples, extra.samples[:1]]))
    write_dataset(bad, tmp_path / "bad")
    capsys.readouterr()
    assert main(["analyze", "--in", str(tmp_path / "bad"), "--report", str(tmp_path / "t.csv")]) == 2
    assert "missing" in capsys.readouterr().err
    assert not (tmp_path / "t.csv").exists()


def test_analyze_unwritable_report(work, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["analyze", "--in", str(work / "proc"), "--report", str(blocker / "t.csv"), "--bins", "2"]) == 3


# -- train --------------------------------------------------------------------

def test_train_outputs(work):
    assert (work / "m.ulsg").read_bytes()[:4] == b"ULSG"
    rows = list(csv.DictReader(open(work / "m.ulsg.loss.csv")))
    assert [int(r["epoch"]) for r in rows] == [1, 2]
    assert list(rows[0]) == ["epoch", "d_loss", "g_loss", "d_real", "d_fake"]


def test_train_same_seed_identical(work, tmp_path):
    out = tmp_path / "m2.ulsg"
    assert main(["train", "--config", str(work / "tiny.json"), "--data", str(work / "proc"),
                 "--out", str(out), "--seed", "1"]) == 0
    assert out.read_bytes() == (work / "m.ulsg").read_bytes()
    assert (tmp_path / "m2.ulsg.loss.csv").read_bytes() == (work / "m.ulsg.loss.csv").read_bytes()


def test_train_epochs_flag(work, tmp_path):
    log = tmp_path / "log.csv"
    assert main(["train", "--config", str(work / "tiny.json"), "--data", str(work / "proc"),
                 "--out", str(tmp_path / "m.ulsg"), "--epochs", "3", "--loss-log", str(log)]) == 0
    assert len(list(csv.DictReader(open(log)))) == 3


def test_train_wrong_length_before_training(work, tmp_path):
    assert main(["train", "--data", str(work / "raw"), "--out", str(tmp_path / "m.ulsg")]) == 2
    assert list(tmp_path.iterdir()) == []


def test_train_config_from_env(work, tmp_path, monkeypatch):
    monkeypatch.setenv(CONFIG_ENV_VAR, str(work / "tiny.json"))
    assert main(["train", "--data", str(work / "proc"), "--out", str(tmp_path / "m.ulsg"), "--seed", "1"]) == 0
    assert (tmp_path / "m.ulsg").read_bytes() == (work / "m.ulsg").read_bytes()


def test_bad_config_key(work, tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"gan": {"epoch": 3}}))
    assert main(["train", "--config", str(tmp_path / "c.json"), "--data", str(work / "proc"),
                 "--out", str(tmp_path / "m.ulsg")]) == 2
    assert not (tmp_path / "m.ulsg").exists()


# -- generate -------------------------------------------------------------------

def gen(work, out, *extra):
    return main(["generate", "--model", str(work / "m.ulsg"), "--height", "0.40", "--beta", "0",
                 "--ground", "gravel", "--out", str(out), *extra])


def test_generate_count(work, tmp_path):
    assert gen(work, tmp_path / "g", "--count", "100") == 0
    m = read_manifest(tmp_path / "g")
    assert m["kind"] == "processed"
    assert len(m["records"]) == 100
    conds = {json.dumps(r["condition"], sort_keys=True) for r in m["records"]}
    assert conds == {json.dumps({"height_m": 0.40, "beta_deg": 0.0, "ground": "gravel"}, sort_keys=True)}


def test_generate_deterministic(work, tmp_path):
    assert gen(work, tmp_path / "a", "--count", "5", "--seed", "2") == 0
    assert gen(work, tmp_path / "b", "--count", "5", "--seed", "2") == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_generate_outside_hull(work, tmp_path):
    assert main(["generate", "--model", str(work / "m.ulsg"), "--height", "0.70", "--beta", "0",
                 "--ground", "gravel", "--out", str(tmp_path / "g")]) == 2
    assert not (tmp_path / "g").exists()


def test_generate_post_lowpass(work, tmp_path):
    from ulsgan.validation import post_lowpass

    assert gen(work, tmp_path / "a", "--count", "4", "--seed", "1") == 0
    assert gen(work, tmp_path / "b", "--count", "4", "--seed", "1", "--post-lowpass") == 0
    raw = read_dataset(tmp_path / "a").samples.astype(float)
    filtered = read_dataset(tmp_path / "b").samples
    assert filtered.tobytes() != read_dataset(tmp_path / "a").samples.tobytes()
    np.testing.assert_allclose(filtered, post_lowpass(raw, 1_500.0), atol=1e-5)


def test_generate_conditions_from(work, tmp_path):
    assert main(["generate", "--model", str(work / "m.ulsg"), "--conditions-from", str(work / "proc"),
                 "--count", "3", "--out", str(tmp_path / "g")]) == 0
    ds = read_dataset(tmp_path / "g")
    assert len(ds) == 12
    assert set(ds.groups()) == set(read_dataset(work / "proc").groups())


def test_generate_missing_condition(work, tmp_path):
    assert main(["generate", "--model", str(work / "m.ulsg"), "--height", "0.40",
                 "--out", str(tmp_path / "g")]) == 2


def test_generate_corrupt_checkpoint(work, tmp_path):
    bad = tmp_path / "bad.ulsg"
    bad.write_bytes((work / "m.ulsg").read_bytes()[:-7])
    assert main(["generate", "--model", str(bad), "--height", "0.40", "--beta", "0", "--ground", "gravel",
                 "--out", str(tmp_path / "g")]) == 3
    assert not (tmp_path / "g").exists()


# -- validate -----------------------------------------------------------------

def test_validate_identity(work, tmp_path, capsys):
    report = tmp_path / "r.csv"
    assert main(["validate", "--ref", str(work / "proc"), "--gen", str(work / "proc"), "--report", str(report),
                 "--bins", "2,3"]) == 0
    rows = list(csv.DictReader(open(report)))
    assert len(rows) == 8
    assert all(float(r["rel_err_k"]) == 0 and float(r["rel_err_theta"]) == 0 for r in rows)
    assert capsys.readouterr().out.startswith("PASS")


def test_validate_zero_tolerance_fails(work, tmp_path):
    assert main(["generate", "--model", str(work / "m.ulsg"), "--conditions-from", str(work / "proc"),
                 "--count", "10", "--out", str(tmp_path / "g")]) == 0
    assert main(["validate", "--ref", str(work / "proc"), "--gen", str(tmp_path / "g"),
                 "--tol-k", "0", "--tol-theta", "0", "--bins", "dominant"]) == 1


def test_validate_condition_mismatch(work, tmp_path):
    assert gen(work, tmp_path / "g", "--count", "10") == 0
    assert main(["validate", "--ref", str(work / "proc"), "--gen", str(tmp_path / "g"), "--bins", "2"]) == 2


def test_validate_deterministic_report(work, tmp_path):
    for name in ("a.csv", "b.csv"):
        assert main(["validate", "--ref", str(work / "proc"), "--gen", str(work / "proc"),
                     "--report", str(tmp_path / name), "--bins", "dominant"]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_validate_negative_tolerance(work):
    assert main(["validate", "--ref", str(work / "proc"), "--gen", str(work / "proc"), "--tol-k", "-1"]) == 2


# -- plot -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trend_csv(work):
    out = work / "trend.csv"
    assert main(["analyze", "--in", str(work / "proc"), "--report", str(out), "--bins", "2,3"]) == 0
    return out


def test_plot_one_polyline_per_series(trend_csv, tmp_path):
    out = tmp_path / "p.svg"
    assert main(["plot", "--in", str(trend_csv), "--out", str(out), "--x", "height_m", "--y", "k",
                 "--series", "ground", "--where", "bin_lo_m=0.5"]) == 0
    root = ET.parse(out).getroot()
    assert root.tag.endswith("svg")
    lines = [e for e in root.iter() if e.tag.endswith("polyline")]
    assert len(lines) == 2


def test_plot_unknown_column(trend_csv, tmp_path, capsys):
    assert main(["plot", "--in", str(trend_csv), "--out", str(tmp_path / "p.svg"), "--x", "height",
                 "--y", "k"]) == 2
    err = capsys.readouterr().err
    assert "height_m" in err
    assert not (tmp_path / "p.svg").exists()


def test_plot_empty_csv(tmp_path):
    (tmp_path / "e.csv").write_text("")
    assert main(["plot", "--in", str(tmp_path / "e.csv"), "--out", str(tmp_path / "p.svg"),
                 "--x", "a", "--y", "b"]) == 2
    assert not (tmp_path / "p.svg").exists()


def test_plot_header_only_csv(tmp_path):
    (tmp_path / "h.csv").write_text("a,b\n")
    assert main(["plot", "--in", str(tmp_path / "h.csv"), "--out", str(tmp_path / "p.svg"),
                 "--x", "a", "--y", "b"]) == 2
    assert not (tmp_path / "p.svg").exists()


def test_plot_missing_input(tmp_path):
    assert main(["plot", "--in", str(tmp_path / "none.csv"), "--out", str(tmp_path / "p.svg"),
                 "--x", "a", "--y", "b"]) == 3


def test_plot_loss_log(work, tmp_path):
    out = tmp_path / "loss.svg"
    assert main(["plot", "--in", str(work / "m.ulsg.loss.csv"), "--out", str(out), "--x", "epoch",
                 "--y", "d_loss"]) == 0
    assert "<polyline" in out.read_text()


# -- misc -------------------------------------------------------------------------

def test_no_command():
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 2


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    assert "ulsgan" in capsys.readouterr().out


def test_module_entry_point():
    import subprocess
    import sys

    r = subprocess.run([sys.executable, "-m", "ulsgan", "corpus", "--dry-run"], capture_output=True, text=True)
    assert r.returncode == 0
    assert r.stdout.strip() == "129360 records"
