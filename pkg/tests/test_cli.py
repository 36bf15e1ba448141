import csv
import subprocess
import sys
from pathlib import Path

import pytest

from mvfuse import tensor_core as tc
from mvfuse.cli import main, parse_pose
from mvfuse.config import load_config

TINY = str(Path(__file__).parent / "fixtures" / "tiny.cfg")


def run(*argv):
    return main([str(a) for a in argv])


def files(d: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(Path(d).rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, ck = root / "data", root / "ck"
    assert run("gen-data", "--config", TINY, "--objects", 3, "--views", 4, "--seed", 7, "--out", data) == 0
    for stage in (0, 1, 2):
        assert run("train", "--config", TINY, "--stage", stage, "--data", data, "--out", ck, "--seed", 1) == 0
    return root


def test_gen_data_manifest(tmp_path):
    assert run("gen-data", "--config", TINY, "--objects", 5, "--views", 12, "--seed", 7, "--out", tmp_path) == 0
    meta, entries = tc.read_envelope(tmp_path / "train.ds")
    assert len(meta["seeds"]) == 5 and len(entries) == 60
    assert meta["format_version"] == 1 and meta["grid"] == 8
    assert (tmp_path / "eval.ds").exists()


def test_gen_data_bitwise_rerun(tmp_path):
    for d in ("a", "b"):
        assert run("gen-data", "--config", TINY, "--objects", 3, "--views", 4, "--seed", 7, "--out", tmp_path / d) == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")


def test_gen_data_missing_out_is_usage_error(capsys):
    with pytest.raises(SystemExit) as e:
        run("gen-data", "--objects", 5)
    assert e.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_config_key_exit_2(tmp_path, capsys):
    assert run("gen-data", "--set", "fusion.samplez=3", "--out", tmp_path) == 2
    assert "samplez" in capsys.readouterr().err


def test_train_writes_outputs(trained):
    ck = trained / "ck"
    for stage in (0, 1, 2):
        assert (ck / f"stage{stage}.ckpt").exists()
        rows = list(csv.reader(open(ck / f"stage{stage}_loss.csv")))
        assert rows[0] == ["step", "loss"] and len(rows) > 1
        assert load_config(ck / f"stage{stage}.config").seed == 1


def test_train_same_seed_identical_loss_csv(trained, tmp_path):
    data = trained / "data"
    assert run("train", "--config", TINY, "--stage", 1, "--data", data, "--out", tmp_path, "--seed", 1) == 0
    assert (tmp_path / "stage1_loss.csv").read_bytes() == (trained / "ck" / "stage1_loss.csv").read_bytes()
    assert (tmp_path / "stage1.ckpt").read_bytes() == (trained / "ck" / "stage1.ckpt").read_bytes()


def test_stage2_without_stage1_exits_3(trained, tmp_path, capsys):
    (tmp_path / "stage0.ckpt").write_bytes((trained / "ck" / "stage0.ckpt").read_bytes())
    code = run("train", "--config", TINY, "--stage", 2, "--data", trained / "data", "--out", tmp_path)
    assert code == 3
    err = capsys.readouterr().err
    assert "lift." in err and "stage1.ckpt" in err


def test_missing_dataset_exits_3(tmp_path, capsys):
    assert run("train", "--config", TINY, "--stage", 0, "--data", tmp_path / "nope", "--out", tmp_path) == 3
    assert "train.ds" in capsys.readouterr().err


def test_sample_dump_and_reproducible(trained, tmp_path):
    ck = trained / "ck"
    for d in ("a", "b"):
        assert run("sample", "--config", TINY, "--ckpt", ck, "--views", "0,90,180", "--target", 45,
                   "--out", tmp_path / d, "--pgm", "--dump-fused", tmp_path / d / "fused",
                   "--gating-probe", tmp_path / d / "probe.csv", "--seed", 3) == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")
    meta, entries = tc.read_envelope(tmp_path / "a" / "sample.lat")
    assert meta["kind"] == "mvfuse-sample" and [e["shape"] for e, _ in entries] == [[4, 8, 8]]
    assert len(list((tmp_path / "a").glob("target0_c*.pgm"))) == 4
    fmeta, fentries = tc.read_envelope(tmp_path / "a" / "fused" / "fused.lat")
    assert [e["name"] for e, _ in fentries] == ["fused", "opacity"]
    rows = list(csv.reader(open(tmp_path / "a" / "probe.csv")))
    assert rows[0] == ["delta_deg", "mean_residual_norm"] and len(rows) == 6


def test_sample_single_view(trained, tmp_path):
    assert run("sample", "--config", TINY, "--ckpt", trained / "ck", "--views", 0, "--target", "45:10",
               "--out", tmp_path) == 0


@pytest.mark.parametrize("bad", ["abc", "0,,90", "10:95", "1:2:3", ""])
def test_sample_bad_pose_exit_2(trained, tmp_path, bad):
    assert run("sample", "--config", TINY, "--ckpt", trained / "ck", "--views", bad, "--target", 45,
               "--out", tmp_path) == 2


def test_sample_verbose_prints_steps(trained, tmp_path, capsys):
    assert run("sample", "--config", TINY, "--ckpt", trained / "ck", "--views", "0,180", "--target", 45,
               "--out", tmp_path, "--verbose") == 0
    err = capsys.readouterr().err
    assert err.count("step ") >= 4 and "resolved config" in err


def test_eval_rows_and_hash(trained, tmp_path):
    out = tmp_path / "r.csv"
    assert run("eval", "--config", TINY, "--ckpt", trained / "ck", "--data", trained / "data",
               "--view-counts", "1,2,3,4", "--out", out, "--seed", 1) == 0
    rows = list(csv.DictReader(open(out)))
    means = [r for r in rows if r["kind"] == "mean"]
    assert [r["condition"] for r in means] == ["baseline", "n=1", "n=2", "n=3", "n=4"]
    assert len([r for r in rows if r["kind"] == "object"]) == 2 * 5
    cfg = load_config(TINY, {"seed": "1"}).replace(data_grid=8)
    assert {r["config_hash"] for r in rows} == {cfg.digest()}
    again = tmp_path / "r2.csv"
    run("eval", "--config", TINY, "--ckpt", trained / "ck", "--data", trained / "data", "--view-counts", "1,2,3,4",
        "--out", again, "--seed", 1)
    assert out.read_bytes() == again.read_bytes()


def test_eval_empty_set_exit_2(trained, tmp_path):
    d = tmp_path / "d"
    assert run("gen-data", "--config", TINY, "--objects", 1, "--eval-objects", 0, "--views", 2, "--out", d) == 0
    assert run("eval", "--config", TINY, "--ckpt", trained / "ck", "--data", d, "--out", tmp_path / "r.csv") == 2


def test_eval_bad_view_counts_exit_2(trained, tmp_path):
    assert run("eval", "--config", TINY, "--ckpt", trained / "ck", "--view-counts", "1,7",
               "--out", tmp_path / "r.csv") == 2


def test_version_mismatch_rejected(trained, tmp_path):
    d = tmp_path / "d"
    d.mkdir()
    raw = (trained / "data" / "train.ds").read_bytes().replace(b'"format_version": 1', b'"format_version": 2', 1)
    assert raw != (trained / "data" / "train.ds").read_bytes()
    (d / "train.ds").write_bytes(raw)
    assert run("train", "--config", TINY, "--stage", 0, "--data", d, "--out", tmp_path / "o") == 2


def test_numerical_failure_exit_4(trained, tmp_path):
    out = tmp_path / "o"
    assert run("train", "--config", TINY, "--stage", 0, "--data", trained / "data", "--out", out,
               "--set", "stage0.lr=1e30") == 4


def test_parse_pose():
    p = parse_pose("90:30", 2.0)
    assert abs(p.theta - 1.5707963267948966) < 1e-12 and abs(p.phi - 0.5235987755982988) < 1e-12


def test_console_script_and_threads_env(tmp_path):
    import os
    import shutil
    exe = shutil.which("mvfuse") or str(Path(sys.executable).parent / "mvfuse")
    cmd = [exe] if Path(exe).exists() else [sys.executable, "-m", "mvfuse.cli"]
    env = {**os.environ, "TVF_THREADS": "1"}
    r = subprocess.run(cmd + ["gen-data", "--config", TINY, "--objects", "1", "--views", "2", "--out", str(tmp_path)],
                       capture_output=True, text=True, env=env)
    assert r.returncode == 0, r.stderr
    r = subprocess.run(cmd + ["gen-data", "--out", str(tmp_path)], capture_output=True, text=True,
                       env={**env, "TVF_THREADS": "x"})
    assert r.returncode == 2 and "TVF_THREADS" in r.stderr
