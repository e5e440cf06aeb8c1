import io
import math
import subprocess
import sys

import pytest

from poserefine import rotgeo
from poserefine.cli import main, read_config
from poserefine.dataset import load_annotations
from poserefine.evaluate import parse_kv
from poserefine.refine import Refiner, build_network


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = main([str(a) for a in argv], out, err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    code, _, err = run("gen-data", "--count", 40, "--seed", 3, "--out", root)
    assert code == 0, err
    return root


def _tree(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_gen_data_is_byte_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run("gen-data", "--count", 10, "--seed", 7, "--out", tmp_path / name)[0] == 0
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert len(a) == 12
    assert a == b


def test_gen_data_pose_range(tmp_path):
    def widest(path):
        anns = load_annotations(path)
        ident = rotgeo.UnitQuaternion.identity()
        return max(math.degrees(rotgeo.geodesic_angle(rotgeo.rotmat_to_quat(a.matrix), ident)) for a in anns)

    assert run("gen-data", "--count", 30, "--out", tmp_path / "near", "--max-pose-deg", 20)[0] == 0
    assert run("gen-data", "--count", 30, "--out", tmp_path / "all", "--max-pose-deg", "none")[0] == 0
    assert widest(tmp_path / "near") <= 20 + 1e-6
    assert widest(tmp_path / "all") > 90


def test_oracle_eval_scores_zero(dataset):
    code, out, _ = run("eval", "--data", dataset, "--model", "oracle", "--subset", "all", "--format", "kv")
    assert code == 0
    report = parse_kv(out)
    assert report["count"] == 40
    assert report["mean_deg"] < 1e-6


def test_identity_eval_with_resampling(dataset):
    code, out, _ = run("eval", "--data", dataset, "--split", "20,10,10", "--model", "identity",
                       "--resample", 3, "--noise", "N(10,5)", "--format", "kv")
    assert code == 0
    report = parse_kv(out)
    assert report["count"] == 30
    assert 5 < report["mean_deg"] < 15


def test_zero_epoch_training_keeps_initial_weights(dataset, tmp_path):
    ckpt = tmp_path / "m.ckpt"
    code, out, err = run("train", "--data", dataset, "--split", "20,10,10", "--epochs-mse", 0,
                         "--epochs-geo", 0, "--init-seed", 2, "--out", ckpt)
    assert code == 0, err
    assert out == ""
    model = Refiner.load(ckpt)
    assert model.to_bytes() == build_network(2).to_bytes()


def test_train_fine_tune_and_eval(dataset, tmp_path):
    base, tuned, log = tmp_path / "base.ckpt", tmp_path / "tuned.ckpt", tmp_path / "log.txt"
    code, out, err = run("train", "--data", dataset, "--split", "20,10,10", "--epochs-mse", 1,
                         "--epochs-geo", 0, "--batch-size", 10, "--out", base)
    assert code == 0, err
    assert out.startswith("epoch=1 loss=mse")
    code, out, err = run("train", "--data", dataset, "--split", "20,10,10", "--epochs-mse", 0,
                         "--epochs-geo", 1, "--batch-size", 10, "--init", base, "--out", tuned, "--log", log)
    assert code == 0, err
    assert log.read_text() == out
    assert out.startswith("epoch=1 loss=geodesic")
    assert Refiner.load(tuned).to_bytes() != Refiner.load(base).to_bytes()
    code, out, err = run("eval", "--data", dataset, "--split", "20,10,10", "--checkpoint", tuned)
    assert code == 0, err
    assert out.splitlines()[-1].startswith("overall")
    code, out, _ = run("inspect-checkpoint", tuned, "--format", "kv")
    assert code == 0
    assert "meta.arch=refiner-v1" in out
    assert "tensor=head.6.weight shape=4x128" in out


def test_resampling_experiment_with_checkpoint(dataset, tmp_path):
    ckpt = tmp_path / "m.ckpt"
    run("train", "--data", dataset, "--split", "20,10,10", "--epochs-mse", 0, "--epochs-geo", 0, "--out", ckpt)
    code, out, err = run("experiment", "--kind", "resampling", "--data", dataset, "--split", "20,10,10",
                         "--checkpoint", ckpt, "--format", "kv")
    assert code == 0, err
    delta = float(out.strip().splitlines()[-1].split("=")[1])
    assert math.isfinite(delta)


def test_config_file_supplies_options(dataset, tmp_path):
    cfg = tmp_path / "eval.cfg"
    cfg.write_text(f"# eval settings\ndata = {dataset}\nmodel = oracle\nsubset = all\nformat = kv\n")
    code, out, err = run("--config", cfg, "eval")
    assert code == 0, err
    assert parse_kv(out)["mean_deg"] < 1e-6
    code, out, _ = run("--config", cfg, "eval", "--format", "table")
    assert out.splitlines()[0].startswith("# U(0,30)")


def test_read_config_booleans(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("deterministic = false\nredraw_noise = yes\n--lr = 0.01  # tuned\n")
    assert read_config(cfg) == ["--no-deterministic", "--redraw-noise", "--lr", "0.01"]


@pytest.mark.parametrize("argv", [
    [],
    ["bogus"],
    ["eval", "--data", "x"],
    ["train", "--data", "x", "--out", "y", "--split", "1,2"],
    ["eval", "--data", "x", "--model", "identity", "--noise", "Q(1,2)"],
    ["gen-data", "--out", "x", "--max-pose-deg", "200"],
])
def test_usage_errors_exit_1(argv):
    code, out, err = run(*argv)
    assert code == 1
    assert "usage:" in err
    assert out == ""


def test_bad_config_line_exits_1(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("just words\n")
    code, _, err = run("--config", cfg, "eval")
    assert code == 1
    assert "c.cfg:1" in err


def test_runtime_errors_exit_2(dataset, tmp_path):
    code, _, err = run("eval", "--data", dataset, "--model", "identity")
    assert code == 2
    assert "short by" in err
    code, _, err = run("eval", "--data", tmp_path / "missing", "--model", "identity", "--subset", "all")
    assert code == 2
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    code, _, err = run("inspect-checkpoint", bad)
    assert code == 2
    assert err.startswith("poserefine inspect-checkpoint: error:")


def test_module_entry_point(dataset):
    proc = subprocess.run([sys.executable, "-m", "poserefine", "eval", "--data", str(dataset), "--model", "oracle",
                           "--subset", "all"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "overall" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "poserefine", "eval"], capture_output=True, text=True)
    assert proc.returncode == 1
