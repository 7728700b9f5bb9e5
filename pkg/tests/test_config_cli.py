import csv
import json
import os

import pytest

from vidistill.cli import main
from vidistill.config import DEFAULTS, load_config
from vidistill.exceptions import InvalidConfigError
from vidistill.serialization import load_artifact, save_artifact

TINY = ["--set", "data.canvas=16", "--set", "data.shape_size=4", "--set", "data.frames=8",
        "--set", "data.num_appearances=2", "--set", "data.clips_per_class=3", "--set", "data.test_clips_per_class=2",
        "--set", "schedule.n_syn=4", "--set", "schedule.n_real=8", "--set", "schedule.l_syn=8",
        "--set", "match.iterations=2", "--set", "eval.epochs=1", "--set", "eval.seeds=0",
        "--set", "stage.static_iterations=1", "--set", "stage.dynamic_iterations=1", "--set", "interp.epochs=1",
        "--set", "sweep.iterations=1", "--set", "sweep.n_syn=2,4", "--set", "sweep.n_real=4,8", "--set", "sweep.l_syn=8",
        "--set", "match.inner.num_experts=1", "--set", "match.inner.expert_train_epochs=3",
        "--set", "match.inner.max_start_epoch=1", "--set", "match.inner.syn_steps=2"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_defaults_and_fingerprint(self):
        a, b = load_config(), load_config()
        assert a.fingerprint == b.fingerprint and len(a.fingerprint) == 16
        assert a["match.inner.syn_steps"] == DEFAULTS["match.inner"]["syn_steps"]
        assert load_config(overrides=["run.seed=1"]).fingerprint != a.fingerprint

    def test_ini_file(self, tmp_path):
        p = tmp_path / "c.ini"
        p.write_text("[schedule]\nn_syn = 4\n\n[match.inner]\nsyn_steps = 20\n")
        cfg = load_config(str(p), ["schedule.n_real=8"])
        assert (cfg["schedule.n_syn"], cfg["schedule.n_real"], cfg["match.inner.syn_steps"]) == (4, 8, 20)

    def test_round_trip_through_ini(self, tmp_path):
        cfg = load_config(overrides=["eval.seeds=3,4", "sweep.evaluate=true"])
        p = tmp_path / "r.ini"
        p.write_text(cfg.to_ini())
        assert load_config(str(p)).fingerprint == cfg.fingerprint

    @pytest.mark.parametrize("override", ["run.nope=1", "schedule.n_syn=four", "sweep.evaluate=maybe",
                                          "run.budget_bytes=-1", "eval.lr=-0.1", "seed=3", "noequals",
                                          "data.source=/does/not/exist"])
    def test_invalid(self, override):
        with pytest.raises(InvalidConfigError):
            load_config(overrides=[override])

    def test_unknown_section(self, tmp_path):
        p = tmp_path / "c.ini"
        p.write_text("[bogus]\na = 1\n")
        with pytest.raises(InvalidConfigError):
            load_config(str(p))


class TestCli:
    def test_bad_arguments_exit_2(self, capsys, tmp_path):
        code, _, err = run(capsys, "frobnicate")
        assert code == 2 and json.loads(err)["exit_code"] == 2
        code, _, err = run(capsys, "distill", "--out", str(tmp_path), "--set", "match.bogus=1")
        assert code == 2 and json.loads(err)["error"] == "InvalidConfigError"

    def test_missing_artifact_exit_3(self, capsys, tmp_path):
        code, _, err = run(capsys, "inspect", "--out", str(tmp_path), "--artifact", str(tmp_path / "x.vdst"))
        assert code == 3

    def test_corrupt_artifact_exit_5(self, capsys, tmp_path):
        p = tmp_path / "bad.vdst"
        p.write_bytes(b"nonsense")
        code, _, err = run(capsys, "inspect", "--out", str(tmp_path), "--artifact", str(p))
        assert code == 5 and json.loads(err)["error"] == "MagicError"

    def test_distill_then_inspect_and_evaluate(self, capsys, tmp_path):
        out = str(tmp_path / "d")
        code, stdout, _ = run(capsys, "distill", "--out", out, *TINY)
        assert code == 0
        res = json.loads(stdout.strip().splitlines()[-1])
        rows = read_csv(os.path.join(out, "loss.csv"))
        assert len(rows) == 2 and rows[0]["config_hash"] == res["config_hash"]
        assert load_config(os.path.join(out, "config.ini")).fingerprint == res["config_hash"]
        art = os.path.join(out, "synthetic.vdst")
        assert load_artifact(art).frames.shape[1] == 4
        code, stdout, _ = run(capsys, "inspect", "--out", out, "--artifact", art, *TINY)
        assert code == 0 and os.path.exists(os.path.join(out, "diff_000.png"))
        total = [r for r in read_csv(os.path.join(out, "storage.csv")) if r["component"] == "total"][0]
        assert int(total["bytes"]) == 4 * 4 * 1 * 16 * 16 * 4
        code, _, _ = run(capsys, "evaluate", "--out", out, "--artifact", art, *TINY)
        assert code == 0 and len(read_csv(os.path.join(out, "eval.csv"))) == 1

    def test_budget_exit_4_writes_nothing(self, capsys, tmp_path):
        out = str(tmp_path / "b")
        code, _, err = run(capsys, "distill-disentangled", "--out", out, "--budget-bytes", "100", *TINY)
        assert code == 4
        rec = json.loads(err)
        assert rec["needed"] > rec["budget"] == 100
        assert not os.path.exists(os.path.join(out, "artifact.vdst"))

    def test_disentangled_and_coreset(self, capsys, tmp_path):
        out = str(tmp_path / "e")
        assert run(capsys, "distill-disentangled", "--out", out, *TINY)[0] == 0
        assert os.path.exists(os.path.join(out, "artifact.vdst"))
        assert {r["stage"] for r in read_csv(os.path.join(out, "loss.csv"))} == {"static", "dynamic"}
        assert run(capsys, "coreset", "--out", out, "--set", "coreset.method=herding", *TINY)[0] == 0
        assert load_artifact(os.path.join(out, "coreset.vdst")).meta["method"] == "herding"

    def test_sweep(self, capsys, tmp_path, monkeypatch):
        monkeypatch.setenv("VDST_THREADS", "1")
        out = str(tmp_path / "s")
        assert run(capsys, "sweep", "--out", out, *TINY)[0] == 0
        rows = read_csv(os.path.join(out, "sweep.csv"))
        assert {(r["n_syn"], r["n_real"]) for r in rows} == {("2", "4"), ("2", "8"), ("4", "4"), ("4", "8")}
        assert all(int(r["peak_bytes"]) > 0 for r in rows)
        methods = {r["method"] for r in read_csv(os.path.join(out, "interpolators.csv"))}
        assert methods == {"duplicate", "linear", "parametric"}

    def test_experts_and_mtt(self, capsys, tmp_path):
        out = str(tmp_path / "m")
        assert run(capsys, "experts", "--out", out, *TINY)[0] == 0
        code, _, err = run(capsys, "distill", "--out", out, "--experts", os.path.join(out, "experts.vdst"),
                           "--set", "match.matcher=trajectory_mtt", "--set", "match.lr_img=1", *TINY)
        assert code == 0, err

    def test_generate_and_empty_inspect(self, capsys, tmp_path):
        out = str(tmp_path / "g")
        assert run(capsys, "generate", "--out", out, *TINY)[0] == 0
        assert len(load_artifact(os.path.join(out, "train.vdst"))) == 12
        save_artifact(None, os.path.join(out, "empty.vdst"))
        code, stdout, _ = run(capsys, "inspect", "--out", out, "--artifact", os.path.join(out, "empty.vdst"))
        assert code == 0 and json.loads(stdout.strip().splitlines()[-1])["bytes"] == 0
