import csv
import functools
import json

import numpy as np
import pytest

from rts import cli, selfcheck
from rts.heads import Variant, init_params
from rts.stochastic import RngStream


def small_config(tmp_path, variant="rts", **train):
    cfg = cli.ExperimentConfig().to_dict()
    cfg["data"].update(num_identities=8, d_x=16, per_id=16, test_per_id=4, n_ood=60)
    cfg["train"].update(variant=variant, epochs=3, hidden=[24], d_y=8, lr_decay_epochs=[2],
                        probe_size=30, **train)
    cfg["out_dir"] = str(tmp_path / "run")
    path = tmp_path / f"{variant}.json"
    path.write_text(json.dumps(cfg))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = small_config(tmp)
    out = tmp / "train"
    assert cli.main(["train", "--config", str(cfg), "--out", str(out), "--seed", "4"]) == 0
    return cfg, out


class TestConfig:
    def test_round_trip(self):
        cfg = cli.ExperimentConfig()
        assert cli.ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_unknown_key_named(self):
        raw = cli.ExperimentConfig().to_dict()
        raw["train"]["learning_rate"] = 0.1
        with pytest.raises(cli.ConfigError, match="train.learning_rate"):
            cli.ExperimentConfig.from_dict(raw)

    def test_missing_variant_named(self):
        raw = cli.ExperimentConfig().to_dict()
        del raw["train"]["variant"]
        with pytest.raises(cli.ConfigError, match="train.variant"):
            cli.ExperimentConfig.from_dict(raw)

    def test_bad_value(self):
        raw = cli.ExperimentConfig().to_dict()
        raw["train"]["dof"] = 2
        with pytest.raises(cli.ConfigError):
            cli.ExperimentConfig.from_dict(raw)

    def test_shipped_default(self):
        assert cli.load_config("configs/default.json") == cli.ExperimentConfig()

    def test_exit_code(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text('{"data": {}, "train": {}}')
        assert cli.main(["train", "--config", str(tmp_path / "c.json")]) == cli.EXIT_CONFIG
        assert "train.variant" in capsys.readouterr().err


class TestCheckpoint:
    @pytest.mark.parametrize("variant", list(Variant))
    def test_round_trip(self, tmp_path, variant):
        p = init_params(RngStream(2), 6, (5, 4), 3, 4, variant, dof=5, t0=0.7)
        cli.save_checkpoint(p, tmp_path / "c.bin", 30.0)
        q, gamma = cli.load_checkpoint(tmp_path / "c.bin")
        assert gamma == 30.0 and q.variant is p.variant and q.t0 == p.t0 and q.widths == (5, 4)
        for k, v in p.arrays().items():
            assert q.arrays()[k].tobytes() == v.tobytes()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c.bin").write_bytes(b"NOTACKPT" + bytes(40))
        with pytest.raises(ValueError):
            cli.load_checkpoint(tmp_path / "c.bin")

    def test_truncated(self, tmp_path):
        p = init_params(RngStream(2), 6, 5, 3, 4, "rts", dof=4)
        cli.save_checkpoint(p, tmp_path / "c.bin", 30.0)
        data = (tmp_path / "c.bin").read_bytes()
        (tmp_path / "c.bin").write_bytes(data[:-8])
        with pytest.raises(ValueError):
            cli.load_checkpoint(tmp_path / "c.bin")


class TestRun:
    def test_train_outputs(self, trained):
        _, out = trained
        rows = read_csv(out / "epochs.csv")
        assert rows[0] == list(cli.EpochLog.FIELDS) and len(rows) == 4
        report = json.loads((out / "train_report.json").read_text())
        assert report["metrics"]["status"] == "ok" and report["seed"] == 4
        assert (out / "config.json").exists() and (out / "checkpoint.bin").exists()

    @pytest.mark.parametrize("mode, files", [
        ("ood", ["roc.csv"]), ("reject", ["reject.csv"]),
        ("verify-pairs", ["pair_scores.csv", "fnmr_at_fmr.csv"]),
        ("noise-curve", ["noise_scores.csv", "noise_curve.csv"])])
    def test_eval_modes(self, trained, tmp_path, mode, files):
        _, out = trained
        ev = tmp_path / mode
        assert cli.main(["eval", "--checkpoint", str(out / "checkpoint.bin"), "--mode", mode,
                         "--out", str(ev)]) == 0
        for name in files:
            assert len(read_csv(ev / name)) > 1
        report = json.loads((ev / f"report_{mode}.json").read_text())
        assert report["seed"] == 4 and report["files"]

    def test_reject_rows(self, trained, tmp_path):
        _, out = trained
        cli.main(["eval", "--checkpoint", str(out / "checkpoint.bin"), "--mode", "reject",
                  "--out", str(tmp_path)])
        rows = read_csv(tmp_path / "reject.csv")
        assert rows[0] == ["fraction", "n_removed", "threshold", "fnmr"] and len(rows) == 12

    def test_plain_rejects_ood(self, tmp_path, capsys):
        cfg = small_config(tmp_path, "plain")
        assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "p")]) == 0
        code = cli.main(["eval", "--checkpoint", str(tmp_path / "p" / "checkpoint.bin"),
                         "--mode", "ood", "--out", str(tmp_path / "e")])
        assert code == cli.EXIT_UNSUPPORTED
        assert "uncertainty head" in capsys.readouterr().err
        assert cli.main(["eval", "--checkpoint", str(tmp_path / "p" / "checkpoint.bin"),
                         "--mode", "verify-pairs", "--out", str(tmp_path / "e")]) == 0

    def test_divergence_exit(self, tmp_path):
        cfg = small_config(tmp_path, lr=50.0, momentum=0.99, grad_clip=None)
        assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "d")]) == cli.EXIT_DIVERGED
        report = json.loads((tmp_path / "d" / "train_report.json").read_text())
        assert report["metrics"]["status"].startswith("diverged")
        cli.load_checkpoint(tmp_path / "d" / "checkpoint.bin")

    def test_deterministic_reports(self, trained, tmp_path):
        cfg, _ = trained
        for run in ("a", "b"):
            cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / run), "--seed", "9"])
            cli.main(["eval", "--checkpoint", str(tmp_path / run / "checkpoint.bin"), "--mode", "ood",
                      "--out", str(tmp_path / run)])
        for name in ("epochs.csv", "roc.csv", "checkpoint.bin"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_gen_data_matches_train(self, trained, tmp_path):
        cfg, _ = trained
        assert cli.main(["gen-data", "--config", str(cfg), "--out", str(tmp_path), "--seed", "4"]) == 0
        info = json.loads((tmp_path / "dataset_info.json").read_text())
        assert info["fingerprint"] == json.loads(
            (trained[1] / "train_report.json").read_text())["metrics"]["dataset_fingerprint"]
        assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "t"), "--seed", "4",
                         "--dataset", str(tmp_path / "dataset.txt")]) == 0
        assert (tmp_path / "t" / "checkpoint.bin").read_bytes() == (trained[1] / "checkpoint.bin").read_bytes()

    def test_sweep(self, trained, tmp_path):
        cfg, _ = trained
        assert cli.main(["sweep", "--config", str(cfg), "--out", str(tmp_path), "--axis", "delta"]) == 0
        rows = read_csv(tmp_path / "sweep_delta.csv")
        assert [r[1] for r in rows[1:]] == ["8", "16", "32"]
        assert all(r[2] == "ok" for r in rows[1:]) and len({r[6] for r in rows[1:]}) == 1


class TestPerfectSeparation:
    def test_auc_one_in_report(self, tmp_path, monkeypatch):
        from rts import protocols
        monkeypatch.setattr(protocols, "ood_detection",
                            lambda *a, **k: protocols.ood_from_scores([0.1, 0.2, 0.3], [0.7, 0.8]))
        cfg = small_config(tmp_path)
        cli.main(["train", "--config", str(cfg), "--out", str(tmp_path)])
        cli.main(["eval", "--checkpoint", str(tmp_path / "checkpoint.bin"), "--mode", "ood",
                  "--out", str(tmp_path)])
        m = json.loads((tmp_path / "report_ood.json").read_text())["metrics"]
        assert m["auc"] == 1.0 and m["tnr_at_tpr95"] == 1.0


class TestVerifyMath:
    def test_fault_injection_exit(self, monkeypatch, capsys):
        small = functools.partial(selfcheck.run_battery, grad_points=3, mc_trials=200_000)
        monkeypatch.setattr(cli, "run_battery", small)
        assert cli.main(["verify-math", "--inject-fault", "gradient"]) == cli.EXIT_MATH
        captured = capsys.readouterr()
        assert "FAIL gradient" in captured.out and "gradient" in captured.err

    def test_corrupted_gradient_detected(self):
        rng = RngStream(0, "fault")
        assert selfcheck.check_gradients(rng, points=3).passed
        with selfcheck.corrupted_gradient():
            bad = selfcheck.check_gradients(rng, points=3)
        assert not bad.passed and bad.value > 1e-3

    def test_check_line(self):
        r = selfcheck.CheckResult("x", True, 1e-7, 1e-4)
        assert r.line().startswith("PASS x: 1e-07")

    def test_unknown_fault(self):
        with pytest.raises(ValueError):
            selfcheck.run_battery(inject_fault="memory")
