import json
import subprocess
import sys

import numpy as np
import pytest
from conftest import write_corpus

from idtransformer import cli
from idtransformer import experiments as ex
from idtransformer.dataproc import load_dataset
from idtransformer.linalg import read_matrix_csv, write_matrix_csv

TINY = ["--d-e", "16", "--heads", "2", "--d-s-max", "16", "--ffn-hidden", "16"]


def run_cli(args, capsys):
    code = cli.main(args)
    out, err = capsys.readouterr()
    return code, out, err


class TestConfig:
    def test_precedence(self, tmp_path):
        cfg_file = tmp_path / "c.json"
        cfg_file.write_text(json.dumps({"epochs": 7, "lr": 0.5, "encoder": {"h": 4}}))
        c = ex.build_config("desk", str(cfg_file), {"lr": 0.1, "encoder": {}})
        assert (c.epochs, c.lr, c.encoder.d_e, c.encoder.h, c.encoder.d_v) == (7, 0.1, 128, 4, 32)

    def test_full_scale_preset(self):
        c = ex.build_config("paper")
        assert (c.encoder.d_e, c.encoder.ffn_hidden, c.epochs, c.batch_size, c.lr) == (512, 2048, 20, 256, 1e-3)

    def test_roundtrip(self):
        c = ex.build_config("desk", overrides={"encoder": {"variant": "add", "d_k": 4}, "seed": 3})
        assert ex.RunConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c

    def test_flags_override(self):
        args = cli.build_parser().parse_args(["train", "--preset", "desk", "--variant", "add", "--d-k", "4",
                                              "--epochs", "2"])
        c = cli.config_from_args(args, "train")
        assert (c.encoder.variant.value, c.encoder.d_k, c.encoder.d_v, c.epochs) == ("add", 4, 128, 2)

    def test_abbreviations_rejected(self):
        with pytest.raises(SystemExit):
            cli.build_parser().parse_args(["train", "--epoch", "2"])


class TestTrain:
    def test_train_writes_reports_and_beats_majority(self, corpus, tmp_path, capsys):
        out = tmp_path / "run"
        code, stdout, _ = run_cli(["train", "--manifest", str(corpus), "--epochs", "10", "--batch-size", "16",
                                   "--lr", "0.01", "--out-dir", str(out), *TINY], capsys)
        assert code == 0
        assert json.loads(stdout)["ok"] is True
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["final_train_acc"] > metrics["majority_rate_train"]
        assert metrics["test_acc_at_best_valid"] > metrics["majority_rate_test"] + 0.15
        assert metrics["config"]["encoder"]["n_classes"] == 3
        assert len(metrics["history"]) == 10
        assert metrics["dataset"]["split_sizes"] == {"train": 210, "valid": 90, "test": 90}
        model = ex.load_model(out / "checkpoint.bin")
        assert model.config.vocab_size == metrics["dataset"]["vocab_size"]

    def test_overfits_tiny_subset(self, tmp_path):
        manifest = write_corpus(tmp_path / "tiny", n_train=32, n_test=4)
        cfg = ex.build_config(overrides={"encoder": {"d_e": 16, "h": 2, "d_s_max": 20, "ffn_hidden": 16},
                                         "epochs": 200, "manifest": str(manifest)})
        ds = load_dataset(manifest)
        ds.split[ds.split == "valid"] = "train"
        cfg = ex._with_encoder(cfg, ex.EncoderConfig.from_dict({**cfg.encoder.to_dict(),
                                                                 "vocab_size": len(ds.vocab), "n_classes": 3}))
        metrics = ex.train_model(ex.make_model(cfg), ds, cfg)
        assert metrics["history"][-1]["train_acc"] == 1.0

    def test_loss_trajectory_bitwise_deterministic(self, corpus):
        cfg = ex.build_config(overrides={"encoder": {"d_e": 8, "h": 2, "d_s_max": 16, "ffn_hidden": 8,
                                                     "vocab_size": 60}, "epochs": 2, "batch_size": 64})
        ds = load_dataset(corpus)
        cfg = ex._with_encoder(cfg, ex.EncoderConfig.from_dict({**cfg.encoder.to_dict(),
                                                                 "vocab_size": len(ds.vocab), "n_classes": 3}))
        a = ex.train_model(ex.make_model(cfg), ds, cfg)["history"]
        b = ex.train_model(ex.make_model(cfg), ds, cfg)["history"]
        assert [r["loss"] for r in a] == [r["loss"] for r in b]

    def test_missing_dataset_gives_error_json(self, tmp_path, capsys):
        out = tmp_path / "err"
        code, stdout, err = run_cli(["train", "--manifest", str(tmp_path / "nope.json"), "--out-dir", str(out)],
                                    capsys)
        assert code != 0 and stdout == ""
        payload = json.loads(err)
        assert payload["ok"] is False and payload["error"] == "FileNotFoundError"
        assert json.loads((out / "error.json").read_text()) == payload

    def test_config_violation_gives_error_json(self, capsys):
        code, _, err = run_cli(["rank-sweep", "--random-init", "--d-e", "10", "--heads", "3", "--d-s", "4"], capsys)
        assert code == 1 and json.loads(err)["error"] == "ConfigError"


class TestRankSweep:
    def test_con_rows(self, tmp_path, capsys):
        out = tmp_path / "rs"
        code, stdout, _ = run_cli(["rank-sweep", "--random-init", "--d-e", "32", "--heads", "4",
                                   "--d-s-max", "32", "--ffn-hidden", "8", "--d-s", "1,4,8,9,20",
                                   "--n-samples", "10", "--out-dir", str(out)], capsys)
        assert code == 0
        rows = ex.read_csv_report(out / "rank_sweep.csv")
        assert [int(r["d_s"]) for r in rows] == [1, 4, 8, 9, 20]
        assert [float(r["mean_rank"]) for r in rows] == [1, 4, 8, 8, 8]
        assert [float(r["mean_nullity"]) for r in rows] == [0, 0, 0, 1, 12]
        text = (out / "rank_sweep.csv").read_text()
        assert text.startswith("# build: ") and "# seed: 0" in text and "# config: " in text
        assert json.loads(stdout)["rows"][0]["status"] == "ok"

    def test_add_nullity_zero(self, tmp_path, capsys):
        out = tmp_path / "rs"
        code, _, _ = run_cli(["rank-sweep", "--random-init", "--variant", "add", *TINY, "--d-s", "2,8,16",
                              "--n-samples", "5", "--out-dir", str(out)], capsys)
        assert code == 0
        assert all(float(r["mean_nullity"]) == 0 for r in ex.read_csv_report(out / "rank_sweep.csv"))

    def test_with_corpus_and_checkpoint(self, corpus, tmp_path, capsys):
        run = tmp_path / "run"
        assert run_cli(["train", "--manifest", str(corpus), "--epochs", "1", "--out-dir", str(run), *TINY],
                       capsys)[0] == 0
        out = tmp_path / "rs"
        with pytest.warns(UserWarning, match=">= 16 tokens"):
            code, _, _ = run_cli(["rank-sweep", "--checkpoint", str(run / "checkpoint.bin"), "--manifest",
                                  str(corpus), "--d-s", "4,12,16", "--n-samples", "80", "--out-dir", str(out)],
                                 capsys)
        assert code == 0
        rows = ex.read_csv_report(out / "rank_sweep.csv")
        assert [r["status"] for r in rows] == ["ok", "ok", "short"]
        assert float(rows[0]["mean_rank"]) == 4

    def test_needs_model_source(self, capsys):
        with pytest.raises(SystemExit):
            cli.main(["rank-sweep", "--d-s", "4"])
        with pytest.raises(SystemExit):
            cli.main(["rank-sweep", "--d-s", "4", "--random-init", "--checkpoint", "x"])


class TestAtildeSweep:
    ARGS = ["atilde-sweep", "--random-init", "--d-e", "32", "--heads", "4", "--d-s-max", "32",
            "--ffn-hidden", "8"]

    def test_marker_and_stats(self, tmp_path, capsys):
        out = tmp_path / "as"
        code, _, _ = run_cli([*self.ARGS, "--d-s-range", "9", "12", "--n-atilde", "5", "--out-dir", str(out)],
                             capsys)
        assert code == 0
        rows = ex.read_csv_report(out / "atilde_sweep.csv")
        assert [r["status"] for r in rows] == ["identifiable", "ok", "ok", "ok"]
        assert rows[0]["mean_rank_A_l"] == "" and rows[0]["n"] == "0"
        for r in rows[1:]:
            assert int(r["n"]) == 5
            assert float(r["p1_pass_rate"]) == float(r["p2_pass_rate"]) == float(r["p3_pass_rate"]) == 1.0
            assert float(r["mean_rank_A_l"]) == int(r["d_s"]) - 1
            assert float(r["p4_pass_rate"]) == 0.0
        analysis = ex.read_csv_report(out / "analysis.csv")
        assert [int(r["nullity_T1"]) for r in analysis] == [0, 1, 2, 3]
        data = json.loads((out / "analysis.json").read_text())
        assert len(data["sweep"][1]["flags"]) == 5 and data["flag_order"] == ["p1", "p2", "p3", "p4"]

    def test_single_sample(self, tmp_path, capsys):
        out = tmp_path / "as"
        assert run_cli([*self.ARGS, "--d-s-range", "12", "12", "--n-atilde", "1", "--out-dir", str(out)],
                       capsys)[0] == 0
        assert ex.read_csv_report(out / "atilde_sweep.csv")[0]["n"] == "1"


class TestDeterminism:
    @pytest.mark.parametrize("command,files", [
        (["rank-sweep", "--random-init", *TINY, "--d-s", "3,16", "--n-samples", "4"], ["rank_sweep.csv"]),
        (["atilde-sweep", "--random-init", "--d-e", "16", "--heads", "4", "--d-s-max", "16", "--ffn-hidden", "8",
          "--d-s-range", "6", "7", "--n-atilde", "3"], ["atilde_sweep.csv", "analysis.csv", "analysis.json"]),
    ])
    def test_byte_identical(self, tmp_path, capsys, command, files):
        for name in ("a", "b"):
            assert run_cli([*command, "--seed", "11", "--out-dir", str(tmp_path / name)], capsys)[0] == 0
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_train_reports_identical(self, corpus, tmp_path, capsys):
        for name in ("a", "b"):
            assert run_cli(["train", "--manifest", str(corpus), "--epochs", "1", "--out-dir", str(tmp_path / name),
                            *TINY], capsys)[0] == 0
        for f in ("metrics.json", "checkpoint.bin"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


class TestMatrixCommands:
    def test_dump_then_check(self, tmp_path, capsys):
        out = tmp_path / "dump"
        code, _, _ = run_cli(["dump-captures", "--random-init", *TINY, "--d-s", "12", "--out-dir", str(out)],
                             capsys)
        assert code == 0
        cap = out / "captures"
        names = sorted(p.name for p in cap.glob("*.csv"))
        assert names == sorted(f"head{i}_{n}.csv" for i in range(2) for n in ("Q", "K", "V", "Alogits", "A", "T", "H"))
        A = read_matrix_csv(cap / "head0_A.csv")
        assert A.shape == (12, 12)
        np.testing.assert_allclose(read_matrix_csv(cap / "head0_H.csv"), A @ read_matrix_csv(cap / "head0_T.csv"))

        write_matrix_csv(tmp_path / "zero.csv", np.zeros_like(A))
        code, stdout, _ = run_cli(["check", "--attention", str(cap / "head0_A.csv"), "--atilde",
                                   str(tmp_path / "zero.csv"), "--transform", str(cap / "head0_T.csv"), "--d-k", "8",
                                   "--out-dir", str(tmp_path / "chk")], capsys)
        assert code == 0
        report = json.loads(stdout)
        assert report["p1_nonneg"] and report["p2_nullspace"] and report["p3_rowsum"]
        assert json.loads((tmp_path / "chk" / "check.json").read_text())["p2_max"] == 0.0

    def test_dump_from_corpus(self, corpus, tmp_path, capsys):
        out = tmp_path / "dump"
        assert run_cli(["dump-captures", "--random-init", *TINY, "--vocab-size", "100", "--manifest", str(corpus),
                        "--d-s", "6", "--example", "2", "--out-dir", str(out)], capsys)[0] == 0
        assert len(json.loads((out / "captures" / "tokens.json").read_text())["ids"]) == 6

    def test_check_missing_file(self, tmp_path, capsys):
        code, _, err = run_cli(["check", "--attention", "a.csv", "--atilde", "b.csv", "--transform", "c.csv"], capsys)
        assert code == 1 and json.loads(err)["ok"] is False


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "idtransformer", "rank-sweep", "--random-init", *TINY,
                           "--d-s", "2", "--n-samples", "1", "--out-dir", str(tmp_path)],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["ok"] is True
