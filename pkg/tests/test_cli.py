"""Command-line surface: file outputs, determinism, exit codes."""

import json

import numpy as np
import pytest

from interstyle.cli import main, parse_experiment_config, parse_train_config
from interstyle.errors import ConfigurationError


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "ds"
    spec = {"num_sources": 3, "ids_per_domain": 5, "images_per_id": 4,
            "seed": 21}
    spec_path = out.parent / "spec.json"
    spec_path.write_text(json.dumps(spec))
    assert main(["gen", "--spec", str(spec_path), "--out", str(out)]) == 0
    return out


@pytest.fixture()
def tiny_config(tmp_path):
    cfg = {"train": {"mode": "il", "epochs": 2, "P": 3, "K": 2, "seed": 1,
                     "iters_per_epoch": 2}}
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


class TestGen:
    def test_writes_dataset(self, data_dir):
        assert (data_dir / "manifest.json").exists()
        assert (data_dir / "data.bin").exists()

    def test_deterministic_outputs(self, data_dir, tmp_path):
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps({"num_sources": 3, "ids_per_domain": 5,
                                         "images_per_id": 4, "seed": 21}))
        out = tmp_path / "again"
        assert main(["gen", "--spec", str(spec_path), "--out", str(out)]) == 0
        assert (out / "data.bin").read_bytes() == \
            (data_dir / "data.bin").read_bytes()

    def test_unknown_spec_key_exits_2(self, tmp_path, capsys):
        spec_path = tmp_path / "bad.json"
        spec_path.write_text(json.dumps({"identities": 4}))
        code = main(["gen", "--spec", str(spec_path),
                     "--out", str(tmp_path / "x")])
        assert code == 2


class TestTrain:
    def test_outputs_and_epochs_zero(self, data_dir, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"train": {"epochs": 0, "P": 3, "K": 2}}))
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--data", str(data_dir),
                     "--out", str(out)]) == 0
        lines = (out / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 1
        row = json.loads(lines[0])
        assert row["mean_loss"] is None
        assert (out / "resolved-config.json").exists()
        assert (out / "checkpoint.bin").exists()

    def test_byte_identical_metrics(self, data_dir, tiny_config, tmp_path):
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            assert main(["train", "--config", str(tiny_config),
                         "--data", str(data_dir), "--out", str(out)]) == 0
            outs.append((out / "metrics.jsonl").read_bytes())
        assert outs[0] == outs[1]

    def test_unknown_config_key_exits_2(self, data_dir, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"train": {"epochz": 1}}))
        assert main(["train", "--config", str(cfg), "--data", str(data_dir),
                     "--out", str(tmp_path / "x")]) == 2

    def test_resolved_config_echoes_defaults(self, data_dir, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"train": {"epochs": 0, "P": 3, "K": 2}}))
        out = tmp_path / "run"
        main(["train", "--config", str(cfg), "--data", str(data_dir),
              "--out", str(out)])
        resolved = json.loads((out / "resolved-config.json").read_text())
        assert resolved["train"]["lr"] == pytest.approx(3.5e-4)
        assert resolved["train"]["stylizer"]["rho"] == 3.0
        assert resolved["train"]["eta"] == 0.2


class TestEval:
    def test_prints_metrics_json(self, data_dir, tiny_config, tmp_path, capsys):
        out = tmp_path / "run"
        main(["train", "--config", str(tiny_config), "--data", str(data_dir),
              "--out", str(out)])
        capsys.readouterr()
        code = main(["eval", "--checkpoint", str(out / "checkpoint.bin"),
                     "--data", str(data_dir), "--domain", "target"])
        assert code == 0
        payload = json.loads(capsys.readouterr().out.strip())
        assert set(payload) == {"mAP", "rank1"}
        assert 0.0 <= payload["mAP"] <= 1.0

    def test_unknown_domain_exits_2(self, data_dir, tiny_config, tmp_path,
                                    capsys):
        out = tmp_path / "run"
        main(["train", "--config", str(tiny_config), "--data", str(data_dir),
              "--out", str(out)])
        code = main(["eval", "--checkpoint", str(out / "checkpoint.bin"),
                     "--data", str(data_dir), "--domain", "mars"])
        assert code == 2


class TestStyleDiag:
    def test_writes_csv_and_summary(self, data_dir, tmp_path, capsys):
        out = tmp_path / "diag"
        code = main(["style-diag", "--data", str(data_dir), "--out", str(out),
                     "--draws", "200", "--seed", "3", "--batch", "24"])
        assert code == 0
        header = (out / "styles.csv").read_text().splitlines()[0]
        assert header.startswith("method,sample,mu_1")
        summary = json.loads((out / "summary.json").read_text())
        assert {"original", "isg", "mixstyle", "dsu", "padain"} <= set(summary)
        assert summary["isg"]["mean_abs_corr"] < summary["dsu"]["mean_corr"]


class TestAblate:
    def test_order_suite_csv(self, data_dir, tmp_path):
        base = tmp_path / "base.json"
        base.write_text(json.dumps({"train": {"P": 3, "K": 2,
                                              "iters_per_epoch": 2}}))
        out = tmp_path / "ab"
        code = main(["ablate", "--suite", "order", "--seeds", "1",
                     "--out", str(out), "--data", str(data_dir),
                     "--epochs", "1", "--config", str(base)])
        assert code == 0
        rows = (out / "order.csv").read_text().splitlines()
        assert rows[0] == "config,seed,map_target,rank1_target,final_loss"
        assert len(rows) == 3  # header + il_fbf + il_ffb
        summary = (out / "order_summary.csv").read_text().splitlines()
        assert summary[0] == "config,median_map,median_rank1"

    def test_components_suite_rows(self, data_dir, tmp_path):
        base = tmp_path / "base.json"
        base.write_text(json.dumps({"train": {"P": 3, "K": 2,
                                              "iters_per_epoch": 2}}))
        out = tmp_path / "ab2"
        code = main(["ablate", "--suite", "components", "--seeds", "2",
                     "--out", str(out), "--data", str(data_dir),
                     "--epochs", "1", "--config", str(base)])
        assert code == 0
        rows = (out / "components.csv").read_text().splitlines()[1:]
        labels = sorted({r.split(",")[0] for r in rows})
        assert labels == ["aug_isg", "baseline", "il_isg"]
        assert len(rows) == 6

    def test_unknown_suite_exits_2(self, data_dir, tmp_path):
        # argparse rejects the choice itself and exits with status 2
        with pytest.raises(SystemExit) as err:
            main(["ablate", "--suite", "everything", "--seeds", "1",
                  "--out", str(tmp_path / "x"), "--data", str(data_dir)])
        assert err.value.code == 2


class TestConfigParsing:
    def test_aug_mode_defaults_probability_half(self):
        cfg = parse_train_config({"mode": "aug"})
        assert cfg.stylizer.p == 0.5

    def test_il_mode_defaults_probability_one(self):
        cfg = parse_train_config({"mode": "il"})
        assert cfg.stylizer.p == 1.0

    def test_explicit_p_wins(self):
        cfg = parse_train_config({"mode": "aug", "stylizer": {"p": 0.9}})
        assert cfg.stylizer.p == 0.9

    def test_nested_unknown_key(self):
        with pytest.raises(ConfigurationError, match="stylizer"):
            parse_train_config({"stylizer": {"power": 2}})

    def test_dataset_section_parsed(self):
        spec, train, domain = parse_experiment_config(
            {"dataset": {"seed": 9}, "train": {}, "eval": {"domain": "target"}})
        assert spec.seed == 9
        assert domain == "target"

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigurationError):
            parse_experiment_config({"training": {}})
