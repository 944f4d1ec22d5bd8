import csv
import json

import pytest

from mgml.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from mgml.tensorcore.tensor import BACKWARD_RULES


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(out), "--seed", "7", "--scenes-per-class", "15"]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def base_dir(synth_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("base")
    rc = main(["base-train", "--data", str(synth_dir / "train.jsonl"), "--out", str(out), "--epochs", "1"])
    assert rc == EXIT_OK
    return out


def manifest(path):
    return json.loads((path / "manifest.json").read_text())


class TestSynth:
    def test_outputs_and_manifest(self, synth_dir):
        for name in ("train.jsonl", "train.jsonl.patches", "val.jsonl", "val.jsonl.patches", "split.json"):
            assert (synth_dir / name).exists()
        m = manifest(synth_dir)
        assert m["command"] == "synth" and m["seed"] == 7
        assert {"artifacts", "duration_s", "input_hash", "config"} <= set(m)

    def test_byte_identical_reruns(self, synth_dir, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--seed", "7", "--scenes-per-class", "15"]) == EXIT_OK
        for name in ("train.jsonl", "train.jsonl.patches", "val.jsonl", "split.json"):
            assert (tmp_path / name).read_bytes() == (synth_dir / name).read_bytes()

    def test_bad_confusability(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path), "--confusability", "1.5"]) == EXIT_USAGE
        assert "confusability" in capsys.readouterr().err


class TestTraining:
    def test_base_outputs(self, base_dir):
        rows = list(csv.reader((base_dir / "loss.csv").open()))
        assert rows[0] == ["epoch", "loss"] and len(rows) == 2
        m = manifest(base_dir)
        assert m["command"] == "base-train" and len(m["input_hash"]) == 40

    def test_adapt_needs_base_ckpt(self, synth_dir, tmp_path, capsys):
        rc = main(["adapt", "--data", str(synth_dir / "train.jsonl"), "--out", str(tmp_path)])
        assert rc == EXIT_USAGE
        assert "--base-ckpt" in capsys.readouterr().err

    def test_config_error_names_key(self, synth_dir, tmp_path, capsys):
        cfg = tmp_path / "c.txt"
        cfg.write_text("epochs=1\nwobble=3\n")
        rc = main(["base-train", "--data", str(synth_dir / "train.jsonl"), "--out", str(tmp_path), "--config", str(cfg)])
        assert rc == EXIT_USAGE
        assert "wobble" in capsys.readouterr().err

    def test_unknown_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["base-train", "--nope"])
        assert exc.value.code == EXIT_USAGE

    def test_adapt_eval_pipeline(self, synth_dir, base_dir, tmp_path):
        ad = tmp_path / "ad"
        rc = main([
            "adapt", "--data", str(synth_dir / "train.jsonl"), "--out", str(ad), "--epochs", "2",
            "--base-ckpt", str(base_dir / "checkpoint.mgck"), "--lambda0", "1.5", "--no-enable-oc",
        ])
        assert rc == EXIT_OK
        assert len((ad / "loss.csv").read_text().splitlines()) == 3
        assert manifest(ad)["config"]["enable_oc"] is False
        reports = []
        for run in ("e1", "e2"):
            rc = main(["eval", "--ckpt", str(ad / "checkpoint.mgck"), "--data", str(synth_dir / "val.jsonl"), "--out", str(tmp_path / run)])
            assert rc == EXIT_OK
            reports.append((tmp_path / run / "report.json").read_bytes())
        assert reports[0] == reports[1]
        rep = json.loads(reports[0])
        assert {"mAP_base", "mAP_novel", "mean_confusion"} <= set(rep)
        assert (tmp_path / "e1" / "detections.jsonl").read_bytes() == (tmp_path / "e2" / "detections.jsonl").read_bytes()
        assert (tmp_path / "e1" / "confusion.csv").exists()

    def test_eval_split_mismatch(self, synth_dir, base_dir, tmp_path, capsys):
        rc = main([
            "eval", "--ckpt", str(base_dir / "checkpoint.mgck"), "--data", str(synth_dir / "val.jsonl"),
            "--out", str(tmp_path), "--split", "VOC-split1",
        ])
        assert rc == EXIT_USAGE
        assert "split" in capsys.readouterr().err

    def test_eval_untrained_produces_report(self, synth_dir, base_dir, tmp_path):
        rc = main(["eval", "--ckpt", str(base_dir / "checkpoint.mgck"), "--data", str(synth_dir / "val.jsonl"), "--out", str(tmp_path), "--interp", "11point"])
        assert rc == EXIT_OK
        assert json.loads((tmp_path / "report.json").read_text())["interp"] == "11point"


class TestGradcheck:
    def test_passes(self, tmp_path, capsys):
        assert main(["gradcheck", "--seeds", "2", "--out", str(tmp_path)]) == EXIT_OK
        out = capsys.readouterr().out
        for name in ("L_oc", "L_meta", "L_metric", "L_reg", "total"):
            assert name in out
        assert (tmp_path / "manifest.json").exists()

    def test_corrupted_rule_fails(self, monkeypatch, capsys):
        original = BACKWARD_RULES["relu"]

        def broken(node, grad):
            return [0.5 * g for g in original(node, grad)]

        monkeypatch.setitem(BACKWARD_RULES, "relu", broken)
        assert main(["gradcheck", "--seeds", "1"]) == EXIT_RUNTIME
        assert "FAIL" in capsys.readouterr().out


class TestAblate:
    def test_rows(self, synth_dir, tmp_path):
        rc = main([
            "ablate", "--train", str(synth_dir / "train.jsonl"), "--val", str(synth_dir / "val.jsonl"),
            "--out", str(tmp_path), "--grid", "lambda", "--seeds", "2", "--epochs", "1", "--adapt-epochs", "1",
        ])
        assert rc == EXIT_OK
        rows = list(csv.DictReader((tmp_path / "ablation.csv").open()))
        assert len(rows) == 4 * 2 + 4
        assert [r["seed"] for r in rows[-4:]] == ["mean"] * 4
        assert manifest(tmp_path)["command"] == "ablate"
