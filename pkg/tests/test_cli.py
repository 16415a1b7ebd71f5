import csv
import json

import numpy as np
import pytest
import yaml

from invspread import cli, pipeline, trainer
from invspread import evaluation as ev
from invspread.config import load_run_config

EPOCHS = 3


def write_config(tmp_path, name="quick", **train):
    cfg = {
        "preset": "synthetic-quick",
        "run_name": name,
        "output_dir": str(tmp_path / "runs"),
        "train": {"epochs": EPOCHS, **train},
    }
    path = tmp_path / f"{name}.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    path = write_config(tmp)
    assert cli.main(["-q", "train", "--config", str(path)]) == 0
    return path, tmp / "runs" / "quick"


class TestTrain:
    def test_artifacts(self, trained):
        _, run = trained
        for name in ("config.resolved.yaml", "metrics.csv", "timing.csv", "last.bin"):
            assert (run / name).is_file(), name
        assert sorted(p.name for p in run.glob("checkpoint_epoch*.bin")) == [f"checkpoint_epoch{e:03d}.bin" for e in (1, 2, 3)]
        rows = list(csv.DictReader(open(run / "metrics.csv")))
        assert [int(r["epoch"]) for r in rows] == [0, 1, 2]
        assert all(np.isfinite(float(r["mean_loss"])) for r in rows)

    def test_resolved_config_reloads(self, trained):
        path, run = trained
        again = load_run_config(run / "config.resolved.yaml")
        assert again == load_run_config(path)

    def test_same_seed_same_metrics(self, trained, tmp_path):
        _, run = trained
        other = write_config(tmp_path)
        assert cli.main(["-q", "train", "--config", str(other)]) == 0
        assert (tmp_path / "runs" / "quick" / "metrics.csv").read_bytes() == (run / "metrics.csv").read_bytes()

    def test_seed_flag_changes_run(self, trained, tmp_path):
        _, run = trained
        other = write_config(tmp_path)
        assert cli.main(["-q", "train", "--config", str(other), "--seed", "7"]) == 0
        assert (tmp_path / "runs" / "quick" / "metrics.csv").read_bytes() != (run / "metrics.csv").read_bytes()
        resolved = yaml.safe_load((tmp_path / "runs" / "quick" / "config.resolved.yaml").read_text())
        assert resolved["train"]["master_seed"] == 7

    def test_resume_matches_uninterrupted(self, trained, tmp_path):
        path, run = trained
        short = write_config(tmp_path, epochs=2)
        assert cli.main(["-q", "train", "--config", str(short)]) == 0
        assert cli.main(["-q", "train", "--config", str(path), "--out", str(tmp_path / "runs" / "quick"), "--checkpoint", str(tmp_path / "runs" / "quick" / "last.bin")]) == 0
        a = (tmp_path / "runs" / "quick" / "last.bin").read_bytes()
        assert a == (run / "last.bin").read_bytes()


class TestEval:
    def test_report_and_idempotence(self, trained, tmp_path):
        path, run = trained
        assert cli.main(["-q", "eval", "--config", str(path), "--out", str(tmp_path / "a")]) == 0
        assert cli.main(["-q", "eval", "--config", str(path), "--out", str(tmp_path / "b")]) == 0
        a = (tmp_path / "a" / "report.json").read_text()
        assert a == (tmp_path / "b" / "report.json").read_text()
        report = json.loads(a)
        assert 0.0 <= report["knn_accuracy"] <= 1.0
        assert report["num_train"] == 200 and report["num_test"] == 100
        assert (tmp_path / "a" / "histograms.csv").is_file()

    def test_random_encoder_not_below_chance(self, trained):
        path, _ = trained
        cfg = load_run_config(path)
        train_ds, test_ds = pipeline.load_datasets(cfg)
        state = trainer.init_state(cfg.train, len(train_ds))
        report = pipeline.evaluate(state.params, cfg, train_ds, test_ds).report
        assert report.knn_accuracy >= 1 / train_ds.num_classes - 0.05

    def test_incompatible_checkpoint(self, trained, tmp_path, capsys):
        _, run = trained
        bad = write_config(tmp_path, name="wide", encoder={"kind": "mlp", "hidden": [256], "embed_dim": 32})
        code = cli.main(["-q", "eval", "--config", str(bad), "--checkpoint", str(run / "last.bin")])
        assert code == 1
        assert "error" in capsys.readouterr().err

    def test_missing_checkpoint(self, tmp_path):
        path = write_config(tmp_path, name="never")
        assert cli.main(["-q", "eval", "--config", str(path)]) == 1


class TestExport:
    def test_round_trip(self, trained, tmp_path):
        path, run = trained
        out = tmp_path / "emb.bin"
        assert cli.main(["-q", "export-embeddings", "--config", str(path), "--out", str(out)]) == 0
        es = ev.read_embeddings(out, expected_dim=64)
        cfg = load_run_config(path)
        _, test_ds = pipeline.load_datasets(cfg)
        ref = pipeline.embedding_set(trainer.load_encoder(run / "last.bin", cfg.train.encoder), test_ds, cfg)
        assert es.features.tobytes() == ref.features.tobytes()
        np.testing.assert_array_equal(es.labels, test_ds.labels)
        np.testing.assert_allclose(np.linalg.norm(es.features, axis=1), 1.0, atol=1e-5)


class TestConfigErrors:
    def test_missing_dataset_names_field(self, tmp_path, capsys):
        code = cli.main(["-q", "train", "--preset", "cifar-subset", "--out", str(tmp_path)]) if not pipeline.os.path.isdir("data/cifar-10-batches-bin") else None
        if code is None:
            pytest.skip("default CIFAR directory exists")
        assert code == 2
        assert "dataset.path" in capsys.readouterr().err

    def test_unknown_key_reports_line(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text("preset: synthetic-quick\ntrain:\n  epochs: 1\n  lerning_rate: 0.1\n")
        assert cli.main(["-q", "train", "--config", str(path)]) == 2
        err = capsys.readouterr().err
        assert "train.lerning_rate" in err and "line 4" in err

    def test_bad_value_reports_field(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text("preset: synthetic-quick\ntrain:\n  loss:\n    temperature: -1\n")
        assert cli.main(["-q", "train", "--config", str(path)]) == 2
        assert "train.loss.temperature" in capsys.readouterr().err

    def test_no_source(self):
        assert cli.main(["-q", "train"]) == 2

    def test_unknown_verb(self):
        assert cli.main(["frobnicate"]) == 2

    @pytest.mark.parametrize("axis", ["", "colour"])
    def test_bad_sweep(self, tmp_path, axis):
        path = write_config(tmp_path)
        assert cli.main(["-q", "ablate", "--config", str(path), "--sweep", axis]) == 2


@pytest.mark.slow
class TestAblate:
    def run(self, tmp_path, axis):
        path = write_config(tmp_path, epochs=1)
        assert cli.main(["-q", "ablate", "--config", str(path), "--axis", axis, "--out", str(tmp_path / "out")]) == 0
        with open(tmp_path / "out" / f"ablation_{axis}.csv") as fh:
            return list(csv.DictReader(fh))

    def test_augmentation(self, tmp_path):
        rows = self.run(tmp_path, "augmentation")
        assert [r["strategy"] for r in rows] == ["Full", "w/o R", "w/o G", "w/o C", "w/o F"]
        assert [r["changed"] for r in rows] == [
            "",
            "train.augment.enable_crop",
            "train.augment.enable_grayscale",
            "train.augment.enable_jitter",
            "train.augment.enable_flip",
        ]
        reports = sorted((tmp_path / "out" / "ablation-augmentation").glob("*/report.json"))
        assert len(reports) == 5

    def test_sampling(self, tmp_path):
        rows = self.run(tmp_path, "sampling")
        assert [r["strategy"] for r in rows] == ["Full", "No DA", "Hard", "Easy"]
        assert [r["changed"] for r in rows] == ["", "train.no_augmentation", "train.loss.negative_filter", "train.loss.negative_filter"]
