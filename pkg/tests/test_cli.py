import json
from pathlib import Path

import pytest
import yaml
from click.testing import CliRunner

import reqaug.cli as cli_mod
from reqaug.cli import (
    cli,
    main,
    run_augment,
    run_detect,
    run_evaluate,
    run_ingest,
    run_train_detector,
)
from reqaug.config import desk_profile, load_config, profile_config, to_dict
from reqaug.errors import ConfigError, NonFiniteLoss


def mini_config(out_dir, seed=777):
    config = desk_profile(seed)
    config.demo_size = 60
    config.out_dir = str(out_dir)
    for lm in (config.generator_lm, config.detector_lm):
        lm.epochs = 6
        lm.hidden = 64
        lm.vocab_size = 1024
    config.discriminator.epochs = 3
    config.forest.n_trees = 20
    return config


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    config = mini_config(out)
    counts = {
        "ingest": run_ingest(config),
        "augment": run_augment(config),
        "train": run_train_detector(config),
        "detect": run_detect(config),
    }
    return config, counts


class TestStages:
    def test_ingest_artifacts(self, pipeline_run):
        config, counts = pipeline_run
        out = Path(config.out_dir)
        assert counts["ingest"]["records"] == 60
        assert counts["ingest"]["train"] + counts["ingest"]["test"] == 60
        for name in ("full", "train", "test"):
            assert (out / "corpus" / f"{name}.jsonl").exists()
        manifest = json.loads((out / "manifests" / "ingest.json").read_text())
        assert manifest["seeds"]["master"] == 777
        for rel, digest in manifest["checksums"].items():
            assert len(digest) == 64 and (out / rel).exists()

    def test_augment_doubles_at_desk_profile(self, pipeline_run):
        config, counts = pipeline_run
        out = Path(config.out_dir)
        assert counts["augment"]["accepted"] == counts["ingest"]["train"]
        assert (out / "datastore.jsonl").exists()
        assert (out / "lexicon" / "reserved.txt").exists()
        assert (out / "generator" / "mlm" / "weights.bin").exists()

    def test_detector_artifacts(self, pipeline_run):
        config, counts = pipeline_run
        out = Path(config.out_dir)
        assert 0.0 <= counts["train"]["theta"] <= 1.0
        for name in ("forest.json", "calibration.json", "audit.json",
                     "mlm/weights.bin", "tokenizer/vocab.json"):
            assert (out / "detector" / name).exists()

    def test_verdicts(self, pipeline_run):
        config, counts = pipeline_run
        out = Path(config.out_dir)
        assert counts["detect"]["classified"] == counts["ingest"]["test"]
        lines = (out / "verdicts.jsonl").read_text().strip().split("\n")
        assert len(lines) == counts["ingest"]["test"]

    def test_detect_on_training_normals_flags_at_most_one_percent(self, pipeline_run):
        config, _ = pipeline_run
        out = Path(config.out_dir)
        from reqaug.augment import load_datastore
        from reqaug.detect import classify, load_detector
        from reqaug.ingest import NORMAL
        detector = load_detector(out / "detector")
        store = load_datastore(out / "datastore.jsonl")
        normals = [r for r in store.all_records() if r.label == NORMAL]
        flagged = sum(classify(detector, r).flagged != NORMAL for r in normals)
        assert flagged / len(normals) <= 0.01

    def test_evaluate_reports(self, pipeline_run):
        config, _ = pipeline_run
        doc = run_evaluate(config)
        out = Path(config.out_dir)
        assert (out / "reports" / "similarity.csv").exists()
        assert (out / "reports" / "classification.csv").exists()
        assert 0.0 <= doc["similarity"]["bleu"] <= 1.0
        assert 0.0 <= doc["similarity"]["bert_f1"] <= 1.0
        rows = (out / "reports" / "classification.csv").read_text().strip().split("\n")
        assert rows[0] == "arm,precision,recall,f1,mcc"
        assert len(rows) == 4  # header, baseline, augmented, delta

    def test_manifest_replay_reproduces_config(self, pipeline_run):
        config, _ = pipeline_run
        manifest_path = Path(config.out_dir) / "manifests" / "augment.json"
        replayed = load_config(manifest_path)
        assert to_dict(replayed) == to_dict(config)

    def test_manifest_replay_reproduces_artifacts(self, pipeline_run, tmp_path):
        config, _ = pipeline_run
        replayed = load_config(Path(config.out_dir) / "manifests" / "ingest.json")
        replayed.out_dir = str(tmp_path / "replay")
        run_ingest(replayed)
        for name in ("full", "train", "test"):
            original = Path(config.out_dir) / "corpus" / f"{name}.jsonl"
            replay = Path(replayed.out_dir) / "corpus" / f"{name}.jsonl"
            assert original.read_bytes() == replay.read_bytes()


def test_ablation_rows(tmp_path):
    config = mini_config(tmp_path / "run", seed=778)
    config.demo_size = 40
    run_ingest(config)
    rows = cli_mod.run_ablate(config, [0.97, 0.995])
    assert [r["confidence"] for r in rows] == [0.97, 0.995]
    for row in rows:
        assert row["delta_f1"] == pytest.approx(row["f1_augmented"] - row["f1_baseline"])
    table = (Path(config.out_dir) / "reports" / "ablation.csv").read_text()
    assert table.startswith("confidence,reserved_tokens,synthetics,")


def test_duplicate_ablation_levels_identical(tmp_path):
    config = mini_config(tmp_path / "run", seed=779)
    config.demo_size = 40
    run_ingest(config)
    rows = cli_mod.run_ablate(config, [0.99, 0.99])
    assert rows[0]["f1_augmented"] == rows[1]["f1_augmented"]
    assert rows[0]["delta_f1"] == rows[1]["delta_f1"]


class TestCommandLine:
    def test_group_help(self):
        result = CliRunner().invoke(cli, ["--help"])
        assert result.exit_code == 0
        for command in ("ingest", "augment", "train-detector", "detect",
                        "evaluate", "ablate"):
            assert command in result.output

    def test_ingest_command(self, tmp_path):
        result = CliRunner().invoke(
            cli, ["--profile", "desk", "--seed", "5", "--out", str(tmp_path / "o"),
                  "ingest"])
        assert result.exit_code == 0, result.output
        assert "200 records" in result.output
        assert (tmp_path / "o" / "corpus" / "train.jsonl").exists()

    def test_config_file_merges_over_profile(self, tmp_path):
        cfg_path = tmp_path / "cfg.yaml"
        cfg_path.write_text(yaml.safe_dump(
            {"demo_size": 30, "generator_lm": {"epochs": 2}}))
        config = load_config(cfg_path, base=profile_config("desk", 9))
        assert config.demo_size == 30
        assert config.generator_lm.epochs == 2
        assert config.generator_lm.hidden == 128  # untouched desk value

    def test_config_file_master_seed_reaches_stages(self, tmp_path):
        cfg_path = tmp_path / "cfg.yaml"
        cfg_path.write_text(yaml.safe_dump(
            {"seed": 42, "forest": {"seed": 9000}}))
        config = load_config(cfg_path, base=profile_config("desk", 9))
        assert config.seed == 42
        assert config.generator_lm.seed == 43  # derived from the new master
        assert config.forest.seed == 9000  # explicit pin wins

    def test_config_env_var(self, tmp_path):
        cfg_path = tmp_path / "cfg.yaml"
        cfg_path.write_text(yaml.safe_dump({"demo_size": 24}))
        result = CliRunner().invoke(
            cli, ["--out", str(tmp_path / "o"), "ingest"],
            env={"REQAUG_CONFIG": str(cfg_path)})
        assert result.exit_code == 0, result.output
        assert "24 records" in result.output

    def test_paper_profile_defaults(self):
        config = profile_config("paper", 1)
        assert config.train_fraction == 0.7
        assert config.confidence == 0.9999
        assert config.z_override == 5.73
        assert config.calibration_percentile == 99.0
        lm = config.generator_lm
        assert (lm.epochs, lm.batch_size, lm.block_size, lm.max_seq_len) == \
            (20, 32, 128, 512)
        assert (lm.layers, lm.heads, lm.hidden, lm.vocab_size) == (6, 12, 768, 52_000)

    def test_bad_config_file(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("demo_size: [unclosed")
        with pytest.raises(ConfigError):
            load_config(path)
        path2 = tmp_path / "bad2.yaml"
        path2.write_text(yaml.safe_dump({"no_such_field": 1}))
        with pytest.raises(ConfigError):
            load_config(path2)


class TestExitCodes:
    def invoke_main(self, monkeypatch, argv):
        monkeypatch.setattr("sys.argv", ["reqaug"] + argv)
        with pytest.raises(SystemExit) as exc:
            main()
        return exc.value.code

    def test_missing_artifacts_is_config_error(self, tmp_path, monkeypatch):
        code = self.invoke_main(
            monkeypatch, ["--out", str(tmp_path / "empty"), "detect"])
        assert code == 2

    def test_empty_corpus_is_data_error(self, tmp_path, monkeypatch):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text(yaml.safe_dump({"dataset_format": "canonical",
                                       "dataset_path": str(empty)}))
        code = self.invoke_main(
            monkeypatch, ["--config", str(cfg), "--out", str(tmp_path / "o"), "ingest"])
        assert code == 3

    def test_numerical_failure_code(self, tmp_path, monkeypatch):
        monkeypatch.setattr(cli_mod, "run_ingest",
                            lambda config: (_ for _ in ()).throw(NonFiniteLoss("boom")))
        code = self.invoke_main(
            monkeypatch, ["--out", str(tmp_path / "o"), "ingest"])
        assert code == 4

    def test_success_returns_none(self, tmp_path, monkeypatch):
        monkeypatch.setattr("sys.argv",
                            ["reqaug", "--out", str(tmp_path / "o"), "ingest"])
        assert main() is None
