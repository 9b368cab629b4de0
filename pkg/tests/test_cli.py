import json
import xml.etree.ElementTree as ET

import pytest

from infantmotion.cli import main

SVG = "{http://www.w3.org/2000/svg}"
FAST_SVM = ["--svm-epochs", "3", "--jobs", "1"]


@pytest.fixture(scope="module")
def scenario_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("scenario") / "short.json"
    path.write_text(json.dumps({"duration_s": 60.0, "meta_events": 0}))
    return path


@pytest.fixture(scope="module")
def dataset(tmp_path_factory, scenario_file):
    out = tmp_path_factory.mktemp("data")
    assert main(["synth", "--scenario", str(scenario_file), "--subjects", "12", "--seed", "3", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def small_data(tmp_path_factory, scenario_file):
    out = tmp_path_factory.mktemp("small")
    assert main(["synth", "--scenario", str(scenario_file), "--subjects", "4", "--seed", "5", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def eval_bundle(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("eval")
    assert main(["eval", "--data", str(dataset), "--classifier", "svm", "--iar", "off", *FAST_SVM, "--out", str(out)]) == 0
    return out


class TestSynth:
    def test_file_counts(self, dataset):
        assert len(list((dataset / "recordings").glob("*.csv"))) == 12
        assert len(list((dataset / "annotations").glob("*.jsonl"))) == 36
        assert len(list((dataset / "truth").glob("*.jsonl"))) == 12
        doc = json.loads((dataset / "scenario.json").read_text())
        assert doc["seed"] == 3 and doc["scenario"]["duration_s"] == 60.0

    def test_seed_changes_data_not_schema(self, tmp_path, scenario_file):
        for seed in (1, 2):
            assert main(["synth", "--scenario", str(scenario_file), "--subjects", "1", "--seed", str(seed),
                         "--out", str(tmp_path / str(seed))]) == 0
        a = (tmp_path / "1" / "recordings" / "S01.csv").read_text().splitlines()
        b = (tmp_path / "2" / "recordings" / "S01.csv").read_text().splitlines()
        assert a[:2] == b[:2] and a[2:] != b[2:]

    def test_invalid_scenario(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"duration_s": 60, "wobble": 1}')
        assert main(["synth", "--scenario", str(bad), "--out", str(tmp_path / "x")]) != 0
        assert "wobble" in capsys.readouterr().err

    def test_zero_subjects(self, tmp_path):
        assert main(["synth", "--subjects", "0", "--out", str(tmp_path)]) != 0


class TestEval:
    def test_bundle_contents(self, eval_bundle):
        rep = json.loads((eval_bundle / "metrics.json").read_text())
        assert rep["iar"]["enabled"] is False
        assert len(rep["folds"]) == 12
        for track in ("posture", "movement"):
            subsets = rep["tracks"][track]["subsets"]
            assert set(subsets) == {"full_agreement", "all_frames"}
            for block in subsets.values():
                assert {"acc", "uar", "uap", "uaf"} <= set(block)
        assert (eval_bundle / "table1.txt").read_text().startswith("Full agreement frames")
        ET.parse(eval_bundle / "fscores.svg")
        assert (eval_bundle / "confusion_movement_all_frames.csv").exists()

    def test_rerun_byte_identical(self, tmp_path, dataset, eval_bundle):
        assert main(["eval", "--data", str(dataset), "--classifier", "svm", "--iar", "off", *FAST_SVM,
                     "--out", str(tmp_path)]) == 0
        assert (tmp_path / "metrics.json").read_bytes() == (eval_bundle / "metrics.json").read_bytes()

    def test_config_file_overrides_flags(self, tmp_path, small_data):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"track": "posture", "svm_epochs": 2, "jobs": 1, "data": str(small_data),
                                   "out": str(tmp_path / "o")}))
        assert main(["eval", "--data", "/nonexistent", "--track", "movement", "--config", str(cfg)]) == 0
        rep = json.loads((tmp_path / "o" / "metrics.json").read_text())
        assert set(rep["tracks"]) == {"posture"}
        assert rep["config"]["svm_epochs"] == 2

    def test_bad_config_key(self, tmp_path, small_data):
        cfg = tmp_path / "run.json"
        cfg.write_text('{"learning_rate": 1}')
        assert main(["eval", "--data", str(small_data), "--config", str(cfg)]) == 2

    def test_missing_data(self, tmp_path, capsys):
        assert main(["eval", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2
        assert "error" in capsys.readouterr().err

    def test_partial_dataset_warns(self, tmp_path, small_data):
        import shutil

        shutil.copytree(small_data, tmp_path / "d")
        for p in (tmp_path / "d" / "annotations").glob("S02__*.jsonl"):
            p.unlink()
        assert main(["eval", "--data", str(tmp_path / "d"), "--track", "posture", *FAST_SVM,
                     "--out", str(tmp_path / "o")]) == 0
        rep = json.loads((tmp_path / "o" / "metrics.json").read_text())
        assert any("S02" in w for w in rep["warnings"])

    @pytest.mark.slow
    def test_cnn_with_refinement_records_iterations(self, tmp_path, small_data):
        assert main(["eval", "--data", str(small_data), "--classifier", "cnn", "--iar", "on", "--iterations", "5",
                     "--track", "posture", "--cnn-epochs", "1", "--jobs", "1", "--out", str(tmp_path)]) == 0
        rep = json.loads((tmp_path / "metrics.json").read_text())
        assert rep["iar"] == {"enabled": True, "iterations": 5, "classifier": "cnn"}
        assert rep["config"]["classifier"] == "cnn"


class TestReportAndAblate:
    def test_report_renders_svgs(self, tmp_path, eval_bundle):
        assert main(["report", str(eval_bundle), "--out", str(tmp_path)]) == 0
        svgs = list(tmp_path.glob("*.svg"))
        assert {p.name for p in svgs} >= {"profile_posture.svg", "confusion_movement_full_agreement.svg"}
        for p in svgs:
            assert ET.parse(p).getroot().tag == f"{SVG}svg"

    def test_corrupt_bundle(self, tmp_path, capsys):
        (tmp_path / "metrics.json").write_text("{not json")
        assert main(["report", str(tmp_path)]) != 0
        assert "error" in capsys.readouterr().err

    def test_ablation_six_configs(self, tmp_path, small_data):
        configs = "left_arm,right_arm,left_leg,right_leg,arms,all"
        assert main(["ablate", "--data", str(small_data), "--track", "posture", "--configs", configs, *FAST_SVM,
                     "--out", str(tmp_path)]) == 0
        doc = json.loads((tmp_path / "ablation.json").read_text())
        assert doc["configs"] == configs.split(",")
        assert main(["report", str(tmp_path)]) == 0
        root = ET.parse(tmp_path / "ablation_posture.svg").getroot()
        groups = [e.get("data-group") for e in root.iter(f"{SVG}rect") if e.get("class") == "bar"]
        assert list(dict.fromkeys(groups)) == configs.split(",")

    def test_ablation_empty_config(self, small_data, tmp_path):
        assert main(["ablate", "--data", str(small_data), "--configs", "arms,,all", "--out", str(tmp_path)]) == 2


class TestOtherCommands:
    def test_featurize(self, tmp_path, small_data):
        assert main(["featurize", "--data", str(small_data), "--sensors", "left_arm", "--out", str(tmp_path)]) == 0
        header = (tmp_path / "S01.csv").read_text().splitlines()[0].split(",")
        assert len([h for h in header if h.startswith("LeftArm")]) == 84

    def test_refine(self, tmp_path, small_data):
        assert main(["refine", "--data", str(small_data), "--iar-classifier", "svm", "--iterations", "2",
                     "--track", "posture", "--svm-epochs", "2", "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "refined_posture.jsonl").read_text().splitlines()
        assert lines and all("S0" in l for l in lines[:3])

    def test_train_svm(self, tmp_path, small_data):
        assert main(["train", "--data", str(small_data), "--svm-epochs", "2", "--out", str(tmp_path)]) == 0
        names = {p.name for p in tmp_path.iterdir()}
        assert {"svm_posture.json", "svm_movement.json", "config.json"} <= names

    def test_generated_data_loads_like_real(self, dataset):
        from infantmotion.core import load_dataset

        subjects = load_dataset(dataset)
        assert len(subjects) == 12
        assert all(len(s.annotators) == 3 for s in subjects)
