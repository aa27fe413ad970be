"""End-to-end tests for the rotset command line."""

import csv
import io
import json

import pytest

from app.main import main
from app.storage import load_checkpoint


def _json_out(capsys) -> dict:
    return json.loads(capsys.readouterr().out)


def _csv_out(text: str) -> list:
    return list(csv.reader(io.StringIO(text)))


@pytest.fixture(scope="module")
def config_file(tmp_path_factory, run_config):
    path = tmp_path_factory.mktemp("cli") / "run.json"
    path.write_text(run_config.model_dump_json(indent=2))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, config_file, dataset_path):
    out = tmp_path_factory.mktemp("ckpt") / "model.egrt"
    code = main(["train", "--config", str(config_file), "--data", str(dataset_path), "--out", str(out)])
    assert code == 0
    return out


class TestGen:
    def test_writes_dataset_and_manifest(self, config_file, dataset_path, tmp_path, capsys):
        out = tmp_path / "data.egrd"
        assert main(["gen", "--config", str(config_file), "--out", str(out), "--threads", "2"]) == 0
        doc = _json_out(capsys)
        assert doc["manifest"]["object_count"] == 6
        assert out.read_bytes() == dataset_path.read_bytes()

    def test_malformed_json(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"data": {"seed": 1,}}')
        assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "x.egrd")]) == 2
        assert "line 1" in capsys.readouterr().err

    def test_unknown_field_names_path(self, tmp_path, capsys):
        bad = tmp_path / "typo.json"
        bad.write_text('{"model": {"depthh": 2}}')
        assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "x.egrd")]) == 2
        assert "model.depthh" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["gen", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "x.egrd")]) == 3

    def test_unknown_flag(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            main(["gen", "--out", str(tmp_path / "x.egrd"), "--bogus"])
        assert info.value.code == 2


class TestTrain:
    def test_summary_and_artifacts(self, trained):
        ckpt = load_checkpoint(trained)
        assert ckpt.step == 3
        assert ckpt.precision == "f64"
        lines = trained.with_name(trained.name + ".log.jsonl").read_text().splitlines()
        assert len(lines) == 3

    def test_resume_extends_run(self, trained, run_config, dataset_path, tmp_path, capsys):
        out = tmp_path / "resumed.egrt"
        out.write_bytes(trained.read_bytes())
        longer = run_config.model_copy(update={"train": run_config.train.model_copy(update={"total_steps": 4})})
        config = tmp_path / "longer.json"
        config.write_text(longer.model_dump_json())
        code = main(["train", "--config", str(config), "--data", str(dataset_path), "--out", str(out), "--resume"])
        assert code == 0
        assert _json_out(capsys)["step"] == 4

    def test_resume_with_other_config(self, trained, run_config, dataset_path, tmp_path):
        out = tmp_path / "other.egrt"
        out.write_bytes(trained.read_bytes())
        other = run_config.model_copy(update={"train": run_config.train.model_copy(update={"lr": 0.5})})
        config = tmp_path / "other.json"
        config.write_text(other.model_dump_json())
        code = main(["train", "--config", str(config), "--data", str(dataset_path), "--out", str(out), "--resume"])
        assert code == 5

    def test_resume_in_other_precision(self, trained, dataset_path, tmp_path):
        out = tmp_path / "prec.egrt"
        out.write_bytes(trained.read_bytes())
        code = main(["train", "--data", str(dataset_path), "--out", str(out), "--resume", "--precision", "f32"])
        assert code == 5

    def test_data_hash_mismatch(self, run_config, dataset_path, tmp_path, capsys):
        other = run_config.model_copy(update={"data": run_config.data.model_copy(update={"seed": 99})})
        config = tmp_path / "seed99.json"
        config.write_text(other.model_dump_json())
        args = ["train", "--config", str(config), "--data", str(dataset_path), "--out", str(tmp_path / "m.egrt")]
        assert main(args) == 4
        assert "--force" in capsys.readouterr().err
        assert main(args + ["--force"]) == 0


class TestEval:
    def test_report_and_csv(self, trained, dataset_path, tmp_path, capsys):
        sidecar = tmp_path / "eval.csv"
        code = main([
            "eval", "--checkpoint", str(trained), "--data", str(dataset_path),
            "--k", "2,4", "--oracle", "--csv", str(sidecar),
        ])
        assert code == 0
        doc = _json_out(capsys)
        assert doc["split"] == "holdout" and doc["objects"] == 2
        assert [(r["method"], r["k_refs"]) for r in doc["reports"]] == [
            ("model", 2), ("model", 4), ("oracle", 2), ("oracle", 4),
        ]
        rows = _csv_out(sidecar.read_text())
        assert rows[0] == ["variable", "metric", "value", "config_hash"]
        assert {r[3] for r in rows[1:]} == {load_checkpoint(trained).config_hash}
        # 2 methods x 2 reference counts x (acc@15, acc@30, mean_error_deg)
        assert len(rows) == 1 + 12
        assert ["2", "oracle.acc@15"] == rows[7][:2]

    def test_default_sidecar_path(self, trained, dataset_path, capsys):
        assert main(["eval", "--checkpoint", str(trained), "--data", str(dataset_path), "--k", "2"]) == 0
        assert trained.with_name(trained.name + ".eval.csv").exists()

    def test_not_a_checkpoint(self, dataset_path, capsys):
        assert main(["eval", "--checkpoint", str(dataset_path), "--data", str(dataset_path)]) == 5

    def test_missing_dataset(self, trained, tmp_path):
        assert main(["eval", "--checkpoint", str(trained), "--data", str(tmp_path / "none.egrd")]) == 3

    def test_k_larger_than_pool(self, trained, dataset_path):
        assert main(["eval", "--checkpoint", str(trained), "--data", str(dataset_path), "--k", "99"]) == 2


class TestBench:
    def test_table(self, trained, capsys):
        code = main(["bench", "--checkpoint", str(trained), "--refs", "2,4", "--queries", "3", "--repeats", "1"])
        assert code == 0
        rows = _csv_out(capsys.readouterr().out)
        assert rows[0][:3] == ["n_refs", "n_queries", "onboarding_ms"]
        assert [r[0] for r in rows[1:]] == ["2", "4"]
        assert rows[0][-1] == "config_hash"
        assert {r[-1] for r in rows[1:]} == {load_checkpoint(trained).config_hash}


class TestSweep:
    def _run(self, trained, dataset_path, capsys, *extra):
        code = main(["sweep", "--checkpoint", str(trained), "--data", str(dataset_path), *extra])
        return code, _csv_out(capsys.readouterr().out)

    def test_refcount(self, trained, dataset_path, capsys):
        code, rows = self._run(trained, dataset_path, capsys, "--mode", "refcount", "--k", "2,4", "--method", "oracle")
        assert code == 0
        assert len(rows) == 1 + 2 * 3
        assert {r[3] for r in rows[1:]} == {load_checkpoint(trained).config_hash}

    def test_separation(self, trained, dataset_path, capsys):
        code, rows = self._run(
            trained, dataset_path, capsys, "--mode", "separation", "--gaps", "10,30,50", "--trials", "1",
        )
        assert code == 0
        assert [r[:2] for r in rows[1:]] == [["10", "mean_error_deg"], ["30", "mean_error_deg"],
                                             ["50", "mean_error_deg"]]

    def test_coverage(self, trained, dataset_path, capsys):
        code, rows = self._run(trained, dataset_path, capsys, "--mode", "coverage", "--k", "4", "--split", "all")
        assert code == 0
        assert {r[0] for r in rows[1:]} == {"1", "-1"}

    def test_unknown_object(self, trained, dataset_path, capsys):
        code, _ = self._run(trained, dataset_path, capsys, "--mode", "separation", "--object", "obj-nope")
        assert code == 6

    def test_bad_mode(self, trained, dataset_path):
        with pytest.raises(SystemExit) as info:
            main(["sweep", "--checkpoint", str(trained), "--data", str(dataset_path), "--mode", "spiral"])
        assert info.value.code == 2


class TestAttn:
    def _object_id(self, dataset):
        return dataset.records[-1].obj.object_id

    def test_weights(self, trained, dataset_path, dataset, capsys):
        code = main([
            "attn", "--checkpoint", str(trained), "--data", str(dataset_path),
            "--object", self._object_id(dataset), "--query", "0", "--k", "4",
        ])
        assert code == 0
        doc = _json_out(capsys)
        refs = doc["references"]
        assert len(refs) == 4
        assert sum(r["weight"] for r in refs) == pytest.approx(1.0)
        assert refs[0]["pool_index"] == 0
        assert all(0.0 <= r["geodesic_deg"] <= 180.0 for r in refs)

    def test_missing_object(self, trained, dataset_path):
        args = ["attn", "--checkpoint", str(trained), "--data", str(dataset_path), "--object", "obj-nope", "--query", "0"]
        assert main(args) == 6

    def test_missing_query(self, trained, dataset_path, dataset):
        args = ["attn", "--checkpoint", str(trained), "--data", str(dataset_path),
                "--object", self._object_id(dataset), "--query", "99"]
        assert main(args) == 6

    def test_bad_layer(self, trained, dataset_path, dataset):
        args = ["attn", "--checkpoint", str(trained), "--data", str(dataset_path),
                "--object", self._object_id(dataset), "--query", "0", "--layer", "5"]
        assert main(args) == 2
