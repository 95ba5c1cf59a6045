import hashlib
import json

import numpy as np
import pytest

from sceneqa import cli
from sceneqa.model import SceneQAModel
from sceneqa.pointio import read_ply, write_ply
from sceneqa.pointcloud import PointCloud
from sceneqa.tensor import Tensor


def tree_digest(root):
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small dataset plus a briefly trained tiny checkpoint shared by the command tests."""
    root = tmp_path_factory.mktemp("cli")
    data, run = root / "data", root / "run"
    assert cli.main(["gen-data", "--dataset", str(data), "--seed", "5", "--scenes", "6", "--points", "256"]) == 0
    assert cli.main(["train", "--dataset", str(data), "--out", str(run), "--phase", "finetune", "--preset", "tiny",
                     "--max-steps", "3", "--batch-size", "4"]) == 0
    return data, run


class TestExitCodes:
    def test_parser_error_is_usage(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["train", "--phase", "sideways"])
        assert exc.value.code == cli.EXIT_USAGE

    def test_missing_dataset_is_usage(self, monkeypatch, capsys):
        monkeypatch.delenv(cli.ENV_DATASET, raising=False)
        assert cli.main(["stats"]) == cli.EXIT_USAGE
        assert "--dataset" in capsys.readouterr().err

    def test_missing_manifest_is_data_error(self, tmp_path, capsys):
        assert cli.main(["stats", "--dataset", str(tmp_path)]) == cli.EXIT_DATA

    def test_corrupt_cloud_is_data_error(self, tmp_path, workspace, capsys):
        _, run = workspace
        (tmp_path / "bad.ply").write_bytes(b"ply\nformat ascii 1.0\nelement vertex two\nend_header\n")
        code = cli.main(["infer", "--checkpoint", str(run / "finetune.ntc"), "--cloud", str(tmp_path / "bad.ply"),
                         "--question", "what is here?"])
        assert code == cli.EXIT_DATA and "line 3" in capsys.readouterr().err

    def test_non_finite_loss_is_numeric(self, workspace, tmp_path, monkeypatch, capsys):
        data, _ = workspace
        monkeypatch.setattr(SceneQAModel, "loss", lambda self, batch: Tensor(np.array(np.nan)))
        code = cli.main(["train", "--dataset", str(data), "--out", str(tmp_path), "--phase", "finetune",
                         "--preset", "tiny", "--max-steps", "2"])
        assert code == cli.EXIT_NUMERIC and "step 0" in capsys.readouterr().err


class TestGenData:
    def test_twice_identical(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert cli.main(["gen-data", "--dataset", str(tmp_path / name), "--seed", "7", "--scenes", "4",
                             "--points", "128"]) == 0
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_creates_nested_dir_and_reads_env(self, tmp_path, monkeypatch, capsys):
        target = tmp_path / "x" / "y"
        monkeypatch.setenv(cli.ENV_DATASET, str(target))
        assert cli.main(["gen-data", "--scenes", "2", "--points", "64"]) == 0
        assert (target / "manifest_train.jsonl").exists()

    def test_invalid_palette(self, tmp_path, capsys):
        (tmp_path / "p.json").write_text(json.dumps({"categories": [{"name": "desk"}], "colors": []}))
        code = cli.main(["gen-data", "--dataset", str(tmp_path / "d"), "--palette", str(tmp_path / "p.json")])
        assert code == cli.EXIT_DATA
        assert "categories[0].plural" in capsys.readouterr().err

    def test_custom_palette(self, tmp_path, capsys):
        (tmp_path / "p.json").write_text(json.dumps({
            "categories": [{"name": "desk", "plural": "desks", "half_extent": [0.5, 0.3, 0.4]}],
            "colors": [{"name": "grey", "rgb": [0.5, 0.5, 0.5]}]}))
        assert cli.main(["gen-data", "--dataset", str(tmp_path / "d"), "--scenes", "2", "--points", "64",
                         "--palette", str(tmp_path / "p.json")]) == 0
        assert "desk" in (tmp_path / "d" / "manifest_train.jsonl").read_text()


class TestTrainEval:
    def test_train_outputs(self, workspace):
        _, run = workspace
        assert (run / "finetune.ntc").exists() and (run / "vocab.txt").exists()
        lines = (run / "train_log.jsonl").read_text().splitlines()
        assert len(lines) == 3 and json.loads(lines[-1])["step"] == 3
        assert list((run / "checkpoints").glob("finetune_step*.ntc"))

    def test_eval_checkpoint(self, workspace, tmp_path, capsys):
        data, run = workspace
        assert cli.main(["eval", "--dataset", str(data), "--checkpoint", str(run / "finetune.ntc"),
                         "--out", str(tmp_path)]) == 0
        table = capsys.readouterr().out
        assert "METEOR" in table and "n/a" in table and "qa" in table
        rows = [json.loads(x) for x in (tmp_path / "report.jsonl").read_text().splitlines()]
        assert rows[0]["split"] == "all" and {r["split"] for r in rows[1:]} <= {"qa", "dense_caption",
                                                                                 "scene_caption", "dialogue"}
        assert (tmp_path / "predictions.jsonl").exists()

    def test_eval_identity_predictions(self, tmp_path, capsys):
        recs = [{"id": "1", "question": "q", "answer": "a red chair.", "references": ["a red chair."], "task": "qa"},
                {"id": "2", "question": "q", "answer": "two", "references": ["two", "three"], "task": "dialogue"}]
        with open(tmp_path / "p.jsonl", "w") as fh:
            fh.writelines(json.dumps(r) + "\n" for r in recs)
        assert cli.main(["eval", "--predictions", str(tmp_path / "p.jsonl"), "--out", str(tmp_path / "o")]) == 0
        report = json.loads((tmp_path / "o" / "report.json").read_text())
        assert report["scores"]["BLEU-1"] == pytest.approx(100.0)
        assert report["scores"]["EM@1"] == 100.0
        assert set(report["per_task"]) == {"qa", "dialogue"}

    def test_eval_needs_checkpoint(self, capsys):
        assert cli.main(["eval", "--dataset", "x"]) == cli.EXIT_USAGE

    def test_encoder_checkpoint_rejected_by_eval(self, workspace, tmp_path, capsys):
        data, _ = workspace
        assert cli.main(["pretrain-detector", "--dataset", str(data), "--out", str(tmp_path), "--preset", "tiny",
                         "--steps", "2", "--batch-size", "2"]) == 0
        assert json.loads((tmp_path / "detector_eval.jsonl").read_text())["frac_center_inside"] >= 0
        code = cli.main(["eval", "--dataset", str(data), "--checkpoint", str(tmp_path / "encoder.ntc")])
        assert code == cli.EXIT_DATA and "model_config" in capsys.readouterr().err

    def test_init_from_encoder(self, workspace, tmp_path, capsys):
        data, _ = workspace
        cli.main(["pretrain-detector", "--dataset", str(data), "--out", str(tmp_path / "det"), "--preset", "tiny",
                  "--steps", "1"])
        assert cli.main(["train", "--dataset", str(data), "--out", str(tmp_path / "run"), "--phase", "pretrain",
                         "--preset", "tiny", "--max-steps", "1", "--init", str(tmp_path / "det" / "encoder.ntc")]) == 0

    def test_init_config_mismatch_lists_tensors(self, workspace, tmp_path, capsys):
        data, run = workspace
        code = cli.main(["train", "--dataset", str(data), "--out", str(tmp_path), "--phase", "finetune",
                         "--preset", "small", "--max-steps", "1", "--init", str(run / "finetune.ntc")])
        assert code == cli.EXIT_DATA

    def test_resume_matches_uninterrupted(self, workspace, tmp_path, capsys):
        data, _ = workspace
        common = ["--dataset", str(data), "--phase", "finetune", "--preset", "tiny", "--epochs", "2",
                  "--batch-size", "4"]
        assert cli.main(["train", "--out", str(tmp_path / "full"), *common]) == 0
        full = [json.loads(x)["loss"] for x in (tmp_path / "full" / "train_log.jsonl").read_text().splitlines()]
        first_ckpt = sorted((tmp_path / "full" / "checkpoints").glob("*.ntc"))[0]
        assert cli.main(["train", "--out", str(tmp_path / "resumed"), "--resume", str(first_ckpt), *common]) == 0
        rest = [json.loads(x)["loss"] for x in (tmp_path / "resumed" / "train_log.jsonl").read_text().splitlines()]
        # float32 training: agreement within 32-bit accumulation noise
        np.testing.assert_allclose(rest, full[len(full) - len(rest):], rtol=1e-5)


class TestSceneCommands:
    def test_infer(self, workspace, capsys):
        data, run = workspace
        assert cli.main(["infer", "--checkpoint", str(run / "finetune.ntc"),
                         "--cloud", str(data / "clouds" / "scene_0000.ply"), "--question", "how many chairs?"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["question"] == "how many chairs?" and isinstance(out["answer"], str)

    def test_export_attention(self, workspace, tmp_path, capsys):
        data, run = workspace
        cloud = data / "clouds" / "scene_0001.ply"
        assert cli.main(["export-attention", "--checkpoint", str(run / "finetune.ntc"), "--cloud", str(cloud),
                         "--question", "where is the table?", "--k", "3", "--out", str(tmp_path)]) == 0
        n = len(read_ply(cloud))
        files = sorted(tmp_path.glob("*.ply"))
        assert [f.name for f in files] == ["composite.ply", "query_00.ply", "query_01.ply", "query_02.ply"]
        for f in files:
            pc = read_ply(f)
            assert len(pc) == n
            assert pc.colors[:, 0].min() >= 0 and pc.colors[:, 0].max() <= 1

    def test_export_attention_k_too_large(self, workspace, tmp_path, capsys):
        data, run = workspace
        code = cli.main(["export-attention", "--checkpoint", str(run / "finetune.ntc"),
                         "--cloud", str(data / "clouds" / "scene_0001.ply"), "--question", "x?", "--k", "10",
                         "--out", str(tmp_path)])
        assert code == cli.EXIT_USAGE and "N_q" in capsys.readouterr().err

    def test_query_sweep(self, workspace, tmp_path, capsys):
        data, _ = workspace
        assert cli.main(["query-sweep", "--dataset", str(data), "--preset", "tiny", "--nq", "2", "4",
                         "--n3d", "8", "--steps", "1", "--decode-steps", "2", "--throughput-batch", "2",
                         "--out", str(tmp_path)]) == 0
        rows = [json.loads(x) for x in (tmp_path / "query_sweep.jsonl").read_text().splitlines()]
        assert [r["nq"] for r in rows] == [2, 4]
        for r in rows:
            assert r["tokens_per_s"] > 0 and "cpus" in r["env"]
            assert all(r[k] is not None for k in ("BLEU-1", "BLEU-4", "ROUGE-L", "CIDEr", "EM@1"))

    def test_query_sweep_rejects_nq_above_n3d(self, workspace, capsys):
        data, _ = workspace
        code = cli.main(["query-sweep", "--dataset", str(data), "--preset", "tiny", "--nq", "4", "16", "--n3d", "8"])
        assert code == cli.EXIT_USAGE
        assert capsys.readouterr().out == ""


class TestDataCommands:
    def test_stats(self, workspace, tmp_path, capsys):
        data, _ = workspace
        assert cli.main(["stats", "--dataset", str(data), "--out", str(tmp_path)]) == 0
        rec = json.loads(capsys.readouterr().out)
        assert 0 <= rec["frac_questions_lt16"] <= 1 and "task_distribution" in rec
        assert (tmp_path / "token_stats.jsonl").exists()

    def test_ingest(self, tmp_path, rng, capsys):
        clouds = tmp_path / "clouds"
        clouds.mkdir()
        write_ply(clouds / "s1.ply", PointCloud(rng.normal(size=(40, 3))))
        (tmp_path / "q.json").write_text(json.dumps([
            {"question_id": "a", "scene_id": "s1", "question": "what is it?", "answers": ["a lamp", "lamp"]},
            {"question_id": "b", "scene_id": "s2", "question": "where?", "answers": ["here"]}]))
        assert cli.main(["ingest-scanqa", "--questions", str(tmp_path / "q.json"), "--clouds", str(clouds),
                         "--out", str(tmp_path / "out")]) == 0
        assert "skipped 1" in capsys.readouterr().out
        assert cli.main(["stats", "--dataset", str(tmp_path / "out"), "--split", "val"]) == 0

    def test_ingest_schema_error(self, tmp_path, capsys):
        (tmp_path / "q.json").write_text(json.dumps([{"question_id": "a"}]))
        code = cli.main(["ingest-scanqa", "--questions", str(tmp_path / "q.json"), "--clouds", str(tmp_path),
                         "--out", str(tmp_path / "o")])
        assert code == cli.EXIT_DATA and "record 0" in capsys.readouterr().err
