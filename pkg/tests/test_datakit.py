import hashlib
import json
import logging

import numpy as np
import pytest

from oracles import derive_answer
from sceneqa.datakit import (CONVENTION, TASKS, DataError, DatasetManifest, QAItem, SceneConfig, SceneObject,
                             SceneSample, generate_dataset, generate_scene, ingest_scanqa, load_palette, relation,
                             scene_seed, splitmix64, token_stats)
from sceneqa.lm import tokenize
from sceneqa.metrics import EvalPair
from sceneqa.pointcloud import PointCloud
from sceneqa.pointio import write_ply

# sha256 of the manifests written by generate_dataset(root, seed=42, n_scenes=8) with the default config
GOLDEN_TRAIN = "9225693aef1b374096a6b4e8df33c03035d9ec5aee0404271f1cfe6c3ce4b364"
GOLDEN_VAL = "1bc1976e4a508f6ad7aeefaf643449882455cf6da838bcc3b573cabfc09b21f2"


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def obj(cat, x, y, color="red"):
    return SceneObject(cat, color, (x, y, 0.3), (0.2, 0.2, 0.3))


class TestSeeds:
    def test_splitmix_reference_value(self):
        # first output of the reference splitmix64 generator seeded with 0
        assert splitmix64(0) == 0xE220A8397B1DCDAF

    def test_scene_seeds_distinct(self):
        seeds = [scene_seed(42, i) for i in range(1000)]
        assert len(set(seeds)) == 1000
        assert scene_seed(42, 3) == scene_seed(42, 3) != scene_seed(43, 3)


class TestGenerateScene:
    def test_deterministic(self):
        a, b = generate_scene(123), generate_scene(123)
        assert a.objects == b.objects and a.qa == b.qa
        assert np.array_equal(a.cloud.points, b.cloud.points) and np.array_equal(a.cloud.colors, b.cloud.colors)

    def test_different_seeds_differ(self):
        assert generate_scene(1).objects != generate_scene(2).objects

    @pytest.mark.parametrize("seed", range(40))
    def test_every_answer_rederived_from_geometry(self, seed):
        s = generate_scene(seed)
        objects = [(o.category, o.color, o.center) for o in s.objects]
        for q in s.qa:
            assert derive_answer(q.instruction, objects, s.room) == q.answer, q.instruction

    @pytest.mark.parametrize("seed", range(10))
    def test_scene_invariants(self, seed):
        cfg = SceneConfig()
        s = generate_scene(seed, cfg)
        assert cfg.min_objects <= len(s.objects) <= cfg.max_objects or s.flags
        assert len(s.cloud) == cfg.n_points
        assert {q.task for q in s.qa} <= set(TASKS)
        assert len({q.id for q in s.qa}) == len(s.qa)
        for i, a in enumerate(s.objects):
            assert 0 <= a.center[0] - a.half_extent[0] and a.center[0] + a.half_extent[0] <= s.room[0]
            assert 0 <= a.center[1] - a.half_extent[1] and a.center[1] + a.half_extent[1] <= s.room[1]
            for b in s.objects[i + 1:]:
                sep = [abs(a.center[k] - b.center[k]) >= a.half_extent[k] + b.half_extent[k] for k in (0, 1)]
                assert any(sep)

    def test_count_answer_by_construction(self):
        s = generate_scene(5)
        for q in s.qa:
            if q.instruction.startswith("how many"):
                cat = q.instruction.split()[2][:-1]
                n = sum(o.category == cat for o in s.objects)
                assert (n == 1) == ("there is one" in q.answer)

    def test_crowded_room_is_flagged(self):
        cfg = SceneConfig(room_min=(2.0, 2.0), room_max=(2.0, 2.0), min_objects=6, max_objects=6, max_retries=5)
        s = generate_scene(0, cfg)
        assert len(s.objects) < 6 and s.flags

    def test_invalid_config(self):
        with pytest.raises(DataError):
            SceneConfig(min_objects=0)
        with pytest.raises(DataError):
            SceneConfig(min_objects=3, max_objects=2)


class TestRelation:
    @pytest.mark.parametrize("a, b, rel", [
        ((0, 0), (1, 0), "left of"), ((2, 0), (1, 0), "right of"),
        ((0, 0), (0, 1), "in front of"), ((0, 2), (0, 1), "behind"),
    ])
    def test_convention(self, a, b, rel):
        assert relation(obj("chair", *a), obj("table", *b)) == rel

    def test_antisymmetric(self, rng):
        inverse = {"left of": "right of", "right of": "left of", "in front of": "behind", "behind": "in front of"}
        for _ in range(500):
            a, b = rng.uniform(0, 5, size=(2, 2))
            if np.allclose(np.abs(a - b)[0], np.abs(a - b)[1]):
                continue
            ra, rb = relation(obj("chair", *a), obj("table", *b)), relation(obj("table", *b), obj("chair", *a))
            assert rb == inverse[ra]

    def test_convention_recorded(self, tmp_path):
        generate_dataset(tmp_path, 1, 2)
        head = json.loads((tmp_path / "manifest_train.jsonl").read_text().splitlines()[0])
        assert head["convention"] == CONVENTION and "-y" in CONVENTION


class TestDataset:
    def test_golden_checksums(self, tmp_path):
        generate_dataset(tmp_path, 42, 8)
        assert sha(tmp_path / "manifest_train.jsonl") == GOLDEN_TRAIN
        assert sha(tmp_path / "manifest_val.jsonl") == GOLDEN_VAL

    def test_regeneration_byte_identical(self, tmp_path):
        generate_dataset(tmp_path / "a", 9, 4)
        generate_dataset(tmp_path / "b", 9, 4)
        for rel in ("manifest_train.jsonl", "manifest_val.jsonl", "clouds/scene_0002.ply", "scene_config.json"):
            assert sha(tmp_path / "a" / rel) == sha(tmp_path / "b" / rel), rel

    def test_manifest_round_trip(self, tmp_path):
        ms = generate_dataset(tmp_path, 3, 4)
        back = DatasetManifest.read(tmp_path / "manifest_train.jsonl")
        assert back.seed == 3 and back.config_hash == SceneConfig().hash()
        assert back.qa_ids() == ms["train"].qa_ids()
        assert [s.objects for s in back.samples] == [s.objects for s in ms["train"].samples]

    def test_split_sizes(self, tmp_path):
        ms = generate_dataset(tmp_path, 3, 8, val_fraction=0.25)
        assert (len(ms["train"].samples), len(ms["val"].samples)) == (6, 2)

    def test_duplicate_ids_rejected(self, tmp_path):
        item = QAItem("x", "q?", "a.", "qa")
        m = DatasetManifest("train", [SceneSample("s", None, [], [item, item])])
        with pytest.raises(DataError, match="duplicate"):
            m.write(tmp_path / "m.jsonl")

    def test_bad_task_names_index(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(json.dumps({"type": "header"}) + "\n" +
                        json.dumps({"scene_id": "s", "qa": [{"id": "1", "instruction": "q", "answer": "a",
                                                            "task": "chat"}]}) + "\n")
        with pytest.raises(DataError, match=r"record 0: qa\[0\].task"):
            DatasetManifest.read(path)

    def test_missing_header(self, tmp_path):
        (tmp_path / "m.jsonl").write_text('{"scene_id": "s"}\n')
        with pytest.raises(DataError, match="header"):
            DatasetManifest.read(tmp_path / "m.jsonl")


class TestPalette:
    def test_load(self, tmp_path):
        path = tmp_path / "p.json"
        path.write_text(json.dumps({"categories": [{"name": "desk", "plural": "desks", "half_extent": [0.5, 0.3, 0.4]}],
                                    "colors": [{"name": "grey", "rgb": [0.5, 0.5, 0.5]}]}))
        cats, cols = load_palette(path)
        assert cats[0].name == "desk" and cols[0].rgb == (0.5, 0.5, 0.5)

    @pytest.mark.parametrize("payload, where", [
        ({"categories": [{"name": "desk", "plural": "desks"}], "colors": [{"name": "g", "rgb": [0, 0, 0]}]},
         r"categories\[0\].half_extent"),
        ({"categories": [{"name": "d", "plural": "ds", "half_extent": [1, 1, 1]}], "colors": [{"name": "g", "rgb": [2, 0, 0]}]},
         r"colors\[0\].rgb"),
        ({"categories": [], "colors": [{"name": "g", "rgb": [0, 0, 0]}]}, "at least one category"),
        ([], "top level"),
    ])
    def test_errors(self, tmp_path, payload, where):
        path = tmp_path / "p.json"
        path.write_text(json.dumps(payload))
        with pytest.raises(DataError, match=where):
            load_palette(path)

    def test_unparseable(self, tmp_path):
        (tmp_path / "p.json").write_text("{not json")
        with pytest.raises(DataError):
            load_palette(tmp_path / "p.json")


class TestIngest:
    @pytest.fixture
    def fixture(self, tmp_path, rng):
        clouds = tmp_path / "clouds"
        clouds.mkdir()
        write_ply(clouds / "scene0000_00.ply", PointCloud(rng.normal(size=(20, 3))))
        write_ply(clouds / "scene0001_00.ply", PointCloud(rng.normal(size=(20, 3))))
        records = [
            {"question_id": "q1", "scene_id": "scene0000_00", "question": "What is on the table?",
             "answers": ["a lamp", "lamp"]},
            {"question_id": 2, "scene_id": "scene0001_00", "question": "What color is the sofa?", "answers": ["red"]},
            {"question_id": "q3", "scene_id": "scene0404_00", "question": "Where is the bed?", "answers": ["by the wall"]},
        ]
        (tmp_path / "q.json").write_text(json.dumps(records))
        (tmp_path / "a.json").write_text(json.dumps(
            {"scene0000_00": [{"category": "table", "center": [0, 0, 0.4], "half_extent": [0.5, 0.4, 0.4]}]}))
        return tmp_path

    def test_three_record_round_trip(self, fixture, caplog):
        with caplog.at_level(logging.WARNING):
            m = ingest_scanqa(fixture / "q.json", fixture / "a.json", fixture / "clouds")
        assert m.skipped == ["scene0404_00"] and "scene0404_00" in caplog.text
        assert [s.scene_id for s in m.samples] == ["scene0000_00", "scene0001_00"]
        assert m.samples[0].objects[0].category == "table"
        m.write(fixture / "m.jsonl")
        back = DatasetManifest.read(fixture / "m.jsonl")
        assert back.qa_ids() == ["q1", "2"] and back.skipped == ["scene0404_00"]
        q = back.samples[0].qa[0]
        assert q.references == ("a lamp", "lamp") and q.instruction == "What is on the table?"
        pair = EvalPair.from_text(q.id, "lamp", q.refs())
        assert len(pair.references) == 2

    def test_empty_question_file(self, tmp_path, caplog):
        (tmp_path / "q.json").write_text("[]")
        with caplog.at_level(logging.WARNING):
            m = ingest_scanqa(tmp_path / "q.json", None, tmp_path)
        assert m.samples == [] and "zero samples" in caplog.text

    @pytest.mark.parametrize("rec, msg", [
        ({"scene_id": "s", "question": "q", "answers": ["a"]}, "record 1: missing field 'question_id'"),
        ({"question_id": "x", "scene_id": "s", "question": 5, "answers": ["a"]}, "record 1: field 'question'"),
        ({"question_id": "x", "scene_id": "s", "question": "q", "answers": []}, "record 1: field 'answers'"),
    ])
    def test_schema_errors(self, tmp_path, rec, msg):
        good = {"question_id": "a", "scene_id": "s", "question": "q", "answers": ["a"]}
        (tmp_path / "q.json").write_text(json.dumps([good, rec]))
        with pytest.raises(DataError, match=msg):
            ingest_scanqa(tmp_path / "q.json", None, tmp_path)


class TestTokenStats:
    def manifest(self, questions, answers):
        qa = [QAItem(str(i), q, a, "qa") for i, (q, a) in enumerate(zip(questions, answers))]
        return DatasetManifest("x", [SceneSample("s", None, [], qa)])

    def test_fraction_under_sixteen(self):
        st = token_stats(self.manifest(["w " * 10, "w " * 20], ["a", "b"]), tokenize)
        assert st.question_lengths == [10, 20] and st.frac_questions_lt16 == 0.5

    def test_empty_answer_in_zero_bin(self):
        st = token_stats(self.manifest(["q"], [""]), tokenize)
        assert st.answer_hist == {0: 1} and st.frac_answers_gt7 == 0.0

    def test_task_distribution(self, small_dataset):
        _, manifests, _ = small_dataset
        st = token_stats(manifests["train"], tokenize)
        assert set(st.task_distribution) == set(TASKS)
        assert sum(st.task_distribution.values()) == pytest.approx(1.0)

    def test_empty_manifest(self):
        with pytest.raises(DataError):
            token_stats(DatasetManifest("x", []), tokenize)
