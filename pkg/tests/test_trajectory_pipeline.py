import json

import numpy as np
import pytest

from src.budget_engine import BBox, ImageBuffer, target_size
from src.errors import IoFailure, LabError, ParseError
from src.policy import ConstantAnswerPolicy, OraclePolicy, RepeatFocusPolicy, ScriptedPolicy
from src.rollout_env import Answer, run_episode, to_conversation_record
from src.trajectory_pipeline import (
    RescaleMap,
    asset_dir_for,
    dedup_filter,
    difficulty_filter,
    export_trajectories,
    iou,
    length_filter,
    load_view,
    read_records,
    record_turn_boxes,
    rejection_sample,
    rescale,
    resolution_filter,
    rollout_accuracy,
    scene_for_record,
    single_pass_filter,
    validate,
    zoom_turns,
)


class EveryFourthCorrect(ScriptedPolicy):
    """Answers directly; right on every fourth episode it plays."""

    def __init__(self, spec, gold):
        super().__init__(spec)
        self.gold = gold
        self.episodes = 0

    def choose(self, state):
        self.episodes += 1
        if self.episodes % 4 == 0:
            return Answer(self.gold)
        return Answer(next(label for label in self.spec.labels if label != self.gold))


def focus_call(*boxes):
    return json.dumps({"name": "focus", "arguments": {"bboxes": [list(b) for b in boxes]}})


def make_record(*focus_turns, answer="alpha"):
    """Query, then one focus turn per box list, then an answer."""
    turns = [{"from": "human", "value": "<image>\nWhich code word?"}]
    images = ["glimpse"]
    used = []
    for n, boxes in enumerate(focus_turns):
        mention = ", ".join(str(list(b)) for b in boxes)
        turns.append({
            "from": "gpt",
            "value": f"<think>Zooming into {mention}.</think><tool_call>{focus_call(*boxes)}</tool_call>",
        })
        turns.append({"from": "human", "value": "<tool_response>" + "<image>" * len(boxes) + "</tool_response>"})
        images.extend(f"view-{n}-{i}" for i in range(len(boxes)))
        used.extend(list(b) for b in boxes)
    turns.append({"from": "gpt", "value": f"<think>I can read it.</think><answer>{answer}</answer>"})
    return {"meta": {"bboxes": used, "gold": answer}, "turns": turns, "images": images}


class TestRescaleMap:
    def test_quarter_scale(self):
        assert RescaleMap(0.25, 0.25).apply([100, 200, 300, 400]) == [25, 50, 75, 100]

    def test_collapsed_box_keeps_a_pixel(self):
        assert RescaleMap(0.3, 0.3).apply([5, 5, 6, 6]) == [2, 2, 3, 3]

    def test_from_sizes(self):
        scale = RescaleMap.from_sizes((1792, 896), (448, 224))
        assert (scale.sx, scale.sy) == (0.25, 0.25)
        assert scale.inverse() == RescaleMap(4.0, 4.0)

    def test_rejects_non_positive(self):
        with pytest.raises(LabError):
            RescaleMap(0.0, 1.0)

    def test_overview_boxes_survive_the_round_trip(self, rng):
        for _ in range(1000):
            width, height = (int(v) for v in rng.integers(600, 4000, size=2))
            budget = int(rng.integers(169, 1338))
            overview = target_size(width, height, budget, 28)
            to_overview = RescaleMap.from_sizes((width, height), overview)
            x1, y1 = int(rng.integers(0, overview[0] - 1)), int(rng.integers(0, overview[1] - 1))
            box = [x1, y1, int(rng.integers(x1 + 1, overview[0] + 1)), int(rng.integers(y1 + 1, overview[1] + 1))]
            back = to_overview.apply(to_overview.inverse().apply(box))
            assert all(abs(a - b) <= 1 for a, b in zip(back, box)), (width, height, budget, box, back)


class TestRescale:
    def test_identity_is_byte_stable(self):
        record = make_record([(10, 20, 110, 220)], [(0, 0, 50, 50), (60, 60, 90, 90)])
        result = rescale(record, RescaleMap(1.0, 1.0))
        assert json.dumps(result, sort_keys=True) == json.dumps(record, sort_keys=True)
        assert result is not record

    def test_rewrites_calls_mentions_and_meta(self):
        record = make_record([(10, 20, 110, 220)])
        result = rescale(record, RescaleMap(0.5, 0.5))
        assert record_turn_boxes(result) == [[[5, 10, 55, 110]]]
        assert result["meta"]["bboxes"] == [[5, 10, 55, 110]]
        assert "[5, 10, 55, 110]" in result["turns"][1]["value"]
        assert "[10, 20, 110, 220]" not in result["turns"][1]["value"]
        assert validate(result).passed
        # The input is untouched
        assert record["meta"]["bboxes"] == [[10, 20, 110, 220]]

    def test_inverse_restores_even_boxes(self):
        record = make_record([(10, 20, 110, 220)], [(40, 40, 80, 100)])
        scale = RescaleMap(0.5, 0.5)
        restored = rescale(rescale(record, scale), scale.inverse())
        assert restored["meta"]["bboxes"] == record["meta"]["bboxes"]
        assert record_turn_boxes(restored) == record_turn_boxes(record)

    def test_unrelated_mentions_survive(self):
        record = make_record([(10, 20, 110, 220)])
        record["turns"][-1]["value"] = "<think>Compare [1, 2, 3, 4] first.</think><answer>alpha</answer>"
        result = rescale(record, RescaleMap(0.5, 0.5))
        assert "[1, 2, 3, 4]" in result["turns"][-1]["value"]

    def test_oracle_record_maps_onto_the_marker(self, desk_scene, env_config, desk_spec):
        trajectory = run_episode(OraclePolicy(desk_spec), desk_scene, desk_scene.query, env_config, 0)
        record = to_conversation_record(trajectory)
        to_original = RescaleMap.from_sizes(record["meta"]["image_size"], record["meta"]["overview_size"]).inverse()
        assert rescale(record, to_original)["meta"]["bboxes"] == [desk_scene.marker_bbox.as_list()]


class TestValidate:
    def test_well_formed_record(self):
        report = validate(make_record([(10, 20, 110, 220)], [(0, 0, 5, 5), (6, 6, 9, 9)]))
        assert report.passed
        assert report.failures == ()

    def test_direct_answer_is_too_short(self):
        report = validate(make_record())
        assert report.failed_checks == {1}

    def test_roles_must_alternate(self):
        record = make_record([(10, 20, 110, 220)])
        record["turns"].insert(3, {"from": "gpt", "value": "<think>hm</think><answer>alpha</answer>"})
        assert 1 in validate(record).failed_checks

    def test_missing_think(self):
        record = make_record([(10, 20, 110, 220)])
        record["turns"][-1]["value"] = "<answer>alpha</answer>"
        assert validate(record).failed_checks == {2}

    def test_image_count_mismatch(self):
        record = make_record([(10, 20, 110, 220)])
        record["turns"][2]["value"] = "<tool_response><image><image></tool_response>"
        record["images"].append("extra")
        assert validate(record).failed_checks == {3}

    def test_dangling_image_references(self):
        record = make_record([(10, 20, 110, 220)])
        record["images"].append("orphan")
        assert validate(record).failed_checks == {3}

    def test_unreadable_tool_call(self):
        record = make_record([(10, 20, 110, 220)])
        record["turns"][1]["value"] = "<think>x</think><tool_call>{not json</tool_call>"
        assert 3 in validate(record).failed_checks

    def test_reference_boxes_differ(self):
        record = make_record([(10, 20, 110, 220)])
        record["meta"]["bboxes"] = [[10, 20, 110, 221]]
        assert validate(record).failed_checks == {4}

    def test_missing_reference(self):
        record = make_record([(10, 20, 110, 220)])
        del record["meta"]["bboxes"]
        assert validate(record).failed_checks == {4}

    def test_not_a_record(self):
        with pytest.raises(ParseError):
            validate({"turns": "nope"})

    def test_rollout_records_validate(self, desk_scenes, env_config, desk_spec):
        oracle = OraclePolicy(desk_spec)
        for scene in desk_scenes:
            assert validate(to_conversation_record(run_episode(oracle, scene, scene.query, env_config, 0))).passed


class TestFilters:
    def test_iou(self):
        assert iou(BBox(0, 0, 10, 10), BBox(5, 0, 15, 10)) == pytest.approx(1 / 3)
        assert iou(BBox(0, 0, 10, 10), BBox(0, 0, 10, 10)) == 1.0
        assert iou(BBox(0, 0, 5, 5), BBox(5, 5, 10, 10)) == 0.0

    def test_iou_against_pixel_counting(self, rng):
        def random_box():
            xs = sorted(int(v) for v in rng.choice(50, 2, replace=False))
            ys = sorted(int(v) for v in rng.choice(50, 2, replace=False))
            return BBox(xs[0], ys[0], xs[1], ys[1])

        for _ in range(10_000):
            a, b = random_box(), random_box()
            mask_a = np.zeros((50, 50), bool)
            mask_b = np.zeros((50, 50), bool)
            mask_a[a.y1:a.y2, a.x1:a.x2] = True
            mask_b[b.y1:b.y2, b.x1:b.x2] = True
            expected = (mask_a & mask_b).sum() / (mask_a | mask_b).sum()
            assert iou(a, b) == pytest.approx(expected)

    def test_dedup_threshold(self):
        record = make_record([(0, 0, 10, 10)], [(5, 0, 15, 10)])
        assert dedup_filter(record, 0.5)
        assert not dedup_filter(record, 0.3)

    def test_dedup_ignores_boxes_within_one_turn(self):
        assert dedup_filter(make_record([(0, 0, 10, 10), (0, 0, 10, 10)]))

    def test_dedup_rejects_bad_threshold(self):
        with pytest.raises(LabError):
            dedup_filter(make_record(), 0.0)

    def test_length_filter(self):
        record = make_record(*([(i * 20, 0, i * 20 + 10, 10)] for i in range(4)))
        assert zoom_turns(record) == 4
        assert not length_filter(record)
        assert length_filter(record, max_zoom_turns=4)

    def test_single_pass_filter(self, desk_scene, env_config, desk_spec):
        direct = run_episode(ConstantAnswerPolicy(desk_spec), desk_scene, desk_scene.query, env_config, 0)
        focused = run_episode(OraclePolicy(desk_spec), desk_scene, desk_scene.query, env_config, 0)
        assert not single_pass_filter(direct)
        assert single_pass_filter(focused)

    @pytest.mark.parametrize("size,keep", [((512, 512), False), ((513, 513), True), ((600, 400), False)])
    def test_resolution_filter(self, size, keep):
        assert resolution_filter(ImageBuffer.blank(*size, channels=1)) == keep


class TestDifficulty:
    def test_oracle_is_too_easy(self, desk_scene, env_config, desk_spec):
        oracle = OraclePolicy(desk_spec)
        assert rollout_accuracy(desk_scene, oracle, env_config, n=4) == 1.0
        assert not difficulty_filter(desk_scene.query, desk_scene, oracle, env_config, n=4)
        assert difficulty_filter(desk_scene.query, desk_scene, oracle, env_config, n=4, band=(0.0, 1.0))

    def test_wrong_constant_is_too_hard(self, desk_scene, env_config, desk_spec):
        wrong = (desk_spec.labels.index(desk_scene.gold) + 1) % desk_spec.num_classes
        policy = ConstantAnswerPolicy(desk_spec, label_index=wrong)
        assert not difficulty_filter(desk_scene.query, desk_scene, policy, env_config, n=4)

    def test_quarter_accuracy_is_kept(self, desk_scene, env_config, desk_spec):
        assert rollout_accuracy(desk_scene, EveryFourthCorrect(desk_spec, desk_scene.gold), env_config) == 0.25
        assert difficulty_filter(desk_scene.query, desk_scene, EveryFourthCorrect(desk_spec, desk_scene.gold), env_config)

    def test_band_is_checked_on_rollout_accuracy(self, desk_scene, env_config, desk_spec, monkeypatch):
        calls = []

        def fake_accuracy(scene, policy, config, n=8, seed=0, query=None):
            calls.append((scene.seed, n, seed, query))
            return 0.375

        monkeypatch.setattr("src.trajectory_pipeline.rollout_accuracy", fake_accuracy)
        oracle = OraclePolicy(desk_spec)
        assert difficulty_filter("Which word?", desk_scene, oracle, env_config, n=8, seed=4)
        assert not difficulty_filter("Which word?", desk_scene, oracle, env_config, band=(0.0, 0.25))
        assert calls[0] == (desk_scene.seed, 8, 4, "Which word?")

    def test_argument_checks(self, desk_scene, env_config, desk_spec):
        oracle = OraclePolicy(desk_spec)
        with pytest.raises(LabError):
            difficulty_filter(desk_scene.query, desk_scene, oracle, env_config, n=0)
        with pytest.raises(LabError):
            difficulty_filter(desk_scene.query, desk_scene, oracle, env_config, band=(0.5, 0.2))


class TestRejectionSample:
    def test_oracle_keeps_every_scene(self, desk_scenes, env_config, desk_spec):
        dataset = rejection_sample(desk_scenes, OraclePolicy(desk_spec), env_config, k=2)
        assert [t.scene_seed for t in dataset] == list(desk_scenes.seeds)
        assert all(t.reward == 1 for t in dataset)

    def test_repeated_focus_is_deduplicated(self, desk_scenes, env_config, desk_spec):
        assert rejection_sample(desk_scenes, RepeatFocusPolicy(desk_spec, repeats=2), env_config, k=2) == []

    def test_long_trajectories_are_dropped(self, desk_scene, env_config, desk_spec):
        trajectory = run_episode(RepeatFocusPolicy(desk_spec, repeats=4), desk_scene, desk_scene.query, env_config, 0)
        assert trajectory.reward == 1
        assert not length_filter(trajectory)


class TestRecordIo:
    def test_export_and_read(self, desk_scenes, env_config, desk_spec, tmp_path):
        oracle = OraclePolicy(desk_spec)
        trajectories = [run_episode(oracle, scene, scene.query, env_config, 0) for scene in desk_scenes]
        path = export_trajectories(trajectories, tmp_path / "sft" / "records.jsonl", source="oracle")
        records = read_records(path)
        assert len(records) == len(trajectories)
        assert all(validate(r).passed for r in records)

        first = records[0]
        view = load_view(asset_dir_for(path), first["images"][0])
        assert view.pixel_equal(trajectories[0].episode.overview.view)
        assert scene_for_record(first, desk_scenes).seed == trajectories[0].scene_seed

    def test_unknown_scene_seed(self, desk_scenes):
        with pytest.raises(ParseError):
            scene_for_record({"meta": {"scene_seed": 999}}, desk_scenes)

    def test_bad_json_line(self, tmp_path):
        path = tmp_path / "records.jsonl"
        path.write_text('{"turns": []}\n{oops\n')
        with pytest.raises(ParseError):
            read_records(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoFailure):
            read_records(tmp_path / "nope.jsonl")

    def test_missing_asset(self, tmp_path):
        with pytest.raises(IoFailure):
            load_view(tmp_path, "deadbeef")
