import json

import pytest
from click.testing import CliRunner

from main import cli
from src.trajectory_pipeline import read_records, write_records

DESK_ENV = """CANVAS=1344
GRID=4
NUM_CLASSES=4
TRAIN_SCENES=4
EVAL_SCENES=2
ROLLOUTS_PER_QUERY=1
SFT_SAMPLES_PER_SCENE=1
SFT_EPOCHS=2
GROUP_SIZE=2
BATCH_QUERIES=2
MINIBATCH=4
MAX_STEPS=1
MAX_DEGENERATE_RETRIES=1
"""


@pytest.fixture(autouse=True)
def no_lab_config(monkeypatch):
    monkeypatch.delenv("LAB_CONFIG", raising=False)


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def desk_env(tmp_path):
    path = tmp_path / "desk.env"
    path.write_text(DESK_ENV)
    return path


def focus_record(*turn_boxes):
    turns = [{"from": "human", "value": "<image>\nWhich code word?"}]
    images = ["glimpse"]
    for n, boxes in enumerate(turn_boxes):
        call = json.dumps({"name": "focus", "arguments": {"bboxes": boxes}})
        turns.append({"from": "gpt", "value": f"<think>zoom</think><tool_call>{call}</tool_call>"})
        turns.append({"from": "human", "value": "<tool_response>" + "<image>" * len(boxes) + "</tool_response>"})
        images.extend(f"v{n}-{i}" for i in range(len(boxes)))
    turns.append({"from": "gpt", "value": "<think>done</think><answer>alpha</answer>"})
    return {
        "meta": {"bboxes": [b for boxes in turn_boxes for b in boxes], "image_size": [1792, 1792], "overview_size": [448, 448]},
        "turns": turns,
        "images": images,
    }


class TestCheck:
    def test_defaults_pass(self, runner, tmp_path):
        result = runner.invoke(cli, ["--out", str(tmp_path), "check"])
        assert result.exit_code == 0, result.output
        assert "All checks passed!" in result.output
        assert "Training budget: 655" in result.output

    def test_legible_glimpse_fails(self, runner, tmp_path):
        path = tmp_path / "bad.env"
        path.write_text("FIXED_BUDGET=1337\n")
        result = runner.invoke(cli, ["--config", str(path), "check"])
        assert result.exit_code == 1
        assert "legible" in result.output

    def test_missing_config_reports_json(self, runner, tmp_path):
        result = runner.invoke(cli, ["--config", str(tmp_path / "absent.env"), "check"])
        assert result.exit_code == 1
        record = json.loads(result.output.strip().splitlines()[-1])
        assert record["error"] == "ConfigError"
        assert "absent.env" in record["message"]


def test_gen_scenes(runner, desk_env, tmp_path):
    out = tmp_path / "out"
    result = runner.invoke(cli, ["--config", str(desk_env), "--out", str(out), "gen-scenes"])
    assert result.exit_code == 0, result.output
    assert len((out / "scenes" / "train.jsonl").read_text().splitlines()) == 4
    assert len((out / "scenes" / "eval.jsonl").read_text().splitlines()) == 2


class TestRecordCommands:
    def test_validate(self, runner, tmp_path):
        bad = focus_record([[0, 0, 10, 10]])
        bad["meta"]["bboxes"] = []
        path = write_records([focus_record([[0, 0, 10, 10]]), bad], tmp_path / "records.jsonl")
        result = runner.invoke(cli, ["validate", str(path)])
        assert result.exit_code == 0
        assert "1/2 records passed" in result.output
        assert "record 1: check 4" in result.output
        assert runner.invoke(cli, ["validate", "--strict", str(path)]).exit_code == 1

    def test_identity_rescale_is_byte_stable(self, runner, tmp_path):
        source = write_records([focus_record([[10, 20, 110, 220]], [[0, 0, 50, 50]])], tmp_path / "in.jsonl")
        output = tmp_path / "out.jsonl"
        result = runner.invoke(cli, ["rescale", str(source), str(output), "--scale", "1.0"])
        assert result.exit_code == 0, result.output
        assert output.read_bytes() == source.read_bytes()

    def test_rescale_from_sizes(self, runner, tmp_path):
        source = write_records([focus_record([[400, 800, 1200, 1600]])], tmp_path / "in.jsonl")
        output = tmp_path / "out.jsonl"
        assert runner.invoke(cli, ["rescale", str(source), str(output)]).exit_code == 0
        assert read_records(output)[0]["meta"]["bboxes"] == [[100, 200, 300, 400]]
        back = tmp_path / "back.jsonl"
        assert runner.invoke(cli, ["rescale", str(output), str(back), "--inverse"]).exit_code == 0
        assert read_records(back)[0]["meta"]["bboxes"] == [[400, 800, 1200, 1600]]

    def test_rescale_needs_sizes(self, runner, tmp_path):
        record = focus_record([[0, 0, 10, 10]])
        del record["meta"]["overview_size"]
        source = write_records([record], tmp_path / "in.jsonl")
        result = runner.invoke(cli, ["rescale", str(source), str(tmp_path / "out.jsonl")])
        assert result.exit_code == 1
        assert '"error": "LabError"' in result.output

    def test_filter(self, runner, tmp_path):
        records = [
            focus_record(),
            focus_record([[0, 0, 10, 10]]),
            focus_record([[0, 0, 10, 10]], [[0, 0, 10, 10]]),
            focus_record(*([[i * 20, 0, i * 20 + 10, 10]] for i in range(4))),
        ]
        source = write_records(records, tmp_path / "in.jsonl")
        output = tmp_path / "kept.jsonl"
        result = runner.invoke(cli, ["filter", str(source), str(output)])
        assert result.exit_code == 0, result.output
        assert "kept 1/4" in result.output
        assert read_records(output) == [records[1]]


class TestPipeline:
    def test_eval_oracle(self, runner, desk_env, tmp_path):
        result = runner.invoke(cli, ["--config", str(desk_env), "--out", str(tmp_path), "eval", "--policy", "oracle"])
        assert result.exit_code == 0, result.output
        assert "Accuracy: 1.000" in result.output
        report = json.loads((tmp_path / "eval" / "oracle_constrained.json").read_text())
        assert len(report["per_query"]) == 2
        assert (tmp_path / "eval" / "oracle_constrained.csv").exists()

    def test_sweep_oracle(self, runner, desk_env, tmp_path):
        desk_env.write_text(desk_env.read_text() + "SWEEP_BUDGETS=256,512\n")
        result = runner.invoke(cli, ["--config", str(desk_env), "--out", str(tmp_path), "sweep", "--policy", "oracle"])
        assert result.exit_code == 0, result.output
        rows = (tmp_path / "eval" / "oracle_sweep.csv").read_text().splitlines()
        assert len(rows) == 3
        assert "B=256: accuracy=1.000" in result.output
        assert "B=512: accuracy=1.000" in result.output

    def test_sft_then_rl(self, runner, desk_env, tmp_path):
        base = ["--config", str(desk_env), "--out", str(tmp_path)]
        result = runner.invoke(cli, base + ["sft"])
        assert result.exit_code == 0, result.output
        checkpoint = tmp_path / "sft" / "policy.txt"
        assert checkpoint.exists()
        assert len(read_records(tmp_path / "sft" / "records.jsonl")) == 4

        result = runner.invoke(cli, base + ["rl", "--init", str(checkpoint)])
        assert result.exit_code == 0, result.output
        assert (tmp_path / "rl" / "policy.txt").exists()
        assert (tmp_path / "rl" / "training_log.csv").exists()
        assert len((tmp_path / "rl" / "training_log.jsonl").read_text().splitlines()) == 1

    def test_sft_from_records(self, runner, desk_env, tmp_path):
        base = ["--config", str(desk_env), "--out", str(tmp_path)]
        assert runner.invoke(cli, base + ["sft"]).exit_code == 0
        records = tmp_path / "sft" / "records.jsonl"
        copied = tmp_path / "demos.jsonl"
        copied.write_bytes(records.read_bytes())
        result = runner.invoke(cli, base + ["sft", "--records", str(copied)])
        assert result.exit_code == 0, result.output
        assert "Rebuilding trajectories" in result.output
