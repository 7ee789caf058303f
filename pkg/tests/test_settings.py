import pytest

from config.settings import RunConfig, load_run_config, load_values
from src.budget_engine import ImageBuffer, compute_budget
from src.errors import ConfigError

DESK = {"CANVAS": 1344, "GRID": 4, "NUM_CLASSES": 4}


@pytest.fixture(autouse=True)
def no_lab_config(monkeypatch):
    monkeypatch.delenv("LAB_CONFIG", raising=False)


def write_env(tmp_path, text, name="run.env"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestDefaults:
    def test_values(self):
        config = load_run_config()
        assert config.budget.gamma == 6.25
        assert (config.budget.b_min, config.budget.b_max, config.budget.patch_size) == (169, 1337, 28)
        assert (config.grpo.clip_low, config.grpo.clip_high) == (0.2, 0.28)
        assert config.episode.max_turns == 5
        assert config.episode.fixed_budget_override is None
        assert config.eval.max_turns == 3
        assert config.eval.budget_override == 256
        assert config.eval.budgets_for_sweep == (128, 256, 512, 1024)
        assert config.difficulty_band == (0.125, 0.375)
        assert config.output_dir.is_absolute()
        assert config.source is None

    def test_training_budget_follows_the_law(self):
        assert load_run_config().training_budget() == 655
        assert load_run_config(overrides=DESK).training_budget() == 368

    @pytest.mark.parametrize("canvas", [448, 1344, 1792, 4480])
    def test_training_budget_matches_the_engine(self, canvas):
        config = load_run_config(overrides={"CANVAS": canvas, "GRID": 4})
        blank = ImageBuffer.blank(canvas, canvas, channels=1)
        assert config.training_budget() == compute_budget(blank, config.budget)

    def test_focus_cost(self):
        assert load_run_config().grpo.focus_cost == 0.0
        assert load_run_config(overrides={"FOCUS_COST": "0.1"}).grpo.focus_cost == 0.1
        with pytest.raises(ConfigError):
            load_run_config(overrides={"FOCUS_COST": "1.5"})

    def test_defaults_validate(self):
        assert load_run_config().validate() == []
        assert load_run_config(overrides=DESK).validate() == []

    def test_scales(self):
        config = load_run_config()
        assert config.overview_scale(256) == 0.25
        assert config.overview_scale(None) == 1.0
        assert config.crop_scale(256) == 1.0


class TestOverlay:
    def test_file_overrides_defaults(self, tmp_path):
        path = write_env(tmp_path, "SEED=9\nFIXED_BUDGET=256\nCONSTRAINED=false\n")
        config = load_run_config(path)
        assert config.seed == 9
        assert config.episode.fixed_budget_override == 256
        assert not config.episode.constrained
        assert config.training_budget() is None
        assert config.source == path

    def test_lab_config_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LAB_CONFIG", str(write_env(tmp_path, "SEED=12\n")))
        assert RunConfig.from_values(load_values()).seed == 12

    def test_unknown_key_in_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(write_env(tmp_path, "SEEDS=3\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "absent.env")

    def test_unknown_override(self):
        with pytest.raises(ConfigError):
            load_values(overrides={"NOPE": 1})

    def test_none_overrides_are_skipped(self):
        assert load_values(overrides={"SEED": None})["SEED"] == "0"

    @pytest.mark.parametrize("key,value", [("GRID", "eight"), ("GAMMA", "fast"), ("CONSTRAINED", "maybe"), ("SWEEP_BUDGETS", "128,x")])
    def test_bad_values(self, key, value):
        with pytest.raises(ConfigError):
            load_run_config(overrides={key: value})


class TestValidate:
    def test_legible_glimpse(self):
        problems = load_run_config(overrides={"FIXED_BUDGET": 1337}).validate()
        assert any("training glimpse" in p for p in problems)

    def test_illegible_crop(self):
        problems = load_run_config(overrides={"EVAL_BUDGET": 9}).validate()
        assert any("illegible at the evaluation budget" in p for p in problems)

    def test_overlapping_scene_seeds(self):
        problems = load_run_config(overrides={"EVAL_SCENE_START": 100}).validate()
        assert "Training and evaluation scene seeds overlap" in problems

    def test_bad_band(self):
        problems = load_run_config(overrides={"DIFFICULTY_LOW": 0.5, "DIFFICULTY_HIGH": 0.2}).validate()
        assert any("DIFFICULTY" in p for p in problems)
