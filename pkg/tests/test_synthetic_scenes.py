import json
from itertools import combinations

import numpy as np
import pytest

from src.budget_engine import BBox, BudgetConfig, compute_budget, crop, downsample
from src.errors import IoFailure, LabError, SpecInfeasible
from src.synthetic_scenes import (
    Legibility,
    SceneSet,
    SceneSpec,
    class_labels,
    decode_answer,
    generate_scene,
    glyph_codebook,
    legibility,
    plotkin_bound,
    read_manifest,
    read_target,
    write_manifest,
)


class TestSceneSpec:
    def test_canvas_must_divide_into_grid(self):
        with pytest.raises(SpecInfeasible):
            SceneSpec(canvas=1000, grid=3)

    def test_glyph_must_fit_with_margin(self):
        with pytest.raises(SpecInfeasible):
            SceneSpec(canvas=64, grid=4, glyph_size=16)

    def test_needs_two_classes(self):
        with pytest.raises(SpecInfeasible):
            SceneSpec(num_classes=1)

    def test_density_range(self):
        with pytest.raises(SpecInfeasible):
            SceneSpec(distractor_density=1.5)

    def test_default_geometry(self):
        spec = SceneSpec()
        assert spec.cell_size == 224
        assert spec.glyph_bbox(0, 0) == BBox(104, 104, 120, 120)


class TestCodebook:
    def test_pairwise_distance_at_least_half(self):
        codebook = glyph_codebook(16, 8).reshape(8, -1)
        for a, b in combinations(codebook, 2):
            assert np.count_nonzero(a != b) >= 128

    def test_no_blank_or_solid_glyphs(self):
        codebook = glyph_codebook(16, 8).reshape(8, -1)
        assert all(0 < word.sum() < word.size for word in codebook)

    def test_greedy_codebook_for_odd_sizes(self):
        codebook = glyph_codebook(3, 3).reshape(3, -1)
        for a, b in combinations(codebook, 2):
            assert np.count_nonzero(a != b) >= 5

    def test_plotkin(self):
        assert plotkin_bound(256, 128) == 512
        assert plotkin_bound(9, 5) == 10

    def test_too_many_classes_for_glyph(self):
        with pytest.raises(SpecInfeasible):
            glyph_codebook(4, 40)

    def test_codebook_depends_only_on_size_and_classes(self):
        np.testing.assert_array_equal(glyph_codebook(16, 4), glyph_codebook(16, 8)[:4])


class TestGenerateScene:
    def test_deterministic(self, desk_spec):
        a, b = generate_scene(desk_spec, 11), generate_scene(desk_spec, 11)
        assert a.image.pixel_equal(b.image)
        assert (a.target_cell, a.gold) == (b.target_cell, b.gold)

    def test_seed_changes_scene(self, desk_spec):
        assert not generate_scene(desk_spec, 11).image.pixel_equal(generate_scene(desk_spec, 12).image)

    def test_gold_cycles_through_classes(self, desk_spec):
        golds = [generate_scene(desk_spec, seed).gold for seed in range(4)]
        assert golds == desk_spec.labels

    def test_marker_is_target_cell(self, desk_scene, desk_spec):
        assert desk_scene.marker_bbox == desk_spec.cell_bbox(*desk_scene.target_cell)
        assert desk_scene.image.width == desk_spec.canvas

    def test_query_lists_labels(self, desk_scene):
        assert "alpha, bravo, charlie, delta" in desk_scene.query

    def test_labels_extend_past_code_words(self):
        assert class_labels(28)[-2:] == ["glyph-26", "glyph-27"]


class TestStarvation:
    def test_overview_is_illegible(self, desk_scene):
        budget = compute_budget(desk_scene.image, BudgetConfig())
        overview = downsample(desk_scene.image, budget, 28)
        assert decode_answer(desk_scene, overview) is None
        assert legibility(desk_scene, overview) == Legibility.ILLEGIBLE

    def test_target_crop_is_legible(self, desk_scene):
        view = crop(desk_scene.image, desk_scene.marker_bbox)
        assert legibility(desk_scene, view, desk_scene.marker_bbox) == Legibility.LEGIBLE
        assert decode_answer(desk_scene, view, desk_scene.marker_bbox) == desk_scene.gold

    def test_full_resolution_glimpse_is_readable(self, desk_scene):
        assert decode_answer(desk_scene, desk_scene.image) == desk_scene.gold

    def test_crop_around_target_decodes_target(self, desk_scene, desk_spec):
        row, col = desk_scene.target_cell
        cell = desk_spec.cell_size
        region = BBox((col - 1) * cell, (row - 1) * cell, (col + 2) * cell, (row + 2) * cell).clamp(
            desk_spec.canvas, desk_spec.canvas
        )
        reading = read_target(crop(desk_scene.image, region), region, desk_spec)
        assert reading.label == desk_scene.gold
        assert reading.cell == desk_scene.target_cell

    def test_distractor_cell_is_not_read(self, desk_scene, desk_spec):
        row, col = desk_scene.target_cell
        other = ((row + 1) % desk_spec.grid, col)
        region = desk_spec.cell_bbox(*other)
        assert read_target(crop(desk_scene.image, region), region, desk_spec) is None

    @pytest.mark.slow
    def test_default_spec_guarantees(self):
        spec = SceneSpec()
        for seed in range(1000):
            scene = generate_scene(spec, seed)
            overview = downsample(scene.image, 256, 28)
            assert decode_answer(scene, overview) is None
            target = downsample(crop(scene.image, scene.marker_bbox), 256, 28)
            assert decode_answer(scene, target, scene.marker_bbox) == scene.gold


class TestSceneSet:
    def test_iterates_in_seed_order(self, desk_spec):
        scene_set = SceneSet.from_range(desk_spec, 5, 3)
        assert len(scene_set) == 3
        assert [s.seed for s in scene_set] == [5, 6, 7]
        assert scene_set[1].seed == 6

    def test_manifest_round_trip(self, desk_spec, tmp_path):
        scene_set = SceneSet.from_range(desk_spec, 0, 6)
        path = write_manifest(scene_set, tmp_path / "scenes.jsonl")
        assert read_manifest(path) == scene_set
        assert len(path.read_text().splitlines()) == 6

    def test_manifest_is_byte_stable(self, desk_spec, tmp_path):
        scene_set = SceneSet.from_range(desk_spec, 0, 4)
        a = write_manifest(scene_set, tmp_path / "a.jsonl").read_bytes()
        b = write_manifest(scene_set, tmp_path / "b.jsonl").read_bytes()
        assert a == b

    def test_tampered_manifest(self, desk_spec, tmp_path):
        path = write_manifest(SceneSet.from_range(desk_spec, 0, 2), tmp_path / "scenes.jsonl")
        records = [json.loads(line) for line in path.read_text().splitlines()]
        records[0]["gold"] = "zulu"
        path.write_text("\n".join(json.dumps(r) for r in records))
        with pytest.raises(LabError):
            read_manifest(path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(IoFailure):
            read_manifest(tmp_path / "nope.jsonl")
