import json

import numpy as np
import pytest
from PIL import Image

from recurforge.dataset import (
    GRID_SLOTS,
    SceneDescription,
    assemble_examples,
    attach_background,
    attach_caption,
    bbox_mask_tile,
    compose_grid,
    emit_dataset,
    emit_manifest,
    extract_quadrant,
    insertion_channels,
    letterbox,
    load_training_manifest,
    make_loss_mask,
    validate_example,
)
from recurforge.errors import ValidationError
from recurforge.feature_store import normalize
from recurforge.graph import KnnGraph, SimilarityBand, build_graph
from recurforge.knn_index import build_exact
from recurforge.synthetic import records_for, write_corpus


@pytest.fixture()
def planted_graph(planted_corpus):
    matrix, records, group_of = planted_corpus
    graph = build_graph(build_exact(normalize(matrix)), records, SimilarityBand(), 5)
    return graph, records, group_of


class TestAssemble:
    def test_top3_rule(self, planted_graph):
        graph, records, _ = planted_graph
        node = next(iter(sorted(graph.neighbors)))
        example = next(assemble_examples(graph, records, "insertion"))
        assert example.target.id == node
        expected = [nid for nid, _ in graph.neighbors[node][:3]]
        assert [r.id for r in example.references] == expected
        sims = graph.neighbors[node]
        assert list(example.similarities) == [s for _, s in sims[:3]]

    def test_groups_of_four_give_4g_examples(self, planted_graph):
        graph, records, group_of = planted_graph
        examples = list(assemble_examples(graph, records, "insertion"))
        num_groups = len(set(group_of.tolist()))
        assert len(examples) == 4 * num_groups

    def test_short_degree_skipped_and_counted(self):
        records = records_for_count(6)
        graph = KnnGraph(
            {
                0: [(1, 0.95), (2, 0.94), (3, 0.935)],
                1: [(0, 0.95), (2, 0.94)],  # only 2 neighbors
            },
            SimilarityBand(),
            5,
        )
        counters = {}
        examples = list(assemble_examples(graph, records, "insertion", counters))
        assert [e.target.id for e in examples] == [0]
        assert counters["emitted"] == 1
        assert counters["skipped"] == 5

    def test_deterministic_order_by_target_id(self, planted_graph):
        graph, records, _ = planted_graph
        ids = [e.target.id for e in assemble_examples(graph, records, "insertion")]
        assert ids == sorted(ids)

    def test_examples_satisfy_invariants(self, planted_graph):
        graph, records, _ = planted_graph
        for example in assemble_examples(graph, records, "subject_gen"):
            validate_example(example, graph.band)


def records_for_count(n):
    from recurforge.feature_store import FeatureMatrix

    m = FeatureMatrix(np.eye(max(n, 2), dtype=np.float32)[:n])
    return records_for(m, seed=0)


class TestSceneAttachment:
    def make_example(self, tmp_path, task, image_size=32):
        records = records_for_count(5)
        graph = KnnGraph(
            {0: [(1, 0.95), (2, 0.94), (3, 0.935)]}, SimilarityBand(), 5
        )
        example = next(assemble_examples(graph, records, task))
        img_dir = tmp_path / "images"
        img_dir.mkdir(exist_ok=True)
        frame = np.zeros((image_size, image_size, 3), dtype=np.uint8)
        Image.fromarray(frame).save(img_dir / "0.png")
        return example, tmp_path

    def test_attach_background_sets_scene(self, tmp_path):
        example, root = self.make_example(tmp_path, "insertion")
        bg = tmp_path / "bg.png"
        Image.fromarray(np.zeros((32, 32, 3), dtype=np.uint8)).save(bg)
        out = attach_background(example, bg, corpus_root=root)
        assert out.scene.kind == "insertion"
        assert out.scene.background_ref == str(bg)
        assert out.scene.position_mask_bbox == example.target.bbox

    def test_attach_background_missing_file(self, tmp_path):
        example, root = self.make_example(tmp_path, "insertion")
        with pytest.raises(ValidationError, match="not found"):
            attach_background(example, tmp_path / "nope.png", corpus_root=root)

    def test_attach_background_dimension_mismatch_names_both(self, tmp_path):
        example, root = self.make_example(tmp_path, "insertion")
        bg = tmp_path / "bg.png"
        Image.fromarray(np.zeros((16, 48, 3), dtype=np.uint8)).save(bg)
        with pytest.raises(ValidationError, match="48x16.*32x32"):
            attach_background(example, bg, corpus_root=root)

    def test_attach_background_wrong_task(self, tmp_path):
        example, root = self.make_example(tmp_path, "subject_gen")
        bg = tmp_path / "bg.png"
        Image.fromarray(np.zeros((32, 32, 3), dtype=np.uint8)).save(bg)
        with pytest.raises(ValidationError, match="subject_gen"):
            attach_background(example, bg, corpus_root=root)

    def test_attach_caption_verbatim(self, tmp_path):
        example, _ = self.make_example(tmp_path, "subject_gen")
        out = attach_caption(example, "a mug on a desk")
        assert out.scene.caption == "a mug on a desk"

    def test_attach_caption_empty_rejected(self, tmp_path):
        example, _ = self.make_example(tmp_path, "subject_gen")
        with pytest.raises(ValidationError, match="empty"):
            attach_caption(example, "   ")

    def test_attach_caption_on_insertion_rejected(self, tmp_path):
        example, _ = self.make_example(tmp_path, "insertion")
        with pytest.raises(ValidationError, match="insertion"):
            attach_caption(example, "a mug")

    def test_scene_kind_consistency(self):
        with pytest.raises(ValidationError):
            SceneDescription(kind="insertion", caption="nope")
        with pytest.raises(ValidationError):
            SceneDescription(kind="subject_gen", background_ref="x.png")


class TestGrid:
    def solid(self, value):
        return np.full((512, 512, 3), value, dtype=np.uint8)

    def test_placement_round_trip_pixel_exact(self):
        rng = np.random.default_rng(0)
        tiles = [rng.integers(0, 256, (512, 512, 3)).astype(np.uint8) for _ in range(4)]
        grid, _ = compose_grid(tiles[0], tiles[1:])
        assert np.array_equal(extract_quadrant(grid, "target"), tiles[0])
        assert np.array_equal(extract_quadrant(grid, "ref1"), tiles[1])
        assert np.array_equal(extract_quadrant(grid, "ref2"), tiles[2])
        assert np.array_equal(extract_quadrant(grid, "ref3"), tiles[3])

    def test_slot_layout(self):
        grid, _ = compose_grid(self.solid(10), [self.solid(20), self.solid(30), self.solid(40)])
        assert grid[0, 0, 0] == 10       # target pixel (0,0) -> canvas (0,0)
        assert grid[0, 512, 0] == 20     # ref1 pixel (0,0) -> canvas (0,512)
        assert grid[512, 0, 0] == 30
        assert grid[512, 512, 0] == 40
        assert GRID_SLOTS["target"] == (0, 0)

    def test_mask_has_exactly_quadrant_of_ones(self):
        mask = make_loss_mask()
        assert mask.sum() == 512 * 512 == 262_144
        assert mask[:512, :512].all()
        assert not mask[512:, :].any()
        assert not mask[:, 512:].any()

    def test_wrong_tile_size_rejected(self):
        with pytest.raises(ValidationError, match="512"):
            compose_grid(np.zeros((256, 256, 3), np.uint8), [self.solid(0)] * 3)

    def test_wrong_ref_count_rejected(self):
        with pytest.raises(ValidationError, match="reference tiles"):
            compose_grid(self.solid(0), [self.solid(0)] * 2)

    def test_letterbox_preserves_aspect(self):
        img = np.zeros((100, 50, 3), dtype=np.uint8)
        img[:, :, 0] = 200
        out = letterbox(img, 512)
        assert out.shape == (512, 512, 3)
        # padding columns stay black, content centered
        assert out[:, :100].sum() == 0
        assert out[256, 256, 0] > 0


class TestInsertionChannels:
    def test_tiles_embedded_and_stacked(self):
        noisy = np.ones((512, 512, 3), np.float32)
        bg = np.ones((512, 512, 3), np.float32) * 2
        mask = np.ones((512, 512), np.float32)
        stack = insertion_channels(noisy, bg, mask)
        assert stack.channels == 3 + 3 + 1
        assert stack.layout == {"noisy": (0, 3), "background": (3, 6), "mask": (6, 7)}
        assert stack.data[0, 0, 0] == 1.0
        assert stack.data[0, 0, 3] == 2.0
        assert stack.data[600, 600, 3] == 0.0  # zero outside quadrant

    def test_nonzero_outside_quadrant_rejected(self):
        noisy = np.ones((1024, 1024, 3), np.float32)
        bg = np.zeros((1024, 1024, 3), np.float32)
        bg[600, 600, 0] = 5.0
        mask = np.zeros((512, 512), np.float32)
        with pytest.raises(ValidationError, match="background.*600"):
            insertion_channels(noisy, bg, mask)

    def test_noisy_plane_may_fill_canvas(self):
        noisy = np.ones((1024, 1024, 3), np.float32)  # grid with refs everywhere
        bg = np.zeros((512, 512, 3), np.float32)
        mask = np.zeros((512, 512), np.float32)
        stack = insertion_channels(noisy, bg, mask)
        assert stack.data[700, 700, 0] == 1.0

    def test_multichannel_mask_rejected(self):
        noisy = np.ones((512, 512, 3), np.float32)
        bg = np.zeros((512, 512, 3), np.float32)
        mask = np.zeros((512, 512, 2), np.float32)
        with pytest.raises(ValidationError, match="single-channel"):
            insertion_channels(noisy, bg, mask)

    def test_bbox_mask_is_filled_rectangle(self):
        tile = bbox_mask_tile((2, 4, 8, 6), image_size=(32, 32))
        assert tile.shape == (512, 512)
        assert tile.max() > 0


class TestManifest:
    def test_insertion_defaults(self, tmp_path):
        path = tmp_path / "m.json"
        manifest = emit_manifest("insertion", path)
        assert manifest.ref_scale == 2.0
        assert manifest.text_scale is None
        doc = json.loads(path.read_text())
        assert doc["ref_scale"] == 2.0
        assert "text_scale" not in doc
        assert doc["steps"] == 100_000
        assert doc["batch_size"] == 128

    def test_subject_gen_defaults(self, tmp_path):
        manifest = emit_manifest("subject_gen", tmp_path / "m.json")
        assert manifest.ref_scale == 1.5
        assert manifest.text_scale == 7.5
        assert manifest.ref_dropout == 0.10
        assert manifest.text_dropout == 0.10

    def test_round_trip(self, tmp_path):
        path = tmp_path / "m.json"
        emitted = emit_manifest("subject_gen", path, seed=9, k_max=4)
        loaded = load_training_manifest(path)
        assert loaded == emitted

    def test_overlapping_buckets_rejected(self, tmp_path):
        with pytest.raises(ValidationError, match="sum > 1"):
            emit_manifest("subject_gen", ref_dropout=0.6, text_dropout=0.6)


class TestEmitDataset:
    @pytest.fixture()
    def corpus_dir(self, tmp_path, planted_corpus):
        matrix, records, _ = planted_corpus
        write_corpus(
            tmp_path / "corpus",
            matrix,
            records,
            with_images=True,
            with_backgrounds=True,
            with_captions=True,
            seed=1,
        )
        return tmp_path / "corpus", records, matrix

    def test_emit_with_grids_and_backgrounds(self, corpus_dir, tmp_path):
        root, records, matrix = corpus_dir
        graph = build_graph(build_exact(normalize(matrix)), records, SimilarityBand(), 5)
        out = tmp_path / "out"
        counters = {}
        path = emit_dataset(
            graph,
            records,
            "insertion",
            out,
            corpus_root=root,
            backgrounds_dir=root / "backgrounds",
            counters=counters,
        )
        lines = [json.loads(l) for l in path.read_text().splitlines()]
        assert len(lines) == counters["emitted"]
        eligible = sum(1 for r in records if len(graph.neighbors.get(r.id, [])) >= 3)
        assert len(lines) == eligible
        first = lines[0]
        assert first["scene"]["kind"] == "insertion"
        assert first["scene"]["background"].endswith(f"{first['target']}.png")
        assert first["mask_bbox"] == list(records[first["target"]].bbox)
        assert (out / first["grid"]).exists()
        grid = np.asarray(Image.open(out / first["grid"]))
        assert grid.shape == (1024, 1024, 3)

    def test_emit_deterministic_bytes(self, corpus_dir, tmp_path):
        root, records, matrix = corpus_dir
        graph = build_graph(build_exact(normalize(matrix)), records, SimilarityBand(), 5)
        p1 = emit_dataset(graph, records, "subject_gen", tmp_path / "o1",
                          corpus_root=root, captions_dir=root / "captions")
        p2 = emit_dataset(graph, records, "subject_gen", tmp_path / "o2",
                          corpus_root=root, captions_dir=root / "captions")
        assert p1.read_bytes() == p2.read_bytes()
        g1 = sorted((tmp_path / "o1" / "grids").iterdir())
        g2 = sorted((tmp_path / "o2" / "grids").iterdir())
        assert [p.name for p in g1] == [p.name for p in g2]
        assert all(a.read_bytes() == b.read_bytes() for a, b in zip(g1, g2))

    def test_missing_background_sidecar_is_error(self, corpus_dir, tmp_path):
        root, records, matrix = corpus_dir
        graph = build_graph(build_exact(normalize(matrix)), records, SimilarityBand(), 5)
        some_target = next(iter(sorted(graph.neighbors)))
        (root / "backgrounds" / f"{some_target}.png").unlink()
        with pytest.raises(ValidationError, match="not found"):
            emit_dataset(
                graph, records, "insertion", tmp_path / "out",
                corpus_root=root, backgrounds_dir=root / "backgrounds",
            )

    def test_grids_off(self, corpus_dir, tmp_path):
        root, records, matrix = corpus_dir
        graph = build_graph(build_exact(normalize(matrix)), records, SimilarityBand(), 5)
        path = emit_dataset(graph, records, "insertion", tmp_path / "out",
                            corpus_root=root, grids="off")
        lines = [json.loads(l) for l in path.read_text().splitlines()]
        assert all(l["grid"] is None for l in lines)
        assert not (tmp_path / "out" / "grids").exists()
