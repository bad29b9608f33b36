import json

import pytest

from recurforge.cli import run
from recurforge.feature_store import normalize
from recurforge.graph import SimilarityBand, build_graph, degree_stats
from recurforge.knn_index import build_exact
from recurforge.synthetic import planted_groups, records_for, write_corpus


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    matrix, group_of = planted_groups(12, 4, dim=32, pair_sim=0.95, seed=21)
    records = records_for(matrix, group_of, seed=21)
    manifest = write_corpus(
        root, matrix, records, with_images=True, with_backgrounds=True, seed=21
    )
    return manifest, matrix, records


class TestExitCodes:
    def test_help_exits_zero(self, capsys):
        assert run(["--help"]) == 0
        assert "Usage" in capsys.readouterr().out

    def test_all_subcommand_helps_exit_zero(self):
        for args in (
            ["index", "--help"],
            ["index", "build", "--help"],
            ["graph", "build", "--help"],
            ["analyze", "--help"],
            ["analyze", "precision", "--help"],
            ["analyze", "hist", "--help"],
            ["analyze", "scaling", "--help"],
            ["analyze", "breakdown", "--help"],
            ["analyze", "stats", "--help"],
            ["dataset", "emit", "--help"],
            ["eval", "identity", "--help"],
            ["eval", "agreement", "--help"],
            ["eval", "benchmark", "--help"],
            ["label", "serve", "--help"],
            ["pipeline_all", "--help"],
        ):
            assert run(args) == 0, args

    def test_unknown_flag_exits_one(self, capsys):
        assert run(["graph", "build", "--frobnicate"]) == 1
        assert "Usage" in capsys.readouterr().err or True

    def test_unknown_subcommand_exits_one(self):
        assert run(["transmogrify"]) == 1

    def test_missing_file_exits_two(self, tmp_path):
        code = run(
            ["graph", "build", "--corpus", str(tmp_path / "nope.json"), "--out", str(tmp_path / "g.jsonl")]
        )
        assert code == 2

    def test_corrupt_features_exits_two(self, tmp_path, corpus):
        manifest, _, _ = corpus
        bad = tmp_path / "bad"
        bad.mkdir()
        for name in ("objects.jsonl", "manifest.json"):
            (bad / name).write_bytes((manifest.parent / name).read_bytes())
        (bad / "features.bin").write_bytes(b"GARBAGE!" * 16)
        code = run(
            ["pipeline_all", "--corpus", str(bad / "manifest.json"), "--out", str(tmp_path / "out")]
        )
        assert code == 2

    def test_validation_error_exits_one(self, tmp_path, corpus):
        manifest, _, _ = corpus
        bad = tmp_path / "bad"
        bad.mkdir()
        (bad / "features.bin").write_bytes((manifest.parent / "features.bin").read_bytes())
        (bad / "manifest.json").write_bytes((manifest.parent / "manifest.json").read_bytes())
        lines = (manifest.parent / "objects.jsonl").read_text().splitlines()
        first = json.loads(lines[0])
        first["det_conf"] = 7.5
        lines[0] = json.dumps(first)
        (bad / "objects.jsonl").write_text("\n".join(lines) + "\n")
        code = run(
            ["graph", "build", "--corpus", str(bad / "manifest.json"), "--out", str(tmp_path / "g.jsonl")]
        )
        assert code == 1


class TestGraphAndAnalyze:
    def test_index_build_then_graph(self, corpus, tmp_path):
        manifest, _, _ = corpus
        index_path = tmp_path / "index.omix"
        code = run(
            ["index", "build", "--corpus", str(manifest), "--mode", "partitioned",
             "--partitions", "4", "--probes", "4", "--out", str(index_path)]
        )
        assert code == 0
        assert index_path.read_bytes()[:4] == b"OMIX"
        graph_a = tmp_path / "via_index.jsonl"
        graph_b = tmp_path / "in_memory.jsonl"
        assert run(
            ["graph", "build", "--corpus", str(manifest), "--index", str(index_path), "--out", str(graph_a)]
        ) == 0
        assert run(["graph", "build", "--corpus", str(manifest), "--out", str(graph_b)]) == 0
        # full probing makes the partitioned route agree with the exact one
        a = [json.loads(l)["id"] for l in graph_a.read_text().splitlines()]
        b = [json.loads(l)["id"] for l in graph_b.read_text().splitlines()]
        assert a == b

    def test_graph_build_writes_neighbors(self, corpus, tmp_path):
        manifest, matrix, records = corpus
        out = tmp_path / "neighbors.jsonl"
        code = run(
            ["graph", "build", "--corpus", str(manifest),
             "--lo", "0.93", "--hi", "0.975", "--kmax", "5", "--out", str(out)]
        )
        assert code == 0
        assert out.exists()
        lines = [json.loads(l) for l in out.read_text().splitlines()]
        assert all(0.93 <= e["sim"] <= 0.975 for l in lines for e in l["nn"])

    def test_analyze_stats_matches_oracle(self, corpus, tmp_path):
        manifest, matrix, records = corpus
        graph_path = tmp_path / "neighbors.jsonl"
        assert run(["graph", "build", "--corpus", str(manifest), "--out", str(graph_path)]) == 0
        stats_path = tmp_path / "stats.json"
        assert run(
            ["analyze", "stats", "--corpus", str(manifest),
             "--graph", str(graph_path), "--out", str(stats_path)]
        ) == 0
        got = json.loads(stats_path.read_text())
        graph = build_graph(build_exact(normalize(matrix)), records, SimilarityBand(), 5)
        want = degree_stats(graph, records)
        assert got == want.as_dict()

    def test_analyze_precision_from_labels(self, tmp_path):
        labels = tmp_path / "labels.jsonl"
        rows = [
            {"a": 0, "b": 1, "similarity": 0.95, "match": True},
            {"a": 2, "b": 3, "similarity": 0.92, "match": False},
        ]
        labels.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        out = tmp_path / "curve.json"
        csv_out = tmp_path / "curve.csv"
        code = run(
            ["analyze", "precision", "--labels", str(labels),
             "--out", str(out), "--csv", str(csv_out)]
        )
        assert code == 0
        doc = json.loads(out.read_text())
        at_093 = next(p for p in doc["points"] if abs(p["threshold"] - 0.93) < 1e-9)
        assert at_093 == {"threshold": 0.93, "precision": 1.0, "support": 1}
        assert csv_out.read_text().startswith("threshold,precision,support")

    def test_analyze_hist_and_breakdown(self, corpus, tmp_path):
        manifest, _, _ = corpus
        hist_path = tmp_path / "hist.json"
        assert run(["analyze", "hist", "--corpus", str(manifest), "--out", str(hist_path)]) == 0
        hist = json.loads(hist_path.read_text())
        assert hist["n_objects"] == 48
        graph_path = tmp_path / "neighbors.jsonl"
        assert run(["graph", "build", "--corpus", str(manifest), "--out", str(graph_path)]) == 0
        breakdown_path = tmp_path / "breakdown.json"
        assert run(
            ["analyze", "breakdown", "--corpus", str(manifest),
             "--graph", str(graph_path), "--out", str(breakdown_path)]
        ) == 0
        doc = json.loads(breakdown_path.read_text())
        assert sum(row["num_objects"] for row in doc.values()) == 48


class TestEval:
    def test_identity_row_aligned(self, tmp_path):
        import numpy as np

        from recurforge.feature_store import FeatureMatrix, write_features

        gen = np.eye(3, dtype=np.float32)
        ref = np.eye(3, dtype=np.float32)
        ref[2] = [0.0, 1.0, 0.0]  # last pair orthogonal
        write_features(FeatureMatrix(gen), tmp_path / "gen.bin")
        write_features(FeatureMatrix(ref), tmp_path / "ref.bin")
        out = tmp_path / "scores.json"
        assert run(
            ["eval", "identity", "--gen", str(tmp_path / "gen.bin"),
             "--ref", str(tmp_path / "ref.bin"), "--out", str(out)]
        ) == 0
        doc = json.loads(out.read_text())
        assert doc["scores"] == [1.0, 1.0, 0.0]
        assert doc["mean"] == pytest.approx(2 / 3)

    def test_agreement_from_files(self, tmp_path):
        import numpy as np

        from recurforge.feature_store import FeatureMatrix, write_features

        rows = np.array(
            [[1.0, 0.0], [0.9, np.sqrt(1 - 0.81)], [0.1, np.sqrt(1 - 0.01)]],
            dtype=np.float32,
        )
        write_features(FeatureMatrix(rows), tmp_path / "emb.bin")
        triplets = [
            {"ref": 0, "gen1": 1, "gen2": 2, "choice": 1},  # metric agrees
            {"ref": 0, "gen1": 2, "gen2": 1, "choice": 1},  # metric disagrees
        ]
        (tmp_path / "triplets.jsonl").write_text(
            "\n".join(json.dumps(t) for t in triplets) + "\n"
        )
        out = tmp_path / "agreement.json"
        assert run(
            ["eval", "agreement", "--triplets", str(tmp_path / "triplets.jsonl"),
             "--embeddings", str(tmp_path / "emb.bin"), "--out", str(out)]
        ) == 0
        assert json.loads(out.read_text())["accuracy"] == pytest.approx(0.5)

    def test_benchmark_end_to_end(self, tmp_path):
        import numpy as np
        from PIL import Image

        from recurforge.feature_store import FeatureMatrix, write_features

        quads = [
            {
                "object_id": f"obj{q}",
                "captures": [
                    {"image": f"obj{q}/with_{i}.png", "background": f"obj{q}/bg_{i}.png"}
                    for i in range(4)
                ],
            }
            for q in range(2)
        ]
        (tmp_path / "benchmark.jsonl").write_text(
            "\n".join(json.dumps(q) for q in quads) + "\n"
        )
        sample_ids = [f"obj{q}_{i}" for q in range(2) for i in range(4)]
        outputs = tmp_path / "outputs"
        outputs.mkdir()
        for sid in sample_ids:
            Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(outputs / f"{sid}.png")
        rng = np.random.default_rng(0)
        embs = rng.standard_normal((len(sample_ids), 8)).astype(np.float32)
        embs /= np.linalg.norm(embs, axis=1, keepdims=True)
        write_features(FeatureMatrix(embs), tmp_path / "emb.bin")
        (tmp_path / "ids.json").write_text(json.dumps(sample_ids))
        spec = f"{tmp_path}/emb.bin:{tmp_path}/ids.json:{tmp_path}/emb.bin:{tmp_path}/ids.json"
        out = tmp_path / "report.json"
        csv_out = tmp_path / "report.csv"
        assert run(
            ["eval", "benchmark", "--quadruplets", str(tmp_path / "benchmark.jsonl"),
             "--outputs", str(outputs), "--semantic", f"self={spec}",
             "--identity", spec, "--out", str(out), "--csv", str(csv_out)]
        ) == 0
        doc = json.loads(out.read_text())
        assert len(doc["per_sample"]) == 8
        assert doc["composition_means"]["self"] == pytest.approx(1.0, abs=1e-6)
        assert doc["identity_mean"] == pytest.approx(1.0, abs=1e-6)
        assert csv_out.read_text().startswith("sample_id,self,identity")


class TestPipeline:
    def test_end_to_end_count_and_cache(self, corpus, tmp_path, capsys):
        manifest, matrix, records = corpus
        out = tmp_path / "out"
        assert run(["pipeline_all", "--corpus", str(manifest), "--out", str(out)]) == 0
        examples = [json.loads(l) for l in (out / "examples.jsonl").read_text().splitlines()]
        graph = build_graph(build_exact(normalize(matrix)), records, SimilarityBand(), 5)
        eligible = sum(1 for r in records if len(graph.neighbors.get(r.id, [])) >= 3)
        assert len(examples) == eligible

        capsys.readouterr()
        assert run(["pipeline_all", "--corpus", str(manifest), "--out", str(out)]) == 0
        err = capsys.readouterr().err
        cached = [l for l in err.splitlines() if "cached" in l]
        assert len(cached) == 4  # index, graph, stats, dataset

    def test_deterministic_examples_bytes(self, corpus, tmp_path):
        manifest, _, _ = corpus
        a = tmp_path / "a"
        b = tmp_path / "b"
        assert run(["--seed", "3", "pipeline_all", "--corpus", str(manifest), "--out", str(a)]) == 0
        assert run(["--seed", "3", "pipeline_all", "--corpus", str(manifest), "--out", str(b)]) == 0
        assert (a / "examples.jsonl").read_bytes() == (b / "examples.jsonl").read_bytes()
