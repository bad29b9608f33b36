"""End-to-end orchestration: index -> graph -> stats -> dataset emission,
with per-stage content-hash caching.

A stage reruns only when the hash of its input files or parameters changed
(file timestamps are ignored, so caches survive copies between machines).
Source images referenced by records are not hashed; edit them and rerun
with a clean output directory.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

from . import dataset as dataset_mod
from .errors import ValidationError
from .feature_store import (
    aligned_features,
    filter_by_confidence,
    load_corpus,
    normalize,
)
from .graph import SimilarityBand, build_graph, degree_stats, load_graph
from .knn_index import (
    DEFAULT_SEARCH_K,
    IndexConfig,
    MODE_EXACT,
    MODE_PARTITIONED,
    build_exact,
    build_partitioned,
    default_partitioned_config,
    load_index,
    save_index,
)

log = logging.getLogger("forge.pipeline")


@dataclass(frozen=True)
class PipelineConfig:
    corpus_manifest: Path
    out_dir: Path
    task: str = dataset_mod.TASK_INSERTION
    band: SimilarityBand = SimilarityBand()
    k_max: int = 5
    search_k: int = DEFAULT_SEARCH_K
    mode: str = MODE_EXACT
    num_partitions: int | None = None
    probes: int | None = None
    seed: int = 0
    threads: int = 1
    grids: str = "auto"
    backgrounds_dir: Path | None = None
    captions_dir: Path | None = None


def _hash_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


class _StageCache:
    def __init__(self, out_dir: Path):
        self.cache_dir = out_dir / ".forge-cache"
        self.cache_dir.mkdir(parents=True, exist_ok=True)

    def fresh(self, stage: str, inputs: list[Path], params: dict, outputs: list[Path]) -> bool:
        stamp_path = self.cache_dir / f"{stage}.json"
        if not stamp_path.exists():
            return False
        try:
            stamp = json.loads(stamp_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            return False
        current = self._stamp(inputs, params)
        if stamp != current:
            return False
        return all(p.exists() for p in outputs)

    def record(self, stage: str, inputs: list[Path], params: dict) -> None:
        stamp_path = self.cache_dir / f"{stage}.json"
        stamp_path.write_text(
            json.dumps(self._stamp(inputs, params), indent=2), encoding="utf-8"
        )

    @staticmethod
    def _stamp(inputs: list[Path], params: dict) -> dict:
        return {
            "inputs": {str(p): _hash_file(p) for p in sorted(inputs)},
            "params": params,
        }


def pipeline_all(config: PipelineConfig) -> dict[str, Path]:
    """Run all stages with a shared seed; returns the artifact paths."""
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache = _StageCache(out_dir)

    manifest_path = Path(config.corpus_manifest)
    if not manifest_path.exists():
        raise ValidationError(f"corpus manifest not found: {manifest_path}")
    manifest, records, matrix = load_corpus(manifest_path)
    base = manifest_path.parent
    corpus_files = [
        manifest_path,
        base / manifest.objects_path,
        base / manifest.features_path,
    ]

    kept = filter_by_confidence(records, manifest.min_det_conf)
    if not kept:
        raise ValidationError(
            f"no objects at or above det_conf {manifest.min_det_conf}"
        )
    aligned = normalize(aligned_features(kept, matrix))

    index_path = out_dir / "index.omix"
    graph_path = out_dir / "neighbors.jsonl"
    stats_path = out_dir / "stats.json"
    examples_path = out_dir / "examples.jsonl"

    current_stage = "index"
    partial: list[Path] = []
    try:
        # --- index ---
        if config.mode == MODE_PARTITIONED:
            index_config = default_partitioned_config(
                aligned.count, search_k=config.search_k, seed=config.seed
            )
            if config.num_partitions is not None:
                index_config = IndexConfig(
                    mode=MODE_PARTITIONED,
                    num_partitions=config.num_partitions,
                    probes=config.probes or index_config.probes,
                    search_k=config.search_k,
                    seed=config.seed,
                )
        else:
            index_config = IndexConfig(mode=MODE_EXACT, search_k=config.search_k, seed=config.seed)
        index_params = {
            "mode": config.mode,
            "num_partitions": index_config.num_partitions,
            "probes": index_config.probes,
            "search_k": index_config.search_k,
            "seed": config.seed,
            "min_det_conf": manifest.min_det_conf,
        }
        if cache.fresh("index", corpus_files, index_params, [index_path]):
            log.info("[index] cached: %s", index_path)
            index = load_index(index_path, aligned)
        else:
            log.info("[index] building %s index over %d objects", config.mode, aligned.count)
            partial = [index_path]
            if config.mode == MODE_PARTITIONED:
                index = build_partitioned(aligned, index_config)
            else:
                index = build_exact(aligned, index_config)
            save_index(index, index_path)
            cache.record("index", corpus_files, index_params)
            partial = []

        # --- graph ---
        current_stage = "graph"
        graph_params = {
            "lo": config.band.lo,
            "hi": config.band.hi,
            "k_max": config.k_max,
            "search_k": config.search_k,
        }
        graph_inputs = corpus_files + [index_path]
        if cache.fresh("graph", graph_inputs, graph_params, [graph_path]):
            log.info("[graph] cached: %s", graph_path)
            graph = load_graph(graph_path, config.band, config.k_max)
        else:
            log.info(
                "[graph] band [%s, %s], k_max %d", config.band.lo, config.band.hi, config.k_max
            )
            partial = [graph_path]
            graph = build_graph(
                index, kept, config.band, config.k_max, config.search_k, threads=config.threads
            )
            graph.save_jsonl(graph_path)
            cache.record("graph", graph_inputs, graph_params)
            partial = []

        # --- stats ---
        current_stage = "stats"
        stats_inputs = corpus_files + [graph_path]
        if cache.fresh("stats", stats_inputs, {}, [stats_path]):
            log.info("[stats] cached: %s", stats_path)
        else:
            partial = [stats_path]
            stats = degree_stats(graph, kept)
            stats_path.write_text(
                json.dumps(stats.as_dict(), indent=2) + "\n", encoding="utf-8"
            )
            cache.record("stats", stats_inputs, {})
            partial = []
            log.info(
                "[stats] %d objects, ge1 %s, ge3 %s",
                stats.num_objects,
                stats.pct_ge1_str,
                stats.pct_ge3_str,
            )

        # --- dataset ---
        current_stage = "dataset"
        dataset_params = {
            "task": config.task,
            "grids": config.grids,
            "backgrounds": str(config.backgrounds_dir) if config.backgrounds_dir else None,
            "captions": str(config.captions_dir) if config.captions_dir else None,
        }
        dataset_inputs = corpus_files + [graph_path]
        if cache.fresh("dataset", dataset_inputs, dataset_params, [examples_path]):
            log.info("[dataset] cached: %s", examples_path)
        else:
            partial = [examples_path]
            counters: dict = {}
            dataset_mod.emit_dataset(
                graph,
                kept,
                config.task,
                out_dir,
                corpus_root=base,
                backgrounds_dir=config.backgrounds_dir,
                captions_dir=config.captions_dir,
                grids=config.grids,
                counters=counters,
            )
            cache.record("dataset", dataset_inputs, dataset_params)
            partial = []
            log.info(
                "[dataset] emitted %d examples (%d skipped, %d grids)",
                counters.get("emitted", 0),
                counters.get("skipped", 0),
                counters.get("grids_written", 0),
            )
    except KeyboardInterrupt:
        for path in partial:
            if path.exists():
                path.unlink()
        log.warning("[%s] interrupted; partial outputs removed", current_stage)
        raise
    except Exception:
        log.error("[%s] stage failed", current_stage)
        raise

    return {
        "index": index_path,
        "graph": graph_path,
        "stats": stats_path,
        "examples": examples_path,
    }
