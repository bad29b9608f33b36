"""`forge`: single entry point for index building, graph construction,
analyses, dataset emission, evaluation, and the labeling service.

Exit codes: 0 success, 1 validation/usage, 2 I/O or file-format, 3
internal. Logs go to stderr; artifacts go to --out.
"""

from __future__ import annotations

import csv as csv_mod
import json
import logging
import sys
from pathlib import Path

import click

from . import analysis as analysis_mod
from . import dataset as dataset_mod
from . import eval_protocol as eval_mod
from . import label_service as label_mod
from .errors import FormatError, ForgeError, ValidationError
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
)
from .pipeline import PipelineConfig, pipeline_all

log = logging.getLogger("forge")


class RunContext:
    def __init__(self, seed: int, threads: int):
        self.seed = seed
        self.threads = threads


def _write_json(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, indent=2) + "\n"
    if out is None or out == "-":
        click.echo(text, nl=False)
    else:
        Path(out).write_text(text, encoding="utf-8")
        log.info("wrote %s", out)


def _write_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv_mod.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    log.info("wrote %s", path)


def _load_aligned(corpus: str):
    manifest_path = Path(corpus)
    manifest, records, matrix = load_corpus(manifest_path)
    kept = filter_by_confidence(records, manifest.min_det_conf)
    if not kept:
        raise ValidationError(f"no objects at or above det_conf {manifest.min_det_conf}")
    aligned = normalize(aligned_features(kept, matrix))
    return manifest_path.parent, kept, aligned


@click.group(name="forge")
@click.option("--seed", type=int, default=0, show_default=True, help="Seed for all randomness in this run.")
@click.option("--threads", type=int, default=None, envvar="FORGE_THREADS", help="Worker threads (default: FORGE_THREADS or 1).")
@click.option("--log-level", default="info", show_default=True, type=click.Choice(["debug", "info", "warning", "error"]))
@click.pass_context
def cli(ctx, seed, threads, log_level):
    """Mine recurring object instances and forge composition datasets."""
    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(logging, log_level.upper()),
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )
    threads = threads if threads and threads > 0 else 1
    log.debug("seed=%d threads=%d", seed, threads)
    ctx.obj = RunContext(seed=seed, threads=threads)


# ---------------------------------------------------------------- index


@cli.group()
def index():
    """Build and inspect top-k cosine indexes."""


@index.command("build")
@click.option("--corpus", required=True, help="Path to manifest.json.")
@click.option("--mode", type=click.Choice([MODE_EXACT, MODE_PARTITIONED]), default=MODE_EXACT, show_default=True)
@click.option("--partitions", type=int, default=None, help="Partition count (default ceil(sqrt(N))).")
@click.option("--probes", type=int, default=None, help="Partitions scanned per query (default ceil(sqrt(P))).")
@click.option("--searchk", type=int, default=DEFAULT_SEARCH_K, show_default=True, help="Candidates fetched per query before filtering.")
@click.option("--out", required=True, help="Output index file (.omix).")
@click.pass_obj
def index_build(run: RunContext, corpus, mode, partitions, probes, searchk, out):
    """Build an index over the corpus features."""
    from .knn_index import save_index

    _, kept, aligned = _load_aligned(corpus)
    if mode == MODE_PARTITIONED:
        config = default_partitioned_config(aligned.count, search_k=searchk, seed=run.seed)
        if partitions is not None:
            config = IndexConfig(
                mode=MODE_PARTITIONED,
                num_partitions=partitions,
                probes=probes if probes is not None else max(1, int(partitions**0.5)),
                search_k=searchk,
                seed=run.seed,
            )
        built = build_partitioned(aligned, config)
    else:
        built = build_exact(aligned, IndexConfig(mode=MODE_EXACT, search_k=searchk, seed=run.seed))
    save_index(built, out)
    log.info("indexed %d objects (%s) -> %s", aligned.count, mode, out)


# ---------------------------------------------------------------- graph


@cli.group()
def graph():
    """Build the band-filtered recurrence graph."""


@graph.command("build")
@click.option("--corpus", required=True, help="Path to manifest.json.")
@click.option("--index", "index_path", default=None, help="Prebuilt .omix index (default: exact in memory).")
@click.option("--lo", type=float, default=0.93, show_default=True, help="Band lower bound (inclusive).")
@click.option("--hi", type=float, default=0.975, show_default=True, help="Band upper bound (inclusive).")
@click.option("--kmax", type=int, default=5, show_default=True, help="Max retained neighbors per object.")
@click.option("--searchk", type=int, default=DEFAULT_SEARCH_K, show_default=True)
@click.option("--out", required=True, help="Output neighbors.jsonl.")
@click.pass_obj
def graph_build(run: RunContext, corpus, index_path, lo, hi, kmax, searchk, out):
    """Query every object and keep in-band, cross-image neighbors."""
    _, kept, aligned = _load_aligned(corpus)
    if index_path is not None:
        idx = load_index(index_path, aligned)
    else:
        idx = build_exact(aligned, IndexConfig(search_k=searchk, seed=run.seed))
    band = SimilarityBand(lo, hi)
    g = build_graph(idx, kept, band, kmax, searchk, threads=run.threads)
    g.save_jsonl(out)
    log.info(
        "graph: %d/%d objects kept >=1 neighbor -> %s",
        g.num_nodes_with_edges(),
        len(kept),
        out,
    )


# ---------------------------------------------------------------- analyze


@cli.group()
def analyze():
    """Recurrence analyses over a corpus, graph, or label file."""


@analyze.command("precision")
@click.option("--labels", "labels_path", required=True, help="labels.jsonl from the labeling service.")
@click.option("--lo", type=float, default=0.85, show_default=True)
@click.option("--hi", type=float, default=1.0, show_default=True)
@click.option("--step", type=float, default=0.005, show_default=True)
@click.option("--out", default=None, help="Report JSON (default: stdout).")
@click.option("--csv", "csv_path", default=None, help="Also write points as CSV.")
def analyze_precision(labels_path, lo, hi, step, out, csv_path):
    """Precision vs. similarity threshold over labeled pairs."""
    labels = analysis_mod.load_labels(labels_path)
    curve = analysis_mod.precision_curve(labels, analysis_mod.default_thresholds(lo, hi, step))
    _write_json(curve.as_dict(), out)
    if csv_path:
        _write_csv(
            csv_path,
            ["threshold", "precision", "support"],
            [[p.threshold, "" if p.precision is None else p.precision, p.support] for p in curve.points],
        )


@analyze.command("hist")
@click.option("--corpus", required=True)
@click.option("--bins", type=int, default=100, show_default=True)
@click.option("--topk", type=int, default=3, show_default=True, help="Nearest neighbors pooled per object.")
@click.option("--lo", type=float, default=0.93, show_default=True, help="Reported band lower bound.")
@click.option("--hi", type=float, default=0.975, show_default=True, help="Reported band upper bound.")
@click.option("--out", default=None)
@click.option("--csv", "csv_path", default=None, help="Also write bins as CSV.")
@click.pass_obj
def analyze_hist(run: RunContext, corpus, bins, topk, lo, hi, out, csv_path):
    """Distribution of raw top-k similarities (before band filtering)."""
    _, kept, aligned = _load_aligned(corpus)
    idx = build_exact(aligned, IndexConfig(seed=run.seed))
    sims = analysis_mod.topk_similarities(idx, kept, k=topk)
    hist = analysis_mod.similarity_histogram(sims, bins, SimilarityBand(lo, hi))
    _write_json(hist.as_dict(), out)
    if csv_path:
        _write_csv(
            csv_path,
            ["bin_lo", "bin_hi", "count"],
            [
                [hist.bin_edges[i], hist.bin_edges[i + 1], c]
                for i, c in enumerate(hist.counts)
            ],
        )


@analyze.command("scaling")
@click.option("--corpus", required=True)
@click.option("--fractions", default="0.25,0.5,1.0", show_default=True, help="Comma-separated subset fractions.")
@click.option("--lo", type=float, default=0.93, show_default=True)
@click.option("--hi", type=float, default=0.975, show_default=True)
@click.option("--kmax", type=int, default=5, show_default=True)
@click.option("--out", default=None)
@click.option("--csv", "csv_path", default=None, help="Also write points as CSV.")
@click.pass_obj
def analyze_scaling(run: RunContext, corpus, fractions, lo, hi, kmax, out, csv_path):
    """Recurrence rate on random subsets of the corpus."""
    _, kept, aligned = _load_aligned(corpus)
    fracs = [float(f) for f in fractions.split(",") if f]
    curve = analysis_mod.scaling_curve(
        aligned, kept, fracs, seed=run.seed, band=SimilarityBand(lo, hi), k_max=kmax
    )
    _write_json(curve.as_dict(), out)
    if csv_path:
        _write_csv(
            csv_path,
            ["fraction", "size", "count_ge1", "count_ge3", "pct_ge1", "pct_ge3"],
            [
                [p.fraction, p.size, p.count_ge1, p.count_ge3, p.pct_ge1, p.pct_ge3]
                for p in curve.points
            ],
        )


@analyze.command("breakdown")
@click.option("--corpus", required=True)
@click.option("--graph", "graph_path", required=True, help="neighbors.jsonl")
@click.option("--out", default=None)
@click.option("--csv", "csv_path", default=None, help="Also write rows as CSV.")
def analyze_breakdown(corpus, graph_path, out, csv_path):
    """Per-class share of objects with >= 3 retained neighbors."""
    _, kept, _ = _load_aligned(corpus)
    g = load_graph(graph_path)
    breakdown = analysis_mod.class_breakdown(g, kept)
    _write_json(breakdown.as_dict(), out)
    if csv_path:
        _write_csv(
            csv_path,
            ["class", "num_objects", "num_with_ge3", "percentage"],
            [
                [label, row.num_objects, row.num_with_ge3, row.percentage]
                for label, row in sorted(breakdown.rows.items())
            ],
        )


@analyze.command("stats")
@click.option("--corpus", required=True)
@click.option("--graph", "graph_path", required=True, help="neighbors.jsonl")
@click.option("--out", default=None)
def analyze_stats(corpus, graph_path, out):
    """Corpus recurrence counts and percentages."""
    _, kept, _ = _load_aligned(corpus)
    g = load_graph(graph_path)
    stats = degree_stats(g, kept)
    _write_json(stats.as_dict(), out)


# ---------------------------------------------------------------- dataset


@cli.group()
def dataset():
    """Assemble and emit training examples."""


@dataset.command("emit")
@click.option("--task", type=click.Choice(["insertion", "subject"]), required=True)
@click.option("--corpus", required=True)
@click.option("--graph", "graph_path", required=True, help="neighbors.jsonl")
@click.option("--lo", type=float, default=0.93, show_default=True, help="Band the graph was built with.")
@click.option("--hi", type=float, default=0.975, show_default=True)
@click.option("--backgrounds", default=None, help="Sidecar dir of removal-model outputs, keyed by target id.")
@click.option("--captions", default=None, help="Sidecar dir of caption .txt files, keyed by target id.")
@click.option("--grids", type=click.Choice(["auto", "on", "off"]), default="auto", show_default=True)
@click.option("--out", required=True, help="Output directory.")
def dataset_emit(task, corpus, graph_path, lo, hi, backgrounds, captions, grids, out):
    """Write examples.jsonl, grid PNGs, and the training manifest."""
    base, kept, _ = _load_aligned(corpus)
    task_name = dataset_mod.TASK_INSERTION if task == "insertion" else dataset_mod.TASK_SUBJECT_GEN
    g = load_graph(graph_path, SimilarityBand(lo, hi))
    counters: dict = {}
    path = dataset_mod.emit_dataset(
        g,
        kept,
        task_name,
        out,
        corpus_root=base,
        backgrounds_dir=backgrounds,
        captions_dir=captions,
        grids=grids,
        counters=counters,
    )
    log.info(
        "emitted %d examples (%d skipped, %d grids) -> %s",
        counters.get("emitted", 0),
        counters.get("skipped", 0),
        counters.get("grids_written", 0),
        path,
    )


# ---------------------------------------------------------------- eval


@cli.group(name="eval")
def eval_group():
    """Identity scoring, metric agreement, and the quadruplet benchmark."""


@eval_group.command("identity")
@click.option("--gen", "gen_path", required=True, help="OMFV embeddings of generated crops.")
@click.option("--ref", "ref_path", required=True, help="OMFV embeddings of reference crops (row-aligned).")
@click.option("--out", default=None)
def eval_identity(gen_path, ref_path, out):
    """Cosine identity score of each row-aligned embedding pair."""
    from .feature_store import load_features

    gen = load_features(gen_path)
    ref = load_features(ref_path)
    if gen.count != ref.count or gen.dim != ref.dim:
        raise ValidationError(
            f"embedding files disagree: {gen.count}x{gen.dim} vs {ref.count}x{ref.dim}"
        )
    scores = [
        eval_mod.identity_score(gen.row(i), ref.row(i), f"{gen_path}#{i}", f"{ref_path}#{i}").value
        for i in range(gen.count)
    ]
    _write_json({"scores": scores, "mean": sum(scores) / len(scores)}, out)


@eval_group.command("agreement")
@click.option("--triplets", "triplets_path", required=True, help="JSONL of {ref, gen1, gen2, choice} row indexes.")
@click.option("--embeddings", "emb_path", required=True, help="OMFV file the row indexes point into.")
@click.option("--out", default=None)
def eval_agreement(triplets_path, emb_path, out):
    """Accuracy of the cosine metric at predicting human choices."""
    from .feature_store import load_features

    matrix = load_features(emb_path)
    triplets = []
    with open(triplets_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{triplets_path}: line {lineno}: invalid JSON: {exc}") from exc
            triplets.append(
                eval_mod.AgreementTriplet(
                    ref=matrix.row(int(obj["ref"])),
                    gen1=matrix.row(int(obj["gen1"])),
                    gen2=matrix.row(int(obj["gen2"])),
                    user_choice=int(obj["choice"]),
                )
            )
    accuracy = eval_mod.metric_agreement(triplets)
    _write_json({"triplets": len(triplets), "accuracy": accuracy}, out)


@eval_group.command("benchmark")
@click.option("--quadruplets", "quads_path", required=True, help="benchmark.jsonl")
@click.option("--outputs", required=True, help="Directory of <sample_id>.png model outputs.")
@click.option("--semantic", "semantic_specs", multiple=True, help="NAME=gen.bin:gen_ids.json:gt.bin:gt_ids.json (repeatable).")
@click.option("--identity", "identity_spec", default=None, help="gen.bin:gen_ids.json:ref.bin:ref_ids.json")
@click.option("--out", default=None, help="Report JSON path.")
@click.option("--csv", "csv_path", default=None)
def eval_benchmark(quads_path, outputs, semantic_specs, identity_spec, out, csv_path):
    """Expand quadruplets and score model outputs against ground truth."""
    quads = eval_mod.load_quadruplets(quads_path)
    samples = eval_mod.expand_quadruplets(quads)

    def parse_four(spec: str):
        parts = spec.split(":")
        if len(parts) != 4:
            raise ValidationError(f"expected four ':'-separated paths, got {spec!r}")
        return (
            eval_mod.load_embedding_map(parts[0], parts[1]),
            eval_mod.load_embedding_map(parts[2], parts[3]),
        )

    semantic_sets = {}
    for spec in semantic_specs:
        if "=" not in spec:
            raise ValidationError(f"--semantic needs NAME=paths, got {spec!r}")
        name, paths = spec.split("=", 1)
        semantic_sets[name] = parse_four(paths)
    identity_gen = identity_ref = None
    if identity_spec:
        identity_gen, identity_ref = parse_four(identity_spec)
    report = eval_mod.benchmark_report(samples, outputs, semantic_sets, identity_gen, identity_ref)
    _write_json(report.as_dict(), out)
    if csv_path:
        report.write_csv(csv_path)
        log.info("wrote %s", csv_path)


# ---------------------------------------------------------------- label


@cli.group()
def label():
    """Human threshold-calibration labeling service."""


@label.command("serve")
@click.option("--graph", "graph_path", required=True, help="neighbors.jsonl to sample pairs from.")
@click.option("--corpus", required=True, help="manifest.json (for crop rendering).")
@click.option("--port", type=int, default=7341, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--n", type=int, default=label_mod.DEFAULT_SAMPLE_N, show_default=True, help="Pairs sampled into the session.")
@click.option("--lo", type=float, default=label_mod.DEFAULT_RANGE[0], show_default=True, help="Sampling range lower bound.")
@click.option("--hi", type=float, default=label_mod.DEFAULT_RANGE[1], show_default=True)
@click.option("--session", "session_id", default="default", show_default=True)
@click.option("--state", "state_dir", default="label-state", show_default=True, help="Session persistence directory.")
@click.option("--ui", "ui_dir", default=None, help="Static frontend directory to serve at /.")
@click.pass_obj
def label_serve(run: RunContext, graph_path, corpus, port, host, n, lo, hi, session_id, state_dir, ui_dir):
    """Serve the labeling API (and UI) for one session; resumes if present."""
    import uvicorn

    manifest_path = Path(corpus)
    manifest, records, _ = load_corpus(manifest_path)
    g = load_graph(graph_path)
    session_dir = Path(state_dir) / session_id
    if (session_dir / "session.json").exists():
        session = label_mod.load_session(session_dir)
        log.info(
            "resumed session %s: %d/%d labeled",
            session_id,
            len(session.labels),
            len(session.pairs),
        )
    else:
        session = label_mod.create_session(
            g, n=n, seed=run.seed, range_lo=lo, range_hi=hi,
            session_id=session_id, state_dir=session_dir,
        )
        log.info("created session %s with %d pairs (seed %d)", session_id, n, run.seed)
    app = label_mod.build_app(
        {session_id: session},
        records=records,
        corpus_root=manifest_path.parent,
        ui_dir=ui_dir,
    )
    uvicorn.run(app, host=host, port=port, log_level="warning")


# ---------------------------------------------------------------- pipeline


@cli.command(name="pipeline_all")
@click.option("--corpus", required=True, help="Path to manifest.json.")
@click.option("--out", required=True, help="Artifact directory.")
@click.option("--task", type=click.Choice(["insertion", "subject"]), default="insertion", show_default=True)
@click.option("--mode", type=click.Choice([MODE_EXACT, MODE_PARTITIONED]), default=MODE_EXACT, show_default=True)
@click.option("--partitions", type=int, default=None)
@click.option("--probes", type=int, default=None)
@click.option("--lo", type=float, default=0.93, show_default=True)
@click.option("--hi", type=float, default=0.975, show_default=True)
@click.option("--kmax", type=int, default=5, show_default=True)
@click.option("--searchk", type=int, default=DEFAULT_SEARCH_K, show_default=True)
@click.option("--backgrounds", default=None)
@click.option("--captions", default=None)
@click.option("--grids", type=click.Choice(["auto", "on", "off"]), default="auto", show_default=True)
@click.pass_obj
def pipeline_all_cmd(run: RunContext, corpus, out, task, mode, partitions, probes, lo, hi, kmax, searchk, backgrounds, captions, grids):
    """Run index -> graph -> stats -> dataset with shared seed and caching."""
    config = PipelineConfig(
        corpus_manifest=Path(corpus),
        out_dir=Path(out),
        task=dataset_mod.TASK_INSERTION if task == "insertion" else dataset_mod.TASK_SUBJECT_GEN,
        band=SimilarityBand(lo, hi),
        k_max=kmax,
        search_k=searchk,
        mode=mode,
        num_partitions=partitions,
        probes=probes,
        seed=run.seed,
        threads=run.threads,
        grids=grids,
        backgrounds_dir=Path(backgrounds) if backgrounds else None,
        captions_dir=Path(captions) if captions else None,
    )
    artifacts = pipeline_all(config)
    for name, path in artifacts.items():
        log.info("artifact %s: %s", name, path)


def run(argv=None) -> int:
    """Invoke the CLI; returns the exit code instead of raising SystemExit."""
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.UsageError as exc:
        exc.show(file=sys.stderr)
        return 1
    except click.ClickException as exc:
        exc.show(file=sys.stderr)
        return 1
    except ValidationError as exc:
        log.error("%s", exc)
        return 1
    except FormatError as exc:
        log.error("%s", exc)
        return 2
    except OSError as exc:
        log.error("%s", exc)
        return 2
    except KeyboardInterrupt:
        log.error("interrupted")
        return 130
    except ForgeError as exc:
        log.error("%s", exc)
        return 3
    except Exception:
        log.exception("internal error")
        return 3
    return 0


def entrypoint():
    sys.exit(run())


if __name__ == "__main__":
    entrypoint()
