#!/usr/bin/env python3
"""End-to-end demo on a synthetic corpus: build it, run every pipeline
stage, and print the recurrence analyses a real corpus run would produce.
"""

import json
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from recurforge.analysis import (
    class_breakdown,
    scaling_curve,
    similarity_histogram,
    topk_similarities,
)
from recurforge.cli import run
from recurforge.feature_store import aligned_features, filter_by_confidence, load_corpus, normalize
from recurforge.graph import SimilarityBand, load_graph
from recurforge.knn_index import build_exact
from recurforge.synthetic import planted_groups, records_for, write_corpus


def main():
    workdir = Path(tempfile.mkdtemp(prefix="forge-demo-"))
    print(f"working in {workdir}")

    # 30 in-band groups, 6 near-duplicate groups, 4 far groups
    sims = [0.95] * 30 + [0.985] * 6 + [0.85] * 4
    matrix, group_of = planted_groups(40, 4, dim=64, pair_sim=sims, seed=1)
    records = records_for(matrix, group_of, seed=1)
    manifest = write_corpus(
        workdir / "corpus", matrix, records,
        with_images=True, with_backgrounds=True, seed=1,
    )

    code = run([
        "--seed", "1", "pipeline_all",
        "--corpus", str(manifest),
        "--out", str(workdir / "out"),
        "--backgrounds", str(workdir / "corpus" / "backgrounds"),
    ])
    if code != 0:
        sys.exit(code)

    stats = json.loads((workdir / "out" / "stats.json").read_text())
    print("\nrecurrence stats:", json.dumps(stats, indent=2))

    _, all_records, raw = load_corpus(manifest)
    kept = filter_by_confidence(all_records)
    aligned = normalize(aligned_features(kept, raw))
    index = build_exact(aligned)

    hist = similarity_histogram(topk_similarities(index, kept), bins=40)
    print(f"\ntop-3 similarity mass inside the band: {hist.band_fraction:.1%}")

    graph = load_graph(workdir / "out" / "neighbors.jsonl", SimilarityBand())
    breakdown = class_breakdown(graph, kept)
    print("\nper-class recurrence (>=3 retained neighbors):")
    for label, row in sorted(breakdown.rows.items()):
        print(f"  {label:10s} {row.num_with_ge3:3d}/{row.num_objects:3d}  {row.percentage:5.1f}%")

    curve = scaling_curve(aligned, kept, [0.25, 0.5, 1.0], seed=1)
    print("\nrecurrence vs corpus scale:")
    for p in curve.points:
        print(f"  {p.fraction:4.2f} of corpus ({p.size:4d} objects): ge3 {p.pct_ge3:5.1f}%  ge1 {p.pct_ge1:5.1f}%")

    examples = (workdir / "out" / "examples.jsonl").read_text().splitlines()
    print(f"\ntraining examples emitted: {len(examples)}")
    print(f"first example: {examples[0][:160]}...")


if __name__ == "__main__":
    main()
