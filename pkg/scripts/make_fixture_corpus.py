#!/usr/bin/env python3
"""Generate a synthetic corpus with planted recurrence structure.

Flavors:
  groups   -- G groups of S objects whose within-group cosine is controlled;
              a share of groups can be planted above the near-duplicate
              cutoff or below the band to exercise filtering.
  pairs    -- partner pairs (2 objects each) at a fixed similarity, the
              construction behind the subsample-scaling analysis.

Writes objects.jsonl / features.bin / manifest.json plus images and
background/caption sidecars, ready for `forge pipeline_all` or
`forge label serve`.
"""

import sys
from pathlib import Path

import click

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from recurforge.feature_store import normalize
from recurforge.graph import SimilarityBand, build_graph
from recurforge.knn_index import build_exact
from recurforge.synthetic import partner_pairs, planted_groups, records_for, write_corpus


@click.command()
@click.option("--out", required=True, help="Corpus directory to create.")
@click.option("--flavor", type=click.Choice(["groups", "pairs"]), default="groups", show_default=True)
@click.option("--groups", "num_groups", type=int, default=40, show_default=True)
@click.option("--group-size", type=int, default=4, show_default=True)
@click.option("--pairs", "num_pairs", type=int, default=500, show_default=True)
@click.option("--dim", type=int, default=64, show_default=True)
@click.option("--sim", type=float, default=0.95, show_default=True, help="Within-group cosine.")
@click.option("--dup-share", type=float, default=0.0, show_default=True, help="Share of groups planted at 0.985 (above the band).")
@click.option("--far-share", type=float, default=0.0, show_default=True, help="Share of groups planted at 0.85 (below the band).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--images/--no-images", default=True, show_default=True)
@click.option("--sidecars/--no-sidecars", default=True, show_default=True, help="Background and caption sidecars.")
@click.option("--wide-graph", is_flag=True, help="Also write neighbors-wide.jsonl (band [0.85, 1.0]) for labeling sessions.")
def main(out, flavor, num_groups, group_size, num_pairs, dim, sim, dup_share, far_share, seed, images, sidecars, wide_graph):
    out = Path(out)
    if flavor == "groups":
        n_dup = int(dup_share * num_groups)
        n_far = int(far_share * num_groups)
        sims = [sim] * (num_groups - n_dup - n_far) + [0.985] * n_dup + [0.85] * n_far
        matrix, group_of = planted_groups(num_groups, group_size, dim, sims, seed)
        records = records_for(matrix, group_of, seed=seed)
    else:
        matrix = partner_pairs(num_pairs, dim, sim, seed)
        records = records_for(matrix, seed=seed)
    manifest = write_corpus(
        out, matrix, records,
        with_images=images,
        with_backgrounds=images and sidecars,
        with_captions=sidecars,
        seed=seed,
    )
    click.echo(f"corpus: {manifest} ({matrix.count} objects, dim {matrix.dim})")
    if wide_graph:
        graph = build_graph(
            build_exact(normalize(matrix)), records, SimilarityBand(0.85, 1.0), k_max=5
        )
        graph_path = out / "neighbors-wide.jsonl"
        graph.save_jsonl(graph_path)
        click.echo(f"wide graph: {graph_path} ({graph.num_edges()} edges)")


if __name__ == "__main__":
    main()
