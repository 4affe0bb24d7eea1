#!/usr/bin/env python3
"""Quality/cost curve of hashed retrieval.

Trains one cross-attention scorer and one self-attention index model on a
generated benchmark, then sweeps the per-table bit width for trained codes
and for random hyperplanes, reporting NDCG@10, MAP, and the comparison
reduction at every operating point next to the exhaustive reference.
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from seqret.datagen import GenConfig, make_benchmark
from seqret.hashing import HashConfig, build_index
from seqret.retrieval import (PipelineConfig, build_pipeline,
                              corpus_fisher_vectors, evaluate_protocol)
from seqret.sequences import split_queries
from seqret.trainer import TrainConfig, train


def ranking_config(variant, seed, marks):
    return TrainConfig(variant=variant, dim=16, mark_count=marks, n_max=24,
                       unwarp_hidden=(16, 16), n_quad=24, noise_sigma=0.01,
                       unbias_sigma=3.0, l2=1e-3, negatives_per_query=24,
                       pairs_per_query=24, batch_queries=8, epochs=4,
                       learning_rate=0.02, eval_negatives=50, seed=seed)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__, allow_abbrev=False)
    parser.add_argument("--bases", type=int, default=30)
    parser.add_argument("--marks", type=int, default=5)
    parser.add_argument("--gen-seed", type=int, default=20260814)
    parser.add_argument("--train-seed", type=int, default=0)
    parser.add_argument("--hash-seed", type=int, default=0)
    parser.add_argument("--widths", default="4,5,6,7,8",
                        help="bits per table, comma separated")
    parser.add_argument("--pool-negatives", type=int, default=50)
    parser.add_argument("--out", help="optional TSV path for the result table")
    args = parser.parse_args(argv)

    bench = make_benchmark(GenConfig(n_bases=args.bases, subs_range=(20, 31),
                                     window_range=(10, 20), mark_count=args.marks,
                                     warp="affine", warp_range=(1.25, 2.0),
                                     seed=args.gen_seed))
    split = split_queries(sorted(bench.queries), (0.4, 0.1, 0.5), seed=0)

    t0 = time.monotonic()
    score = train(bench.corpus, bench.queries, bench.judgments,
                  ranking_config("cross", args.train_seed, args.marks),
                  split.train, split.valid)
    index = train(bench.corpus, bench.queries, bench.judgments,
                  ranking_config("self", args.train_seed, args.marks),
                  split.train, split.valid)
    vectors, excluded = corpus_fisher_vectors(bench.corpus, index.params)
    print(f"trained both models and embedded {len(vectors)} sequences "
          f"({len(excluded)} excluded) in {time.monotonic() - t0:.0f}s",
          file=sys.stderr)

    widths = [int(w) for w in args.widths.split(",")]

    def build(kind):
        hash_config = HashConfig(n_bits=16, hidden=64, epochs=400,
                                 learning_rate=0.01, etas=(0.4, 0.3, 0.3),
                                 tables=10, bits_per_table=widths[0],
                                 seed=args.hash_seed)
        return build_pipeline(bench.corpus, score.params, score.unwarp,
                              index.params, index.unwarp,
                              PipelineConfig(hash=hash_config,
                                             encoder_kind=kind),
                              vectors=vectors)

    def protocol(pipeline, exhaustive=False):
        report, _ = evaluate_protocol(pipeline, bench.queries, bench.judgments,
                                      split.test,
                                      pool_negatives=args.pool_negatives,
                                      seed=77, k_values=(10,),
                                      exhaustive=exhaustive)
        return report

    rows = []
    pipelines = {kind: build(kind) for kind in ("trained", "random")}
    exhaustive = protocol(pipelines["trained"], exhaustive=True)
    rows.append(("exhaustive", "-", f"{exhaustive.ndcg[10]:.4f}",
                 f"{exhaustive.map:.4f}", f"{exhaustive.reduction:.4f}"))
    for kind, pipeline in pipelines.items():
        # One encoder per kind; only the bucket tables change with the width.
        codes = {cid: pipeline.encoder.encode(vec)
                 for cid, vec in pipeline.vectors.items()}
        for width in widths:
            t1 = time.monotonic()
            pipeline.index = build_index(codes, pipeline.config.hash.tables,
                                         width, args.hash_seed)
            report = protocol(pipeline)
            rows.append((kind, str(width), f"{report.ndcg[10]:.4f}",
                         f"{report.map:.4f}", f"{report.reduction:.4f}"))
            print(f"{kind} width={width}: ndcg@10={report.ndcg[10]:.4f} "
                  f"reduction={report.reduction:.4f} "
                  f"({time.monotonic() - t1:.0f}s)", file=sys.stderr)

    lines = ["encoder\tbits_per_table\tndcg@10\tmap\treduction"]
    lines += ["\t".join(row) for row in rows]
    table = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(table)
    sys.stdout.write(table)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
