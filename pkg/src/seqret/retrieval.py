"""Ranking, quality metrics, and the hash-accelerated retrieval pipeline.

The pipeline holds two models: the scoring model (usually the cross
variant) that produces the final relevance ranking, and an index model
(self variant) whose gradient vectors feed the hash codes.  Corpus
vectors are always taken from the raw corpus sequences; only the query
side passes through the unwarp.
"""

from __future__ import annotations

import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .hashing import (
    HashConfig,
    HashEncoder,
    HashIndex,
    HashNetParams,
    build_index,
    candidate_lookup,
    random_hyperplane_codes,
    train_hash_net,
)
from .mtpp import ModelParams
from .relevance import (
    FisherConfig,
    VanishingGradientError,
    fisher_vector,
    mark_distance,
    time_distance,
)
from .sequences import EventSequence, RelevanceJudgments
from .unwarp import UnwarpParams, unwarp_sequence

__all__ = [
    "average_precision",
    "reciprocal_rank",
    "ndcg_at_k",
    "mean_metric",
    "rank_by_score",
    "score_candidates",
    "corpus_fisher_vectors",
    "PipelineConfig",
    "Pipeline",
    "RankedResult",
    "EvalReport",
    "build_pipeline",
    "query_topk",
    "evaluate_protocol",
    "write_results",
    "write_report",
    "save_vectors",
    "load_vectors",
]

_VECTOR_MAGIC = b"SEQRVEC1"


# -- quality metrics ----------------------------------------------------------

def average_precision(ranked_ids, relevant) -> float:
    """AP with the full judged-relevant count in the denominator.

    Relevant items missing from ``ranked_ids`` (for example positives the
    hash index failed to surface) therefore lower the score; a ranking
    cannot gain by silently dropping hard positives.
    """
    relevant = set(relevant)
    if not relevant:
        raise ValueError("average precision needs at least one relevant id")
    hits = 0
    total = 0.0
    for rank, cid in enumerate(ranked_ids, start=1):
        if cid in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def reciprocal_rank(ranked_ids, relevant) -> float:
    relevant = set(relevant)
    for rank, cid in enumerate(ranked_ids, start=1):
        if cid in relevant:
            return 1.0 / rank
    return 0.0


def ndcg_at_k(ranked_ids, relevant, k: int) -> float:
    """Binary-gain NDCG against the truncated ideal ranking.

    The ideal DCG places min(k, #relevant) hits at the top, so the value
    is 1.0 exactly when every rank up to that point is a hit.
    """
    if k < 1:
        raise ValueError("k must be positive")
    relevant = set(relevant)
    if not relevant:
        raise ValueError("ndcg needs at least one relevant id")
    dcg = sum(1.0 / np.log2(rank + 1)
              for rank, cid in enumerate(ranked_ids[:k], start=1) if cid in relevant)
    ideal = sum(1.0 / np.log2(rank + 1) for rank in range(1, min(k, len(relevant)) + 1))
    return dcg / ideal


def mean_metric(per_query: dict[str, float]) -> float:
    if not per_query:
        raise ValueError("no per-query values to average")
    return float(np.mean(list(per_query.values())))


def rank_by_score(scores: dict[str, float]) -> list[tuple[str, float]]:
    """Descending score; exact ties break toward the smaller corpus id."""
    return sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))


# -- scoring ------------------------------------------------------------------

def score_candidates(query: EventSequence, candidates, params: ModelParams,
                     unwarp: UnwarpParams, fisher: FisherConfig | None = None,
                     gamma: float = 0.1,
                     vector_cache: dict | None = None) -> dict[str, float]:
    """Relevance scores of one query against a list of corpus sequences.

    The query side (unwarp, gradient vector) is computed once.  Under the
    self variant, corpus vectors do not depend on the query and may be
    shared across calls through ``vector_cache``.  Candidates whose
    gradient vanishes are skipped with a warning rather than scored.
    """
    fisher = fisher or FisherConfig()
    uq = unwarp_sequence(query, unwarp)
    cross = params.config.variant == "cross"
    vq = fisher_vector(uq, params, conditioning=uq if cross else None, config=fisher)
    scores: dict[str, float] = {}
    for c in candidates:
        try:
            if cross:
                vc = fisher_vector(c, params, conditioning=uq, config=fisher)
            elif vector_cache is not None and c.id in vector_cache:
                vc = vector_cache[c.id]
            else:
                vc = fisher_vector(c, params, config=fisher)
                if vector_cache is not None:
                    vector_cache[c.id] = vc
        except VanishingGradientError:
            warnings.warn(f"skipping {c.id}: vanishing gradient under the scoring model")
            continue
        T = max(uq.horizon, c.horizon)
        sim = -(time_distance(uq, c, T) + mark_distance(query, c))
        scores[c.id] = float(vq.vector @ vc.vector) + gamma * sim
    return scores


def corpus_fisher_vectors(corpus: dict[str, EventSequence], params: ModelParams,
                          fisher: FisherConfig | None = None,
                          threads: int = 1) -> tuple[dict[str, np.ndarray], list[str]]:
    """Self-variant gradient vectors for every corpus sequence.

    Returns (vectors, excluded); sequences whose gradient vanishes are
    excluded from indexing and reported, not silently dropped.
    """
    fisher = fisher or FisherConfig()
    ids = list(corpus)

    def one(cid: str):
        try:
            return cid, fisher_vector(corpus[cid], params, config=fisher).vector
        except VanishingGradientError:
            return cid, None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, ids))
    else:
        rows = [one(cid) for cid in ids]
    vectors = {cid: vec for cid, vec in rows if vec is not None}
    excluded = [cid for cid, vec in rows if vec is None]
    for cid in excluded:
        warnings.warn(f"excluding {cid} from the index: vanishing gradient")
    return vectors, excluded


# -- pipeline -----------------------------------------------------------------

@dataclass
class PipelineConfig:
    """Knobs shared by indexing and querying."""

    gamma: float = 0.1
    fisher: FisherConfig = field(default_factory=FisherConfig)
    hash: HashConfig = field(default_factory=HashConfig)
    encoder_kind: str = "trained"
    threads: int = 1

    def __post_init__(self) -> None:
        if self.encoder_kind not in ("trained", "random"):
            raise ValueError(f"unknown encoder kind {self.encoder_kind!r}")
        if self.threads < 1:
            raise ValueError("threads must be positive")


@dataclass
class Pipeline:
    corpus: dict[str, EventSequence]
    score_params: ModelParams
    score_unwarp: UnwarpParams
    index_params: ModelParams
    index_unwarp: UnwarpParams
    encoder: HashEncoder
    index: HashIndex
    vectors: dict[str, np.ndarray]
    excluded: list[str]
    config: PipelineConfig


@dataclass
class RankedResult:
    query_id: str
    ranking: list[tuple[str, float]]  # (corpus id, score), best first
    mode: str  # "hashed" or "exhaustive"
    comparisons: int  # corpus sequences the scorer visited
    fallback: bool = False  # hashed lookup was empty, fell back to full scan


def build_pipeline(corpus: dict[str, EventSequence], score_params: ModelParams,
                   score_unwarp: UnwarpParams, index_params: ModelParams,
                   index_unwarp: UnwarpParams, config: PipelineConfig,
                   vectors: dict[str, np.ndarray] | None = None) -> Pipeline:
    """Extract corpus vectors, fit (or draw) the code encoder, build buckets.

    ``vectors`` short-circuits the extraction when the caller already has
    them (rebuilding an index with different hash settings, for example).
    The hash seed feeds the net init, the hyperplanes, and the bit-position
    draw through separate spawned streams.
    """
    if index_params.config.variant != "self":
        raise ValueError("index model must be the self variant")
    if vectors is None:
        vectors, excluded = corpus_fisher_vectors(corpus, index_params,
                                                  config.fisher, config.threads)
    else:
        excluded = [cid for cid in corpus if cid not in vectors]
    if not vectors:
        raise ValueError("no corpus sequence produced a usable gradient vector")
    ids = sorted(vectors)
    matrix = np.stack([vectors[cid] for cid in ids])
    net_seed, plane_seed, index_seed = (
        int(s.generate_state(1)[0]) for s in np.random.SeedSequence(config.hash.seed).spawn(3))
    if config.encoder_kind == "trained":
        psi, _ = train_hash_net(matrix, replace(config.hash, seed=net_seed))
        encoder = HashEncoder(kind="trained", psi=psi)
    else:
        _, planes = random_hyperplane_codes(matrix, config.hash.n_bits, plane_seed)
        encoder = HashEncoder(kind="random", hyperplanes=planes)
    codes = {cid: encoder.encode(vectors[cid]) for cid in ids}
    index = build_index(codes, config.hash.tables, config.hash.bits_per_table, index_seed)
    scoreable = {cid: seq for cid, seq in corpus.items() if cid in vectors}
    return Pipeline(corpus=scoreable, score_params=score_params,
                    score_unwarp=score_unwarp, index_params=index_params,
                    index_unwarp=index_unwarp, encoder=encoder, index=index,
                    vectors=vectors, excluded=excluded, config=config)


def _query_candidates(pipeline: Pipeline, query: EventSequence) -> tuple[list[str], bool]:
    uq = unwarp_sequence(query, pipeline.index_unwarp)
    vq = fisher_vector(uq, pipeline.index_params, config=pipeline.config.fisher)
    code = pipeline.encoder.encode(vq.vector)
    candidates = candidate_lookup(pipeline.index, code)
    if candidates:
        return candidates, False
    return sorted(pipeline.corpus), True


def query_topk(pipeline: Pipeline, query: EventSequence, k: int = 10,
               exhaustive: bool = False,
               restrict_to: set[str] | None = None) -> RankedResult:
    """Rank the query's hash candidates (or the whole corpus) by relevance.

    ``restrict_to`` limits scoring to a candidate subset without changing
    the comparison count; the evaluation protocol uses it to score only
    pooled pairs while still charging the full candidate set.
    """
    if exhaustive:
        candidates, fallback = sorted(pipeline.corpus), False
    else:
        candidates, fallback = _query_candidates(pipeline, query)
    comparisons = len(candidates)
    if restrict_to is not None:
        candidates = [cid for cid in candidates if cid in restrict_to]
    scores = score_candidates(query, [pipeline.corpus[cid] for cid in candidates],
                              pipeline.score_params, pipeline.score_unwarp,
                              pipeline.config.fisher, pipeline.config.gamma)
    return RankedResult(query_id=query.id, ranking=rank_by_score(scores)[:k],
                        mode="exhaustive" if exhaustive else "hashed",
                        comparisons=comparisons, fallback=fallback)


# -- evaluation protocol -------------------------------------------------------

@dataclass
class EvalReport:
    mode: str
    n_queries: int
    map: float
    mrr: float
    ndcg: dict[int, float]
    reduction: float
    comparisons: int
    total_pairs: int
    fallbacks: int
    skipped: list[str]
    per_query_ap: dict[str, float]

    def rows(self) -> list[tuple[str, str]]:
        out = [("mode", self.mode), ("queries", str(self.n_queries)),
               ("map", f"{self.map:.12g}"), ("mrr", f"{self.mrr:.12g}")]
        for k in sorted(self.ndcg):
            out.append((f"ndcg@{k}", f"{self.ndcg[k]:.12g}"))
        out += [("reduction", f"{self.reduction:.12g}"),
                ("comparisons", str(self.comparisons)),
                ("total_pairs", str(self.total_pairs)),
                ("fallbacks", str(self.fallbacks)),
                ("skipped", ",".join(self.skipped) or "-")]
        return out


def evaluate_protocol(pipeline: Pipeline, queries: dict[str, EventSequence],
                      judgments: RelevanceJudgments, query_ids,
                      pool_negatives: int = 100, seed: int = 0,
                      k_values: tuple[int, ...] = (10, 20),
                      exhaustive: bool = False) -> tuple[EvalReport, list[RankedResult]]:
    """Pooled evaluation: judged positives plus sampled negatives per query.

    Quality metrics are computed on the pool; every positive missing from
    the hash candidates stays in the metric denominators.  The comparison
    count charges the full candidate set (or the full corpus when
    exhaustive), since that is what a deployment would score.
    """
    rng = np.random.default_rng(seed)
    per_ap: dict[str, float] = {}
    per_rr: dict[str, float] = {}
    per_ndcg: dict[int, dict[str, float]] = {k: {} for k in k_values}
    skipped: list[str] = []
    results: list[RankedResult] = []
    comparisons = 0
    fallbacks = 0
    n_scored = 0
    corpus_ids = sorted(pipeline.corpus)
    for qid in sorted(query_ids):
        positives = [p for p in judgments.positives(qid) if p in pipeline.corpus]
        if not positives:
            skipped.append(qid)
            continue
        pos_set = set(positives)
        negatives = [cid for cid in corpus_ids if cid not in pos_set]
        n_neg = min(pool_negatives, len(negatives))
        drawn = rng.choice(len(negatives), size=n_neg, replace=False)
        pool = set(positives) | {negatives[i] for i in sorted(drawn)}
        result = query_topk(pipeline, queries[qid], k=len(pool),
                            exhaustive=exhaustive, restrict_to=pool)
        ranked_ids = [cid for cid, _ in result.ranking]
        per_ap[qid] = average_precision(ranked_ids, pos_set)
        per_rr[qid] = reciprocal_rank(ranked_ids, pos_set)
        for k in k_values:
            per_ndcg[k][qid] = ndcg_at_k(ranked_ids, pos_set, k)
        comparisons += result.comparisons
        fallbacks += int(result.fallback)
        n_scored += 1
        results.append(result)
    if not per_ap:
        raise ValueError("no evaluable query had scoreable positives")
    total_pairs = len(pipeline.corpus) * n_scored
    report = EvalReport(
        mode="exhaustive" if exhaustive else "hashed",
        n_queries=n_scored,
        map=mean_metric(per_ap),
        mrr=mean_metric(per_rr),
        ndcg={k: mean_metric(v) for k, v in per_ndcg.items()},
        reduction=1.0 - comparisons / total_pairs,
        comparisons=comparisons,
        total_pairs=total_pairs,
        fallbacks=fallbacks,
        skipped=skipped,
        per_query_ap=per_ap,
    )
    return report, results


# -- persistence ----------------------------------------------------------------

def write_results(path, results) -> None:
    """Tab-separated rankings: query id, rank, corpus id, score, mode."""
    with open(path, "w", encoding="utf-8") as fh:
        for result in results:
            for rank, (cid, score) in enumerate(result.ranking, start=1):
                fh.write(f"{result.query_id}\t{rank}\t{cid}\t{score:.12g}\t{result.mode}\n")


def write_report(path, report: EvalReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in report.rows():
            fh.write(f"{key}\t{value}\n")
        for qid in sorted(report.per_query_ap):
            fh.write(f"ap\t{qid}\t{report.per_query_ap[qid]:.12g}\n")


def save_vectors(path, vectors: dict[str, np.ndarray]) -> None:
    """Binary vector store: magic, u32 dim, u32 count, then per id a u16
    length-prefixed utf-8 id and dim little-endian f64 components."""
    ids = sorted(vectors)
    dim = len(vectors[ids[0]]) if ids else 0
    out = [_VECTOR_MAGIC, struct.pack("<II", dim, len(ids))]
    for cid in ids:
        raw = cid.encode("utf-8")
        if len(vectors[cid]) != dim:
            raise ValueError(f"inconsistent vector length for {cid!r}")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(np.ascontiguousarray(vectors[cid], dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def load_vectors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != _VECTOR_MAGIC:
        raise ValueError("not a vector file")
    dim, count = struct.unpack_from("<II", buf, 8)
    offset = 16
    vectors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (length,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        cid = buf[offset:offset + length].decode("utf-8")
        offset += length
        vectors[cid] = np.frombuffer(buf, dtype="<f8", count=dim, offset=offset).copy()
        offset += 8 * dim
    return vectors
