"""Joint training of the relevance model and the query unwarp.

The loss is a pairwise ranking hinge over (query, relevant, non-relevant)
triples.  Scores inside the loss are the same kernel-plus-distance
combination the retrieval path uses, built on one tape per batch so the
gradient flows through the normalized likelihood gradients themselves and
through the unwarped query times.

Two deliberate asymmetries with the eval-mode scorer:
  * the horizon T of the time distance is the raw max of the two
    horizons (the eval path uses the unwarped query horizon), keeping T
    out of the differentiation;
  * the L2 penalty is applied as decoupled weight decay inside the Adam
    step rather than as a loss term, so the loss stays additive over
    disjoint query groups.  The decay covers the relevance model only;
    the unwarp is regularized by its own unbiasedness penalty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from ._opt import AdamState, TrainingDivergedError, adam_update
from .autodiff import DomainError
from .mtpp import ModelConfig, ModelParams
from .relevance import fisher_vector_graph, mark_distance, time_distance_graph
from .retrieval import average_precision, rank_by_score, score_candidates
from .sequences import EventSequence, RelevanceJudgments
from .unwarp import (
    UnwarpConfig,
    UnwarpParams,
    unbiasedness_penalty_graph,
    unwarp_times_graph,
)

__all__ = [
    "TrainConfig",
    "TrainResult",
    "EpochStats",
    "LossGraph",
    "TrainingDivergedError",
    "AdamState",
    "adam_update",
    "hinge",
    "sample_pairs",
    "epoch_loss",
    "validation_pools",
    "validation_map",
    "train",
]


@dataclass(frozen=True)
class TrainConfig:
    """Model dimensions, loss mix, and optimization schedule."""

    variant: str = "cross"
    dim: int = 16
    mark_count: int = 5
    n_max: int = 128
    num_blocks: int = 1
    unwarp_hidden: tuple[int, int] = (128, 128)
    n_quad: int = 64
    noise_sigma: float = 0.01
    unbias_sigma: float = 1.0
    unwarp_enabled: bool = True
    unbias_weight: float = 1.0
    margin: float = 0.5
    gamma: float = 0.1
    l2: float = 0.001
    negatives_per_query: int = 100
    pairs_per_query: int = 1000
    batch_queries: int = 16
    epochs: int = 10
    learning_rate: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    divergence_threshold: float = 1e6
    init_scale: float = 0.02
    eval_negatives: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        if self.margin < 0 or self.gamma < 0 or self.l2 < 0 or self.unbias_weight < 0:
            raise ValueError("margin, gamma, l2, unbias_weight must be >= 0")
        if self.negatives_per_query < 1 or self.pairs_per_query < 1 or self.batch_queries < 1:
            raise ValueError("sampling sizes must be positive")
        if self.epochs < 0 or self.learning_rate <= 0:
            raise ValueError("epochs >= 0 and learning_rate > 0 required")

    def model_config(self) -> ModelConfig:
        return ModelConfig(variant=self.variant, dim=self.dim, mark_count=self.mark_count,
                           n_max=self.n_max, num_blocks=self.num_blocks)

    def unwarp_config(self) -> UnwarpConfig:
        return UnwarpConfig(hidden=self.unwarp_hidden, n_quad=self.n_quad,
                            noise_sigma=self.noise_sigma, unbias_sigma=self.unbias_sigma)


def hinge(s_pos: float, s_neg: float, margin: float) -> float:
    """max(0, s_neg - s_pos + margin); zero once the pair is separated."""
    return max(0.0, s_neg - s_pos + margin)


def sample_pairs(judgments: RelevanceJudgments, query_ids, corpus_ids, rng,
                 negatives_per_query: int,
                 pairs_per_query: int) -> dict[str, list[tuple[str, str]]]:
    """Per-query (positive, negative) training pairs.

    Negatives are drawn without replacement from the corpus minus the
    query's judged positives, so unjudged sequences are treated as
    non-relevant but a judged positive can never appear on the negative
    side.  The full positive-negative product is capped at
    ``pairs_per_query`` by uniform subsampling.
    """
    corpus_ids = sorted(corpus_ids)
    members = set(corpus_ids)
    out: dict[str, list[tuple[str, str]]] = {}
    for qid in sorted(query_ids):
        pos = [p for p in judgments.positives(qid) if p in members]
        if not pos:
            continue
        pos_set = set(pos)
        pool = [cid for cid in corpus_ids if cid not in pos_set]
        if not pool:
            continue
        take = min(negatives_per_query, len(pool))
        negs = [pool[i] for i in sorted(rng.choice(len(pool), size=take, replace=False))]
        pairs = [(p, n) for p in sorted(pos) for n in negs]
        if len(pairs) > pairs_per_query:
            keep = sorted(rng.choice(len(pairs), size=pairs_per_query, replace=False))
            pairs = [pairs[i] for i in keep]
        out[qid] = pairs
    return out


@dataclass
class LossGraph:
    value: ad.Value
    tape: ad.Tape
    theta: dict[str, ad.Value]
    phi: dict[str, ad.Value] | None
    n_pairs: int


def _fold_sum(tape: ad.Tape, values: list[ad.Value]) -> ad.Value:
    if not values:
        return tape.constant(0.0)
    total = values[0]
    for v in values[1:]:
        total = ad.add(total, v)
    return total


def epoch_loss(queries: dict[str, EventSequence], corpus: dict[str, EventSequence],
               pairs: dict[str, list[tuple[str, str]]], params: ModelParams,
               unwarp: UnwarpParams, config: TrainConfig,
               noise: dict[str, float] | None = None) -> LossGraph:
    """Ranking hinge plus the unwarp unbiasedness penalty, on one tape.

    Scores are cached per (query, corpus) pair, and gradient vectors per
    distinct sequence role, so a corpus sequence shared by many pairs is
    embedded once.  The total is additive over queries; disjoint pair
    dicts sum to the combined loss exactly.
    """
    noise = noise or {}
    tape = ad.Tape()
    theta = params.leaves(tape)
    phi = unwarp.leaves(tape) if config.unwarp_enabled else None
    mcfg = params.config
    ucfg = unwarp.config
    cross = mcfg.variant == "cross"
    hinge_terms: list[ad.Value] = []
    penalties: list[ad.Value] = []
    self_cache: dict[str, ad.Value] = {}
    n_pairs = 0
    for qid in sorted(pairs):
        if not pairs[qid]:
            continue
        q = queries[qid]
        if config.unwarp_enabled:
            uq = unwarp_times_graph(q.times, phi, ucfg, tape, noise=noise.get(qid, 0.0))
        else:
            uq = tape.constant(q.times)
        if cross:
            vq = fisher_vector_graph(tape, theta, mcfg, uq, q.marks,
                                     cond_times=uq, cond_marks=q.marks)
        else:
            vq = fisher_vector_graph(tape, theta, mcfg, uq, q.marks)
        scores: dict[str, ad.Value] = {}

        def score(cid: str) -> ad.Value:
            if cid in scores:
                return scores[cid]
            c = corpus[cid]
            if cross:
                vc = fisher_vector_graph(tape, theta, mcfg, c.times, c.marks,
                                         cond_times=uq, cond_marks=q.marks)
            elif cid in self_cache:
                vc = self_cache[cid]
            else:
                vc = fisher_vector_graph(tape, theta, mcfg, c.times, c.marks)
                self_cache[cid] = vc
            td = time_distance_graph(tape, uq, c.times, max(q.horizon, c.horizon))
            sim = ad.neg(ad.add(td, float(mark_distance(q, c))))
            s = ad.add(ad.dot(vq, vc), ad.mul(sim, config.gamma))
            scores[cid] = s
            return s

        for pos, neg in pairs[qid]:
            term = ad.relu(ad.add(ad.sub(score(neg), score(pos)), config.margin))
            hinge_terms.append(term)
            n_pairs += 1
        if config.unwarp_enabled and config.unbias_weight > 0:
            penalties.append(unbiasedness_penalty_graph(phi, ucfg, q.horizon, tape))
    total = _fold_sum(tape, hinge_terms)
    if penalties:
        total = ad.add(total, ad.mul(_fold_sum(tape, penalties), config.unbias_weight))
    return LossGraph(value=total, tape=tape, theta=theta, phi=phi, n_pairs=n_pairs)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    pair_loss: float
    val_map: float | None
    n_pairs: int


@dataclass
class TrainResult:
    params: ModelParams
    unwarp: UnwarpParams
    history: list[EpochStats]
    best_epoch: int
    config: TrainConfig


def validation_pools(judgments: RelevanceJudgments, valid_ids, corpus_ids, rng,
                     n_negatives: int) -> dict[str, list[str]]:
    """Fixed per-query candidate pools (positives plus sampled negatives).

    Drawn once before training so the validation MAP is comparable
    across epochs.
    """
    corpus_ids = sorted(corpus_ids)
    members = set(corpus_ids)
    pools: dict[str, list[str]] = {}
    for qid in sorted(valid_ids):
        pos = [p for p in judgments.positives(qid) if p in members]
        if not pos:
            continue
        pos_set = set(pos)
        pool = [cid for cid in corpus_ids if cid not in pos_set]
        take = min(n_negatives, len(pool))
        negs = [pool[i] for i in sorted(rng.choice(len(pool), size=take, replace=False))]
        pools[qid] = sorted(pos) + negs
    return pools


def validation_map(queries: dict[str, EventSequence], corpus: dict[str, EventSequence],
                   pools: dict[str, list[str]], judgments: RelevanceJudgments,
                   params: ModelParams, unwarp: UnwarpParams, gamma: float) -> float:
    aps: list[float] = []
    cache: dict[str, object] = {}
    for qid in sorted(pools):
        seqs = [corpus[cid] for cid in pools[qid]]
        scores = score_candidates(queries[qid], seqs, params, unwarp, gamma=gamma,
                                  vector_cache=cache)
        ranked = [cid for cid, _ in rank_by_score(scores)]
        aps.append(average_precision(ranked, set(judgments.positives(qid))))
    return float(np.mean(aps))


def _chunks(items: list[str], size: int):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def train(corpus: dict[str, EventSequence], queries: dict[str, EventSequence],
          judgments: RelevanceJudgments, config: TrainConfig, train_ids,
          valid_ids=()) -> TrainResult:
    """Run the ranking-loss schedule and keep the best validation epoch.

    One root seed drives four spawned streams, in order: parameter init,
    pair sampling, unwarp noise, validation pools.  Noise draws are
    clipped so the first unwarped event time stays positive.  Loss above
    ``divergence_threshold`` (or any non-finite gradient) aborts.
    """
    mcfg = config.model_config()
    ucfg = config.unwarp_config()
    streams = np.random.SeedSequence(config.seed).spawn(4)
    rng_init = np.random.default_rng(streams[0])
    rng_pairs = np.random.default_rng(streams[1])
    rng_noise = np.random.default_rng(streams[2])
    rng_val = np.random.default_rng(streams[3])

    params = ModelParams.init(mcfg, rng_init, scale=config.init_scale)
    if config.unwarp_enabled:
        uparams = UnwarpParams.init(ucfg, rng_init, scale=config.init_scale)
    else:
        uparams = UnwarpParams.identity(ucfg)

    train_ids = sorted(train_ids)
    usable = [qid for qid in train_ids
              if any(p in corpus for p in judgments.positives(qid))]
    if not usable:
        raise ValueError("no training query has a judged positive in the corpus")
    pools = validation_pools(judgments, valid_ids, corpus, rng_val, config.eval_negatives)

    state_theta = AdamState()
    state_phi = AdamState()
    history: list[EpochStats] = []
    best_map = -math.inf
    best = (params.copy(), uparams.copy())
    best_epoch = -1
    for epoch in range(config.epochs):
        pairs_all = sample_pairs(judgments, usable, corpus, rng_pairs,
                                 config.negatives_per_query, config.pairs_per_query)
        noise: dict[str, float] = {}
        if config.unwarp_enabled and config.noise_sigma > 0:
            for qid in sorted(pairs_all):
                eta = rng_noise.normal(0.0, config.noise_sigma)
                floor = -0.5 * float(queries[qid].times[0])
                noise[qid] = max(eta, floor)
        epoch_total = 0.0
        epoch_pairs = 0
        for batch in _chunks(sorted(pairs_all), config.batch_queries):
            try:
                lg = epoch_loss(queries, corpus, {qid: pairs_all[qid] for qid in batch},
                                params, uparams, config, noise=noise)
            except DomainError as err:
                # runaway parameters usually surface as a degenerate graph
                # (overflowed sigma, vanished gap) before the loss check
                raise TrainingDivergedError(
                    f"model became degenerate at epoch {epoch}: {err}") from err
            loss_val = lg.value.item()
            if not math.isfinite(loss_val) or loss_val > config.divergence_threshold:
                raise TrainingDivergedError(
                    f"loss {loss_val} at epoch {epoch} exceeds {config.divergence_threshold}")
            wrt = list(lg.theta.values()) + (list(lg.phi.values()) if lg.phi else [])
            grads = lg.tape.backward(lg.value, wrt=wrt)
            adam_update(params.arrays, {n: grads[v] for n, v in lg.theta.items()},
                        state_theta, lr=config.learning_rate, beta1=config.adam_beta1,
                        beta2=config.adam_beta2, eps=config.adam_eps,
                        weight_decay=config.l2)
            if lg.phi is not None:
                adam_update(uparams.arrays, {n: grads[v] for n, v in lg.phi.items()},
                            state_phi, lr=config.learning_rate, beta1=config.adam_beta1,
                            beta2=config.adam_beta2, eps=config.adam_eps)
            epoch_total += loss_val
            epoch_pairs += lg.n_pairs
        val = None
        if pools:
            val = validation_map(queries, corpus, pools, judgments, params, uparams,
                                 config.gamma)
            if val > best_map:
                best_map = val
                best = (params.copy(), uparams.copy())
                best_epoch = epoch
        history.append(EpochStats(epoch=epoch, loss=epoch_total,
                                  pair_loss=epoch_total / max(1, epoch_pairs),
                                  val_map=val, n_pairs=epoch_pairs))
    if not pools or best_epoch < 0:
        best = (params.copy(), uparams.copy())
        best_epoch = config.epochs - 1
    return TrainResult(params=best[0], unwarp=best[1], history=history,
                       best_epoch=best_epoch, config=config)
