"""Relevance scoring: Fisher-kernel similarity plus time/mark alignment.

Two sequences are compared on two routes that the net score combines:

* ``sim_score``: a model-free alignment term -(dt + dx), where dt sums
  absolute time differences over matched event positions (query times
  pass through the unwarp first) plus (T - t_i) for every unmatched
  trailing event, and dx counts mark mismatches over matched positions
  plus the length difference.  T is the larger observation horizon of
  the pair.
* ``fisher_kernel``: the dot product of normalized log-likelihood
  gradients ("Fisher vectors") of the two sequences under a shared
  sequence model.  Identical sequences score exactly 1; unrelated ones
  decorrelate toward 0.

For the self variant both vectors are self-likelihood gradients (the
query is scored after unwarping).  For the cross variant both sides are
scored as the conditioned role: the corpus vector is the gradient of
log p(corpus | unwarped query) and the query vector is the gradient of
log p(unwarped query | unwarped query), so a sequence paired with itself
still yields kernel 1.

Fisher preconditioning is the identity by default; the "empirical" mode
divides by the square root of a damped diagonal second-moment estimate
before normalizing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import mtpp
from .mtpp import ModelConfig, ModelParams
from .sequences import EventSequence
from .unwarp import UnwarpParams, unwarp_sequence

__all__ = [
    "FisherConfig",
    "FisherVector",
    "VanishingGradientError",
    "mark_distance",
    "time_distance",
    "sim_score",
    "fisher_vector",
    "fisher_kernel",
    "relevance_score",
    "empirical_diagonal",
    "fisher_vector_graph",
    "time_distance_graph",
]

NORM_FLOOR = 1e-12


class VanishingGradientError(ArithmeticError):
    """A log-likelihood gradient had norm below the representable floor."""


@dataclass
class FisherConfig:
    mode: str = "identity"  # or "empirical"
    damping: float = 1e-6
    diag: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("identity", "empirical"):
            raise ValueError(f"unknown Fisher mode {self.mode!r}")
        if self.mode == "empirical" and self.diag is None:
            raise ValueError("empirical mode needs a diagonal estimate")


@dataclass
class FisherVector:
    vector: np.ndarray
    seq_id: str
    variant: str


def mark_distance(q: EventSequence, c: EventSequence) -> int:
    """Mark mismatches over matched positions plus the length difference."""
    h = min(len(q), len(c))
    mism = int(np.sum(q.marks[:h] != c.marks[:h]))
    return mism + abs(len(c) - len(q))


def time_distance(q_unwarped: EventSequence, c: EventSequence, T: float) -> float:
    """Absolute time misalignment; unmatched tail events cost (T - t_i).

    ``q_unwarped`` is the query after unwarping.  Every event time of
    either sequence must lie in [0, T]; the result is then >= 0.
    """
    if T <= 0:
        raise ValueError("T must be positive")
    for seq in (q_unwarped, c):
        if len(seq) and seq.times[-1] > T:
            raise ValueError(f"{seq.id}: event time {seq.times[-1]} exceeds T={T}")
    h = min(len(q_unwarped), len(c))
    matched = float(np.sum(np.abs(q_unwarped.times[:h] - c.times[:h])))
    tail = q_unwarped.times[h:] if len(q_unwarped) > h else c.times[h:]
    return matched + float(np.sum(T - tail))


def sim_score(q: EventSequence, c: EventSequence, unwarp: UnwarpParams, T: float) -> float:
    """-(time distance + mark distance) after unwarping the query."""
    uq = unwarp_sequence(q, unwarp)
    return -(time_distance(uq, c, T) + mark_distance(q, c))


def _precondition(grad: np.ndarray, config: FisherConfig) -> np.ndarray:
    if config.mode == "empirical":
        return grad / np.sqrt(config.diag + config.damping)
    return grad


def unit_vector(grad: np.ndarray, label: str = "gradient") -> np.ndarray:
    """Normalize to unit L2 norm; degenerate inputs raise instead of
    silently returning garbage directions."""
    norm = float(np.linalg.norm(grad))
    if norm <= NORM_FLOOR:
        raise VanishingGradientError(f"{label}: norm {norm:.3e} below {NORM_FLOOR}")
    return grad / norm


def fisher_vector(seq: EventSequence, params: ModelParams,
                  conditioning: EventSequence | None = None,
                  config: FisherConfig | None = None) -> FisherVector:
    """Unit-norm (preconditioned) log-likelihood gradient of one sequence."""
    config = config or FisherConfig()
    grad = mtpp.grad_log_likelihood(seq, params, conditioning=conditioning)
    grad = _precondition(grad, config)
    return FisherVector(vector=unit_vector(grad, seq.id), seq_id=seq.id,
                        variant=params.config.variant)


def fisher_kernel(q: EventSequence, c: EventSequence, unwarp: UnwarpParams,
                  params: ModelParams, config: FisherConfig | None = None) -> float:
    """Kernel value in [-1, 1] between a query and a corpus sequence."""
    uq = unwarp_sequence(q, unwarp)
    if params.config.variant == "self":
        vq = fisher_vector(uq, params, config=config)
        vc = fisher_vector(c, params, config=config)
    else:
        vq = fisher_vector(uq, params, conditioning=uq, config=config)
        vc = fisher_vector(c, params, conditioning=uq, config=config)
    return float(vq.vector @ vc.vector)


def relevance_score(q: EventSequence, c: EventSequence, unwarp: UnwarpParams,
                    params: ModelParams, config: FisherConfig | None = None,
                    gamma: float = 0.1) -> float:
    """Net score: fisher_kernel + gamma * sim_score.

    T is the larger of the corpus horizon and the unwarped query horizon,
    which reduces to max of the raw horizons under the identity unwarp.
    """
    uq = unwarp_sequence(q, unwarp)
    T = max(uq.horizon, c.horizon)
    sim = -(time_distance(uq, c, T) + mark_distance(q, c))
    if params.config.variant == "self":
        vq = fisher_vector(uq, params, config=config)
        vc = fisher_vector(c, params, config=config)
    else:
        vq = fisher_vector(uq, params, conditioning=uq, config=config)
        vc = fisher_vector(c, params, conditioning=uq, config=config)
    return float(vq.vector @ vc.vector) + gamma * sim


def empirical_diagonal(seqs, params: ModelParams) -> np.ndarray:
    """Mean squared gradient per coordinate over a sample of sequences.

    Self-likelihood gradients regardless of variant use; this feeds the
    "empirical" Fisher preconditioner.
    """
    acc = np.zeros(params.n_params)
    count = 0
    for seq in seqs:
        g = mtpp.grad_log_likelihood(seq, params)
        acc += g * g
        count += 1
    if count == 0:
        raise ValueError("need at least one sequence to estimate the diagonal")
    return acc / count


# -- taped variants (training path) -----------------------------------------

def fisher_vector_graph(tape: ad.Tape, theta: dict[str, ad.Value], config: ModelConfig,
                        times, marks, cond_times=None, cond_marks=None,
                        fisher: FisherConfig | None = None) -> ad.Value:
    """Taped unit-norm gradient; differentiable through the inner backward.

    The returned Value depends on the model leaves twice (once through
    the likelihood, once through its recorded adjoints), which is what
    lets the ranking loss learn the vectors themselves.
    """
    fisher = fisher or FisherConfig()
    ll = mtpp.log_likelihood_graph(tape, theta, config, times, marks,
                                   cond_times=cond_times, cond_marks=cond_marks)
    grads = tape.backward(ll, wrt=list(theta.values()), as_values=True)
    named = {name: grads[leaf] for name, leaf in theta.items()}
    flat = mtpp.flatten_grad_values(tape, named, config)
    if fisher.mode == "empirical":
        flat = ad.mul(flat, tape.constant(1.0 / np.sqrt(fisher.diag + fisher.damping)))
    norm = ad.sqrt(ad.vsum(ad.square(flat)))
    if norm.data <= NORM_FLOOR:
        raise VanishingGradientError(f"gradient norm {norm.data:.3e} below {NORM_FLOOR}")
    return ad.div(flat, norm)


def time_distance_graph(tape: ad.Tape, uq_times: ad.Value, c_times: np.ndarray,
                        T: float) -> ad.Value:
    """Taped time distance with differentiable unwarped query times.

    Training does not re-derive T from the moving unwarp output; it uses
    the raw-horizon max, so stretched query tails can transiently exceed
    T.  That keeps the term differentiable and only affects the loss,
    not the validated eval-mode op.
    """
    nq = uq_times.data.shape[0]
    nc = int(c_times.shape[0])
    h = min(nq, nc)
    matched = ad.vsum(ad.absolute(ad.sub(ad.narrow(uq_times, 0, h), tape.constant(c_times[:h]))))
    if nq > h:
        tail = ad.vsum(ad.sub(T, ad.narrow(uq_times, h, nq - h)))
        return ad.add(matched, tail)
    if nc > h:
        return ad.add(matched, float(np.sum(T - c_times[h:])))
    return matched
