"""Attention-based marked temporal point process over event sequences.

The model is intensity-free: each event contributes a lognormal density
over its inter-arrival gap and a categorical probability over its mark,
both read off a hidden state summarizing the preceding events.  The
sequence log-likelihood is the sum of those per-event terms.

Input layer
    y_i = embed_mark[x_i] + w_time * t_i + w_gap * (t_i - t_{i-1})
          + b_embed + pos_i
with trainable positional embeddings ``pos`` (capacity ``n_max``).

Encoder (two variants over the same parameter set)
    self:  causal self-attention; position j attends to events i <= j of
           the same sequence.
    cross: position j of the scored sequence attends to every event of a
           conditioning sequence (the unwarped query), no causal mask.
Attention uses scaled dot products softmax(s_j . k_i / sqrt(D)) with
s = W_s y, k = W_k y, v = W_v y.  With ``num_blocks > 1`` the scored
stream is re-projected per block; the cross variant keeps its keys and
values pinned to the conditioning embeddings.

Output layer
    f_j = w_out * relu(h_j * w_ff + b_ff) + b_out          (elementwise)
    state_r = sum_{j <= r} f_j,   state_0 = start          (learned)
Event r+1 is scored from state_r; the ``start`` vector stands in for the
empty prefix.  The time head maps a state to (mu, log sigma); the mark
head is a linear softmax.

Parameters flatten to one canonical float64 vector (see ``param_order``);
gradients and Fisher vectors use that same layout.  Checkpoints embed the
unwarp parameters next to the model, little-endian layout documented at
``save_checkpoint``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .sequences import EventSequence
from .unwarp import UnwarpConfig, UnwarpParams

__all__ = [
    "ModelConfig",
    "ModelParams",
    "EncodedState",
    "SequenceLengthError",
    "param_order",
    "embed_events",
    "encode_self",
    "encode_cross",
    "time_log_density",
    "mark_log_prob",
    "sequence_log_likelihood",
    "grad_log_likelihood",
    "sample_next_event",
    "log_likelihood_graph",
    "flatten_grad_values",
    "save_checkpoint",
    "load_checkpoint",
]

LOG_2PI = float(np.log(2.0 * np.pi))

VARIANTS = ("self", "cross")


class SequenceLengthError(ValueError):
    """Sequence exceeds the positional capacity ``n_max``."""


@dataclass
class ModelConfig:
    variant: str
    dim: int
    mark_count: int
    n_max: int = 128
    num_blocks: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.dim < 1 or self.mark_count < 2 or self.n_max < 1 or self.num_blocks < 1:
            raise ValueError("dim >= 1, mark_count >= 2, n_max >= 1, num_blocks >= 1 required")


def param_order(config: ModelConfig) -> list[tuple[str, tuple]]:
    """Canonical (name, shape) layout of the flat parameter vector."""
    d, c = config.dim, config.mark_count
    order = [
        ("embed_mark", (c, d)),
        ("w_time", (d,)),
        ("w_gap", (d,)),
        ("b_embed", (d,)),
        ("pos", (config.n_max, d)),
        ("start", (d,)),
    ]
    for b in range(config.num_blocks):
        order += [(f"W_s{b}", (d, d)), (f"W_k{b}", (d, d)), (f"W_v{b}", (d, d))]
    order += [
        ("w_out", (d,)),
        ("w_ff", (d,)),
        ("b_ff", (d,)),
        ("b_out", (d,)),
        ("W_time_head", (2, d)),
        ("b_time_head", (2,)),
        ("W_mark_head", (c, d)),
        ("b_mark_head", (c,)),
    ]
    return order


class ModelParams:
    """Named parameter arrays with a canonical flat view."""

    def __init__(self, config: ModelConfig, arrays: dict[str, np.ndarray]):
        self.config = config
        self.arrays = arrays
        for name, shape in param_order(config):
            if name not in arrays:
                raise ValueError(f"missing parameter {name}")
            if arrays[name].shape != shape:
                raise ValueError(f"param {name}: expected shape {shape}, got {arrays[name].shape}")

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator, scale: float = 0.02) -> "ModelParams":
        arrays = {}
        for name, shape in param_order(config):
            if name.startswith("b_"):
                arrays[name] = np.zeros(shape)
            else:
                arrays[name] = rng.normal(0.0, scale, size=shape)
        return cls(config, arrays)

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.ravel(self.arrays[n]) for n, _ in param_order(self.config)])

    @classmethod
    def unflatten(cls, config: ModelConfig, vec: np.ndarray) -> "ModelParams":
        arrays = {}
        off = 0
        for name, shape in param_order(config):
            size = int(np.prod(shape))
            arrays[name] = vec[off : off + size].reshape(shape).copy()
            off += size
        if off != vec.size:
            raise ValueError(f"parameter vector length {vec.size}, expected {off}")
        return cls(config, arrays)

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in param_order(self.config))

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def leaves(self, tape: ad.Tape) -> dict[str, ad.Value]:
        return {name: tape.leaf(self.arrays[name], f"theta.{name}") for name, _ in param_order(self.config)}


@dataclass
class EncodedState:
    """Per-prefix conditioning states of one scored sequence.

    ``states`` row k (k = 0..n-1) conditions event k+1 and equals the
    output-layer sum over the first k events (row 0 is the learned start
    vector).  ``final`` is the full-prefix state used to extend the
    sequence; ``context`` holds the raw attention outputs h_j.
    """

    states: ad.Value
    final: ad.Value
    context: ad.Value


def _check_length(n: int, config: ModelConfig, what: str) -> None:
    if n == 0:
        raise ValueError(f"{what}: empty sequences cannot be scored")
    if n > config.n_max:
        raise SequenceLengthError(f"{what}: length {n} exceeds n_max={config.n_max}")


def _gaps_graph(tape: ad.Tape, times) -> ad.Value:
    """Inter-arrival gaps with the first gap measured from 0."""
    if isinstance(times, ad.Value):
        n = times.data.shape[0]
        diff = np.eye(n) - np.eye(n, k=-1)
        return ad.matvec(tape.constant(diff), times)
    arr = np.asarray(times, dtype=np.float64)
    return tape.constant(np.diff(arr, prepend=0.0))


def _embed_graph(tape, theta, config: ModelConfig, times, gaps, marks) -> ad.Value:
    n = len(marks)
    _check_length(n, config, "embed")
    times_v = times if isinstance(times, ad.Value) else tape.constant(times)
    d = config.dim
    y = ad.gather_rows(theta["embed_mark"], marks)
    y = ad.add(y, ad.matmul(ad.reshape(times_v, (n, 1)), ad.reshape(theta["w_time"], (1, d))))
    y = ad.add(y, ad.matmul(ad.reshape(gaps, (n, 1)), ad.reshape(theta["w_gap"], (1, d))))
    y = ad.add(y, theta["b_embed"])
    y = ad.add(y, ad.gather_rows(theta["pos"], np.arange(n)))
    return y


def _attention_graph(tape, theta, config: ModelConfig, y_scored: ad.Value,
                     y_cond: ad.Value | None) -> ad.Value:
    scale = 1.0 / np.sqrt(config.dim)
    n = y_scored.data.shape[0]
    mask = np.tril(np.ones((n, n), dtype=bool)) if y_cond is None else None
    stream = y_scored
    for b in range(config.num_blocks):
        source = stream if y_cond is None else y_cond
        s = ad.matmul(stream, ad.transpose(theta[f"W_s{b}"]))
        k = ad.matmul(source, ad.transpose(theta[f"W_k{b}"]))
        v = ad.matmul(source, ad.transpose(theta[f"W_v{b}"]))
        logits = ad.mul(ad.matmul(s, ad.transpose(k)), scale)
        attn = ad.softmax(logits, mask=mask)
        stream = ad.matmul(attn, v)
    return stream


def _states_graph(tape, theta, config: ModelConfig, context: ad.Value) -> EncodedState:
    n = context.data.shape[0]
    f = ad.add(
        ad.mul(theta["w_out"], ad.relu(ad.add(ad.mul(context, theta["w_ff"]), theta["b_ff"]))),
        theta["b_out"],
    )
    # Row k of the scoring states is the sum of f over events < k+1; the
    # strictly-lower-triangular matmul shifts the cumulative sum by one.
    shift = np.tril(np.ones((n, n)), k=-1)
    shifted = ad.matmul(tape.constant(shift), f)
    first = np.zeros((n, 1))
    first[0, 0] = 1.0
    states = ad.add(shifted, ad.matmul(tape.constant(first), ad.reshape(theta["start"], (1, -1))))
    final = ad.vsum(f, axis=0)
    return EncodedState(states=states, final=final, context=context)


def _encode_graph(tape, theta, config: ModelConfig, times, gaps, marks,
                  cond_times=None, cond_gaps=None, cond_marks=None) -> EncodedState:
    y = _embed_graph(tape, theta, config, times, gaps, marks)
    if config.variant == "cross":
        if cond_marks is None:
            raise ValueError("cross variant requires a conditioning sequence")
        _check_length(len(cond_marks), config, "conditioning")
        y_cond = _embed_graph(tape, theta, config, cond_times, cond_gaps, cond_marks)
    else:
        y_cond = None
    context = _attention_graph(tape, theta, config, y, y_cond)
    return _states_graph(tape, theta, config, context)


def log_likelihood_graph(tape, theta, config: ModelConfig, times, marks,
                         cond_times=None, cond_marks=None) -> ad.Value:
    """Taped log-likelihood; ``times`` (and ``cond_times``) may be Values.

    Used directly by the trainer, where query timestamps are functions of
    the unwarp parameters and must stay differentiable.
    """
    marks = np.asarray(marks, dtype=np.int64)
    gaps = _gaps_graph(tape, times)
    if np.any(gaps.data <= 0.0):
        raise ad.DomainError("log_likelihood: non-positive inter-arrival gap")
    cond_gaps = None
    if cond_marks is not None:
        cond_marks = np.asarray(cond_marks, dtype=np.int64)
        cond_gaps = _gaps_graph(tape, cond_times)
    enc = _encode_graph(tape, theta, config, times, gaps, marks,
                        cond_times=cond_times, cond_gaps=cond_gaps, cond_marks=cond_marks)
    n, c = len(marks), config.mark_count

    head = ad.add(ad.matmul(enc.states, ad.transpose(theta["W_time_head"])), theta["b_time_head"])
    mu = ad.matvec(head, tape.constant(np.array([1.0, 0.0])))
    log_sigma = ad.matvec(head, tape.constant(np.array([0.0, 1.0])))
    sigma = ad.exp(log_sigma)
    log_gap = ad.log(gaps)
    dev = ad.sub(log_gap, mu)
    time_terms = ad.sub(
        ad.sub(ad.neg(log_gap), log_sigma),
        ad.add(0.5 * LOG_2PI, ad.div(ad.square(dev), ad.mul(2.0, ad.square(sigma)))),
    )

    logits = ad.add(ad.matmul(enc.states, ad.transpose(theta["W_mark_head"])), theta["b_mark_head"])
    onehot = np.eye(c)[marks]
    picked = ad.vsum(ad.mul(logits, tape.constant(onehot)), axis=1)
    mark_terms = ad.sub(picked, ad.logsumexp(logits, axis=-1))

    return ad.add(ad.vsum(time_terms), ad.vsum(mark_terms))


def flatten_grad_values(tape: ad.Tape, grads: dict[str, ad.Value], config: ModelConfig) -> ad.Value:
    """Concatenate per-name adjoints into the canonical flat layout."""
    return ad.concat([ad.reshape(grads[name], (-1,)) for name, _ in param_order(config)])


# -- public eval-mode surface ------------------------------------------------

def embed_events(seq: EventSequence, params: ModelParams) -> np.ndarray:
    """Input-layer embeddings of a sequence, one row per event."""
    tape = ad.Tape()
    theta = params.leaves(tape)
    gaps = _gaps_graph(tape, seq.times)
    return _embed_graph(tape, theta, params.config, seq.times, gaps, seq.marks).data.copy()


def encode_self(seq: EventSequence, params: ModelParams) -> EncodedState:
    if params.config.variant != "self":
        raise ValueError("encode_self requires a self-variant model")
    tape = ad.Tape()
    theta = params.leaves(tape)
    gaps = _gaps_graph(tape, seq.times)
    return _encode_graph(tape, theta, params.config, seq.times, gaps, seq.marks)


def encode_cross(seq: EventSequence, conditioning: EventSequence, params: ModelParams) -> EncodedState:
    if params.config.variant != "cross":
        raise ValueError("encode_cross requires a cross-variant model")
    tape = ad.Tape()
    theta = params.leaves(tape)
    gaps = _gaps_graph(tape, seq.times)
    cond_gaps = _gaps_graph(tape, conditioning.times)
    return _encode_graph(tape, theta, params.config, seq.times, gaps, seq.marks,
                         cond_times=conditioning.times, cond_gaps=cond_gaps,
                         cond_marks=conditioning.marks)


def time_log_density(gap, mu, sigma):
    """Lognormal log-density of an inter-arrival gap (plain numpy)."""
    gap = np.asarray(gap, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(gap <= 0.0):
        raise ValueError("gap must be positive")
    if np.any(sigma <= 0.0):
        raise ValueError("sigma must be positive")
    z = (np.log(gap) - mu) / sigma
    out = -np.log(gap) - np.log(sigma) - 0.5 * LOG_2PI - 0.5 * z**2
    return out if out.ndim else float(out)


def mark_log_prob(state: np.ndarray, params: ModelParams, mark: int) -> float:
    """Log-probability of ``mark`` under the linear-softmax mark head."""
    if not 0 <= mark < params.config.mark_count:
        raise ValueError(f"mark {mark} outside [0, {params.config.mark_count})")
    logits = params.arrays["W_mark_head"] @ np.asarray(state, dtype=np.float64)
    logits = logits + params.arrays["b_mark_head"]
    m = logits.max()
    return float(logits[mark] - m - np.log(np.exp(logits - m).sum()))


def sequence_log_likelihood(seq: EventSequence, params: ModelParams,
                            conditioning: EventSequence | None = None,
                            tape: ad.Tape | None = None) -> ad.Value:
    """Log-likelihood of ``seq``; cross models condition on ``conditioning``."""
    tape = tape if tape is not None else ad.Tape()
    theta = params.leaves(tape)
    cond_times = conditioning.times if conditioning is not None else None
    cond_marks = conditioning.marks if conditioning is not None else None
    return log_likelihood_graph(tape, theta, params.config, seq.times, seq.marks,
                                cond_times=cond_times, cond_marks=cond_marks)


def grad_log_likelihood(seq: EventSequence, params: ModelParams,
                        conditioning: EventSequence | None = None) -> np.ndarray:
    """Flat gradient of the log-likelihood in canonical parameter order."""
    tape = ad.Tape()
    theta = params.leaves(tape)
    cond_times = conditioning.times if conditioning is not None else None
    cond_marks = conditioning.marks if conditioning is not None else None
    ll = log_likelihood_graph(tape, theta, params.config, seq.times, seq.marks,
                              cond_times=cond_times, cond_marks=cond_marks)
    grads = tape.backward(ll, wrt=list(theta.values()))
    named = {name: grads[theta[name]] for name, _ in param_order(params.config)}
    return np.concatenate([np.ravel(named[n]) for n, _ in param_order(params.config)])


def sample_next_event(state: np.ndarray, params: ModelParams,
                      rng: np.random.Generator) -> tuple[float, int]:
    """Draw (gap, mark) for the next event given a conditioning state.

    The gap is lognormal via its closed form exp(mu + sigma * z); the mark
    is categorical under the mark head.  Deterministic given ``rng``.
    """
    state = np.asarray(state, dtype=np.float64)
    mu, log_sigma = params.arrays["W_time_head"] @ state + params.arrays["b_time_head"]
    gap = float(np.exp(mu + np.exp(log_sigma) * rng.standard_normal()))
    logits = params.arrays["W_mark_head"] @ state + params.arrays["b_mark_head"]
    p = np.exp(logits - logits.max())
    p /= p.sum()
    mark = int(rng.choice(params.config.mark_count, p=p))
    return gap, mark


# -- checkpoint format --------------------------------------------------------
#
#   magic    8 bytes  b"SEQRET01"
#   variant  u8       0 = self, 1 = cross
#   dims     5 x u32  dim, n_max, mark_count, num_blocks, n_quad
#   widths   2 x u32  unwarp hidden widths
#   sigmas   2 x f64  noise_sigma, unbias_sigma
#   theta    u64 count, then count f64 (canonical model order)
#   phi      u64 count, then count f64 (canonical unwarp order)
#
# All integers and floats little-endian.

_MAGIC = b"SEQRET01"


def save_checkpoint(path, params: ModelParams, unwarp: UnwarpParams) -> None:
    cfg, ucfg = params.config, unwarp.config
    theta = params.flatten()
    phi = unwarp.flatten()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<B", VARIANTS.index(cfg.variant)))
        fh.write(struct.pack("<5I", cfg.dim, cfg.n_max, cfg.mark_count, cfg.num_blocks, ucfg.n_quad))
        fh.write(struct.pack("<2I", ucfg.hidden[0], ucfg.hidden[1]))
        fh.write(struct.pack("<2d", ucfg.noise_sigma, ucfg.unbias_sigma))
        fh.write(struct.pack("<Q", theta.size))
        fh.write(theta.astype("<f8").tobytes())
        fh.write(struct.pack("<Q", phi.size))
        fh.write(phi.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, UnwarpParams]:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        (variant_code,) = struct.unpack("<B", fh.read(1))
        dim, n_max, mark_count, num_blocks, n_quad = struct.unpack("<5I", fh.read(20))
        h1, h2 = struct.unpack("<2I", fh.read(8))
        noise_sigma, unbias_sigma = struct.unpack("<2d", fh.read(16))
        (n_theta,) = struct.unpack("<Q", fh.read(8))
        theta = np.frombuffer(fh.read(8 * n_theta), dtype="<f8").astype(np.float64)
        (n_phi,) = struct.unpack("<Q", fh.read(8))
        phi = np.frombuffer(fh.read(8 * n_phi), dtype="<f8").astype(np.float64)
    config = ModelConfig(variant=VARIANTS[variant_code], dim=dim, mark_count=mark_count,
                         n_max=n_max, num_blocks=num_blocks)
    ucfg = UnwarpConfig(hidden=(h1, h2), n_quad=n_quad,
                        noise_sigma=noise_sigma, unbias_sigma=unbias_sigma)
    return ModelParams.unflatten(config, theta), UnwarpParams.unflatten(ucfg, phi)
