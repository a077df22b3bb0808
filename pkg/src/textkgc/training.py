"""Training loop: schedule, clipping, adaptive updates, and the step pipeline.

Each step encodes a shuffled batch of (head, relation) queries and tails
(plus heads-as-candidates when self-negatives are on), assembles the
candidate matrix, computes the configured loss with exact gradients,
backpropagates into sparse per-bucket table gradients, clips by global norm,
and applies a decoupled-weight-decay adaptive update under a linear
warmup/decay schedule.  All randomness comes from named streams of one seed,
so logs and checkpoints are bit-identical across runs at a fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import contrastive as ct
from . import encoder as enc
from .errors import KgcError, NumericError
from .graph import KnowledgeGraph, Triple, augment_description
from .randomness import named_stream

LOSS_KINDS = ("infonce", "margin", "margin_tau")
NEGATIVE_SOURCES = ("ib", "pb", "sn")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    batch_size: int = 1024
    epochs: int = 1
    peak_lr: float = 0.02
    warmup_steps: int = 400
    grad_clip: float = 10.0
    weight_decay: float = 1e-4
    dropout: float = 0.1
    loss_kind: str = "infonce"
    negatives: frozenset[str] = frozenset(NEGATIVE_SOURCES)
    pre_batches: int = 2
    seed: int = 42
    max_tokens: int = enc.DEFAULT_MAX_TOKENS
    max_negatives: Optional[int] = None
    margin_tau_temperature: float = 0.05
    loss: ct.LossConfig = field(default_factory=ct.LossConfig)

    def __post_init__(self) -> None:
        self.negatives = frozenset(s.lower() for s in self.negatives)
        unknown = self.negatives - set(NEGATIVE_SOURCES)
        if unknown:
            raise KgcError(f"unknown negative sources: {sorted(unknown)}")
        if not self.negatives:
            raise KgcError("at least one negative source is required")
        if "pb" in self.negatives and "ib" not in self.negatives:
            raise KgcError("pre-batch negatives require in-batch negatives")
        if "pb" in self.negatives and self.pre_batches < 1:
            raise KgcError("pre-batch negatives require pre_batches >= 1")
        if self.loss_kind not in LOSS_KINDS:
            raise KgcError(f"loss kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.batch_size < 2 and "ib" in self.negatives:
            raise KgcError("batch size must be >= 2 when in-batch negatives are enabled")
        if self.batch_size < 1:
            raise KgcError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise KgcError(f"epochs must be >= 1, got {self.epochs}")
        if self.peak_lr <= 0:
            raise KgcError(f"peak learning rate must be > 0, got {self.peak_lr}")
        if self.warmup_steps < 0:
            raise KgcError(f"warmup steps must be >= 0, got {self.warmup_steps}")
        if self.grad_clip <= 0:
            raise KgcError(f"gradient clip must be > 0, got {self.grad_clip}")
        if self.weight_decay < 0:
            raise KgcError(f"weight decay must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.dropout < 1.0:
            raise KgcError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.pre_batches < 0:
            raise KgcError(f"pre-batch count must be >= 0, got {self.pre_batches}")
        if self.max_negatives is not None and self.max_negatives < 1:
            raise KgcError(f"negative cap must be >= 1, got {self.max_negatives}")


@dataclass
class OptimizerState:
    m_hr: np.ndarray
    v_hr: np.ndarray
    m_tail: np.ndarray
    v_tail: np.ndarray
    m_tau: float = 0.0
    v_tau: float = 0.0
    step: int = 0

    @classmethod
    def zeros(cls, buckets: int, dim: int) -> "OptimizerState":
        shape = (buckets, dim)
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(shape), np.zeros(shape))


def lr_at(step: int, cfg: TrainConfig, total_steps: int) -> float:
    """Linear ramp to the peak over the warmup, then linear decay to zero.

    The effective warmup is capped at ``total_steps`` so short runs stay
    well-defined.
    """
    if total_steps < 1:
        raise KgcError(f"total steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise KgcError(f"step {step} outside [0, {total_steps}]")
    warmup = min(cfg.warmup_steps, total_steps)
    if step <= warmup:
        if warmup == 0:
            return cfg.peak_lr
        return cfg.peak_lr * step / warmup
    return cfg.peak_lr * (total_steps - step) / (total_steps - warmup)


def clip_gradients(grads: enc.GradientBuffer, max_norm: float) -> enc.GradientBuffer:
    """Scale the whole buffer down when its global L2 norm exceeds ``max_norm``."""
    if max_norm <= 0:
        raise KgcError(f"clip norm must be > 0, got {max_norm}")
    grads.assert_finite()
    norm = grads.global_norm()
    if norm > max_norm:
        grads.scale_(max_norm / norm)
    return grads


def _dense(grads: dict[int, np.ndarray], shape: tuple[int, int]) -> np.ndarray:
    out = np.zeros(shape)
    for bucket, vec in grads.items():
        out[bucket] = vec
    return out


def apply_update(
    params: enc.EncoderParams,
    state: OptimizerState,
    grads: enc.GradientBuffer,
    lr: float,
    cfg: TrainConfig,
) -> tuple[enc.EncoderParams, OptimizerState]:
    """One adaptive-moment step with bias correction and decoupled weight decay.

    theta <- theta - lr * mhat / (sqrt(vhat) + eps) - lr * weight_decay * theta.
    Weight decay is not applied to the temperature parameter.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t

    for table_name, grad_map, m, v in (
        (enc.HR_TABLE, grads.hr, state.m_hr, state.v_hr),
        (enc.TAIL_TABLE, grads.tail, state.m_tail, state.v_tail),
    ):
        table = params.table(table_name)
        g = _dense(grad_map, table.shape)
        with np.errstate(over="ignore", invalid="ignore"):  # finiteness is checked below
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
            table -= lr * update
            if cfg.weight_decay:
                table -= lr * cfg.weight_decay * table
        if not np.isfinite(table).all():
            raise NumericError(f"non-finite parameter value in {table_name}_table after update")

    state.m_tau = ADAM_BETA1 * state.m_tau + (1.0 - ADAM_BETA1) * grads.log_inv_tau
    state.v_tau = ADAM_BETA2 * state.v_tau + (1.0 - ADAM_BETA2) * grads.log_inv_tau**2
    params.log_inv_tau -= lr * (state.m_tau / bc1) / (math.sqrt(state.v_tau / bc2) + ADAM_EPS)
    if not math.isfinite(params.log_inv_tau):
        raise NumericError("non-finite parameter value in log_inv_tau after update")
    return params, state


@dataclass
class TripleTokens:
    """Pre-tokenized text for one training triple.

    The head text excludes the tail's name from its neighbor augmentation
    (and vice versa) so the answer never leaks into the input.  Self-negative
    encodings reuse the head tokens on the candidate table.
    """

    head: list[int]
    rel: list[int]
    tail: list[int]


def build_token_cache(g: KnowledgeGraph, cfg: TrainConfig, buckets: int) -> list[TripleTokens]:
    cache = []
    for h, r, t in g.triples("train"):
        h_text = augment_description(g, h, exclude=t)
        t_text = augment_description(g, t, exclude=h)
        r_text = g.relation(r).description
        cache.append(
            TripleTokens(
                tokenize_cached(h_text, buckets, cfg.max_tokens),
                tokenize_cached(r_text, buckets, cfg.max_tokens),
                tokenize_cached(t_text, buckets, cfg.max_tokens),
            )
        )
    return cache


_token_cache: dict[tuple[str, int, int], list[int]] = {}


def tokenize_cached(text: str, buckets: int, max_tokens: int) -> list[int]:
    key = (text, buckets, max_tokens)
    hit = _token_cache.get(key)
    if hit is None:
        hit = enc.tokenize(text, buckets, max_tokens)
        if len(_token_cache) < 500_000:
            _token_cache[key] = hit
    return hit


def run_batch(
    g: KnowledgeGraph,
    params: enc.EncoderParams,
    rows: Sequence[Triple],
    tokens: Sequence[TripleTokens],
    queue: ct.PreBatchQueue,
    cfg: TrainConfig,
    dropout_rng: Optional[np.random.Generator],
    negative_rng: Optional[np.random.Generator] = None,
    counter: Optional[enc.ForwardCounter] = None,
) -> tuple[float, enc.GradientBuffer, ct.CandidateMatrix, ct.TrainingBatch]:
    """Forward and backward pass for one batch; no parameter update.

    Returns the loss, the accumulated gradient buffer, the candidate matrix,
    and the encoded batch (whose tail embeddings feed the queue).
    """
    use_sn = "sn" in cfg.negatives
    hr_records = [
        enc.forward_hr(params, tk.head, tk.rel, cfg.dropout, dropout_rng, counter, cfg.max_tokens)
        for tk in tokens
    ]
    tail_records = [
        enc.forward_tail(params, tk.tail, cfg.dropout, dropout_rng, counter) for tk in tokens
    ]
    self_records = (
        [enc.forward_tail(params, tk.head, cfg.dropout, dropout_rng, counter) for tk in tokens]
        if use_sn
        else None
    )

    batch = ct.TrainingBatch(
        rows=list(rows),
        hr_embs=np.stack([r.output for r in hr_records]),
        tail_embs=np.stack([r.output for r in tail_records]),
        self_embs=np.stack([r.output for r in self_records]) if use_sn else None,
    )
    matrix = ct.assemble_candidates(g, batch, queue, use_sn)
    if "ib" not in cfg.negatives:
        ct.disable_in_batch_negatives(matrix)
    if cfg.max_negatives is not None:
        if negative_rng is None:
            raise KgcError("a negative cap requires a random generator")
        ct.limit_negatives(matrix, cfg.max_negatives, negative_rng)

    if cfg.loss_kind == "infonce":
        loss, grad_scores, grad_tau = ct.infonce_loss(matrix, cfg.loss, params.log_inv_tau)
    elif cfg.loss_kind == "margin":
        loss, grad_scores = ct.margin_loss(matrix, cfg.loss)
        grad_tau = 0.0
    else:
        loss, grad_scores = ct.margin_tau_loss(matrix, cfg.loss, cfg.margin_tau_temperature)
        grad_tau = 0.0

    B = batch.size
    Q = len(queue)
    grad_hr = grad_scores[:, :B] @ batch.tail_embs
    if Q:
        grad_hr += grad_scores[:, B : B + Q] @ queue.embeddings()
    if use_sn:
        grad_hr += grad_scores[:, matrix.sn_column][:, None] * batch.self_embs
    grad_tail = grad_scores[:, :B].T @ batch.hr_embs
    grad_self = grad_scores[:, matrix.sn_column][:, None] * batch.hr_embs if use_sn else None

    buffer = enc.GradientBuffer()
    buffer.log_inv_tau = grad_tau
    for i, record in enumerate(hr_records):
        enc.encode_backward(params, record, grad_hr[i], buffer)
    for i, record in enumerate(tail_records):
        enc.encode_backward(params, record, grad_tail[i], buffer)
    if use_sn:
        for i, record in enumerate(self_records):
            enc.encode_backward(params, record, grad_self[i], buffer)
    return loss, buffer, matrix, batch


def _steps_per_epoch(n: int, batch_size: int) -> int:
    full, rem = divmod(n, batch_size)
    return full + (1 if rem >= 2 else 0)


def train(
    g: KnowledgeGraph,
    params: enc.EncoderParams,
    cfg: TrainConfig,
    checkpoint_path: Optional[str] = None,
) -> tuple[enc.EncoderParams, list[str]]:
    """Run the full training loop and return the params and per-step log lines.

    The graph must be inverse-augmented.  A checkpoint is written at the end
    of every epoch when a path is given.  Each log line reads
    ``step=<n> loss=<f> lr=<f> tau=<f> fwd=<n>`` where ``fwd`` is the
    cumulative encoder-invocation count.
    """
    if not g.inverse_augmented:
        raise KgcError("training requires an inverse-augmented graph")
    triples = g.triples("train")
    n = len(triples)
    if n < 2:
        raise KgcError(f"need at least 2 training triples, got {n}")
    if "pb" in cfg.negatives and "ib" not in cfg.negatives:
        raise KgcError("pre-batch negatives require in-batch negatives")

    shuffle_rng = named_stream(cfg.seed, "shuffle")
    dropout_rng = named_stream(cfg.seed, "dropout")
    negative_rng = named_stream(cfg.seed, "negatives")

    tokens = build_token_cache(g, cfg, params.buckets)
    steps_per_epoch = _steps_per_epoch(n, cfg.batch_size)
    if steps_per_epoch == 0:
        raise KgcError("batch size leaves no trainable batches")
    total_steps = steps_per_epoch * cfg.epochs

    use_pb = "pb" in cfg.negatives
    queue = ct.PreBatchQueue(cfg.pre_batches * cfg.batch_size if use_pb else 0)
    state = OptimizerState.zeros(params.buckets, params.dim)
    counter = enc.ForwardCounter()
    log_lines: list[str] = []
    global_step = 0

    for _ in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            chunk = order[start : start + cfg.batch_size]
            if chunk.size < 2:
                continue
            rows = [triples[i] for i in chunk]
            row_tokens = [tokens[i] for i in chunk]
            lr = lr_at(global_step, cfg, total_steps)
            tau_now = enc.temperature(params.log_inv_tau, cfg.loss.tau_floor)
            with np.errstate(over="ignore", invalid="ignore"):  # loss checked below
                loss, buffer, _, batch = run_batch(
                    g, params, rows, row_tokens, queue, cfg, dropout_rng, negative_rng, counter
                )
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at step {global_step}")
            clip_gradients(buffer, cfg.grad_clip)
            apply_update(params, state, buffer, lr, cfg)
            if use_pb:
                queue.push(batch.tail_embs, [row.tail for row in rows])
            log_lines.append(
                f"step={global_step} loss={loss!r} lr={lr!r} tau={tau_now!r} fwd={counter.count}"
            )
            global_step += 1
        if checkpoint_path is not None:
            enc.save_checkpoint(params, checkpoint_path)
    return params, log_lines
