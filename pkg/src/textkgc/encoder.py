"""Hashed-token embedding-bag encoder with exact manual gradients.

Two independent embedding tables share one tokenizer: the ``hr`` table
embeds relation-aware queries (head text, a reserved separator bucket, then
relation text) and the ``tail`` table embeds candidate entities.  A text is
encoded by averaging its token rows (with optional row dropout during
training) and L2-normalizing the mean, so every output is a unit vector and
dot products are cosines.

Backward passes replay the recorded forward state, so gradients are exact
for the sampled dropout mask; they are checked against central finite
differences in the test suite.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import CheckpointError, KgcError, NumericError, UnknownIdError
from .randomness import fnv1a_64

DEFAULT_BUCKETS = 30_000
DEFAULT_DIM = 64
DEFAULT_MAX_TOKENS = 50
INIT_SCALE = 0.05
DEFAULT_TEMPERATURE = 0.05
CHECKPOINT_MAGIC = "kgc-enc v1"

HR_TABLE = "hr"
TAIL_TABLE = "tail"


def separator_index(buckets: int) -> int:
    """The reserved bucket joining head and relation tokens; never produced by hashing."""
    return buckets - 1


def tokenize(text: str, buckets: int, max_tokens: int = DEFAULT_MAX_TOKENS) -> list[int]:
    """Lowercase, split on whitespace, hash each token into a bucket.

    Hashes land in ``[0, buckets - 1)``; the top bucket is reserved for the
    separator.  The sequence is truncated to ``max_tokens``.
    """
    if buckets < 2:
        raise KgcError(f"bucket count must be >= 2, got {buckets}")
    if max_tokens < 1:
        raise KgcError(f"max_tokens must be >= 1, got {max_tokens}")
    hash_space = buckets - 1
    return [
        fnv1a_64(token.encode("utf-8")) % hash_space
        for token in text.lower().split()[:max_tokens]
    ]


class ForwardCounter:
    """Thread-safe tally of encoder invocations."""

    def __init__(self) -> None:
        self._count = 0
        self._lock = threading.Lock()

    def bump(self, n: int = 1) -> None:
        with self._lock:
            self._count += n

    @property
    def count(self) -> int:
        return self._count


@dataclass
class EncoderParams:
    """All trainable state: two embedding tables plus the log inverse temperature."""

    hr_table: np.ndarray
    tail_table: np.ndarray
    log_inv_tau: float

    @classmethod
    def initialize(
        cls,
        buckets: int,
        dim: int,
        rng: np.random.Generator,
        initial_temperature: float = DEFAULT_TEMPERATURE,
    ) -> "EncoderParams":
        if buckets < 2:
            raise KgcError(f"bucket count must be >= 2, got {buckets}")
        if dim < 1:
            raise KgcError(f"dimension must be >= 1, got {dim}")
        hr = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(buckets, dim))
        tail = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(buckets, dim))
        return cls(hr, tail, math.log(1.0 / initial_temperature))

    @property
    def buckets(self) -> int:
        return self.hr_table.shape[0]

    @property
    def dim(self) -> int:
        return self.hr_table.shape[1]

    def table(self, name: str) -> np.ndarray:
        if name == HR_TABLE:
            return self.hr_table
        if name == TAIL_TABLE:
            return self.tail_table
        raise KgcError(f"unknown table {name!r}")

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.hr_table.copy(), self.tail_table.copy(), self.log_inv_tau)


def temperature(log_inv_tau: float, floor: float = 1e-3) -> float:
    """Softmax temperature recovered from its learnable log-inverse, floored away from zero."""
    try:
        tau = math.exp(-log_inv_tau)
    except OverflowError:  # diverged parameter; surfaces as non-finite loss downstream
        return math.inf
    return max(tau, floor)


@dataclass
class ForwardRecord:
    """Everything the backward pass needs to replay one encoding."""

    table: str
    tokens: np.ndarray  # (n,) int64, post-truncation
    keep: np.ndarray  # (n,) bool dropout survivors
    scale: float  # 1 / (1 - dropout) applied to survivors
    pre_norm: np.ndarray  # (d,) mean-pooled vector before normalization
    norm: float
    output: np.ndarray  # (d,) unit vector
    degenerate: bool  # no tokens survived; output is the fixed fallback


def _fallback(dim: int) -> np.ndarray:
    out = np.zeros(dim)
    out[0] = 1.0
    return out


def _bag_forward(
    table_name: str,
    table: np.ndarray,
    tokens: Sequence[int],
    dropout: float,
    rng: Optional[np.random.Generator],
    counter: Optional[ForwardCounter],
) -> ForwardRecord:
    if not 0.0 <= dropout < 1.0:
        raise KgcError(f"dropout must be in [0, 1), got {dropout}")
    if dropout > 0.0 and rng is None:
        raise KgcError("dropout requires a random generator")
    if counter is not None:
        counter.bump()
    dim = table.shape[1]
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.size and (toks.min() < 0 or toks.max() >= table.shape[0]):
        raise KgcError("token bucket out of range for the embedding table")
    if toks.size == 0:
        out = _fallback(dim)
        return ForwardRecord(table_name, toks, np.zeros(0, dtype=bool), 1.0, out.copy(), 1.0, out, True)
    if dropout > 0.0:
        keep = rng.random(toks.size) >= dropout
        scale = 1.0 / (1.0 - dropout)
    else:
        keep = np.ones(toks.size, dtype=bool)
        scale = 1.0
    pooled = (table[toks] * keep[:, None]).sum(axis=0) * (scale / toks.size)
    norm = float(np.linalg.norm(pooled))
    if norm == 0.0:
        out = _fallback(dim)
        return ForwardRecord(table_name, toks, keep, scale, pooled, 0.0, out, True)
    return ForwardRecord(table_name, toks, keep, scale, pooled, norm, pooled / norm, False)


def forward_tail(
    params: EncoderParams,
    tokens: Sequence[int],
    dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    counter: Optional[ForwardCounter] = None,
) -> ForwardRecord:
    return _bag_forward(TAIL_TABLE, params.tail_table, tokens, dropout, rng, counter)


def encode_tail(
    params: EncoderParams,
    tokens: Sequence[int],
    dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    counter: Optional[ForwardCounter] = None,
) -> np.ndarray:
    """Unit-vector embedding of an entity's token sequence."""
    return forward_tail(params, tokens, dropout, rng, counter).output


def combine_query_tokens(
    h_tokens: Sequence[int],
    r_tokens: Sequence[int],
    buckets: int,
    max_tokens: int = DEFAULT_MAX_TOKENS,
) -> list[int]:
    """Head tokens, the separator bucket, then relation tokens, truncated."""
    combined = list(h_tokens) + [separator_index(buckets)] + list(r_tokens)
    return combined[:max_tokens]


def forward_hr(
    params: EncoderParams,
    h_tokens: Sequence[int],
    r_tokens: Sequence[int],
    dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    counter: Optional[ForwardCounter] = None,
    max_tokens: int = DEFAULT_MAX_TOKENS,
) -> ForwardRecord:
    combined = combine_query_tokens(h_tokens, r_tokens, params.buckets, max_tokens)
    return _bag_forward(HR_TABLE, params.hr_table, combined, dropout, rng, counter)


def encode_hr(
    params: EncoderParams,
    h_tokens: Sequence[int],
    r_tokens: Sequence[int],
    dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    counter: Optional[ForwardCounter] = None,
    max_tokens: int = DEFAULT_MAX_TOKENS,
) -> np.ndarray:
    """Unit-vector embedding of a relation-aware (head, relation) query."""
    return forward_hr(params, h_tokens, r_tokens, dropout, rng, counter, max_tokens).output


class GradientBuffer:
    """Sparse per-bucket gradients for both tables plus the temperature scalar.

    Buckets never touched by a batch carry no entry at all.
    """

    def __init__(self) -> None:
        self.hr: dict[int, np.ndarray] = {}
        self.tail: dict[int, np.ndarray] = {}
        self.log_inv_tau: float = 0.0

    def _table(self, name: str) -> dict[int, np.ndarray]:
        if name == HR_TABLE:
            return self.hr
        if name == TAIL_TABLE:
            return self.tail
        raise KgcError(f"unknown table {name!r}")

    def add(self, table: str, bucket: int, grad: np.ndarray) -> None:
        slot = self._table(table)
        if bucket in slot:
            slot[bucket] += grad
        else:
            slot[bucket] = grad.copy()

    def entries(self) -> Iterator[tuple[str, int, np.ndarray]]:
        for bucket, grad in self.hr.items():
            yield HR_TABLE, bucket, grad
        for bucket, grad in self.tail.items():
            yield TAIL_TABLE, bucket, grad

    def global_norm(self) -> float:
        total = self.log_inv_tau**2
        for _, _, grad in self.entries():
            total += float(np.dot(grad, grad))
        return math.sqrt(total)

    def scale_(self, factor: float) -> None:
        for _, _, grad in self.entries():
            grad *= factor
        self.log_inv_tau *= factor

    def assert_finite(self) -> None:
        for table, bucket, grad in self.entries():
            if not np.isfinite(grad).all():
                raise NumericError(f"non-finite gradient in {table}_table[{bucket}]")
        if not math.isfinite(self.log_inv_tau):
            raise NumericError("non-finite gradient in log_inv_tau")


def encode_backward(
    params: EncoderParams,
    record: ForwardRecord,
    upstream: np.ndarray,
    buffer: Optional[GradientBuffer] = None,
) -> GradientBuffer:
    """Accumulate d(loss)/d(table rows) for one recorded encoding.

    The upstream gradient is first pulled back through the L2 normalization
    (projecting out the radial component, then dividing by the pre-norm
    length) and then distributed uniformly over the surviving token rows.
    Degenerate encodings (no surviving tokens) have constant output and
    contribute nothing.
    """
    if buffer is None:
        buffer = GradientBuffer()
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != record.output.shape:
        raise KgcError(
            f"upstream gradient shape {upstream.shape} does not match output {record.output.shape}"
        )
    if record.degenerate:
        return buffer
    radial = float(upstream @ record.output)
    grad_pre = (upstream - radial * record.output) / record.norm
    coeff = record.scale / record.tokens.size
    per_row = grad_pre * coeff
    for token, kept in zip(record.tokens.tolist(), record.keep.tolist()):
        if kept:
            buffer.add(record.table, token, per_row)
    return buffer


# -- checkpoint io ----------------------------------------------------------


def save_checkpoint(params: EncoderParams, path: str) -> None:
    """Write a text checkpoint: header, hr rows, tail rows, temperature line."""
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(f"{CHECKPOINT_MAGIC} {params.buckets} {params.dim}\n")
        for table in (params.hr_table, params.tail_table):
            for row in table:
                handle.write(" ".join(repr(float(v)) for v in row))
                handle.write("\n")
        handle.write(f"log_inv_tau {params.log_inv_tau!r}\n")


def load_checkpoint(path: str) -> EncoderParams:
    with open(path, "r", encoding="utf-8") as handle:
        header = handle.readline().rstrip("\n")
        parts = header.split(" ")
        if len(parts) != 4 or " ".join(parts[:2]) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint header: {header!r}")
        try:
            buckets, dim = int(parts[2]), int(parts[3])
        except ValueError:
            raise CheckpointError(f"bad checkpoint header: {header!r}") from None
        if buckets < 2 or dim < 1:
            raise CheckpointError(f"bad checkpoint header: {header!r}")
        tables = []
        lineno = 1
        for name in (HR_TABLE, TAIL_TABLE):
            table = np.empty((buckets, dim))
            for i in range(buckets):
                line = handle.readline()
                lineno += 1
                if not line:
                    raise CheckpointError(f"{path}:{lineno}: truncated {name} table")
                values = line.split()
                if len(values) != dim:
                    raise CheckpointError(
                        f"{path}:{lineno}: expected {dim} values, got {len(values)}"
                    )
                try:
                    table[i] = [float(v) for v in values]
                except ValueError:
                    raise CheckpointError(f"{path}:{lineno}: unparseable float") from None
            tables.append(table)
        line = handle.readline()
        lineno += 1
        fields = line.split()
        if len(fields) != 2 or fields[0] != "log_inv_tau":
            raise CheckpointError(f"{path}:{lineno}: expected final 'log_inv_tau <value>' line")
        try:
            log_inv_tau = float(fields[1])
        except ValueError:
            raise CheckpointError(f"{path}:{lineno}: unparseable temperature") from None
        if handle.readline():
            raise CheckpointError(f"{path}: trailing data after temperature line")
    return EncoderParams(tables[0], tables[1], log_inv_tau)


class PrecomputedEntityEncoder:
    """Entity-vector plugin backed by an exported embedding file.

    Any source of unit vectors keyed by entity id can stand in for the
    trained tail encoder on the evaluation side; this one reads the format
    written by export (``entity_id<TAB>v1 v2 ... vd``).
    """

    def __init__(self, vectors: dict[str, np.ndarray], dim: int):
        self._vectors = vectors
        self.dim = dim

    @classmethod
    def load(cls, path: str) -> "PrecomputedEntityEncoder":
        vectors: dict[str, np.ndarray] = {}
        dim: Optional[int] = None
        with open(path, "r", encoding="utf-8") as handle:
            for lineno, raw in enumerate(handle, start=1):
                line = raw.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise CheckpointError(f"{path}:{lineno}: expected 'id<TAB>values'")
                ident, values = parts
                try:
                    vec = np.array([float(v) for v in values.split()])
                except ValueError:
                    raise CheckpointError(f"{path}:{lineno}: unparseable float") from None
                if dim is None:
                    dim = vec.size
                elif vec.size != dim:
                    raise CheckpointError(
                        f"{path}:{lineno}: dimension {vec.size} differs from first row ({dim})"
                    )
                if abs(float(np.linalg.norm(vec)) - 1.0) > 1e-6:
                    raise CheckpointError(f"{path}:{lineno}: vector for {ident!r} is not unit length")
                vectors[ident] = vec
        if dim is None:
            raise CheckpointError(f"{path}: no vectors found")
        return cls(vectors, dim)

    def entity_vector(self, entity_id: str) -> np.ndarray:
        try:
            return self._vectors[entity_id]
        except KeyError:
            raise UnknownIdError(f"no precomputed vector for entity {entity_id!r}") from None

    @property
    def ids(self) -> list[str]:
        return list(self._vectors)
