"""Codebooks, codeword assignment and bit-packed codes.

A document's refined vector is sliced into one segment per codebook.
Each segment is assigned to one of K codewords, either stochastically
(probability proportional to ``exp(-squared distance)``), softly via a
temperature-controlled Gumbel softmax, or deterministically (nearest
codeword).  Distances are squared Euclidean throughout, never rooted.

When K is a power of two the M sub-indices of a document pack into
``M * log2(K)`` bits: index m occupies bits ``[m*b, (m+1)*b)`` with the
index's least significant bit first, bit 0 being the least significant
bit of byte 0, and the final partial byte zero-padded.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import (
    DimMismatchError,
    IndexOutOfRangeError,
    InvalidConfigError,
    KNotPowerOfTwoError,
    NonFiniteInputError,
    NonPositiveTemperatureError,
)

GUMBEL_CLAMP = 1e-12


@dataclass
class CodebookSet:
    """M codebooks of K codewords each, all of width sub_dim."""

    books: np.ndarray  # (M, K, sub_dim)

    def __post_init__(self) -> None:
        self.books = np.ascontiguousarray(self.books)
        if self.books.ndim != 3:
            raise InvalidConfigError("books must have shape (M, K, sub_dim)")
        if self.books.shape[1] < 2:
            raise InvalidConfigError("each codebook needs at least 2 codewords")
        if not np.all(np.isfinite(self.books)):
            raise NonFiniteInputError("codebook entries must be finite")

    @property
    def n_codebooks(self) -> int:
        return self.books.shape[0]

    @property
    def n_codewords(self) -> int:
        return self.books.shape[1]

    @property
    def sub_dim(self) -> int:
        return self.books.shape[2]

    @property
    def dim(self) -> int:
        return self.n_codebooks * self.sub_dim

    @property
    def code_bits(self) -> int:
        """Total bits per packed code; requires K to be a power of two."""
        return self.n_codebooks * bits_per_index(self.n_codewords)


@dataclass
class SoftAssignment:
    """Soft codeword weights for one segment, with the noise that made them."""

    probs: np.ndarray
    gumbel: np.ndarray
    temperature: float


@dataclass
class QuantCode:
    """The M sub-codeword indices of one document."""

    indices: np.ndarray
    n_codewords: int

    def __post_init__(self) -> None:
        self.indices = np.ascontiguousarray(self.indices, dtype=np.uint16)
        if self.indices.ndim != 1:
            raise DimMismatchError("code indices must be a vector")
        if np.any(self.indices >= self.n_codewords):
            raise IndexOutOfRangeError(
                f"code index >= K={self.n_codewords}: {self.indices.tolist()}"
            )

    @property
    def n_codebooks(self) -> int:
        return self.indices.shape[0]

    def packed(self) -> bytes:
        return pack_codes(self.indices, self.n_codewords)


def bits_per_index(n_codewords: int) -> int:
    """log2(K) for power-of-two K, else :class:`KNotPowerOfTwoError`."""
    if n_codewords < 2 or n_codewords & (n_codewords - 1):
        raise KNotPowerOfTwoError(f"K={n_codewords} is not a power of two")
    return n_codewords.bit_length() - 1


def _check_pair(segment: np.ndarray, book: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    segment = np.asarray(segment)
    book = np.asarray(book)
    if segment.ndim != 1 or book.ndim != 2 or book.shape[1] != segment.shape[0]:
        raise DimMismatchError(
            f"segment shape {segment.shape} does not match book shape {book.shape}"
        )
    if not (np.all(np.isfinite(segment)) and np.all(np.isfinite(book))):
        raise NonFiniteInputError("segment and codebook must be finite")
    return segment, book


def squared_distances(segment: np.ndarray, book: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance from one segment to every codeword."""
    segment, book = _check_pair(segment, book)
    diff = book - segment
    return np.einsum("kd,kd->k", diff, diff)


def _stable_softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max())
    return e / e.sum()


def assign_probs(segment: np.ndarray, book: np.ndarray) -> np.ndarray:
    """Assignment distribution: p_k proportional to exp(-||segment - c_k||^2).

    Computed with max-subtraction in the dtype of the inputs.
    """
    return _stable_softmax(-squared_distances(segment, book))


def gumbel_from_uniform(u: np.ndarray) -> np.ndarray:
    """Map uniforms in (0,1) to standard Gumbel draws, clamped away from
    0 and 1 so the result is always finite."""
    u = np.clip(np.asarray(u, dtype=np.float64), GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP)
    return -np.log(-np.log(u))


def sample_gumbel(k: int, seed: int) -> np.ndarray:
    """k i.i.d. standard Gumbel draws, deterministic given the seed."""
    if k < 1:
        raise InvalidConfigError("need at least one draw")
    return gumbel_from_uniform(rng.spawn(seed).random(k))


def soft_assign(
    segment: np.ndarray,
    book: np.ndarray,
    temperature: float,
    gumbel: np.ndarray,
) -> SoftAssignment:
    """Temperature-controlled soft assignment.

    Weights are ``softmax_k(-(||segment - c_k||^2 + gumbel_k) / temperature)``;
    the noise is added to the squared distances before the sign flip.
    """
    if not temperature > 0:
        raise NonPositiveTemperatureError(f"temperature must be > 0, got {temperature}")
    d2 = squared_distances(segment, book)
    gumbel = np.asarray(gumbel)
    if gumbel.shape != d2.shape:
        raise DimMismatchError(f"need {d2.shape[0]} noise draws, got shape {gumbel.shape}")
    probs = _stable_softmax(-(d2 + gumbel) / temperature)
    return SoftAssignment(probs=probs, gumbel=gumbel, temperature=float(temperature))


def hard_assign(segment: np.ndarray, book: np.ndarray) -> int:
    """Index of the nearest codeword; ties go to the lowest index."""
    return int(np.argmin(squared_distances(segment, book)))


def hard_assign_batch(segments: np.ndarray, book: np.ndarray) -> np.ndarray:
    """Nearest-codeword index for every row of ``segments``."""
    segments = np.asarray(segments)
    d2 = (
        np.einsum("nd,nd->n", segments, segments)[:, None]
        - 2.0 * segments @ book.T
        + np.einsum("kd,kd->k", book, book)[None, :]
    )
    return np.argmin(d2, axis=1)


def sample_assignment(segment: np.ndarray, book: np.ndarray, gumbel: np.ndarray) -> int:
    """Stochastic codeword draw via the Gumbel-argmax trick.

    ``argmax_k(-||segment - c_k||^2 + gumbel_k)`` is distributed exactly
    as :func:`assign_probs`.
    """
    d2 = squared_distances(segment, book)
    return int(np.argmax(-d2 + np.asarray(gumbel)))


def soft_codeword(book: np.ndarray, assignment: SoftAssignment) -> np.ndarray:
    """Probability-weighted codeword mixture for one segment."""
    return assignment.probs @ np.asarray(book)


def quantize_document(refined, books: CodebookSet) -> QuantCode:
    """Hard-assign every segment of a refined embedding."""
    values = np.asarray(getattr(refined, "values", refined))
    if values.shape[0] != books.dim:
        raise DimMismatchError(
            f"refined vector length {values.shape[0]} != codebooks' {books.dim}"
        )
    sub = books.sub_dim
    indices = [
        hard_assign(values[m * sub:(m + 1) * sub], books.books[m])
        for m in range(books.n_codebooks)
    ]
    return QuantCode(np.array(indices, dtype=np.uint16), books.n_codewords)


def reconstruct(books: CodebookSet, code: QuantCode) -> np.ndarray:
    """Concatenate the codewords named by a code."""
    if code.n_codebooks != books.n_codebooks:
        raise DimMismatchError(
            f"code has {code.n_codebooks} indices, books have {books.n_codebooks}"
        )
    return np.concatenate(
        [books.books[m, code.indices[m]] for m in range(books.n_codebooks)]
    )


def pack_codes(indices: np.ndarray, n_codewords: int) -> bytes:
    """Pack one code's indices into ceil(M*log2(K)/8) bytes."""
    return pack_codes_batch(np.asarray(indices)[None, :], n_codewords)[0].tobytes()


def unpack_codes(data: bytes, n_codebooks: int, n_codewords: int) -> np.ndarray:
    """Inverse of :func:`pack_codes`."""
    payload = np.frombuffer(data, dtype=np.uint8)[None, :]
    return unpack_codes_batch(payload, n_codebooks, n_codewords)[0]


def pack_codes_batch(indices: np.ndarray, n_codewords: int) -> np.ndarray:
    """Pack an (n, M) index matrix into an (n, bytes_per_code) uint8 array."""
    b = bits_per_index(n_codewords)
    indices = np.asarray(indices)
    if np.any(indices < 0) or np.any(indices >= n_codewords):
        raise IndexOutOfRangeError(f"code indices must lie in [0, {n_codewords})")
    n, m = indices.shape
    shifts = np.arange(b, dtype=np.uint16)
    bits = (indices.astype(np.uint16)[:, :, None] >> shifts) & 1
    return np.packbits(bits.reshape(n, m * b).astype(np.uint8), axis=1, bitorder="little")


def unpack_codes_batch(payload: np.ndarray, n_codebooks: int, n_codewords: int) -> np.ndarray:
    """Inverse of :func:`pack_codes_batch`; returns an (n, M) uint16 matrix."""
    b = bits_per_index(n_codewords)
    payload = np.asarray(payload, dtype=np.uint8)
    bits = np.unpackbits(payload, axis=1, count=n_codebooks * b, bitorder="little")
    bits = bits.reshape(payload.shape[0], n_codebooks, b).astype(np.uint16)
    return (bits << np.arange(b, dtype=np.uint16)).sum(axis=2, dtype=np.uint16)


def packed_code_nbytes(n_codebooks: int, n_codewords: int) -> int:
    """Bytes per packed code: ceil(M*log2(K)/8)."""
    return (n_codebooks * bits_per_index(n_codewords) + 7) // 8


def init_codebooks(
    refined_batch: np.ndarray,
    n_codebooks: int,
    n_codewords: int,
    seed: int,
    strategy: str = "data",
) -> CodebookSet:
    """Initialize codebooks from a refined warmup batch.

    The default strategy samples K distinct refined segments per book
    (seeded, without replacement).  Books whose warmup segments have
    fewer than K distinct rows, and the ``"random"`` strategy, fall back
    to N(0, 0.1^2) entries.
    """
    if strategy not in ("data", "random"):
        raise InvalidConfigError(f"unknown codebook init strategy {strategy!r}")
    refined_batch = np.asarray(refined_batch)
    sub = refined_batch.shape[1] // n_codebooks
    gen = rng.spawn(seed, rng.STREAM_CODEBOOK_INIT)
    books = np.empty((n_codebooks, n_codewords, sub), dtype=np.float32)
    for m in range(n_codebooks):
        segments = refined_batch[:, m * sub:(m + 1) * sub]
        distinct = np.unique(segments, axis=0)
        if strategy == "data" and distinct.shape[0] >= n_codewords:
            pick = gen.choice(distinct.shape[0], size=n_codewords, replace=False)
            books[m] = distinct[np.sort(pick)]
        else:
            books[m] = gen.normal(0.0, 0.1, size=(n_codewords, sub))
    return CodebookSet(books)
