"""Compact retrieval index and asymmetric-distance search.

A corpus is stored as hard-assigned codeword indices, bit-packed to
``M * log2(K)`` bits per document when K is a power of two.  A query is
refined once (dropout disabled), a per-query M x K table of squared
distances to every codeword is built, and each document's distance is
the sum of M table lookups, which equals the squared Euclidean distance
between the refined query and the document's reconstructed codeword.

The extreme configuration (K = 2, one bit per codebook) additionally
supports ranking by Hamming distance over the packed codes.

Index file layout (little-endian): magic ``MICPQIDX`` | version u32 |
M u32 | K u32 | sub_dim u32 | n_docs u64 | codebooks M*K*sub_dim f32 |
doc ids n_docs u64 | codes (packed bytes for power-of-two K, otherwise
one u16 per sub-index).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .dataio import EmbeddingMatrix
from .encoder import forward_batch
from .errors import (
    BadMagicError,
    ConfigMismatchError,
    DimMismatchError,
    EmptyIndexError,
    IndexOutOfRangeError,
    InvalidConfigError,
    KNot2Error,
    TruncatedFileError,
    VersionMismatchError,
)
from .quantizer import (
    CodebookSet,
    QuantCode,
    hard_assign_batch,
    pack_codes_batch,
    packed_code_nbytes,
    unpack_codes_batch,
)
from .trainer import ModelState

MAGIC_INDEX = b"MICPQIDX"
INDEX_VERSION = 1


def _is_pow2(k: int) -> bool:
    return k >= 2 and k & (k - 1) == 0


@dataclass
class RetrievalIndex:
    """Frozen codebooks plus the corpus's codes and document ids."""

    books: CodebookSet
    codes: np.ndarray    # (n_docs, M) uint16
    doc_ids: np.ndarray  # (n_docs,) uint64
    packed: np.ndarray | None = None  # (n_docs, bytes_per_code) uint8 when K is 2^b

    def __post_init__(self) -> None:
        self.codes = np.ascontiguousarray(self.codes, dtype=np.uint16)
        self.doc_ids = np.ascontiguousarray(self.doc_ids, dtype=np.uint64)
        if self.codes.ndim != 2 or self.codes.shape[1] != self.books.n_codebooks:
            raise DimMismatchError(
                f"codes shape {self.codes.shape} does not match {self.books.n_codebooks} codebooks"
            )
        if self.doc_ids.shape[0] != self.codes.shape[0]:
            raise DimMismatchError("doc_ids and codes disagree on the document count")
        if np.any(self.codes >= self.books.n_codewords):
            raise IndexOutOfRangeError(f"code index >= K={self.books.n_codewords}")
        if self.packed is None and _is_pow2(self.books.n_codewords):
            self.packed = pack_codes_batch(self.codes, self.books.n_codewords)
        if self.packed is not None:
            expected = self.n_docs * packed_code_nbytes(
                self.books.n_codebooks, self.books.n_codewords
            )
            if self.packed.size != expected:
                raise InvalidConfigError(
                    f"packed payload is {self.packed.size} bytes, expected {expected}"
                )

    @property
    def n_docs(self) -> int:
        return self.codes.shape[0]

    @property
    def payload_nbytes(self) -> int:
        """Size of the stored code payload in bytes."""
        if self.packed is not None:
            return int(self.packed.size)
        return int(self.codes.size * 2)


@dataclass
class DistanceLUT:
    """Per-query table: entry (m, k) is the squared distance from the
    query's segment m to codeword k of book m."""

    table: np.ndarray  # (M, K) float32

    def __post_init__(self) -> None:
        self.table = np.ascontiguousarray(self.table)
        if self.table.ndim != 2:
            raise DimMismatchError("distance table must be 2-D")


def build_index(
    model: ModelState, corpus: EmbeddingMatrix, ids: np.ndarray | None = None
) -> RetrievalIndex:
    """Encode a corpus: refine (dropout disabled), hard-assign, pack."""
    values = np.asarray(getattr(corpus, "values", corpus))
    if values.shape[1] != model.encoder.d_in:
        raise DimMismatchError(
            f"corpus width {values.shape[1]} != encoder input width {model.encoder.d_in}"
        )
    refined = forward_batch(model.encoder, values)
    sub = model.books.sub_dim
    codes = np.empty((values.shape[0], model.books.n_codebooks), dtype=np.uint16)
    for m in range(model.books.n_codebooks):
        codes[:, m] = hard_assign_batch(refined[:, m * sub:(m + 1) * sub], model.books.books[m])
    if ids is None:
        ids = np.arange(values.shape[0], dtype=np.uint64)
    return RetrievalIndex(books=model.books, codes=codes, doc_ids=ids)


def build_lut(query_refined, books: CodebookSet) -> DistanceLUT:
    """Squared distances from every query segment to every codeword."""
    values = np.asarray(getattr(query_refined, "values", query_refined))
    if values.shape[0] != books.dim:
        raise DimMismatchError(
            f"refined query length {values.shape[0]} != codebooks' width {books.dim}"
        )
    sub = books.sub_dim
    table = np.empty((books.n_codebooks, books.n_codewords), dtype=np.float32)
    for m in range(books.n_codebooks):
        diff = books.books[m] - values[m * sub:(m + 1) * sub]
        table[m] = np.einsum("kd,kd->k", diff, diff)
    return DistanceLUT(table)


def adc_distance(lut: DistanceLUT, code: QuantCode) -> float:
    """Asymmetric distance: sum of the M table entries named by the code."""
    if code.n_codebooks != lut.table.shape[0]:
        raise DimMismatchError(
            f"code has {code.n_codebooks} indices, table has {lut.table.shape[0]} rows"
        )
    if np.any(code.indices >= lut.table.shape[1]):
        raise IndexOutOfRangeError("code index outside the distance table")
    return float(lut.table[np.arange(lut.table.shape[0]), code.indices].sum())


def adc_distances(lut: DistanceLUT, codes: np.ndarray) -> np.ndarray:
    """Vectorized asymmetric distances for an (n, M) code matrix."""
    codes = np.asarray(codes)
    if np.any(codes >= lut.table.shape[1]):
        raise IndexOutOfRangeError("code index outside the distance table")
    gathered = lut.table[np.arange(lut.table.shape[0])[None, :], codes]
    return gathered.sum(axis=1)


def _ranked(doc_ids: np.ndarray, distances: np.ndarray, k: int) -> list[tuple[int, float]]:
    order = np.lexsort((doc_ids, distances))[: min(k, doc_ids.shape[0])]
    return [(int(doc_ids[i]), float(distances[i])) for i in order]


def _refine_query(model: ModelState, query_embedding: np.ndarray) -> np.ndarray:
    query = np.asarray(query_embedding)
    if query.ndim != 1 or query.shape[0] != model.encoder.d_in:
        raise DimMismatchError(
            f"query length {query.shape} != encoder input width {model.encoder.d_in}"
        )
    return forward_batch(model.encoder, query[None, :])[0]


def search_topk(
    index: RetrievalIndex, query_embedding: np.ndarray, model: ModelState, k: int
) -> list[tuple[int, float]]:
    """Top-k documents by asymmetric distance, ascending; ties break on
    ascending doc id.  Returns min(k, n_docs) (doc_id, distance) pairs."""
    if k < 1:
        raise InvalidConfigError("k must be >= 1")
    if index.n_docs == 0:
        raise EmptyIndexError("cannot search an empty index")
    refined = _refine_query(model, query_embedding)
    lut = build_lut(refined, index.books)
    return _ranked(index.doc_ids, adc_distances(lut, index.codes), k)


def hamming_distance(a: QuantCode, b: QuantCode) -> int:
    """Number of positions where two codes differ.

    Requires the extreme configuration (K = 2) where each sub-index is a
    single bit, making this equal to the XOR popcount of the packed codes.
    """
    if a.n_codebooks != b.n_codebooks or a.n_codewords != b.n_codewords:
        raise ConfigMismatchError("codes come from different (M, K) settings")
    if a.n_codewords != 2:
        raise KNot2Error(f"hamming distance requires K=2, got K={a.n_codewords}")
    return int(np.count_nonzero(a.indices != b.indices))


def search_topk_hamming(
    index: RetrievalIndex, query_embedding: np.ndarray, model: ModelState, k: int
) -> list[tuple[int, float]]:
    """Top-k by Hamming distance between the query's own hard code and
    each stored code; requires an index built with K = 2."""
    if k < 1:
        raise InvalidConfigError("k must be >= 1")
    if index.books.n_codewords != 2:
        raise KNot2Error(
            f"hamming search requires an index with K=2, got K={index.books.n_codewords}"
        )
    if index.n_docs == 0:
        raise EmptyIndexError("cannot search an empty index")
    refined = _refine_query(model, query_embedding)
    sub = index.books.sub_dim
    query_code = np.empty(index.books.n_codebooks, dtype=np.uint16)
    for m in range(index.books.n_codebooks):
        query_code[m] = hard_assign_batch(
            refined[None, m * sub:(m + 1) * sub], index.books.books[m]
        )[0]
    distances = (index.codes != query_code).sum(axis=1).astype(np.float64)
    return _ranked(index.doc_ids, distances, k)


def save_index(index: RetrievalIndex, path) -> None:
    """Write an index file; exact inverse of :func:`load_index`."""
    books = index.books
    with open(path, "wb") as f:
        f.write(MAGIC_INDEX)
        f.write(
            struct.pack(
                "<IIIIQ",
                INDEX_VERSION,
                books.n_codebooks,
                books.n_codewords,
                books.sub_dim,
                index.n_docs,
            )
        )
        f.write(np.ascontiguousarray(books.books, dtype="<f4").tobytes())
        f.write(index.doc_ids.astype("<u8", copy=False).tobytes())
        if index.packed is not None:
            f.write(index.packed.tobytes())
        else:
            f.write(index.codes.astype("<u2", copy=False).tobytes())


def load_index(path) -> RetrievalIndex:
    """Read an index file written by :func:`save_index`."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC_INDEX:
            raise BadMagicError(f"expected magic {MAGIC_INDEX!r} at byte 0, found {magic!r}")
        header_size = struct.calcsize("<IIIIQ")
        header = f.read(header_size)
        if len(header) != header_size:
            raise TruncatedFileError(f"file truncated at byte {8 + len(header)} in header")
        version, n_books, n_words, sub_dim, n_docs = struct.unpack("<IIIIQ", header)
        if version != INDEX_VERSION:
            raise VersionMismatchError(f"unsupported index version {version}")
        offset = 8 + header_size

        def read_block(n_bytes: int, what: str) -> bytes:
            nonlocal offset
            data = f.read(n_bytes)
            if len(data) != n_bytes:
                raise TruncatedFileError(
                    f"file truncated at byte {offset + len(data)} while reading {what}"
                )
            offset += n_bytes
            return data

        books = np.frombuffer(
            read_block(n_books * n_words * sub_dim * 4, "codebooks"), dtype="<f4"
        ).reshape(n_books, n_words, sub_dim)
        doc_ids = np.frombuffer(read_block(n_docs * 8, "doc ids"), dtype="<u8")
        if _is_pow2(n_words):
            nbytes = packed_code_nbytes(n_books, n_words)
            packed = np.frombuffer(read_block(n_docs * nbytes, "packed codes"), dtype=np.uint8)
            packed = packed.reshape(n_docs, nbytes)
            codes = unpack_codes_batch(packed, n_books, n_words)
            return RetrievalIndex(
                books=CodebookSet(books.copy()),
                codes=codes,
                doc_ids=doc_ids.copy(),
                packed=packed.copy(),
            )
        codes = np.frombuffer(read_block(n_docs * n_books * 2, "codes"), dtype="<u2")
        return RetrievalIndex(
            books=CodebookSet(books.copy()),
            codes=codes.reshape(n_docs, n_books).copy(),
            doc_ids=doc_ids.copy(),
        )
