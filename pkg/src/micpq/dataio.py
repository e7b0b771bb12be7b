"""Binary corpus formats and synthetic corpus generation.

On-disk layout (all fields little-endian, floats IEEE-754 binary32):

* embedding file: magic ``MICPQEMB`` | version u32 (=1) | n_docs u64 |
  dim u32 | n_docs*dim f32, row-major
* label file:     magic ``MICPQLBL`` | version u32 (=1) | n_docs u64 |
  n_docs u32 class ids

Labels are class ids that must be contiguous from 0.  The synthetic
generator draws everything from a Philox stream (see :mod:`micpq.rng`),
so identical specs produce bit-identical corpora.  I/O failures surface
as the standard :class:`OSError`.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng
from .errors import (
    BadMagicError,
    InvalidSpecError,
    LengthMismatchError,
    NonContiguousClassesError,
    NonFiniteValueError,
    TruncatedFileError,
    VersionMismatchError,
)

MAGIC_EMBEDDINGS = b"MICPQEMB"
MAGIC_LABELS = b"MICPQLBL"
FORMAT_VERSION = 1


@dataclass
class EmbeddingMatrix:
    """Row-major matrix of float32 document embeddings."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise InvalidSpecError(
                f"embedding matrix must be 2-D and non-empty, got shape {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            bad = int(np.flatnonzero(~np.isfinite(self.values.ravel()))[0])
            raise NonFiniteValueError(f"non-finite embedding value at flat position {bad}")

    @property
    def n_docs(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class LabelVector:
    """Per-document class ids, contiguous from 0."""

    labels: np.ndarray

    def __post_init__(self) -> None:
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint32)
        if self.labels.ndim != 1 or self.labels.shape[0] < 1:
            raise InvalidSpecError("label vector must be 1-D and non-empty")
        present = np.unique(self.labels)
        if present[0] != 0 or present[-1] != len(present) - 1:
            raise NonContiguousClassesError(
                f"class ids must be contiguous from 0, got {present.tolist()}"
            )

    @property
    def n_docs(self) -> int:
        return self.labels.shape[0]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1


@dataclass(frozen=True)
class MixtureSpec:
    """Parameters of a seeded Gaussian-mixture corpus."""

    n_docs: int
    dim: int
    n_classes: int
    separation: float
    noise_sigma: float
    seed: int

    def __post_init__(self) -> None:
        if self.n_docs < 1 or self.dim < 1 or self.n_classes < 1:
            raise InvalidSpecError("n_docs, dim and n_classes must all be >= 1")
        if self.n_classes > self.n_docs:
            raise InvalidSpecError("n_classes must not exceed n_docs")
        if self.separation < 0:
            raise InvalidSpecError("separation must be >= 0")
        if not self.noise_sigma > 0:
            raise InvalidSpecError("noise_sigma must be > 0")


def _read_exact(f, n: int, offset: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise TruncatedFileError(
            f"file truncated at byte {offset + len(data)} while reading {what}"
        )
    return data


def _read_header(f, magic: bytes):
    raw_magic = f.read(len(magic))
    if len(raw_magic) < len(magic) or raw_magic != magic:
        raise BadMagicError(
            f"expected magic {magic!r} at byte 0, found {raw_magic!r}"
        )
    offset = len(magic)
    version = struct.unpack("<I", _read_exact(f, 4, offset, "version"))[0]
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"unsupported format version {version} at byte {offset}"
        )
    offset += 4
    n_docs = struct.unpack("<Q", _read_exact(f, 8, offset, "n_docs"))[0]
    return n_docs, offset + 8


def write_embeddings(matrix: EmbeddingMatrix, path) -> None:
    """Write an embedding matrix; exact inverse of :func:`read_embeddings`."""
    if not np.all(np.isfinite(matrix.values)):
        bad = int(np.flatnonzero(~np.isfinite(matrix.values.ravel()))[0])
        raise NonFiniteValueError(f"refusing to write non-finite value at flat position {bad}")
    with open(path, "wb") as f:
        f.write(MAGIC_EMBEDDINGS)
        f.write(struct.pack("<IQI", FORMAT_VERSION, matrix.n_docs, matrix.dim))
        f.write(matrix.values.astype("<f4", copy=False).tobytes())


def read_embeddings(path) -> EmbeddingMatrix:
    """Read an embedding file, validating header, size and finiteness."""
    with open(path, "rb") as f:
        n_docs, offset = _read_header(f, MAGIC_EMBEDDINGS)
        dim = struct.unpack("<I", _read_exact(f, 4, offset, "dim"))[0]
        offset += 4
        payload = _read_exact(f, n_docs * dim * 4, offset, "embedding payload")
    values = np.frombuffer(payload, dtype="<f4").reshape(n_docs, dim)
    if not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.isfinite(values.ravel()))[0])
        raise NonFiniteValueError(
            f"non-finite value at byte {offset + bad * 4} (element {bad})"
        )
    return EmbeddingMatrix(values.copy())


def write_labels(labels: LabelVector, path) -> None:
    """Write a label file; exact inverse of :func:`read_labels`."""
    with open(path, "wb") as f:
        f.write(MAGIC_LABELS)
        f.write(struct.pack("<IQ", FORMAT_VERSION, labels.n_docs))
        f.write(labels.labels.astype("<u4", copy=False).tobytes())


def read_labels(path, expected_n_docs: int | None = None) -> LabelVector:
    """Read a label file.

    When ``expected_n_docs`` is given (usually the paired embedding
    matrix's row count), a mismatch raises :class:`LengthMismatchError`.
    """
    with open(path, "rb") as f:
        n_docs, offset = _read_header(f, MAGIC_LABELS)
        payload = _read_exact(f, n_docs * 4, offset, "label payload")
    labels = np.frombuffer(payload, dtype="<u4").copy()
    if expected_n_docs is not None and n_docs != expected_n_docs:
        raise LengthMismatchError(
            f"label file has {n_docs} entries but embeddings have {expected_n_docs} rows"
        )
    return LabelVector(labels)


def synth_mixture(spec: MixtureSpec) -> tuple[EmbeddingMatrix, LabelVector]:
    """Generate a seeded Gaussian-mixture corpus.

    Class centers are standard-normal draws scaled by ``separation``;
    each document is its class center plus isotropic noise with standard
    deviation ``noise_sigma``.  Labels go round-robin (doc i gets class
    i mod n_classes) so class counts differ by at most one.
    """
    gen = rng.spawn(spec.seed)
    centers = gen.standard_normal((spec.n_classes, spec.dim)) * spec.separation
    labels = np.arange(spec.n_docs, dtype=np.uint32) % spec.n_classes
    noise = gen.normal(0.0, spec.noise_sigma, size=(spec.n_docs, spec.dim))
    values = (centers[labels] + noise).astype(np.float32)
    return EmbeddingMatrix(values), LabelVector(labels)


def default_paths(out_dir) -> tuple[Path, Path]:
    """Canonical (embeddings, labels) file names inside an output directory."""
    out = Path(out_dir)
    return out / "data.emb", out / "data.lbl"
