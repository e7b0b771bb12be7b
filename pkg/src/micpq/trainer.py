"""Mini-batch training loop: Adam over the contrastive + MI objective.

Every stochastic choice (encoder init, codebook init, per-epoch shuffle,
per-step dropout masks and Gumbel noise) is derived from the single
config seed through the named streams in :mod:`micpq.rng`, so a training
run is a deterministic function of (config, data).

Checkpoint files carry magic ``MICPQCKP``: version u32 | d_in u32 |
d_out u32 | M u32 | K u32 | sub_dim u32 | step u64, followed by the
little-endian float32 arrays weight, bias, books and the Adam first and
second moments of each, in that order.  Parameters and moments are kept
in float32 in memory, so the round-trip is bit-exact.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .dataio import EmbeddingMatrix
from .encoder import EncoderParams, forward_batch, init_encoder
from .errors import (
    BadMagicError,
    InvalidConfigError,
    NonFiniteGradientError,
    TruncatedFileError,
    VersionMismatchError,
)
from .objectives import LossConfig, ParamGrads, loss_and_gradients
from .quantizer import CodebookSet, hard_assign_batch, init_codebooks

MAGIC_CHECKPOINT = b"MICPQCKP"
CHECKPOINT_VERSION = 1


def default_gumbel_temperature(n_codebooks: int, n_codewords: int) -> float:
    """10 for 16-bit codes, 5 otherwise (also 5 when bits are undefined)."""
    if n_codewords >= 2 and n_codewords & (n_codewords - 1) == 0:
        bits = n_codebooks * (n_codewords.bit_length() - 1)
        if bits == 16:
            return 10.0
    return 5.0


@dataclass(frozen=True)
class TrainConfig:
    n_codebooks: int
    n_codewords: int = 16
    sub_dim: int = 24
    learning_rate: float = 0.001
    batch_size: int = 256
    n_epochs: int = 100
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_path: str | None = None
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        if self.n_codebooks < 1 or self.n_codewords < 2 or self.sub_dim < 1:
            raise InvalidConfigError("need n_codebooks >= 1, n_codewords >= 2, sub_dim >= 1")
        if not self.learning_rate > 0:
            raise InvalidConfigError("learning_rate must be > 0")
        if self.batch_size < 2 or self.n_epochs < 1:
            raise InvalidConfigError("need batch_size >= 2 and n_epochs >= 1")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1 and self.adam_eps > 0):
            raise InvalidConfigError("invalid Adam constants")

    @property
    def d_out(self) -> int:
        return self.n_codebooks * self.sub_dim


@dataclass
class ModelState:
    """Encoder + codebooks plus their Adam moments and the step counter."""

    encoder: EncoderParams
    books: CodebookSet
    m_weight: np.ndarray
    v_weight: np.ndarray
    m_bias: np.ndarray
    v_bias: np.ndarray
    m_books: np.ndarray
    v_books: np.ndarray
    step: int = 0

    @property
    def sub_dim(self) -> int:
        return self.books.sub_dim

    def _arrays(self) -> list[tuple[str, np.ndarray]]:
        return [
            ("weight", self.encoder.weight),
            ("bias", self.encoder.bias),
            ("books", self.books.books),
            ("m_weight", self.m_weight),
            ("v_weight", self.v_weight),
            ("m_bias", self.m_bias),
            ("v_bias", self.v_bias),
            ("m_books", self.m_books),
            ("v_books", self.v_books),
        ]


@dataclass
class EpochRecord:
    epoch: int
    total_loss: float
    contrastive_loss: float
    mi_sum: float
    usage: np.ndarray  # (M, K) hard-assignment counts over the training data
    usage_entropy: float  # mean per-book entropy of the usage histogram, nats
    val_loss: float | None = None

    def format_line(self) -> str:
        usage = ";".join(",".join(str(c) for c in row) for row in self.usage)
        line = (
            f"epoch={self.epoch} total={self.total_loss:.6f} "
            f"contrastive={self.contrastive_loss:.6f} mi_sum={self.mi_sum:.6f} "
            f"usage_entropy={self.usage_entropy:.6f} usage={usage}"
        )
        if self.val_loss is not None:
            line += f" val={self.val_loss:.6f}"
        return line


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def format_lines(self) -> list[str]:
        return [r.format_line() for r in self.records]

    def write(self, path) -> None:
        with open(path, "w") as f:
            for line in self.format_lines():
                f.write(line + "\n")


def init_model(
    cfg: TrainConfig, warmup_batch: np.ndarray, codebook_init: str = "data"
) -> ModelState:
    """Build a fresh model.

    The encoder gets fan-scaled uniform weights; codebooks are sampled
    from the warmup batch's refined segments (``codebook_init="data"``,
    the default) or drawn from N(0, 0.1^2) (``"random"``, which is also
    the fallback when a book has fewer than K distinct warmup segments).
    """
    warmup = np.asarray(getattr(warmup_batch, "values", warmup_batch))
    if warmup.ndim != 2 or warmup.shape[0] < 1:
        raise InvalidConfigError("warmup batch must be a non-empty 2-D array")
    encoder = init_encoder(warmup.shape[1], cfg.d_out, cfg.seed)
    refined = forward_batch(encoder, warmup)
    books = init_codebooks(
        refined, cfg.n_codebooks, cfg.n_codewords, cfg.seed, strategy=codebook_init
    )
    return ModelState(
        encoder=encoder,
        books=books,
        m_weight=np.zeros_like(encoder.weight),
        v_weight=np.zeros_like(encoder.weight),
        m_bias=np.zeros_like(encoder.bias),
        v_bias=np.zeros_like(encoder.bias),
        m_books=np.zeros_like(books.books),
        v_books=np.zeros_like(books.books),
        step=0,
    )


def _adam_update(param, m, v, grad, lr, beta1, beta2, eps, t):
    grad = grad.astype(np.float64)
    m64 = beta1 * m.astype(np.float64) + (1.0 - beta1) * grad
    v64 = beta2 * v.astype(np.float64) + (1.0 - beta2) * grad * grad
    m_hat = m64 / (1.0 - beta1**t)
    v_hat = v64 / (1.0 - beta2**t)
    new_param = param.astype(np.float64) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return (
        new_param.astype(param.dtype),
        m64.astype(m.dtype),
        v64.astype(v.dtype),
    )


def adam_step(
    state: ModelState,
    grads: ParamGrads,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ModelState:
    """One bias-corrected Adam update of encoder and codebooks, in place."""
    for name, grad in (("weight", grads.weight), ("bias", grads.bias), ("books", grads.books)):
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError(
                f"non-finite gradient for {name} at step {state.step}"
            )
    if grads.weight.shape != state.encoder.weight.shape or grads.books.shape != state.books.books.shape:
        raise InvalidConfigError("gradient shapes do not match the model")
    t = state.step + 1
    w, mw, vw = _adam_update(
        state.encoder.weight, state.m_weight, state.v_weight, grads.weight, lr, beta1, beta2, eps, t
    )
    b, mb, vb = _adam_update(
        state.encoder.bias, state.m_bias, state.v_bias, grads.bias, lr, beta1, beta2, eps, t
    )
    c, mc, vc = _adam_update(
        state.books.books, state.m_books, state.v_books, grads.books, lr, beta1, beta2, eps, t
    )
    state.encoder = EncoderParams(w, b)
    state.books = CodebookSet(c)
    state.m_weight, state.v_weight = mw, vw
    state.m_bias, state.v_bias = mb, vb
    state.m_books, state.v_books = mc, vc
    state.step = t
    return state


def usage_histogram(state: ModelState, data: np.ndarray) -> np.ndarray:
    """(M, K) hard-assignment counts over a corpus, dropout disabled."""
    values = np.asarray(getattr(data, "values", data))
    refined = forward_batch(state.encoder, values)
    sub = state.books.sub_dim
    counts = np.empty((state.books.n_codebooks, state.books.n_codewords), dtype=np.int64)
    for m in range(state.books.n_codebooks):
        assigned = hard_assign_batch(refined[:, m * sub:(m + 1) * sub], state.books.books[m])
        counts[m] = np.bincount(assigned, minlength=state.books.n_codewords)
    return counts


def usage_entropy(counts: np.ndarray) -> float:
    """Mean per-book entropy (nats) of usage histograms; 0*log(0) = 0."""
    counts = np.asarray(counts, dtype=np.float64)
    probs = counts / counts.sum(axis=1, keepdims=True)
    probs = np.maximum(probs, 1e-300)
    per_book = -(probs * np.log(probs) * (counts > 0)).sum(axis=1)
    return float(per_book.mean())


def train(
    cfg: TrainConfig,
    data: EmbeddingMatrix,
    val: EmbeddingMatrix | None = None,
    codebook_init: str = "data",
    on_epoch=None,
) -> tuple[ModelState, TrainLog]:
    """Run the full training loop; deterministic given (cfg, data).

    ``on_epoch``, when given, is called with each finished EpochRecord.
    """
    values = data.values
    n_docs = values.shape[0]
    if n_docs < 2:
        raise InvalidConfigError("training needs at least 2 documents")

    first_perm = rng.spawn(cfg.seed, rng.STREAM_SHUFFLE, 0).permutation(n_docs)
    warmup = values[first_perm[: min(cfg.batch_size, n_docs)]]
    state = init_model(cfg, warmup, codebook_init=codebook_init)

    log = TrainLog()
    global_step = 0
    for epoch in range(cfg.n_epochs):
        perm = (
            first_perm
            if epoch == 0
            else rng.spawn(cfg.seed, rng.STREAM_SHUFFLE, epoch).permutation(n_docs)
        )
        sums = np.zeros(3)
        n_steps = 0
        for start in range(0, n_docs, cfg.batch_size):
            batch_idx = perm[start:start + cfg.batch_size]
            if batch_idx.shape[0] < 2:
                continue  # a trailing single document cannot form a contrastive batch
            step_seed = rng.derive_seed(cfg.seed, rng.STREAM_STEP, global_step)
            try:
                loss_values, grads = loss_and_gradients(
                    state.encoder, state.books, values[batch_idx], cfg.loss, step_seed
                )
                adam_step(state, grads, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
            except NonFiniteGradientError as err:
                raise NonFiniteGradientError(
                    f"epoch {epoch}, step {global_step}: {err}"
                ) from err
            sums += (loss_values.total, loss_values.contrastive, loss_values.mi_per_book.sum())
            n_steps += 1
            global_step += 1

        counts = usage_histogram(state, values)
        val_loss = None
        if val is not None:
            val_seed = rng.derive_seed(cfg.seed, rng.STREAM_STEP, 2**31 + epoch)
            val_values, _ = loss_and_gradients(
                state.encoder, state.books, val.values, cfg.loss, val_seed
            )
            val_loss = val_values.total
        record = EpochRecord(
            epoch=epoch,
            total_loss=float(sums[0] / n_steps),
            contrastive_loss=float(sums[1] / n_steps),
            mi_sum=float(sums[2] / n_steps),
            usage=counts,
            usage_entropy=usage_entropy(counts),
            val_loss=val_loss,
        )
        log.records.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if cfg.checkpoint_path and cfg.checkpoint_every > 0 and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(state, cfg.checkpoint_path)

    if cfg.checkpoint_path:
        save_checkpoint(state, cfg.checkpoint_path)
    return state, log


def save_checkpoint(state: ModelState, path) -> None:
    """Write the model, Adam moments and step counter; bit-exact round-trip."""
    header = struct.pack(
        "<IIIIIIQ",
        CHECKPOINT_VERSION,
        state.encoder.d_in,
        state.encoder.d_out,
        state.books.n_codebooks,
        state.books.n_codewords,
        state.books.sub_dim,
        state.step,
    )
    with open(path, "wb") as f:
        f.write(MAGIC_CHECKPOINT)
        f.write(header)
        for _, arr in state._arrays():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> ModelState:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC_CHECKPOINT:
            raise BadMagicError(f"expected magic {MAGIC_CHECKPOINT!r} at byte 0, found {magic!r}")
        header_size = struct.calcsize("<IIIIIIQ")
        header = f.read(header_size)
        if len(header) != header_size:
            raise TruncatedFileError(f"file truncated at byte {8 + len(header)} in header")
        version, d_in, d_out, n_books, n_words, sub_dim, step = struct.unpack("<IIIIIIQ", header)
        if version != CHECKPOINT_VERSION:
            raise VersionMismatchError(f"unsupported checkpoint version {version}")
        if d_out != n_books * sub_dim:
            raise InvalidConfigError(
                f"inconsistent checkpoint dimensions: d_out={d_out}, M*sub_dim={n_books * sub_dim}"
            )
        shapes = [
            (d_out, d_in),
            (d_out,),
            (n_books, n_words, sub_dim),
            (d_out, d_in),
            (d_out, d_in),
            (d_out,),
            (d_out,),
            (n_books, n_words, sub_dim),
            (n_books, n_words, sub_dim),
        ]
        offset = 8 + header_size
        arrays = []
        for shape in shapes:
            n_bytes = int(np.prod(shape)) * 4
            payload = f.read(n_bytes)
            if len(payload) != n_bytes:
                raise TruncatedFileError(
                    f"file truncated at byte {offset + len(payload)} in parameter section"
                )
            arrays.append(np.frombuffer(payload, dtype="<f4").reshape(shape).copy())
            offset += n_bytes
    weight, bias, books, mw, vw, mb, vb, mc, vc = arrays
    return ModelState(
        encoder=EncoderParams(weight, bias),
        books=CodebookSet(books),
        m_weight=mw,
        v_weight=vw,
        m_bias=mb,
        v_bias=vb,
        m_books=mc,
        v_books=vc,
        step=step,
    )
