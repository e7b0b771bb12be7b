"""Training objectives: probabilistic contrastive loss plus a per-codebook
mutual-information regularizer, with exact gradients.

The loss pipeline for one mini-batch:

1. two inverted-dropout views of every input embedding,
2. encoder forward (affine + ReLU), sliced into segments,
3. per segment, a Gumbel-softmax mixture over codewords (fresh noise per
   view) which stands in for the stochastic hard assignment,
4. a two-view contrastive loss over the concatenated mixtures, where the
   positive pair's similarity is shared by both views' terms,
5. minus ``mi_weight`` times the sum over codebooks of
   ``H(usage marginal) - alpha * H(assignment | document)``, computed
   from the noise-free assignment probabilities.

:func:`expected_loss_oracle` enumerates every joint hard-assignment
outcome to compute the exact expected contrastive loss that the
Gumbel-softmax estimator approximates; the Monte-Carlo samplers draw
hard or soft estimates of the same quantity for convergence tests.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import rng
from .encoder import DropoutConfig, EncoderParams, dropout_view
from .errors import (
    DimMismatchError,
    InvalidConfigError,
    NonPositiveTemperatureError,
    RowNotNormalizedError,
    TooLargeToEnumerateError,
    ZeroNormError,
)
from .quantizer import CodebookSet, assign_probs, gumbel_from_uniform

ZERO_NORM_EPS = 1e-12
ENTROPY_LOG_EPS = 1e-12
_EXCLUDED = -1e30


@dataclass(frozen=True)
class LossConfig:
    """Hyper-parameters of the training objective."""

    tau_cl: float = 0.3
    tau_gumbel: float = 5.0
    alpha: float = 0.1
    mi_weight: float = 0.1
    p_drop: float = 0.3

    def __post_init__(self) -> None:
        if not self.tau_cl > 0:
            raise NonPositiveTemperatureError(f"tau_cl must be > 0, got {self.tau_cl}")
        if not self.tau_gumbel > 0:
            raise NonPositiveTemperatureError(
                f"tau_gumbel must be > 0, got {self.tau_gumbel}"
            )
        if self.alpha < 0 or self.mi_weight < 0:
            raise InvalidConfigError("alpha and mi_weight must be >= 0")
        if not 0.0 <= self.p_drop < 1.0:
            raise InvalidConfigError(f"p_drop must be in [0, 1), got {self.p_drop}")


@dataclass
class BatchViews:
    """Two views of a batch: concatenated soft codeword mixtures per doc."""

    view1: np.ndarray  # (B, D)
    view2: np.ndarray  # (B, D)

    def __post_init__(self) -> None:
        self.view1 = np.asarray(self.view1)
        self.view2 = np.asarray(self.view2)
        if self.view1.shape != self.view2.shape or self.view1.ndim != 2:
            raise DimMismatchError(
                f"views must be equal-shaped 2-D arrays, got "
                f"{self.view1.shape} and {self.view2.shape}"
            )

    @property
    def batch_size(self) -> int:
        return self.view1.shape[0]


@dataclass
class MIStats:
    """Entropy decomposition of one codebook's assignment probabilities."""

    marginal: np.ndarray
    h_marginal: float
    h_conditional: float
    mi: float


@dataclass
class LossValues:
    total: float
    contrastive: float
    mi_per_book: np.ndarray


@dataclass
class ParamGrads:
    weight: np.ndarray
    bias: np.ndarray
    books: np.ndarray


def cosine_sim(h1: np.ndarray, h2: np.ndarray) -> float:
    """Cosine similarity; both vectors must have norm > 1e-12."""
    h1 = np.asarray(h1, dtype=np.float64)
    h2 = np.asarray(h2, dtype=np.float64)
    n1 = np.linalg.norm(h1)
    n2 = np.linalg.norm(h2)
    if n1 <= ZERO_NORM_EPS or n2 <= ZERO_NORM_EPS:
        raise ZeroNormError("cosine similarity undefined for (near-)zero vectors")
    return float(h1 @ h2 / (n1 * n2))


def _pair_masks(batch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """(positive selector, negative mask) for a 2B-row representation stack.

    Rows 0..B-1 are the first view, B..2B-1 the second.  Row r's positive
    column is its partner view of the same document; the negative mask
    zeroes both views of the row's own document.
    """
    n_rows = 2 * batch_size
    cols = (np.arange(n_rows) + batch_size) % n_rows
    pos_sel = np.zeros((n_rows, n_rows))
    pos_sel[np.arange(n_rows), cols] = 1.0
    neg_mask = np.ones((n_rows, n_rows))
    for x in range(batch_size):
        neg_mask[[x, batch_size + x], x] = 0.0
        neg_mask[[x, batch_size + x], batch_size + x] = 0.0
    return pos_sel, neg_mask


def _contrastive_losses(h_all: np.ndarray, tau_cl: float) -> np.ndarray:
    """Contrastive loss for a stack of instances.

    ``h_all`` has shape (T, 2B, D): T independent instances of 2B
    representations (first-view rows then second-view rows).  Returns
    the (T,) loss values.
    """
    if not tau_cl > 0:
        raise NonPositiveTemperatureError(f"tau_cl must be > 0, got {tau_cl}")
    h_all = np.asarray(h_all, dtype=np.float64)
    n_instances, n_rows, _ = h_all.shape
    batch_size = n_rows // 2
    norms = np.linalg.norm(h_all, axis=2)
    if np.any(norms <= ZERO_NORM_EPS):
        raise ZeroNormError("contrastive loss undefined for (near-)zero representations")
    normed = h_all / norms[:, :, None]
    logits = np.einsum("tid,tjd->tij", normed, normed) / tau_cl
    pos_col = (np.arange(n_rows) + batch_size) % n_rows
    pos = logits[:, np.arange(n_rows), pos_col]
    _, neg_mask = _pair_masks(batch_size)
    masked = np.where(neg_mask[None].astype(bool), logits, -np.inf)
    shift = np.maximum(pos, masked.max(axis=2))
    denom = np.exp(pos - shift) + np.exp(masked - shift[:, :, None]).sum(axis=2)
    log_ratio = pos - (np.log(denom) + shift)
    return -log_ratio.sum(axis=1) / batch_size


def contrastive_loss(views: BatchViews, tau_cl: float) -> float:
    """Two-view contrastive loss over a batch of codeword mixtures."""
    stacked = np.concatenate([views.view1, views.view2], axis=0)[None]
    return float(_contrastive_losses(stacked, tau_cl)[0])


def mi_term(probs_batch: np.ndarray, alpha: float) -> MIStats:
    """Entropy decomposition of a batch of assignment probability rows.

    marginal = row mean; mi = H(marginal) - alpha * mean row entropy,
    with 0*log(0) taken as 0.
    """
    probs = np.asarray(probs_batch, dtype=np.float64)
    if probs.ndim != 2:
        raise DimMismatchError("probs batch must be 2-D")
    row_sums = probs.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6) or np.any(probs < 0):
        raise RowNotNormalizedError("every probability row must be >= 0 and sum to 1")
    marginal = probs.mean(axis=0)
    h_marginal = float(-(marginal * np.log(np.maximum(marginal, ENTROPY_LOG_EPS))).sum())
    h_conditional = float(
        -(probs * np.log(np.maximum(probs, ENTROPY_LOG_EPS))).sum() / probs.shape[0]
    )
    return MIStats(
        marginal=marginal,
        h_marginal=h_marginal,
        h_conditional=h_conditional,
        mi=h_marginal - alpha * h_conditional,
    )


def total_loss(views: BatchViews, probs_per_book: list[np.ndarray], cfg: LossConfig) -> float:
    """Contrastive loss minus mi_weight times the summed per-book MI."""
    mi_sum = sum(mi_term(p, cfg.alpha).mi for p in probs_per_book)
    return contrastive_loss(views, cfg.tau_cl) - cfg.mi_weight * mi_sum


# --- exact expectation oracle and Monte-Carlo samplers -------------------

def _slot_probs(refined1: np.ndarray, refined2: np.ndarray, books: CodebookSet) -> np.ndarray:
    """Noise-free assignment probabilities per (view, doc, book): (2,B,M,K)."""
    views = np.stack(
        [np.asarray(refined1, dtype=np.float64), np.asarray(refined2, dtype=np.float64)]
    )
    batch = views.shape[1]
    sub = books.sub_dim
    probs = np.empty((2, batch, books.n_codebooks, books.n_codewords))
    for i in range(2):
        for x in range(batch):
            for m in range(books.n_codebooks):
                seg = views[i, x, m * sub:(m + 1) * sub]
                probs[i, x, m] = assign_probs(seg, books.books[m].astype(np.float64))
    return probs


def _slot_sqdists(refined1: np.ndarray, refined2: np.ndarray, books: CodebookSet) -> np.ndarray:
    """Squared distances per (view, doc, book, codeword): (2,B,M,K)."""
    views = np.stack(
        [np.asarray(refined1, dtype=np.float64), np.asarray(refined2, dtype=np.float64)]
    )
    batch = views.shape[1]
    sub = books.sub_dim
    d2 = np.empty((2, batch, books.n_codebooks, books.n_codewords))
    for m in range(books.n_codebooks):
        seg = views[:, :, m * sub:(m + 1) * sub]
        diff = seg[:, :, None, :] - books.books[m][None, None, :, :].astype(np.float64)
        d2[:, :, m, :] = np.einsum("ibkd,ibkd->ibk", diff, diff)
    return d2


def _stack_hard_codes(codes: np.ndarray, books: CodebookSet) -> np.ndarray:
    """Codeword concatenations for (T,2,B,M) index draws: (T, 2B, D)."""
    n_draws, _, batch, _ = codes.shape
    sub = books.sub_dim
    h = np.empty((n_draws, 2, batch, books.dim))
    for m in range(books.n_codebooks):
        h[..., m * sub:(m + 1) * sub] = books.books[m].astype(np.float64)[codes[..., m]]
    return np.concatenate([h[:, 0], h[:, 1]], axis=1)


def expected_loss_oracle(
    refined1: np.ndarray,
    refined2: np.ndarray,
    books: CodebookSet,
    tau_cl: float,
    max_outcomes: int = 250_000,
) -> float:
    """Exact expected contrastive loss under stochastic hard assignment.

    Enumerates every joint codeword outcome over all documents, views and
    codebooks, weighting each by the product of its per-slot assignment
    probabilities.  Only feasible for tiny instances; raises
    :class:`TooLargeToEnumerateError` beyond ``max_outcomes`` joint states.
    """
    probs = _slot_probs(refined1, refined2, books)
    batch = probs.shape[1]
    n_books = books.n_codebooks
    n_words = books.n_codewords
    n_slots = 2 * batch * n_books
    n_outcomes = n_words**n_slots
    if n_outcomes > max_outcomes:
        raise TooLargeToEnumerateError(
            f"{n_outcomes} joint outcomes exceed the cap of {max_outcomes}"
        )
    radix = n_words ** np.arange(n_slots - 1, -1, -1, dtype=np.int64)
    codes = (np.arange(n_outcomes, dtype=np.int64)[:, None] // radix) % n_words
    codes = codes.reshape(n_outcomes, 2, batch, n_books)
    weights = np.ones(n_outcomes)
    for i in range(2):
        for x in range(batch):
            for m in range(n_books):
                weights *= probs[i, x, m, codes[:, i, x, m]]
    losses = _contrastive_losses(_stack_hard_codes(codes, books), tau_cl)
    return float(weights @ losses)


def sample_hard_losses(
    refined1: np.ndarray,
    refined2: np.ndarray,
    books: CodebookSet,
    tau_cl: float,
    n_samples: int,
    seed: int,
) -> np.ndarray:
    """Contrastive losses of hard Gumbel-argmax assignment draws.

    Each draw picks ``argmax_k(-d^2_k + gumbel_k)`` per slot, which
    samples the assignment distribution exactly, so the mean converges
    to :func:`expected_loss_oracle`.
    """
    d2 = _slot_sqdists(refined1, refined2, books)
    noise = gumbel_from_uniform(rng.spawn(seed).random((n_samples,) + d2.shape))
    codes = np.argmax(-d2[None] + noise, axis=-1)
    return _contrastive_losses(_stack_hard_codes(codes, books), tau_cl)


def sample_soft_losses(
    refined1: np.ndarray,
    refined2: np.ndarray,
    books: CodebookSet,
    tau_cl: float,
    tau_gumbel: float,
    n_samples: int,
    seed: int,
) -> np.ndarray:
    """Contrastive losses of Gumbel-softmax mixture draws at a fixed
    temperature (the quantity the trainer's single-sample estimate uses)."""
    if not tau_gumbel > 0:
        raise NonPositiveTemperatureError(f"tau_gumbel must be > 0, got {tau_gumbel}")
    d2 = _slot_sqdists(refined1, refined2, books)
    noise = gumbel_from_uniform(rng.spawn(seed).random((n_samples,) + d2.shape))
    logits = -(d2[None] + noise) / tau_gumbel
    logits -= logits.max(axis=-1, keepdims=True)
    soft = np.exp(logits)
    soft /= soft.sum(axis=-1, keepdims=True)
    sub = books.sub_dim
    batch = d2.shape[1]
    h = np.empty((n_samples, 2, batch, books.dim))
    for m in range(books.n_codebooks):
        h[..., m * sub:(m + 1) * sub] = soft[..., m, :] @ books.books[m].astype(np.float64)
    return _contrastive_losses(np.concatenate([h[:, 0], h[:, 1]], axis=1), tau_cl)


# --- differentiable pipeline ----------------------------------------------

def _softmax_rows_graph(logits: ad.Tensor) -> ad.Tensor:
    shift = logits.data.max(axis=1, keepdims=True)  # constant; softmax is shift-invariant
    e = ad.exp(logits - shift)
    return e / ad.sum_(e, axis=1, keepdims=True)

def _sqdist_graph(segments: ad.Tensor, book: ad.Tensor) -> ad.Tensor:
    zz = ad.sum_(segments * segments, axis=1, keepdims=True)
    cc = ad.sum_(book * book, axis=1)
    return zz - 2.0 * ad.matmul(segments, ad.transpose(book)) + cc


def _contrastive_graph(h_cat: ad.Tensor, batch_size: int, tau_cl: float) -> ad.Tensor:
    norm2 = ad.sum_(h_cat * h_cat, axis=1, keepdims=True)
    if np.any(norm2.data <= ZERO_NORM_EPS**2):
        raise ZeroNormError("contrastive loss undefined for (near-)zero representations")
    normed = h_cat / ad.sqrt(norm2)
    logits = ad.matmul(normed, ad.transpose(normed)) * (1.0 / tau_cl)
    pos_sel, neg_mask = _pair_masks(batch_size)
    pos = ad.sum_(logits * pos_sel, axis=1)
    masked = logits * neg_mask + (1.0 - neg_mask) * _EXCLUDED
    shift = np.maximum(pos.data, masked.data.max(axis=1))  # constant
    denom = ad.exp(pos - shift) + ad.sum_(ad.exp(masked - shift[:, None]), axis=1)
    log_ratio = pos - (ad.log(denom) + shift)
    return ad.sum_(log_ratio) * (-1.0 / batch_size)


def _mi_graph(probs: ad.Tensor, alpha: float) -> ad.Tensor:
    n_rows = probs.data.shape[0]
    marginal = ad.sum_(probs, axis=0) * (1.0 / n_rows)
    h_marginal = -ad.sum_(marginal * ad.log_clamped(marginal, ENTROPY_LOG_EPS))
    h_conditional = ad.sum_(probs * ad.log_clamped(probs, ENTROPY_LOG_EPS)) * (-1.0 / n_rows)
    return h_marginal - alpha * h_conditional


def loss_and_gradients(
    params: EncoderParams,
    books: CodebookSet,
    batch: np.ndarray,
    cfg: LossConfig,
    seed: int,
) -> tuple[LossValues, ParamGrads]:
    """Evaluate the full objective on one mini-batch and differentiate it.

    Runs dropout views -> encoder -> per-view Gumbel-softmax mixtures ->
    contrastive loss, plus the MI term on the noise-free assignment
    probabilities of both views, and returns exact gradients with respect
    to the encoder weights, bias and every codeword.  All noise (two
    dropout masks, two Gumbel blocks) is derived from ``seed``, so equal
    seeds give bit-identical results.
    """
    data = np.asarray(getattr(batch, "values", batch), dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 1:
        raise DimMismatchError("batch must be a non-empty 2-D array")
    if data.shape[1] != params.d_in:
        raise DimMismatchError(
            f"batch width {data.shape[1]} != encoder input width {params.d_in}"
        )
    if params.d_out != books.dim:
        raise DimMismatchError(
            f"encoder output width {params.d_out} != codebooks' total width {books.dim}"
        )
    batch_size = data.shape[0]
    n_books, sub = books.n_codebooks, books.sub_dim

    view_seeds = [rng.derive_seed(seed, s) for s in range(4)]
    views = [
        dropout_view(data, DropoutConfig(cfg.p_drop, view_seeds[i])) for i in range(2)
    ]
    gumbels = [
        gumbel_from_uniform(
            rng.spawn(view_seeds[2 + i]).random((batch_size, n_books, books.n_codewords))
        )
        for i in range(2)
    ]

    weight = ad.Tensor(params.weight)
    bias = ad.Tensor(params.bias)
    book_nodes = [ad.Tensor(books.books[m]) for m in range(n_books)]

    h_views = []
    probs_nodes: list[list[ad.Tensor]] = [[] for _ in range(n_books)]
    for i in range(2):
        refined = ad.relu(ad.matmul(ad.Tensor(views[i]), ad.transpose(weight)) + bias)
        mixtures = []
        for m in range(n_books):
            seg = refined[:, m * sub:(m + 1) * sub]
            d2 = _sqdist_graph(seg, book_nodes[m])
            soft = _softmax_rows_graph((d2 + gumbels[i][:, m, :]) * (-1.0 / cfg.tau_gumbel))
            probs_nodes[m].append(_softmax_rows_graph(d2 * -1.0))
            mixtures.append(ad.matmul(soft, book_nodes[m]))
        h_views.append(ad.concat(mixtures, axis=1))

    cl_node = _contrastive_graph(ad.concat(h_views, axis=0), batch_size, cfg.tau_cl)
    mi_nodes = [
        _mi_graph(ad.concat(probs_nodes[m], axis=0), cfg.alpha) for m in range(n_books)
    ]
    mi_sum = mi_nodes[0]
    for node in mi_nodes[1:]:
        mi_sum = mi_sum + node
    total = cl_node + (-cfg.mi_weight) * mi_sum
    ad.backward(total)

    values = LossValues(
        total=float(total.data),
        contrastive=float(cl_node.data),
        mi_per_book=np.array([float(node.data) for node in mi_nodes]),
    )
    grads = ParamGrads(
        weight=weight.grad,
        bias=bias.grad,
        books=np.stack([node.grad for node in book_nodes]),
    )
    return values, grads
