"""The learnable refining map: one affine layer with ReLU.

Input embeddings of width ``d_in`` are mapped to nonnegative refined
vectors of width ``d_out = n_codebooks * sub_dim``, which downstream code
slices into equal-length segments, one per codebook.  Two stochastic
views of a document are produced by applying two independent inverted
dropout masks to the input embedding before the affine layer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import DimMismatchError, InvalidConfigError, NonFiniteInputError


@dataclass
class EncoderParams:
    """Affine layer weights: ``relu(weight @ z + bias)``."""

    weight: np.ndarray  # (d_out, d_in)
    bias: np.ndarray    # (d_out,)

    def __post_init__(self) -> None:
        self.weight = np.ascontiguousarray(self.weight)
        self.bias = np.ascontiguousarray(self.bias)
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise InvalidConfigError("weight must be 2-D and bias 1-D")
        if self.bias.shape[0] != self.weight.shape[0]:
            raise DimMismatchError(
                f"bias length {self.bias.shape[0]} != weight rows {self.weight.shape[0]}"
            )
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise NonFiniteInputError("encoder parameters must be finite")

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class RefinedEmbedding:
    """A refined vector together with its segment width."""

    values: np.ndarray
    sub_dim: int

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)
        if self.values.ndim != 1:
            raise DimMismatchError("refined embedding must be a vector")
        if self.values.shape[0] % self.sub_dim != 0:
            raise DimMismatchError(
                f"length {self.values.shape[0]} is not a multiple of sub_dim {self.sub_dim}"
            )

    @property
    def n_segments(self) -> int:
        return self.values.shape[0] // self.sub_dim

    def segment(self, m: int) -> np.ndarray:
        """View of segment m (no copy)."""
        return self.values[m * self.sub_dim:(m + 1) * self.sub_dim]

    @property
    def segments(self) -> list[np.ndarray]:
        return [self.segment(m) for m in range(self.n_segments)]


@dataclass(frozen=True)
class DropoutConfig:
    p_drop: float
    seed: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_drop < 1.0:
            raise InvalidConfigError(f"p_drop must be in [0, 1), got {self.p_drop}")


def forward(params: EncoderParams, z: np.ndarray, sub_dim: int | None = None) -> RefinedEmbedding:
    """Refine one embedding: ``max(0, W z + b)``, sliced into segments.

    ``sub_dim`` defaults to the full output width (a single segment);
    pass the paired codebooks' sub_dim to get per-codebook slices.
    """
    z = np.asarray(z)
    if z.ndim != 1 or z.shape[0] != params.d_in:
        raise DimMismatchError(f"expected input of length {params.d_in}, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise NonFiniteInputError("encoder input must be finite")
    values = np.maximum(params.weight @ z + params.bias, 0)
    return RefinedEmbedding(values, sub_dim if sub_dim is not None else params.d_out)


def forward_batch(params: EncoderParams, batch: np.ndarray) -> np.ndarray:
    """Row-wise refinement of a batch; row i depends only on input row i."""
    batch = np.asarray(batch)
    if batch.ndim != 2 or batch.shape[1] != params.d_in:
        raise DimMismatchError(
            f"expected batch of width {params.d_in}, got shape {batch.shape}"
        )
    return np.maximum(batch @ params.weight.T + params.bias, 0)


def dropout_view(z: np.ndarray, cfg: DropoutConfig) -> np.ndarray:
    """Inverted dropout: zero each coordinate with probability p_drop,
    scale survivors by 1/(1-p_drop).  Accepts a vector or a row batch."""
    z = np.asarray(z)
    if cfg.p_drop == 0.0:
        return z
    gen = rng.spawn(cfg.seed)
    keep = gen.random(z.shape) >= cfg.p_drop
    return z * keep / (1.0 - cfg.p_drop)


def init_encoder(d_in: int, d_out: int, seed: int) -> EncoderParams:
    """Fan-scaled uniform weight init, zero bias."""
    gen = rng.spawn(seed, rng.STREAM_ENCODER_INIT)
    scale = np.sqrt(6.0 / (d_in + d_out))
    weight = gen.uniform(-scale, scale, size=(d_out, d_in)).astype(np.float32)
    return EncoderParams(weight, np.zeros(d_out, dtype=np.float32))
