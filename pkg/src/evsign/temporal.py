"""Local token fusion and gloss-aware temporal aggregation.

Visual tokens (one per segment) are fused 4-to-1 by windowed
self-attention plus temporal max-pooling, then re-aggregated from the
visual sequence through mask-gated cross-attention. The gate combines a
learned feature similarity with a fixed radial-basis prior over pseudo-
timestamps, both squashed to [0, 1] per query row; the gate multiplies
raw attention scores before the softmax. A final global self-attention
mixes information across fused tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import FeedForward, Linear, Module, MultiHeadAttention


@dataclass
class TokenSeq:
    """n tokens with strictly increasing pseudo-timestamps."""

    tokens: Tensor
    pseudo_ts: np.ndarray

    def __post_init__(self):
        self.pseudo_ts = np.asarray(self.pseudo_ts, dtype=np.float64)
        if len(self.pseudo_ts) != self.tokens.shape[0]:
            raise ValueError("pseudo_ts length must match token count")
        if len(self.pseudo_ts) > 1 and not np.all(np.diff(self.pseudo_ts) > 0):
            raise ValueError("pseudo-timestamps must be strictly increasing")

    def __len__(self) -> int:
        return self.tokens.shape[0]


@dataclass
class TemporalConfig:
    model_dim: int = 64          # paper-scale value: 1024
    heads: int = 4
    window: int = 8              # tokens per attention window
    downsample: int = 4          # fused-token ratio (power of two)
    rbf_sigma: float = 16.0
    ffn_dim: int = 256

    def validate(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if self.downsample < 1 or self.downsample & (self.downsample - 1):
            raise ValueError("downsample ratio must be a power of two")
        if self.rbf_sigma <= 0:
            raise ValueError("rbf_sigma must be positive")


def sinusoidal_pe(n: int, dim: int) -> np.ndarray:
    """PE[pos, 2i] = sin(pos / 10000^(2i/dim)), odd columns the cosine."""
    if dim % 2:
        raise ad.ShapeError("positional encoding dim must be even")
    pe = np.zeros((n, dim), dtype=np.float32)
    pos = np.arange(n, dtype=np.float64)[:, None]
    i2 = np.arange(0, dim, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i2 / dim)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def window_msa(attn: MultiHeadAttention, tokens: Tensor, window: int) -> Tensor:
    """Self-attention within non-overlapping windows of `window` rows;
    a shorter final window attends only within itself."""
    if window < 1:
        raise ValueError("window size must be >= 1")
    n = tokens.shape[0]
    if n <= window:
        return attn(tokens, tokens, tokens)
    outs = []
    for start in range(0, n, window):
        length = min(window, n - start)
        chunk = ad.slice_axis(tokens, 0, start, length)
        outs.append(attn(chunk, chunk, chunk))
    return ad.concat(outs, axis=0)


class WindowedSelfAttention(Module):
    def __init__(self, dim: int, heads: int, window: int,
                 rng: np.random.Generator):
        super().__init__()
        self.window = window
        self.attn = self.add_child("attn", MultiHeadAttention(dim, heads, rng))

    def __call__(self, tokens: Tensor) -> Tensor:
        return window_msa(self.attn, tokens, self.window)


class LocalTokenFusion(Module):
    """(windowed MSA + residual -> temporal max-pool) stages.

    Each stage halves the token count; log2(downsample) stages total. The
    input is zero-padded to a multiple of the downsample ratio, so
    L = ceil(P / downsample). Output pseudo-timestamps are the mean of the
    source indices: t_i = i*g + (g-1)/2 for ratio g.
    """

    def __init__(self, config: TemporalConfig, rng: np.random.Generator):
        super().__init__()
        config.validate()
        self.config = config
        self.n_stages = int(round(math.log2(config.downsample)))
        self.stages: list[WindowedSelfAttention] = []
        for idx in range(self.n_stages):
            stage = WindowedSelfAttention(config.model_dim, config.heads,
                                          config.window, rng)
            self.stages.append(self.add_child(f"wmsa{idx}", stage))

    def __call__(self, visual: TokenSeq) -> TokenSeq:
        p = len(visual)
        if p == 0:
            raise ValueError("cannot fuse an empty token sequence")
        g = self.config.downsample
        tokens = visual.tokens
        pad = (-p) % g
        if pad:
            zeros = Tensor(np.zeros((pad, tokens.shape[1]),
                                    dtype=tokens.data.dtype))
            tokens = ad.concat([tokens, zeros], axis=0)
        for stage in self.stages:
            tokens = ad.add(stage(tokens), tokens)
            tokens = ad.max_pool_1d(tokens, kernel=2, stride=2)
        n_fused = tokens.shape[0]
        ts = np.arange(n_fused, dtype=np.float64) * g + (g - 1) / 2.0
        return TokenSeq(tokens, ts)


def token_similarity(psi_f: Linear, psi_v: Linear, fused: Tensor,
                     visual: Tensor) -> Tensor:
    """Learned-embedding inner products: (L, P) score matrix."""
    if fused.shape[1] != visual.shape[1]:
        raise ad.ShapeError(
            f"token dims differ: {fused.shape} vs {visual.shape}")
    return ad.matmul(psi_f(fused), ad.transpose(psi_v(visual)))


def time_prior(ts_fused: np.ndarray, ts_visual: np.ndarray,
               sigma: float) -> np.ndarray:
    """RBF kernel exp(-(dt)^2 / (2 sigma^2)) between pseudo-timestamps."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    dt = np.asarray(ts_fused, dtype=np.float64)[:, None] - \
        np.asarray(ts_visual, dtype=np.float64)[None, :]
    return np.exp(-(dt * dt) / (2.0 * sigma * sigma))


def _minmax_rows(x: Tensor) -> Tensor:
    """Row-wise min-max squash to [0, 1]; a constant row maps to ones."""
    row_min = ad.min(x, axis=1, keepdims=True)
    row_max = ad.max(x, axis=1, keepdims=True)
    span = row_max.data - row_min.data
    degenerate = (span <= 0.0).reshape(-1)
    denom = ad.sub(row_max, row_min)
    if degenerate.any():
        # avoid 0/0; degenerate rows are overwritten below
        denom = ad.masked_fill(denom, degenerate[:, None], 1.0)
    out = ad.div(ad.sub(x, row_min), denom)
    if degenerate.any():
        full = np.broadcast_to(degenerate[:, None], out.shape)
        out = ad.masked_fill(out, full, 1.0)
    return out


def build_mask(similarity: Tensor, prior: np.ndarray) -> Tensor:
    """Elementwise product of row-normalized similarity and time prior."""
    if tuple(similarity.shape) != tuple(prior.shape):
        raise ad.ShapeError(
            f"mask factors differ in shape: {similarity.shape} vs {prior.shape}")
    prior_t = Tensor(prior.astype(similarity.data.dtype))
    return ad.mul(_minmax_rows(similarity), _minmax_rows(prior_t))


def masked_cross_attention(attn: MultiHeadAttention, q_in: Tensor, k_in: Tensor,
                           v_in: Tensor, mask: Tensor) -> Tensor:
    """Multi-head cross-attention whose raw scores are multiplied by the
    shared (L, P) mask before the softmax. Masked-to-zero scores still
    carry softmax weight e^0; that is the intended semantics."""
    return attn(q_in, k_in, v_in, mult_mask=mask)


class IntraGlossBlock(Module):
    """Aggregate visual tokens into fused tokens under the learned gate.

    Q = fused + PE_q, K = visual + PE_k, V = visual; residual masked
    cross-attention followed by a residual feed-forward. The last computed
    mask is kept on `last_mask` for inspection/export.
    """

    def __init__(self, config: TemporalConfig, rng: np.random.Generator):
        super().__init__()
        config.validate()
        self.config = config
        self.psi_f = self.add_child("psi_f", Linear(config.model_dim,
                                                    config.model_dim, rng))
        self.psi_v = self.add_child("psi_v", Linear(config.model_dim,
                                                    config.model_dim, rng))
        self.attn = self.add_child("attn", MultiHeadAttention(
            config.model_dim, config.heads, rng))
        self.ffn = self.add_child("ffn", FeedForward(config.model_dim,
                                                     config.ffn_dim, rng))
        self.last_mask: np.ndarray | None = None

    def __call__(self, fused: TokenSeq, visual: TokenSeq) -> TokenSeq:
        sim = token_similarity(self.psi_f, self.psi_v, fused.tokens,
                               visual.tokens)
        prior = time_prior(fused.pseudo_ts, visual.pseudo_ts,
                           self.config.rbf_sigma)
        mask = build_mask(sim, prior)
        self.last_mask = mask.data.copy()
        dt = fused.tokens.data.dtype
        pe_q = Tensor(sinusoidal_pe(len(fused), self.config.model_dim).astype(dt))
        pe_k = Tensor(sinusoidal_pe(len(visual), self.config.model_dim).astype(dt))
        q = ad.add(fused.tokens, pe_q)
        k = ad.add(visual.tokens, pe_k)
        attended = ad.add(fused.tokens,
                          masked_cross_attention(self.attn, q, k,
                                                 visual.tokens, mask))
        out = ad.add(attended, self.ffn(attended))
        return TokenSeq(out, fused.pseudo_ts)


class InterGlossBlock(Module):
    """Residual global self-attention over the fused tokens."""

    def __init__(self, config: TemporalConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.attn = self.add_child("attn", MultiHeadAttention(
            config.model_dim, config.heads, rng))

    def __call__(self, fused: TokenSeq) -> TokenSeq:
        dt = fused.tokens.data.dtype
        pe = Tensor(sinusoidal_pe(len(fused), self.config.model_dim).astype(dt))
        x = ad.add(fused.tokens, pe)
        out = ad.add(fused.tokens, self.attn(x, x, x))
        return TokenSeq(out, fused.pseudo_ts)


class TemporalAggregator(Module):
    """Fusion + intra-gloss + inter-gloss pipeline: (P, C) -> (L, C)."""

    def __init__(self, config: TemporalConfig, rng: np.random.Generator):
        super().__init__()
        config.validate()
        self.config = config
        self.ltf = self.add_child("ltf", LocalTokenFusion(config, rng))
        self.intra = self.add_child("intra", IntraGlossBlock(config, rng))
        self.inter = self.add_child("inter", InterGlossBlock(config, rng))

    def __call__(self, visual: TokenSeq) -> tuple[TokenSeq, TokenSeq]:
        """Returns (gloss-aware tokens, fused tokens); the fused sequence
        feeds the intermediate recognition branch."""
        fused = self.ltf(visual)
        intra = self.intra(fused, visual)
        out = self.inter(intra)
        return out, fused

    @property
    def last_mask(self) -> np.ndarray | None:
        return self.intra.last_mask


def visual_token_seq(tokens: Tensor) -> TokenSeq:
    """Wrap backbone output with pseudo-timestamps 0..P-1."""
    return TokenSeq(tokens, np.arange(tokens.shape[0], dtype=np.float64))
