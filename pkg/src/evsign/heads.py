"""Recognition head with CTC, and the autoregressive translation decoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import LOG_ZERO, Tensor
from .layers import Embedding, FeedForward, LayerNorm, Linear, Module, \
    MultiHeadAttention
from .temporal import sinusoidal_pe

BOS, EOS, PAD, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ["<bos>", "<eos>", "<pad>", "<unk>"]


@dataclass(frozen=True)
class GlossVocab:
    """Gloss label strings; CTC class 0 is the reserved blank."""

    glosses: tuple[str, ...]
    blank_id: int = 0

    @property
    def size(self) -> int:
        return len(self.glosses) + 1

    def class_of(self, gloss_index: int) -> int:
        return gloss_index + 1

    def gloss_of(self, class_id: int) -> int:
        if class_id == self.blank_id:
            raise ValueError("blank has no gloss")
        return class_id - 1


@dataclass(frozen=True)
class WordVocab:
    """Word strings prefixed by the four specials at fixed ids 0-3."""

    words: tuple[str, ...]

    def __post_init__(self):
        if tuple(self.words[:4]) != tuple(SPECIAL_TOKENS):
            raise ValueError(f"vocabulary must start with {SPECIAL_TOKENS}")

    @property
    def size(self) -> int:
        return len(self.words)

    def id_of(self, word: str) -> int:
        try:
            return self.words.index(word)
        except ValueError:
            return UNK


# ----------------------------------------------------------------------
# recognition


class RecognitionHead(Module):
    """Linear classifier over gloss classes, log-softmax rows."""

    def __init__(self, dim: int, vocab_size: int, rng: np.random.Generator):
        super().__init__()
        self.proj = self.add_child("proj", Linear(dim, vocab_size, rng))

    def __call__(self, tokens: Tensor) -> Tensor:
        return ad.log_softmax(self.proj(tokens), axis=1)


def ctc_extended_labels(target: list[int], blank: int = 0) -> list[int]:
    ext = [blank]
    for g in target:
        ext.append(g)
        ext.append(blank)
    return ext


def ctc_feasible(n_frames: int, target: list[int]) -> bool:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return n_frames >= len(target) + repeats


@dataclass
class CtcResult:
    loss: Tensor
    feasible: bool


def ctc_loss(log_probs: Tensor, target: list[int], blank: int = 0) -> CtcResult:
    """Negative log marginal over all alignments that collapse to `target`.

    Computed by the forward algorithm over blank-extended labels, in log
    space, through the autodiff tape. An infeasible target (too few
    frames) yields +inf with no gradient and feasible=False.
    """
    n_frames, n_classes = log_probs.shape
    target = list(target)
    if any(not (0 <= g < n_classes) or g == blank for g in target):
        raise ValueError("target contains blank or out-of-range class")
    if not ctc_feasible(n_frames, target):
        return CtcResult(Tensor(np.asarray(np.inf, dtype=log_probs.data.dtype)),
                         False)
    if not target:
        blank_row = ad.take_rows(ad.transpose(log_probs), [blank])
        return CtcResult(ad.neg(ad.sum(blank_row)), True)

    ext = ctc_extended_labels(target, blank)
    n_states = len(ext)
    # (S, T) emission log-probs for the extended label at each frame
    emissions = ad.take_rows(ad.transpose(log_probs), ext)

    skip_ok = np.zeros(n_states, dtype=bool)
    for s in range(2, n_states):
        skip_ok[s] = ext[s] != blank and ext[s] != ext[s - 2]

    def emission_col(t: int) -> Tensor:
        return ad.reshape(ad.slice_axis(emissions, 1, t, 1), (n_states,))

    init_block = np.ones(n_states, dtype=bool)
    init_block[:2] = False
    alpha = ad.masked_fill(emission_col(0), init_block, LOG_ZERO)

    neg_inf_1 = Tensor(np.full(1, LOG_ZERO, dtype=log_probs.data.dtype))
    neg_inf_2 = Tensor(np.full(2, LOG_ZERO, dtype=log_probs.data.dtype))
    for t in range(1, n_frames):
        stay = alpha
        step1 = ad.concat([neg_inf_1, ad.slice_axis(alpha, 0, 0, n_states - 1)],
                          axis=0)
        cands = [ad.reshape(stay, (1, n_states)),
                 ad.reshape(step1, (1, n_states))]
        if n_states > 2:
            step2 = ad.concat(
                [neg_inf_2, ad.slice_axis(alpha, 0, 0, n_states - 2)], axis=0)
            step2 = ad.masked_fill(step2, ~skip_ok, LOG_ZERO)
            cands.append(ad.reshape(step2, (1, n_states)))
        alpha = ad.add(ad.logsumexp(ad.concat(cands, axis=0), axis=0),
                       emission_col(t))

    tail = ad.slice_axis(alpha, 0, n_states - 2, 2)
    return CtcResult(ad.neg(ad.logsumexp(tail, axis=0)), True)


def ctc_greedy_decode(log_probs: np.ndarray | Tensor, blank: int = 0) -> list[int]:
    """Best path: per-frame argmax, collapse repeats, drop blanks."""
    arr = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    path = np.argmax(arr, axis=1)
    out: list[int] = []
    prev = None
    for cls in path:
        cls = int(cls)
        if cls != prev and cls != blank:
            out.append(cls)
        prev = cls
    return out


# ----------------------------------------------------------------------
# translation


@dataclass
class DecoderConfig:
    model_dim: int = 64
    heads: int = 4
    n_blocks: int = 4
    ffn_dim: int = 256
    max_gen_len: int = 16


class DecoderBlock(Module):
    """Masked self-attention, encoder-decoder attention, feed-forward;
    post-norm residuals."""

    def __init__(self, config: DecoderConfig, rng: np.random.Generator):
        super().__init__()
        dim = config.model_dim
        self.self_attn = self.add_child(
            "self_attn", MultiHeadAttention(dim, config.heads, rng))
        self.norm0 = self.add_child("norm0", LayerNorm(dim))
        self.cross_attn = self.add_child(
            "cross_attn", MultiHeadAttention(dim, config.heads, rng))
        self.norm1 = self.add_child("norm1", LayerNorm(dim))
        self.ffn = self.add_child("ffn", FeedForward(dim, config.ffn_dim, rng))
        self.norm2 = self.add_child("norm2", LayerNorm(dim))

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        x = self.norm0(ad.add(x, self.self_attn(x, x, x, causal=True)))
        x = self.norm1(ad.add(x, self.cross_attn(x, memory, memory)))
        return self.norm2(ad.add(x, self.ffn(x)))


class TranslationDecoder(Module):
    """Autoregressive word decoder conditioned on gloss-aware tokens."""

    def __init__(self, config: DecoderConfig, vocab_size: int,
                 rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.vocab_size = vocab_size
        self.embed = self.add_child(
            "embed", Embedding(vocab_size, config.model_dim, rng))
        self.blocks: list[DecoderBlock] = []
        for idx in range(config.n_blocks):
            self.blocks.append(self.add_child(f"block{idx}",
                                              DecoderBlock(config, rng)))
        self.out = self.add_child(
            "out", Linear(config.model_dim, vocab_size, rng))

    def __call__(self, memory: Tensor, input_ids: list[int]) -> Tensor:
        """Teacher-forced logits (U, vocab) for the id prefix sequence."""
        if not input_ids:
            raise ValueError("decoder input must be non-empty")
        dt = memory.data.dtype
        x = ad.scalar_mul(self.embed(input_ids),
                          float(np.sqrt(self.config.model_dim)))
        pe = Tensor(sinusoidal_pe(len(input_ids), self.config.model_dim).astype(dt))
        x = ad.add(x, pe)
        for block in self.blocks:
            x = block(x, memory)
        return self.out(x)

    def generate(self, memory: Tensor, max_len: int) -> list[int]:
        """Greedy decode from <bos> until <eos> or max_len tokens."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        ids = [BOS]
        out: list[int] = []
        with ad.no_grad():
            for _ in range(max_len):
                logits = self(memory, ids)
                next_id = int(np.argmax(logits.data[-1]))
                if next_id == EOS:
                    break
                out.append(next_id)
                ids.append(next_id)
        return out


def cross_entropy(logits: Tensor, target_ids: list[int],
                  pad_id: int = PAD) -> Tensor:
    """Mean negative log-likelihood over non-pad target positions."""
    n, vocab = logits.shape
    if len(target_ids) != n:
        raise ad.ShapeError(
            f"target length {len(target_ids)} != logits rows {n}")
    keep = [i for i, t in enumerate(target_ids) if t != pad_id]
    if not keep:
        raise ValueError("all-pad target")
    onehot = np.zeros((n, vocab), dtype=logits.data.dtype)
    for i in keep:
        onehot[i, target_ids[i]] = 1.0
    log_probs = ad.log_softmax(logits, axis=1)
    picked = ad.sum(ad.mul(log_probs, Tensor(onehot)))
    return ad.scalar_mul(ad.neg(picked), 1.0 / len(keep))
