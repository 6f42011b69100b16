"""Full network: sparse backbone -> temporal aggregation -> task heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import Config
from .heads import (BOS, EOS, PAD, CtcResult, RecognitionHead,
                    TranslationDecoder, DecoderConfig, cross_entropy, ctc_loss,
                    ctc_greedy_decode, GlossVocab, WordVocab)
from .layers import Module
from .sparse import BackboneConfig, RulebookChain, SparseBackbone, SparseTensor
from .temporal import TemporalAggregator, TemporalConfig, visual_token_seq


@dataclass
class ClipBatchItem:
    """Pre-encoded clip: sparse voxel input plus targets."""

    clip_id: str
    coords: np.ndarray
    features: np.ndarray
    shape: tuple[int, int]
    n_segments: int
    gloss_ids: list[int]          # corpus gloss indices (0-based)
    word_ids: list[int]           # word vocab ids, no specials
    chain: RulebookChain | None = None

    def sparse(self) -> SparseTensor:
        return SparseTensor(self.coords, Tensor(self.features), self.shape,
                            self.n_segments)


@dataclass
class S2GOutput:
    loss_inter: Tensor | None
    loss_final: Tensor | None
    loss: Tensor | None
    log_probs: Tensor
    feasible: bool


@dataclass
class S2GTOutput:
    slr: S2GOutput
    loss_ce: Tensor
    loss: Tensor | None


class SignModel(Module):
    """End-to-end recognizer/translator over event voxel clips."""

    def __init__(self, config: Config, n_glosses: int, n_words: int,
                 rng: np.random.Generator):
        super().__init__()
        config.validate()
        self.config = config
        self.gloss_vocab_size = n_glosses + 1  # + blank
        self.backbone = self.add_child("backbone", SparseBackbone(
            BackboneConfig(in_bins=config.bins,
                           stage_channels=tuple(config.backbone_channels),
                           model_dim=config.model_dim), rng))
        tcfg = TemporalConfig(model_dim=config.model_dim, heads=config.heads,
                              window=config.window,
                              downsample=config.downsample,
                              rbf_sigma=config.rbf_sigma,
                              ffn_dim=config.ffn_dim)
        self.temporal = self.add_child("temporal", TemporalAggregator(tcfg, rng))
        self.head_inter = self.add_child("head_inter", RecognitionHead(
            config.model_dim, self.gloss_vocab_size, rng))
        self.head_final = self.add_child("head_final", RecognitionHead(
            config.model_dim, self.gloss_vocab_size, rng))
        self.decoder = self.add_child("decoder", TranslationDecoder(
            DecoderConfig(model_dim=config.model_dim, heads=config.heads,
                          n_blocks=config.decoder_blocks,
                          ffn_dim=config.ffn_dim,
                          max_gen_len=config.max_gen_len), n_words, rng))

    # ------------------------------------------------------------------
    def encode(self, clip: ClipBatchItem) -> tuple[Tensor, Tensor]:
        """Clip -> (gloss-aware tokens (L, C), fused tokens (L, C))."""
        visual = self.backbone.forward_clip(clip.sparse(), clip.chain)
        out_seq, fused_seq = self.temporal(visual_token_seq(visual))
        return out_seq.tokens, fused_seq.tokens

    def ctc_targets(self, gloss_ids: list[int]) -> list[int]:
        return [g + 1 for g in gloss_ids]  # class 0 is blank

    def forward_s2g(self, clip: ClipBatchItem) -> S2GOutput:
        """Two CTC branches; total = li*inter + lf*final."""
        out_tokens, fused_tokens = self.encode(clip)
        target = self.ctc_targets(clip.gloss_ids)
        lp_inter = self.head_inter(fused_tokens)
        lp_final = self.head_final(out_tokens)
        res_inter = ctc_loss(lp_inter, target)
        res_final = ctc_loss(lp_final, target)
        if not (res_inter.feasible and res_final.feasible):
            return S2GOutput(None, None, None, lp_final, False)
        total = ad.add(ad.scalar_mul(res_inter.loss, self.config.lambda_inter),
                       ad.scalar_mul(res_final.loss, self.config.lambda_final))
        return S2GOutput(res_inter.loss, res_final.loss, total, lp_final, True)

    def forward_s2gt(self, clip: ClipBatchItem) -> S2GTOutput:
        """Adds teacher-forced decoder cross-entropy on word targets."""
        out_tokens, fused_tokens = self.encode(clip)
        target = self.ctc_targets(clip.gloss_ids)
        lp_inter = self.head_inter(fused_tokens)
        lp_final = self.head_final(out_tokens)
        res_inter = ctc_loss(lp_inter, target)
        res_final = ctc_loss(lp_final, target)
        dec_in = [BOS] + list(clip.word_ids)
        dec_out = list(clip.word_ids) + [EOS]
        logits = self.decoder(out_tokens, dec_in)
        loss_ce = cross_entropy(logits, dec_out)
        slr: S2GOutput
        if not (res_inter.feasible and res_final.feasible):
            slr = S2GOutput(None, None, None, lp_final, False)
            return S2GTOutput(slr, loss_ce, None)
        loss_slr = ad.add(
            ad.scalar_mul(res_inter.loss, self.config.lambda_inter),
            ad.scalar_mul(res_final.loss, self.config.lambda_final))
        slr = S2GOutput(res_inter.loss, res_final.loss, loss_slr, lp_final, True)
        total = ad.add(loss_slr, ad.scalar_mul(loss_ce, self.config.lambda_ce))
        return S2GTOutput(slr, loss_ce, total)

    # ------------------------------------------------------------------
    def recognize(self, clip: ClipBatchItem) -> tuple[list[int], np.ndarray]:
        """Greedy gloss ids (corpus indexing) plus the attention mask."""
        with ad.no_grad():
            out_tokens, _ = self.encode(clip)
            lp = self.head_final(out_tokens)
        classes = ctc_greedy_decode(lp)
        mask = self.temporal.last_mask
        return [c - 1 for c in classes], mask

    def translate(self, clip: ClipBatchItem) -> list[int]:
        with ad.no_grad():
            out_tokens, _ = self.encode(clip)
            return self.decoder.generate(out_tokens, self.config.max_gen_len)

    # ------------------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grads(self):
        for _, p in self.named_parameters():
            p.grad = None
