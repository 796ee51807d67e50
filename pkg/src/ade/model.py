"""The trainable model: three attention branches, embedders, prototypes.

`attention_mode` selects the architecture for ablations: "cross" is the
full model (attribute/object cross-attention with query-key swapping,
composition self-attention), "self" replaces the pair branches with
self-attention on each input, and "none" bypasses attention entirely and
feeds raw class tokens to the embedders.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .attention import AttentionConfig, AttentionDisentangler
from .embedding import Composer, ConceptVocabulary, Embedder, EmbeddingTable


@dataclass
class ModelConfig:
    token_dim: int = 64
    word_dim: int = 32
    num_heads: int = 4
    tau: float = 0.05
    attention_mode: str = "cross"   # cross | self | none
    dropout: float = 0.0
    qk_init_gain: float = 1.0

    def __post_init__(self):
        if self.attention_mode not in ("cross", "self", "none"):
            raise ValueError(f"unknown attention mode '{self.attention_mode}'")
        if self.tau <= 0:
            raise ValueError("temperature must be positive")


class CompositionModel(nn.Module):
    def __init__(self, config: ModelConfig, vocab: ConceptVocabulary,
                 word_vector_path=None, seed: int = 0):
        super().__init__()
        self.config = config
        self.vocab = vocab
        torch.manual_seed(seed)
        if config.attention_mode != "none":
            attn_cfg = AttentionConfig(config.num_heads, config.token_dim,
                                       config.dropout,
                                       qk_init_gain=config.qk_init_gain)
            self.attn_a = AttentionDisentangler(attn_cfg)
            self.attn_o = AttentionDisentangler(attn_cfg)
            self.attn_c = AttentionDisentangler(attn_cfg)
        self.pi_a = Embedder(config.token_dim, config.word_dim, config.dropout)
        self.pi_o = Embedder(config.token_dim, config.word_dim, config.dropout)
        self.pi_c = Embedder(config.token_dim, config.word_dim, config.dropout)
        self.psi = Composer(config.word_dim)
        self.tables = EmbeddingTable(vocab, config.word_dim, seed=seed,
                                     word_vector_path=word_vector_path)

    @property
    def embedders(self):
        return (self.pi_a, self.pi_o, self.pi_c)

    def inference_features(self, tokens: torch.Tensor):
        """Class-token features of the three branches for a single (or
        batched) input, every branch run in a self-attention manner."""
        if self.config.attention_mode == "none":
            cls = tokens[..., 0, :]
            return cls, cls, cls
        v_a = self.attn_a.self_attend(tokens).output[..., 0, :]
        v_o = self.attn_o.self_attend(tokens).output[..., 0, :]
        v_c = self.attn_c.self_attend(tokens).output[..., 0, :]
        return v_a, v_o, v_c
