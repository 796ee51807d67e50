"""Single-layer multi-head attention with exposed per-head weight maps.

One instance serves as one concept disentangler. Self-attention is the
degenerate call with query = key/value; paired inputs go through
`cross_attend_swapped`, which evaluates the same parameters twice with the
query and key roles exchanged and returns one result per input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn


@dataclass
class AttentionConfig:
    num_heads: int
    model_dim: int
    dropout: float = 0.0
    qk_init_gain: float = 1.0  # >1 starts the softmax maps selective

    def __post_init__(self):
        if self.num_heads <= 0 or self.model_dim <= 0:
            raise ValueError("heads and model dim must be positive")
        if self.model_dim % self.num_heads != 0:
            raise ValueError(
                f"model dim {self.model_dim} not divisible by {self.num_heads} heads")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


@dataclass
class AttentionResult:
    """Attended tokens plus the per-head softmax maps (and raw logits)."""

    output: torch.Tensor   # (T_q, D) or (B, T_q, D)
    weights: torch.Tensor  # (H, T_q, T_k) or (B, H, T_q, T_k)
    logits: torch.Tensor   # same shape as weights, pre-softmax

    def item(self, b: int) -> "AttentionResult":
        """Slice one element out of a batched result."""
        if self.output.dim() != 3:
            raise ValueError("result is not batched")
        return AttentionResult(self.output[b], self.weights[b], self.logits[b])


class AttentionDisentangler(nn.Module):
    """One-layer multi-head attention; query/key/value/output projections."""

    def __init__(self, config: AttentionConfig):
        super().__init__()
        self.config = config
        d = config.model_dim
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)
        self.dropout = nn.Dropout(config.dropout)
        if config.qk_init_gain != 1.0:
            with torch.no_grad():
                self.q_proj.weight.mul_(config.qk_init_gain)
                self.k_proj.weight.mul_(config.qk_init_gain)

    def forward(self, query_tokens: torch.Tensor,
                key_value_tokens: torch.Tensor) -> AttentionResult:
        if query_tokens.shape[-1] != self.config.model_dim \
                or key_value_tokens.shape[-1] != self.config.model_dim:
            raise ValueError("token width does not match the attention layer")
        if query_tokens.dim() != key_value_tokens.dim():
            raise ValueError("query and key/value batching disagree")
        squeeze = query_tokens.dim() == 2
        if squeeze:
            query_tokens = query_tokens.unsqueeze(0)
            key_value_tokens = key_value_tokens.unsqueeze(0)

        bsz, t_q, d = query_tokens.shape
        t_k = key_value_tokens.shape[1]
        h, d_k = self.config.num_heads, self.config.head_dim

        def split(x, t):
            return x.view(bsz, t, h, d_k).transpose(1, 2)  # (B, H, T, d_k)

        q = split(self.q_proj(query_tokens), t_q)
        k = split(self.k_proj(key_value_tokens), t_k)
        v = split(self.v_proj(key_value_tokens), t_k)

        logits = q @ k.transpose(-2, -1) / math.sqrt(d_k)
        weights = torch.softmax(logits, dim=-1)
        attended = self.dropout(weights) @ v
        merged = attended.transpose(1, 2).reshape(bsz, t_q, d)
        output = self.out_proj(merged)

        if squeeze:
            return AttentionResult(output[0], weights[0], logits[0])
        return AttentionResult(output, weights, logits)

    def self_attend(self, tokens: torch.Tensor) -> AttentionResult:
        return self(tokens, tokens)

    def cross_attend_swapped(self, tokens_1: torch.Tensor, tokens_2: torch.Tensor):
        """Both query-key role assignments, one shared parameter set."""
        return self(tokens_1, tokens_2), self(tokens_2, tokens_1)


def multi_head_attention(query_tokens, key_value_tokens,
                         layer: AttentionDisentangler) -> AttentionResult:
    return layer(query_tokens, key_value_tokens)


def self_attend(tokens, layer: AttentionDisentangler) -> AttentionResult:
    return layer.self_attend(tokens)


def cross_attend_swapped(tokens_1, tokens_2, layer: AttentionDisentangler):
    return layer.cross_attend_swapped(tokens_1, tokens_2)
