"""Paragraph-video retrieval branch: class-token aggregation and contrastive losses."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidArgumentError, NumericDegenerateError


def sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float32)[:, None]
    freq = torch.exp(torch.arange(0, dim, 2, dtype=torch.float32) * (-math.log(10000.0) / dim))
    table = torch.zeros(length, dim)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq[: dim // 2])
    return table


class ClassTokenAggregator(nn.Module):
    """Prepends a learnable seed token and returns the encoder output at its position.

    ``forward`` accepts an alternative seed so a second token can reuse the same
    encoder weights (the grounded video token shares this encoder).
    """

    def __init__(self, dim: int, depth: int = 2, heads: int = 4, positional: bool = True,
                 max_len: int = 512, dropout: float = 0.0):
        super().__init__()
        self.dim = dim
        self.seed = nn.Parameter(torch.randn(dim) * 0.02)
        layer = nn.TransformerEncoderLayer(dim, heads, dim_feedforward=2 * dim, dropout=dropout,
                                           batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, depth, enable_nested_tensor=False)
        self.positional = positional
        self.register_buffer("pos_table", sinusoidal_positions(max_len + 1, dim), persistent=False)

    def forward(self, seq: torch.Tensor, pad_mask: torch.Tensor | None = None,
                seed: torch.Tensor | None = None) -> torch.Tensor:
        """seq: B x N x d, pad_mask: B x N (True = padding). Returns B x d."""
        if seq.ndim != 3 or seq.shape[-1] != self.dim:
            raise InvalidArgumentError(f"expected B x N x {self.dim} sequence, got {tuple(seq.shape)}")
        if seq.shape[1] < 1:
            raise InvalidArgumentError("empty sequence")
        seed = self.seed if seed is None else seed
        b, n, _ = seq.shape
        x = torch.cat([seed.expand(b, 1, self.dim), seq], dim=1)
        if self.positional:
            x = x + self.pos_table[: n + 1]
        if pad_mask is not None:
            pad_mask = torch.cat([pad_mask.new_zeros(b, 1), pad_mask], dim=1)
        return self.encoder(x, src_key_padding_mask=pad_mask)[:, 0]


def aggregate_global(sequence, aggregator: ClassTokenAggregator) -> torch.Tensor:
    seq = torch.as_tensor(sequence, dtype=torch.float32)
    if seq.ndim != 2 or seq.shape[-1] != aggregator.dim:
        raise InvalidArgumentError(f"expected N x {aggregator.dim} sequence, got {tuple(seq.shape)}")
    return aggregator(seq[None])[0]


def cosine_similarity_matrix(text_tokens: torch.Tensor, video_tokens: torch.Tensor) -> torch.Tensor:
    """Entry (b, z) is the cosine of text b and video z."""
    if text_tokens.shape[-1] != video_tokens.shape[-1]:
        raise InvalidArgumentError("token widths differ")
    tn = text_tokens.norm(dim=-1, keepdim=True)
    vn = video_tokens.norm(dim=-1, keepdim=True)
    if bool((tn == 0).any()) or bool((vn == 0).any()):
        raise NumericDegenerateError("zero-norm class token")
    sim = (text_tokens / tn) @ (video_tokens / vn).T
    return sim.clamp(-1.0, 1.0)


def _check_square(sim):
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise InvalidArgumentError(f"similarity matrix must be square, got {tuple(sim.shape)}")


def infonce_loss(sim: torch.Tensor, scale) -> torch.Tensor:
    """Symmetric InfoNCE: text->video over rows plus video->text over columns."""
    _check_square(sim)
    logits = sim * scale
    target = torch.arange(sim.shape[0])
    return F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target)


def triplet_loss(sim: torch.Tensor, margin: float = 0.2) -> torch.Tensor:
    """Hinge on the hardest in-batch negative, for each text anchor and each video anchor."""
    _check_square(sim)
    b = sim.shape[0]
    if b < 2:
        return sim.sum() * 0.0
    pos = sim.diagonal()
    off = sim.masked_fill(torch.eye(b, dtype=torch.bool), float("-inf"))
    t2v = F.relu(margin + off.max(dim=1).values - pos).mean()
    v2t = F.relu(margin + off.max(dim=0).values - pos).mean()
    return t2v + v2t


def contrastive_loss(sim, scale, margin: float = 0.2, nce_weight: float = 0.04):
    """triplet + nce_weight * InfoNCE. Returns (total, {"trip": ..., "nce": ...})."""
    trip = triplet_loss(sim, margin)
    nce = infonce_loss(sim, scale)
    return trip + nce_weight * nce, {"trip": trip, "nce": nce}


def cmr_loss(sim_r, scale, margin: float = 0.2, beta1: float = 0.04):
    return contrastive_loss(sim_r, scale, margin, beta1)
