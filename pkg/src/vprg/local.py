"""Local grounding: sentence-moment fusion, the 2D adjacent network, score maps,
top-Q candidate selection, masked-word reconstruction and the local losses.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidArgumentError
from .moments import MomentIndex


def map_mask(num_segments: int, device=None) -> torch.Tensor:
    return torch.ones(num_segments, num_segments, dtype=torch.bool, device=device).triu()


def feature_map(segments: torch.Tensor) -> torch.Tensor:
    """Differentiable max-pooled moment map. segments: B x K x d -> B x K x K x d."""
    b, k, d = segments.shape
    fmap = segments.new_zeros(b, k, k, d)
    run = segments
    for off in range(k):
        if off:
            run = torch.maximum(run[:, :-1], segments[:, off:])
        rows = torch.arange(k - off)
        fmap[:, rows, rows + off] = run
    return fmap


class MomentFusion(nn.Module):
    """Hadamard product of the projected sentence vector and each projected moment feature."""

    def __init__(self, text_dim: int, video_dim: int, dim: int):
        super().__init__()
        self.text_proj = nn.Linear(text_dim, dim, bias=False)
        self.video_proj = nn.Linear(video_dim, dim, bias=False)

    def forward(self, sentence: torch.Tensor, fmap: torch.Tensor) -> torch.Tensor:
        """sentence: N x d_s, fmap: N x K x K x d_v -> N x K x K x d."""
        if sentence.shape[-1] != self.text_proj.in_features or fmap.shape[-1] != self.video_proj.in_features:
            raise InvalidArgumentError("fusion input width mismatch")
        k = fmap.shape[1]
        fused = self.text_proj(sentence)[:, None, None, :] * self.video_proj(fmap)
        return fused * map_mask(k, fused.device)[None, :, :, None]


def fuse_sentence_moment(sentence, fmap, fusion: MomentFusion) -> torch.Tensor:
    return fusion(sentence[None], fmap[None])[0]


class TemporalAdjacentNet(nn.Module):
    """Stack of 3x3 convolutions over the K x K map, re-masked after every layer."""

    def __init__(self, dim: int, layers: int = 4):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv2d(dim, dim, 3, padding=1) for _ in range(layers))

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        """N x K x K x d -> N x K x K x d."""
        k = fused.shape[1]
        mask = map_mask(k, fused.device)[None, None].to(fused.dtype)
        x = fused.permute(0, 3, 1, 2)
        for n, conv in enumerate(self.convs):
            x = conv(x)
            if n < len(self.convs) - 1:
                x = F.relu(x)
            x = x * mask
        return x.permute(0, 2, 3, 1)


class PredictionHead(nn.Module):
    """Per-cell affine map followed by a sigmoid; invalid cells are set to exactly 0."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc = nn.Linear(dim, 1)

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        k = fmap.shape[-2]
        probs = torch.sigmoid(self.fc(fmap).squeeze(-1))
        return probs * map_mask(k, probs.device)


def select_top_q(scores, q: int) -> list[tuple[MomentIndex, float]]:
    """Q best valid cells, descending; equal scores keep lexicographic (i, j) order."""
    scores = torch.as_tensor(scores).detach()
    k = scores.shape[-1]
    n_valid = k * (k + 1) // 2
    if q > n_valid or q < 1:
        raise InvalidArgumentError(f"cannot select {q} moments from {n_valid} valid cells")
    rows, cols = torch.triu_indices(k, k)
    vals = scores[rows, cols]
    order = torch.sort(vals, descending=True, stable=True).indices[:q]
    return [(MomentIndex(int(rows[o]), int(cols[o])), float(vals[o])) for o in order]


def top_q_cells(scores: torch.Tensor, q: int) -> torch.Tensor:
    """Batched variant of :func:`select_top_q`. scores: N x K x K -> N x q x 2 long tensor."""
    k = scores.shape[-1]
    rows, cols = torch.triu_indices(k, k)
    vals = scores.detach()[:, rows, cols]
    order = torch.sort(vals, dim=1, descending=True, stable=True).indices[:, :q]
    return torch.stack([rows[order], cols[order]], dim=-1)


class Reconstructor(nn.Module):
    """Transformer encoder over the moment's segment rows, decoder over the masked
    sentence's word states, then a vocabulary classifier."""

    def __init__(self, dim: int, vocab_size: int, depth: int = 1, heads: int = 4, dropout: float = 0.0):
        super().__init__()
        enc = nn.TransformerEncoderLayer(dim, heads, 2 * dim, dropout=dropout, batch_first=True)
        dec = nn.TransformerDecoderLayer(dim, heads, 2 * dim, dropout=dropout, batch_first=True)
        self.encoder = nn.TransformerEncoder(enc, depth, enable_nested_tensor=False)
        self.decoder = nn.TransformerDecoder(dec, depth)
        self.fc = nn.Linear(dim, vocab_size)

    def log_probs(self, word_states, span_feats, word_pad=None, span_pad=None) -> torch.Tensor:
        """word_states: N x J x d, span_feats: N x L x d -> N x J x n_v log-distribution."""
        if span_feats.shape[1] < 1:
            raise InvalidArgumentError("empty moment span")
        memory = self.encoder(span_feats, src_key_padding_mask=span_pad)
        out = self.decoder(word_states, memory, tgt_key_padding_mask=word_pad,
                           memory_key_padding_mask=span_pad)
        return F.log_softmax(self.fc(out), dim=-1)

    def forward(self, word_states, span_feats, word_pad=None, span_pad=None) -> torch.Tensor:
        return self.log_probs(word_states, span_feats, word_pad, span_pad).exp()


def reconstruct_masked(masked_states: torch.Tensor, moment_feats: torch.Tensor,
                       reconstructor: Reconstructor) -> torch.Tensor:
    """Single sentence: J x d word states, span x d segment rows -> J x n_v distributions."""
    if moment_feats.ndim != 2 or moment_feats.shape[0] < 1:
        raise InvalidArgumentError("empty moment span")
    return reconstructor(masked_states[None], moment_feats[None])[0]


def reward_schedule(q: int) -> torch.Tensor:
    """Rewards from 1 down to 0 in steps of 1/(q-1); a single candidate gets 1."""
    if q < 1:
        raise InvalidArgumentError("Q must be positive")
    if q == 1:
        return torch.ones(1)
    return 1.0 - torch.arange(q, dtype=torch.float32) / (q - 1)


def nll_from_log_probs(log_probs, targets, weights=None) -> torch.Tensor:
    """log_probs: M x Q x J x n_v, targets: M x J, weights: M x J (0 drops padding).

    Sum over word positions, mean over Q and over M.
    """
    m, q, j, n_v = log_probs.shape
    if bool((targets >= n_v).any()) or bool((targets < 0).any()):
        raise InvalidArgumentError(f"target id outside vocabulary of size {n_v}")
    idx = targets[:, None, :, None].expand(m, q, j, 1)
    picked = log_probs.gather(-1, idx).squeeze(-1)
    if weights is not None:
        picked = picked * weights[:, None, :]
    return -picked.sum(-1).mean()


def reconstruction_loss(distributions, targets, weights=None, eps: float = 1e-12) -> torch.Tensor:
    """Negative log-likelihood of the true words under each candidate's distributions."""
    distributions = torch.as_tensor(distributions)
    targets = torch.as_tensor(targets, dtype=torch.long)
    return nll_from_log_probs(distributions.clamp_min(eps).log(), targets, weights)


def rank_loss(scores, rewards) -> torch.Tensor:
    """scores: M x Q, ordered to line up with ``rewards`` (Q,)."""
    scores = torch.as_tensor(scores)
    rewards = torch.as_tensor(rewards, dtype=scores.dtype)
    log_sm = F.log_softmax(scores, dim=-1)
    return -(rewards * log_sm).mean(dim=-1).mean()


def local_loss(rec, rank):
    return rec + rank
