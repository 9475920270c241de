"""Global-dimension alignment and the grounding-to-retrieval similarity coupling."""
from __future__ import annotations

import torch
from torch import nn

from .errors import InvalidArgumentError
from .retrieval import ClassTokenAggregator, contrastive_loss

DEFAULT_CMFF_WEIGHTS = (0.4, 0.3, 0.3)


def check_cmff_weights(weights, q=None):
    w = tuple(float(x) for x in weights)
    if q is not None and len(w) != q:
        raise InvalidArgumentError(f"{len(w)} fusion weights for Q={q} candidates")
    if min(w) < 0 or abs(sum(w) - 1.0) > 1e-6:
        raise InvalidArgumentError(f"fusion weights must be non-negative and sum to 1, got {w}")
    return w


def cmff_fuse(top_feats: torch.Tensor, weights=DEFAULT_CMFF_WEIGHTS) -> torch.Tensor:
    """Weighted sum over the candidate axis. top_feats: ... x Q x d, best candidate first."""
    w = check_cmff_weights(weights, top_feats.shape[-2])
    w = torch.tensor(w, dtype=top_feats.dtype, device=top_feats.device)
    return (top_feats * w[:, None]).sum(dim=-2)


def aggregate_grounded_global(sentence_feats, aggregator: ClassTokenAggregator, seed: torch.Tensor,
                              pad_mask=None) -> torch.Tensor:
    """Class-token readout over per-sentence visual features, reusing the video encoder weights.

    sentence_feats: M x d or B x M x d.
    """
    x = torch.as_tensor(sentence_feats)
    single = x.ndim == 2
    if single:
        x = x[None]
    out = aggregator(x, pad_mask, seed=seed)
    return out[0] if single else out


class TokenFusion(nn.Module):
    """1x1 convolution over two stacked tokens, i.e. a linear map 2d -> d."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.linear = nn.Linear(2 * dim, dim)

    def forward(self, video_token, grounded_token):
        if video_token.shape[-1] != self.dim or grounded_token.shape[-1] != self.dim:
            raise InvalidArgumentError("class token widths differ from fusion width")
        return self.linear(torch.cat([video_token, grounded_token], dim=-1))


def fuse_class_tokens(video_token, grounded_token, fusion: TokenFusion) -> torch.Tensor:
    return fusion(video_token, grounded_token)


def global_loss(sim_g, scale, margin: float = 0.2, beta2: float = 0.04):
    return contrastive_loss(sim_g, scale, margin, beta2)


def grrm_mse(sim_r: torch.Tensor, sim_g: torch.Tensor, detach_target: bool = True,
             positives_only: bool = False) -> torch.Tensor:
    """Mean squared gap between retrieval and grounding similarities.

    The grounding matrix acts as a pseudo-label, so by default no gradient reaches it.
    """
    if sim_r.shape != sim_g.shape or sim_r.ndim != 2:
        raise InvalidArgumentError(f"shape mismatch {tuple(sim_r.shape)} vs {tuple(sim_g.shape)}")
    target = sim_g.detach() if detach_target else sim_g
    diff = (sim_r - target) ** 2
    if positives_only:
        return diff.diagonal().mean()
    return diff.mean()
