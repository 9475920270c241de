"""The joint retrieval-and-grounding network and its per-batch loss assembly."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .config import TrainConfig
from .encoders import SentenceEncoder, pad_token_batch
from .global_align import TokenFusion, cmff_fuse, grrm_mse
from .local import (MomentFusion, PredictionHead, Reconstructor, TemporalAdjacentNet, feature_map,
                    reward_schedule, top_q_cells)
from .retrieval import ClassTokenAggregator, cosine_similarity_matrix, contrastive_loss
from .temporal import (bce_alignment_loss, forward_sync_maps, pseudo_labels, reverse_sync_maps,
                       sync_head_loss)


@dataclass
class Batch:
    """Paired videos and paragraphs. ``masked[b][m]`` is the masked copy of sentence m."""

    segments: torch.Tensor  # B x K x d_feat
    sentences: list  # B lists of token-id lists
    masked: list  # B lists of MaskedSentence

    @property
    def size(self) -> int:
        return self.segments.shape[0]


class GroundingRetrievalModel(nn.Module):
    def __init__(self, cfg: TrainConfig, vocab_size: int, feature_dim: int, embedding_table=None):
        super().__init__()
        d = cfg.dim
        self.cfg = cfg
        self.video_in = nn.Identity() if feature_dim == d else nn.Linear(feature_dim, d)
        self.text_encoder = SentenceEncoder(vocab_size, d, embedding_table)
        # E1 (also serves as E3 through ``grounded_seed``) and E2
        self.video_aggregator = ClassTokenAggregator(d, cfg.depth, cfg.heads, cfg.positional)
        self.text_aggregator = ClassTokenAggregator(d, cfg.depth, cfg.heads, cfg.positional)
        self.grounded_seed = nn.Parameter(torch.randn(d) * 0.02)
        self.log_scale_r = nn.Parameter(torch.tensor(math.log(cfg.init_scale)))
        self.log_scale_g = nn.Parameter(torch.tensor(math.log(cfg.init_scale)))
        self.fusion = MomentFusion(d, d, d)
        self.tan = TemporalAdjacentNet(d, cfg.tan_layers)
        self.head = PredictionHead(d)
        self.forward_head = PredictionHead(d)
        self.reverse_head = PredictionHead(d)
        self.reconstructor = Reconstructor(d, vocab_size, cfg.rec_depth, cfg.heads)
        self.token_fusion = TokenFusion(d)

    # ------------------------------------------------------------------ encoders
    def video_segments(self, segments: torch.Tensor) -> torch.Tensor:
        return self.video_in(segments)

    def video_tokens(self, segments: torch.Tensor) -> torch.Tensor:
        """B x K x d_feat -> B x d retrieval tokens."""
        return self.video_aggregator(self.video_segments(segments))

    def encode_sentences(self, sentences):
        ids, lengths = pad_token_batch(sentences)
        return self.text_encoder(ids, lengths)

    def text_tokens(self, paragraphs) -> torch.Tensor:
        """List of paragraphs (lists of token-id lists) -> B x d retrieval tokens."""
        flat = [s for p in paragraphs for s in p]
        _, summary = self.encode_sentences(flat)
        seq, pad = _split_padded(summary, [len(p) for p in paragraphs])
        return self.text_aggregator(seq, pad)

    # ----------------------------------------------------------------- grounding
    def refined_maps(self, sentence_vecs: torch.Tensor, segments: torch.Tensor) -> torch.Tensor:
        """sentence_vecs: M x d, segments: K x d (already projected) -> M x K x K x d."""
        fmap = feature_map(segments[None])
        fused = self.fusion(sentence_vecs, fmap.expand(sentence_vecs.shape[0], -1, -1, -1))
        return self.tan(fused)

    @torch.no_grad()
    def score_maps(self, sentences, segments) -> torch.Tensor:
        """Inference score maps for one paragraph in one video. segments: K x d_feat."""
        segments = torch.as_tensor(segments, dtype=torch.float32)
        _, summary = self.encode_sentences(sentences)
        return self.head(self.refined_maps(summary, self.video_segments(segments[None])[0]))

    # ------------------------------------------------------------------ training
    def scale_r(self):
        return self.log_scale_r.exp()

    def scale_g(self):
        return self.log_scale_g.exp()

    def losses(self, batch: Batch) -> dict:
        """Every loss component for one batch of paired (video, paragraph) items."""
        cfg = self.cfg
        counts = [len(s) for s in batch.sentences]
        seg = self.video_segments(batch.segments)
        video_tok = self.video_aggregator(seg)

        flat = [s for p in batch.sentences for s in p]
        flat_masked = [ms.token_ids for p in batch.masked for ms in p]
        _, summary = self.encode_sentences(flat)
        masked_states, _ = self.encode_sentences(flat_masked)

        seq, pad = _split_padded(summary, counts)
        text_tok = self.text_aggregator(seq, pad)
        sim_r = cosine_similarity_matrix(text_tok, video_tok)
        cmr, cmr_parts = contrastive_loss(sim_r, self.scale_r(), cfg.margin, cfg.beta1)

        owner = torch.repeat_interleave(torch.arange(batch.size), torch.as_tensor(counts))
        refined = self.refined_maps_batched(summary, seg, owner)
        scores = self.head(refined)  # N x K x K
        cells = top_q_cells(scores, cfg.q)  # N x Q x 2

        masked_flat = [ms for p in batch.masked for ms in p]
        rec, rank = self._local_terms(seg, owner, cells, scores, masked_states, flat, masked_flat, counts)

        out = {"cmr": cmr, "trip_r": cmr_parts["trip"], "nce_r": cmr_parts["nce"],
               "rec": rec, "rank": rank, "local": rec + rank}

        n_idx = torch.arange(len(flat))[:, None]
        top_feats = refined[n_idx, cells[..., 0], cells[..., 1]]  # N x Q x d
        sent_vis = cmff_fuse(top_feats, cfg.cmff_weights)
        vis_seq, vis_pad = _split_padded(sent_vis, counts)
        grounded = self.video_aggregator(vis_seq, vis_pad, seed=self.grounded_seed)
        fused_tok = self.token_fusion(video_tok, grounded)
        sim_g = cosine_similarity_matrix(text_tok, fused_tok)
        glob, glob_parts = contrastive_loss(sim_g, self.scale_g(), cfg.margin, cfg.beta2)
        zero = sim_r.sum() * 0.0
        out["global"] = glob if cfg.use_global else zero
        out["trip_g"], out["nce_g"] = glob_parts["trip"], glob_parts["nce"]
        mse = grrm_mse(sim_r, sim_g, detach_target=not cfg.mse_symmetric,
                       positives_only=cfg.mse_positives_only)
        out["mse"] = mse if cfg.use_mse else zero

        time_terms, sync_terms = [], []
        start = 0
        for c in counts:
            p_main = scores[start:start + c]
            maps = refined[start:start + c].detach()
            p_fwd = forward_sync_maps(maps, self.forward_head)
            p_rev = reverse_sync_maps(maps, self.reverse_head)
            gt_f = pseudo_labels(p_fwd, cfg.iou_min, cfg.iou_max)
            gt_r = pseudo_labels(p_rev, cfg.iou_min, cfg.iou_max)
            time_terms.append(bce_alignment_loss(p_main, gt_f) + bce_alignment_loss(p_main, gt_r))
            sync_terms.append(sync_head_loss(p_fwd, p_main) + sync_head_loss(p_rev, p_main))
            start += c
        out["time"] = torch.stack(time_terms).mean() if cfg.use_time else zero
        out["sync"] = torch.stack(sync_terms).mean() if cfg.fit_sync_heads else zero
        out["sim_r"] = sim_r.detach()
        out["sim_g"] = sim_g.detach()
        return out

    def refined_maps_batched(self, summary, seg, owner):
        fmap = feature_map(seg)[owner]
        return self.tan(self.fusion(summary, fmap))

    def _local_terms(self, seg, owner, cells, scores, masked_states, flat, masked_flat, counts):
        cfg = self.cfg
        n, q = cells.shape[:2]
        k = seg.shape[1]
        # span rows of every candidate, right-padded to K
        starts = cells[..., 0].reshape(-1)
        ends = cells[..., 1].reshape(-1)
        offs = torch.arange(k)
        rows = (starts[:, None] + offs[None, :]).clamp(max=k - 1)
        span_pad = offs[None, :] > (ends - starts)[:, None]
        video_of = owner.repeat_interleave(q)
        span_feats = seg[video_of[:, None], rows]  # NQ x K x d

        ids, lengths = pad_token_batch(flat)
        j = ids.shape[1]
        word_pad = torch.arange(j)[None, :] >= lengths[:, None]
        states = masked_states.repeat_interleave(q, dim=0)
        log_probs = self.reconstructor.log_probs(states, span_feats, word_pad.repeat_interleave(q, dim=0),
                                                 span_pad)
        log_probs = log_probs.view(n, q, j, -1)

        weights = torch.where(word_pad, 0.0, cfg.unmasked_weight)
        for row, ms in enumerate(masked_flat):
            weights[row, list(ms.mask_positions)] = 1.0

        idx = ids[:, None, :, None].expand(n, q, j, 1)
        per_cand = -(log_probs.gather(-1, idx).squeeze(-1) * weights[:, None, :]).sum(-1)  # N x Q

        rewards = reward_schedule(q).to(scores.dtype)
        if cfg.reward_order == "reconstruction":
            order = torch.argsort(per_cand.detach(), dim=1, stable=True)
            cand_rewards = torch.empty_like(per_cand)
            cand_rewards.scatter_(1, order, rewards.expand(n, q).contiguous())
        else:
            cand_rewards = rewards.expand(n, q)
        cand_scores = scores[torch.arange(n)[:, None], cells[..., 0], cells[..., 1]]
        rank_per_sent = -(cand_rewards * torch.log_softmax(cand_scores, dim=-1)).mean(-1)
        rec_per_sent = per_cand.mean(-1)
        return _paragraph_mean(rec_per_sent, counts), _paragraph_mean(rank_per_sent, counts)


def _paragraph_mean(values, counts):
    # mean over each paragraph's sentences, then over paragraphs
    parts = torch.split(values, list(counts))
    return torch.stack([p.mean() for p in parts]).mean()


def _split_padded(flat: torch.Tensor, counts):
    """Regroup an (sum counts) x d tensor into B x max(counts) x d plus a padding mask."""
    b, m = len(counts), max(counts)
    out = flat.new_zeros(b, m, flat.shape[-1])
    pad = torch.ones(b, m, dtype=torch.bool)
    start = 0
    for i, c in enumerate(counts):
        out[i, :c] = flat[start:start + c]
        pad[i, :c] = False
        start += c
    return out, pad
