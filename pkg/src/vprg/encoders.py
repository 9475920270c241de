"""Text and video encoding: vocabulary lookup, word masking, BiLSTM sentences, frame pooling."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .errors import InvalidArgumentError

PAD_ID = 0
MASK_ID = 1
PAD_TOKEN = "<pad>"
MASK_TOKEN = "<mask>"


@dataclass
class Vocabulary:
    """Token list plus an ``n_v x d_s`` embedding table. Ids 0 and 1 are PAD and MASK."""

    tokens: list[str]
    table: np.ndarray
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float32)
        if len(self.tokens) < 2 or self.tokens[PAD_ID] != PAD_TOKEN or self.tokens[MASK_ID] != MASK_TOKEN:
            raise InvalidArgumentError("vocabulary must start with the PAD and MASK tokens")
        if self.table.shape[0] != len(self.tokens):
            raise InvalidArgumentError(
                f"embedding table has {self.table.shape[0]} rows for {len(self.tokens)} tokens")
        self._index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise InvalidArgumentError("duplicate tokens in vocabulary")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def id_of(self, token: str) -> int:
        return self._index[token]

    def save(self, token_path, table_path):
        from .data import write_features

        Path(token_path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")
        write_features(table_path, self.table)

    @classmethod
    def load(cls, token_path, table_path) -> "Vocabulary":
        from .data import read_features

        tokens = Path(token_path).read_text(encoding="utf-8").splitlines()
        return cls(tokens, read_features(table_path))


def embed_words(token_ids, vocab: Vocabulary) -> np.ndarray:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab.size):
        raise InvalidArgumentError(f"token id out of range [0, {vocab.size})")
    return vocab.table[ids]


@dataclass(frozen=True)
class MaskedSentence:
    token_ids: tuple[int, ...]
    original_ids: tuple[int, ...]
    mask_positions: tuple[int, ...]


def num_masked(length: int) -> int:
    return math.ceil(length / 3)


def mask_sentence(token_ids, rng_seed) -> MaskedSentence:
    """Replace ceil(J/3) distinct, uniformly chosen positions with MASK."""
    original = tuple(int(t) for t in token_ids)
    rng = np.random.default_rng(rng_seed)
    positions = tuple(sorted(int(p) for p in rng.choice(len(original), num_masked(len(original)), replace=False)))
    masked = list(original)
    for p in positions:
        masked[p] = MASK_ID
    return MaskedSentence(tuple(masked), original, positions)


def pool_segment_frames(frames, num_segments: int) -> np.ndarray:
    """Average frames over ``num_segments`` contiguous groups whose sizes differ by at most one."""
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[0] < num_segments or num_segments < 1:
        raise InvalidArgumentError(
            f"need at least K={num_segments} frames, got shape {frames.shape}")
    groups = np.array_split(np.arange(frames.shape[0]), num_segments)
    return np.stack([frames[g].mean(axis=0) for g in groups])


@dataclass
class SentenceEncoding:
    per_word: torch.Tensor  # J x d_s
    summary: torch.Tensor  # d_s


class SentenceEncoder(nn.Module):
    """Word embedding followed by a BiLSTM.

    Forward and backward hidden states are summed and projected back to ``d_s``.
    The summary vector applies the same projection to the sum of the two final states.
    """

    def __init__(self, vocab_size: int, dim: int, table=None):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, dim, padding_idx=PAD_ID)
        if table is not None:
            table = torch.as_tensor(np.asarray(table), dtype=torch.float32)
            if table.shape != (vocab_size, dim):
                raise InvalidArgumentError(f"embedding table shape {tuple(table.shape)} != {(vocab_size, dim)}")
            with torch.no_grad():
                self.embedding.weight.copy_(table)
                self.embedding.weight[PAD_ID].zero_()
        self.lstm = nn.LSTM(dim, dim, batch_first=True, bidirectional=True)
        self.proj = nn.Linear(dim, dim)
        self.dim = dim

    def encode_embeddings(self, emb: torch.Tensor, lengths: torch.Tensor):
        """emb: N x J x d, lengths: N. Returns (per_word N x J x d, summary N x d)."""
        if emb.shape[1] == 0 or bool((lengths < 1).any()):
            raise InvalidArgumentError("empty sentence")
        packed = pack_padded_sequence(emb, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, (h_n, _) = self.lstm(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=emb.shape[1])
        d = self.dim
        per_word = self.proj(out[..., :d] + out[..., d:])
        pad = torch.arange(emb.shape[1], device=emb.device)[None, :] >= lengths[:, None]
        per_word = per_word.masked_fill(pad[..., None], 0.0)
        summary = self.proj(h_n[0] + h_n[1])
        return per_word, summary

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor):
        return self.encode_embeddings(self.embedding(ids), lengths)

    def encode(self, token_ids) -> SentenceEncoding:
        ids = torch.as_tensor([list(token_ids)], dtype=torch.long)
        per_word, summary = self(ids, torch.tensor([ids.shape[1]]))
        return SentenceEncoding(per_word[0], summary[0])

    def encode_masked(self, masked: MaskedSentence) -> SentenceEncoding:
        # same parameters as the unmasked path; only the ids differ
        return self.encode(masked.token_ids)


def encode_sentence(embeddings, encoder: SentenceEncoder) -> SentenceEncoding:
    emb = torch.as_tensor(embeddings, dtype=torch.float32)
    if emb.ndim != 2 or emb.shape[0] == 0:
        raise InvalidArgumentError("empty sentence")
    per_word, summary = encoder.encode_embeddings(emb[None], torch.tensor([emb.shape[0]]))
    return SentenceEncoding(per_word[0], summary[0])


def pad_token_batch(sentences, pad_id: int = PAD_ID):
    """List of id sequences -> (N x J_max LongTensor, lengths LongTensor)."""
    lengths = [len(s) for s in sentences]
    if not sentences or min(lengths) < 1:
        raise InvalidArgumentError("empty sentence")
    ids = torch.full((len(sentences), max(lengths)), pad_id, dtype=torch.long)
    for n, s in enumerate(sentences):
        ids[n, :len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return ids, torch.as_tensor(lengths, dtype=torch.long)
