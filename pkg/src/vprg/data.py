"""Feature and annotation files, corpus directories and the planted-signal generator.

Feature container (little-endian)::

    magic   8 bytes   b"VPRGFEAT"
    version uint32    1
    rows    uint64
    cols    uint64
    payload rows*cols float32, row-major

Annotations are JSON lines: ``{"video_id", "paragraph_id", "sentences": [[ids]],
"gt_intervals": [[t_s, t_e]]}`` with ``gt_intervals`` optional.

A corpus directory holds ``vocab.txt``, ``embeddings.vfeat``, ``videos.jsonl``
(``video_id``, ``duration``, ``features`` path), ``features/*.vfeat`` and
``annotations.jsonl``.
"""
from __future__ import annotations

import itertools
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encoders import MASK_TOKEN, PAD_TOKEN, Vocabulary, pool_segment_frames
from .errors import FormatError, InvalidArgumentError, ParseError
from .moments import TimeInterval, moment_to_interval

FEATURE_MAGIC = b"VPRGFEAT"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<8sIQQ")


def write_features(path, matrix):
    matrix = np.asarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise InvalidArgumentError(f"feature matrix must be 2-D, got shape {matrix.shape}")
    rows, cols = matrix.shape
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, rows, cols))
        fh.write(np.ascontiguousarray(matrix).tobytes())
    os.replace(tmp, path)


def decode_features(blob: bytes) -> np.ndarray:
    if len(blob) < 8:
        raise FormatError(f"file too short for magic ({len(blob)} bytes)", len(blob))
    if blob[:8] != FEATURE_MAGIC:
        raise FormatError(f"bad magic {blob[:8]!r}", 0)
    if len(blob) < _HEADER.size:
        raise FormatError(f"truncated header: expected {_HEADER.size} bytes, got {len(blob)}", len(blob))
    _, version, rows, cols = _HEADER.unpack_from(blob)
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported version {version}", 8)
    expected = rows * cols * 4
    actual = len(blob) - _HEADER.size
    if actual != expected:
        raise FormatError(f"payload length mismatch: expected {expected} bytes, got {actual}",
                          _HEADER.size + min(actual, expected))
    data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size, count=rows * cols)
    return data.reshape(rows, cols).astype(np.float32)


def read_features(path) -> np.ndarray:
    return decode_features(Path(path).read_bytes())


@dataclass
class ParagraphRecord:
    paragraph_id: str
    video_id: str
    sentences: list
    gt_intervals: list | None = None

    def __post_init__(self):
        if not self.sentences:
            raise InvalidArgumentError(f"paragraph {self.paragraph_id} has no sentences")
        if self.gt_intervals is not None and len(self.gt_intervals) != len(self.sentences):
            raise InvalidArgumentError(f"paragraph {self.paragraph_id}: interval count != sentence count")

    @property
    def num_sentences(self) -> int:
        return len(self.sentences)

    def redacted(self) -> "ParagraphRecord":
        return ParagraphRecord(self.paragraph_id, self.video_id, self.sentences, None)


@dataclass
class CorpusRecord:
    video_id: str
    duration: float
    features: np.ndarray  # K x d segment features
    paragraphs: list = field(default_factory=list)


@dataclass
class Corpus:
    videos: list
    vocab: Vocabulary
    name: str = "corpus"

    def __post_init__(self):
        self._by_id = {v.video_id: v for v in self.videos}
        if len(self._by_id) != len(self.videos):
            raise InvalidArgumentError("duplicate video ids")

    def video(self, video_id) -> CorpusRecord:
        return self._by_id[video_id]

    @property
    def paragraphs(self) -> list:
        return [p for v in self.videos for p in v.paragraphs]

    @property
    def num_segments(self) -> int:
        return self.videos[0].features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.videos[0].features.shape[1]

    def redacted(self) -> "Corpus":
        videos = [CorpusRecord(v.video_id, v.duration, v.features, [p.redacted() for p in v.paragraphs])
                  for v in self.videos]
        return Corpus(videos, self.vocab, self.name)


def _parse_annotation(obj, lineno):
    if not isinstance(obj, dict):
        raise ParseError(lineno, "record must be a JSON object")
    for key in ("video_id", "paragraph_id", "sentences"):
        if key not in obj:
            raise ParseError(lineno, f"missing field {key!r}")
    if not isinstance(obj["video_id"], str) or not isinstance(obj["paragraph_id"], str):
        raise ParseError(lineno, "video_id and paragraph_id must be strings")
    sentences = obj["sentences"]
    if not isinstance(sentences, list) or not sentences:
        raise ParseError(lineno, "sentences must be a non-empty list")
    for s in sentences:
        if not isinstance(s, list) or not s or not all(isinstance(t, int) and t >= 0 for t in s):
            raise ParseError(lineno, "each sentence must be a non-empty list of non-negative token ids")
    intervals = obj.get("gt_intervals")
    if intervals is not None:
        if not isinstance(intervals, list) or len(intervals) != len(sentences):
            raise ParseError(lineno, f"gt_intervals must have one entry per sentence ({len(sentences)})")
        parsed = []
        for iv in intervals:
            if (not isinstance(iv, list) or len(iv) != 2
                    or not all(isinstance(x, (int, float)) for x in iv) or not 0 <= iv[0] < iv[1]):
                raise ParseError(lineno, f"bad interval {iv!r}")
            parsed.append(TimeInterval(float(iv[0]), float(iv[1])))
        intervals = parsed
    return obj["video_id"], obj["paragraph_id"], [list(s) for s in sentences], intervals


def read_annotations(path, redact_intervals: bool = False) -> list[ParagraphRecord]:
    """Parse a JSON-lines annotation file.

    With ``redact_intervals`` the ground-truth intervals are validated and then
    dropped, so training code never holds them.
    """
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(lineno, f"invalid JSON: {exc.msg}") from None
            video_id, paragraph_id, sentences, intervals = _parse_annotation(obj, lineno)
            records.append(ParagraphRecord(paragraph_id, video_id, sentences,
                                           None if redact_intervals else intervals))
    return records


def write_annotations(path, paragraphs):
    with open(path, "w", encoding="utf-8") as fh:
        for p in paragraphs:
            obj = {"video_id": p.video_id, "paragraph_id": p.paragraph_id, "sentences": p.sentences}
            if p.gt_intervals is not None:
                obj["gt_intervals"] = [[float(a), float(b)] for a, b in p.gt_intervals]
            fh.write(json.dumps(obj) + "\n")


def save_corpus(corpus: Corpus, directory):
    directory = Path(directory)
    (directory / "features").mkdir(parents=True, exist_ok=True)
    corpus.vocab.save(directory / "vocab.txt", directory / "embeddings.vfeat")
    with open(directory / "videos.jsonl", "w", encoding="utf-8") as fh:
        for v in corpus.videos:
            rel = f"features/{v.video_id}.vfeat"
            write_features(directory / rel, v.features)
            fh.write(json.dumps({"video_id": v.video_id, "duration": v.duration, "features": rel}) + "\n")
    write_annotations(directory / "annotations.jsonl", corpus.paragraphs)


def load_corpus(directory, num_segments: int | None = None, redact_intervals: bool = False) -> Corpus:
    """Load a corpus directory; raw frame matrices with more rows than ``num_segments`` are pooled."""
    directory = Path(directory)
    vocab = Vocabulary.load(directory / "vocab.txt", directory / "embeddings.vfeat")
    videos = []
    with open(directory / "videos.jsonl", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                video_id, duration, rel = obj["video_id"], float(obj["duration"]), obj["features"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(lineno, f"bad video record: {exc}") from None
            feats = read_features(directory / rel)
            k = num_segments or feats.shape[0]
            if feats.shape[0] != k:
                feats = pool_segment_frames(feats, k).astype(np.float32)
            videos.append(CorpusRecord(video_id, duration, feats, []))
    by_id = {v.video_id: v for v in videos}
    for p in read_annotations(directory / "annotations.jsonl", redact_intervals=redact_intervals):
        if p.video_id not in by_id:
            raise InvalidArgumentError(f"paragraph {p.paragraph_id} references unknown video {p.video_id}")
        by_id[p.video_id].paragraphs.append(p)
    return Corpus(videos, vocab, name=directory.name)


@dataclass
class SyntheticSpec:
    """Planted-signal corpus: each sentence's words are laid out one per segment
    over its span, background segments carry a random distractor word."""

    n_videos: int = 8
    n_segments: int = 16
    n_sentences: int = 3
    dim: int = 64
    snr: float = 4.0
    min_words: int = 3
    max_words: int = 5
    vocab_words: int = 0  # 0 -> three words per sentence slot
    # >0: sentences come in families; word slot j of a family picks one of this many
    # alternatives, so a sentence's siblings differ from it in a single word
    # (requires min_words == max_words)
    alternatives: int = 0
    distractor: float = 1.0
    duration_range: tuple = (20.0, 60.0)
    frames_per_segment: int = 1
    seed: int = 0

    def validate(self):
        if min(self.n_videos, self.n_segments, self.n_sentences, self.dim, self.min_words) < 1:
            raise InvalidArgumentError("synthetic sizes must be positive")
        if self.max_words < self.min_words:
            raise InvalidArgumentError("max_words < min_words")
        if self.n_sentences * self.min_words > self.n_segments:
            raise InvalidArgumentError(
                f"{self.n_sentences} spans of >= {self.min_words} segments cannot fit in K={self.n_segments}")
        if self.alternatives == 1 or self.alternatives < 0:
            raise InvalidArgumentError("alternatives must be 0 or at least 2")
        if self.alternatives and self.min_words != self.max_words:
            raise InvalidArgumentError("sentence families need min_words == max_words")
        if self.snr <= 0:
            raise InvalidArgumentError("snr must be positive")


@dataclass
class SyntheticCorpus:
    corpus: Corpus
    prototypes: np.ndarray  # visual signature of each content word (row w <-> token id w + 2)
    spans: dict  # paragraph_id -> list of (start, end) planted segment spans


def generate_synthetic_corpus(spec: SyntheticSpec) -> SyntheticCorpus:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    k, m, d = spec.n_segments, spec.n_sentences, spec.dim
    if spec.alternatives:
        drawn_all, n_words, siblings = _family_paragraphs(spec, rng)
    else:
        n_words = spec.vocab_words or 3 * spec.n_videos * spec.n_sentences
        if n_words < spec.max_words:
            raise InvalidArgumentError("vocabulary smaller than a sentence")
        draw, siblings = _unique_sentences(n_words, rng), {}
        drawn_all = []
        for _ in range(spec.n_videos):
            ls = list(rng.integers(spec.min_words, spec.max_words + 1, size=m))
            while sum(ls) > k:
                ls[int(np.argmax(ls))] -= 1
            drawn_all.append([draw(length) for length in ls])
    prototypes = rng.standard_normal((n_words, d)).astype(np.float32)
    rotation, _ = np.linalg.qr(rng.standard_normal((d, d)))
    table = np.zeros((n_words + 2, d), dtype=np.float32)
    table[1] = rng.standard_normal(d) * 0.1
    table[2:] = prototypes @ rotation.astype(np.float32)
    tokens = [PAD_TOKEN, MASK_TOKEN] + [f"w{i:03d}" for i in range(n_words)]
    vocab = Vocabulary(tokens, table)
    noise = 0.0 if math.isinf(spec.snr) else 1.0 / spec.snr

    videos, spans = [], {}
    for n in range(spec.n_videos):
        drawn = drawn_all[n]
        gaps = rng.multinomial(k - sum(len(ws) for ws in drawn), np.full(m + 1, 1.0 / (m + 1)))
        signal = np.zeros((k, d), dtype=np.float32)
        sentences, para_spans = [], []
        pos = int(gaps[0])
        for s, ws in enumerate(drawn):
            start, end = pos, pos + len(ws) - 1
            signal[start:end + 1] = prototypes[list(ws)]
            sentences.append([w + 2 for w in ws])
            para_spans.append((start, end))
            pos = end + 1 + int(gaps[s + 1])
        background = np.setdiff1d(np.arange(k), [j for a, b in para_spans for j in range(a, b + 1)])
        if siblings:
            # each unused alternative shows up once in the background, so the whole
            # video is ambiguous about every slot while the true span is not
            used = {w for ws in drawn for w in ws}
            unused = sorted({a for w in used for a in siblings[w]} - used)
            words = rng.permutation(unused)[:len(background)]
            slots = rng.permutation(background)[:len(words)]
            signal[slots] = spec.distractor * prototypes[words]
        else:
            words = rng.choice(n_words, size=len(background))
            signal[background] = spec.distractor * prototypes[words]
        duration = float(rng.uniform(*spec.duration_range))
        video_id = f"v{n:03d}"
        para = ParagraphRecord(f"p{n:03d}", video_id, sentences,
                               [moment_to_interval(sp, k, duration) for sp in para_spans])
        reps = spec.frames_per_segment
        frames = np.repeat(signal, reps, axis=0)
        frames = frames + noise * rng.standard_normal(frames.shape).astype(np.float32)
        feats = pool_segment_frames(frames, k).astype(np.float32) if reps > 1 else frames.astype(np.float32)
        videos.append(CorpusRecord(video_id, duration, feats, [para]))
        spans[para.paragraph_id] = para_spans
    return SyntheticCorpus(Corpus(videos, vocab, name="synthetic"), prototypes, spans)


def _unique_sentences(n_words, rng):
    seen = set()

    def draw(length):
        while True:
            ws = tuple(int(w) for w in rng.choice(n_words, length, replace=False))
            if ws not in seen:
                seen.add(ws)
                return ws
    return draw


def _family_paragraphs(spec, rng):
    # Videos come in groups of alternatives**L. Within a group, sentence slot m of every
    # video is a different member of one shared family, so all videos of a group carry
    # the same bag of words and only the arrangement tells them apart.
    length, alt = spec.min_words, spec.alternatives
    group = alt ** length
    paragraphs, n_words, siblings = [], 0, {}
    for lo in range(0, spec.n_videos, group):
        size = min(group, spec.n_videos - lo)
        members = []
        for _ in range(spec.n_sentences):
            slots = np.arange(n_words, n_words + length * alt).reshape(length, alt)
            n_words += length * alt
            for slot in slots:
                for w in slot:
                    siblings[int(w)] = tuple(int(a) for a in slot if a != w)
            family = [tuple(int(w) for w in combo) for combo in itertools.product(*slots)]
            members.append([family[i] for i in rng.permutation(group)[:size]])
        paragraphs.extend([members[s][v] for s in range(spec.n_sentences)] for v in range(size))
    return paragraphs, n_words, siblings


def spec_to_json(spec: SyntheticSpec) -> str:
    return json.dumps(asdict(spec), sort_keys=True)
