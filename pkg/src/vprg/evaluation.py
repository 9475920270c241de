"""Inference (retrieve, then ground) and the corpus-level R@K IoU=m metric."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import InvalidArgumentError
from .moments import argmax_moment, moment_to_interval, temporal_iou

DEFAULT_KS = (10, 100)
DEFAULT_IOUS = (0.3, 0.5, 0.7)


@dataclass
class RankedRetrieval:
    query_id: str
    ranking: list  # (video_id, score), best first

    @property
    def video_ids(self) -> list:
        return [v for v, _ in self.ranking]


@dataclass
class GroundingPrediction:
    paragraph_id: str
    video_id: str
    moments: list  # MomentIndex per sentence
    intervals: list  # TimeInterval per sentence


def order_scores(query_id, video_ids, scores) -> RankedRetrieval:
    """Descending by score; equal scores fall back to ascending video id."""
    pairs = sorted(zip(video_ids, (float(s) for s in scores)), key=lambda vs: (-vs[1], vs[0]))
    return RankedRetrieval(query_id, pairs)


@torch.no_grad()
def rank_corpus(paragraphs, corpus, model) -> dict:
    """Rank every corpus video for every paragraph by retrieval-token cosine similarity."""
    if not corpus.videos:
        raise InvalidArgumentError("empty corpus")
    model.eval()
    feats = torch.as_tensor(np.stack([v.features for v in corpus.videos]), dtype=torch.float32)
    video_tok = model.video_tokens(feats)
    text_tok = model.text_tokens([p.sentences for p in paragraphs])
    video_tok = video_tok / video_tok.norm(dim=-1, keepdim=True)
    text_tok = text_tok / text_tok.norm(dim=-1, keepdim=True)
    sims = (text_tok @ video_tok.T).numpy()
    ids = [v.video_id for v in corpus.videos]
    return {p.paragraph_id: order_scores(p.paragraph_id, ids, row) for p, row in zip(paragraphs, sims)}


def retrieve(paragraph, corpus, model) -> RankedRetrieval:
    return rank_corpus([paragraph], corpus, model)[paragraph.paragraph_id]


@torch.no_grad()
def ground(paragraph, video, model) -> GroundingPrediction:
    """Best cell of each sentence's score map, converted to seconds in ``video``."""
    model.eval()
    maps = model.score_maps(paragraph.sentences, video.features).numpy()
    k = maps.shape[-1]
    moments = [argmax_moment(p) for p in maps]
    intervals = [moment_to_interval(m, k, video.duration) for m in moments]
    return GroundingPrediction(paragraph.paragraph_id, video.video_id, moments, intervals)


def recall_at_k_iou(rankings, predictions, paragraphs, k: int, iou: float) -> float:
    """Percentage of sentences whose paragraph ranks the true video within the top ``k``
    and whose predicted interval in that video has IoU strictly above ``iou``.

    ``predictions`` maps (paragraph_id, video_id) to a :class:`GroundingPrediction`.
    """
    if k < 1 or not 0 < iou <= 1:
        raise InvalidArgumentError(f"bad recall parameters K={k}, m={iou}")
    hits = total = 0
    for p in paragraphs:
        if p.gt_intervals is None:
            raise InvalidArgumentError(f"paragraph {p.paragraph_id} has no ground-truth intervals")
        if p.paragraph_id not in rankings:
            raise InvalidArgumentError(f"no ranking for paragraph {p.paragraph_id}")
        total += len(p.gt_intervals)
        if p.video_id not in rankings[p.paragraph_id].video_ids[:k]:
            continue
        pred = predictions.get((p.paragraph_id, p.video_id))
        if pred is None:
            raise InvalidArgumentError(f"no grounding for {p.paragraph_id} in {p.video_id}")
        hits += sum(temporal_iou(iv, gt) > iou for iv, gt in zip(pred.intervals, p.gt_intervals))
    if total == 0:
        raise InvalidArgumentError("no sentences to evaluate")
    return 100.0 * hits / total


def metric_name(k, iou) -> str:
    return f"R@{k} IoU={iou:g}"


@dataclass
class EvalResult:
    rankings: dict
    predictions: dict
    values: dict  # metric name -> percentage
    retrieval: dict = field(default_factory=dict)
    ks: tuple = DEFAULT_KS
    ious: tuple = DEFAULT_IOUS


def evaluate(model, corpus, ks=DEFAULT_KS, ious=DEFAULT_IOUS, paragraphs=None) -> EvalResult:
    paragraphs = corpus.paragraphs if paragraphs is None else paragraphs
    rankings = rank_corpus(paragraphs, corpus, model)
    predictions = {}
    for p in paragraphs:
        predictions[(p.paragraph_id, p.video_id)] = ground(p, corpus.video(p.video_id), model)
    values = {metric_name(k, m): recall_at_k_iou(rankings, predictions, paragraphs, k, m)
              for m in ious for k in ks}
    rank1 = float(np.mean([rankings[p.paragraph_id].video_ids[0] == p.video_id for p in paragraphs]))
    return EvalResult(rankings, predictions, values, {"rank1_accuracy": rank1}, tuple(ks), tuple(ious))


# -------------------------------------------------------------------- reports
def render_table(values: dict, ks=DEFAULT_KS, ious=DEFAULT_IOUS, label: str = "run") -> str:
    """Markdown table with one IoU group per threshold and one column per K."""
    head = "| Method | " + " | ".join(f"IoU={m:g} R@{k}" for m in ious for k in ks) + " |"
    rule = "|---" * (1 + len(ks) * len(ious)) + "|"
    lines = [head, rule]
    if values:
        cells = [f"{values[metric_name(k, m)]:.2f}" if metric_name(k, m) in values else "--"
                 for m in ious for k in ks]
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def emit_report(values: dict, destination, dataset: str = "", checkpoint: str = "",
                ks=DEFAULT_KS, ious=DEFAULT_IOUS, retrieval=None, heatmaps=None) -> dict:
    """Write ``metrics.json`` and ``report.md`` (plus optional heatmap PNGs) into ``destination``.

    ``heatmaps`` maps a file stem to an M x K x K array of score maps.
    """
    dest = Path(destination)
    dest.mkdir(parents=True, exist_ok=True)
    record = {
        "dataset": dataset,
        "checkpoint": checkpoint,
        "grid": {"k": list(ks), "iou": list(ious)},
        "values": dict(values),
        "retrieval": dict(retrieval or {}),
    }
    paths = {"metrics": dest / "metrics.json", "table": dest / "report.md"}
    paths["metrics"].write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    paths["table"].write_text(render_table(values, ks, ious, label=dataset or "run"), encoding="utf-8")
    for stem, maps in (heatmaps or {}).items():
        paths[stem] = save_heatmaps(maps, dest / f"{stem}.png")
    return paths


def read_report(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def save_heatmaps(maps, path, titles=None):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    maps = np.asarray(maps)
    n = maps.shape[0]
    fig, axes = plt.subplots(1, n, figsize=(3 * n, 3), squeeze=False)
    for i, ax in enumerate(axes[0]):
        ax.imshow(maps[i], vmin=0.0, vmax=1.0, cmap="viridis", origin="upper")
        ax.set_title(titles[i] if titles else f"sentence {i + 1}")
        ax.set_xlabel("end segment")
        ax.set_ylabel("start segment")
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return Path(path)
