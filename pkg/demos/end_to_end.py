"""Generate a small planted corpus, train briefly, then retrieve and ground.

Run:  python demos/end_to_end.py [epochs]
"""
import sys
import tempfile
from pathlib import Path

import torch

from vprg import SyntheticSpec, TrainConfig, evaluate, generate_synthetic_corpus, ground, train_to_end
from vprg.evaluation import render_table
from vprg.trainer import restore

torch.set_num_threads(1)
epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 20

syn = generate_synthetic_corpus(SyntheticSpec(n_videos=8, n_segments=16, n_sentences=3, dim=64, seed=0))
corpus = syn.corpus
print(f"{len(corpus.videos)} videos, {len(corpus.paragraphs)} paragraphs")

cfg = TrainConfig(epochs=epochs, decay_every=min(20, epochs), batch_size=4, base_lr=1e-3, seed=0)
with tempfile.TemporaryDirectory() as tmp:
    ckpt = train_to_end(corpus, cfg, Path(tmp))
    print("last step:", (Path(tmp) / "train_log.jsonl").read_text().splitlines()[-1])
model = restore(ckpt)

result = evaluate(model, corpus, ks=(1, 5), ious=(0.3, 0.5))
print(render_table(result.values, (1, 5), (0.3, 0.5), label="demo"), end="")
print("retrieval:", result.retrieval)

paragraph = corpus.paragraphs[0]
pred = ground(paragraph, corpus.video(paragraph.video_id), model)
for m, (iv, planted) in enumerate(zip(pred.intervals, syn.spans[paragraph.paragraph_id])):
    print(f"sentence {m + 1}: predicted [{iv.t_start:.1f}, {iv.t_end:.1f})  planted segments {planted}")
