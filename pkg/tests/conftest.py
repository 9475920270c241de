import numpy as np
import pytest
import torch

torch.set_num_threads(1)


def central_difference(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of scalar ``fn`` at ``x`` (float64) by central differences."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = float(fn(x))
            flat[i] = old - h
            down = float(fn(x))
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
    return grad


def analytic_gradient(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / max(a.norm(), b.norm(), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_setup(b=4, k=8, d=8, m=2, q=3, seed=0, **cfg_changes):
    """Small model plus one training batch drawn from a planted corpus."""
    from vprg.config import TrainConfig
    from vprg.data import SyntheticSpec, generate_synthetic_corpus
    from vprg.encoders import mask_sentence
    from vprg.model import Batch, GroundingRetrievalModel

    syn = generate_synthetic_corpus(SyntheticSpec(n_videos=b, n_segments=k, n_sentences=m, dim=d,
                                                  min_words=2, max_words=3, seed=seed))
    corpus = syn.corpus
    cfg = TrainConfig(epochs=1, decay_every=1, batch_size=b, num_segments=k, q=q, dim=d, heads=2,
                      cmff_weights=(0.4, 0.3, 0.3)[:q] if q == 3 else (1.0 / q,) * q, seed=seed,
                      **cfg_changes)
    torch.manual_seed(seed)
    model = GroundingRetrievalModel(cfg, corpus.vocab.size, d, corpus.vocab.table)
    paragraphs = [v.paragraphs[0].sentences for v in corpus.videos]
    batch = Batch(segments=torch.as_tensor(np.stack([v.features for v in corpus.videos])),
                  sentences=paragraphs,
                  masked=[[mask_sentence(s, 7 * i + j) for j, s in enumerate(p)] for i, p in enumerate(paragraphs)])
    return model, batch, corpus


class AuditLog:
    def __init__(self):
        self.reads = []


class AuditedIntervals(list):
    """Interval list that records every read of its values."""

    def __init__(self, values, log):
        super().__init__(values)
        self._log = log

    def __getitem__(self, i):
        self._log.reads.append(("item", i))
        return super().__getitem__(i)

    def __iter__(self):
        self._log.reads.append(("iter", None))
        return super().__iter__()


class AuditedParagraph:
    """Proxy around a paragraph that logs any touch of its interval field."""

    def __init__(self, paragraph, log):
        object.__setattr__(self, "_inner", paragraph)
        object.__setattr__(self, "_log", log)
        object.__setattr__(self, "_intervals", AuditedIntervals(paragraph.gt_intervals, log))

    def __getattr__(self, name):
        if name == "gt_intervals":
            self._log.reads.append(("attr", name))
            return self._intervals
        return getattr(self._inner, name)


def audited_corpus(corpus):
    from vprg.data import Corpus, CorpusRecord

    log = AuditLog()
    videos = [CorpusRecord(v.video_id, v.duration, v.features, [AuditedParagraph(p, log) for p in v.paragraphs])
              for v in corpus.videos]
    return Corpus(videos, corpus.vocab, corpus.name), log


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
