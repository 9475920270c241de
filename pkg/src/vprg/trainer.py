"""End-to-end optimisation: total loss, learning-rate schedule, batching and checkpoints.

Checkpoint container (little-endian)::

    magic    8 bytes  b"VPRGCKPT"
    version  uint32   1
    mlen     uint64   manifest length in bytes
    manifest mlen bytes of UTF-8 JSON: tensors [{name, shape, offset, nbytes}],
             epoch, config, config_hash, metrics, model
    payload  float32 tensors back to back; offsets are relative to payload start
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import torch

from .config import TrainConfig
from .encoders import mask_sentence
from .errors import FormatError, InvalidArgumentError, NonFiniteLossError
from .model import Batch, GroundingRetrievalModel

log = logging.getLogger(__name__)

LOSS_TERMS = ("cmr", "local", "global", "time", "mse")
CKPT_MAGIC = b"VPRGCKPT"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sIQ")


def total_loss(components, names=LOSS_TERMS):
    """Unweighted sum of the named components; any non-finite term aborts the step."""
    total = 0.0
    for name in names:
        value = components[name]
        scalar = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(scalar):
            raise NonFiniteLossError(name, scalar)
        total = total + value
    return total


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    return cfg.base_lr * cfg.decay_factor ** (epoch // cfg.decay_every)


# ---------------------------------------------------------------- checkpoints
@dataclass
class Checkpoint:
    tensors: dict  # name -> float32 ndarray (parameters and optimiser moments)
    epoch: int
    config: dict
    metrics: dict = field(default_factory=dict)
    model_meta: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return TrainConfig(**self.config).digest()

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.tensors[name], dtype="<f4").tobytes())
        return h.hexdigest()[:16]

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.config)


def _config_from_json(d):
    d = dict(d)
    for key in ("cmff_weights", "adam_betas"):
        if key in d:
            d[key] = tuple(d[key])
    return d


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    manifest = {
        "tensors": entries,
        "epoch": ckpt.epoch,
        "config": ckpt.config,
        "config_hash": ckpt.config_hash,
        "metrics": ckpt.metrics,
        "model": ckpt.model_meta,
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(mbytes)) + mbytes + b"".join(chunks)


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < _CKPT_HEADER.size:
        raise FormatError("truncated checkpoint header", len(blob))
    magic, version, mlen = _CKPT_HEADER.unpack_from(blob)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported version {version}", 8)
    start = _CKPT_HEADER.size
    if len(blob) < start + mlen:
        raise FormatError("truncated manifest", len(blob))
    try:
        manifest = json.loads(blob[start:start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest: {exc}", start) from None
    payload = start + mlen
    tensors = {}
    for entry in manifest["tensors"]:
        lo = payload + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(blob):
            raise FormatError(f"tensor {entry['name']} runs past end of file", len(blob))
        arr = np.frombuffer(blob[lo:hi], dtype="<f4").astype(np.float32)
        tensors[entry["name"]] = arr.reshape(entry["shape"])
    return Checkpoint(tensors, manifest["epoch"], _config_from_json(manifest["config"]),
                      manifest.get("metrics", {}), manifest.get("model", {}))


def save_checkpoint(ckpt: Checkpoint, path):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def snapshot(model: GroundingRetrievalModel, optimizer, epoch: int, metrics=None) -> Checkpoint:
    tensors = {f"param.{n}": p.detach().cpu().numpy().astype(np.float32).copy()
               for n, p in model.named_parameters()}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for p, state in optimizer.state.items():
            for key, value in state.items():
                tensors[f"optim.{names[id(p)]}.{key}"] = np.asarray(
                    value.detach().cpu().numpy() if torch.is_tensor(value) else value, dtype=np.float32).copy()
    meta = {"vocab_size": model.text_encoder.embedding.num_embeddings,
            "feature_dim": getattr(model.video_in, "in_features", model.cfg.dim)}
    return Checkpoint(tensors, epoch, model.cfg.to_dict(), dict(metrics or {}), meta)


def build_model(cfg: TrainConfig, vocab_size: int, feature_dim: int, embedding_table=None):
    torch.manual_seed(cfg.seed)
    return GroundingRetrievalModel(cfg, vocab_size, feature_dim, embedding_table)


def make_optimizer(model, cfg: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=cfg.base_lr, betas=cfg.adam_betas, eps=cfg.adam_eps)


def restore(ckpt: Checkpoint, with_optimizer: bool = False):
    """Rebuild the model (and optionally its optimiser) from a checkpoint."""
    cfg = ckpt.train_config()
    model = GroundingRetrievalModel(cfg, ckpt.model_meta["vocab_size"], ckpt.model_meta["feature_dim"])
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.from_numpy(ckpt.tensors[f"param.{name}"]))
    if not with_optimizer:
        return model
    optimizer = make_optimizer(model, cfg)
    for name, p in model.named_parameters():
        state = {}
        for key in ("step", "exp_avg", "exp_avg_sq"):
            arr = ckpt.tensors.get(f"optim.{name}.{key}")
            if arr is not None:
                state[key] = torch.from_numpy(arr.copy())
        if state:
            optimizer.state[p] = state
    return model, optimizer


# ------------------------------------------------------------------- training
@dataclass
class StepRecord:
    epoch: int
    step: int
    lr: float
    losses: dict

    def to_json(self) -> str:
        return json.dumps({"epoch": self.epoch, "step": self.step, "lr": self.lr, **self.losses})


def _training_pairs(corpus):
    pairs = []
    for video in corpus.videos:
        for paragraph in video.paragraphs:
            pairs.append((video.features, paragraph.sentences))
    return pairs


def train(corpus, cfg: TrainConfig, out_dir=None, on_step: Callable | None = None,
          model: GroundingRetrievalModel | None = None) -> Iterator[Checkpoint]:
    """Train on paragraph-video correspondence only and yield a checkpoint after every epoch.

    Only segment features and sentence token ids are read; interval annotations are
    never touched. With ``out_dir`` a step log and checkpoint files are written there.
    """
    pairs = _training_pairs(corpus)
    if not pairs:
        raise InvalidArgumentError("corpus has no paragraph-video pairs")
    if model is None:
        model = build_model(cfg, corpus.vocab.size, pairs[0][0].shape[1], corpus.vocab.table)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    optimizer = make_optimizer(model, cfg)
    names = LOSS_TERMS + (("sync",) if cfg.fit_sync_heads else ())

    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "w", encoding="utf-8")
    step = 0
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at_epoch(epoch, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            model.train()
            sums = {}
            order = rng.permutation(len(pairs))
            for lo in range(0, len(order), cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                batch = Batch(
                    segments=torch.as_tensor(np.stack([pairs[i][0] for i in idx]), dtype=torch.float32),
                    sentences=[pairs[i][1] for i in idx],
                    masked=[[mask_sentence(s, int(rng.integers(2**63))) for s in pairs[i][1]] for i in idx],
                )
                comps = model.losses(batch)
                loss = total_loss(comps, names)
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                optimizer.step()
                record = {k: float(comps[k].detach()) for k in names + ("rec", "rank")}
                record["total"] = float(loss.detach())
                for k, v in record.items():
                    sums[k] = sums.get(k, 0.0) + v * len(idx)
                rec = StepRecord(epoch, step, lr, record)
                if log_fh is not None:
                    log_fh.write(rec.to_json() + "\n")
                if on_step is not None:
                    on_step(rec)
                step += 1
            metrics = {k: v / len(pairs) for k, v in sums.items()}
            log.info("epoch %d lr %.3g total %.5f", epoch, lr, metrics["total"])
            ckpt = snapshot(model, optimizer, epoch, metrics)
            if out_dir is not None:
                last = epoch == cfg.epochs - 1
                if last or (cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0):
                    save_checkpoint(ckpt, out_dir / f"epoch_{epoch:04d}.ckpt")
                if last:
                    save_checkpoint(ckpt, out_dir / "final.ckpt")
            yield ckpt
    finally:
        if log_fh is not None:
            log_fh.close()


def train_to_end(corpus, cfg: TrainConfig, out_dir=None, **kwargs) -> Checkpoint:
    ckpt = None
    for ckpt in train(corpus, cfg, out_dir, **kwargs):
        pass
    return ckpt
