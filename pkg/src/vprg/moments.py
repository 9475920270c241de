"""Geometry of 2D candidate-moment maps.

A video is split into ``K`` uniform segments. Candidate moment ``(i, j)`` with
``i <= j`` covers segments ``i..j`` inclusive (0-based) and maps to the
closed-open interval ``[i * L, (j + 1) * L)`` with ``L = duration / K``.
Cells with ``i > j`` are invalid; they hold zeros and never take part in a
reduction.
"""
from __future__ import annotations

from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .errors import InvalidArgumentError


class MomentIndex(NamedTuple):
    start: int
    end: int


class TimeInterval(NamedTuple):
    t_start: float
    t_end: float

    @property
    def length(self) -> float:
        return self.t_end - self.t_start


def check_moment(moment, num_segments):
    start, end = int(moment[0]), int(moment[1])
    if not 0 <= start <= end < num_segments:
        raise InvalidArgumentError(f"moment {tuple(moment)} invalid for K={num_segments}")
    return MomentIndex(start, end)


def enumerate_moments(num_segments: int) -> list[MomentIndex]:
    if num_segments <= 0:
        raise InvalidArgumentError(f"segment count must be positive, got {num_segments}")
    return [MomentIndex(i, j) for i in range(num_segments) for j in range(i, num_segments)]


def moment_to_interval(moment, num_segments: int, duration: float) -> TimeInterval:
    if duration <= 0:
        raise InvalidArgumentError(f"duration must be positive, got {duration}")
    start, end = check_moment(moment, num_segments)
    seg_len = duration / num_segments
    return TimeInterval(start * seg_len, (end + 1) * seg_len)


def temporal_iou(a, b) -> float:
    """Intersection over union of two intervals; touching intervals give 0."""
    a_s, a_e = float(a[0]), float(a[1])
    b_s, b_e = float(b[0]), float(b[1])
    if a_s >= a_e or b_s >= b_e:
        raise InvalidArgumentError(f"degenerate interval in {tuple(a)} / {tuple(b)}")
    inter = min(a_e, b_e) - max(a_s, b_s)
    if inter <= 0:
        return 0.0
    union = max(a_e, b_e) - min(a_s, b_s)
    return inter / union


def aggregate_moment_features(segments, moment) -> np.ndarray:
    segments = np.asarray(segments)
    if segments.ndim != 2 or segments.shape[0] == 0:
        raise InvalidArgumentError("segment matrix must be a non-empty K x d array")
    start, end = check_moment(moment, segments.shape[0])
    return segments[start:end + 1].max(axis=0)


def build_feature_map(segments) -> np.ndarray:
    """K x K x d map; slot (i, j) is the max-pool of rows i..j, zeros below the diagonal."""
    segments = np.asarray(segments)
    if segments.ndim != 2 or segments.shape[0] == 0:
        raise InvalidArgumentError("segment matrix must be a non-empty K x d array")
    k, d = segments.shape
    fmap = np.zeros((k, k, d), dtype=segments.dtype)
    for i in range(k):
        running = segments[i].copy()
        for j in range(i, k):
            np.maximum(running, segments[j], out=running)
            fmap[i, j] = running
    return fmap


@lru_cache(maxsize=None)
def valid_mask(num_segments: int) -> np.ndarray:
    mask = np.triu(np.ones((num_segments, num_segments), dtype=bool))
    mask.setflags(write=False)
    return mask


@lru_cache(maxsize=8)
def _iou_table(num_segments: int) -> np.ndarray:
    # table[a, b, i, j] = IoU of [i, j+1] against [a, b+1]; zero on invalid (i, j).
    k = num_segments
    idx = np.arange(k)
    start = idx[:, None].astype(float)
    end = (idx[None, :] + 1).astype(float)
    ts = start[:, :, None, None]
    te = end[:, :, None, None]
    cs = start[None, None, :, :]
    ce = end[None, None, :, :]
    inter = np.clip(np.minimum(te, ce) - np.maximum(ts, cs), 0.0, None)
    union = np.maximum(te, ce) - np.minimum(ts, cs)
    table = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    mask = valid_mask(k)
    table = table * mask[None, None] * mask[:, :, None, None]
    table.setflags(write=False)
    return table


def moment_iou_map(target, num_segments: int) -> np.ndarray:
    """IoU of every valid cell with ``target``, in segment units."""
    start, end = check_moment(target, num_segments)
    return _iou_table(num_segments)[start, end]


def soft_label_map(target, num_segments: int, iou_min: float = 0.5, iou_max: float = 1.0) -> np.ndarray:
    """IoU with ``target`` rescaled linearly from [iou_min, iou_max] onto [0, 1] and clipped."""
    if not 0.0 <= iou_min < iou_max <= 1.0:
        raise InvalidArgumentError(f"need 0 <= iou_min < iou_max <= 1, got {iou_min}, {iou_max}")
    iou = moment_iou_map(target, num_segments)
    labels = np.clip((iou - iou_min) / (iou_max - iou_min), 0.0, 1.0)
    return labels * valid_mask(num_segments)


def argmax_moment(scores) -> MomentIndex:
    """Best valid cell; ties resolve to the lexicographically smallest (i, j)."""
    scores = np.asarray(scores, dtype=float)
    k = scores.shape[0]
    masked = np.where(valid_mask(k), scores, -np.inf)
    flat = int(np.argmax(masked))
    return MomentIndex(flat // k, flat % k)
