"""Accuracy evaluation of trained bundles against the linear baseline.

A prediction q for the quantized range p' counts as correct when
|q - p'| < precision / 2, measured over every valid pixel of the held-out
frames.  Contexts mirror decoding: quantized current-frame patches plus,
for temporal models, neighbors from the quantized previous frame.
"""

from __future__ import annotations

import numpy as np
import torch

from .model import AnchorNet
from .sampling import (
    INTRA_SLOTS,
    TEMPORAL_SLOTS,
    TemporalSource,
    _quantize,
    _value_at_or_before,
    extract_context,
)


def linear_baseline_accuracy(frame, precision: float) -> float:
    q = _quantize(frame.ranges, precision) * frame.valid
    h, w = q.shape
    correct = 0
    total = 0
    for i in range(h):
        for j in range(w):
            if not frame.valid[i, j]:
                continue
            a = _value_at_or_before(q, frame.valid, i, j - 1)
            b = _value_at_or_before(q, frame.valid, i - 1, j)
            c = _value_at_or_before(q, frame.valid, i - 1, j - 1)
            pred = min(max(a + b - c, 0.0), frame.max_range)
            correct += abs(pred - q[i, j]) < precision / 2
            total += 1
    return correct / max(total, 1)


def previous_valid_accuracy(frame, precision: float) -> float:
    q = _quantize(frame.ranges, precision) * frame.valid
    h, w = q.shape
    correct = 0
    total = 0
    for i in range(h):
        for j in range(w):
            if frame.valid[i, j]:
                pred = _value_at_or_before(q, frame.valid, i, j - 1)
                correct += abs(pred - q[i, j]) < precision / 2
                total += 1
    return correct / max(total, 1)


def eval_accuracy(model: AnchorNet, frames, calib, tracks, precision: float) -> float:
    """Model accuracy at one precision over (current, previous-or-None) pairs.

    The quantized previous frame backs the temporal context, matching what a
    decoder would hold.
    """
    temporal = model.input_dim == 4
    n_slots = INTRA_SLOTS + (TEMPORAL_SLOTS if temporal else 0)
    rows = []
    targets = []
    for fi, (frame, prev) in enumerate(frames):
        source = None
        if temporal and prev is not None:
            qprev = type(prev)(
                np.where(prev.valid, _quantize(prev.ranges, precision), 0.0),
                prev.valid,
                prev.max_range,
            )
            source = TemporalSource(qprev, calib, tracks[fi])
        q = _quantize(frame.ranges, precision) * frame.valid
        ii, jj = np.nonzero(frame.valid)
        for i, j in zip(ii, jj):
            d_az, d_el, anchors, tm, slots = extract_context(
                frame, calib, int(i), int(j), precision, source, tracks[fi]
            )
            row = np.zeros((5, n_slots), dtype=np.float64)
            if len(slots):
                row[0, slots] = d_az
                row[1, slots] = d_el
                row[2, slots] = anchors
                row[3, slots] = tm
                row[4, slots] = 1.0
            rows.append(row)
            targets.append(q[int(i), int(j)])
    data = np.stack(rows)
    mask = data[:, 4].astype(bool)
    nonempty = mask.any(axis=1)
    with torch.no_grad():
        feats = model.features(
            torch.from_numpy(data[:, 0]).float(),
            torch.from_numpy(data[:, 1]).float(),
            torch.from_numpy(data[:, 2]).float(),
            torch.from_numpy(data[:, 3]).long(),
            torch.from_numpy(mask),
        )
        pred = np.zeros(len(rows))
        if nonempty.any():
            sub = torch.from_numpy(nonempty)
            pred_t = model.predict_ranges(
                feats[sub], torch.from_numpy(mask[nonempty]),
                torch.from_numpy(data[nonempty, 2]).float(), frames[0][0].max_range,
            )
            pred[nonempty] = pred_t.numpy()
    targets = np.asarray(targets)
    return float(np.mean(np.abs(pred - targets) < precision / 2))
