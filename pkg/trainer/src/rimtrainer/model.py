"""The anchor-scoring point network and its export to the RWGT layout.

Architecture: a shared pointwise encoder, a masked max-pool to a global
feature, concatenation of the global feature to every point, then two
pointwise heads (anchor classification logits and per-anchor residual
regression) ending in width 1.  Padded slots are excluded from the pool and
their logits forced to -inf, which makes the fixed-slot training view
exactly equivalent to the packed inference view.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from . import formats


class AnchorNet(nn.Module):
    def __init__(self, input_dim: int, trunk=(16, 16, 32, 128), head=(64, 32),
                 normalization: float = 75.0):
        super().__init__()
        self.input_dim = input_dim
        self.normalization = normalization
        layers = []
        w = input_dim
        for out_w in trunk:
            layers.append(nn.Linear(w, out_w))
            w = out_w
        self.trunk = nn.ModuleList(layers)
        self.cls_head = self._make_head(2 * w, head)
        self.res_head = self._make_head(2 * w, head)

    @staticmethod
    def _make_head(in_w, widths):
        layers = []
        w = in_w
        for out_w in widths:
            layers.append(nn.Linear(w, out_w))
            w = out_w
        layers.append(nn.Linear(w, 1))
        return nn.ModuleList(layers)

    def features(self, batch_az, batch_el, anchors, time, mask):
        """(B, S) arrays -> (B, S, d) features with mean-centered ranges."""
        counts = mask.sum(dim=1, keepdim=True).clamp(min=1)
        mean = (anchors * mask).sum(dim=1, keepdim=True) / counts
        rel = (anchors - mean) / self.normalization
        cols = [batch_az, batch_el, rel]
        if self.input_dim == 4:
            cols.append(time.to(batch_az.dtype))
        return torch.stack(cols, dim=2) * mask.unsqueeze(2)

    def forward(self, feats, mask):
        """feats (B, S, d), mask (B, S) -> (logits (B, S), residuals_m (B, S))."""
        x = feats
        for layer in self.trunk:
            x = torch.relu(layer(x))
        pooled = x.masked_fill(~mask.unsqueeze(2), float("-inf")).amax(dim=1)
        g = pooled.unsqueeze(1).expand(-1, x.shape[1], -1)
        x = torch.cat([x, g], dim=2)

        def run_head(head, x):
            y = x
            for layer in head[:-1]:
                y = torch.relu(layer(y))
            return head[-1](y).squeeze(2)

        logits = run_head(self.cls_head, x).masked_fill(~mask, float("-inf"))
        residuals = run_head(self.res_head, x) * self.normalization
        return logits, residuals

    def predict_ranges(self, feats, mask, anchors, max_range: float):
        logits, residuals = self.forward(feats, mask)
        best = logits.argmax(dim=1)
        rows = torch.arange(len(best))
        pred = anchors[rows, best] + residuals[rows, best]
        return pred.clamp(0.0, max_range)

    # --- RWGT export -------------------------------------------------------

    def export_layers(self):
        out = []
        for layer in self.trunk:
            out.append((formats.LAYER_POINTWISE, layer.weight.detach().numpy(),
                        layer.bias.detach().numpy()))
        out.append((formats.LAYER_MAX_POOL, None, None))
        out.append((formats.LAYER_CONCAT, None, None))
        for head in (self.cls_head, self.res_head):
            for layer in head:
                out.append((formats.LAYER_POINTWISE, layer.weight.detach().numpy(),
                            layer.bias.detach().numpy()))
        return out

    def save_bundle(self, path, num_anchors: int):
        formats.write_bundle(
            path, self.export_layers(), self.input_dim, num_anchors, self.normalization
        )

    @staticmethod
    def from_bundle(path) -> "AnchorNet":
        """Rebuild a model from an exported file (for conformance checks)."""
        layers, input_dim, num_anchors, norm = formats.read_bundle(path)
        dense = [l for l in layers if l[0] == formats.LAYER_POINTWISE]
        structural = [l[0] for l in layers if l[0] != formats.LAYER_POINTWISE]
        if structural != [formats.LAYER_MAX_POOL, formats.LAYER_CONCAT]:
            raise ValueError("unexpected layer structure for AnchorNet")
        n_head = (len(dense) - _trunk_len(layers)) // 2
        trunk_layers = dense[: _trunk_len(layers)]
        heads = dense[_trunk_len(layers):]
        trunk_w = [w.shape[0] for _, w, _ in trunk_layers]
        head_w = [w.shape[0] for _, w, _ in heads[: n_head - 1]]
        model = AnchorNet(input_dim, tuple(trunk_w), tuple(head_w), norm)
        with torch.no_grad():
            for mod, (_, w, b) in zip(model.trunk, trunk_layers):
                mod.weight.copy_(torch.from_numpy(w))
                mod.bias.copy_(torch.from_numpy(b))
            for mods, chunk in (
                (model.cls_head, heads[:n_head]),
                (model.res_head, heads[n_head:]),
            ):
                for mod, (_, w, b) in zip(mods, chunk):
                    mod.weight.copy_(torch.from_numpy(w))
                    mod.bias.copy_(torch.from_numpy(b))
        model.num_anchors = num_anchors
        return model


def _trunk_len(layers):
    n = 0
    for kind, _, _ in layers:
        if kind != formats.LAYER_POINTWISE:
            break
        n += 1
    return n


def anchor_loss(logits, residuals_m, gt_slot, gt_residual_m, gamma: float):
    """gamma * cross-entropy over anchors + L1 (meters) at the GT anchor."""
    if logits.shape != residuals_m.shape or len(gt_slot) != len(logits):
        raise ShapeMismatch(
            f"logits {tuple(logits.shape)} vs residuals {tuple(residuals_m.shape)}"
        )
    ce = nn.functional.cross_entropy(logits, gt_slot)
    rows = torch.arange(len(gt_slot))
    l1 = (residuals_m[rows, gt_slot] - gt_residual_m).abs().mean()
    return gamma * ce + l1


class ShapeMismatch(Exception):
    pass
