"""Training loop: Adam over sampled patch pools, staged LR decay, RWGT export
plus a JSON run manifest.

Reproducibility: fix the seed, run single-process CPU (or one device) with a
fixed torch thread count; the manifest records the settings used.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .formats import load_corpus
from .model import AnchorNet, anchor_loss
from .sampling import INTRA_SLOTS, TEMPORAL_SLOTS, PatchBatch, sample_patches


@dataclass
class TrainConfig:
    temporal: bool = False
    steps: int = 10_000
    batch_size: int = 128
    lr: float = 5e-4                      # desk default; the reference schedule uses 5e-5
    lr_decay_at: tuple = (0.6, 0.85)      # fractions of total steps, 10x decay each
    gamma: float = 0.01                   # classification loss weight
    precision_range: tuple = (0.02, 0.2)  # desk default; full range is (1e-4, 0.5)
    precision_step: float = 1e-4
    normalization: float = 75.0
    trunk: tuple = (16, 16, 32, 64)
    head: tuple = (32, 16)
    pool_size: int = 20_000
    seed: int = 0

    @property
    def num_anchors(self) -> int:
        return INTRA_SLOTS + (TEMPORAL_SLOTS if self.temporal else 0)

    @property
    def input_dim(self) -> int:
        return 4 if self.temporal else 3

    @staticmethod
    def reference(temporal: bool = True) -> "TrainConfig":
        """The full-scale schedule (needs a real dataset and a long run)."""
        return TrainConfig(
            temporal=temporal,
            steps=3_000_000,
            lr=5e-5,
            lr_decay_at=(0.5, 1.0),
            precision_range=(1e-4, 0.5),
            trunk=(32, 32, 64, 256),
            head=(128, 64),
            pool_size=500_000,
        )


class Divergence(Exception):
    pass


def _to_tensors(pool: PatchBatch):
    return (
        torch.from_numpy(pool.d_azimuth),
        torch.from_numpy(pool.d_elevation),
        torch.from_numpy(pool.anchors),
        torch.from_numpy(pool.time),
        torch.from_numpy(pool.mask),
        torch.from_numpy(pool.target),
        torch.from_numpy(pool.gt_slot),
        torch.from_numpy(pool.gt_residual),
    )


def train(config: TrainConfig, frames, calib, tracks, out_dir):
    """Train on (current, previous-or-None) frame pairs; writes model.rwgt and
    manifest.json into out_dir and returns (model, manifest dict)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)
    pool = sample_patches(frames, calib, tracks, config, seed=config.seed)
    d_az, d_el, anchors, tm, mask, target, gt_slot, gt_res = _to_tensors(pool)

    model = AnchorNet(config.input_dim, config.trunk, config.head, config.normalization)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    decay_steps = {int(f * config.steps) for f in config.lr_decay_at}
    rng = np.random.default_rng(config.seed + 1)
    losses = np.zeros(config.steps)
    t0 = time.perf_counter()
    for step in range(config.steps):
        if step in decay_steps:
            for group in opt.param_groups:
                group["lr"] *= 0.1
        idx = torch.from_numpy(rng.integers(0, len(pool), config.batch_size))
        feats = model.features(d_az[idx], d_el[idx], anchors[idx], tm[idx], mask[idx])
        logits, residuals = model(feats, mask[idx])
        loss = anchor_loss(logits, residuals, gt_slot[idx], gt_res[idx], config.gamma)
        if not torch.isfinite(loss):
            raise Divergence(f"loss became {loss.item()} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses[step] = loss.item()
    dt = time.perf_counter() - t0

    bundle_path = out / "model.rwgt"
    model.save_bundle(bundle_path, config.num_anchors)
    window = max(1, config.steps // 20)
    manifest = {
        "config": dataclasses.asdict(config),
        "seed": config.seed,
        "steps": config.steps,
        "pool_size": len(pool),
        "initial_loss": float(losses[:window].mean()) if config.steps else None,
        "final_loss": float(losses[-window:].mean()) if config.steps else None,
        "loss_curve": [float(v) for v in losses[:: max(1, config.steps // 200)]],
        "train_seconds": dt,
        "determinism": "single-process CPU, fixed seeds, fixed-order batch reduction",
        "torch_threads": torch.get_num_threads(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return model, manifest


def pair_frames(frames, temporal: bool):
    """Corpus frames -> (current, previous-or-None, track-index) triples.

    Consecutive frames in a directory are treated as a time-ordered
    sequence; the first frame has no predecessor.
    """
    out = []
    for n, frame in enumerate(frames):
        prev = frames[n - 1] if (temporal and n > 0) else None
        out.append((frame, prev, n))
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="rimtrainer", description="Train an anchor predictor")
    ap.add_argument("corpus", help="directory of .rimg frames with sidecar.json")
    ap.add_argument("-o", "--output", required=True)
    ap.add_argument("--temporal", action="store_true")
    ap.add_argument("--steps", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--pool-size", type=int, default=20_000)
    args = ap.parse_args(argv)
    frames, calib, tracks = load_corpus(args.corpus)
    config = TrainConfig(
        temporal=args.temporal, steps=args.steps, seed=args.seed, pool_size=args.pool_size
    )
    triples = [
        (f, p, tracks[n]) for f, p, n in pair_frames(frames, args.temporal)
    ]
    _, manifest = train(config, [(f, p) for f, p, _ in triples],
                        calib, [t for _, _, t in triples], args.output)
    print(f"final loss {manifest['final_loss']:.4f} -> {args.output}/model.rwgt")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
