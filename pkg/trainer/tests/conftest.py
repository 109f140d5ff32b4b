"""Shared fixtures: corpora generated through the codec's own CLI so the
trainer is exercised strictly against the published file formats."""

import json
import subprocess
import sys

import pytest

from rimtrainer import load_corpus, pair_frames


def genscene(out_dir, kind, seed, h=16, w=64, roughness=0.04):
    subprocess.run(
        [
            sys.executable, "-m", "rimcodec.cli", "genscene",
            "--kind", kind, "--seed", str(seed),
            "--height", str(h), "--width", str(w),
            "--roughness", str(roughness), "-o", str(out_dir),
        ],
        check=True,
        capture_output=True,
    )
    return out_dir


def merge_scene(dst, src):
    """Append src's frames and pose tracks to dst's corpus directory."""
    existing = sorted(dst.glob("frame_*.rimg"))
    n0 = len(existing)
    for k, f in enumerate(sorted(src.glob("frame_*.rimg"))):
        (dst / f"frame_{n0 + k:03d}.rimg").write_bytes(f.read_bytes())
    a = json.loads((dst / "sidecar.json").read_text())
    b = json.loads((src / "sidecar.json").read_text())
    a["pose_tracks"] += b["pose_tracks"]
    (dst / "sidecar.json").write_text(json.dumps(a))


@pytest.fixture(scope="session")
def pair_scene(tmp_path_factory):
    """One static two-frame scene: (frames, calib, tracks)."""
    d = genscene(tmp_path_factory.mktemp("pair"), "static-pair", seed=5)
    return load_corpus(d)


@pytest.fixture(scope="session")
def train_corpus(tmp_path_factory):
    """Two two-frame scenes merged into one training corpus."""
    d = genscene(tmp_path_factory.mktemp("train"), "static-pair", seed=11, w=96,
                 roughness=0.045)
    d2 = genscene(tmp_path_factory.mktemp("extra"), "moving-sensor-pair", seed=12,
                  w=96, roughness=0.045)
    merge_scene(d, d2)
    frames, calib, tracks = load_corpus(d)
    pairs = [
        (frames[0], None), (frames[1], frames[0]),
        (frames[2], None), (frames[3], frames[2]),
    ]
    return pairs, calib, tracks


@pytest.fixture(scope="session")
def held_out_scene(tmp_path_factory):
    d = genscene(tmp_path_factory.mktemp("held"), "static-pair", seed=99, w=96,
                 roughness=0.045)
    return load_corpus(d)
