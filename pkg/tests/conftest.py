"""Shared fixtures: hand-built weight bundles and small synthetic frames."""

import numpy as np
import pytest

from rimcodec.predictor import Layer, LayerKind, WeightBundle


def nearest_angle_bundle(input_dim: int, num_anchors: int, scale: float = 100.0) -> WeightBundle:
    """Engineered predictor: picks the context point closest in angle to the
    target shot and applies no correction.

    Layer 1 computes (relu(az), relu(-az), relu(el), relu(-el)); the
    classification head sums them with weight -scale, so the logit is
    -scale * (|d_azimuth| + |d_elevation|).  The residual head is zero.
    """
    w1 = np.zeros((4, input_dim), dtype=np.float32)
    w1[0, 0] = 1.0
    w1[1, 0] = -1.0
    w1[2, 1] = 1.0
    w1[3, 1] = -1.0
    cls = np.zeros((1, 8), dtype=np.float32)
    cls[0, :4] = -scale
    return WeightBundle(
        (
            Layer(LayerKind.POINTWISE_DENSE, w1, np.zeros(4, dtype=np.float32)),
            Layer(LayerKind.MAX_POOL_POINTS),
            Layer(LayerKind.CONCAT_GLOBAL_LOCAL),
            Layer(LayerKind.POINTWISE_DENSE, cls, np.zeros(1, dtype=np.float32)),
            Layer(LayerKind.POINTWISE_DENSE, np.zeros((1, 8), dtype=np.float32), np.zeros(1, dtype=np.float32)),
        ),
        input_dim,
        num_anchors,
    )


def random_bundle(input_dim: int, num_anchors: int, seed: int = 0,
                  widths=(8, 16), head=(8,), dense_head: bool = False) -> WeightBundle:
    """Small random-weight bundle; predictions are poor but well-formed."""
    rng = np.random.default_rng(seed)

    def dense(kind, out_w, in_w):
        return Layer(kind, rng.normal(0, 0.3, (out_w, in_w)).astype(np.float32),
                     rng.normal(0, 0.1, out_w).astype(np.float32))

    layers = []
    w = input_dim
    for out_w in widths:
        layers.append(dense(LayerKind.POINTWISE_DENSE, out_w, w))
        w = out_w
    layers.append(Layer(LayerKind.MAX_POOL_POINTS))
    layers.append(Layer(LayerKind.CONCAT_GLOBAL_LOCAL))
    pw = 2 * w
    for _ in range(2):  # two identical-shape branches
        bw = pw
        for out_w in head:
            layers.append(dense(LayerKind.POINTWISE_DENSE, out_w, bw))
            bw = out_w
        if dense_head:
            raise NotImplementedError
        layers.append(dense(LayerKind.POINTWISE_DENSE, 1, bw))
    return WeightBundle(tuple(layers), input_dim, num_anchors)


def random_dense_head_bundle(input_dim: int, num_anchors: int, seed: int = 0) -> WeightBundle:
    """Random bundle whose heads are plain dense layers over the pooled
    global feature, scoring capacity slots."""
    rng = np.random.default_rng(seed)

    def dense(kind, out_w, in_w):
        return Layer(kind, rng.normal(0, 0.3, (out_w, in_w)).astype(np.float32),
                     rng.normal(0, 0.1, out_w).astype(np.float32))

    layers = [
        dense(LayerKind.POINTWISE_DENSE, 8, input_dim),
        dense(LayerKind.POINTWISE_DENSE, 16, 8),
        Layer(LayerKind.MAX_POOL_POINTS),
    ]
    for _ in range(2):
        layers.append(dense(LayerKind.DENSE, 8, 16))
        layers.append(dense(LayerKind.DENSE, num_anchors, 8))
    return WeightBundle(tuple(layers), input_dim, num_anchors)


@pytest.fixture(scope="session")
def golden_intra():
    return nearest_angle_bundle(3, 99)


@pytest.fixture(scope="session")
def golden_temporal():
    return nearest_angle_bundle(4, 199)
