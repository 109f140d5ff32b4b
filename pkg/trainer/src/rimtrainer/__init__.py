"""rimtrainer: trains anchor-scoring range predictors for rimcodec."""

from .evaluate import eval_accuracy, linear_baseline_accuracy, previous_valid_accuracy
from .formats import load_corpus, read_bundle, read_range_image, read_sidecar, write_bundle
from .model import AnchorNet, ShapeMismatch, anchor_loss
from .sampling import EmptyCorpus, PatchBatch, extract_context, gt_anchor, sample_patches
from .train import Divergence, TrainConfig, pair_frames, train

__version__ = "0.1.0"
