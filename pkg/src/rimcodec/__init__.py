"""rimcodec: predictive delta-encoding compression for lidar range images."""

from .codec import (
    BlockLayout,
    CompressedFrame,
    FrameHeader,
    bpp,
    decode_frame,
    decode_sequence,
    encode_frame,
    encode_sequence,
    read_frames,
    write_frames,
)
from .entropy import CodedBlock, choose_coder, decode_block
from .errors import (
    CorruptStream,
    DimensionMismatch,
    EmptyCloud,
    HeaderMismatch,
    MissingPreviousFrame,
    NoPreviousFrame,
    RimcodecError,
    TooFewPoints,
    UnknownWeights,
    WeightShapeMismatch,
    ZeroPoints,
    ZeroRange,
)
from .geometry import (
    LidarCalibration,
    Pose,
    PoseTrack,
    QuantizationSpec,
    RangeImage,
    image_to_point_cloud,
    project,
    quantize,
    read_range_image,
    read_sidecar,
    to_global,
    to_sensor,
    unproject,
    write_range_image,
    write_sidecar,
)
from .metrics import (
    MetricReport,
    chamfer,
    chamfer_sym,
    estimate_normals,
    prediction_accuracy,
    psnr,
)
from .predictor import (
    ContextPointSet,
    Layer,
    LayerKind,
    PredictorKind,
    PredictorOutput,
    WeightBundle,
    anchor_net_infer,
    build_prev_frame_index,
    bundle_digest,
    extract_intra_context,
    extract_temporal_context,
    predict_linear,
    predict_previous_valid,
    read_bundle,
    write_bundle,
)

__version__ = "0.1.0"
