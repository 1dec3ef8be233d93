"""Training-free visual-token anchoring and collaborative decoding."""

from .anchor import (
    AnchorBox,
    BoxFamily,
    Centroid,
    RedundancyRate,
    SelectionResult,
    centroid,
    crop_tokens,
    density,
    enumerate_boxes,
    redundancy_rate,
    select_optimal,
    summed_area_table,
)
from .baseline import RetentionResult, gather_tokens, topk_retention
from .codecode import FusionConfig, beta, fuse, fuse_stream, softmax_rows
from .respmap import ResponseMap, cosine, pool_text, rectify, response_map
from .tensorio import InstanceBundle, TensorManifest, load_instance, load_tensor, write_report

__version__ = "0.1.0"
