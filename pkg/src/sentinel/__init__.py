"""Frame-sequence surveillance analytics.

Classifies frames as normal or criminal activity with a from-scratch CNN
forward pass, post-processes grid detector output (decode, IoU, NMS),
accumulates activity heatmaps and dispatches debounced webhook alerts.
"""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: E402
from .tensor import (  # noqa: E402
    Kernel,
    Tensor,
    conv2d,
    dense,
    dense_weight_count,
    flatten,
    maxpool2d,
    relu,
    softmax,
)
from .imaging import Frame, encode_pgm, encode_ppm, open_sequence, parse_netpbm, to_tensor  # noqa: E402
from .classifier import (  # noqa: E402
    AlarmAggregator,
    FrameVerdict,
    ModelSpec,
    aggregate,
    classify_frame,
    forward,
    load_model,
)
from .detector import BBox, Detection, GridPrediction, decode_grid, iou, nms  # noqa: E402
from .heatmap import HeatmapGrid, accumulate, merge, normalize, render_ppm  # noqa: E402
from .alerting import AlertEvent, DispatchPolicy, dispatch, format_message, should_dispatch  # noqa: E402
