"""Range-view LiDAR super-resolution, geometric segmentation and a staged
streaming pipeline."""

from .errors import (
    ConfigError,
    DomainError,
    EmptyDomainError,
    FormatError,
    LidarSRError,
    PipelineError,
    ShapeError,
    UnsupportedFormatError,
)
from .priors import DenoiserPrior, median_filter, prior_step, register_prior, tv_prox
from .rangeview import (
    HIGH_RES,
    INVALID_RANGE,
    LOW_RES,
    PointCloud,
    ProjectionConfig,
    ProjectionReport,
    RangeImage,
    pixel_of,
    project,
    unproject,
)
from .sampling import RowSelection, adjoint, apply, gram_diagonal, uniform_selection
from .segment import (
    GeometricSegmenter,
    LabelImage,
    SegmenterConfig,
    cluster_obstacles,
    ground_segment,
    labels_to_cloud,
    make_segmenter,
)
from .solver import SolverConfig, SolverState, data_step, residual, superresolve

__version__ = "0.1.0"
