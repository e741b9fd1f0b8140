"""AdaptNet segmentation network for intraocular lens and pupil masks."""

from .blocks import (
    CascadePoolingFusion,
    ConvBlock,
    FeatureFusionDecision,
    LayerNorm2d,
    ScaleAdaptiveBlock,
    ShapeAdaptiveBlock,
    SSFModule,
)
from .deform import bilinear_sample, deform_conv2d
from .network import (
    ABLATION_STAGES,
    AdaptNet,
    AdaptNetConfig,
    ConfigError,
    architecture_summary,
    build_adaptnet,
    count_parameters,
)
