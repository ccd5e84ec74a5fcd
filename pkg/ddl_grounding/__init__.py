"""This package contains test-time verification of abnormality grounding."""

__version__ = '1.0.0'

from .consolidation import (  # noqa: E402
    ConsensusConfig,
    ConsolidatedDetection,
    consolidate,
    rhc,
)
from .geometry import (  # noqa: E402
    BoundingBox,
    ImageDims,
    TransformSpec,
    apply_transform,
    invert_transform,
    iou,
)

__all__ = [
    'BoundingBox',
    'ConsensusConfig',
    'ConsolidatedDetection',
    'ImageDims',
    'TransformSpec',
    'apply_transform',
    'consolidate',
    'invert_transform',
    'iou',
    'rhc',
]
