"""Few-shot semantic segmentation: benchmark sampling, adaptation, evaluation."""

__version__ = "0.1.0"

from fss.datamodel import (
    DEFAULT_IGNORE_ID,
    ClassCatalog,
    FewShotTask,
    LabelMask,
    SegSample,
    class_presence,
    validate_mask,
)

__all__ = [
    "DEFAULT_IGNORE_ID",
    "ClassCatalog",
    "FewShotTask",
    "LabelMask",
    "SegSample",
    "class_presence",
    "validate_mask",
    "__version__",
]
