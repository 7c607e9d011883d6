"""Semantic music structure analysis toolkit."""

__version__ = "0.1.0"

from structura.annotation import (
    CLASSES,
    END,
    FunctionLabel,
    RawAnnotation,
    SegmentTimeline,
    convert_label,
    parse_annotation,
    repair_no_function,
    to_timeline,
)

__all__ = [
    "CLASSES",
    "END",
    "FunctionLabel",
    "RawAnnotation",
    "SegmentTimeline",
    "convert_label",
    "parse_annotation",
    "repair_no_function",
    "to_timeline",
]
