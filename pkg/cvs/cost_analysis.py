"""
Annotation cost model and cost-vs-accuracy plot data
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

from loguru import logger

from .config import settings
from .exceptions import ConfigError, DatasetValidationError
from .utils.helpers import parse_optional_float, read_tsv, write_tsv

COST_COLUMNS = ("method", "seconds", "accuracy", "compute_marker")


@dataclass(frozen=True)
class AnnotationRates:
    """Seconds of human work per class label and per manual segmentation."""
    t_class: float
    t_seg: float

    def __post_init__(self):
        if self.t_class < 0 or self.t_seg < 0:
            raise ConfigError(f"Annotation rates must be >= 0, got {self.t_class}, {self.t_seg}")


def rates_for(dataset: str) -> AnnotationRates:
    """Rate table entry for a dataset name."""
    try:
        entry = settings.ANNOTATION_RATES[dataset]
    except KeyError:
        raise ConfigError(f"No annotation rates for {dataset!r}; known: {sorted(settings.ANNOTATION_RATES)}")
    return AnnotationRates(entry["t_class"], entry["t_seg"])


def annotation_cost(method: str, n_class_labeled: int, n_seg_labeled: int, rates: AnnotationRates) -> float:
    """
    Human seconds spent labeling the data a method trained on

    Classification pays class labels only; methods that train a
    segmentation head also pay every manual segmentation.
    """
    if n_class_labeled < 0 or n_seg_labeled < 0:
        raise DatasetValidationError(f"Label counts must be >= 0, got {n_class_labeled}, {n_seg_labeled}")
    if method not in settings.METHODS:
        raise ConfigError(f"Unknown method {method!r}")
    seconds = n_class_labeled * rates.t_class
    if method in settings.SEGMENTATION_METHODS:
        seconds += n_seg_labeled * rates.t_seg
    return float(seconds)


@dataclass(frozen=True)
class CostPoint:
    method: str
    n_class_labeled: int
    n_seg_labeled: int
    total_seconds: float
    accuracy: Optional[float]
    compute_cost_marker: Optional[float]


def emit_cost_curve(reports: Sequence, rates: AnnotationRates) -> List[CostPoint]:
    """
    One plot point per evaluation report, sorted by annotation seconds

    Raises:
        DatasetValidationError: Naming the first report without labeling counts
    """
    points = []
    for report in reports:
        if report.n_class_labeled is None or report.n_seg_labeled is None:
            raise DatasetValidationError(f"Report {report.name} lacks labeling counts")
        points.append(CostPoint(
            method=report.method,
            n_class_labeled=report.n_class_labeled,
            n_seg_labeled=report.n_seg_labeled,
            total_seconds=annotation_cost(report.method, report.n_class_labeled, report.n_seg_labeled, rates),
            accuracy=report.top1,
            compute_cost_marker=report.compute_cost,
        ))
    points.sort(key=lambda p: (p.total_seconds, p.method))
    logger.debug(f"Built {len(points)} cost points")
    return points


def write_cost_rows(path: Union[str, Path], points: Sequence[CostPoint]):
    """``method<TAB>seconds<TAB>accuracy<TAB>compute_marker`` rows with a header."""
    write_tsv(path, COST_COLUMNS, [(p.method, p.total_seconds, p.accuracy, p.compute_cost_marker) for p in points])


def read_cost_rows(path: Union[str, Path]) -> List[dict]:
    return [
        {
            "method": row["method"],
            "seconds": float(row["seconds"]),
            "accuracy": parse_optional_float(row["accuracy"]),
            "compute_marker": parse_optional_float(row["compute_marker"]),
        }
        for row in read_tsv(path)
    ]
