import pytest

from cvs.cost_analysis import (
    AnnotationRates,
    annotation_cost,
    emit_cost_curve,
    rates_for,
    read_cost_rows,
    write_cost_rows,
)
from cvs.evaluation import EvalReport
from cvs.exceptions import ConfigError, DatasetValidationError

CIFAR10 = AnnotationRates(3.5, 29.52)


def _report(method, m, n_class, n_seg, top1=0.5, seed=0):
    return EvalReport(method, "wide-resnet", m, seed, top1=top1, n_class_labeled=n_class,
                      n_seg_labeled=n_seg, compute_cost=1e9)


class TestAnnotationCost:

    def test_rate_table(self):
        assert rates_for("cifar10") == CIFAR10
        assert rates_for("cifar100") == AnnotationRates(8.5, 29.52)
        assert rates_for("mnist") == AnnotationRates(3.5, 0.0)
        assert rates_for("synthetic-shapes") == CIFAR10
        with pytest.raises(ConfigError):
            rates_for("imagenet")

    def test_single_class_label(self):
        assert annotation_cost("classification", 1, 0, CIFAR10) == 3.5

    def test_zero_images(self):
        assert annotation_cost("cvs", 0, 0, CIFAR10) == 0.0

    def test_seg_10_on_full_cifar10(self):
        assert annotation_cost("cvs", 50000, 100, CIFAR10) == pytest.approx(177952.0, abs=1e-9)

    def test_classification_ignores_segmentations(self):
        assert annotation_cost("classification", 10, 10, CIFAR10) == 35.0

    def test_constant_offset(self, rng):
        for _ in range(1000):
            rates = AnnotationRates(*rng.uniform(0, 60, size=2))
            n_class, n_seg = (int(v) for v in rng.integers(0, 100000, size=2))
            offset = annotation_cost("cvs", n_class, n_seg, rates) - annotation_cost("classification", n_class, n_seg, rates)
            assert offset == pytest.approx(n_seg * rates.t_seg, rel=1e-12, abs=1e-6)

    def test_monotone(self):
        costs = [annotation_cost("multitask", n, n // 2, CIFAR10) for n in range(0, 50, 7)]
        assert costs == sorted(costs)

    def test_invalid_inputs(self):
        with pytest.raises(DatasetValidationError):
            annotation_cost("cvs", -1, 0, CIFAR10)
        with pytest.raises(ConfigError):
            AnnotationRates(-1.0, 2.0)
        with pytest.raises(ConfigError):
            annotation_cost("zero-shot", 1, 1, CIFAR10)


class TestCostCurve:

    def test_cvs_pays_for_segmentations(self):
        m, p = 10, 10
        points = emit_cost_curve([
            _report("cvs", m, m * p, m * p, top1=0.9),
            _report("classification", m, m * p, 0, top1=0.7),
        ], CIFAR10)
        assert [pt.method for pt in points] == ["classification", "cvs"]
        assert points[1].total_seconds - points[0].total_seconds == pytest.approx(m * p * CIFAR10.t_seg)
        assert points[1].accuracy == 0.9

    def test_empty(self):
        assert emit_cost_curve([], CIFAR10) == []

    def test_missing_counts_named(self):
        report = EvalReport("cvs", "resnet101", 5, 3, top1=0.4)
        with pytest.raises(DatasetValidationError, match="cvs/resnet101/m=5/seed=3"):
            emit_cost_curve([report], CIFAR10)

    def test_rows_round_trip(self, tmp_path):
        points = emit_cost_curve([_report("cvs", 1, 10, 10), _report("classification", 1, 10, 0)], CIFAR10)
        write_cost_rows(tmp_path / "cost_curve.tsv", points)
        rows = read_cost_rows(tmp_path / "cost_curve.tsv")
        assert [(r["method"], r["seconds"], r["accuracy"], r["compute_marker"]) for r in rows] == [
            (p.method, p.total_seconds, p.accuracy, p.compute_cost_marker) for p in points
        ]
        header = (tmp_path / "cost_curve.tsv").read_text().splitlines()[0]
        assert header == "method\tseconds\taccuracy\tcompute_marker"
