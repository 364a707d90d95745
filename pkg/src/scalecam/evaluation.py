"""One-vs-rest confusion counts, per-class metrics, repeated k-fold CV and timing."""

from __future__ import annotations

import csv
import io
import math
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import DatasetManifest, patient_kfold_split
from .tensor import Tensor, derived_seed, rng

# order in which metric arrays are stored
METRICS = ("accuracy", "precision", "specificity", "sensitivity", "f1")
# column order of rendered tables
TABLE_COLUMNS = ("f1", "accuracy", "sensitivity", "specificity", "precision")
COLUMN_TITLES = {
    "f1": "F1",
    "accuracy": "Accuracy",
    "sensitivity": "Sensitivity",
    "specificity": "Specificity",
    "precision": "Precision",
}
Z95 = 1.96


class CrossValidationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    """Per-class one-vs-rest counts; each array has length K."""

    tp: np.ndarray
    tn: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @property
    def classes(self) -> int:
        return len(self.tp)

    @property
    def total(self) -> int:
        return int(self.tp[0] + self.tn[0] + self.fp[0] + self.fn[0]) if self.classes else 0

    def of(self, c: int) -> tuple[int, int, int, int]:
        return int(self.tp[c]), int(self.tn[c]), int(self.fp[c]), int(self.fn[c])


def confusion(predicted, truth, classes: int) -> ConfusionCounts:
    pred = np.asarray(predicted, dtype=np.int64).ravel()
    true = np.asarray(truth, dtype=np.int64).ravel()
    if pred.shape != true.shape:
        raise ValueError(f"{pred.size} predictions but {true.size} true labels")
    for name, arr in (("predicted", pred), ("true", true)):
        if arr.size and (arr.min() < 0 or arr.max() >= classes):
            raise ValueError(f"{name} label out of range for K={classes}: {arr[(arr < 0) | (arr >= classes)][0]}")
    matrix = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(matrix, (true, pred), 1)
    tp = np.diag(matrix).copy()
    fn = matrix.sum(axis=1) - tp
    fp = matrix.sum(axis=0) - tp
    tn = pred.size - tp - fn - fp
    return ConfusionCounts(tp, tn, fp, fn)


@dataclass(frozen=True)
class MetricsReport:
    """``values[c, m]`` for class c and metric ``METRICS[m]``; ``defined`` flags zero denominators."""

    values: np.ndarray
    defined: np.ndarray
    class_names: tuple[str, ...] = ()

    def get(self, cls: int, metric: str) -> float:
        return float(self.values[cls, METRICS.index(metric)])

    def is_defined(self, cls: int, metric: str) -> bool:
        return bool(self.defined[cls, METRICS.index(metric)])


def _ratio(num: float, den: float) -> tuple[float, bool]:
    return (num / den, True) if den > 0 else (0.0, False)


def metrics(counts: ConfusionCounts, class_names=()) -> MetricsReport:
    k = counts.classes
    values = np.zeros((k, len(METRICS)))
    defined = np.zeros((k, len(METRICS)), dtype=bool)
    for c in range(k):
        tp, tn, fp, fn = (float(v) for v in counts.of(c))
        acc = _ratio(tp + tn, tp + tn + fp + fn)
        prec = _ratio(tp, tp + fp)
        spec = _ratio(tn, tn + fp)
        sens = _ratio(tp, tp + fn)
        if prec[1] and sens[1]:
            f1 = _ratio(2 * prec[0] * sens[0], prec[0] + sens[0])
        else:
            f1 = (0.0, False)
        for m, (v, ok) in enumerate((acc, prec, spec, sens, f1)):
            values[c, m], defined[c, m] = v, ok
    names = tuple(class_names) or tuple(str(c) for c in range(k))
    return MetricsReport(values, defined, names)


# ---------------------------------------------------------------------------
# aggregation over rounds


@dataclass(frozen=True)
class AggregateReport:
    mean: np.ndarray
    std: np.ndarray
    halfwidth: np.ndarray
    n: int
    all_defined: np.ndarray
    class_names: tuple[str, ...] = ()
    rounds: tuple[MetricsReport, ...] = field(default=(), repr=False)

    @property
    def single_round(self) -> bool:
        """With n = 1 the half-width is reported as 0 but carries no information."""
        return self.n == 1

    def get(self, cls: int, metric: str) -> tuple[float, float]:
        m = METRICS.index(metric)
        return float(self.mean[cls, m]), float(self.halfwidth[cls, m])


def aggregate(reports) -> AggregateReport:
    reports = list(reports)
    if not reports:
        raise ValueError("need at least one round to aggregate")
    stack = np.stack([r.values for r in reports])
    n = len(reports)
    mean = stack.mean(axis=0)
    if n > 1:
        std = stack.std(axis=0, ddof=1)
        # exactly zero when every round agrees (std can leave a rounding residue)
        std[np.all(stack == stack[0], axis=0)] = 0.0
    else:
        std = np.zeros_like(mean)
    halfwidth = Z95 * std / math.sqrt(n)
    all_defined = np.all(np.stack([r.defined for r in reports]), axis=0)
    return AggregateReport(mean, std, halfwidth, n, all_defined, reports[0].class_names, tuple(reports))


def cross_validate(
    train_procedure,
    manifest: DatasetManifest,
    k: int = 5,
    rounds: int = 3,
    seed: int = 0,
    threads: int = 1,
) -> AggregateReport:
    """Repeated patient-wise k-fold CV.

    ``train_procedure(train_records, test_records, fold_seed)`` returns predicted
    labels for ``test_records``. Each round uses a fresh split; the k folds'
    predictions are pooled into one confusion table per round.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    plans = [patient_kfold_split(manifest, k, derived_seed(seed, r)) for r in range(rounds)]
    jobs = [(r, i) for r in range(rounds) for i in range(k)]

    def run(job):
        r, i = job
        fold = plans[r].folds[i]
        test = fold.test_records(manifest)
        try:
            pred = np.asarray(train_procedure(fold.train_records(manifest), test, derived_seed(seed, r, i)))
        except Exception as exc:
            raise CrossValidationError(f"round {r}, fold {i}: {exc}") from exc
        if pred.shape != (len(test),):
            raise CrossValidationError(f"round {r}, fold {i}: expected {len(test)} predictions, got shape {pred.shape}")
        return pred, np.array([rec.label for rec in test], dtype=np.int64)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = dict(zip(jobs, pool.map(run, jobs)))
    else:
        results = {job: run(job) for job in jobs}

    reports = []
    for r in range(rounds):
        pred = np.concatenate([results[(r, i)][0] for i in range(k)])
        true = np.concatenate([results[(r, i)][1] for i in range(k)])
        reports.append(metrics(confusion(pred, true, manifest.classes), manifest.class_names))
    return aggregate(reports)


# ---------------------------------------------------------------------------
# timing


@dataclass(frozen=True)
class TimingReport:
    images: int
    total_seconds: float
    seconds_per_image: float
    hardware: str

    def csv_line(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="").writerow(
            [self.images, repr(self.total_seconds), repr(self.seconds_per_image), self.hardware]
        )
        return buf.getvalue()


CSV_TIMING_HEADER = "images,total_seconds,seconds_per_image,hardware"


def hardware_description() -> str:
    cpu = platform.processor() or platform.machine() or "unknown cpu"
    return f"{cpu}; {os.cpu_count()} logical cpus; {platform.system()} {platform.release()}"


def timing_benchmark(checkpoint, n: int = 1000, seed: int = 0) -> TimingReport:
    """Time ``n`` single-image inference passes on random inputs.

    ``checkpoint`` may be a path, a :class:`Checkpoint` or a built network.
    """
    from .checkpoint import Checkpoint, load_checkpoint
    from .layers import Network

    if n < 1:
        raise ValueError("n must be >= 1")
    if isinstance(checkpoint, (str, Path)):
        checkpoint = load_checkpoint(checkpoint)
    net = checkpoint if isinstance(checkpoint, Network) else checkpoint.to_network()
    res = net.resolution
    inputs = rng([seed, 0xBE]).integers(0, 256, size=(n, 1, net.in_channels, res, res)) / 255.0
    start = time.perf_counter()
    for x in inputs:
        net.forward(Tensor(x))
    total = time.perf_counter() - start
    return TimingReport(n, total, total / n, hardware_description())


# ---------------------------------------------------------------------------
# tables


def _class_indices(report: AggregateReport, selector) -> list[int]:
    k = report.mean.shape[0]
    if selector is None:
        return list(range(k))
    if isinstance(selector, str) and not selector.isdigit():
        if selector not in report.class_names:
            raise KeyError(f"unknown class {selector!r}; classes: {', '.join(report.class_names)}")
        return [report.class_names.index(selector)]
    c = int(selector)
    if not 0 <= c < k:
        raise KeyError(f"class index {c} out of range for K={k}")
    return [c]


def render_table(reports, class_selector=None) -> tuple[str, str]:
    """Fixed-width text table and its CSV twin.

    ``reports`` is a sequence of ``(model name, AggregateReport)``. Rows are
    models, one block per selected class.
    """
    reports = list(reports.items()) if isinstance(reports, dict) else list(reports)
    if not reports:
        raise ValueError("nothing to render")
    first = reports[0][1]
    classes = _class_indices(first, class_selector)
    name_w = max(5, *(len(name) for name, _ in reports))
    cell_w = 15
    lines = []
    rows = [["model", "class", "metric", "mean", "halfwidth", "n"]]
    for c in classes:
        cname = first.class_names[c] if first.class_names else str(c)
        lines.append(f"Class: {cname}")
        header = "Model".ljust(name_w) + "".join("  " + COLUMN_TITLES[m].ljust(cell_w) for m in TABLE_COLUMNS)
        lines.append(header.rstrip())
        for name, rep in reports:
            cells = []
            for m in TABLE_COLUMNS:
                mean, hw = rep.get(c, m)
                cells.append(f"{mean:.4f} ± {hw:.4f}".ljust(cell_w))
                rows.append([name, cname, m, f"{mean:.4f}", f"{hw:.4f}", str(rep.n)])
            lines.append((name.ljust(name_w) + "".join("  " + s for s in cells)).rstrip())
        if any(rep.single_round for _, rep in reports):
            lines.append("note: n = 1 round; half-widths are not informative")
        lines.append("")
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return "\n".join(lines), buf.getvalue()


def parse_table_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


__all__ = [
    "METRICS",
    "TABLE_COLUMNS",
    "ConfusionCounts",
    "MetricsReport",
    "AggregateReport",
    "TimingReport",
    "CrossValidationError",
    "confusion",
    "metrics",
    "aggregate",
    "cross_validate",
    "timing_benchmark",
    "render_table",
    "parse_table_csv",
]
