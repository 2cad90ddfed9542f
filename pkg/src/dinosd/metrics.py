"""Standard depth-estimation error and accuracy metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .losses import SparseDepthTarget

METRIC_NAMES = ("abs_rel", "sq_rel", "rmse", "log_rmse", "a1", "a2", "a3")


@dataclass
class MetricReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    log_rmse: float
    a1: float
    a2: float
    a3: float
    pixels: int

    def to_dict(self) -> dict:
        return asdict(self)


class MetricAccumulator:
    """Collects per-pixel terms from many batches and reduces them with exact sums.

    Exact (fsum) reduction makes the result independent of batch order.
    """

    def __init__(self) -> None:
        self._terms: dict[str, list[np.ndarray]] = {k: [] for k in ("abs", "sq", "se", "le", "t1", "t2", "t3")}
        self.pixels = 0

    def add(self, pred, target: SparseDepthTarget) -> None:
        pred = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
        if pred.shape != target.gt.shape:
            raise ValueError(f"prediction {pred.shape} vs target {target.gt.shape}")
        d = pred[target.valid]
        g = target.gt[target.valid]
        diff = d - g
        ratio = np.maximum(d / g, g / d)
        t = self._terms
        t["abs"].append(np.abs(diff) / g)
        t["sq"].append(diff * diff / g)
        t["se"].append(diff * diff)
        t["le"].append((np.log(d) - np.log(g)) ** 2)
        for k in (1, 2, 3):
            t[f"t{k}"].append((ratio < 1.25**k).astype(np.float64))
        self.pixels += d.size

    def report(self) -> MetricReport:
        n = self.pixels
        if n == 0:
            raise ValueError("no valid pixels to evaluate")

        def m(key: str) -> float:
            return math.fsum(math.fsum(a) for a in self._terms[key]) / n

        return MetricReport(
            abs_rel=m("abs"),
            sq_rel=m("sq"),
            rmse=math.sqrt(m("se")),
            log_rmse=math.sqrt(m("le")),
            a1=m("t1"),
            a2=m("t2"),
            a3=m("t3"),
            pixels=n,
        )


def compute_metrics(pred, target: SparseDepthTarget) -> MetricReport:
    acc = MetricAccumulator()
    acc.add(pred, target)
    return acc.report()
