"""Test pipeline: corrupt, optionally denoise/equalise, predict, score."""

from __future__ import annotations

import json
from itertools import product

import numpy as np

from .attention import NUM_VIEWS
from .augment import CorruptionSpec, corrupt, preprocess_test
from .data import MultiViewBatch
from .metrics import METRIC_NAMES, MetricAccumulator, MetricReport


def image_seed(spec: CorruptionSpec, scene_seed: int, view: int) -> int:
    """Per-image corruption seed derived from the manifest seed, scene and camera."""
    return int(np.random.SeedSequence([spec.seed, scene_seed, view]).generate_state(1, dtype=np.uint64)[0])


def corrupt_views(batch: MultiViewBatch, spec: CorruptionSpec) -> np.ndarray:
    return np.stack(
        [
            corrupt(batch.images[k], CorruptionSpec(spec.kind, spec.severity, image_seed(spec, batch.seed, k)))
            for k in range(NUM_VIEWS)
        ]
    )


def prepare_views(batch: MultiViewBatch, spec: CorruptionSpec | None, denoise: bool, equalize: bool) -> np.ndarray:
    images = batch.images if spec is None else corrupt_views(batch, spec)
    if denoise or equalize:
        images = np.stack([preprocess_test(v, denoise, equalize) for v in images])
    return images


def evaluate_model(
    model,
    dataset: list[MultiViewBatch],
    corruptions: list[CorruptionSpec] | None = None,
    denoise: bool = False,
    equalize: bool = False,
    mode: str | None = None,
) -> MetricReport:
    """Metrics pooled over every (corruption, scene, view) pixel.

    An empty corruption list evaluates the clean images.
    """
    acc = MetricAccumulator()
    specs = list(corruptions) if corruptions else [None]
    for spec in specs:
        for batch in dataset:
            images = prepare_views(batch, spec, denoise, equalize)
            acc.add(model.predict(images, mode), batch.target)
    return acc.report()


def evaluate_grid(
    models: dict[str, object],
    dataset: list[MultiViewBatch],
    corruptions: list[CorruptionSpec] | None,
    flags: list[tuple[bool, bool]] | None = None,
) -> list[dict]:
    """One row per (attention mode, denoise, equalize) combination.

    ``models`` maps an attention mode to the model evaluated under it.
    """
    flags = flags or [(False, False)]
    rows = []
    for (mode, model), (dn, eq) in product(models.items(), flags):
        rep = evaluate_model(model, dataset, corruptions, dn, eq, mode)
        rows.append({"attention": mode, "denoise": dn, "equalize": eq, **rep.to_dict()})
    return rows


_ATTN_LABEL = {"none": "x", "self": "self attention", "adjacent": "adjacent-view cross attention"}


def format_table(rows: list[dict]) -> str:
    """Aligned text table with the ablation-table column layout."""
    head = ["attention", "denoise", "equalize", "Abs Rel", "Sq Rel", "RMSE", "log RMSE", "a1", "a2", "a3"]
    body = []
    for r in rows:
        body.append(
            [_ATTN_LABEL.get(r["attention"], r["attention"]), "yes" if r["denoise"] else "x", "yes" if r["equalize"] else "x"]
            + [f"{r[k]:.4f}" for k in METRIC_NAMES]
        )
    widths = [max(len(str(x)) for x in col) for col in zip(head, *body)]
    fmt = lambda cells: "  ".join(str(c).ljust(w) if i < 3 else str(c).rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))  # noqa: E731
    lines = [fmt(head), "  ".join("-" * w for w in widths)] + [fmt(b) for b in body]
    return "\n".join(lines)


def to_json_lines(rows: list[dict]) -> str:
    return "\n".join(json.dumps(r, sort_keys=True) for r in rows)
