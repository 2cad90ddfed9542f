"""Attention and preprocessing ablation on synthetic scenes with corrupted held-out validation.

Each (seed, attention mode) pair trains one model from scratch on the same
training scenes. The selected checkpoint is then scored on the corrupted
validation scenes with every requested preprocessing combination.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .augment import CORRUPTIONS, CorruptionSpec
from .data import SceneConfig, make_dataset
from .evaluate import evaluate_model, format_table
from .model import load_checkpoint
from .train import TrainConfig, train

log = logging.getLogger(__name__)

PREPROCESS_FLAGS = ((False, False), (True, False), (False, True), (True, True))


def default_val_corruptions(severity: int = 3, seed: int = 1000) -> list[CorruptionSpec]:
    return [CorruptionSpec(kind, severity, seed + i) for i, kind in enumerate(CORRUPTIONS)]


@dataclass
class AblationConfig:
    base: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=3))
    scene: SceneConfig = field(default_factory=SceneConfig)
    train_scenes: int = 200
    val_scenes: int = 24
    data_seed: int = 0
    val_data_seed: int = 1
    seeds: tuple[int, ...] = (0, 1, 2)
    modes: tuple[str, ...] = ("none", "self", "adjacent")
    corruptions: list[CorruptionSpec] = field(default_factory=default_val_corruptions)
    flags: tuple[tuple[bool, bool], ...] = PREPROCESS_FLAGS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["base"] = self.base.to_dict()
        return d


@dataclass
class AblationResult:
    rows: list[dict]
    seconds: float

    def mean_abs_rel(self, mode: str, denoise: bool = False, equalize: bool = False) -> float:
        vals = [r["abs_rel"] for r in self.rows
                if r["attention"] == mode and r["denoise"] == denoise and r["equalize"] == equalize]
        if not vals:
            raise KeyError(f"no rows for {mode} denoise={denoise} equalize={equalize}")
        return float(np.mean(vals))

    def summary(self) -> list[dict]:
        """Seed-averaged rows, one per (mode, denoise, equalize)."""
        keys = sorted({(r["attention"], r["denoise"], r["equalize"]) for r in self.rows}, key=str)
        out = []
        for mode, dn, eq in keys:
            group = [r for r in self.rows if (r["attention"], r["denoise"], r["equalize"]) == (mode, dn, eq)]
            row = {"attention": mode, "denoise": dn, "equalize": eq, "seeds": len(group)}
            for k in ("abs_rel", "sq_rel", "rmse", "log_rmse", "a1", "a2", "a3"):
                row[k] = float(np.mean([g[k] for g in group]))
            out.append(row)
        return out

    def table(self) -> str:
        order = {"none": 0, "self": 1, "adjacent": 2}
        rows = sorted(self.summary(), key=lambda r: (order.get(r["attention"], 9), r["denoise"], r["equalize"]))
        return format_table(rows)


def run_ablation(cfg: AblationConfig, out_dir=None, progress=None) -> AblationResult:
    """Train every (seed, mode) model and score it on the corrupted validation scenes."""
    start = time.perf_counter()
    train_set = make_dataset(cfg.train_scenes, cfg.data_seed, cfg.scene)
    val_set = make_dataset(cfg.val_scenes, cfg.val_data_seed, cfg.scene)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    rows = []
    for seed in cfg.seeds:
        for mode in cfg.modes:
            model_cfg = replace(cfg.base.model, decoder=replace(cfg.base.model.decoder, attention_mode=mode), seed=seed)
            tcfg = replace(cfg.base, model=model_cfg, seed=seed, val_corruptions=list(cfg.corruptions),
                           val_denoise=False, val_equalize=False)
            run_dir = out / f"{mode}_seed{seed}" if out is not None else None
            t0 = time.perf_counter()
            res = train(tcfg, train_set, val_set, run_dir)
            model = load_checkpoint(run_dir / "best") if run_dir is not None else res.best_model()
            for dn, eq in cfg.flags:
                rep = evaluate_model(model, val_set, cfg.corruptions, dn, eq)
                rows.append({"attention": mode, "seed": seed, "denoise": dn, "equalize": eq,
                             "best_epoch": res.best_epoch, **rep.to_dict()})
            msg = f"{mode} seed {seed}: abs_rel {rows[-len(cfg.flags)]['abs_rel']:.4f} ({time.perf_counter() - t0:.0f}s)"
            log.info(msg)
            if progress:
                progress(msg)
    result = AblationResult(rows, time.perf_counter() - start)
    if out is not None:
        (out / "rows.jsonl").write_text("\n".join(json.dumps(r, sort_keys=True) for r in rows) + "\n")
        (out / "summary.json").write_text(json.dumps(result.summary(), indent=2))
        (out / "table.txt").write_text(result.table() + "\n")
    return result
