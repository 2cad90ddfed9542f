"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL summary line that is printed at the end of the
pytest run. Criteria 5 to 7 train the default desk model and dominate the
runtime: about 8 minutes for the overfit check and about 80 minutes for the
nine-run ablation on one core. Set ``DINOSD_ABLATION_DIR`` to keep the ablation checkpoints and
tables.
"""

import hashlib
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from dinosd import tensor as T
from dinosd.ablation import AblationConfig, run_ablation
from dinosd.attention import AttentionParams, adjacent_view_cross_attention
from dinosd.augment import CorruptionSpec
from dinosd.data import make_dataset, read_dataset, write_dataset
from dinosd.evaluate import evaluate_model, to_json_lines
from dinosd.formats import FormatError
from dinosd.gradcheck import REGISTRY, model_loss_check, run_all
from dinosd.losses import SparseDepthTarget, augmix_js_loss, js_divergence3, silog_loss, smooth_loss
from dinosd.metrics import compute_metrics
from dinosd.model import DecoderConfig, DinoSD, ModelConfig, load_checkpoint, save_checkpoint
from dinosd.tensor import Tensor
from dinosd.train import MomentumSGD, TrainConfig, step_lr_scale, train, train_step


def tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(root)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def test_c1_gradient_suite(report):
    start = time.perf_counter()
    results = run_all(trials=10)
    results.append(model_loss_check(coords=20))
    seconds = time.perf_counter() - start
    worst = max(results, key=lambda r: r.max_error)
    failed = [r.name for r in results if not r.passed]
    ok = not failed and seconds < 120 and all(r.trials >= 10 for r in results)
    report(1, ok, f"{len(results)} checks ({len(REGISTRY)} ops/losses + full model loss), "
                  f"worst {worst.name} {worst.max_error:.1e} < 1e-4, {seconds:.0f}s < 120s"
                  + (f", failed: {failed}" if failed else ""))
    assert ok


def test_c2_loss_oracles(report):
    e = math.e
    one = lambda gt: SparseDepthTarget(np.asarray(gt, float), np.ones(np.shape(gt), bool))  # noqa: E731
    silog = silog_loss(Tensor([[[[e, e * e]]]]), one([[[[e, e]]]]), 0.85).item()
    js = js_divergence3(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]]), Tensor([[0.5, 0.5]])).item()
    smooth = smooth_loss(Tensor([[[[1.0, 2.0], [1.0, 2.0]]]]), np.full((1, 3, 2, 2), 0.5)).item()
    gt = np.random.default_rng(0).uniform(1, 80, (6, 1, 4, 5))
    img = np.random.default_rng(1).random((6, 3, 4, 5))
    zeros = (
        silog_loss(Tensor(gt), one(gt)).item(),
        smooth_loss(Tensor(np.full((6, 1, 4, 5), 7.3)), img).item(),
        augmix_js_loss(Tensor(gt), Tensor(gt), Tensor(gt)).item(),
    )
    errs = (abs(silog - 0.2875), abs(js - 2 * math.log(2) / 3), abs(smooth - 2 / 3))
    ok = max(errs) < 1e-10 and zeros == (0.0, 0.0, 0.0)
    report(2, ok, f"hand-case errors {max(errs):.1e} < 1e-10; zero cases {zeros}")
    assert ok


def _brute_metrics(pred, gt, valid):
    n, acc = 0, np.zeros(7)
    for p, g, v in zip(pred.ravel().tolist(), gt.ravel().tolist(), valid.ravel().tolist()):
        if v:
            n += 1
            r = max(p / g, g / p)
            acc += [abs(p - g) / g, (p - g) ** 2 / g, (p - g) ** 2, (math.log(p / g)) ** 2,
                    r < 1.25, r < 1.25**2, r < 1.25**3]
    m = acc / n
    return {"abs_rel": m[0], "sq_rel": m[1], "rmse": math.sqrt(m[2]), "log_rmse": math.sqrt(m[3]),
            "a1": m[4], "a2": m[5], "a3": m[6]}


def test_c3_metric_oracle(report):
    worst, nested = 0.0, True
    for seed in range(100):
        rng = np.random.default_rng([seed, 33])
        shape = (6, 1, int(rng.integers(2, 10)), int(rng.integers(2, 10)))
        gt = rng.uniform(0.1, 80.0, shape)
        pred = np.clip(gt * np.exp(rng.normal(0, 0.5, shape)), 0.1, 80.0)
        valid = rng.random(shape) < 0.3
        valid.flat[0] = True
        got = compute_metrics(pred, SparseDepthTarget(gt, valid)).to_dict()
        ref = _brute_metrics(pred, gt, valid)
        worst = max(worst, max(abs(got[k] - ref[k]) / max(1.0, abs(ref[k])) for k in ref))
        nested &= got["a1"] <= got["a2"] <= got["a3"]
    ok = worst <= 1e-12 and nested
    report(3, ok, f"100 fixtures, max deviation {worst:.1e} <= 1e-12, a1<=a2<=a3 on all: {nested}")
    assert ok


def test_c4_attention_locality(report):
    unit_ok = model_ok = True
    rng = np.random.default_rng(4)
    p = AttentionParams.init(8, 2, rng, std=0.5)
    model = DinoSD(ModelConfig(decoder=DecoderConfig(attention_mode="adjacent")))
    images = rng.random((6, 3, 64, 96))
    base_tokens = rng.normal(size=(2, 6, 5, 8))
    base_out = adjacent_view_cross_attention(Tensor(base_tokens), p).data
    base_depth = model.predict(images)
    for view in range(6):
        far = [(view + k) % 6 for k in (2, 3, 4)]
        tokens, imgs = base_tokens.copy(), images.copy()
        tokens[:, far] = rng.normal(size=(2, 3, 5, 8)) * 10
        imgs[far] = rng.random((3, 3, 64, 96))
        unit_ok &= np.array_equal(adjacent_view_cross_attention(Tensor(tokens), p).data[:, view], base_out[:, view])
        model_ok &= np.array_equal(model.predict(imgs)[view], base_depth[view])
    ok = unit_ok and model_ok
    report(4, ok, f"non-adjacent perturbation: attention output bit-identical {unit_ok}, "
                  f"default-model depth unchanged {model_ok} (all 6 views)")
    assert ok


def test_c5_overfit(report):
    cfg = TrainConfig()
    assert (cfg.model.encoder.height, cfg.model.encoder.width, cfg.model.encoder.channels) == (64, 96, 64)
    fixture = make_dataset(2, 123)
    model = DinoSD(cfg.model)
    opt = MomentumSGD(model, {"encoder": cfg.encoder_lr, "decoder": cfg.decoder_lr}, cfg.momentum)
    steps, start, best = 500, time.perf_counter(), (math.inf, -1)
    for s in range(steps):
        train_step(model, opt, fixture[s % 2], cfg, s, step_lr_scale(cfg, s, steps))
        if (s + 1) % 50 == 0:
            abs_rel = evaluate_model(model, fixture).abs_rel
            best = min(best, (abs_rel, s + 1))
            if abs_rel < 0.05:
                break
    T.reset_tape()
    minutes = (time.perf_counter() - start) / 60
    ok = best[0] < 0.05 and minutes < 15
    report(5, ok, f"masked Abs Rel {best[0]:.4f} < 0.05 at step {best[1]} (<= 500), {minutes:.1f} min < 15 min")
    assert ok


def test_c8_determinism(report, tmp_path):
    cfg = TrainConfig(epochs=2, seed=3, val_corruptions=[CorruptionSpec("shot_noise", 3, 8)])
    scenes = make_dataset(5, 77)
    hashes = []
    for run in ("a", "b"):
        out = tmp_path / run
        train(cfg, scenes[:3], scenes[3:], out)
        rows = evaluate_model(load_checkpoint(out / "final"), scenes[3:], cfg.val_corruptions).to_dict()
        (out / "metrics.jsonl").write_text(to_json_lines([rows]))
        hashes.append((tree_hash(out), hashlib.sha256((out / "metrics.jsonl").read_bytes()).hexdigest()))
    ok = hashes[0] == hashes[1]
    report(8, ok, f"two runs: checkpoint tree sha256 {hashes[0][0][:12]} vs {hashes[1][0][:12]}, "
                  f"metric JSON {hashes[0][1][:12]} vs {hashes[1][1][:12]}")
    assert ok


def _mutations(blob: bytes, rng) -> list[bytes]:
    cuts = sorted({0, 1, 3, 7, len(blob) // 2, len(blob) - 1} | set(rng.integers(0, len(blob), 4).tolist()))
    out = [blob[:c] for c in cuts if c < len(blob)]
    out.append(b"XXXX" + blob[4:])
    out.append(bytes(rng.integers(0, 256, 64, dtype=np.uint8)))
    return out


def test_c9_format_round_trips(report, tmp_path):
    rng = np.random.default_rng(9)
    scenes = make_dataset(2, 5)
    write_dataset(scenes, tmp_path / "ds")
    back = read_dataset(tmp_path / "ds")
    ds_exact = all(
        np.array_equal(a.images, b.images) and np.array_equal(a.depth, b.depth)
        and np.array_equal(a.mask, b.mask) and a.seed == b.seed
        for a, b in zip(scenes, back)
    )
    model = DinoSD(ModelConfig(seed=9))
    model.round_to_float32()
    save_checkpoint(model, tmp_path / "ck")
    loaded = load_checkpoint(tmp_path / "ck")
    ck_exact = loaded.cfg == model.cfg and all(
        np.array_equal(loaded.params[k].data, v) for k, v in model.state_dict().items()
    )

    targets = [
        (tmp_path / "ds" / "index.json", read_dataset, tmp_path / "ds"),
        (tmp_path / "ds" / "scene_0001" / "view_3.ppm", read_dataset, tmp_path / "ds"),
        (tmp_path / "ds" / "scene_0000" / "depth.dsd1", read_dataset, tmp_path / "ds"),
        (tmp_path / "ds" / "scene_0000" / "mask.dsd1", read_dataset, tmp_path / "ds"),
        (tmp_path / "ck" / "manifest.json", load_checkpoint, tmp_path / "ck"),
        (tmp_path / "ck" / "head.conv1.w.dsd1", load_checkpoint, tmp_path / "ck"),
        (tmp_path / "ck" / "encoder.pos_embed.dsd1", load_checkpoint, tmp_path / "ck"),
    ]
    typed, total, crashes = 0, 0, []
    for path, loader, root in targets:
        original = path.read_bytes()
        for bad in _mutations(original, rng):
            total += 1
            path.write_bytes(bad)
            try:
                loader(root)
            except FormatError:
                typed += 1
            except Exception as exc:  # noqa: BLE001 - anything else is a failure to report
                crashes.append(f"{path.name}[{len(bad)}B]: {type(exc).__name__}")
        path.write_bytes(original)
    ok = ds_exact and ck_exact and typed == total
    report(9, ok, f"dataset bit-exact {ds_exact}, checkpoint bit-exact {ck_exact}, "
                  f"{typed}/{total} corrupt files raised FormatError" + (f"; other: {crashes[:3]}" if crashes else ""))
    assert ok


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    out = Path(os.environ.get("DINOSD_ABLATION_DIR") or tmp_path_factory.mktemp("ablation"))
    result = run_ablation(AblationConfig(), out)
    print(result.table())
    return result


def test_c6_ablation_direction(report, ablation):
    none, self_, adj = (ablation.mean_abs_rel(m) for m in ("none", "self", "adjacent"))
    ok = adj < self_ < none
    literal = (ablation.mean_abs_rel("none"), ablation.mean_abs_rel("self"),
               ablation.mean_abs_rel("adjacent", True, True))
    report(6, ok, f"3-seed mean Abs Rel, no test-time preprocessing: adjacent {adj:.4f} < self {self_:.4f} "
                  f"< none {none:.4f}; with adjacent also denoised+equalized: none {literal[0]:.4f}, self "
                  f"{literal[1]:.4f}, adjacent {literal[2]:.4f}; {ablation.seconds / 3600:.2f} h")
    assert ok


def test_c7_preprocessing_direction(report, ablation):
    plain, both = ablation.mean_abs_rel("self"), ablation.mean_abs_rel("self", True, True)
    others = ", ".join(
        f"{m} {ablation.mean_abs_rel(m):.4f}->{ablation.mean_abs_rel(m, True, True):.4f}" for m in ("none", "adjacent")
    )
    ok = both < plain
    report(7, ok, f"self-attention checkpoints, 3-seed mean Abs Rel: denoise+equalize {both:.4f} < "
                  f"none {plain:.4f}; other modes: {others}")
    assert ok
