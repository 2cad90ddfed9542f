"""Command-line entry point: ``dinosd <subcommand> ...``.

Exit status is 0 on success, 1 on any runtime or format error and 2 on
usage errors (unknown subcommand or flag, missing argument).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .attention import MODES
from .augment import CORRUPTIONS, CorruptionSpec, corrupt, preprocess_test, read_corruption_manifest
from .data import SceneConfig, make_dataset, read_dataset, write_dataset
from .evaluate import corrupt_views, evaluate_grid, format_table, prepare_views, to_json_lines
from .formats import FormatError, read_ppm, write_dsd1, write_ppm
from .losses import LossWeights
from .model import load_checkpoint

log = logging.getLogger("dinosd")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = SceneConfig(height=args.height, view_width=args.view_width, overlap=args.overlap)
    cfg.validate()
    batches = make_dataset(args.scenes, args.seed, cfg)
    write_dataset(batches, args.out, cfg)
    print(f"wrote {len(batches)} scenes to {args.out}")
    return 0


def _train_config(args):
    from .train import TrainConfig

    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    over = {}
    for flag, key in (("epochs", "epochs"), ("encoder_lr", "encoder_lr"), ("decoder_lr", "decoder_lr"),
                      ("momentum", "momentum"), ("grad_clip", "grad_clip"), ("seed", "seed"),
                      ("scenes_per_step", "scenes_per_step"), ("t0", "t0"), ("t_mult", "t_mult"),
                      ("warmup_steps", "warmup_steps")):
        val = getattr(args, flag)
        if val is not None:
            over[key] = val
    if args.val_corruptions:
        over["val_corruptions"] = read_corruption_manifest(args.val_corruptions)
    if args.val_denoise:
        over["val_denoise"] = True
    if args.val_equalize:
        over["val_equalize"] = True
    cfg = replace(cfg, **over)
    if args.beta is not None:
        cfg = replace(cfg, loss=replace(cfg.loss, beta_augmix=args.beta))
    model = cfg.model
    if args.attention is not None:
        model = replace(model, decoder=replace(model.decoder, attention_mode=args.attention))
    if args.model_seed is not None:
        model = replace(model, seed=args.model_seed)
    return replace(cfg, model=model)


def cmd_train(args) -> int:
    from .train import train

    cfg = _train_config(args)
    train_set = read_dataset(args.data)
    val_set = read_dataset(args.val) if args.val else None
    e = cfg.model.encoder
    h, w = train_set[0].images.shape[2:]
    if (h, w) != (e.height, e.width):
        cfg = replace(cfg, model=replace(cfg.model, encoder=replace(e, height=h, width=w)))
    res = train(cfg, train_set, val_set, args.out, max_steps=args.max_steps)
    for rec in res.history:
        print(json.dumps(rec, sort_keys=True))
    print(f"checkpoints in {args.out} (best epoch: {res.best_epoch})")
    return 0


def cmd_eval(args) -> int:
    dataset = read_dataset(args.data)
    specs = read_corruption_manifest(args.corruptions) if args.corruptions else []
    models = {}
    for path in args.checkpoint:
        model = load_checkpoint(path)
        mode = model.cfg.decoder.attention_mode
        if args.attention is not None and args.attention != mode:
            raise ValueError(f"checkpoint {path} was trained with attention {mode!r}, not {args.attention!r}")
        if mode in models:
            raise ValueError(f"two checkpoints with attention {mode!r}; evaluate them separately")
        models[mode] = model
        e = model.cfg.encoder
        h, w = dataset[0].images.shape[2:]
        if (h, w) != (e.height, e.width):
            raise ValueError(f"checkpoint {path} expects {e.height}x{e.width} views, dataset has {h}x{w}")
    if args.grid:
        flags = [(False, False), (True, False), (False, True), (True, True)]
    else:
        flags = [(args.denoise, args.equalize)]
    rows = evaluate_grid(models, dataset, specs, flags)
    lines = to_json_lines(rows)
    if args.json:
        Path(args.json).write_text(lines + "\n")
    else:
        print(lines)
    print(format_table(rows), file=sys.stderr if not args.json else sys.stdout)
    return 0


def _is_dataset(path: Path) -> bool:
    return path.is_dir() and (path / "index.json").is_file()


def cmd_corrupt(args) -> int:
    src = Path(args.input)
    if _is_dataset(src):
        if not args.manifest:
            raise ValueError("corrupting a dataset needs --manifest")
        dataset = read_dataset(src)
        for spec in read_corruption_manifest(args.manifest):
            sub = Path(args.out) / f"{spec.kind}_s{spec.severity}_seed{spec.seed}"
            batches = [replace(b, images=corrupt_views(b, spec)) for b in dataset]
            write_dataset(batches, sub)
            print(f"wrote {sub}")
        return 0
    if args.kind is None:
        raise ValueError("corrupting a single image needs --kind")
    spec = CorruptionSpec(args.kind, args.severity, args.seed)
    write_ppm(args.out, corrupt(read_ppm(src), spec))
    return 0


def cmd_preprocess(args) -> int:
    src = Path(args.input)
    kw = dict(denoise=not args.no_denoise, equalize=not args.no_equalize, equalize_first=args.equalize_first)
    if _is_dataset(src):
        batches = [replace(b, images=np.stack([preprocess_test(v, **kw) for v in b.images]))
                   for b in read_dataset(src)]
        write_dataset(batches, args.out)
    else:
        write_ppm(args.out, preprocess_test(read_ppm(src), **kw))
    return 0


def cmd_infer(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if args.scene:
        views = [Path(args.scene) / f"view_{k}.ppm" for k in range(6)]
    else:
        views = [Path(v) for v in args.images]
    if len(views) != 6:
        raise ValueError(f"need exactly 6 views, got {len(views)}")
    images = np.stack([read_ppm(v) for v in views])
    if args.denoise or args.equalize:
        images = np.stack([preprocess_test(v, args.denoise, args.equalize) for v in images])
    depth = model.predict(images)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    r = model.cfg.depth_range
    for k in range(6):
        write_dsd1(out / f"depth_{k}.dsd1", depth[k])
        # near is bright: inverse depth rescaled to [0, 1] over the model's range
        inv = (1.0 / depth[k, 0] - 1.0 / r.d_max) / (1.0 / r.d_min - 1.0 / r.d_max)
        write_ppm(out / f"depth_{k}.ppm", np.sqrt(np.clip(inv, 0.0, 1.0)))
    print(f"wrote 6 depth maps to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import REGISTRY, model_loss_check, run_case

    names = args.only or list(REGISTRY)
    unknown = set(names) - set(REGISTRY)
    if unknown:
        raise ValueError(f"unknown gradcheck cases: {sorted(unknown)}")
    results = [run_case(n, trials=args.trials) for n in names]
    if not args.skip_model:
        results.append(model_loss_check())
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed")
    return 1 if failed else 0


def cmd_ablate(args) -> int:
    from .ablation import AblationConfig, run_ablation

    tcfg = _train_config(args)
    cfg = AblationConfig(base=tcfg, train_scenes=args.scenes, val_scenes=args.val_scenes,
                         seeds=tuple(args.seeds), modes=tuple(args.modes))
    if args.corruptions:
        cfg = replace(cfg, corruptions=read_corruption_manifest(args.corruptions))
    res = run_ablation(cfg, args.out, progress=print)
    print(res.table())
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TrainConfig JSON; flags below override its fields")
    p.add_argument("--epochs", type=int)
    p.add_argument("--encoder-lr", type=float)
    p.add_argument("--decoder-lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--seed", type=int, help="training seed (data order and AugMix)")
    p.add_argument("--model-seed", type=int, help="weight initialisation seed")
    p.add_argument("--scenes-per-step", type=int)
    p.add_argument("--t0", type=int, help="first restart period in steps (default: one epoch)")
    p.add_argument("--t-mult", type=int)
    p.add_argument("--warmup-steps", type=int)
    p.add_argument("--beta", type=float, help="weight of the AugMix consistency term")
    p.add_argument("--attention", choices=MODES)
    p.add_argument("--val-corruptions", help="corruption manifest applied to the validation set")
    p.add_argument("--val-denoise", action="store_true")
    p.add_argument("--val-equalize", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dinosd", description="Surround-view depth estimation toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", help="generate a synthetic six-camera dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--view-width", type=int, default=96)
    p.add_argument("--overlap", type=float, default=0.25)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--out", required=True)
    p.add_argument("--max-steps", type=int)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score checkpoints, printing JSON lines and a table")
    p.add_argument("--checkpoint", required=True, action="append", help="repeat to compare attention modes")
    p.add_argument("--data", required=True)
    p.add_argument("--corruptions", help="corruption manifest; omitted means clean images")
    p.add_argument("--attention", choices=MODES, help="require the checkpoint to use this attention mode")
    p.add_argument("--denoise", action="store_true")
    p.add_argument("--equalize", action="store_true")
    p.add_argument("--grid", action="store_true", help="all four denoise/equalize combinations")
    p.add_argument("--json", help="write the JSON lines here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("corrupt", help="corrupt one PPM image or a whole dataset")
    p.add_argument("--input", required=True, help="PPM file or dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", help="corruption manifest (dataset input)")
    p.add_argument("--kind", choices=CORRUPTIONS, help="single-image corruption kind")
    p.add_argument("--severity", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("preprocess", help="denoise and equalize one PPM image or a dataset")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-denoise", action="store_true")
    p.add_argument("--no-equalize", action="store_true")
    p.add_argument("--equalize-first", action="store_true")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("infer", help="predict depth for one six-view scene")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scene", help="directory holding view_0.ppm .. view_5.ppm")
    src.add_argument("--images", nargs="+", help="six PPM files in camera order")
    p.add_argument("--out", required=True)
    p.add_argument("--denoise", action="store_true")
    p.add_argument("--equalize", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--only", nargs="+", help="run just these cases")
    p.add_argument("--skip-model", action="store_true", help="skip the full-model loss check")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="attention x preprocessing ablation over several seeds (3 epochs unless --epochs)")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=200)
    p.add_argument("--val-scenes", type=int, default=24)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--modes", nargs="+", choices=MODES, default=list(MODES))
    p.add_argument("--corruptions", help="validation corruption manifest (default: every kind at severity 3)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate, epochs=3)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (FormatError, ValueError, KeyError, TypeError, OSError) as exc:
        print(f"dinosd {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
