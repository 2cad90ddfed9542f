"""Procedural six-camera ring scenes with LiDAR-like sparse depth.

A scene is a horizontally periodic panorama. Six views are cut from it at
equal angular spacing so that neighbouring cameras share an overlap strip of
identical pixels, which is what gives neighbour attention something to use.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attention import NUM_VIEWS
from .formats import FormatError, read_dsd1, read_ppm, write_dsd1, write_ppm
from .losses import SparseDepthTarget

DATASET_FORMAT = "dinosd-dataset"
DATASET_VERSION = 1


@dataclass
class SceneConfig:
    height: int = 64
    view_width: int = 96
    overlap: float = 0.25
    d_min: float = 0.1
    d_max: float = 80.0
    min_objects: int = 4
    max_objects: int = 9
    scan_row_step: int = 6
    scan_keep: float = 0.4

    def validate(self) -> None:
        if not 0.1 <= self.overlap <= 0.4:
            raise ValueError(f"overlap must lie in [0.1, 0.4], got {self.overlap}")
        stride = self.view_width * (1.0 - self.overlap)
        if abs(stride - round(stride)) > 1e-9:
            raise ValueError(f"view_width * (1 - overlap) = {stride} must be a whole number of columns")

    @property
    def stride(self) -> int:
        return int(round(self.view_width * (1.0 - self.overlap)))

    @property
    def pano_width(self) -> int:
        return NUM_VIEWS * self.stride


@dataclass
class PanoramaScene:
    rgb: np.ndarray  # [3, H, W_pano], 8-bit levels
    depth: np.ndarray  # [1, H, W_pano], float32-representable metres
    scan: np.ndarray  # [1, H, W_pano] bool, pseudo-LiDAR returns
    seed: int


@dataclass
class MultiViewBatch:
    images: np.ndarray  # [6, 3, H, W]
    depth: np.ndarray  # [6, 1, H, W] dense ground truth
    mask: np.ndarray  # [6, 1, H, W] bool, sparse validity
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def target(self) -> SparseDepthTarget:
        return SparseDepthTarget(self.depth, self.mask)


# ---------------------------------------------------------------------------
# generation


class _PeriodicNoise:
    """Bilinear value noise on a grid that wraps around the panorama horizontally."""

    def __init__(self, rng: np.random.Generator, rows: int, cols: int):
        self.grid = rng.random((rows + 1, cols))
        self.rows, self.cols = rows, cols

    def __call__(self, v: np.ndarray, u: np.ndarray) -> np.ndarray:
        # v in [0, 1] vertical, u in [0, 1) around the ring
        y = v * self.rows
        x = u * self.cols
        y0 = np.clip(np.floor(y).astype(int), 0, self.rows - 1)
        x0 = np.floor(x).astype(int) % self.cols
        x1 = (x0 + 1) % self.cols
        fy, fx = y - y0, x - np.floor(x)
        g = self.grid
        top = g[y0, x0] * (1 - fx) + g[y0, x1] * fx
        bot = g[y0 + 1, x0] * (1 - fx) + g[y0 + 1, x1] * fx
        return top * (1 - fy) + bot * fy


def render_columns(seed: int, cfg: SceneConfig, columns) -> PanoramaScene:
    """Render the panorama of scene ``seed`` at the given (wrapping) column positions."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    h, wp = cfg.height, cfg.pano_width
    cols = np.asarray(columns, dtype=np.int64) % wp
    u = cols / wp  # ring fraction
    rows = np.arange(h)
    vv, uu = np.meshgrid(rows / (h - 1), u, indexing="ij")
    yy = np.broadcast_to(rows[:, None], vv.shape).astype(np.float64)

    horizon = rng.uniform(0.35, 0.5) * h
    k_ground = rng.uniform(3.0, 4.5) * (h - 1 - horizon + 0.5)  # nearest ground ~3-4.5 m
    focal = k_ground / 1.6  # pixels, camera 1.6 m above the ground
    wall_noise = _PeriodicNoise(rng, 1, 8)
    tex_noise = _PeriodicNoise(rng, 8, 96)
    fine_noise = _PeriodicNoise(rng, 24, 288)
    fog_col = np.array([0.72, 0.78, 0.86]) + rng.uniform(-0.05, 0.05, 3)
    wall_col = rng.uniform(0.25, 0.6, 3)
    ground_col = np.array([0.42, 0.38, 0.33]) + rng.uniform(-0.08, 0.08, 3)

    wall_depth = 45.0 + 25.0 * wall_noise(np.zeros_like(u), u)
    depth = np.broadcast_to(wall_depth[None, :], vv.shape).copy()
    below = yy > horizon
    ground_depth = k_ground / np.maximum(yy - horizon + 0.5, 1e-6)
    ground = below & (ground_depth < depth)
    depth[ground] = ground_depth[ground]

    texture = tex_noise(vv, uu) - 0.5
    fine = fine_noise(vv, uu) - 0.5
    base = np.where(ground[None], ground_col[:, None, None], wall_col[:, None, None])
    base = base + 0.18 * texture[None] + 0.06 * fine[None]
    stripes = 0.05 * np.sin(2 * np.pi * (yy - horizon) / 5.0)
    base = base + np.where(ground, 0.0, stripes)[None]

    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects = []
    for _ in range(n_obj):
        objects.append(
            dict(
                centre=rng.random(),
                depth=rng.uniform(4.0, 35.0),
                width=rng.uniform(1.5, 5.0),
                height=rng.uniform(1.2, 4.0),
                colour=rng.uniform(0.05, 0.95, 3),
                ellipse=rng.random() < 0.4,
                stripe=rng.uniform(2.0, 8.0),
            )
        )
    for ob in sorted(objects, key=lambda o: -o["depth"]):
        d = ob["depth"]
        half = ob["width"] / (2 * np.pi * d) / 2  # ring fraction
        du = (u - ob["centre"] + 0.5) % 1.0 - 0.5
        bottom = horizon - 0.5 + k_ground / d
        top = bottom - focal * ob["height"] / d
        if ob["ellipse"]:
            cy, ry = (top + bottom) / 2, (bottom - top) / 2
            inside = (du[None, :] / half) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        else:
            inside = (np.abs(du)[None, :] <= half) & (yy >= top) & (yy <= bottom)
        inside &= depth > d
        if not inside.any():
            continue
        depth[inside] = d
        shade = ob["colour"][:, None, None] * (1.0 + 0.25 * texture[None])
        shade = shade + 0.08 * np.sign(np.sin(2 * np.pi * (yy - top) / ob["stripe"]))[None]
        base = np.where(inside[None], shade, base)

    depth = np.clip(depth, cfg.d_min, cfg.d_max)
    fog = 1.0 - np.exp(-depth / 60.0)
    rgb = base * (1.0 - fog[None]) + fog_col[:, None, None] * fog[None]
    rgb = np.round(np.clip(rgb, 0.0, 1.0) * 255.0) / 255.0
    depth = depth.astype(np.float32).astype(np.float64)

    scan_rng = np.random.default_rng([seed, 1])
    offset = int(scan_rng.integers(cfg.scan_row_step))
    jitter_phase = scan_rng.random(3) * 2 * np.pi
    jitter = np.round(np.sin(2 * np.pi * 3 * u + jitter_phase[0])).astype(int)
    keep = _hash_uniform(seed, cols) < cfg.scan_keep
    scan = np.zeros(vv.shape, dtype=bool)
    for r in range(offset, h, cfg.scan_row_step):
        rr = np.clip(r + jitter, 0, h - 1)
        scan[rr[keep], np.nonzero(keep)[0]] = True
    return PanoramaScene(rgb, depth[None], scan[None], int(seed))


def _hash_uniform(seed: int, cols: np.ndarray) -> np.ndarray:
    """Deterministic per-column uniforms that depend only on (seed, column)."""
    table = np.random.default_rng([seed, 2]).random(int(cols.max()) + 1 if cols.size else 1)
    return table[cols]


def gen_scene(seed: int, cfg: SceneConfig | None = None) -> PanoramaScene:
    cfg = cfg or SceneConfig()
    return render_columns(seed, cfg, np.arange(cfg.pano_width))


def view_columns(cfg: SceneConfig, k: int) -> np.ndarray:
    return (k * cfg.stride + np.arange(cfg.view_width)) % cfg.pano_width


def slice_views(scene: PanoramaScene, cfg: SceneConfig | None = None) -> MultiViewBatch:
    cfg = cfg or SceneConfig()
    cfg.validate()
    _, h, wp = scene.rgb.shape
    if wp != cfg.pano_width or h != cfg.height:
        raise ValueError(
            f"panorama is {h}x{wp} but config expects {cfg.height}x{cfg.pano_width} "
            f"(6 views of {cfg.view_width} at overlap {cfg.overlap})"
        )
    idx = [view_columns(cfg, k) for k in range(NUM_VIEWS)]
    return MultiViewBatch(
        images=np.stack([scene.rgb[:, :, c] for c in idx]),
        depth=np.stack([scene.depth[:, :, c] for c in idx]),
        mask=np.stack([scene.scan[:, :, c] for c in idx]),
        seed=scene.seed,
    )


def make_batch(seed: int, cfg: SceneConfig | None = None) -> MultiViewBatch:
    cfg = cfg or SceneConfig()
    return slice_views(gen_scene(seed, cfg), cfg)


def make_dataset(n: int, seed: int = 0, cfg: SceneConfig | None = None) -> list[MultiViewBatch]:
    """``n`` scenes whose seeds are derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32)
    return [make_batch(int(s), cfg) for s in seeds]


def stack_batches(batches) -> MultiViewBatch:
    batches = list(batches)
    return MultiViewBatch(
        images=np.concatenate([b.images for b in batches]),
        depth=np.concatenate([b.depth for b in batches]),
        mask=np.concatenate([b.mask for b in batches]),
        seed=batches[0].seed,
    )


# ---------------------------------------------------------------------------
# on-disk layout


def write_dataset(batches, directory, cfg: SceneConfig | None = None) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    samples = []
    for i, b in enumerate(batches):
        sid = f"scene_{i:04d}"
        (out / sid).mkdir(exist_ok=True)
        views = []
        for k in range(NUM_VIEWS):
            rel = f"{sid}/view_{k}.ppm"
            write_ppm(out / rel, b.images[k])
            views.append(rel)
        write_dsd1(out / sid / "depth.dsd1", b.depth)
        write_dsd1(out / sid / "mask.dsd1", b.mask.astype(np.float32))
        samples.append(
            {"id": sid, "seed": int(b.seed), "views": views, "depth": f"{sid}/depth.dsd1", "mask": f"{sid}/mask.dsd1"}
        )
    index = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "scene_config": asdict(cfg) if cfg is not None else None,
        "samples": samples,
    }
    (out / "index.json").write_text(json.dumps(index, indent=2))
    return out


def read_index(directory) -> dict:
    path = Path(directory) / "index.json"
    try:
        index = json.loads(path.read_text())
    except OSError as exc:
        raise FormatError(path, f"unreadable: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(path, f"invalid JSON: {exc.msg}") from None
    except UnicodeDecodeError:
        raise FormatError(path, "not UTF-8 text") from None
    if not isinstance(index, dict) or index.get("format") != DATASET_FORMAT:
        raise FormatError(path, "not a dataset index")
    if index.get("version") != DATASET_VERSION:
        raise FormatError(path, f"unsupported dataset version {index.get('version')}")
    if not isinstance(index.get("samples"), list):
        raise FormatError(path, "index has no sample list")
    return index


def read_dataset(directory) -> list[MultiViewBatch]:
    root = Path(directory)
    index = read_index(root)
    out = []
    for s in index["samples"]:
        try:
            views, depth_rel, mask_rel, seed = s["views"], s["depth"], s["mask"], s["seed"]
        except (KeyError, TypeError):
            raise FormatError(root / "index.json", f"malformed sample entry {s!r}") from None
        if len(views) != NUM_VIEWS:
            raise FormatError(root / "index.json", f"sample {s.get('id')} lists {len(views)} views")
        images = np.stack([read_ppm(root / v) for v in views])
        depth = read_dsd1(root / depth_rel)
        mask = read_dsd1(root / mask_rel)
        h, w = images.shape[2:]
        for rel, arr in ((depth_rel, depth), (mask_rel, mask)):
            if arr.shape != (NUM_VIEWS, 1, h, w):
                raise FormatError(root / rel, f"shape {arr.shape}, expected {(NUM_VIEWS, 1, h, w)}")
        out.append(MultiViewBatch(images, depth, mask > 0.5, int(seed), {"id": s.get("id")}))
    return out
