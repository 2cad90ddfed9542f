"""Surround-view depth network: patch-transformer encoder, multi-view DPT decoder, sigmoid head.

Images for a batch of N scenes are stacked view-major inside each scene,
i.e. row ``n * 6 + k`` holds camera ``k`` of scene ``n``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import NUM_VIEWS, MODES, AttentionParams, _trunc_normal, multiview_attention, scaled_dot_product
from .formats import FormatError, read_dsd1, write_dsd1
from .tensor import DimensionError, Tensor

CHECKPOINT_FORMAT = "dinosd-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Stage:
    kind: str  # "mdpt" carries multi-view attention, "dpt" does not
    tap: int  # encoder block counted from the end: -1 is the last block
    scale: float


# Third- and fourth-to-last blocks go through attention at scales 1 and 0.5;
# the last two blocks go straight to fusion at scales 2 and 4.
STAGES = (
    Stage("mdpt", -3, 1.0),
    Stage("mdpt", -4, 0.5),
    Stage("dpt", -2, 2.0),
    Stage("dpt", -1, 4.0),
)


@dataclass
class EncoderConfig:
    patch_size: int = 8
    channels: int = 64
    block_count: int = 6
    head_count: int = 2
    mlp_ratio: int = 4
    height: int = 64
    width: int = 96

    def validate(self) -> None:
        if self.block_count < 4:
            raise ValueError(f"block_count must be >= 4 (four taps), got {self.block_count}")
        if self.channels % self.head_count:
            raise ValueError(f"channels {self.channels} not divisible by head_count {self.head_count}")
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ValueError(
                f"image {self.height}x{self.width} not divisible by patch size {self.patch_size}"
            )

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch_size, self.width // self.patch_size


@dataclass
class DecoderConfig:
    fusion_channels: int = 32
    head_channels: int = 32
    attention_mode: str = "adjacent"
    attention_heads: int = 2
    residual_attention: bool = True
    stages: tuple[Stage, ...] = STAGES

    def validate(self) -> None:
        if len(self.stages) != 4:
            raise ValueError(f"decoder needs exactly 4 stages, got {len(self.stages)}")
        if [s.kind for s in self.stages] != ["mdpt", "mdpt", "dpt", "dpt"]:
            raise ValueError("the first two stages must be mdpt and the last two dpt")
        if self.attention_mode not in MODES:
            raise ValueError(f"unknown attention mode {self.attention_mode!r}")


@dataclass
class DepthRange:
    d_min: float = 0.1
    d_max: float = 80.0

    def __post_init__(self):
        if not 0 < self.d_min < self.d_max:
            raise ValueError(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    depth_range: DepthRange = field(default_factory=DepthRange)
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder"]["stages"] = [asdict(s) for s in self.decoder.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        dec = dict(d.get("decoder", {}))
        if "stages" in dec:
            dec["stages"] = tuple(Stage(**s) for s in dec["stages"])
        return cls(
            encoder=EncoderConfig(**d.get("encoder", {})),
            decoder=DecoderConfig(**dec),
            depth_range=DepthRange(**d.get("depth_range", {})),
            seed=int(d.get("seed", 0)),
        )


def _he(rng, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class DinoSD:
    """Parameters live in ``self.params`` (name -> Tensor), ordered and grouped."""

    def __init__(self, cfg: ModelConfig | None = None):
        self.cfg = cfg or ModelConfig()
        self.cfg.encoder.validate()
        self.cfg.decoder.validate()
        self.params: dict[str, Tensor] = {}
        self.stage_of: dict[str, str] = {}
        self._build(np.random.default_rng(self.cfg.seed))

    # -- construction -----------------------------------------------------

    def _add(self, name: str, value: np.ndarray, stage: str) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        self.stage_of[name] = stage
        return t

    def _build(self, rng: np.random.Generator) -> None:
        e, d = self.cfg.encoder, self.cfg.decoder
        c, n = e.channels, e.patch_size
        tokens = e.grid[0] * e.grid[1]
        tn = lambda *shape: _trunc_normal(rng, shape, 0.02)  # noqa: E731
        zeros = np.zeros

        self._add("encoder.patch_embed.w", tn(3 * n * n, c), "encoder")
        self._add("encoder.patch_embed.b", zeros(c), "encoder")
        self._add("encoder.pos_embed", tn(tokens, c), "encoder")
        hidden = c * e.mlp_ratio
        for b in range(e.block_count):
            p = f"encoder.blocks.{b}."
            self._add(p + "ln1.g", np.ones(c), "encoder")
            self._add(p + "ln1.b", zeros(c), "encoder")
            for w in ("w_q", "w_k", "w_v", "w_o"):
                self._add(p + "attn." + w, tn(c, c), "encoder")
            self._add(p + "ln2.g", np.ones(c), "encoder")
            self._add(p + "ln2.b", zeros(c), "encoder")
            self._add(p + "mlp.w1", tn(c, hidden), "encoder")
            self._add(p + "mlp.b1", zeros(hidden), "encoder")
            self._add(p + "mlp.w2", tn(hidden, c), "encoder")
            self._add(p + "mlp.b2", zeros(c), "encoder")

        cf = d.fusion_channels
        for i, st in enumerate(d.stages):
            tag = f"{st.kind}_s{st.scale:g}"
            p = f"decoder.stage{i}."
            if st.kind == "mdpt":
                for w in ("w_q", "w_k", "w_v"):
                    self._add(p + "attn." + w, tn(c, c), tag)
            self._add(p + "proj.w", _he(rng, (cf, c, 3, 3)), tag)
            self._add(p + "proj.b", zeros(cf), tag)
            self._add(p + "fuse.w", tn(cf, cf, 3, 3), "fusion")
            self._add(p + "fuse.b", zeros(cf), "fusion")
        ch = d.head_channels
        self._add("head.conv1.w", _he(rng, (ch, cf, 3, 3)), "head")
        self._add("head.conv1.b", zeros(ch), "head")
        self._add("head.conv2.w", tn(1, ch, 3, 3), "head")
        self._add("head.conv2.b", zeros(1), "head")

    # -- bookkeeping ------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def group_of(self, name: str) -> str:
        return "encoder" if name.startswith("encoder.") else "decoder"

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def round_to_float32(self) -> None:
        """Snap weights to float32 so a saved checkpoint is exactly this model."""
        for p in self.params.values():
            p.data = p.data.astype(np.float32).astype(np.float64)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in state:
                raise KeyError(f"missing parameter {k}")
            if state[k].shape != p.shape:
                raise DimensionError(f"{k}: stored shape {state[k].shape} vs model {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def attention_params(self, stage: int) -> AttentionParams:
        p = f"decoder.stage{stage}.attn."
        return AttentionParams(
            self.params[p + "w_q"], self.params[p + "w_k"], self.params[p + "w_v"],
            self.cfg.decoder.attention_heads,
        )

    # -- forward ----------------------------------------------------------

    def patchify(self, images: Tensor) -> Tensor:
        b, ch, h, w = images.shape
        n = self.cfg.encoder.patch_size
        if h % n or w % n:
            raise DimensionError(f"image {h}x{w} not divisible by patch size {n}")
        x = images.reshape(b, ch, h // n, n, w // n, n).transpose(0, 2, 4, 1, 3, 5)
        return x.reshape(b, (h // n) * (w // n), ch * n * n)

    def encode(self, images: Tensor) -> list[Tensor]:
        """Token sets [B, T, C] after each of the last four blocks, shallow to deep."""
        e = self.cfg.encoder
        if images.ndim != 4 or images.shape[1] != 3:
            raise DimensionError(f"expected images [B,3,H,W], got {images.shape}")
        if images.shape[2:] != (e.height, e.width):
            raise DimensionError(f"model built for {e.height}x{e.width}, got {images.shape[2:]}")
        P = self.params
        x = self.patchify(images - 0.5) @ P["encoder.patch_embed.w"] + P["encoder.patch_embed.b"]
        x = x + P["encoder.pos_embed"]
        taps = []
        for b in range(e.block_count):
            x = self._block(x, f"encoder.blocks.{b}.")
            if b >= e.block_count - 4:
                taps.append(x)
        return taps

    def _block(self, x: Tensor, p: str) -> Tensor:
        P = self.params
        h = T.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
        ap = AttentionParams(P[p + "attn.w_q"], P[p + "attn.w_k"], P[p + "attn.w_v"], self.cfg.encoder.head_count)
        x = x + scaled_dot_product(h, h, ap) @ P[p + "attn.w_o"]
        h = T.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
        h = T.gelu(h @ P[p + "mlp.w1"] + P[p + "mlp.b1"]) @ P[p + "mlp.w2"] + P[p + "mlp.b2"]
        return x + h

    def decode(self, taps: list[Tensor], mode: str | None = None) -> Tensor:
        """Fuse the four taps into one [B, Cf, 4h, 4w] feature map (h, w = token grid)."""
        d = self.cfg.decoder
        mode = d.attention_mode if mode is None else mode
        if len(taps) != len(d.stages):
            raise DimensionError(f"decoder has {len(d.stages)} stages but got {len(taps)} taps")
        gh, gw = self.cfg.encoder.grid
        P = self.params
        maps = []
        for i, st in enumerate(d.stages):
            tok = taps[st.tap]
            b, t, c = tok.shape
            if b % NUM_VIEWS:
                raise DimensionError(f"batch of {b} images is not a multiple of {NUM_VIEWS} views")
            if st.kind == "mdpt" and mode != "none":
                stack = tok.reshape(b // NUM_VIEWS, NUM_VIEWS, t, c)
                stack = multiview_attention(stack, mode, self.attention_params(i), d.residual_attention)
                tok = stack.reshape(b, t, c)
            fmap = tok.transpose(0, 2, 1).reshape(b, c, gh, gw)
            fmap = T.conv2d(fmap, P[f"decoder.stage{i}.proj.w"], P[f"decoder.stage{i}.proj.b"])
            maps.append((st.scale, i, T.resample_bilinear(fmap, st.scale)))

        maps.sort(key=lambda m: m[0])
        fused = None
        for _, i, fmap in maps:
            x = fmap if fused is None else T.resample_bilinear(fused, size=fmap.shape[2:]) + fmap
            fused = x + T.conv2d(T.relu(x), P[f"decoder.stage{i}.fuse.w"], P[f"decoder.stage{i}.fuse.b"])
        return fused

    def head(self, features: Tensor) -> Tensor:
        """conv -> relu -> conv -> sigmoid, mapped to [d_min, d_max] and resized to H x W."""
        P = self.params
        rng = self.cfg.depth_range
        x = T.relu(T.conv2d(features, P["head.conv1.w"], P["head.conv1.b"]))
        s = T.sigmoid(T.conv2d(x, P["head.conv2.w"], P["head.conv2.b"]))
        e = self.cfg.encoder
        return T.resample_bilinear(_to_metric(s, rng), size=(e.height, e.width))

    def forward(self, images, mode: str | None = None) -> Tensor:
        """[6N, 3, H, W] images -> [6N, 1, H, W] metric depth."""
        images = T.as_tensor(images)
        if images.shape[0] % NUM_VIEWS:
            raise DimensionError(f"expected a multiple of {NUM_VIEWS} views, got {images.shape[0]}")
        return self.head(self.decode(self.encode(images), mode))

    __call__ = forward

    def predict(self, images, mode: str | None = None) -> np.ndarray:
        with T.no_grad():
            return self.forward(images, mode).data


def _to_metric(s: Tensor, r: DepthRange) -> Tensor:
    # A saturated float64 sigmoid is exactly 0 or 1; keep depth strictly inside the range.
    depth = s * (r.d_max - r.d_min) + r.d_min
    return T.clamp(depth, np.nextafter(r.d_min, np.inf), np.nextafter(r.d_max, -np.inf))


def depth_head(features: Tensor, conv1_w, conv1_b, conv2_w, conv2_b, depth_range: DepthRange, size=None) -> Tensor:
    """Functional form of the depth head, for checking it in isolation."""
    x = T.relu(T.conv2d(features, conv1_w, conv1_b))
    s = T.sigmoid(T.conv2d(x, conv2_w, conv2_b))
    depth = _to_metric(s, depth_range)
    return depth if size is None else T.resample_bilinear(depth, size=size)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: DinoSD, directory, meta: dict | None = None) -> Path:
    """Write one DSD1 file per parameter plus ``manifest.json``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, p in model.params.items():
        fname = name + ".dsd1"
        write_dsd1(out / fname, p.data)
        entries.append({"name": name, "file": fname, "shape": list(p.shape), "stage": model.stage_of[name]})
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "tensors": entries,
        "meta": meta or {},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except OSError as exc:
        raise FormatError(path, f"unreadable: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(path, f"invalid JSON: {exc.msg}") from None
    except UnicodeDecodeError:
        raise FormatError(path, "not UTF-8 text") from None
    if not isinstance(manifest, dict) or manifest.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(path, "not a checkpoint manifest")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise FormatError(path, f"unsupported checkpoint version {manifest.get('version')}")
    return manifest


def load_checkpoint(directory) -> DinoSD:
    directory = Path(directory)
    manifest = read_manifest(directory)
    try:
        model = DinoSD(ModelConfig.from_dict(manifest["config"]))
        entries = {e["name"]: e for e in manifest["tensors"]}
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(directory / "manifest.json", f"malformed manifest: {exc}") from None
    state = {}
    for name, p in model.params.items():
        if name not in entries:
            raise FormatError(directory / "manifest.json", f"missing tensor {name}")
        path = directory / entries[name]["file"]
        arr = read_dsd1(path)
        if arr.shape != p.shape or list(arr.shape) != entries[name]["shape"]:
            raise FormatError(path, f"shape {arr.shape} does not match model {p.shape}")
        state[name] = arr
    model.load_state_dict(state)
    return model
