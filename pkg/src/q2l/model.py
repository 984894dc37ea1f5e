"""Query2Label network: toy backbone, label-query decoder and per-class head.

Also holds the global-average-pool baseline that shares the backbone, and
the checkpoint format for both.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numcore as nc
from .numcore import Tensor
from .numcore.serialize import FormatError, tensor_from_bytes, tensor_to_bytes
from .transformer import (
    DecoderLayerParams,
    EncoderLayerParams,
    FFNParams,
    MultiHeadParams,
    NormParams,
    decoder_layer,
    encoder_layer,
    sincos_2d,
)


@dataclass
class ModelConfig:
    n_classes: int = 12
    image_size: int = 48
    patch_size: int = 8
    d_backbone: int = 64
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    n_layers: int = 2
    n_encoder_layers: int = 0
    n_convs: int = 2
    # pixel-level conv+relu+2×2-max-pool stages run before the patch embedding
    stem_channels: tuple[int, ...] = (16, 32)
    attn_bias: bool = True
    self_attn: bool = True
    pe_temperature: float = 10000.0
    query_init_std: float = 1.0

    def __post_init__(self):
        self.stem_channels = tuple(int(c) for c in self.stem_channels)
        self.validate()

    def validate(self) -> None:
        positive = ("n_classes", "image_size", "patch_size", "d_backbone", "d_model", "n_heads", "d_ff", "n_layers")
        for name in positive:
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_encoder_layers < 0 or self.n_convs < 0:
            raise ValueError("n_encoder_layers and n_convs must be >= 0")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if any(c < 1 for c in self.stem_channels):
            raise ValueError("stem channel counts must be >= 1")
        if self.patch_size % (2 ** len(self.stem_channels)):
            raise ValueError(
                f"patch_size {self.patch_size} not divisible by the stem stride {2 ** len(self.stem_channels)}"
            )
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_model % 4:
            raise ValueError(f"d_model {self.d_model} must be a multiple of 4 for 2-D position encodings")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def embed_patch(self) -> int:
        """Patch size seen by the embedding after the stem's downsampling."""
        return self.patch_size // 2 ** len(self.stem_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stem_channels"] = list(self.stem_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class BackboneParams:
    patch_size: int  # patch extent at the embedding's input resolution
    w_patch: Tensor
    b_patch: Tensor
    convs: list[tuple[Tensor, Tensor]] = field(default_factory=list)
    stem: list[tuple[Tensor, Tensor]] = field(default_factory=list)

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(self.stem):
            out[f"stem{i}.w"] = w
            out[f"stem{i}.b"] = b
        out.update(w_patch=self.w_patch, b_patch=self.b_patch)
        for i, (w, b) in enumerate(self.convs):
            out[f"conv{i}.w"] = w
            out[f"conv{i}.b"] = b
        return out


@dataclass
class ForwardOutput:
    probs: np.ndarray
    logits: Tensor
    cross_maps: list[Tensor]
    prob_tensor: Tensor | None = None


def _to_image_batch(image) -> tuple[Tensor, bool]:
    """Accept H₀×W₀×3 or N×H₀×W₀×3 arrays; 8-bit input is scaled to [0, 1]."""
    if isinstance(image, Tensor):
        arr = image
    else:
        raw = np.asarray(image)
        if raw.dtype == np.uint8:
            arr = Tensor(raw.astype(nc.get_default_dtype()) / 255.0)
        else:
            arr = Tensor(raw)
    if arr.ndim == 3:
        return nc.reshape(arr, (1,) + arr.shape), False
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected H×W×3 or N×H×W×3 image data, got shape {arr.shape}")
    return arr, True


def extract_features(image, backbone: BackboneParams) -> Tensor:
    """Optional pixel stem, patch embedding, then the 3×3 conv+relu stack.

    Returns an (N×)H×W×d₀ map with H = H₀ / (stem stride · patch size).
    """
    x, batched = _to_image_batch(image)
    h0, w0 = x.shape[1:3]
    stride = backbone.patch_size * 2 ** len(backbone.stem)
    if h0 % stride or w0 % stride:
        raise ValueError(f"image extent {h0}×{w0} not divisible by the backbone stride {stride}")
    for w, b in backbone.stem:
        x = nc.max_pool2d(nc.relu(nc.conv2d(x, w, b)), 2)
    f = nc.matmul(nc.patchify(x, backbone.patch_size), backbone.w_patch) + backbone.b_patch
    for w, b in backbone.convs:
        f = nc.relu(nc.conv2d(f, w, b))
    return f if batched else nc.reshape(f, f.shape[1:])


def project_features(f0: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Flatten an (N×)H×W×d₀ map row-major to (N×)HW×d₀ and map linearly to d."""
    if f0.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"projection {w.shape}/{b.shape} does not fit features {f0.shape}")
    if f0.ndim == 3:
        flat = nc.reshape(f0, (f0.shape[0] * f0.shape[1], f0.shape[2]))
    elif f0.ndim == 4:
        flat = nc.reshape(f0, (f0.shape[0], f0.shape[1] * f0.shape[2], f0.shape[3]))
    else:
        raise ValueError(f"expected H×W×d₀ features, got {f0.shape}")
    return nc.matmul(flat, w) + b


class _Module:
    kind = "abstract"
    config: ModelConfig

    def named_parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(state) != set(params):
            missing, extra = set(params) - set(state), set(state) - set(params)
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)

    def logits(self, images) -> Tensor:
        return self.forward(images).logits

    def predict_proba(self, images, batch_size: int = 128) -> np.ndarray:
        x = np.asarray(images)
        if x.ndim == 3:
            x = x[None]
        out = []
        with nc.no_grad():
            for i in range(0, len(x), batch_size):
                out.append(self.forward(x[i : i + batch_size]).probs)
        return np.concatenate(out, axis=0)


class Q2LModel(_Module):
    """Backbone → projection → label-query decoder stack → per-class linear head."""

    kind = "q2l"

    def __init__(self, config: ModelConfig, backbone: BackboneParams, proj_w: Tensor, proj_b: Tensor,
                 label_embed: Tensor, encoder_layers: list[EncoderLayerParams],
                 decoder_layers: list[DecoderLayerParams], head_w: Tensor, head_b: Tensor):
        self.config = config
        self.backbone = backbone
        self.proj_w = proj_w
        self.proj_b = proj_b
        self.label_embed = label_embed
        self.encoder_layers = encoder_layers
        self.decoder_layers = decoder_layers
        self.head_w = head_w
        self.head_b = head_b
        self.init_std: dict[str, float] = {}
        g = config.grid
        self.pos_encoding = sincos_2d(g, g, config.d_model, config.pe_temperature)
        k, d = label_embed.shape
        if head_w.shape != (k, d) or head_b.shape != (k,):
            raise ValueError(f"head {head_w.shape}/{head_b.shape} inconsistent with {k} queries of width {d}")

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"backbone.{k}": v for k, v in self.backbone.named_tensors().items()}
        out["proj.w"] = self.proj_w
        out["proj.b"] = self.proj_b
        out["label_embed"] = self.label_embed
        for i, layer in enumerate(self.encoder_layers):
            out.update({f"encoder{i}.{k}": v for k, v in layer.named_tensors().items()})
        for i, layer in enumerate(self.decoder_layers):
            out.update({f"decoder{i}.{k}": v for k, v in layer.named_tensors().items()})
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def forward(self, image) -> ForwardOutput:
        x, batched = _to_image_batch(image)
        f0 = extract_features(x, self.backbone)
        f = project_features(f0, self.proj_w, self.proj_b)
        pe_s = self.pos_encoding.flat(f.dtype)
        for layer in self.encoder_layers:
            f = encoder_layer(f, pe_s, layer)
        bsz = f.shape[0]
        q0 = self.label_embed
        q = nc.reshape(q0, (1,) + q0.shape) * np.ones((bsz, 1, 1), dtype=q0.dtype)
        maps = []
        for layer in self.decoder_layers:
            q, cm = decoder_layer(q, f, pe_s, q0, layer, skip_self_attn=not self.config.self_attn)
            maps.append(cm)
        logits = nc.sum(q * self.head_w, axis=-1) + self.head_b
        probs = nc.sigmoid(logits)
        if not batched:
            logits = nc.reshape(logits, logits.shape[1:])
            probs = nc.reshape(probs, probs.shape[1:])
            maps = [nc.reshape(m, m.shape[1:]) for m in maps]
        return ForwardOutput(probs=probs.data, logits=logits, cross_maps=maps, prob_tensor=probs)


class PooledBaseline(_Module):
    """Same backbone, global average pooling and a linear classifier."""

    kind = "baseline"

    def __init__(self, config: ModelConfig, backbone: BackboneParams, head_w: Tensor, head_b: Tensor):
        self.config = config
        self.backbone = backbone
        self.head_w = head_w
        self.head_b = head_b
        self.init_std: dict[str, float] = {}

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"backbone.{k}": v for k, v in self.backbone.named_tensors().items()}
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def forward(self, image) -> ForwardOutput:
        x, batched = _to_image_batch(image)
        f0 = extract_features(x, self.backbone)
        pooled = nc.mean(f0, axis=(1, 2))
        logits = nc.matmul(pooled, self.head_w) + self.head_b
        probs = nc.sigmoid(logits)
        if not batched:
            logits = nc.reshape(logits, logits.shape[1:])
            probs = nc.reshape(probs, probs.shape[1:])
        return ForwardOutput(probs=probs.data, logits=logits, cross_maps=[], prob_tensor=probs)


def forward(image, model: _Module) -> ForwardOutput:
    return model.forward(image)


# -- initialization ----------------------------------------------------------

class _Init:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.dtype = nc.get_default_dtype()
        self.stds: dict[str, float] = {}

    def normal(self, name: str, shape, std: float) -> Tensor:
        self.stds[name] = float(std)
        return Tensor(self.rng.normal(0.0, std, size=shape).astype(self.dtype), requires_grad=True)

    def const(self, shape, value: float) -> Tensor:
        return Tensor(np.full(shape, value, dtype=self.dtype), requires_grad=True)


def _init_backbone(cfg: ModelConfig, ini: _Init) -> BackboneParams:
    p, d0 = cfg.embed_patch, cfg.d_backbone
    stem, c_in = [], 3
    for i, c in enumerate(cfg.stem_channels):
        w = ini.normal(f"backbone.stem{i}.w", (3, 3, c_in, c), np.sqrt(2.0 / (9 * c_in)))
        stem.append((w, ini.const((c,), 0.0)))
        c_in = c
    fan = c_in * p * p
    w_patch = ini.normal("backbone.w_patch", (fan, d0), np.sqrt(1.0 / fan))
    convs = []
    for i in range(cfg.n_convs):
        w = ini.normal(f"backbone.conv{i}.w", (3, 3, d0, d0), np.sqrt(2.0 / (9 * d0)))
        convs.append((w, ini.const((d0,), 0.0)))
    return BackboneParams(p, w_patch, ini.const((d0,), 0.0), convs, stem)


def _init_mha(cfg: ModelConfig, ini: _Init, prefix: str) -> MultiHeadParams:
    d = cfg.d_model
    std = np.sqrt(1.0 / d)
    ws = {n: ini.normal(f"{prefix}.{n}", (d, d), std) for n in ("w_q", "w_k", "w_v", "w_o")}
    bs = {n: (ini.const((d,), 0.0) if cfg.attn_bias else None) for n in ("b_q", "b_k", "b_v", "b_o")}
    return MultiHeadParams(cfg.n_heads, **ws, **bs)


def _init_ffn(cfg: ModelConfig, ini: _Init, prefix: str) -> FFNParams:
    d, dff = cfg.d_model, cfg.d_ff
    return FFNParams(
        ini.normal(f"{prefix}.w1", (d, dff), np.sqrt(2.0 / d)), ini.const((dff,), 0.0),
        ini.normal(f"{prefix}.w2", (dff, d), np.sqrt(1.0 / dff)), ini.const((d,), 0.0),
    )


def _init_norm(cfg: ModelConfig, ini: _Init) -> NormParams:
    return NormParams(ini.const((cfg.d_model,), 1.0), ini.const((cfg.d_model,), 0.0))


def init_model(config: ModelConfig, seed: int = 0) -> Q2LModel:
    """Deterministically initialize a Query2Label model from ``seed``."""
    config.validate()
    ini = _Init(seed)
    cfg = config
    backbone = _init_backbone(cfg, ini)
    proj_w = ini.normal("proj.w", (cfg.d_backbone, cfg.d_model), np.sqrt(1.0 / cfg.d_backbone))
    proj_b = ini.const((cfg.d_model,), 0.0)
    label_embed = ini.normal("label_embed", (cfg.n_classes, cfg.d_model), cfg.query_init_std)
    encoders = [
        EncoderLayerParams(_init_mha(cfg, ini, f"encoder{i}.self_attn"), _init_ffn(cfg, ini, f"encoder{i}.ffn"),
                           _init_norm(cfg, ini), _init_norm(cfg, ini))
        for i in range(cfg.n_encoder_layers)
    ]
    decoders = [
        DecoderLayerParams(
            _init_mha(cfg, ini, f"decoder{i}.self_attn"), _init_mha(cfg, ini, f"decoder{i}.cross_attn"),
            _init_ffn(cfg, ini, f"decoder{i}.ffn"), _init_norm(cfg, ini), _init_norm(cfg, ini), _init_norm(cfg, ini),
        )
        for i in range(cfg.n_layers)
    ]
    head_w = ini.normal("head.w", (cfg.n_classes, cfg.d_model), np.sqrt(1.0 / cfg.d_model))
    head_b = ini.const((cfg.n_classes,), 0.0)
    model = Q2LModel(cfg, backbone, proj_w, proj_b, label_embed, encoders, decoders, head_w, head_b)
    model.init_std = ini.stds
    return model


def init_baseline(config: ModelConfig, seed: int = 0) -> PooledBaseline:
    """Pooled baseline; the backbone draw matches :func:`init_model` for the same seed."""
    config.validate()
    ini = _Init(seed)
    backbone = _init_backbone(config, ini)
    head_w = ini.normal("head.w", (config.d_backbone, config.n_classes), np.sqrt(1.0 / config.d_backbone))
    model = PooledBaseline(config, backbone, head_w, ini.const((config.n_classes,), 0.0))
    model.init_std = ini.stds
    return model


# -- checkpoints ---------------------------------------------------------------

CKPT_MAGIC = b"Q2LC"
CKPT_VERSION = 1


def save_checkpoint(path, model: _Module, extra: dict | None = None) -> None:
    """Write a manifest header (name, offset, shape) followed by tensor blobs.

    Layout: ``b"Q2LC" | version u32 | manifest_len u32 | manifest JSON | blobs``;
    offsets are relative to the first blob byte.
    """
    blobs, entries, offset = [], [], 0
    for name, t in model.named_parameters().items():
        blob = tensor_to_bytes(t)
        entries.append({"name": name, "offset": offset, "nbytes": len(blob), "shape": list(t.shape)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {"kind": model.kind, "config": model.config.to_dict(), "tensors": entries}
    if extra:
        manifest["extra"] = extra
    head = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(manifest, {name: array})`` from a checkpoint file."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 12 or buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        manifest = json.loads(buf[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt manifest ({exc})") from None
    base = 12 + hlen
    tensors = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(buf):
            raise FormatError(f"{path}: tensor {e['name']} truncated")
        t = tensor_from_bytes(buf[start : start + e["nbytes"]])
        if list(t.shape) != e["shape"]:
            raise FormatError(f"{path}: tensor {e['name']} shape {t.shape} != manifest {e['shape']}")
        tensors[e["name"]] = t.data
    return manifest, tensors


def load_checkpoint(path) -> _Module:
    manifest, tensors = read_checkpoint(path)
    cfg = ModelConfig.from_dict(manifest["config"])
    kind = manifest.get("kind")
    if kind == "q2l":
        model = init_model(cfg, seed=0)
    elif kind == "baseline":
        model = init_baseline(cfg, seed=0)
    else:
        raise FormatError(f"{path}: unknown model kind {kind!r}")
    dtypes = {a.dtype for a in tensors.values()}
    if len(dtypes) == 1:
        for p in model.parameters():
            p.data = p.data.astype(next(iter(dtypes)))
    model.load_state_dict(tensors)
    model.manifest = manifest
    return model
