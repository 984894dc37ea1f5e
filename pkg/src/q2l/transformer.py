"""Multi-head attention, FFN, 2-D sine/cosine encodings and the decoder layer.

All functions accept either unbatched (n×d) or batched (B×n×d) inputs;
parameters are shared across the batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import numcore as nc
from .numcore import Tensor


@dataclass
class MultiHeadParams:
    n_heads: int
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_q: Tensor | None = None
    b_k: Tensor | None = None
    b_v: Tensor | None = None
    b_o: Tensor | None = None

    def __post_init__(self):
        d = self.w_q.shape[0]
        if self.n_heads < 1 or d % self.n_heads:
            raise ValueError(f"model width {d} not divisible by n_heads={self.n_heads}")
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, name).shape != (d, d):
                raise ValueError(f"{name} must be {d}×{d}, got {getattr(self, name).shape}")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    def named_tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)
                if f.name != "n_heads" and getattr(self, f.name) is not None}


@dataclass
class FFNParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named_tensors(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class NormParams:
    gain: Tensor
    bias: Tensor

    def named_tensors(self) -> dict[str, Tensor]:
        return {"gain": self.gain, "bias": self.bias}


@dataclass
class DecoderLayerParams:
    self_attn: MultiHeadParams
    cross_attn: MultiHeadParams
    ffn: FFNParams
    norm1: NormParams
    norm2: NormParams
    norm3: NormParams
    eps: float = 1e-5

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for part in ("self_attn", "cross_attn", "ffn", "norm1", "norm2", "norm3"):
            for k, v in getattr(self, part).named_tensors().items():
                out[f"{part}.{k}"] = v
        return out


@dataclass
class EncoderLayerParams:
    self_attn: MultiHeadParams
    ffn: FFNParams
    norm1: NormParams
    norm2: NormParams
    eps: float = 1e-5

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for part in ("self_attn", "ffn", "norm1", "norm2"):
            for k, v in getattr(self, part).named_tensors().items():
                out[f"{part}.{k}"] = v
        return out


@dataclass(frozen=True)
class SpatialPositionEncoding:
    """H×W grid of d-dim encodings: first d/2 channels rows, last d/2 columns."""

    h: int
    w: int
    d: int
    temperature: float
    table: np.ndarray = field(repr=False, compare=False)

    def flat(self, dtype=None) -> Tensor:
        """The encoding as an (H·W)×d tensor, row-major over the grid."""
        arr = self.table.reshape(self.h * self.w, self.d)
        return Tensor(arr, dtype=dtype or nc.get_default_dtype())


def sincos_2d(h: int, w: int, d: int, temperature: float = 10000.0) -> SpatialPositionEncoding:
    """DETR-style 2-D encoding on integer grid coordinates.

    Within each half, channel pair (2i, 2i+1) holds sin/cos of
    ``pos / temperature**(2i / (d/2))``.
    """
    if h < 1 or w < 1:
        raise ValueError(f"grid extents must be positive, got {h}×{w}")
    if d < 4 or d % 4:
        raise ValueError(f"encoding width {d} must be a positive multiple of 4")
    half = d // 2
    i = np.arange(half // 2, dtype=np.float64)
    freq = 1.0 / temperature ** (2.0 * i / half)

    def axis_code(n):
        ang = np.arange(n, dtype=np.float64)[:, None] * freq[None, :]
        code = np.empty((n, half))
        code[:, 0::2] = np.sin(ang)
        code[:, 1::2] = np.cos(ang)
        return code

    rows, cols = axis_code(h), axis_code(w)
    table = np.concatenate(
        [np.broadcast_to(rows[:, None, :], (h, w, half)), np.broadcast_to(cols[None, :, :], (h, w, half))],
        axis=-1,
    )
    return SpatialPositionEncoding(h, w, d, float(temperature), np.ascontiguousarray(table))


def _linear(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    y = nc.matmul(x, w)
    return y if b is None else y + b


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    bsz, n, d = x.shape
    return nc.transpose(nc.reshape(x, (bsz, n, n_heads, d // n_heads)), (0, 2, 1, 3))


def multi_head_attention(query: Tensor, key: Tensor, value: Tensor, params: MultiHeadParams):
    """Scaled dot-product attention over ``n_heads`` subspaces, no masking.

    Returns ``(out, weights)`` with weights shaped heads×n_q×n_k (batched:
    B×heads×n_q×n_k).
    """
    batched = query.ndim == 3
    if not batched:
        query, key, value = (nc.reshape(t, (1,) + t.shape) for t in (query, key, value))
    d = params.d_model
    if query.ndim != 3 or key.ndim != 3 or value.ndim != 3:
        raise ValueError("query/key/value must all be n×d or all B×n×d")
    if query.shape[-1] != d or key.shape[-1] != d or value.shape[-1] != d:
        raise ValueError(f"attention widths {query.shape}, {key.shape}, {value.shape} must equal {d}")
    if key.shape[:2] != value.shape[:2] or key.shape[0] != query.shape[0]:
        raise ValueError(f"key {key.shape} and value {value.shape} must share batch and n_k")
    h = params.n_heads
    dh = d // h
    bsz, nq, _ = query.shape
    q = _split_heads(_linear(query, params.w_q, params.b_q), h)
    k = _split_heads(_linear(key, params.w_k, params.b_k), h)
    v = _split_heads(_linear(value, params.w_v, params.b_v), h)
    scores = nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    weights = nc.softmax(scores, axis=-1)
    ctx = nc.matmul(weights, v)  # B,h,nq,dh
    ctx = nc.reshape(nc.transpose(ctx, (0, 2, 1, 3)), (bsz, nq, d))
    out = _linear(ctx, params.w_o, params.b_o)
    if not batched:
        out = nc.reshape(out, out.shape[1:])
        weights = nc.reshape(weights, weights.shape[1:])
    return out, weights


def ffn(x: Tensor, params: FFNParams) -> Tensor:
    d = x.shape[-1]
    if params.w1.shape[0] != d or params.w2.shape[1] != d or params.w1.shape[1] != params.w2.shape[0]:
        raise ValueError(f"ffn weights {params.w1.shape}, {params.w2.shape} do not fit width {d}")
    hidden = nc.relu(_linear(x, params.w1, params.b1))
    return _linear(hidden, params.w2, params.b2)


def _norm(x: Tensor, p: NormParams, eps: float) -> Tensor:
    return nc.layer_norm(x, p.gain, p.bias, eps)


def decoder_layer(
    q_prev: Tensor,
    f: Tensor,
    pe_spatial: SpatialPositionEncoding | Tensor,
    pe_query: Tensor,
    params: DecoderLayerParams,
    skip_self_attn: bool = False,
):
    """One post-norm decoder layer updating label queries from image features.

    Position encodings are added to queries and keys only; attention values
    are always the raw ``q_prev`` / ``f``.  Returns ``(q_next, cross_maps)``.
    """
    pe_s = pe_spatial.flat(f.dtype) if isinstance(pe_spatial, SpatialPositionEncoding) else pe_spatial
    if f.shape[-2:] != pe_s.shape:
        raise ValueError(f"feature rows {f.shape} do not match spatial encoding {pe_s.shape}")
    if q_prev.shape[-2:] != pe_query.shape:
        raise ValueError(f"queries {q_prev.shape} do not match query encoding {pe_query.shape}")
    if f.ndim != q_prev.ndim:
        raise ValueError("queries and features must both be batched or both unbatched")
    if q_prev.ndim == 3 and q_prev.shape[0] != f.shape[0]:
        raise ValueError(f"batch extents differ: {q_prev.shape} vs {f.shape}")

    q = q_prev
    if not skip_self_attn:
        qp = q + pe_query
        sa, _ = multi_head_attention(qp, qp, q, params.self_attn)
        q = _norm(q + sa, params.norm1, params.eps)
    ca, cross_maps = multi_head_attention(q + pe_query, f + pe_s, f, params.cross_attn)
    q = _norm(q + ca, params.norm2, params.eps)
    q = _norm(q + ffn(q, params.ffn), params.norm3, params.eps)
    return q, cross_maps


def encoder_layer(f: Tensor, pe_spatial: SpatialPositionEncoding | Tensor, params: EncoderLayerParams) -> Tensor:
    """Post-norm self-attention over spatial features (optional pre-decoder stage)."""
    pe_s = pe_spatial.flat(f.dtype) if isinstance(pe_spatial, SpatialPositionEncoding) else pe_spatial
    fp = f + pe_s
    sa, _ = multi_head_attention(fp, fp, f, params.self_attn)
    x = _norm(f + sa, params.norm1, params.eps)
    return _norm(x + ffn(x, params.ffn), params.norm2, params.eps)
