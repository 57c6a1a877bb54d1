"""Encoder/decoder with multi-scale deformable attention, object queries and FFN heads."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import Backbone, FeaturePyramid, PyramidNeck
from .config import BackboneConfig, ModelConfig
from .deform import BilinearGather
from .nn import MLP, LayerNorm, Linear, Module
from .tensor import Parameter, Tensor, make_op


# ---------------------------------------------------------------------------------
# sampling core
# ---------------------------------------------------------------------------------

def ms_deform_attn_core_forward(value: np.ndarray, locations: np.ndarray, attention: np.ndarray,
                                shapes: list[tuple[int, int]]):
    """Attention-weighted bilinear reads of every level.

    value      [B, S, M, Dh]   flattened levels, S = sum(H_l * W_l)
    locations  [B, Q, M, L, K, 2]  normalized (x, y); pixel = loc * size - 0.5
    attention  [B, Q, M, L, K]
    returns    [B, Q, M, Dh] and a cache for the backward
    """
    b, s, m, dh = value.shape
    _, q, _, n_levels, k, _ = locations.shape
    out = np.zeros((b, q, m, dh), dtype=value.dtype)
    cache = []
    start = 0
    for lvl, (h, w) in enumerate(shapes):
        hw = h * w
        table = value[:, start:start + hw].reshape(b * hw * m, dh)
        px = locations[:, :, :, lvl, :, 0] * w - 0.5
        py = locations[:, :, :, lvl, :, 1] * h - 0.5
        base = (np.arange(b) * hw * m)[:, None, None, None] + np.arange(m)[None, None, :, None]
        gather = BilinearGather(py, px, h, w, base, m, b * hw * m, value.dtype)
        sampled = gather.forward(table).reshape(b, q, m, k, dh)
        out += np.einsum("bqmk,bqmkd->bqmd", attention[:, :, :, lvl], sampled)
        cache.append((gather, table, sampled, start, hw, h, w))
        start += hw
    if start != s:
        raise T.ShapeError(f"value length {s} != sum of level sizes {start}")
    return out, cache


def ms_deform_attn_core_backward(grad_out: np.ndarray, cache, value_shape, locations: np.ndarray,
                                 attention: np.ndarray):
    b, s, m, dh = value_shape
    g_value = np.zeros(value_shape, dtype=grad_out.dtype)
    g_loc = np.zeros_like(locations)
    g_attn = np.zeros_like(attention)
    for lvl, (gather, table, sampled, start, hw, h, w) in enumerate(cache):
        g_attn[:, :, :, lvl] = np.einsum("bqmd,bqmkd->bqmk", grad_out, sampled)
        g_sampled = attention[:, :, :, lvl, :, None] * grad_out[:, :, :, None, :]
        g_table, g_py, g_px = gather.backward(g_sampled.reshape(-1, dh), table)
        g_value[:, start:start + hw] = g_table.reshape(b, hw, m, dh)
        shape = g_loc.shape[:3] + (g_loc.shape[4],)
        g_loc[:, :, :, lvl, :, 0] = g_px.reshape(shape) * w
        g_loc[:, :, :, lvl, :, 1] = g_py.reshape(shape) * h
    return g_value, g_loc, g_attn


def ms_deform_attn_core(value: Tensor, locations: Tensor, attention: Tensor,
                        shapes: list[tuple[int, int]]) -> Tensor:
    out, cache = ms_deform_attn_core_forward(value.data, locations.data, attention.data, shapes)

    def backward(g):
        return ms_deform_attn_core_backward(g, cache, value.shape, locations.data, attention.data)

    return make_op(out, (value, locations, attention), backward)


class MSDeformAttn(Module):
    def __init__(self, rng, d_model: int, levels: int, heads: int, points: int):
        if d_model % heads:
            raise ValueError("d_model must be divisible by heads")
        self.d_model, self.levels, self.heads, self.points = d_model, levels, heads, points
        self.sampling_offsets = Linear(rng, d_model, heads * levels * points * 2)
        self.attention_weights = Linear(rng, d_model, heads * levels * points)
        self.value_proj = Linear(rng, d_model, d_model)
        self.output_proj = Linear(rng, d_model, d_model)
        self._reset_offsets()

    def _reset_offsets(self) -> None:
        # zero weights; biases fan the K points of each head out along that head's direction
        m, lv, k = self.heads, self.levels, self.points
        theta = np.arange(m) * (2.0 * math.pi / m)
        grid = np.stack([np.cos(theta), np.sin(theta)], -1)
        grid = grid / np.abs(grid).max(-1, keepdims=True)
        grid = np.tile(grid[:, None, None, :], (1, lv, k, 1)) * np.arange(1, k + 1)[None, None, :, None]
        self.sampling_offsets.weight.data[...] = 0
        self.sampling_offsets.bias.data[...] = grid.ravel()
        self.attention_weights.weight.data[...] = 0
        self.attention_weights.bias.data[...] = 0

    def sample(self, query: Tensor, reference: Tensor, shapes):
        """Sampling locations [B, Q, M, L, K, 2] and softmax weights [B, Q, M, L, K]."""
        b, q, _ = query.shape
        m, lv, k = self.heads, self.levels, self.points
        ref = reference.data
        if ref.min() < 0 or ref.max() > 1:
            raise ValueError("reference points must lie in [0, 1]^2")
        offsets = self.sampling_offsets(query).reshape(b, q, m, lv, k, 2)
        sizes = np.array([[w, h] for h, w in shapes], dtype=T.get_dtype())
        scale = Tensor((1.0 / sizes)[None, None, None, :, None, :])
        locations = reference.reshape(b, q, 1, 1, 1, 2) + offsets * scale
        logits = self.attention_weights(query).reshape(b, q, m, lv * k)
        attention = T.softmax(logits, axis=-1).reshape(b, q, m, lv, k)
        return locations, attention

    def forward(self, query: Tensor, reference: Tensor, input_flatten: Tensor, shapes) -> Tensor:
        b, q, d = query.shape
        s = input_flatten.shape[1]
        m = self.heads
        value = self.value_proj(input_flatten).reshape(b, s, m, d // m)
        locations, attention = self.sample(query, reference, shapes)
        out = ms_deform_attn_core(value, locations, attention, shapes)
        return self.output_proj(out.reshape(b, q, d))


def ms_deform_attn(queries: Tensor, reference_points: Tensor, pyramid: FeaturePyramid,
                   params: MSDeformAttn) -> Tensor:
    """Deformable attention of ``queries`` into the pyramid levels."""
    flat, shapes = flatten_pyramid(pyramid)
    return params(queries, reference_points, flat, shapes)


# ---------------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------------

def sine_position_embedding(h: int, w: int, d_model: int, temperature: float = 10000.0) -> np.ndarray:
    """Fixed 2-D sinusoidal encoding [H*W, d_model]: first half rows, second half columns."""
    npf = d_model // 2
    scale = 2 * math.pi
    y = (np.arange(h) + 0.5) / h * scale
    x = (np.arange(w) + 0.5) / w * scale
    dim_t = temperature ** (2 * (np.arange(npf) // 2) / npf)

    def encode(v):
        p = v[:, None] / dim_t
        return np.stack([np.sin(p[:, 0::2]), np.cos(p[:, 1::2])], axis=2).reshape(len(v), -1)

    py = np.repeat(encode(y), w, axis=0)
    px = np.tile(encode(x), (h, 1))
    return np.concatenate([py, px], axis=1)


def flatten_pyramid(pyramid: FeaturePyramid):
    parts, shapes = [], []
    for lvl in pyramid.levels:
        b, c, h, w = lvl.shape
        parts.append(lvl.transpose(0, 2, 3, 1).reshape(b, h * w, c))
        shapes.append((h, w))
    return T.concat(parts, axis=1), shapes


def encoder_reference_points(shapes) -> np.ndarray:
    """Normalized pixel centers of every flattened position, [S, 2] as (x, y)."""
    refs = []
    for h, w in shapes:
        ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
        refs.append(np.stack([xs.ravel(), ys.ravel()], -1))
    return np.concatenate(refs, 0)


class FFN(Module):
    def __init__(self, rng, d_model: int, hidden: int):
        self.linear1 = Linear(rng, d_model, hidden)
        self.linear2 = Linear(rng, hidden, d_model)

    def forward(self, x: Tensor) -> Tensor:
        return self.linear2(T.relu(self.linear1(x)))


class EncoderLayer(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.attn = MSDeformAttn(rng, cfg.d_model, cfg.levels, cfg.heads, cfg.points)
        self.norm1 = LayerNorm(cfg.d_model)
        self.ffn = FFN(rng, cfg.d_model, cfg.dim_feedforward)
        self.norm2 = LayerNorm(cfg.d_model)

    def forward(self, src: Tensor, pos: Tensor, reference: Tensor, shapes) -> Tensor:
        src = self.norm1(src + self.attn(src + pos, reference, src, shapes))
        return self.norm2(src + self.ffn(src))


class Encoder(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.cfg = cfg
        self.level_embed = Parameter(rng.normal(0.0, 1.0, (cfg.levels, cfg.d_model)))
        self.layers = [EncoderLayer(rng, cfg) for _ in range(cfg.enc_layers)]

    def embed(self, pyramid: FeaturePyramid):
        src, shapes = flatten_pyramid(pyramid)
        d = self.cfg.d_model
        pos = np.concatenate([sine_position_embedding(h, w, d) for h, w in shapes], 0)
        level = np.concatenate([np.full(h * w, i) for i, (h, w) in enumerate(shapes)])
        pos_t = Tensor(pos.astype(T.get_dtype())) + T.getitem(self.level_embed, level)
        return src, pos_t, shapes

    def forward(self, pyramid: FeaturePyramid) -> tuple[Tensor, list]:
        src, pos, shapes = self.embed(pyramid)
        b = src.shape[0]
        ref = np.broadcast_to(encoder_reference_points(shapes), (b, src.shape[1], 2))
        reference = Tensor(np.ascontiguousarray(ref, dtype=T.get_dtype()))
        for layer in self.layers:
            src = layer(src, pos, reference, shapes)
        return src, shapes


def encoder_forward(pyramid: FeaturePyramid, encoder: Encoder) -> Tensor:
    return encoder(pyramid)[0]


# ---------------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------------

class SelfAttention(Module):
    """Standard multi-head scaled dot-product attention among the queries."""

    def __init__(self, rng, d_model: int, heads: int):
        self.heads = heads
        self.q_proj = Linear(rng, d_model, d_model)
        self.k_proj = Linear(rng, d_model, d_model)
        self.v_proj = Linear(rng, d_model, d_model)
        self.out_proj = Linear(rng, d_model, d_model)

    def forward(self, query: Tensor, key: Tensor, value: Tensor) -> Tensor:
        b, q, d = query.shape
        m = self.heads
        dh = d // m
        qh = self.q_proj(query).reshape(b, q, m, dh).transpose(0, 2, 1, 3)
        kh = self.k_proj(key).reshape(b, -1, m, dh).transpose(0, 2, 3, 1)
        vh = self.v_proj(value).reshape(b, -1, m, dh).transpose(0, 2, 1, 3)
        weights = T.softmax((qh @ kh) * (1.0 / math.sqrt(dh)), axis=-1)
        out = (weights @ vh).transpose(0, 2, 1, 3).reshape(b, q, d)
        return self.out_proj(out)


class DecoderLayer(Module):
    def __init__(self, rng, cfg: ModelConfig):
        d = cfg.d_model
        self.self_attn = SelfAttention(rng, d, cfg.heads)
        self.norm1 = LayerNorm(d)
        self.cross_attn = MSDeformAttn(rng, d, cfg.levels, cfg.heads, cfg.points)
        self.norm2 = LayerNorm(d)
        self.ffn = FFN(rng, d, cfg.dim_feedforward)
        self.norm3 = LayerNorm(d)

    def forward(self, tgt, query_pos, reference, memory, shapes):
        q = tgt + query_pos
        tgt = self.norm1(tgt + self.self_attn(q, q, tgt))
        tgt = self.norm2(tgt + self.cross_attn(tgt + query_pos, reference, memory, shapes))
        return self.norm3(tgt + self.ffn(tgt))


class QuerySet(Module):
    """Learned content and positional embeddings plus 2-D reference points (sigmoid of a logit)."""

    def __init__(self, rng, queries: int, d_model: int):
        self.content = Parameter(rng.normal(0.0, 1.0, (queries, d_model)))
        self.pos = Parameter(rng.normal(0.0, 1.0, (queries, d_model)))
        self.ref_logit = Parameter(rng.uniform(-2.0, 2.0, (queries, 2)))

    def reference_points(self) -> Tensor:
        return T.sigmoid(self.ref_logit)


@dataclass
class LayerOutput:
    logits: Tensor  # [B, Q, C]
    boxes: Tensor  # [B, Q, 4] normalized (cx, cy, w, h)


class DetectionHeads(Module):
    """Class logits and sigmoid-bounded boxes; box centers are offsets from the reference point."""

    def __init__(self, rng, d_model: int, num_classes: int, prior_prob: float):
        self.class_embed = Linear(rng, d_model, num_classes)
        self.class_embed.bias.data[...] = -math.log((1 - prior_prob) / prior_prob)
        self.bbox_embed = MLP(rng, [d_model, d_model, d_model, 4])
        last = self.bbox_embed.layers[-1]
        last.weight.data[...] = 0
        last.bias.data[...] = 0

    def forward(self, hs: Tensor, ref_logit: Tensor) -> LayerOutput:
        q = ref_logit.shape[0]
        shift = T.concat([ref_logit, Tensor(np.zeros((q, 2), dtype=T.get_dtype()))], axis=1)
        boxes = T.sigmoid(self.bbox_embed(hs) + shift)
        return LayerOutput(self.class_embed(hs), boxes)


class Decoder(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.layers = [DecoderLayer(rng, cfg) for _ in range(cfg.dec_layers)]

    def forward(self, memory: Tensor, shapes, queries: QuerySet, heads: DetectionHeads) -> list[LayerOutput]:
        b = memory.shape[0]
        q, d = queries.content.shape
        zeros = Tensor(np.zeros((b, q, d), dtype=T.get_dtype()))
        tgt = zeros + queries.content
        query_pos = zeros + queries.pos
        reference = Tensor(np.zeros((b, q, 2), dtype=T.get_dtype())) + queries.reference_points()
        outputs = []
        for layer in self.layers:
            tgt = layer(tgt, query_pos, reference, memory, shapes)
            outputs.append(heads(tgt, queries.ref_logit))
        return outputs


def decoder_forward(memory: Tensor, shapes, queries: QuerySet, heads: DetectionHeads,
                    decoder: Decoder) -> list[LayerOutput]:
    return decoder(memory, shapes, queries, heads)


# ---------------------------------------------------------------------------------
# full detector
# ---------------------------------------------------------------------------------

class DFAMDETR(Module):
    def __init__(self, rng, backbone_cfg: BackboneConfig, model_cfg: ModelConfig):
        self.backbone_cfg, self.model_cfg = backbone_cfg, model_cfg
        self.backbone = Backbone(rng, backbone_cfg)
        self.neck = PyramidNeck(rng, backbone_cfg.widths, model_cfg.d_model)
        self.encoder = Encoder(rng, model_cfg)
        self.decoder = Decoder(rng, model_cfg)
        self.queries = QuerySet(rng, model_cfg.queries, model_cfg.d_model)
        self.heads = DetectionHeads(rng, model_cfg.d_model, model_cfg.num_classes,
                                    model_cfg.prior_prob)

    def pyramid(self, images: Tensor) -> FeaturePyramid:
        feats = self.backbone(images)
        top = feats.dfam if feats.dfam is not None else feats.c5
        return self.neck(feats.c3, feats.c4, feats.c5, top)

    def forward(self, images: Tensor) -> list[LayerOutput]:
        memory, shapes = self.encoder(self.pyramid(images))
        return self.decoder(memory, shapes, self.queries, self.heads)

    def backbone_parameter_names(self) -> set[str]:
        return {f"backbone.{n}" for n, _ in self.backbone.named_parameters()}


def build_model(cfg, seed: int | None = None) -> DFAMDETR:
    """Build from a :class:`RunConfig`; parameters are drawn in the active precision."""
    rng = np.random.Generator(np.random.Philox(key=cfg.train.seed if seed is None else seed))
    return DFAMDETR(rng, cfg.backbone, cfg.model)
