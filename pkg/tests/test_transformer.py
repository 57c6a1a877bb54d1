import numpy as np
import pytest

from dfam_detr import tensor as T
from dfam_detr.backbone import FeaturePyramid
from dfam_detr.config import ModelConfig, toy_config
from dfam_detr.gradcheck import INVARIANT_PARAMS, module_check
from dfam_detr.tensor import Tensor, grad_check
from dfam_detr.transformer import (Decoder, DetectionHeads, Encoder, MSDeformAttn, QuerySet, SelfAttention,
                                   build_model, decoder_forward, encoder_forward, flatten_pyramid,
                                   ms_deform_attn, ms_deform_attn_core)

from oracles import ms_deform_attn_loops


def pyramid(seed, d, shapes, batch=1):
    r = np.random.default_rng(seed)
    return FeaturePyramid([Tensor(r.standard_normal((batch, d, h, w)).astype(T.get_dtype())) for h, w in shapes])


def test_core_matches_loop_oracle(f64):
    r = np.random.default_rng(0)
    shapes = [(4, 5), (3, 2)]
    s = sum(h * w for h, w in shapes)
    value = r.standard_normal((2, s, 2, 3))
    loc = r.uniform(-0.2, 1.2, (2, 4, 2, 2, 3, 2))
    attn = r.uniform(0, 1, (2, 4, 2, 2, 3))
    got = ms_deform_attn_core(Tensor(value), Tensor(loc), Tensor(attn), shapes).data
    assert np.allclose(got, ms_deform_attn_loops(value, loc, attn, shapes), atol=1e-12)


def test_zero_offset_weights_sample_at_reference_with_uniform_attention(f64):
    r = np.random.default_rng(1)
    mod = MSDeformAttn(r, 16, 3, 4, 2)
    mod.sampling_offsets.bias.data[...] = 0
    shapes = [(6, 6), (3, 3), (2, 2)]
    query = Tensor(r.standard_normal((2, 5, 16)))
    ref = Tensor(r.uniform(0.05, 0.95, (2, 5, 2)))
    loc, attn = mod.sample(query, ref, shapes)
    assert np.array_equal(loc.data, np.broadcast_to(ref.data[:, :, None, None, None, :], loc.shape))
    assert np.allclose(attn.data, 1.0 / 6)


def test_default_offsets_fan_out_from_reference(f64):
    r = np.random.default_rng(2)
    mod = MSDeformAttn(r, 16, 2, 4, 3)
    shapes = [(8, 8), (4, 4)]
    query = Tensor(r.standard_normal((1, 2, 16)))
    ref = Tensor(np.full((1, 2, 2), 0.5))
    loc, _ = mod.sample(query, ref, shapes)
    shift = (loc.data - 0.5)[0, 0, :, 0] * 8  # pixels at level 0, [heads, points, 2]
    dist = np.abs(shift).max(-1)
    assert np.allclose(dist, np.arange(1, 4)[None, :].repeat(4, 0))


def test_attention_weights_normalized_per_head():
    r = np.random.default_rng(3)
    mod = MSDeformAttn(r, 16, 4, 4, 4)
    mod.attention_weights.weight.data = r.normal(0, 1, mod.attention_weights.weight.shape).astype(T.get_dtype())
    query = Tensor(r.standard_normal((2, 7, 16)).astype(T.get_dtype()))
    _, attn = mod.sample(query, Tensor(np.full((2, 7, 2), 0.3, dtype=T.get_dtype())), [(4, 4)] * 4)
    a = attn.data
    assert np.all((a > 0) & (a < 1))
    assert np.all(np.abs(a.sum(axis=(-1, -2)) - 1) < 1e-6)


def test_reference_outside_unit_square_rejected():
    mod = MSDeformAttn(np.random.default_rng(0), 8, 1, 2, 2)
    with pytest.raises(ValueError):
        mod.sample(Tensor(np.zeros((1, 1, 8))), Tensor(np.full((1, 1, 2), 1.5)), [(4, 4)])


def test_memory_length_for_512_input():
    pyr = pyramid(0, 8, [(64, 64), (32, 32), (16, 16), (8, 8)])
    flat, shapes = flatten_pyramid(pyr)
    assert flat.shape == (1, 5440, 8)


def test_zero_layer_encoder_returns_embedded_sequence():
    cfg = ModelConfig(d_model=8, heads=2, enc_layers=0)
    enc = Encoder(np.random.default_rng(0), cfg)
    pyr = pyramid(1, 8, [(4, 4), (2, 2), (2, 1), (1, 1)])
    src, _, _ = enc.embed(pyr)
    assert np.array_equal(encoder_forward(pyr, enc).data, src.data)


def test_encoder_is_batch_permutation_consistent():
    cfg = ModelConfig(d_model=16, heads=2)
    enc = Encoder(np.random.default_rng(2), cfg)
    pyr = pyramid(3, 16, [(4, 4), (2, 2), (2, 2), (1, 1)], batch=3)
    out = encoder_forward(pyr, enc).data
    perm = [2, 0, 1]
    permuted = FeaturePyramid([Tensor(l.data[perm]) for l in pyr.levels])
    assert np.allclose(encoder_forward(permuted, enc).data, out[perm], atol=1e-6)


def test_decoder_emits_every_layer_with_bounded_boxes():
    cfg = ModelConfig(d_model=16, heads=2, dec_layers=3, queries=7, num_classes=2)
    r = np.random.default_rng(4)
    cfg.levels = 3
    dec = Decoder(r, cfg)
    memory = Tensor(r.standard_normal((2, 21, 16)).astype(T.get_dtype()))
    shapes = [(4, 4), (2, 2), (1, 1)]
    outs = decoder_forward(memory, shapes, QuerySet(r, 7, 16), DetectionHeads(r, 16, 2, 0.01), dec)
    assert len(outs) == 3
    for o in outs:
        assert o.logits.shape == (2, 7, 2) and o.boxes.shape == (2, 7, 4)
        assert np.all((o.boxes.data >= 0) & (o.boxes.data <= 1))


def test_fresh_heads_put_box_centers_on_reference_points():
    r = np.random.default_rng(5)
    heads = DetectionHeads(r, 8, 1, 0.01)
    qs = QuerySet(r, 4, 8)
    out = heads(Tensor(r.standard_normal((1, 4, 8))), qs.ref_logit)
    assert np.allclose(out.boxes.data[0, :, :2], qs.reference_points().data)
    assert np.allclose(out.boxes.data[0, :, 2:], 0.5)
    assert np.allclose(T.sigmoid(heads.class_embed.bias).data, 0.01)


def test_shared_key_bias_has_zero_gradient(f64):
    r = np.random.default_rng(6)
    sa = SelfAttention(r, 8, 2)
    x = Tensor(r.standard_normal((2, 3, 8)), requires_grad=True)
    sa(x, x, x).backward(r.standard_normal((2, 3, 8)))
    assert np.abs(sa.k_proj.bias.grad).max() < 1e-12
    assert np.abs(sa.q_proj.bias.grad).max() > 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_deformable_attention_gradients(f64, seed):
    r = np.random.default_rng(10 + seed)
    mod = MSDeformAttn(r, 8, 2, 2, 2)
    mod.sampling_offsets.weight.data = r.normal(0, 0.3, mod.sampling_offsets.weight.shape)
    mod.attention_weights.weight.data = r.normal(0, 0.5, mod.attention_weights.weight.shape)
    shapes = [(3, 4), (2, 2)]
    pyr_arrays = [r.standard_normal((1, 8, h, w)) for h, w in shapes]
    q = r.standard_normal((1, 3, 8))
    ref = r.uniform(0.1, 0.9, (1, 3, 2))

    def fn(query, reference, l0, l1):
        return ms_deform_attn(query, reference, FeaturePyramid([l0, l1]), mod)

    assert grad_check(fn, [q, ref, *pyr_arrays]) < 1e-4
    assert module_check(mod, lambda query: mod(query, Tensor(ref), flatten_pyramid(
        FeaturePyramid([Tensor(a) for a in pyr_arrays]))[0], shapes), [q]) < 1e-4


def test_decoder_end_to_end_gradient(f64):
    cfg = ModelConfig(d_model=32, heads=2, points=2, levels=2, dec_layers=1, queries=5,
                      dim_feedforward=32, num_classes=2)
    r = np.random.default_rng(20)
    dec = Decoder(r, cfg)
    qs = QuerySet(r, 5, 32)
    heads = DetectionHeads(r, 32, 2, 0.01)
    for p in heads.parameters():
        p.data = p.data + r.normal(0, 0.1, p.shape)
    shapes = [(3, 3), (2, 2)]
    memory = r.standard_normal((1, 13, 32))

    names = [n for n, _ in dec.named_parameters() if n.split(".", 2)[-1] not in INVARIANT_PARAMS]

    def run(mem):
        out = decoder_forward(mem, shapes, qs, heads, dec)[0]
        return T.concat([out.logits, out.boxes], axis=-1)

    assert module_check(dec, run, [memory], names, sample=400) < 1e-4
    assert module_check(qs, run, [memory]) < 1e-4


def test_full_model_shapes_and_determinism():
    cfg = toy_config()
    a = build_model(cfg)
    b = build_model(cfg)
    x = Tensor(np.random.default_rng(0).standard_normal((1, 3, 128, 128)).astype(T.get_dtype()))
    with T.no_grad():
        oa, ob = a(x), b(x)
    assert len(oa) == cfg.model.dec_layers
    assert oa[-1].logits.shape == (1, cfg.model.queries, cfg.model.num_classes)
    assert oa[-1].boxes.data.tobytes() == ob[-1].boxes.data.tobytes()
    levels = a.pyramid(x).levels
    assert [l.shape[1] for l in levels] == [cfg.model.d_model] * 4
