"""Finite-difference verification of every hand-written backward, grouped by scope."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .config import LossConfig, ModelConfig
from .deform import DeformConv2d, deform_conv2d, deform_conv2d_op
from .dfam import DFAM
from .matcher import GroundTruthSet, set_loss
from .nn import Module
from .tensor import Tensor, grad_check
from .transformer import (DecoderLayer, DetectionHeads, EncoderLayer, LayerOutput, MSDeformAttn,
                          ms_deform_attn_core)

TOLERANCE = 1e-4
INVARIANT_PARAMS = ("self_attn.k_proj.bias",)
SCOPES = ("conv", "deform", "dfam", "attention", "heads", "loss", "layers")


@dataclass
class CheckResult:
    scope: str
    name: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < TOLERANCE)


def _rng(tag: int) -> np.random.Generator:
    return np.random.default_rng([tag, 2024])


def _resolve(module: Module, dotted: str):
    *path, leaf = dotted.split(".")
    obj = module
    for part in path:
        obj = obj[int(part)] if isinstance(obj, list) else getattr(obj, part)
    return obj, leaf


def module_check(module: Module, forward: Callable[..., Tensor], inputs: list[np.ndarray],
                 names: list[str] | None = None, **kw) -> float:
    """grad_check over ``inputs`` plus the named parameters of ``module``.

    ``forward(*input_tensors)`` runs the module; parameters are swapped for
    the tensors grad_check perturbs and restored afterwards.
    """
    params = dict(module.named_parameters())
    names = list(params) if names is None else names
    slots = [_resolve(module, n) for n in names]
    originals = [params[n] for n in names]
    n_in = len(inputs)

    def fn(*ts):
        for (owner, leaf), t in zip(slots, ts[n_in:]):
            setattr(owner, leaf, t)
        return forward(*ts[:n_in])

    try:
        return grad_check(fn, [*inputs, *(p.data for p in originals)], **kw)
    finally:
        for (owner, leaf), p in zip(slots, originals):
            setattr(owner, leaf, p)


# ---------------------------------------------------------------------------------
# per-scope checks
# ---------------------------------------------------------------------------------

def _conv_checks():
    r = _rng(1)
    x = r.standard_normal((2, 3, 7, 6))
    yield "conv2d 3x3 pad 1", lambda: grad_check(
        lambda a, w, b: T.conv2d(a, w, b, 1, 1), [x, r.standard_normal((4, 3, 3, 3)), r.standard_normal(4)])
    yield "conv2d 3x3 stride 2", lambda: grad_check(
        lambda a, w, b: T.conv2d(a, w, b, 2, 1), [x, r.standard_normal((4, 3, 3, 3)), r.standard_normal(4)])
    yield "conv2d 3x3 dilation 2", lambda: grad_check(
        lambda a, w: T.conv2d(a, w, None, 1, 2, 2), [x, r.standard_normal((2, 3, 3, 3))])
    yield "conv2d 1x1", lambda: grad_check(
        lambda a, w, b: T.conv2d(a, w, b), [x, r.standard_normal((5, 3, 1, 1)), r.standard_normal(5)])
    yield "conv2d 7x7 pad 3", lambda: grad_check(
        lambda a, w: T.conv2d(a, w, None, 1, 3), [r.standard_normal((1, 2, 6, 5)), r.standard_normal((1, 2, 7, 7))])


def _deform_inputs(r, stride=1):
    x = r.standard_normal((2, 3, 6, 7))
    ho = (6 + 2 - 3) // stride + 1
    wo = (7 + 2 - 3) // stride + 1
    off = r.uniform(-1.5, 1.5, (2, 18, ho, wo))
    return x, off, r.standard_normal((4, 3, 3, 3)), r.standard_normal(4)


def _deform_checks():
    r = _rng(2)
    x, off, w, b = _deform_inputs(r)

    def op(stride):
        return lambda a, o, ww, bb: deform_conv2d_op(a, o, ww, bb, stride, 1)

    yield "deform_conv2d input path", lambda: grad_check(
        lambda a: deform_conv2d_op(a, Tensor(off), Tensor(w), Tensor(b), 1, 1), [x])
    yield "deform_conv2d offset path", lambda: grad_check(
        lambda o: deform_conv2d_op(Tensor(x), o, Tensor(w), Tensor(b), 1, 1), [off])
    yield "deform_conv2d weight path", lambda: grad_check(
        lambda ww, bb: deform_conv2d_op(Tensor(x), Tensor(off), ww, bb, 1, 1), [w, b])
    xs, offs, ws, bs = _deform_inputs(r, stride=2)
    yield "deform_conv2d stride 2 (all)", lambda: grad_check(op(2), [xs, offs, ws, bs])
    layer = DeformConv2d(r, 3, 4)
    layer.offset_weight.data = r.normal(0, 0.3, layer.offset_weight.shape)
    layer.offset_bias.data = r.normal(0, 0.5, layer.offset_bias.shape)
    yield "deform_conv2d with offset predictor", lambda: module_check(
        layer, lambda a: deform_conv2d(a, layer), [x])


def _dfam_checks():
    r = _rng(3)
    block = DFAM(r, 8, reduction=4)
    for p in block.parameters():
        p.data = p.data + r.normal(0, 0.2, p.shape)
    x = r.standard_normal((2, 8, 5, 4))
    yield "spatial attention", lambda: module_check(block.spatial, block.spatial, [x])
    yield "channel attention", lambda: module_check(block.channel, block.channel, [x])
    yield "dfam (spatial then channel)", lambda: module_check(block, block, [x])


def _attention_checks():
    r = _rng(4)
    shapes = [(4, 5), (2, 3)]
    s = sum(h * w for h, w in shapes)
    value = r.standard_normal((2, s, 2, 3))
    loc = r.uniform(-0.1, 1.1, (2, 3, 2, 2, 2, 2))
    attn = r.dirichlet(np.ones(4), (2, 3, 2)).reshape(2, 3, 2, 2, 2)
    yield "ms_deform_attn core", lambda: grad_check(
        lambda v, lo, a: ms_deform_attn_core(v, lo, a, shapes), [value, loc, attn])
    mod = MSDeformAttn(r, 8, 2, 2, 2)
    mod.sampling_offsets.weight.data = r.normal(0, 0.3, mod.sampling_offsets.weight.shape)
    mod.attention_weights.weight.data = r.normal(0, 0.5, mod.attention_weights.weight.shape)
    query = r.standard_normal((2, 3, 8))
    ref = r.uniform(0.1, 0.9, (2, 3, 2))
    flat = r.standard_normal((2, s, 8))
    yield "ms_deform_attn module", lambda: module_check(
        mod, lambda q, rf, f: mod(q, rf, f, shapes), [query, ref, flat])


def _heads_checks():
    r = _rng(5)
    heads = DetectionHeads(r, 8, 2, 0.01)
    for p in heads.parameters():
        p.data = p.data + r.normal(0, 0.3, p.shape)
    hs = r.standard_normal((2, 4, 8))
    ref = r.uniform(-2, 2, (4, 2))
    yield "class head", lambda: module_check(heads, lambda h, rf: heads(h, rf).logits, [hs, ref])
    yield "box head", lambda: module_check(heads, lambda h, rf: heads(h, rf).boxes, [hs, ref])


def _loss_checks():
    r = _rng(6)
    cfg = LossConfig()
    gts = [GroundTruthSet(np.array([0, 1]), np.array([[0.3, 0.4, 0.2, 0.3], [0.7, 0.6, 0.3, 0.1]]),
                          np.zeros(2, bool)),
           GroundTruthSet(np.array([1]), np.array([[0.5, 0.5, 0.4, 0.4]]), np.zeros(1, bool))]
    logits = [r.standard_normal((2, 5, 2)) for _ in range(2)]
    boxes = [np.concatenate([r.uniform(0.2, 0.8, (2, 5, 2)), r.uniform(0.1, 0.4, (2, 5, 2))], -1)
             for _ in range(2)]
    with T.no_grad():
        _, _, matches = set_loss([LayerOutput(Tensor(l), Tensor(b)) for l, b in zip(logits, boxes)],
                                 gts, cfg)

    def loss(l0, b0, l1, b1):
        return set_loss([LayerOutput(l0, b0), LayerOutput(l1, b1)], gts, cfg, matches)[0]

    yield "set_loss (focal + L1 + GIoU, two layers)", lambda: grad_check(
        loss, [logits[0], boxes[0], logits[1], boxes[1]])


def _layer_checks():
    r = _rng(7)
    x = r.standard_normal((2, 8, 3, 4))
    yield "group_norm", lambda: grad_check(
        lambda a, w, b: T.group_norm(a, 4, w, b), [x, r.standard_normal(8), r.standard_normal(8)])
    y = r.standard_normal((2, 3, 8))
    yield "layer_norm", lambda: grad_check(
        lambda a, w, b: T.layer_norm(a, w, b), [y, r.standard_normal(8), r.standard_normal(8)])
    yield "softmax", lambda: grad_check(lambda a: T.softmax(a, axis=-1), [y])
    yield "max/avg pools", lambda: grad_check(
        lambda a: T.concat([T.pool_channel(a, "max"), T.pool_channel(a, "avg")], axis=1)
        + T.pool_spatial(a, "max").sum() + T.pool_spatial(a, "avg").sum(), [x])
    cfg = ModelConfig(d_model=8, heads=2, points=2, levels=2, dim_feedforward=16)
    shapes = [(3, 2), (2, 2)]
    s = sum(h * w for h, w in shapes)
    enc = EncoderLayer(r, cfg)
    src = r.standard_normal((1, s, 8))
    pos = r.standard_normal((1, s, 8))
    ref = r.uniform(0.1, 0.9, (1, s, 2))
    yield "encoder layer", lambda: module_check(
        enc, lambda a: enc(a, Tensor(pos), Tensor(ref), shapes), [src], sample=300)
    dec = DecoderLayer(r, cfg)
    tgt = r.standard_normal((1, 3, 8))
    qpos = r.standard_normal((1, 3, 8))
    qref = r.uniform(0.1, 0.9, (1, 3, 2))
    # softmax cancels a shared key bias, so its gradient is exactly zero and
    # a relative error there only measures finite-difference noise
    names = [n for n, _ in dec.named_parameters() if n not in INVARIANT_PARAMS]
    yield "decoder layer", lambda: module_check(
        dec, lambda t, m: dec(t, Tensor(qpos), Tensor(qref), m, shapes), [tgt, src], names,
        sample=300)


_SCOPE_BUILDERS = {
    "conv": _conv_checks,
    "deform": _deform_checks,
    "dfam": _dfam_checks,
    "attention": _attention_checks,
    "heads": _heads_checks,
    "loss": _loss_checks,
    "layers": _layer_checks,
}


def run_suite(scope: str | None = None, echo: Callable[[str], None] | None = None) -> list[CheckResult]:
    """Run every check in ``scope`` (all scopes when None) in 64-bit mode."""
    if scope is not None and scope not in _SCOPE_BUILDERS:
        raise ValueError(f"unknown scope {scope!r}; choose from {', '.join(SCOPES)}")
    results = []
    with T.precision("float64"):
        for name in ([scope] if scope else SCOPES):
            for label, check in _SCOPE_BUILDERS[name]():
                t0 = time.time()
                try:
                    err = float(check())
                except T.GradCheckError:
                    err = float("inf")
                res = CheckResult(name, label, err, time.time() - t0)
                results.append(res)
                if echo:
                    echo(format_row(res))
    return results


def format_row(r: CheckResult) -> str:
    return f"{r.scope:<10} {r.name:<42} {r.error:>10.2e}  {'ok' if r.passed else 'FAIL'}"


def format_table(results: list[CheckResult]) -> str:
    head = f"{'scope':<10} {'op':<42} {'max rel err':>10}  status"
    return "\n".join([head, "-" * len(head), *(format_row(r) for r in results)])
