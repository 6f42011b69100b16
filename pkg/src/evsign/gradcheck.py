"""Finite-difference gradient suites for every differentiable component.

Each suite builds a scalar objective from seeded random inputs and
compares tape gradients against central differences. Primitive ops run
fully in float64 (tolerance 1e-4). End-to-end stacks are additionally
verified in float32: the float32 backward pass is compared against a
float64 central-difference oracle (step 1e-5), since differencing a
float32 forward directly is dominated by rounding and kink-crossing
noise. Tolerance 1e-3 covers float32 accumulation error.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_diff_check
from .heads import DecoderConfig, TranslationDecoder, cross_entropy, ctc_loss
from .layers import Module
from .sparse import SparseConvLayer, SparseTensor
from .temporal import TemporalAggregator, TemporalConfig, TokenSeq

TOL_PRIMITIVE = 1e-4   # float64, eps 1e-5
TOL_COMPOSITE = 1e-3   # float32, eps 1e-2


@dataclass
class SuiteResult:
    name: str
    max_err: float
    tol: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.max_err < self.tol


def _t(rng, *shape, positive=False) -> Tensor:
    data = rng.standard_normal(shape)
    if positive:
        data = np.abs(data) + 0.5
    return Tensor(data.astype(np.float64), requires_grad=True)


def _proj(rng, shape) -> Tensor:
    return Tensor(rng.standard_normal(shape).astype(np.float64))


def primitive_op_cases(seed: int = 11):
    """(name, f, params) triples covering the whole op catalog.

    Outputs are contracted to a scalar with a projection frozen at case
    construction so every FD evaluation sees the same objective.
    """
    rng = np.random.default_rng(seed)
    cases = []

    def case(name, params, fn):
        r = np.random.default_rng(seed + len(cases))
        with ad.no_grad():
            out_shape = fn(params).shape
        proj = _proj(r, out_shape)
        cases.append((name,
                      lambda ps, fn=fn, proj=proj: ad.sum(ad.mul(fn(ps), proj)),
                      params))

    case("add", [_t(rng, 3, 4), _t(rng, 3, 4)], lambda ps: ad.add(ps[0], ps[1]))
    case("add_broadcast", [_t(rng, 3, 4), _t(rng, 4)],
         lambda ps: ad.add(ps[0], ps[1]))
    case("sub", [_t(rng, 3, 4), _t(rng, 3, 4)], lambda ps: ad.sub(ps[0], ps[1]))
    case("mul", [_t(rng, 3, 4), _t(rng, 3, 4)], lambda ps: ad.mul(ps[0], ps[1]))
    case("div", [_t(rng, 3, 4), _t(rng, 3, 4, positive=True)],
         lambda ps: ad.div(ps[0], ps[1]))
    case("neg", [_t(rng, 5)], lambda ps: ad.neg(ps[0]))
    case("scalar_mul", [_t(rng, 3, 4)], lambda ps: ad.scalar_mul(ps[0], 0.37))
    case("pow_const", [_t(rng, 3, 4, positive=True)],
         lambda ps: ad.pow_const(ps[0], 1.7))
    case("exp", [_t(rng, 3, 4)], lambda ps: ad.exp(ps[0]))
    case("log", [_t(rng, 3, 4, positive=True)], lambda ps: ad.log(ps[0]))
    case("relu", [_t(rng, 4, 5)], lambda ps: ad.relu(ps[0]))
    case("matmul", [_t(rng, 3, 4), _t(rng, 4, 2)],
         lambda ps: ad.matmul(ps[0], ps[1]))
    case("transpose", [_t(rng, 3, 4)], lambda ps: ad.transpose(ps[0]))
    case("reshape", [_t(rng, 3, 4)], lambda ps: ad.reshape(ps[0], (2, 6)))
    case("concat", [_t(rng, 2, 4), _t(rng, 3, 4)],
         lambda ps: ad.concat(ps, axis=0))
    case("slice", [_t(rng, 5, 4)], lambda ps: ad.slice_axis(ps[0], 0, 1, 3))
    case("take_rows", [_t(rng, 5, 4)],
         lambda ps: ad.take_rows(ps[0], [0, 2, 2, 4]))
    case("scatter_rows", [_t(rng, 4, 3)],
         lambda ps: ad.scatter_rows(ps[0], [0, 2, 2, 1], 5))
    case("embedding_lookup", [_t(rng, 6, 3)],
         lambda ps: ad.embedding_lookup(ps[0], [1, 1, 5, 0]))
    case("masked_fill", [_t(rng, 4, 4)],
         lambda ps: ad.masked_fill(
             ps[0], np.eye(4, dtype=bool), 0.25))
    case("sum_all", [_t(rng, 3, 4)],
         lambda ps: ad.reshape(ad.sum(ad.mul(ps[0], ps[0])), (1,)))
    case("sum_axis", [_t(rng, 3, 4)],
         lambda ps: ad.sum(ps[0], axis=1, keepdims=True))
    case("mean_all", [_t(rng, 3, 4)],
         lambda ps: ad.reshape(ad.mean(ps[0]), (1,)))
    case("mean_axis", [_t(rng, 3, 4)], lambda ps: ad.mean(ps[0], axis=0))
    case("max_axis", [_t(rng, 4, 5)], lambda ps: ad.max(ps[0], axis=1))
    case("min_axis", [_t(rng, 4, 5)], lambda ps: ad.min(ps[0], axis=1))
    case("softmax", [_t(rng, 3, 5)], lambda ps: ad.softmax(ps[0], axis=1))
    case("log_softmax", [_t(rng, 3, 5)],
         lambda ps: ad.log_softmax(ps[0], axis=1))
    case("logsumexp", [_t(rng, 3, 5)], lambda ps: ad.logsumexp(ps[0], axis=1))
    case("layer_norm", [_t(rng, 3, 6)], lambda ps: ad.layer_norm(ps[0], axis=-1))
    case("max_pool_1d", [_t(rng, 7, 3)], lambda ps: ad.max_pool_1d(ps[0]))
    return cases


def _cast_module(module: Module, dtype):
    for _, p in module.named_parameters():
        p.data = p.data.astype(dtype)


def fd_check_float32(f, params, eps: float = 1e-5) -> float:
    """Compare float32 backward grads to a float64 FD oracle.

    `params` hold float32 data; the analytic gradient is taken from the
    float32 graph, then the same parameters are temporarily promoted to
    float64 for the central differences.
    """
    out = f(params)
    grad_map = ad.backward(out)
    analytic = [np.asarray(grad_map.get(id(p), np.zeros_like(p.data)),
                           dtype=np.float64) for p in params]
    originals = [p.data for p in params]
    for p in params:
        p.data = p.data.astype(np.float64)
    try:
        worst = 0.0
        for p, an in zip(params, analytic):
            flat = p.data.reshape(-1)
            an_flat = an.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                with ad.no_grad():
                    f_plus = float(f(params).data)
                flat[i] = orig - eps
                with ad.no_grad():
                    f_minus = float(f(params).data)
                flat[i] = orig
                fd = (f_plus - f_minus) / (2.0 * eps)
                err = abs(an_flat[i] - fd) / max(1.0, abs(an_flat[i]), abs(fd))
                worst = max(worst, err)
        return worst
    finally:
        for p, orig in zip(params, originals):
            p.data = orig


def suite_primitives(eps: float = 1e-5) -> SuiteResult:
    t0 = time.time()
    worst = 0.0
    for name, f, params in primitive_op_cases():
        err = finite_diff_check(f, params, eps=eps)
        worst = max(worst, err)
    return SuiteResult("primitive_ops(float64)", worst, TOL_PRIMITIVE,
                       time.time() - t0)


def _sparse_stack(dtype, seed: int = 5):
    rng = np.random.default_rng(seed)
    conv0 = SparseConvLayer(3, 4, rng)
    conv1 = SparseConvLayer(4, 5, rng, stride=2, submanifold=False)
    for layer in (conv0, conv1):
        _cast_module(layer, dtype)
    n_sites = 10
    coords = rng.choice(36, size=n_sites, replace=False)
    coords = np.column_stack([np.zeros(n_sites, dtype=np.int64),
                              coords // 6, coords % 6])
    feats = Tensor(rng.standard_normal((n_sites, 3)).astype(dtype),
                   requires_grad=True)
    proj = Tensor(rng.standard_normal(5).astype(dtype))

    params = [feats] + [p for _, p in conv0.named_parameters()] \
        + [p for _, p in conv1.named_parameters()]

    def f(_ps):
        x = SparseTensor(coords, feats, (6, 6), 1)
        y = conv0(x)
        y = SparseTensor(y.coords, ad.relu(y.features), y.shape, 1)
        z = conv1(y)
        pooled = ad.mean(z.features, axis=0)
        return ad.sum(ad.mul(pooled, proj))

    return f, params


def suite_sparse_stack(dtype=np.float64, eps: float = 1e-5) -> SuiteResult:
    t0 = time.time()
    f, params = _sparse_stack(dtype)
    if dtype == np.float64:
        err = finite_diff_check(f, params, eps=eps)
        return SuiteResult("sparse_stack(float64)", err, TOL_PRIMITIVE,
                           time.time() - t0)
    err = fd_check_float32(f, params, eps=eps)
    return SuiteResult("sparse_stack(float32)", err, TOL_COMPOSITE,
                       time.time() - t0)


def suite_temporal_block(dtype=np.float32, eps: float = 1e-5) -> SuiteResult:
    """Full fusion + intra + inter aggregation block."""
    t0 = time.time()
    rng = np.random.default_rng(17)
    cfg = TemporalConfig(model_dim=8, heads=2, window=4, downsample=4,
                         rbf_sigma=2.0, ffn_dim=16)
    block = TemporalAggregator(cfg, rng)
    _cast_module(block, dtype)
    tokens = Tensor(rng.standard_normal((8, 8)).astype(dtype),
                    requires_grad=True)
    proj = Tensor(rng.standard_normal((2, 8)).astype(dtype))
    params = [tokens] + [p for _, p in block.named_parameters()]

    def f(_ps):
        seq = TokenSeq(tokens, np.arange(8, dtype=np.float64))
        out, _fused = block(seq)
        return ad.sum(ad.mul(out.tokens, proj))

    if dtype == np.float64:
        err = finite_diff_check(f, params, eps=eps)
        return SuiteResult("temporal_block(float64)", err, TOL_PRIMITIVE,
                           time.time() - t0)
    err = fd_check_float32(f, params, eps=eps)
    return SuiteResult("temporal_block(float32)", err, TOL_COMPOSITE,
                       time.time() - t0)


def suite_ctc(dtype=np.float64, eps: float = 1e-5) -> SuiteResult:
    t0 = time.time()
    rng = np.random.default_rng(23)
    logits = Tensor(rng.standard_normal((5, 4)).astype(dtype),
                    requires_grad=True)
    target = [1, 2, 1]

    def f(_ps):
        return ctc_loss(ad.log_softmax(logits, axis=1), target).loss

    err = finite_diff_check(f, [logits], eps=eps)
    tag = "float64" if dtype == np.float64 else "float32"
    tol = TOL_PRIMITIVE if dtype == np.float64 else TOL_COMPOSITE
    return SuiteResult(f"ctc_loss({tag})", err, tol, time.time() - t0)


def suite_decoder(dtype=np.float32, eps: float = 1e-5) -> SuiteResult:
    t0 = time.time()
    rng = np.random.default_rng(29)
    cfg = DecoderConfig(model_dim=8, heads=2, n_blocks=4, ffn_dim=16)
    dec = TranslationDecoder(cfg, vocab_size=7, rng=rng)
    _cast_module(dec, dtype)
    memory = Tensor(rng.standard_normal((3, 8)).astype(dtype),
                    requires_grad=True)
    dec_in = [0, 4, 5, 6]
    dec_out = [4, 5, 6, 1]
    params = [memory] + [p for _, p in dec.named_parameters()]

    def f(_ps):
        return cross_entropy(dec(memory, dec_in), dec_out)

    if dtype == np.float64:
        err = finite_diff_check(f, params, eps=eps)
        return SuiteResult("decoder(float64)", err, TOL_PRIMITIVE,
                           time.time() - t0)
    err = fd_check_float32(f, params, eps=eps)
    return SuiteResult("decoder(float32)", err, TOL_COMPOSITE,
                       time.time() - t0)


def run_all() -> list[SuiteResult]:
    return [
        suite_primitives(),
        suite_sparse_stack(np.float64),
        suite_sparse_stack(np.float32),
        suite_temporal_block(np.float64),
        suite_temporal_block(np.float32),
        suite_ctc(np.float64),
        suite_decoder(np.float64),
        suite_decoder(np.float32),
    ]
