"""Rulebook-based sparse 2-D convolution backbone.

Active sites are (batch, y, x) coordinates — batch indexes the temporal
segment of a clip so all segments share one pass. A rulebook lists, per
3x3 kernel offset, the (input_row, output_row) pairs to gather/scatter;
submanifold layers keep the active set fixed while strided layers project
it onto the stride grid. Features flow through the autodiff tape, so the
whole backbone is trainable. Rulebooks depend only on coordinates and can
be precomputed once per clip (`SparseBackbone.trace`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .events import VoxelGrid
from .layers import Module, xavier_uniform

KERNEL_OFFSETS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]


@dataclass
class SparseTensor:
    """Active-coordinate list plus per-site feature rows.

    coords: (n, 3) int array of (batch, y, x), unique rows. features:
    (n, C) Tensor aligned with coords.
    """

    coords: np.ndarray
    features: Tensor
    shape: tuple[int, int]
    n_batch: int

    def __post_init__(self):
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError(f"coords must be (n, 3), got {self.coords.shape}")
        if self.coords.shape[0] != self.features.shape[0]:
            raise ValueError("coords/features row count mismatch")

    @property
    def n_active(self) -> int:
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def index_map(self) -> dict[tuple[int, int, int], int]:
        return {tuple(c): i for i, c in enumerate(self.coords)}


def sparsify(dense: np.ndarray, threshold: float = 0.0) -> SparseTensor:
    """Dense (B, H, W) segment -> sparse sites where any bin exceeds
    `threshold` in absolute value; features are the B-dim bin vectors."""
    if dense.ndim != 3:
        raise ValueError(f"expected (B, H, W), got {dense.shape}")
    _, h, w = dense.shape
    mask = np.abs(dense).max(axis=0) > threshold
    ys, xs = np.nonzero(mask)
    coords = np.column_stack([np.zeros_like(ys), ys, xs]).astype(np.int64)
    feats = dense[:, ys, xs].T.astype(dense.dtype)
    return SparseTensor(coords, Tensor(feats), (h, w), 1)


def sparsify_clip(grid: VoxelGrid, threshold: float = 0.0) -> SparseTensor:
    """All segments of a (P, B, H, W) grid as one batched sparse tensor."""
    p, _, h, w = grid.data.shape
    mask = np.abs(grid.data).max(axis=1) > threshold
    bs, ys, xs = np.nonzero(mask)
    coords = np.column_stack([bs, ys, xs]).astype(np.int64)
    feats = grid.data[bs, :, ys, xs].astype(grid.data.dtype)
    return SparseTensor(coords, Tensor(feats), (h, w), p)


def densify(sparse: SparseTensor) -> np.ndarray:
    """Inverse of sparsify for a single-batch tensor: (C, H, W)."""
    h, w = sparse.shape
    out = np.zeros((sparse.channels, h, w), dtype=sparse.features.data.dtype)
    for row, (_, y, x) in enumerate(sparse.coords):
        out[:, y, x] = sparse.features.data[row]
    return out


@dataclass
class Rulebook:
    """Per-offset gather/scatter index pairs for one conv layer."""

    pairs: list[np.ndarray]  # one (k, 2) array of (in_row, out_row) per offset
    out_coords: np.ndarray
    out_shape: tuple[int, int]
    submanifold: bool
    stride: int

    @property
    def n_out(self) -> int:
        return self.out_coords.shape[0]

    def pair_count(self) -> int:
        return int(sum(p.shape[0] for p in self.pairs))


def build_rulebook(coords: np.ndarray, shape: tuple[int, int],
                   stride: int = 1, submanifold: bool = True) -> Rulebook:
    """3x3 rulebook over active `coords`.

    Submanifold (stride 1): outputs exactly at the input sites; a pair
    exists where the offset neighbor is active. Strided: output sites on
    the stride grid reachable from any active input, spatial shape
    ceil-divided.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if submanifold and stride != 1:
        raise ValueError("submanifold layers use stride 1")
    h, w = shape
    index = {tuple(c): i for i, c in enumerate(coords)}
    if submanifold:
        pairs = []
        for dy, dx in KERNEL_OFFSETS:
            rows = [(i, j) for j, (b, y, x) in enumerate(coords)
                    if (i := index.get((b, y + dy, x + dx))) is not None]
            pairs.append(np.asarray(rows, dtype=np.int64).reshape(-1, 2))
        return Rulebook(pairs, coords.copy(), (h, w), True, 1)

    out_h, out_w = -(-h // stride), -(-w // stride)
    raw: list[list[tuple[int, tuple[int, int, int]]]] = [[] for _ in KERNEL_OFFSETS]
    out_sites: set[tuple[int, int, int]] = set()
    for i, (b, y, x) in enumerate(coords):
        for k, (dy, dx) in enumerate(KERNEL_OFFSETS):
            yy, xx = y - dy, x - dx
            if yy % stride or xx % stride:
                continue
            yo, xo = yy // stride, xx // stride
            if 0 <= yo < out_h and 0 <= xo < out_w:
                site = (int(b), yo, xo)
                raw[k].append((i, site))
                out_sites.add(site)
    out_coords = np.asarray(sorted(out_sites), dtype=np.int64).reshape(-1, 3)
    out_index = {tuple(c): j for j, c in enumerate(out_coords)}
    pairs = [np.asarray([(i, out_index[site]) for i, site in entries],
                        dtype=np.int64).reshape(-1, 2)
             for entries in raw]
    return Rulebook(pairs, out_coords, (out_h, out_w), False, stride)


def sparse_conv(x: SparseTensor, weight: Tensor, bias: Tensor | None,
                rulebook: Rulebook) -> SparseTensor:
    """Apply a 3x3 conv through a rulebook built for x.coords.

    weight: (9, Cin, Cout) ordered like KERNEL_OFFSETS; out feature j =
    bias + sum over pairs (i, j) of x[i] @ weight[offset]. All offsets
    share one gather and one scatter-add, per-offset matmuls in between.
    """
    if weight.shape[0] != len(KERNEL_OFFSETS) or weight.shape[1] != x.channels:
        raise ad.ShapeError(
            f"weight {weight.shape} incompatible with {x.channels} input channels")
    c_out = weight.shape[2]
    n_out = rulebook.n_out
    live = [(k, pair) for k, pair in enumerate(rulebook.pairs) if pair.shape[0]]
    if not live:
        acc = Tensor(np.zeros((n_out, c_out), dtype=x.features.data.dtype))
        if bias is not None and n_out > 0:
            acc = ad.add(acc, bias)
        return SparseTensor(rulebook.out_coords, acc, rulebook.out_shape,
                            x.n_batch)
    in_idx = np.concatenate([pair[:, 0] for _, pair in live])
    out_idx = np.concatenate([pair[:, 1] for _, pair in live])
    gathered = ad.take_rows(x.features, in_idx)
    chunks = []
    offset = 0
    for k, pair in live:
        wk = ad.reshape(ad.slice_axis(weight, 0, k, 1), (x.channels, c_out))
        rows = ad.slice_axis(gathered, 0, offset, pair.shape[0])
        chunks.append(ad.matmul(rows, wk))
        offset += pair.shape[0]
    acc = ad.scatter_rows(ad.concat(chunks, axis=0), out_idx, n_out)
    if bias is not None and n_out > 0:
        acc = ad.add(acc, bias)
    return SparseTensor(rulebook.out_coords, acc, rulebook.out_shape, x.n_batch)


class SparseConvLayer(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 stride: int = 1, submanifold: bool = True):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.stride = stride
        self.submanifold = submanifold
        fan_in, fan_out = 9 * c_in, 9 * c_out
        self.weight = self.add_param("weight", Tensor(
            xavier_uniform(rng, fan_in, fan_out, shape=(9, c_in, c_out)),
            requires_grad=True))
        self.bias = self.add_param("bias", Tensor(
            np.zeros(c_out, dtype=np.float32), requires_grad=True))

    def __call__(self, x: SparseTensor, rulebook: Rulebook | None = None
                 ) -> SparseTensor:
        if rulebook is None:
            rulebook = build_rulebook(x.coords, x.shape, self.stride,
                                      self.submanifold)
        return sparse_conv(x, self.weight, self.bias, rulebook)


class SiteNorm(Module):
    """Per-channel normalization over all active sites (BatchNorm analog);
    running statistics are used in eval mode."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gain = self.add_param("gain", Tensor(
            np.ones(channels, dtype=np.float32), requires_grad=True))
        self.bias = self.add_param("bias", Tensor(
            np.zeros(channels, dtype=np.float32), requires_grad=True))
        self.running_mean = self.add_buffer(
            "running_mean", np.zeros(channels, dtype=np.float32))
        self.running_var = self.add_buffer(
            "running_var", np.ones(channels, dtype=np.float32))

    def __call__(self, x: SparseTensor) -> SparseTensor:
        feats = x.features
        if x.n_active == 0:
            return x
        if self.training:
            mu = ad.mean(feats, axis=0, keepdims=True)
            centered = ad.sub(feats, mu)
            var = ad.mean(ad.mul(centered, centered), axis=0, keepdims=True)
            self.running_mean *= 1.0 - self.momentum
            self.running_mean += self.momentum * mu.data.reshape(-1).astype(np.float32)
            self.running_var *= 1.0 - self.momentum
            self.running_var += self.momentum * var.data.reshape(-1).astype(np.float32)
        else:
            dt = feats.data.dtype
            mu = Tensor(self.running_mean.reshape(1, -1).astype(dt))
            var = Tensor(self.running_var.reshape(1, -1).astype(dt))
            centered = ad.sub(feats, mu)
        inv = ad.pow_const(ad.add(var, ad.constant(self.eps, dtype=feats.data.dtype)),
                           -0.5)
        normed = ad.add(ad.mul(ad.mul(centered, inv), self.gain), self.bias)
        return SparseTensor(x.coords, normed, x.shape, x.n_batch)


def _relu_sparse(x: SparseTensor) -> SparseTensor:
    return SparseTensor(x.coords, ad.relu(x.features), x.shape, x.n_batch)


@dataclass
class BackboneConfig:
    in_bins: int = 5
    stage_channels: tuple[int, ...] = (16, 32, 64, 64)
    model_dim: int = 64

    def validate(self):
        if self.stage_channels[-1] != self.model_dim:
            raise ValueError(
                f"final stage channels {self.stage_channels[-1]} must equal "
                f"model dim {self.model_dim}")
        if len(self.stage_channels) < 2:
            raise ValueError("need at least two stages")


@dataclass(frozen=True)
class LayerSpec:
    c_in: int
    c_out: int
    stride: int
    submanifold: bool


def backbone_layer_plan(config: BackboneConfig) -> list[LayerSpec]:
    """Conv layers in execution order (norms/activations implied)."""
    config.validate()
    chans = config.stage_channels
    plan = []
    c_prev = config.in_bins
    for idx, c in enumerate(chans):
        stride = 1 if idx == 0 else 2
        plan.append(LayerSpec(c_prev, c, stride, stride == 1))
        plan.append(LayerSpec(c, c, 1, True))
        plan.append(LayerSpec(c, c, 1, True))
        c_prev = c
    return plan


class Stage(Module):
    """conv0 (possibly strided) then a residual pair conv1/conv2."""

    def __init__(self, c_in: int, c_out: int, stride: int,
                 rng: np.random.Generator):
        super().__init__()
        self.conv0 = self.add_child(
            "conv0", SparseConvLayer(c_in, c_out, rng, stride=stride,
                                     submanifold=stride == 1))
        self.norm0 = self.add_child("norm0", SiteNorm(c_out))
        self.conv1 = self.add_child("conv1", SparseConvLayer(c_out, c_out, rng))
        self.norm1 = self.add_child("norm1", SiteNorm(c_out))
        self.conv2 = self.add_child("conv2", SparseConvLayer(c_out, c_out, rng))
        self.norm2 = self.add_child("norm2", SiteNorm(c_out))

    def __call__(self, x: SparseTensor, rb_down: Rulebook | None,
                 rb_sub: Rulebook | None) -> SparseTensor:
        rb0 = rb_down if self.conv0.stride > 1 else rb_sub
        x = _relu_sparse(self.norm0(self.conv0(x, rb0)))
        y = _relu_sparse(self.norm1(self.conv1(x, rb_sub)))
        y = self.norm2(self.conv2(y, rb_sub))
        merged = ad.add(y.features, x.features)
        return _relu_sparse(SparseTensor(x.coords, merged, x.shape, x.n_batch))


@dataclass
class RulebookChain:
    """Precomputed per-clip rulebooks: one (down, submanifold) pair per
    stage (down is None for the stem)."""

    stages: list[tuple[Rulebook | None, Rulebook]]


class SparseBackbone(Module):
    """Stem + strided stages with residual pairs; one token per segment.

    Spatial features of each segment are mean-pooled over its active
    sites; a segment with no activity yields the zero token.
    """

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        config.validate()
        self.config = config
        chans = config.stage_channels
        self.blocks: list[Stage] = []
        c_prev = config.in_bins
        for idx, c in enumerate(chans):
            stage = Stage(c_prev, c, 1 if idx == 0 else 2, rng)
            self.blocks.append(self.add_child(f"stage{idx}", stage))
            c_prev = c

    def trace(self, coords: np.ndarray, shape: tuple[int, int]) -> RulebookChain:
        """Build all rulebooks for a fixed active set (cacheable per clip)."""
        chain = []
        for idx, _stage in enumerate(self.blocks):
            rb_down = None
            if idx > 0:
                rb_down = build_rulebook(coords, shape, 2, False)
                coords, shape = rb_down.out_coords, rb_down.out_shape
            rb_sub = build_rulebook(coords, shape, 1, True)
            chain.append((rb_down, rb_sub))
        return RulebookChain(chain)

    def forward_clip(self, x: SparseTensor,
                     chain: RulebookChain | None = None) -> Tensor:
        """(P-batched sparse voxel) -> (P, C) visual tokens."""
        p = x.n_batch
        c = self.config.model_dim
        if x.n_active == 0:
            return Tensor(np.zeros((p, c), dtype=np.float32))
        if chain is None:
            chain = self.trace(x.coords, x.shape)
        for stage, (rb_down, rb_sub) in zip(self.blocks, chain.stages):
            x = stage(x, rb_down, rb_sub)
        batch_ids = x.coords[:, 0]
        sums = ad.scatter_rows(x.features, batch_ids, p)
        counts = np.bincount(batch_ids, minlength=p).astype(x.features.data.dtype)
        inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
        return ad.mul(sums, Tensor(inv.reshape(p, 1)))

    def forward(self, segment_voxel: np.ndarray) -> Tensor:
        """Single (B, H, W) segment -> C-dim visual token."""
        sp = sparsify(segment_voxel)
        return ad.reshape(self.forward_clip(sp), (self.config.model_dim,))


# ----------------------------------------------------------------------
# FLOP accounting


def _dense_pair_count(h: int, w: int, dy: int, dx: int, stride: int,
                      out_h: int, out_w: int) -> int:
    """Pairs this offset would contribute if every site were active."""
    if stride == 1:
        return (h - abs(dy)) * (w - abs(dx))
    count_y = sum(1 for yo in range(out_h) if 0 <= yo * stride + dy < h)
    count_x = sum(1 for xo in range(out_w) if 0 <= xo * stride + dx < w)
    return count_y * count_x


def flops_report(grid: VoxelGrid, config: BackboneConfig) -> dict:
    """Multiply-add counts actually executed via rulebooks vs the dense
    equivalent of the same architecture (all sites active, per segment)."""
    plan = backbone_layer_plan(config)
    sp = sparsify_clip(grid)
    coords, shape = sp.coords, sp.shape
    n_batch = sp.n_batch
    sparse_macs = 0
    dense_macs = 0
    for layer in plan:
        rb = build_rulebook(coords, shape, layer.stride, layer.submanifold)
        sparse_macs += rb.pair_count() * layer.c_in * layer.c_out
        h, w = shape
        for dy, dx in KERNEL_OFFSETS:
            dense_macs += (n_batch * layer.c_in * layer.c_out
                           * _dense_pair_count(h, w, dy, dx, layer.stride,
                                               rb.out_shape[0], rb.out_shape[1]))
        coords, shape = rb.out_coords, rb.out_shape
    ratio = sparse_macs / dense_macs if dense_macs else 0.0
    return {"sparse_flops": int(sparse_macs),
            "dense_equivalent_flops": int(dense_macs),
            "ratio": float(ratio)}
