"""Reduction-based global attention and its ReLU linear-attention baseline.

The main op, :func:`reduce_former_attention`, replaces the d x d key/value
matrix product of ReLU linear attention with a cascade of global sums and
per-channel elementwise scalings:

    rk, rq  = relu(K), relu(Q)
    sum_k   = spatial sum of rk                    (B, d, 1, 1)
    sum_v   = spatial sum of (V  * sum_k)          (B, d, 1, 1)
    sum_kv  = spatial sum of (rk * sum_v)          (B, d, 1, 1)
    sum_qk  = channel sum of (rq * sum_k)          (B, 1, H, W)
    O       = rq * sum_kv / (sum_qk + eps)

which touches every element a constant number of times, so the cost is
linear in the token count N = H*W.  The staged sums collapse algebraically
(sum_kv_c = (sum of rk over space)^2 * (sum of V over space), per channel);
:func:`closed_form_oracle` evaluates that collapsed form directly and is
used as an independent check of the pipeline.

:func:`relu_linear_attention` is the baseline it is measured against: the
same bundle routed through an explicit d x d accumulation, implemented with
real matmul nodes so structural graph scans can tell the two apart.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import ops
from .graph import Graph
from .tensor import Rng, ShapeError, Tensor


@dataclass(frozen=True)
class LocalContextConfig:
    """Multi-scale local context: a 1x1 conv to 3C channels plus
    ``scales - 1`` depthwise convolutions of the given odd kernel sizes."""

    base_channels: int
    scales: int = 2
    dw_kernels: tuple[int, ...] = (5,)

    def __post_init__(self):
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.scales < 1:
            raise ValueError("scales must be >= 1")
        if len(self.dw_kernels) != self.scales - 1:
            raise ValueError(
                f"need {self.scales - 1} depthwise kernels for scales={self.scales}, "
                f"got {len(self.dw_kernels)}")
        if any(k < 1 or k % 2 == 0 for k in self.dw_kernels):
            raise ValueError(f"depthwise kernels must be odd, got {self.dw_kernels}")

    @property
    def qkv_channels(self) -> int:
        return 3 * self.scales * self.base_channels

    @property
    def group_channels(self) -> int:
        """Channels per role (Q, K or V): scales * base_channels."""
        return self.scales * self.base_channels


@dataclass
class LocalContextWeights:
    """Parameters for :func:`multi_scale_local_context`.

    point: (3C, C, 1, 1) pointwise kernel; dw[i]: (3C, 1, k, k) depthwise
    kernel for dw_kernels[i].  Entries may be Tensors (e.g. graph leaves)
    or raw arrays.
    """

    point: object
    dw: list = field(default_factory=list)
    point_bias: Optional[object] = None

    @classmethod
    def init(cls, cfg: LocalContextConfig, rng: Rng, dtype=np.float32) -> "LocalContextWeights":
        c3 = 3 * cfg.base_channels
        lim = 1.0 / np.sqrt(cfg.base_channels)
        point = rng.uniform((c3, cfg.base_channels, 1, 1), -lim, lim, dtype)
        dw = []
        for k in cfg.dw_kernels:
            lim = 1.0 / np.sqrt(k * k)
            dw.append(rng.uniform((c3, 1, k, k), -lim, lim, dtype))
        return cls(point=point, dw=dw)


@dataclass
class QkvBundle:
    """Q, K, V feature maps of identical (B, S*C, H, W) shape."""

    q: Tensor
    k: Tensor
    v: Tensor

    def __post_init__(self):
        if not (self.q.shape == self.k.shape == self.v.shape):
            raise ShapeError(
                f"q/k/v shapes differ: {self.q.shape}, {self.k.shape}, {self.v.shape}")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.q.shape

    @property
    def tokens(self) -> int:
        return self.q.shape[2] * self.q.shape[3]


@dataclass
class ReductionSet:
    """The four reduced tensors the attention output is assembled from."""

    sum_k: Tensor    # (B, d, 1, 1), nonnegative (sums of relu outputs)
    sum_v: Tensor    # (B, d, 1, 1)
    sum_kv: Tensor   # (B, d, 1, 1)
    sum_qk: Tensor   # (B, 1, H, W), one normalizer scalar per position
    eps: float

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError(f"eps must be >= 0, got {self.eps}")


def multi_scale_local_context(x: Tensor, cfg: LocalContextConfig,
                              weights: LocalContextWeights) -> QkvBundle:
    """Build the QKV bundle: 1x1 conv to 3C, depthwise convs of y at each
    extra scale, concatenation to 3*S*C channels, and the Q/K/V split.

    Channel layout of the concatenated tensor is [Q|K|V] per scale, scales
    in order; the split gathers each role across scales, so q/k/v come out
    as (B, S*C, H, W) with scale-major channel order.
    """
    if x.shape[1] != cfg.base_channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels, config expects {cfg.base_channels}")
    c = cfg.base_channels
    y = ops.conv2d(x, weights.point, bias=weights.point_bias)
    scales = [y]
    for k, w in zip(cfg.dw_kernels, weights.dw):
        scales.append(ops.conv2d(y, w, stride=1, padding=k // 2, groups=3 * c))
    full = ops.concat_channels(scales)
    chunks = ops.split_channels(full, [c] * (3 * cfg.scales))
    return QkvBundle(
        q=ops.concat_channels(chunks[0::3]),
        k=ops.concat_channels(chunks[1::3]),
        v=ops.concat_channels(chunks[2::3]),
    )


def _staged_reductions(qkv: QkvBundle, eps: float):
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    rk = ops.relu(qkv.k)
    rq = ops.relu(qkv.q)
    sum_k = ops.global_sum_spatial(rk)
    sum_v = ops.global_sum_spatial(ops.ew_mul_broadcast(qkv.v, sum_k))
    sum_kv = ops.global_sum_spatial(ops.ew_mul_broadcast(rk, sum_v))
    sum_qk = ops.channel_sum(ops.ew_mul_broadcast(rq, sum_k))
    red = ReductionSet(sum_k=sum_k, sum_v=sum_v, sum_kv=sum_kv,
                       sum_qk=sum_qk, eps=eps)
    return rq, red


def attention_reductions(qkv: QkvBundle, eps: float = 1e-6) -> ReductionSet:
    """Compute the four reduced tensors (recorded if the bundle is bound)."""
    return _staged_reductions(qkv, eps)[1]


def reduce_former_attention(qkv: QkvBundle, eps: float = 1e-6) -> Tensor:
    """Global attention via staged reductions; output shape equals Q's.

    eps stabilizes the per-position normalizer (an all-nonpositive K or Q
    otherwise yields 0/0); with eps > 0 those degenerate inputs produce an
    all-zero output.  eps=0 is permitted for exact algebraic identities in
    tests.
    """
    rq, red = _staged_reductions(qkv, eps)
    den = ops.add_scalar(red.sum_qk, eps)
    return ops.ew_div_broadcast(ops.ew_mul_broadcast(rq, red.sum_kv), den)


def closed_form_oracle(qkv: QkvBundle, eps: float = 1e-6) -> Tensor:
    """Collapsed-form evaluation used as an independent oracle.

    Per channel c and position i:

        O[i,c] = relu(Q[i,c]) * (sk_c)^2 * sv_c / (sum_c' relu(Q[i,c']) * sk_c' + eps)

    with sk_c the spatial sum of relu(K) and sv_c the spatial sum of V.
    Plain numpy on raw arrays; never records a graph.
    """
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    q, k, v = qkv.q.data, qkv.k.data, qkv.v.data
    rq = np.maximum(q, 0)
    sk = np.maximum(k, 0).sum(axis=(2, 3), keepdims=True)
    sv = v.sum(axis=(2, 3), keepdims=True)
    num = rq * (sk * sk * sv)
    den = (rq * sk).sum(axis=1, keepdims=True) + np.asarray(eps, dtype=q.dtype)
    return Tensor(num / den)


def relu_linear_attention(qkv: QkvBundle, eps: float = 1e-6) -> Tensor:
    """ReLU linear attention baseline over N = H*W tokens of dimension d.

    O_i = relu(Q_i) (sum_j relu(K_j)^T V_j) / (relu(Q_i) sum_j relu(K_j)^T + eps),
    computed with an explicit d x d accumulation (matmul nodes), so its
    recorded graph contains matrix products -- the structural positive
    control against the reduction path.
    """
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    B, d, H, W = qkv.shape
    N = H * W
    rq = ops.relu(qkv.q)
    rk = ops.relu(qkv.k)
    sum_k = ops.global_sum_spatial(rk)
    rqm = ops.reshape(rq, (B, d, N, 1))
    rkm = ops.reshape(rk, (B, d, N, 1))
    vm = ops.reshape(qkv.v, (B, d, N, 1))
    # kv[c, e] = sum_j rk[c, j] * v[e, j]
    kv = ops.matmul(rkm, ops.transpose_12(vm))
    num = ops.matmul(ops.transpose_12(kv), rqm)            # (B, d, N, 1)
    den = ops.matmul(ops.transpose_12(sum_k), rqm)         # (B, 1, N, 1)
    den = ops.add_scalar(den, eps)
    out = ops.ew_div_broadcast(num, den)
    return ops.reshape(out, (B, d, H, W))


# ---------------------------------------------------------------------------
# cost accounting


@dataclass
class CostReport:
    """Op or model cost: parameters, multiply-accumulates, elementwise
    flops, and (after a timed run) wall-clock statistics in ms."""

    params: int = 0
    macs: int = 0
    ew_flops: int = 0
    wall_ms: Optional[dict] = None

    def __post_init__(self):
        if self.params < 0 or self.macs < 0 or self.ew_flops < 0:
            raise ValueError("cost counts must be >= 0")

    @property
    def total_flops(self) -> int:
        return 2 * self.macs + self.ew_flops


ATTENTION_KINDS = ("reduceformer", "relu_linear")


def flop_count_attention(kind: str, B: int, d: int, N: int) -> CostReport:
    """Exact analytic op counts for one attention forward pass.

    reduceformer: 7 elementwise passes over the (B,d,N) volume, three
    spatial reductions, one channel reduction and the eps add:

        ew = 7*B*d*N + 3*B*d*(N-1) + B*N*(d-1) + B*N = 11*B*d*N - 3*B*d
        macs = 0

    relu_linear: the K^T V accumulation (d*d*N), the numerator (N*d*d) and
    the denominator (N*d) matmuls, plus relus, the key reduction, eps and
    the division:

        macs = 2*B*d*d*N + B*d*N
        ew   = 3*B*d*N + B*d*(N-1) + B*N = 4*B*d*N - B*d + B*N

    Both match the instrumented execution counter exactly.
    """
    if kind not in ATTENTION_KINDS:
        raise ValueError(f"unknown attention kind {kind!r}")
    if kind == "reduceformer":
        return CostReport(params=0, macs=0, ew_flops=11 * B * d * N - 3 * B * d)
    return CostReport(params=0,
                      macs=2 * B * d * d * N + B * d * N,
                      ew_flops=4 * B * d * N - B * d + B * N)


# ---------------------------------------------------------------------------
# structural graph scans


def record_attention_graph(kind: str, d: int, N: int, B: int = 1,
                           seed: int = 0, eps: float = 1e-6) -> Graph:
    """Run one attention forward under recording and return the graph."""
    bundle = random_bundle(d, N, B, seed=seed)
    g = Graph()
    bound = QkvBundle(q=g.leaf(bundle.q), k=g.leaf(bundle.k), v=g.leaf(bundle.v))
    if kind == "reduceformer":
        out = reduce_former_attention(bound, eps)
    elif kind == "relu_linear":
        out = relu_linear_attention(bound, eps)
    else:
        raise ValueError(f"unknown attention kind {kind!r}")
    g.mark_output(out)
    return g


def scan_graph_kinds(g: Graph) -> dict:
    """Classify a recorded graph's node kinds for the structural claims."""
    kinds = g.kinds()
    return {
        "matmul_nodes": sum(k in ops.MATMUL_KINDS for k in kinds),
        "exp_nodes": sum(k in ops.EXP_KINDS for k in kinds),
        "kinds": sorted(set(kinds)),
    }


def _grid_for_tokens(n: int) -> tuple[int, int]:
    r = int(np.sqrt(n))
    if r * r == n:
        return r, r
    return n, 1


def random_bundle(d: int, N: int, B: int = 1, seed: int = 0,
                  low: float = -1.0, high: float = 1.0,
                  dtype=np.float32) -> QkvBundle:
    """Seeded uniform QKV bundle; N is laid out as a square grid when possible."""
    h, w = _grid_for_tokens(N)
    rng = Rng(seed)
    return QkvBundle(
        q=rng.tensor((B, d, h, w), low, high, dtype),
        k=rng.tensor((B, d, h, w), low, high, dtype),
        v=rng.tensor((B, d, h, w), low, high, dtype),
    )
