"""Primitive tensor ops: forward kernels, adjoints, and FLOP accounting.

Every op here
  * validates its shape contract loudly (ShapeError),
  * runs a vectorized numpy kernel with a fixed reduction order,
  * adds to any active FLOP tally, and
  * appends a node when an input is bound to a Graph, so the same call
    works eagerly and under recording.

Counting conventions (used consistently by the analytic formulas in
:mod:`reduceformer.attention` and :mod:`reduceformer.model`):
  * elementwise op on n outputs            -> n ew_flops
  * reduction of k values to 1             -> k-1 ew_flops
  * affine normalization (scale + shift)   -> 2n ew_flops
  * conv / matmul multiply-accumulate      -> counted in macs, not ew_flops
  * data movement (concat/split/reshape/transpose) -> free
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from typing import Optional, Sequence, Union

import numpy as np

from .graph import Graph, GraphError, register_adjoint
from .tensor import ShapeError, Tensor

# kinds that a structural graph scan classifies as matrix products /
# exponential-family ops
MATMUL_KINDS = frozenset({"matmul"})
EXP_KINDS = frozenset({"softmax_xent"})


# ---------------------------------------------------------------------------
# FLOP tally


class FlopTally:
    """Mutable counter pair filled in by ops while active."""

    __slots__ = ("macs", "ew_flops")

    def __init__(self):
        self.macs = 0
        self.ew_flops = 0

    @property
    def total_flops(self) -> int:
        """Single-number convention: one MAC = 2 flops."""
        return 2 * self.macs + self.ew_flops


_TALLIES: list[FlopTally] = []


@contextmanager
def flop_tally():
    t = FlopTally()
    _TALLIES.append(t)
    try:
        yield t
    finally:
        _TALLIES.remove(t)


def _count_ew(n: int) -> None:
    for t in _TALLIES:
        t.ew_flops += n


def _count_macs(n: int) -> None:
    for t in _TALLIES:
        t.macs += n


# ---------------------------------------------------------------------------
# optional data-parallel mode (used by conv2d; reductions stay sequential so
# results are bit-identical regardless of worker count)

_THREADS = threading.local()


def set_num_threads(n: int) -> None:
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _THREADS.n = int(n)


def get_num_threads() -> int:
    return getattr(_THREADS, "n", 1)


# ---------------------------------------------------------------------------
# recording plumbing


def _emit(kind: str, out: np.ndarray, inputs: Sequence[Optional[Tensor]],
          saved: dict) -> Tensor:
    g = None
    for t in inputs:
        if t is not None and t.graph is not None:
            if g is None:
                g = t.graph
            elif g is not t.graph:
                raise GraphError("operands are recorded on different graphs")
    if g is None:
        return Tensor(out)
    ids = tuple(
        (t.nid if (t is not None and t.graph is g) else None) for t in inputs)
    nid = g.add(kind, ids, saved, out.shape, out.dtype)
    return Tensor(out, g, nid)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _same_dtype(*tensors: Tensor) -> np.dtype:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError(f"mixed dtypes {dt} and {t.dtype}")
    return dt


# ---------------------------------------------------------------------------
# elementwise ops


def relu(x: Tensor) -> Tensor:
    """max(x, 0).  Subgradient at exactly 0 is 0."""
    out = np.maximum(x.data, 0)
    _count_ew(out.size)
    return _emit("relu", out, (x,), {"x": x.data})


@register_adjoint("relu")
def _relu_adj(node, g):
    return [(0, g * (node.saved["x"] > 0))]


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; shapes must match exactly."""
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    _same_dtype(a, b)
    out = a.data + b.data
    _count_ew(out.size)
    return _emit("add", out, (a, b), {})


@register_adjoint("add")
def _add_adj(node, g):
    return [(0, g), (1, g)]


def add_scalar(x: Tensor, s: float) -> Tensor:
    out = x.data + x.dtype.type(s)
    _count_ew(out.size)
    return _emit("add_scalar", out, (x,), {})


@register_adjoint("add_scalar")
def _add_scalar_adj(node, g):
    return [(0, g)]


def mul_scalar(x: Tensor, s: float) -> Tensor:
    out = x.data * x.dtype.type(s)
    _count_ew(out.size)
    return _emit("mul_scalar", out, (x,), {"s": x.dtype.type(s)})


@register_adjoint("mul_scalar")
def _mul_scalar_adj(node, g):
    return [(0, g * node.saved["s"])]


def _spatial_broadcast_ok(a: Tensor, b: Tensor) -> bool:
    return (b.shape[0] == a.shape[0] and b.shape[1] == a.shape[1]
            and b.shape[2] == 1 and b.shape[3] == 1)


def ew_mul_broadcast(a: Tensor, b: Tensor) -> Tensor:
    """a * b where b either matches a's shape or is a per-channel (B,C,1,1)
    vector broadcast over the spatial dims.  Any other pair is rejected."""
    _same_dtype(a, b)
    if a.shape == b.shape:
        bcast = False
    elif _spatial_broadcast_ok(a, b):
        bcast = True
    else:
        raise ShapeError(
            f"ew_mul_broadcast: cannot combine {a.shape} with {b.shape}; "
            "shapes must be equal or b must be (B,C,1,1)")
    out = a.data * b.data
    _count_ew(out.size)
    return _emit("ew_mul", out, (a, b),
                 {"a": a.data, "b": b.data, "bcast": bcast})


@register_adjoint("ew_mul")
def _ew_mul_adj(node, g):
    da = g * node.saved["b"]
    db = g * node.saved["a"]
    if node.saved["bcast"]:
        db = db.sum(axis=(2, 3), keepdims=True)
    return [(0, da), (1, db)]


def ew_div_broadcast(a: Tensor, b: Tensor) -> Tensor:
    """a / b where b either matches a's shape or is a per-position (B,1,H,W)
    map broadcast over channels (the attention denominator pattern)."""
    _same_dtype(a, b)
    if a.shape == b.shape:
        bcast = False
    elif (b.shape[0] == a.shape[0] and b.shape[1] == 1
          and b.shape[2:] == a.shape[2:]):
        bcast = True
    else:
        raise ShapeError(
            f"ew_div_broadcast: cannot combine {a.shape} with {b.shape}; "
            "shapes must be equal or b must be (B,1,H,W)")
    out = a.data / b.data
    _count_ew(out.size)
    return _emit("ew_div", out, (a, b),
                 {"a": a.data, "b": b.data, "bcast": bcast})


@register_adjoint("ew_div")
def _ew_div_adj(node, g):
    a, b = node.saved["a"], node.saved["b"]
    da = g / b
    db = -(g * a) / (b * b)
    if node.saved["bcast"]:
        db = db.sum(axis=1, keepdims=True)
    return [(0, da), (1, db)]


# ---------------------------------------------------------------------------
# reductions


def global_sum_spatial(x: Tensor) -> Tensor:
    """Sum over H and W: (B,C,H,W) -> (B,C,1,1)."""
    out = x.data.sum(axis=(2, 3), keepdims=True)
    b, c, h, w = x.shape
    _count_ew(b * c * (h * w - 1))
    return _emit("global_sum_spatial", out, (x,), {"shape": x.shape})


@register_adjoint("global_sum_spatial")
def _gss_adj(node, g):
    return [(0, np.broadcast_to(g, node.saved["shape"]).copy())]


def channel_sum(x: Tensor) -> Tensor:
    """Sum over channels: (B,C,H,W) -> (B,1,H,W)."""
    out = x.data.sum(axis=1, keepdims=True)
    b, c, h, w = x.shape
    _count_ew(b * (c - 1) * h * w)
    return _emit("channel_sum", out, (x,), {"shape": x.shape})


@register_adjoint("channel_sum")
def _cs_adj(node, g):
    return [(0, np.broadcast_to(g, node.saved["shape"]).copy())]


def sum_all(x: Tensor) -> Tensor:
    """Sum of every element: -> (1,1,1,1).  Scalar head for gradient checks."""
    out = x.data.sum().reshape(1, 1, 1, 1)
    _count_ew(x.size - 1)
    return _emit("sum_all", out, (x,), {"shape": x.shape})


@register_adjoint("sum_all")
def _sum_all_adj(node, g):
    return [(0, np.broadcast_to(g, node.saved["shape"]).copy())]


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean: global_sum_spatial followed by a 1/(H*W) scale."""
    _, _, h, w = x.shape
    return mul_scalar(global_sum_spatial(x), 1.0 / (h * w))


# ---------------------------------------------------------------------------
# convolution


def _conv_out_dim(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _bias_vector(bias, cout: int, dtype) -> Optional[np.ndarray]:
    if bias is None:
        return None
    barr = bias.data if isinstance(bias, Tensor) else np.asarray(bias)
    flat = barr.reshape(-1)
    if flat.size != cout:
        raise ShapeError(f"conv2d: bias has {flat.size} entries for {cout} output channels")
    return flat.astype(dtype, copy=False)


def _conv_forward_kernel(xp, w, stride, Hout, Wout, groups, out):
    """Accumulate the cross-correlation into ``out``; xp is already padded."""
    B, Cin = xp.shape[0], xp.shape[1]
    Cout, cin_g, kh, kw = w.shape
    s = stride
    depthwise = groups == Cin and Cout == Cin
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i:i + s * (Hout - 1) + 1:s, j:j + s * (Wout - 1) + 1:s]
            if depthwise:
                out += xs * w[:, 0, i, j].reshape(1, -1, 1, 1)
            elif groups == 1:
                out += np.einsum("bchw,oc->bohw", xs, w[:, :, i, j], optimize=True)
            else:
                cg_in, cg_out = Cin // groups, Cout // groups
                for gidx in range(groups):
                    out[:, gidx * cg_out:(gidx + 1) * cg_out] += np.einsum(
                        "bchw,oc->bohw",
                        xs[:, gidx * cg_in:(gidx + 1) * cg_in],
                        w[gidx * cg_out:(gidx + 1) * cg_out, :, i, j],
                        optimize=True)
    return out


def conv2d(x: Tensor, weight, bias=None, stride: int = 1, padding: int = 0,
           groups: int = 1) -> Tensor:
    """2-D cross-correlation (no kernel flip) in B,C,H,W layout.

    weight is (Cout, Cin/groups, kh, kw) with odd kh, kw; groups=Cin with
    Cout=Cin gives a depthwise conv, 1x1 with groups=1 a pointwise one.
    Output spatial dims are floor((S + 2*padding - k)/stride) + 1.
    """
    wt = weight if isinstance(weight, Tensor) else None
    warr = weight.data if isinstance(weight, Tensor) else np.asarray(weight)
    if warr.ndim != 4:
        raise ShapeError(f"conv2d: weight must be rank 4, got {warr.shape}")
    B, Cin, H, W = x.shape
    Cout, cin_g, kh, kw = warr.shape
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride/padding ({stride}, {padding})")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel dims must be odd, got {kh}x{kw}")
    if groups < 1 or Cin % groups != 0 or Cout % groups != 0:
        raise ShapeError(f"conv2d: groups={groups} does not divide Cin={Cin}/Cout={Cout}")
    if cin_g != Cin // groups:
        raise ShapeError(
            f"conv2d: weight expects {cin_g} channels/group, input has {Cin // groups}")
    Hout = _conv_out_dim(H, kh, stride, padding)
    Wout = _conv_out_dim(W, kw, stride, padding)
    if Hout < 1 or Wout < 1:
        raise ShapeError(f"conv2d: output dims {Hout}x{Wout} collapse below 1")

    dtype = x.dtype
    warr = warr.astype(dtype, copy=False)
    bvec = _bias_vector(bias, Cout, dtype)
    xp = (np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
          if padding else x.data)
    out = np.zeros((B, Cout, Hout, Wout), dtype=dtype)

    nthreads = get_num_threads()
    if nthreads > 1 and Cout >= 2 * nthreads:
        # partition output channels (group-aligned when grouped); every chunk
        # runs the identical kernel, so results match the sequential path bitwise
        cg_out = Cout // groups
        if groups == 1:
            bounds = [round(t * Cout / nthreads) for t in range(nthreads + 1)]
        else:
            bounds = [round(t * groups / nthreads) * cg_out for t in range(nthreads + 1)]
        bounds = sorted(set(b for b in bounds if 0 <= b <= Cout))

        def run_chunk(lo, hi):
            if groups == 1:
                _conv_forward_kernel(xp, warr[lo:hi], stride, Hout, Wout, 1,
                                     out[:, lo:hi])
                return
            gl, gh = lo // cg_out, hi // cg_out
            cin_lo, cin_hi = gl * (Cin // groups), gh * (Cin // groups)
            _conv_forward_kernel(xp[:, cin_lo:cin_hi], warr[lo:hi], stride,
                                 Hout, Wout, gh - gl, out[:, lo:hi])

        with ThreadPoolExecutor(max_workers=nthreads) as pool:
            futures = [pool.submit(run_chunk, lo, hi)
                       for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
            for f in futures:
                f.result()
    else:
        _conv_forward_kernel(xp, warr, stride, Hout, Wout, groups, out)

    if bvec is not None:
        out += bvec.reshape(1, -1, 1, 1)
        _count_ew(out.size)
    _count_macs(B * Cout * cin_g * kh * kw * Hout * Wout)

    bt = bias if isinstance(bias, Tensor) else None
    saved = {"x": x.data, "w": warr, "stride": stride, "padding": padding,
             "groups": groups, "has_bias": bvec is not None}
    return _emit("conv2d", out, (x, wt, bt), saved)


@register_adjoint("conv2d")
def _conv2d_adj(node, g):
    x, w = node.saved["x"], node.saved["w"]
    stride, padding, groups = (node.saved["stride"], node.saved["padding"],
                               node.saved["groups"])
    B, Cin, H, W = x.shape
    Cout, cin_g, kh, kw = w.shape
    Hout, Wout = g.shape[2], g.shape[3]
    s = stride
    depthwise = groups == Cin and Cout == Cin
    want_dx = node.inputs[0] is not None
    want_dw = node.inputs[1] is not None

    xp = (np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
          if padding else x)
    dxp = np.zeros_like(xp) if want_dx else None
    dw = np.zeros_like(w) if want_dw else None

    for i in range(kh):
        for j in range(kw):
            hs = slice(i, i + s * (Hout - 1) + 1, s)
            ws = slice(j, j + s * (Wout - 1) + 1, s)
            if depthwise:
                if want_dx:
                    dxp[:, :, hs, ws] += g * w[:, 0, i, j].reshape(1, -1, 1, 1)
                if want_dw:
                    dw[:, 0, i, j] = (g * xp[:, :, hs, ws]).sum(axis=(0, 2, 3))
            elif groups == 1:
                if want_dx:
                    dxp[:, :, hs, ws] += np.einsum(
                        "bohw,oc->bchw", g, w[:, :, i, j], optimize=True)
                if want_dw:
                    dw[:, :, i, j] = np.einsum(
                        "bohw,bchw->oc", g, xp[:, :, hs, ws], optimize=True)
            else:
                cg_in, cg_out = Cin // groups, Cout // groups
                for gi in range(groups):
                    go = g[:, gi * cg_out:(gi + 1) * cg_out]
                    xsg = xp[:, gi * cg_in:(gi + 1) * cg_in, hs, ws]
                    if want_dx:
                        dxp[:, gi * cg_in:(gi + 1) * cg_in, hs, ws] += np.einsum(
                            "bohw,oc->bchw", go,
                            w[gi * cg_out:(gi + 1) * cg_out, :, i, j], optimize=True)
                    if want_dw:
                        dw[gi * cg_out:(gi + 1) * cg_out, :, i, j] = np.einsum(
                            "bohw,bchw->oc", go, xsg, optimize=True)

    grads = []
    if want_dx:
        dx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
        grads.append((0, dx))
    if want_dw:
        grads.append((1, dw))
    if node.saved["has_bias"] and node.inputs[2] is not None:
        db = g.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
        grads.append((2, db))
    return grads


# ---------------------------------------------------------------------------
# concat / split


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis; all parts share B, H, W."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_channels: empty part list")
    if len(parts) == 1:
        return parts[0]
    ref = parts[0]
    _same_dtype(*parts)
    for p in parts[1:]:
        if (p.shape[0], p.shape[2], p.shape[3]) != (ref.shape[0], ref.shape[2], ref.shape[3]):
            raise ShapeError(
                f"concat_channels: part shape {p.shape} incompatible with {ref.shape}")
    out = np.concatenate([p.data for p in parts], axis=1)
    sizes = tuple(p.shape[1] for p in parts)
    return _emit("concat", out, tuple(parts), {"sizes": sizes})


@register_adjoint("concat")
def _concat_adj(node, g):
    grads = []
    off = 0
    for pos, c in enumerate(node.saved["sizes"]):
        grads.append((pos, g[:, off:off + c]))
        off += c
    return grads


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Partition the channel axis into chunks of the given sizes."""
    sizes = list(sizes)
    if any(s < 1 for s in sizes) or sum(sizes) != x.shape[1]:
        raise ShapeError(
            f"split_channels: sizes {sizes} do not partition {x.shape[1]} channels")
    outs = []
    off = 0
    for c in sizes:
        chunk = x.data[:, off:off + c].copy()
        outs.append(_emit("split", chunk, (x,),
                          {"offset": off, "in_shape": x.shape}))
        off += c
    return outs


@register_adjoint("split")
def _split_adj(node, g):
    dx = np.zeros(node.saved["in_shape"], dtype=g.dtype)
    off = node.saved["offset"]
    dx[:, off:off + g.shape[1]] = g
    return [(0, dx)]


# ---------------------------------------------------------------------------
# layout + matrix ops (used by the d x d baseline attention and the head)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if len(shape) != 4 or int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: {x.shape} -> {shape} is not size-preserving rank 4")
    out = x.data.reshape(shape)
    return _emit("reshape", out, (x,), {"in_shape": x.shape})


@register_adjoint("reshape")
def _reshape_adj(node, g):
    return [(0, g.reshape(node.saved["in_shape"]))]


def transpose_12(x: Tensor) -> Tensor:
    """Swap axes 1 and 2: (B, M, K, W) -> (B, K, M, W)."""
    out = np.ascontiguousarray(np.swapaxes(x.data, 1, 2))
    return _emit("transpose", out, (x,), {})


@register_adjoint("transpose")
def _transpose_adj(node, g):
    return [(0, np.ascontiguousarray(np.swapaxes(g, 1, 2)))]


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product on (B, M, K, 1) x (B, K, N, 1) -> (B, M, N, 1).

    The only op in this package that multiplies matrices; graphs containing
    it are flagged by the structural scans.
    """
    _same_dtype(a, b)
    if a.shape[3] != 1 or b.shape[3] != 1:
        raise ShapeError(f"matmul: trailing dim must be 1, got {a.shape} x {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = np.matmul(a.data[..., 0], b.data[..., 0])[..., None]
    B, M, K = a.shape[0], a.shape[1], a.shape[2]
    N = b.shape[2]
    _count_macs(B * M * K * N)
    return _emit("matmul", out, (a, b), {"a": a.data, "b": b.data})


@register_adjoint("matmul")
def _matmul_adj(node, g):
    a, b = node.saved["a"][..., 0], node.saved["b"][..., 0]
    gm = g[..., 0]
    da = np.matmul(gm, np.swapaxes(b, 1, 2))[..., None]
    db = np.matmul(np.swapaxes(a, 1, 2), gm)[..., None]
    return [(0, da), (1, db)]


# ---------------------------------------------------------------------------
# normalization + loss


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel y = scale*x + shift with (1,C,1,1) parameters.

    This is batch-norm-style normalization with the running statistics
    frozen at zero mean / unit variance and folded away, which keeps
    inference deterministic and batch-size independent.
    """
    _same_dtype(x, scale, shift)
    want = (1, x.shape[1], 1, 1)
    if scale.shape != want or shift.shape != want:
        raise ShapeError(
            f"channel_affine: params must be {want}, got {scale.shape}/{shift.shape}")
    out = x.data * scale.data + shift.data
    _count_ew(2 * out.size)
    return _emit("channel_affine", out, (x, scale, shift),
                 {"x": x.data, "scale": scale.data})


@register_adjoint("channel_affine")
def _channel_affine_adj(node, g):
    dscale = (g * node.saved["x"]).sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
    dshift = g.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
    return [(0, g * node.saved["scale"]), (1, dscale), (2, dshift)]


def softmax_xent(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of (B, n_classes, 1, 1) logits against int labels.

    Fused loss node: forward runs a numerically stable softmax; the adjoint
    is (softmax - onehot)/B.  Classified as an exponential op by the
    structural scans (it lives in the loss, never inside a model block).
    """
    B, nc, h, w = logits.shape
    if h != 1 or w != 1:
        raise ShapeError(f"softmax_xent: logits must be (B,C,1,1), got {logits.shape}")
    y = np.asarray(labels)
    if y.shape != (B,):
        raise ShapeError(f"softmax_xent: labels must have shape ({B},), got {y.shape}")
    if y.min() < 0 or y.max() >= nc:
        raise ValueError("softmax_xent: label out of range")
    z = logits.data[:, :, 0, 0]
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    nll = -np.log(np.maximum(p[np.arange(B), y], np.finfo(z.dtype).tiny))
    out = nll.mean().reshape(1, 1, 1, 1).astype(logits.dtype)
    _count_ew(5 * B * nc + B)
    return _emit("softmax_xent", out, (logits,), {"p": p, "y": y, "batch": B})


@register_adjoint("softmax_xent")
def _softmax_xent_adj(node, g):
    p, y, B = node.saved["p"], node.saved["y"], node.saved["batch"]
    d = p.copy()
    d[np.arange(B), y] -= 1.0
    d *= float(g.reshape(())) / B
    return [(0, d[:, :, None, None])]
