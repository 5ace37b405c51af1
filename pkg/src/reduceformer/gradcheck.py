"""Named gradient-check probes: scalar-valued graph builders paired with a
float64 input kept away from ReLU kinks and normalizer zeros.

Each builder returns ``(f, x)`` for :func:`reduceformer.graph.finite_diff_check`.
Builders that route through ReLUs advance their seed deterministically until
every pre-ReLU activation and every attention normalizer has a safe margin,
so central differences never straddle a kink.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import ops
from .attention import QkvBundle, reduce_former_attention, relu_linear_attention
from .model import AttentionBlock
from .tensor import Rng, Tensor

_KINK_MARGIN = 1e-3
_DEN_MARGIN = 1e-2
_MAX_SEED_TRIES = 25


def kink_safe_tensor(rng: Rng, shape, dtype=np.float64) -> Tensor:
    """Values with |x| in [0.1, 1.1]: uniform magnitudes, random signs."""
    mag = rng.uniform(shape, 0.1, 1.1, dtype)
    sign = np.where(rng.uniform(shape, -1.0, 1.0, dtype) >= 0, 1.0, -1.0)
    return Tensor((mag * sign).astype(dtype))


def _split_bundle(x: Tensor, d: int) -> QkvBundle:
    q, k, v = ops.split_channels(x, [d, d, d])
    return QkvBundle(q=q, k=k, v=v)


def _qk_margins_ok(q: np.ndarray, k: np.ndarray, eps: float) -> bool:
    """True when no relu input sits near its kink and the per-position
    normalizer is safely away from zero."""
    if min(np.abs(q).min(), np.abs(k).min()) < _KINK_MARGIN:
        return False
    rq, rk = np.maximum(q, 0), np.maximum(k, 0)
    sum_k = rk.sum(axis=(2, 3), keepdims=True)
    den = (rq * sum_k).sum(axis=1) + eps
    return bool(den.min() >= _DEN_MARGIN)


def _probe_relu(d, n, seed, eps):
    x = kink_safe_tensor(Rng(seed), (1, 2, 3, 3))
    return (lambda t: ops.sum_all(ops.relu(t))), x


def _probe_conv(d, n, seed, eps):
    rng = Rng(seed)
    x = Tensor(rng.uniform((1, 2, 5, 5), -1.0, 1.0, np.float64))
    w = rng.uniform((3, 2, 3, 3), -0.5, 0.5, np.float64)
    b = rng.uniform((3,), -0.5, 0.5, np.float64)
    return (lambda t: ops.sum_all(ops.conv2d(t, w, bias=b, stride=1, padding=1))), x


def _probe_reductions(d, n, seed, eps):
    x = Tensor(Rng(seed).uniform((1, 3, 4, 4), -1.0, 1.0, np.float64))

    def f(t):
        s = ops.global_sum_spatial(t)
        c = ops.channel_sum(t)
        return ops.add(ops.sum_all(ops.ew_mul_broadcast(s, s)),
                       ops.sum_all(ops.ew_mul_broadcast(c, c)))

    return f, x


def _probe_mul(d, n, seed, eps):
    x = Tensor(Rng(seed).uniform((1, 4, 3, 3), -1.0, 1.0, np.float64))

    def f(t):
        a, b = ops.split_channels(t, [2, 2])
        return ops.sum_all(ops.ew_mul_broadcast(a, ops.global_sum_spatial(b)))

    return f, x


def _probe_div(d, n, seed, eps):
    x = Tensor(Rng(seed).uniform((1, 4, 3, 3), 0.2, 1.2, np.float64))

    def f(t):
        a, b = ops.split_channels(t, [3, 1])
        den = ops.add_scalar(ops.channel_sum(a), 2.0)
        return ops.sum_all(ops.ew_div_broadcast(b, den))

    return f, x


def _attention_probe(attn_fn, d, n, seed, eps):
    h = int(np.sqrt(n))
    h = h if h * h == n else n
    w = n // h
    for trial in range(_MAX_SEED_TRIES):
        x = kink_safe_tensor(Rng(seed + 1000 * trial), (1, 3 * d, h, w))
        if _qk_margins_ok(x.data[:, :d], x.data[:, d:2 * d], eps):
            return (lambda t: ops.sum_all(attn_fn(_split_bundle(t, d), eps))), x
    raise RuntimeError("could not find a kink-safe attention probe input")


def _probe_rf_attn(d, n, seed, eps):
    return _attention_probe(reduce_former_attention, d, n, seed, eps)


def _probe_eq1_attn(d, n, seed, eps):
    return _attention_probe(relu_linear_attention, d, n, seed, eps)


def _block_margins_ok(block: AttentionBlock, P, x: Tensor, eps: float) -> bool:
    """Margins for the full attention block: the relu inputs are the
    local-context conv outputs, so they must be probed post-conv."""
    from .attention import LocalContextWeights, multi_scale_local_context

    weights = LocalContextWeights(
        point=P[f"{block.name}.qkv.weight"],
        dw=[P[f"{block.name}.dw{i}.weight"] for i in range(len(block.cfg.dw_kernels))])
    bundle = multi_scale_local_context(x, block.cfg, weights)
    return _qk_margins_ok(bundle.q.data, bundle.k.data, eps)


def _generic_block_params(block: AttentionBlock, rng: Rng) -> dict:
    """Parameters at a generic position: norm scales away from both 0 and
    their init values, so the check exercises every path through the block."""
    P = {}
    for name, shape, kind, fan in block.param_specs():
        if kind == "uniform":
            lim = np.sqrt(6.0 / max(fan, 1))
            P[name] = Tensor(rng.uniform(shape, -lim, lim, np.float64))
        elif name.endswith("norm_scale"):
            P[name] = Tensor(rng.uniform(shape, 0.5, 1.5, np.float64))
        else:
            P[name] = Tensor(rng.uniform(shape, -0.5, 0.5, np.float64))
    return P


def _probe_block(d, n, seed, eps):
    """Full reduced-width attention block (local context + attention +
    projection + residual), differentiated w.r.t. the block input."""
    c = max(d // 2, 1)      # scales=2, so the attention width is 2c
    h = int(np.sqrt(n))
    h = h if h * h == n else n
    w = n // h
    block = AttentionBlock("probe", c, 2, (5,), eps)
    for trial in range(_MAX_SEED_TRIES):
        rng = Rng(seed + 1000 * trial)
        P = _generic_block_params(block, rng)
        x = kink_safe_tensor(rng, (1, c, h, w))
        if _block_margins_ok(block, P, x, eps):
            return (lambda t: ops.sum_all(block.forward(P, t))), x
    raise RuntimeError("could not find a kink-safe block probe input")


PROBES: dict[str, Callable] = {
    "relu": _probe_relu,
    "conv": _probe_conv,
    "reductions": _probe_reductions,
    "mul": _probe_mul,
    "div": _probe_div,
    "rf-attn": _probe_rf_attn,
    "eq1-attn": _probe_eq1_attn,
    "block": _probe_block,
}


def build_probe(op: str, d: int = 8, n: int = 16, seed: int = 0,
                eps: float = 1e-6):
    """Return (f, x) for the named probe."""
    if op not in PROBES:
        raise ValueError(f"unknown gradcheck op {op!r} (have {sorted(PROBES)})")
    return PROBES[op](d, n, seed, eps)
