"""Reverse-mode automatic differentiation over numpy arrays.

Every operation returns a Tensor; when no input requires gradients the
returned Tensor carries no graph edges, so inference pays almost nothing.
Gradients are computed by `backprop(loss, params)` which walks the recorded
graph once in reverse topological order and accumulates additively across
fan-out.

Convolution is im2col + GEMM; its input gradient is computed as a
correlation of the (stride-dilated) output gradient with the flipped
kernel, so the backward pass is GEMM-bound as well.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .array import NdError, ShapeError

Array = np.ndarray


def _th(a: Array) -> torch.Tensor:
    """Zero-copy numpy -> torch view (copies non-contiguous or read-only
    inputs)."""
    if not a.flags.c_contiguous or not a.flags.writeable:
        a = np.ascontiguousarray(a)
        if not a.flags.writeable:
            a = a.copy()
    return torch.from_numpy(a)


def _np(t: torch.Tensor) -> Array:
    """Zero-copy torch -> numpy view."""
    return t.contiguous().numpy()


class Tensor:
    """A node on the computation tape: a value plus optional graph edges."""

    __slots__ = ("value", "requires_grad", "parents", "bwd", "name")

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        bwd: Callable[[Array], tuple] | None = None,
        name: str | None = None,
    ):
        self.value = np.asarray(value)
        self.requires_grad = requires_grad
        self.parents = parents
        self.bwd = bwd
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        tag = self.name or ("grad" if self.requires_grad else "const")
        return f"Tensor({tag}, shape={self.value.shape}, dtype={self.value.dtype})"


def param(value, name: str | None = None) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(np.asarray(value), requires_grad=True, name=name)


def constant(value) -> Tensor:
    """A tensor with no gradient (the tape treats it as a constant)."""
    return Tensor(np.asarray(value))


def detach(t: Tensor) -> Tensor:
    """Cut the graph: same value, no gradient flows through."""
    return Tensor(t.value)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(value: Array, parents: Sequence[Tensor], bwd) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(value, requires_grad=True, parents=tuple(parents), bwd=bwd)
    return Tensor(value)


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    gt = _th(grad)
    extra = grad.ndim - len(shape)
    if extra:
        gt = gt.sum(dim=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and gt.shape[i] != 1)
    if axes:
        gt = gt.sum(dim=axes, keepdim=True)
    return _np(gt)


# ---------------------------------------------------------------------------
# elementwise / shape ops


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = _np(_th(a.value) + _th(b.value))
    na, nb = a.requires_grad, b.requires_grad

    def bwd(g):
        return (
            _unbroadcast(g, a.value.shape) if na else None,
            _unbroadcast(g, b.value.shape) if nb else None,
        )

    return _make(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = _t(a)
    return _make(-a.value, (a,), lambda g: (-g,))


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = _np(_th(a.value) - _th(b.value))
    na, nb = a.requires_grad, b.requires_grad

    def bwd(g):
        return (
            _unbroadcast(g, a.value.shape) if na else None,
            _unbroadcast(-g, b.value.shape) if nb else None,
        )

    return _make(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = _np(_th(a.value) * _th(b.value))
    na, nb = a.requires_grad, b.requires_grad

    def bwd(g):
        gt = _th(g)
        return (
            _unbroadcast(_np(gt * _th(b.value)), a.value.shape) if na else None,
            _unbroadcast(_np(gt * _th(a.value)), b.value.shape) if nb else None,
        )

    return _make(out, (a, b), bwd)


def exp(a) -> Tensor:
    a = _t(a)
    out = _np(torch.exp(_th(a.value)))
    return _make(out, (a,), lambda g: (_np(_th(g) * _th(out)),))


def sigmoid(a) -> Tensor:
    a = _t(a)
    out = _np(torch.sigmoid(_th(a.value)))

    def bwd(g):
        ot = _th(out)
        return (_np(_th(g) * ot * (1.0 - ot)),)

    return _make(out, (a,), bwd)


def silu(a) -> Tensor:
    """Smooth self-gated nonlinearity x * sigmoid(x)."""
    a = _t(a)
    xt = _th(a.value)
    s = torch.sigmoid(xt)
    out = _np(xt * s)

    def bwd(g):
        return (_np(_th(g) * s * (1.0 + _th(a.value) * (1.0 - s))),)

    return _make(out, (a,), bwd)


def mean(a) -> Tensor:
    a = _t(a)
    n = a.value.size
    out = np.asarray(a.value.mean())
    return _make(out, (a,), lambda g: (np.broadcast_to(g / n, a.value.shape),))


def sum_all(a) -> Tensor:
    a = _t(a)
    out = np.asarray(a.value.sum())
    return _make(out, (a,), lambda g: (np.broadcast_to(g, a.value.shape),))


def reshape(a, shape) -> Tensor:
    a = _t(a)
    old = a.value.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def permute(a, axes: tuple) -> Tensor:
    a = _t(a)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.value.transpose(axes))
    return _make(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def matmul(a, b) -> Tensor:
    """2-D matrix product [M,K] @ [K,N]."""
    a, b = _t(a), _t(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError(
            f"matmul: expected 2-D operands, got {a.value.shape} @ {b.value.shape}"
        )
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(
            f"matmul: inner axis mismatch K={a.value.shape[1]} vs K={b.value.shape[0]}"
        )
    out = a.value @ b.value
    na, nb = a.requires_grad, b.requires_grad

    def bwd(g):
        return (
            g @ b.value.T if na else None,
            a.value.T @ g if nb else None,
        )

    return _make(out, (a, b), bwd)


def concat_channels(a, b) -> Tensor:
    """Concatenate two [N,H,W,C] tensors along the channel (last) axis."""
    a, b = _t(a), _t(b)
    ca = a.value.shape[-1]
    out = np.concatenate([a.value, b.value], axis=-1)

    def bwd(g):
        return np.ascontiguousarray(g[..., :ca]), np.ascontiguousarray(g[..., ca:])

    return _make(out, (a, b), bwd)


def upsample_nearest2x(a) -> Tensor:
    """[N,H,W,C] -> [N,2H,2W,C] nearest-neighbor."""
    a = _t(a)
    at = _th(a.value)
    out = _np(at.repeat_interleave(2, dim=1).repeat_interleave(2, dim=2))

    def bwd(g):
        n, h2, w2, c = g.shape
        return (_np(_th(g).reshape(n, h2 // 2, 2, w2 // 2, 2, c).sum(dim=(2, 4))),)

    return _make(out, (a,), bwd)


def global_avg_pool(a) -> Tensor:
    """[N,H,W,C] -> [N,C] spatial mean."""
    a = _t(a)
    n, h, w, c = a.value.shape
    out = a.value.mean(axis=(1, 2))

    def bwd(g):
        return (np.broadcast_to(g[:, None, None, :] / (h * w), a.value.shape).copy(),)

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# convolution (cross-correlation convention, no kernel flip)
#
# Activations are channels-last [N,H,W,C]; permuting such an array to NCHW
# gives exactly torch's channels_last memory format, so the heavy kernels
# below run on torch's oneDNN convolution without any layout copies. The
# backward formulas are wired explicitly on this tape (torch autograd is not
# involved anywhere).


def _nhwc_to_torch(x: Array) -> torch.Tensor:
    return _th(x).permute(0, 3, 1, 2)


def _torch_to_nhwc(t: torch.Tensor) -> Array:
    return _np(t.permute(0, 2, 3, 1))


def _conv_nhwc_forward(x: Array, k: Array, stride: int, padding: int) -> Array:
    y = F.conv2d(_nhwc_to_torch(x), _th(k), stride=stride, padding=padding)
    return _torch_to_nhwc(y)


def _conv_nhwc_backward(
    x: Array, k: Array, g: Array, stride: int, padding: int,
    need_input: bool, need_kernel: bool,
):
    dx_t, dw_t, _ = torch.ops.aten.convolution_backward(
        _nhwc_to_torch(g),
        _nhwc_to_torch(x),
        _th(k),
        None,
        (stride, stride),
        (padding, padding),
        (1, 1),
        False,
        (0, 0),
        1,
        (need_input, need_kernel, False),
    )
    dx = _torch_to_nhwc(dx_t) if need_input else None
    dw = _np(dw_t) if need_kernel else None
    return dx, dw


def conv2d_nhwc(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Batched 2-D cross-correlation, channels-last:
    [N,H,W,C] * [K,C,kh,kw] -> [N,H',W',K]."""
    x, kernel = _t(x), _t(kernel)
    if x.value.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D, got {x.value.shape}")
    if kernel.value.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be [K,C,kh,kw], got {kernel.value.shape}")
    n, h, w, c = x.value.shape
    kk, ck, kh, kw = kernel.value.shape
    if c != ck:
        raise ShapeError(f"conv2d: channel axis mismatch: input C={c}, kernel C={ck}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: spatial axes too small: input {h}x{w} (pad {padding}) "
            f"vs kernel {kh}x{kw}"
        )
    out = _conv_nhwc_forward(x.value, kernel.value, stride, padding)
    xv, kv = x.value, kernel.value
    nx, nk = x.requires_grad, kernel.requires_grad

    def bwd(g):
        return _conv_nhwc_backward(xv, kv, g, stride, padding, nx, nk)

    return _make(out, (x, kernel), bwd)


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Batched 2-D cross-correlation: [N,C,H,W] * [K,C,kh,kw] -> [N,K,H',W']."""
    x = _t(x)
    if x.value.ndim != 4:
        raise ShapeError(f"conv2d: input must be [N,C,H,W], got {x.value.shape}")
    y = conv2d_nhwc(permute(x, (0, 2, 3, 1)), kernel, stride, padding)
    return permute(y, (0, 3, 1, 2))


# ---------------------------------------------------------------------------
# group normalization


def _group_fold(per_channel: torch.Tensor, n: int, groups: int, cg: int) -> torch.Tensor:
    """[N,C] -> per-group sums expanded back to [N,1,C]."""
    g = per_channel.reshape(n, groups, cg).sum(dim=2, keepdim=True)
    return g.expand(n, groups, cg).reshape(n, 1, groups * cg)


def group_norm_nhwc(x, groups: int, gain, bias, eps: float = 1e-5) -> Tensor:
    """Channels-last group normalization: [N,H,W,C] with per-channel affine.

    Statistics are single-pass sums over the flattened spatial axis with a
    centered second pass for the variance.
    """
    x, gain, bias = _t(x), _t(gain), _t(bias)
    n, h, w, c = x.value.shape
    if c % groups != 0:
        raise ShapeError(f"group_norm: groups={groups} does not divide C={c}")
    cg = c // groups
    m = h * w * cg
    x3 = _th(x.value).reshape(n, h * w, c)
    mu = _group_fold(x3.sum(dim=1), n, groups, cg) / m
    xc = x3 - mu
    var = _group_fold((xc * xc).sum(dim=1), n, groups, cg) / m
    rstd = 1.0 / torch.sqrt(var + eps)
    xhat = xc
    xhat *= rstd
    out = _np(xhat * _th(gain.value) + _th(bias.value)).reshape(n, h, w, c)

    def bwd(g):
        g3 = _th(g).reshape(n, h * w, c)
        gx = g3 * xhat
        dgain = _np(gx.sum(dim=(0, 1)))
        dbias = _np(g3.sum(dim=(0, 1)))
        dxhat = g3 * _th(gain.value)
        t1 = _group_fold(dxhat.sum(dim=1), n, groups, cg) / m
        t2 = _group_fold((dxhat * xhat).sum(dim=1), n, groups, cg) / m
        dxhat -= t1
        dxhat -= xhat * t2
        dxhat *= rstd
        return _np(dxhat).reshape(n, h, w, c), dgain, dbias

    return _make(out, (x, gain, bias), bwd)


def group_norm(x, groups: int, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel-group) of [N,C,H,W] to zero mean and
    unit variance, then apply a per-channel affine transform."""
    x = _t(x)
    if x.value.ndim != 4:
        raise ShapeError(f"group_norm: input must be [N,C,H,W], got {x.value.shape}")
    y = group_norm_nhwc(permute(x, (0, 2, 3, 1)), groups, gain, bias, eps)
    return permute(y, (0, 3, 1, 2))


# ---------------------------------------------------------------------------
# self-attention over spatial positions


def self_attention_nhwc(x, qkv_weights, out_weights, heads: int = 1) -> Tensor:
    """Dense softmax(QK^T/sqrt(d))V over the H*W positions of [N,H,W,C].

    qkv_weights is [3C,C], out_weights is [C,C]; the residual addition is the
    caller's responsibility.
    """
    x, wqkv, wout = _t(x), _t(qkv_weights), _t(out_weights)
    n, h, w, c = x.value.shape
    if wqkv.value.shape != (3 * c, c):
        raise ShapeError(
            f"self_attention: qkv weights must be [3C,C]=[{3*c},{c}], "
            f"got {wqkv.value.shape}"
        )
    if wout.value.shape != (c, c):
        raise ShapeError(
            f"self_attention: out weights must be [C,C]=[{c},{c}], "
            f"got {wout.value.shape}"
        )
    if c % heads != 0:
        raise ShapeError(f"self_attention: heads={heads} does not divide C={c}")
    L = h * w
    dh = c // heads
    scale = 1.0 / np.sqrt(dh)

    xf = _th(x.value).reshape(n, L, c)
    qkv = xf @ _th(wqkv.value).T  # [N,L,3C]
    q, k, v = qkv.split(c, dim=2)

    def split_heads(a):  # [N,L,C] -> [N,heads,L,dh]
        return a.reshape(n, L, heads, dh).permute(0, 2, 1, 3)

    qh, kh_, vh = split_heads(q), split_heads(k), split_heads(v)
    att = torch.softmax((qh @ kh_.transpose(2, 3)) * scale, dim=-1)  # [N,h,L,L]
    oh = att @ vh  # [N,h,L,dh]
    o = oh.permute(0, 2, 1, 3).reshape(n, L, c)
    y = o @ _th(wout.value).T
    out = _np(y).reshape(n, h, w, c)

    def merge_heads(a):  # [N,heads,L,dh] -> [N,L,C]
        return a.permute(0, 2, 1, 3).reshape(n, L, c)

    def bwd(g):
        gy = _th(g).reshape(n, L, c)
        dwout = gy.reshape(-1, c).T @ o.reshape(-1, c)
        do = gy @ _th(wout.value)
        doh = split_heads(do)
        datt = doh @ vh.transpose(2, 3)
        dvh = att.transpose(2, 3) @ doh
        ds = att * (datt - (datt * att).sum(dim=-1, keepdim=True))
        dqh = (ds @ kh_) * scale
        dkh = (ds.transpose(2, 3) @ qh) * scale
        dqkv = torch.cat(
            [merge_heads(dqh), merge_heads(dkh), merge_heads(dvh)], dim=2
        )
        dwqkv = dqkv.reshape(-1, 3 * c).T @ xf.reshape(-1, c)
        dxf = dqkv @ _th(wqkv.value)
        return _np(dxf).reshape(n, h, w, c), _np(dwqkv), _np(dwout)

    return _make(out, (x, wqkv, wout), bwd)


def self_attention(x, qkv_weights, out_weights, heads: int = 1) -> Tensor:
    """Dense self-attention over the H*W positions of [N,C,H,W]."""
    x = _t(x)
    if x.value.ndim != 4:
        raise ShapeError(
            f"self_attention: input must be [N,C,H,W], got {x.value.shape}"
        )
    y = self_attention_nhwc(
        permute(x, (0, 2, 3, 1)), qkv_weights, out_weights, heads
    )
    return permute(y, (0, 3, 1, 2))


# ---------------------------------------------------------------------------
# classification loss


def cross_entropy(logits, labels: Array) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax logits."""
    logits = _t(logits)
    labels = np.asarray(labels)
    n, _ = logits.value.shape
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    out = np.asarray(-logp[np.arange(n), labels].mean())

    def bwd(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n),)

    return _make(out, (logits,), bwd)


# ---------------------------------------------------------------------------
# sinusoidal timestep embedding (no gradient: function of integers only)


def timestep_embedding(t, dim: int, T: int) -> Array:
    """Interleaved sin/cos of t at geometric frequencies spanning 1 .. 1e-4.

    t may be an int or an integer array; returns [len(t), dim] (or [dim])
    float32.
    """
    if dim % 2 != 0:
        raise ShapeError(f"timestep_embedding: dim must be even, got {dim}")
    scalar = np.isscalar(t)
    tv = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(tv < 0) or np.any(tv > T):
        raise NdError(f"timestep_embedding: t out of range [0,{T}]")
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = 10000.0 ** (-np.arange(half) / (half - 1))
    ang = tv[:, None] * freqs[None, :]
    emb = np.empty((tv.shape[0], dim), dtype=np.float32)
    emb[:, 0::2] = np.sin(ang)
    emb[:, 1::2] = np.cos(ang)
    return emb[0] if scalar else emb


# ---------------------------------------------------------------------------
# backward pass


def backprop(loss: Tensor, params: dict[str, Tensor]) -> dict[str, Array]:
    """Gradients of a scalar loss with respect to named parameter tensors.

    Raises NdError if the loss is not a finite scalar or a parameter is not
    reachable on the tape.
    """
    if loss.value.size != 1:
        raise NdError(f"backprop: loss must be scalar, got shape {loss.value.shape}")
    if not np.isfinite(loss.value).all():
        raise NdError("backprop: loss is not finite")

    # iterative topological order over grad-requiring nodes
    topo: list[Tensor] = []
    state: dict[int, int] = {}  # id -> 0 visiting, 1 done
    stack: list[Tensor] = [loss]
    while stack:
        node = stack[-1]
        nid = id(node)
        if state.get(nid) == 1:
            stack.pop()
            continue
        if state.get(nid) == 0:
            state[nid] = 1
            topo.append(node)
            stack.pop()
            continue
        state[nid] = 0
        for p in node.parents:
            if p.requires_grad and state.get(id(p)) != 1:
                stack.append(p)

    reachable = {id(n) for n in topo}
    for name, p in params.items():
        if not p.requires_grad:
            raise NdError(f"backprop: parameter '{name}' does not require gradients")
        if id(p) not in reachable:
            raise NdError(f"backprop: parameter '{name}' is not on the tape")

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(topo):
        if node.bwd is None:  # leaf: keep its accumulated gradient
            continue
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node.bwd(g)
        for p, pg in zip(node.parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            pid = id(p)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg

    return {
        name: grads.get(id(p), np.zeros_like(p.value)) for name, p in params.items()
    }
