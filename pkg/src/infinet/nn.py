"""Differentiable layers on channels-last ``(N, H, W, C)`` feature maps."""

from __future__ import annotations

import functools
import struct
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Node, Parameter, make_node
from .tensor import Tensor, full, trunc_normal

INIT_STD = 0.02


class Module:
    """Container that discovers parameters and sub-modules from its attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_params(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, Tensor]:
        return {name: p.value for name, p in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, Tensor]):
        own = dict(self.named_parameters())
        missing = own.keys() - state.keys()
        extra = state.keys() - own.keys()
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            t = state[name]
            if t.shape != p.shape:
                raise ValueError(f"{name}: shape {t.shape} does not match {p.shape}")
            p.value = t.astype(p.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, name: str):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


def _weight(shape, rng, dtype, std=INIT_STD) -> Parameter:
    return Parameter(trunc_normal(shape, std, rng, dtype))


def _const(shape, value, dtype) -> Parameter:
    return Parameter(full(shape, value, dtype), decay=False)


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


# ---------------------------------------------------------------------------
# linear

def linear(x: Node, weight: Node, bias: Node | None = None) -> Node:
    """``x @ W + b`` over the trailing axis."""
    c_in, c_out = weight.shape
    if x.shape[-1] != c_in:
        raise ValueError(f"linear expects {c_in} input channels, got {x.shape[-1]}")
    x2 = x.data.reshape(-1, c_in)
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out_shape = x.shape[:-1] + (c_out,)

    def vjp(g):
        g2 = g.reshape(-1, c_out)
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = x2.T @ g2
        return (gx, gw) if bias is None else (gx, gw, g2.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out.reshape(out_shape), parents, "linear", vjp)


class LinearLayer(Module):
    def __init__(self, c_in: int, c_out: int, rng=None, dtype=np.float64, bias: bool = True,
                 std: float = INIT_STD):
        rng = _rng(rng)
        self.weight = _weight((c_in, c_out), rng, dtype, std)
        self.bias = _const((c_out,), 0.0, dtype) if bias else None

    def forward(self, x: Node) -> Node:
        return linear_forward(self, x)


def linear_forward(layer: LinearLayer, x: Node) -> Node:
    return linear(x, layer.weight, layer.bias)


# ---------------------------------------------------------------------------
# depthwise convolution

# maps up to this many pixels use a dense per-channel Toeplitz matmul
TOEPLITZ_MAX_PIXELS = 144


@functools.lru_cache(maxsize=64)
def _toeplitz_index(H: int, W: int, K: int):
    """Valid (out-pixel, in-pixel, tap) triples for a same-padded KxK correlation."""
    P = (K - 1) // 2
    rows, cols, taps = [], [], []
    for h in range(H):
        for w in range(W):
            for i in range(K):
                hh = h + i - P
                if not 0 <= hh < H:
                    continue
                for j in range(K):
                    ww = w + j - P
                    if 0 <= ww < W:
                        rows.append(h * W + w)
                        cols.append(hh * W + ww)
                        taps.append(i * K + j)
    rows, cols, taps = (np.array(a, dtype=np.intp) for a in (rows, cols, taps))
    onehot = np.zeros((len(taps), K * K))
    onehot[np.arange(len(taps)), taps] = 1.0
    return rows, cols, taps, onehot


def _dw_toeplitz(x: np.ndarray, k: np.ndarray):
    """x (N,H,W,C), k (r,K,K,C) -> (r,N,H,W,C) plus a backward closure."""
    N, H, W, C = x.shape
    r, K = k.shape[0], k.shape[1]
    HW = H * W
    rows, cols, taps, onehot = _toeplitz_index(H, W, K)
    kflat = k.reshape(r, K * K, C).transpose(0, 2, 1)  # (r,C,KK)
    T = np.zeros((r, C, HW, HW), dtype=x.dtype)
    T[:, :, rows, cols] = kflat[:, :, taps]
    xm = np.ascontiguousarray(x.reshape(N, HW, C).transpose(2, 1, 0))  # (C,HW,N)
    y = T @ xm  # (r,C,HW,N)
    out = y.transpose(0, 3, 2, 1).reshape(r, N, H, W, C)

    def back(g):
        gm = np.ascontiguousarray(g.reshape(r, N, HW, C).transpose(0, 3, 2, 1))  # (r,C,HW,N)
        gT = gm @ np.ascontiguousarray(xm.transpose(0, 2, 1))  # (r,C,HW,HW)
        gk = (gT[:, :, rows, cols] @ onehot.astype(x.dtype))  # (r,C,KK)
        gk = gk.transpose(0, 2, 1).reshape(r, K, K, C)
        # contract over (branch, out-pixel) jointly
        Tt = T.transpose(1, 3, 0, 2).reshape(C, HW, r * HW)
        gx = Tt @ np.ascontiguousarray(gm.transpose(1, 0, 2, 3)).reshape(C, r * HW, N)  # (C,HW,N)
        gx = gx.transpose(2, 1, 0).reshape(N, H, W, C)
        return gx, gk

    return out, back


def _dw_taps(x: np.ndarray, k: np.ndarray):
    N, H, W, C = x.shape
    r, K = k.shape[0], k.shape[1]
    P = (K - 1) // 2
    xp = np.pad(x, ((0, 0), (P, P), (P, P), (0, 0)))
    out = np.zeros((r, N, H, W, C), dtype=x.dtype)
    for i in range(K):
        for j in range(K):
            out += xp[None, :, i:i + H, j:j + W, :] * k[:, i, j, None, None, None, :]

    def back(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(k)
        for i in range(K):
            for j in range(K):
                win = xp[:, i:i + H, j:j + W, :]
                gxp[:, i:i + H, j:j + W, :] += np.einsum("rnhwc,rc->nhwc", g, k[:, i, j, :])
                gk[:, i, j, :] = np.einsum("rnhwc,nhwc->rc", g, win)
        return gxp[:, P:P + H, P:P + W, :], gk

    return out, back


def depthwise_conv_branches(x: Node, kernels: Sequence[Node], biases: Sequence[Node | None]) -> Node:
    """Apply r depthwise filters to the same input; returns ``(r, N, H, W, C)``."""
    if x.data.ndim != 4:
        raise ValueError(f"depthwise conv expects (N,H,W,C), got {x.shape}")
    K = kernels[0].shape[0]
    if K % 2 == 0:
        raise ValueError(f"depthwise kernel size must be odd, got {K}")
    C = x.shape[3]
    for kn in kernels:
        if kn.shape != (K, K, C):
            raise ValueError(f"kernel shape {kn.shape} does not match ({K},{K},{C})")
    k = np.stack([kn.data for kn in kernels])
    H, W = x.shape[1:3]
    impl = _dw_toeplitz if H * W <= TOEPLITZ_MAX_PIXELS else _dw_taps
    out, back = impl(x.data, k)
    has_bias = [b is not None for b in biases]
    for i, b in enumerate(biases):
        if b is not None:
            out[i] += b.data

    def vjp(g):
        gx, gk = back(g)
        grads = [gx] + list(gk)
        grads += [g[i].sum(axis=(0, 1, 2)) for i, hb in enumerate(has_bias) if hb]
        return tuple(grads)

    parents = (x, *kernels, *[b for b in biases if b is not None])
    return make_node(out, parents, "dwconv", vjp)


class DepthwiseConv(Module):
    def __init__(self, channels: int, kernel_size: int = 7, rng=None, dtype=np.float64, bias: bool = True,
                 std: float = INIT_STD):
        if kernel_size % 2 == 0 or kernel_size < 1:
            raise ValueError(f"kernel size must be odd and positive, got {kernel_size}")
        rng = _rng(rng)
        self.kernel = _weight((kernel_size, kernel_size, channels), rng, dtype, std)
        self.bias = _const((channels,), 0.0, dtype) if bias else None

    @property
    def K(self) -> int:
        return self.kernel.shape[0]

    def forward(self, x: Node) -> Node:
        return dwconv_forward(self, x)


def dwconv_forward(layer: DepthwiseConv, x: Node) -> Node:
    return ag.take(depthwise_conv_branches(x, [layer.kernel], [layer.bias]), 0)


def dwconv_group_forward(layers: Sequence[DepthwiseConv], x: Node) -> Node:
    """Run a group of same-sized depthwise convs on one input, fused."""
    return depthwise_conv_branches(x, [l.kernel for l in layers], [l.bias for l in layers])


# ---------------------------------------------------------------------------
# layer norm

def layer_norm(x: Node, gamma: Node, beta: Node, eps: float = 1e-6) -> Node:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    C = xd.shape[-1]

    def vjp(g):
        red = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=red)
        gb = g.sum(axis=red)
        gxh = g * gamma.data
        gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True)
                    - xhat * (gxh * xhat).sum(axis=-1, keepdims=True) / C)
        return gx, gg, gb

    return make_node(out, (x, gamma, beta), "layernorm", vjp)


class LayerNormLayer(Module):
    def __init__(self, channels: int, eps: float = 1e-6, dtype=np.float64):
        self.gamma = _const((channels,), 1.0, dtype)
        self.beta = _const((channels,), 0.0, dtype)
        self.eps = eps

    def forward(self, x: Node) -> Node:
        return layernorm_forward(self, x)


def layernorm_forward(layer: LayerNormLayer, x: Node) -> Node:
    return layer_norm(x, layer.gamma, layer.beta, layer.eps)


# ---------------------------------------------------------------------------
# MLP

class MlpLayer(Module):
    def __init__(self, channels: int, ratio: float = 4.0, rng=None, dtype=np.float64):
        rng = _rng(rng)
        hidden = int(round(channels * ratio))
        if hidden < 1:
            raise ValueError(f"mlp hidden width must be >= 1, got {hidden}")
        self.fc1 = LinearLayer(channels, hidden, rng, dtype)
        self.fc2 = LinearLayer(hidden, channels, rng, dtype)

    def forward(self, x: Node) -> Node:
        return mlp_forward(self, x)


def mlp_forward(layer: MlpLayer, x: Node) -> Node:
    return layer.fc2(ag.gelu(layer.fc1(x)))


# ---------------------------------------------------------------------------
# strided convolution (stem / downsampling)

def strided_conv(x: Node, kernel: Node, bias: Node | None, stride: int) -> Node:
    """Valid cross-correlation with ``kernel`` of shape ``(K, K, C_in, C_out)``."""
    N, H, W, C_in = x.shape
    K, K2, kc_in, C_out = kernel.shape
    if kc_in != C_in:
        raise ValueError(f"strided conv expects {kc_in} input channels, got {C_in}")
    if H % stride or W % stride:
        raise ValueError(f"spatial dims {H}x{W} not divisible by stride {stride}")
    if H < K or W < K:
        raise ValueError(f"input {H}x{W} smaller than kernel {K}")
    Ho, Wo = (H - K) // stride + 1, (W - K) // stride + 1
    xd, kd = x.data, kernel.data
    span_h, span_w = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1

    def window(i, j):
        return xd[:, i:i + span_h:stride, j:j + span_w:stride, :]

    if K == stride:
        # non-overlapping patches: one matmul
        patches = xd[:, :Ho * K, :Wo * K].reshape(N, Ho, K, Wo, K, C_in).transpose(0, 1, 3, 2, 4, 5)
        patches = patches.reshape(N * Ho * Wo, K * K * C_in)
        out = (patches @ kd.reshape(K * K * C_in, C_out)).reshape(N, Ho, Wo, C_out)
    else:
        out = np.zeros((N, Ho, Wo, C_out), dtype=xd.dtype)
        for i in range(K):
            for j in range(K):
                out += window(i, j) @ kd[i, j]
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        gx = np.zeros_like(xd)
        gk = np.empty_like(kd)
        g2 = g.reshape(-1, C_out)
        if K == stride:
            gk[:] = (patches.T @ g2).reshape(K, K, C_in, C_out)
            gp = (g2 @ kd.reshape(K * K * C_in, C_out).T).reshape(N, Ho, Wo, K, K, C_in)
            gx[:, :Ho * K, :Wo * K] = gp.transpose(0, 1, 3, 2, 4, 5).reshape(N, Ho * K, Wo * K, C_in)
        else:
            for i in range(K):
                for j in range(K):
                    gx[:, i:i + span_h:stride, j:j + span_w:stride, :] += g @ kd[i, j].T
                    gk[i, j] = window(i, j).reshape(-1, C_in).T @ g2
        grads = (gx, gk)
        return grads if bias is None else grads + (g2.sum(axis=0),)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_node(out, parents, "strided_conv", vjp)


class StridedConv(Module):
    def __init__(self, c_in: int, c_out: int, kernel_size: int, stride: int, rng=None,
                 dtype=np.float64, bias: bool = True):
        rng = _rng(rng)
        self.kernel = _weight((kernel_size, kernel_size, c_in, c_out), rng, dtype)
        self.bias = _const((c_out,), 0.0, dtype) if bias else None
        self.stride = stride

    def forward(self, x: Node) -> Node:
        return strided_conv_forward(self, x)


def strided_conv_forward(layer: StridedConv, x: Node) -> Node:
    return strided_conv(x, layer.kernel, layer.bias, layer.stride)


def global_avg_pool(x: Node) -> Node:
    return ag.mean(x, axis=(1, 2))


# ---------------------------------------------------------------------------
# parameter accounting

def param_count(layer) -> int:
    """Closed-form parameter count for one layer type (independent of allocation)."""
    def nb(b):
        return 0 if b is None else b.value.size

    if isinstance(layer, LinearLayer):
        c_in, c_out = layer.weight.shape
        return c_in * c_out + nb(layer.bias)
    if isinstance(layer, DepthwiseConv):
        K, _, C = layer.kernel.shape
        return K * K * C + nb(layer.bias)
    if isinstance(layer, LayerNormLayer):
        return 2 * layer.gamma.shape[0]
    if isinstance(layer, MlpLayer):
        return param_count(layer.fc1) + param_count(layer.fc2)
    if isinstance(layer, StridedConv):
        K, _, c_in, c_out = layer.kernel.shape
        return K * K * c_in * c_out + nb(layer.bias)
    if isinstance(layer, Module):
        return layer.num_params()
    raise TypeError(f"not a layer: {type(layer).__name__}")


# ---------------------------------------------------------------------------
# serialization

MAGIC = b"INFN"
FORMAT_VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def save_tensors(path, tensors: Mapping[str, Tensor]):
    """Write named tensors to the little-endian INFN container."""
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        arr = np.ascontiguousarray(t.data)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_TAGS:
            raise TypeError(f"unsupported element type {arr.dtype}")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", _DTYPE_TAGS[dt]))
        parts.append(arr.astype(dt, copy=False).tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def load_tensors(path) -> dict[str, Tensor]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: not an INFN container")
    pos = 4

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise FormatError(f"{path}: truncated container")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, count = read("<II")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = read("<H")
        if pos + nlen > len(buf):
            raise FormatError(f"{path}: truncated container")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = read("<B")
        dims = read(f"<{rank}I")
        (tag,) = read("<B")
        if tag not in _TAG_DTYPES:
            raise FormatError(f"{path}: unknown element type tag {tag}")
        dt = _TAG_DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(buf):
            raise FormatError(f"{path}: truncated container")
        arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims)
        pos += nbytes
        out[name] = Tensor(arr.astype(dt.newbyteorder("=")))
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def save_params(module: Module, path):
    save_tensors(path, module.state_dict())


def load_params(module: Module, path):
    module.load_state_dict(load_tensors(path))

