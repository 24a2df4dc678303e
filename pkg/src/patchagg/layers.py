"""Neural-network layers on top of :mod:`patchagg.tensor`.

The functional ops (``conv2d``, ``batch_norm`` ...) compute forward and
backward in numpy directly; the :class:`Module` classes hold parameters and
running state and dispatch to them.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, make_result, note_branch

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return v, v
    return int(v[0]), int(v[1])


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


# -- functional ops ------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of an NCHW batch with an FCkk kernel, zero padded."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    f, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {wc}")
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")
    oh = conv_output_size(h, kh, sh, ph)
    ow = conv_output_size(w, kw, sw, pw)

    # work channels-last so every im2col row is built from contiguous channel runs
    xh = x.data.transpose(0, 2, 3, 1)
    if ph or pw:
        xh = np.pad(xh, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(xh[:, ::sh, ::sw][:, :oh, :ow]).reshape(-1, c)
    else:
        win = sliding_window_view(xh, (kh, kw), axis=(1, 2))[:, ::sh, ::sw][:, :oh, :ow]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * c)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(f, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    # NCHW view over channels-last memory; the next conv transposes back for free
    out = out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = None
        if weight.requires_grad:
            gw = np.ascontiguousarray((g2.T @ cols).reshape(f, kh, kw, c).transpose(0, 3, 1, 2))
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            if (sh, sw) == (1, 1):
                gx = _conv_input_grad_stride1(g, weight.data, h, w, ph, pw)
            else:
                gcols = (g2 @ wmat).reshape(n, oh, ow, kh, kw, c)
                gxp = np.zeros((n, h + 2 * ph, w + 2 * pw, c), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw, :] += gcols[:, :, :, i, j, :]
                gx = gxp[:, ph:ph + h, pw:pw + w, :].transpose(0, 3, 1, 2)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv2d")


def _conv_input_grad_stride1(g: np.ndarray, weight: np.ndarray, h: int, w: int, ph: int, pw: int) -> np.ndarray:
    """Input gradient of a stride-1 conv: correlate the output gradient, padded
    by ``k - 1 - p``, with the spatially flipped kernel (channels swapped)."""
    f, c, kh, kw = weight.shape
    n = g.shape[0]
    gh = g.transpose(0, 2, 3, 1)
    qh, qw = kh - 1 - ph, kw - 1 - pw
    if kh == 1 and kw == 1:
        return (gh.reshape(-1, f) @ weight.reshape(f, c)).reshape(n, h, w, c).transpose(0, 3, 1, 2)
    gp = np.pad(gh, ((0, 0), (qh, qh), (qw, qw), (0, 0)))
    cols = sliding_window_view(gp, (kh, kw), axis=(1, 2))[:, :h, :w]
    cols = cols.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, kh * kw * f)
    wflip = weight[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(kh * kw * f, c)
    return (cols @ wflip).reshape(n, h, w, c).transpose(0, 3, 1, 2)


def maxpool2d(x: Tensor, kernel=2, stride=2) -> Tensor:
    """Non-overlapping 2x2 max pooling; ties go to the first element in the window."""
    if _pair(kernel) != (2, 2) or _pair(stride) != (2, 2):
        raise ValueError("only 2x2 kernels with stride 2 are supported")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial extents, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    note_branch(idx)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return make_result(out, (x,), backward, "maxpool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over all spatial positions per channel: [N,C,H,W] -> [N,C]."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape),)

    return make_result(out, (x,), backward, "global_avg_pool")


def global_max_pool(x: Tensor) -> Tensor:
    """Max over all spatial positions per channel: [N,C,H,W] -> [N,C].

    The gradient goes to the first position (row-major) attaining the max.
    """
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=-1)
    note_branch(idx)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        return (gflat.reshape(x.shape),)

    return make_result(out, (x,), backward, "global_max_pool")


def _channels_last(a: np.ndarray) -> np.ndarray:
    """[N,C,H,W] -> contiguous [N*H*W, C]; free when ``a`` already is a view of channels-last memory."""
    n, c, h, w = a.shape
    return np.ascontiguousarray(a.transpose(0, 2, 3, 1)).reshape(n * h * w, c)


def _channels_first(flat: np.ndarray, shape: tuple) -> np.ndarray:
    n, c, h, w = shape
    return flat.reshape(n, h, w, c).transpose(0, 3, 1, 2)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalization over (N, H, W) for 4-d or N for 2-d input.

    In training mode the running statistics are updated in place.
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm expects 2-d or 4-d input, got {x.shape}")
    # statistics are taken down the rows of a [samples, channels] matrix
    flat = _channels_last(x.data) if x.ndim == 4 else x.data
    m = flat.shape[0]
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch_norm in training mode needs a batch of at least 2")
        mu = flat.mean(axis=0)
        centred = flat - mu
        var = np.einsum("ij,ij->j", centred, centred) / m
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean.astype(flat.dtype), running_var.astype(flat.dtype)
        centred = flat - mu
    inv_std = (1.0 / np.sqrt(var + eps)).astype(flat.dtype)
    xhat = centred * inv_std
    out = xhat * gamma.data + beta.data
    if x.ndim == 4:
        out = _channels_first(out, x.shape)

    def backward(g):
        g2 = _channels_last(g) if x.ndim == 4 else g
        gb = g2.sum(axis=0)
        gg = np.einsum("ij,ij->j", g2, xhat)
        gx = None
        if x.requires_grad:
            scale = gamma.data * inv_std
            if training:
                gx = scale * (g2 - gb / m - xhat * (gg / m))
            else:
                gx = g2 * scale
            if x.ndim == 4:
                gx = _channels_first(gx, x.shape)
        return gx, (gg if gamma.requires_grad else None), (gb if beta.requires_grad else None)

    return make_result(out, (x, gamma, beta), backward, "batch_norm")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ W + b`` with ``W`` of shape [D, E]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "linear")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        rng = np.random.default_rng()
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 2:
        raise ShapeError("softmax needs at least two classes")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward, "softmax")


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


# -- modules -------------------------------------------------------------

class Module:
    """Minimal container: parameters are Tensor attributes, children are Module attributes."""

    training = True
    _buffer_names: tuple[str, ...] = ()

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, value in state.items():
            target = params[name].data if name in params else buffers[name]
            if target.shape != np.shape(value):
                raise ShapeError(f"{name}: expected shape {target.shape}, got {np.shape(value)}")
            target[...] = value

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (float64 is used for gradient checks)."""
        for m in self.modules():
            for name, value in list(vars(m).items()):
                if isinstance(value, Tensor) and value.requires_grad:
                    value.data = value.data.astype(dtype)
                    value.grad = None
            for name in m._buffer_names:
                setattr(m, name, getattr(m, name).astype(dtype))
        return self

    def describe(self) -> str:
        return type(self).__name__

    def manifest(self, prefix: str = "") -> list[str]:
        """One line per leaf layer: name, description, parameter shapes and count."""
        kids = list(self.children())
        if not kids:
            own = [(n, p) for n, p in vars(self).items() if isinstance(p, Tensor) and p.requires_grad]
            shapes = " ".join(f"{n}={'x'.join(map(str, p.shape))}" for n, p in own)
            count = sum(p.size for _, p in own)
            return [f"{prefix.rstrip('.') or type(self).__name__}\t{self.describe()}\t{shapes or '-'}\t{count}"]
        lines: list[str] = []
        for name, child in kids:
            lines.extend(child.manifest(f"{prefix}{name}."))
        return lines


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel, stride=1, padding=0, rng=None, bias: bool = True):
        kh, kw = _pair(kernel)
        self.stride = _pair(stride)
        self.padding = _pair(padding)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(he_normal(rng, (out_ch, in_ch, kh, kw), in_ch * kh * kw), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=np.float32), requires_grad=True) if bias else None

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def describe(self):
        f, c, kh, kw = self.weight.shape
        return f"Conv2d({c}->{f}, k={kh}x{kw}, s={self.stride[0]}x{self.stride[1]}, p={self.padding[0]}x{self.padding[1]})"


class BatchNorm(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          self.training, self.momentum, self.eps)

    def describe(self):
        return f"BatchNorm({self.gamma.shape[0]})"


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(he_normal(rng, (in_features, out_features), in_features), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=np.float32), requires_grad=True)

    def forward(self, x):
        return linear(x, self.weight, self.bias)

    def describe(self):
        d, e = self.weight.shape
        return f"Linear({d}->{e})"


class ReLU(Module):
    def forward(self, x):
        return x.relu()


class Sigmoid(Module):
    def forward(self, x):
        return x.sigmoid()


class MaxPool2d(Module):
    def forward(self, x):
        return maxpool2d(x)

    def describe(self):
        return "MaxPool2d(2x2, s=2x2)"


class GlobalAvgPool(Module):
    def forward(self, x):
        return global_avg_pool(x)


class GlobalMaxPool(Module):
    def forward(self, x):
        return global_max_pool(x)


class Softmax(Module):
    def __init__(self, axis: int = 1):
        self.axis = axis

    def forward(self, x):
        return softmax(x, self.axis)

    def describe(self):
        return f"Softmax(axis={self.axis})"


class Dropout(Module):
    def __init__(self, rate: float, rng: np.random.Generator | None = None):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def forward(self, x):
        return dropout(x, self.rate, self.training, self.rng)

    def describe(self):
        return f"Dropout({self.rate})"


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


def conv_bn_relu(in_ch, out_ch, kernel, stride=1, padding=0, rng=None) -> Sequential:
    # batch norm subtracts the channel mean, so a conv bias here would be dead weight
    return Sequential(Conv2d(in_ch, out_ch, kernel, stride, padding, rng, bias=False), BatchNorm(out_ch), ReLU())
