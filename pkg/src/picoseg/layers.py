"""Trainable layer graph: analytic forward/backward, parameter registry,
and exact parameter/MAC accounting.

There is no autograd; every layer implements its own adjoint, and
``gradient_check`` holds the pair against central finite differences.
Caches are plain dicts owned by the caller: ``forward(x, cache)`` stores
whatever ``backward`` will need, ``backward`` raises ``StateError`` if
it was never filled.

Counting conventions (relied on by the budget tests):

* a convolution costs Kh*Kw*(Cin/groups)*Cout*Hout*Wout MACs per sample,
* normalization, activations, resizing and bias adds cost 0 MACs,
* ``count_params`` sums every trainable element: conv weights, biases,
  and the per-channel normalization scale/shift.

The ReLU subgradient at exactly 0 is 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, NumericError, ShapeError, StateError
from .tensor import DTYPES, Tensor, conv_out_size, stable_sigmoid


@dataclass
class LayerSpec:
    """Declarative description of a single layer."""

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 3
    stride: int = 1
    activation: str = "relu"

    KINDS = (
        "conv2d",
        "depthwise_separable",
        "downsample",
        "upsample",
        "concat_skip",
        "norm",
        "activation",
        "sigmoid_head",
    )


@dataclass
class ParamTensor:
    """A trainable tensor with its gradient accumulator and unique name."""

    value: Tensor
    grad: Tensor
    name: str

    def zero_grad(self) -> None:
        self.grad.data[...] = 0


def _make_param(shape, name: str, dtype: str) -> ParamTensor:
    return ParamTensor(Tensor.zeros(shape, dtype), Tensor.zeros(shape, dtype), name)


class Layer:
    """Base class: parameter iteration plus the forward/backward contract."""

    name = ""

    def params(self) -> list[ParamTensor]:
        return []

    def forward(self, x: Tensor, cache: dict | None = None) -> Tensor:
        raise NotImplementedError

    def backward(self, grad_out: Tensor, cache: dict) -> Tensor:
        raise NotImplementedError

    def macs(self, h: int, w: int) -> tuple[int, int, int]:
        """MAC count for one sample at spatial size (h, w), plus output size."""
        return 0, h, w

    def _need(self, cache: dict | None, key: str):
        if cache is None or key not in cache:
            raise StateError(f"{self.name or type(self).__name__}: backward before forward "
                             f"(cache missing {key!r})")
        return cache[key]


class Conv2d(Layer):
    """2D convolution with optional bias. Padding defaults to kernel//2."""

    def __init__(self, cin, cout, kernel=3, stride=1, pad=None, groups=1,
                 bias=True, name="conv", dtype="float32"):
        if cin < 1 or cout < 1 or kernel < 1 or stride < 1:
            raise ConfigError(f"{name}: bad conv config cin={cin} cout={cout} "
                              f"kernel={kernel} stride={stride}")
        if cin % groups or cout % groups:
            raise ConfigError(f"{name}: channels ({cin}->{cout}) not divisible by groups={groups}")
        self.cin, self.cout, self.kernel = cin, cout, kernel
        self.stride, self.groups = stride, groups
        self.pad = kernel // 2 if pad is None else pad
        self.name = name
        self.weight = _make_param((cout, cin // groups, kernel, kernel), f"{name}.weight", dtype)
        self.bias = _make_param((cout,), f"{name}.bias", dtype) if bias else None

    def params(self):
        return [self.weight] + ([self.bias] if self.bias else [])

    def forward(self, x: Tensor, cache=None) -> Tensor:
        if len(x.shape) != 4 or x.shape[1] != self.cin:
            raise ShapeError(f"{self.name}: expected (N,{self.cin},H,W) input, got {x.shape}")
        out = kernels.conv2d(x.data, self.weight.value.data,
                             self.bias.value.data if self.bias else None,
                             self.stride, self.pad, self.groups)
        if cache is not None:
            cache["x"] = x.data
        return Tensor(out)

    def backward(self, grad_out: Tensor, cache: dict) -> Tensor:
        x = self._need(cache, "x")
        g = grad_out.data
        gw, gb = kernels.conv2d_param_grad(g, x, self.weight.value.shape,
                                           self.stride, self.pad, self.groups,
                                           with_bias=self.bias is not None)
        self.weight.grad.data += gw
        if self.bias is not None:
            self.bias.grad.data += gb
        gx = kernels.conv2d_input_grad(g, self.weight.value.data, x.shape,
                                       self.stride, self.pad, self.groups)
        return Tensor(gx)

    def macs(self, h, w):
        ho = conv_out_size(h, self.kernel, self.stride, self.pad)
        wo = conv_out_size(w, self.kernel, self.stride, self.pad)
        per_out = self.kernel * self.kernel * (self.cin // self.groups)
        return per_out * self.cout * ho * wo, ho, wo


class ChannelNorm(Layer):
    """Per-channel scale/shift normalization with statistics frozen at
    identity (mean 0, variance 1), i.e. y = gamma * x + beta.

    Keeping the statistics folded from the start makes the layer exactly
    foldable into the adjacent convolution for integer inference, and the
    checkpoint holds nothing but trainable parameters.
    """

    def __init__(self, channels, name="norm", dtype="float32"):
        self.channels = channels
        self.name = name
        self.gamma = _make_param((channels,), f"{name}.gamma", dtype)
        self.beta = _make_param((channels,), f"{name}.beta", dtype)
        self.gamma.value.data[...] = 1

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x: Tensor, cache=None) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"{self.name}: expected {self.channels} channels, got {x.shape}")
        if cache is not None:
            cache["x"] = x.data
        g = self.gamma.value.data[None, :, None, None]
        b = self.beta.value.data[None, :, None, None]
        return Tensor(x.data * g + b)

    def backward(self, grad_out: Tensor, cache: dict) -> Tensor:
        x = self._need(cache, "x")
        g = grad_out.data
        self.gamma.grad.data += np.einsum("nchw,nchw->c", g, x)
        self.beta.grad.data += g.sum(axis=(0, 2, 3))
        return Tensor(g * self.gamma.value.data[None, :, None, None])


class ReLU(Layer):
    """Elementwise max(x, 0); subgradient at 0 is 0."""

    def __init__(self, name="relu"):
        self.name = name

    def forward(self, x: Tensor, cache=None) -> Tensor:
        if cache is not None:
            cache["mask"] = x.data > 0
        return Tensor(np.maximum(x.data, x.data.dtype.type(0)))

    def backward(self, grad_out: Tensor, cache: dict) -> Tensor:
        mask = self._need(cache, "mask")
        return Tensor(grad_out.data * mask)


class SigmoidHead(Layer):
    """Parameterless logistic layer turning logits into probabilities."""

    def __init__(self, name="sigmoid_head"):
        self.name = name

    def forward(self, x: Tensor, cache=None) -> Tensor:
        p = stable_sigmoid(x.data)
        if cache is not None:
            cache["p"] = p
        return Tensor(p)

    def backward(self, grad_out: Tensor, cache: dict) -> Tensor:
        p = self._need(cache, "p")
        return Tensor(grad_out.data * p * (1 - p))


class ConcatSkip(Layer):
    """Concatenate (skip, x) along the channel axis."""

    def __init__(self, name="concat"):
        self.name = name

    def forward(self, skip: Tensor, x: Tensor = None, cache=None) -> Tensor:  # type: ignore[override]
        if x is None:
            raise ShapeError(f"{self.name}: needs two inputs")
        if skip.shape[0] != x.shape[0] or skip.shape[2:] != x.shape[2:]:
            raise ShapeError(
                f"{self.name}: spatial/batch mismatch {skip.shape} vs {x.shape}"
            )
        if cache is not None:
            cache["split"] = skip.shape[1]
        return Tensor(np.concatenate([skip.data, x.data], axis=1))

    def backward(self, grad_out: Tensor, cache: dict):
        split = self._need(cache, "split")
        g = grad_out.data
        return Tensor(g[:, :split].copy()), Tensor(g[:, split:].copy())


class ConvNormAct(Layer):
    """Convolution followed by optional ChannelNorm and optional ReLU.

    This is the unit the quantizer folds: norm scale/shift are absorbed
    into the convolution weights/bias, ReLU becomes a clamp.
    """

    def __init__(self, cin, cout, kernel=3, stride=1, pad=None, groups=1,
                 norm=True, act=True, name="cna", dtype="float32"):
        self.name = name
        self.conv = Conv2d(cin, cout, kernel, stride, pad, groups,
                           bias=True, name=f"{name}.conv", dtype=dtype)
        self.norm = ChannelNorm(cout, f"{name}.norm", dtype) if norm else None
        self.act = ReLU(f"{name}.relu") if act else None

    def params(self):
        ps = self.conv.params()
        if self.norm:
            ps += self.norm.params()
        return ps

    def forward(self, x: Tensor, cache=None) -> Tensor:
        sub = None if cache is None else cache.setdefault("conv", {})
        t = self.conv.forward(x, sub)
        if self.norm:
            t = self.norm.forward(t, None if cache is None else cache.setdefault("norm", {}))
        if self.act:
            t = self.act.forward(t, None if cache is None else cache.setdefault("act", {}))
        return t

    def backward(self, grad_out: Tensor, cache: dict) -> Tensor:
        g = grad_out
        if self.act:
            g = self.act.backward(g, self._need(cache, "act"))
        if self.norm:
            g = self.norm.backward(g, self._need(cache, "norm"))
        return self.conv.backward(g, self._need(cache, "conv"))

    def macs(self, h, w):
        return self.conv.macs(h, w)


class DepthwiseSeparable(Layer):
    """Depthwise KxK conv then pointwise 1x1 conv, each with norm + act.

    stride applies to the depthwise stage; stride=2 is the downsampling
    block used between encoder stages.
    """

    def __init__(self, cin, cout, kernel=3, stride=1, norm=True, act=True,
                 name="ds", dtype="float32"):
        if kernel < 1:
            raise ConfigError(f"{name}: depthwise_separable requires kernel >= 1")
        self.name = name
        self.dw = ConvNormAct(cin, cin, kernel, stride, None, groups=cin,
                              norm=norm, act=act, name=f"{name}.dw", dtype=dtype)
        self.pw = ConvNormAct(cin, cout, 1, 1, 0, 1,
                              norm=norm, act=act, name=f"{name}.pw", dtype=dtype)

    def params(self):
        return self.dw.params() + self.pw.params()

    def forward(self, x: Tensor, cache=None) -> Tensor:
        t = self.dw.forward(x, None if cache is None else cache.setdefault("dw", {}))
        return self.pw.forward(t, None if cache is None else cache.setdefault("pw", {}))

    def backward(self, grad_out: Tensor, cache: dict) -> Tensor:
        g = self.pw.backward(grad_out, self._need(cache, "pw"))
        return self.dw.backward(g, self._need(cache, "dw"))

    def macs(self, h, w):
        m1, h, w = self.dw.macs(h, w)
        m2, h, w = self.pw.macs(h, w)
        return m1 + m2, h, w


class Upsample(Layer):
    """Nearest 2x resize followed by a pointwise projection (norm + act)."""

    def __init__(self, cin, cout, norm=True, act=True, name="up", dtype="float32"):
        self.name = name
        self.proj = ConvNormAct(cin, cout, 1, 1, 0, 1, norm=norm, act=act,
                                name=f"{name}.proj", dtype=dtype)

    def params(self):
        return self.proj.params()

    def forward(self, x: Tensor, cache=None) -> Tensor:
        t = Tensor(kernels.resize2x(x.data))
        return self.proj.forward(t, None if cache is None else cache.setdefault("proj", {}))

    def backward(self, grad_out: Tensor, cache: dict) -> Tensor:
        g = self.proj.backward(grad_out, self._need(cache, "proj"))
        return Tensor(kernels.resize2x_grad(g.data))

    def macs(self, h, w):
        return self.proj.macs(2 * h, 2 * w)


def build_layer(spec: LayerSpec, dtype: str = "float32", name: str | None = None) -> Layer:
    """Instantiate a layer from its declarative spec."""
    if spec.kind not in LayerSpec.KINDS:
        raise ConfigError(f"unknown layer kind {spec.kind!r}")
    name = name or spec.kind
    act = spec.activation == "relu"
    if spec.activation not in ("relu", "none"):
        raise ConfigError(f"{name}: unknown activation {spec.activation!r}")
    if spec.kind == "conv2d":
        return Conv2d(spec.in_channels, spec.out_channels, spec.kernel,
                      spec.stride, name=name, dtype=dtype)
    if spec.kind == "depthwise_separable":
        return DepthwiseSeparable(spec.in_channels, spec.out_channels, spec.kernel,
                                  spec.stride, act=act, name=name, dtype=dtype)
    if spec.kind == "downsample":
        return DepthwiseSeparable(spec.in_channels, spec.out_channels, spec.kernel,
                                  stride=2, act=act, name=name, dtype=dtype)
    if spec.kind == "upsample":
        return Upsample(spec.in_channels, spec.out_channels, act=act, name=name, dtype=dtype)
    if spec.kind == "concat_skip":
        return ConcatSkip(name)
    if spec.kind == "norm":
        return ChannelNorm(spec.in_channels, name, dtype)
    if spec.kind == "activation":
        return ReLU(name)
    return SigmoidHead(name)


def count_params(obj) -> int:
    """Total trainable elements of a layer or model."""
    return sum(p.value.numel for p in obj.params())


def count_macs(model, input_shape) -> int:
    """Multiply-accumulate count at batch size 1 for the given input shape."""
    if len(input_shape) != 4:
        raise ShapeError(f"count_macs: need a rank-4 input shape, got {input_shape}")
    return model.count_macs_hw(input_shape[2], input_shape[3])


def check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        idx = np.argwhere(~np.isfinite(arr))[0]
        raise NumericError(f"{name}: non-finite value at element {tuple(int(i) for i in idx)}")


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradient_check(layer: Layer, x: Tensor, eps: float = 1e-5, seed: int = 0,
                   max_elements: int | None = None) -> float:
    """Central finite differences over every parameter and input element.

    A fixed random projection R turns the layer output into a scalar
    L = sum(forward(x) * R); the analytic gradients come from one
    backward pass with grad_out = R.  Works in the dtype of ``x``
    (float64 strongly recommended).  ``max_elements`` caps the number of
    probed elements per tensor for large layers; None means exhaustive.
    Returns the max over probed elements of
    |analytic - numeric| / max(1e-12, |analytic| + |numeric|).
    """
    rng = np.random.default_rng(seed)
    dt = DTYPES[x.dtype]

    cache: dict = {}
    out = layer.forward(x, cache)
    r = rng.standard_normal(out.shape).astype(dt)
    for p in layer.params():
        p.zero_grad()
    gin = layer.backward(Tensor(r.copy()), cache)
    check_finite("gradient_check/analytic", gin.data)

    def scalar(xt: Tensor) -> float:
        return float(np.sum(layer.forward(xt).data * r))

    worst = 0.0
    # input elements
    flat = x.data.reshape(-1)
    idxs = range(flat.size)
    if max_elements is not None and flat.size > max_elements:
        idxs = rng.choice(flat.size, size=max_elements, replace=False)
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + eps
        lp = scalar(x)
        flat[i] = orig - eps
        lm = scalar(x)
        flat[i] = orig
        num = (lp - lm) / (2 * eps)
        worst = max(worst, _rel_err(gin.data.reshape(-1)[i], np.asarray(num)))
    # parameter elements
    for p in layer.params():
        pf = p.value.data.reshape(-1)
        gf = p.grad.data.reshape(-1)
        idxs = range(pf.size)
        if max_elements is not None and pf.size > max_elements:
            idxs = rng.choice(pf.size, size=max_elements, replace=False)
        for i in idxs:
            orig = pf[i]
            pf[i] = orig + eps
            lp = scalar(x)
            pf[i] = orig - eps
            lm = scalar(x)
            pf[i] = orig
            num = (lp - lm) / (2 * eps)
            worst = max(worst, _rel_err(gf[i], np.asarray(num)))
    return worst
