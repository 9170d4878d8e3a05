"""Dense tensor container and slow, obviously-correct reference kernels.

``Tensor`` is the package-wide value currency: a C-contiguous row-major
numpy buffer restricted to four dtypes, with explicit shape/dtype checks
instead of numpy's silent promotion and broadcasting.  The convolution
and resize reference implementations in this module are deliberately
naive; every optimized path elsewhere in the package is tested against
them.

Conventions fixed here and relied on everywhere else:

* zero padding outside spatial bounds,
* row-major element order with the last axis fastest (NCHW: W fastest),
* float64 exists for gradient checking and oracles only; the production
  inference/training path is float32.
"""

from __future__ import annotations

import numpy as np

from .errors import DTypeError, ShapeError

DTYPES = {
    "float32": np.dtype(np.float32),
    "float64": np.dtype(np.float64),
    "int8": np.dtype(np.int8),
    "int32": np.dtype(np.int32),
}
_NP_TO_NAME = {v: k for k, v in DTYPES.items()}
_FLOAT_NAMES = ("float32", "float64")


class Tensor:
    """Dense N-dimensional array: contiguous row-major buffer plus dtype tag.

    The buffer is a numpy array; ``.data`` gives direct access for code
    that wants numpy semantics.  Construction rejects unsupported dtypes
    and rank-0 / zero-sized shapes.
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype: str | None = None):
        if dtype is not None and dtype not in DTYPES:
            raise DTypeError(f"unsupported dtype {dtype!r}; expected one of {sorted(DTYPES)}")
        arr = np.asarray(data, dtype=DTYPES[dtype] if dtype else None)
        if arr.dtype not in _NP_TO_NAME:
            if not isinstance(data, np.ndarray):
                # Python literals: ints land on int32, floats on float64.
                if np.issubdtype(arr.dtype, np.integer):
                    arr = arr.astype(np.int32)
                elif np.issubdtype(arr.dtype, np.floating):
                    arr = arr.astype(np.float64)
            if arr.dtype not in _NP_TO_NAME:
                raise DTypeError(
                    f"unsupported dtype {arr.dtype}; expected one of {sorted(DTYPES)}"
                )
        if arr.ndim == 0:
            raise ShapeError("rank-0 tensors are not supported (rank >= 1 required)")
        if arr.size == 0:
            raise ShapeError(f"zero-sized shape {arr.shape} is not supported")
        self.data = np.ascontiguousarray(arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> str:
        return _NP_TO_NAME[self.data.dtype]

    @property
    def numel(self) -> int:
        return self.data.size

    def is_float(self) -> bool:
        return self.dtype in _FLOAT_NAMES

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def astype(self, dtype: str) -> "Tensor":
        if dtype not in DTYPES:
            raise DTypeError(f"unsupported dtype {dtype!r}")
        return Tensor(self.data.astype(DTYPES[dtype]))

    def tolist(self):
        return self.data.tolist()

    @staticmethod
    def zeros(shape, dtype: str = "float32") -> "Tensor":
        if dtype not in DTYPES:
            raise DTypeError(f"unsupported dtype {dtype!r}")
        return Tensor(np.zeros(shape, dtype=DTYPES[dtype]))

    @staticmethod
    def full(shape, value, dtype: str = "float32") -> "Tensor":
        if dtype not in DTYPES:
            raise DTypeError(f"unsupported dtype {dtype!r}")
        return Tensor(np.full(shape, value, dtype=DTYPES[dtype]))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")


def _require_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise DTypeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype} (no silent promotion)")


def _require_float(a: Tensor, op: str) -> None:
    if not a.is_float():
        raise DTypeError(f"{op}: requires a float tensor, got {a.dtype}")


def _binary(op_name: str, fn, a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _require_same_shape(a, b, op_name)
        _require_same_dtype(a, b, op_name)
        return Tensor(fn(a.data, b.data).astype(a.data.dtype, copy=False))
    # scalar right-hand side is the one permitted broadcast
    return Tensor(fn(a.data, a.data.dtype.type(b)).astype(a.data.dtype, copy=False))


def add(a: Tensor, b) -> Tensor:
    return _binary("add", np.add, a, b)


def sub(a: Tensor, b) -> Tensor:
    return _binary("sub", np.subtract, a, b)


def mul(a: Tensor, b) -> Tensor:
    return _binary("mul", np.multiply, a, b)


def scalar_mul(a: Tensor, s: float) -> Tensor:
    return Tensor((a.data * a.data.dtype.type(s)).astype(a.data.dtype, copy=False))


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic: never exponentiates a positive argument."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    _require_float(a, "sigmoid")
    return Tensor(stable_sigmoid(a.data))


def relu(a: Tensor) -> Tensor:
    _require_float(a, "relu")
    return Tensor(np.maximum(a.data, a.data.dtype.type(0)))


def exp(a: Tensor) -> Tensor:
    _require_float(a, "exp")
    return Tensor(np.exp(a.data))


def log(a: Tensor) -> Tensor:
    _require_float(a, "log")
    return Tensor(np.log(a.data))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    return Tensor(np.clip(a.data, lo, hi).astype(a.data.dtype, copy=False))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar_mul": scalar_mul,
    "sigmoid": sigmoid,
    "relu": relu,
    "exp": exp,
    "log": log,
    "clamp": clamp,
}


def elementwise(op: str, a: Tensor, b=None, **kwargs) -> Tensor:
    """Dispatch by name to the elementwise operations above."""
    if op not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}")
    fn = _ELEMENTWISE[op]
    if b is None and not kwargs:
        return fn(a)
    if b is not None and not kwargs:
        return fn(a, b)
    return fn(a, **kwargs)


def conv_out_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d_reference(
    input: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
    groups: int = 1,
) -> Tensor:
    """Direct nested-loop 2D convolution (cross-correlation), zero padded.

    Slow by design; this is the oracle the optimized kernels are checked
    against.  Accumulation runs in float64 regardless of input dtype.
    """
    if len(input.shape) != 4 or len(weight.shape) != 4:
        raise ShapeError(
            f"conv2d_reference: need rank-4 input/weight, got {input.shape} and {weight.shape}"
        )
    _require_float(input, "conv2d_reference")
    _require_same_dtype(input, weight, "conv2d_reference")
    if stride < 1:
        raise ValueError(f"conv2d_reference: stride must be >= 1, got {stride}")
    if pad < 0:
        raise ValueError(f"conv2d_reference: pad must be >= 0, got {pad}")
    n, cin, h, w = input.shape
    cout, cin_g, kh, kw = weight.shape
    if cin % groups != 0 or cout % groups != 0:
        raise ShapeError(
            f"conv2d_reference: channels not divisible by groups={groups} "
            f"(input {input.shape}, weight {weight.shape})"
        )
    if cin_g != cin // groups:
        raise ShapeError(
            f"conv2d_reference: weight expects {cin_g}*{groups} input channels, "
            f"input has {cin} (input {input.shape}, weight {weight.shape})"
        )
    if bias is not None:
        _require_same_dtype(input, bias, "conv2d_reference")
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d_reference: bias shape {bias.shape} != ({cout},)")
    hout = conv_out_size(h, kh, stride, pad)
    wout = conv_out_size(w, kw, stride, pad)
    if hout < 1 or wout < 1:
        raise ShapeError(
            f"conv2d_reference: empty output for input {input.shape}, kernel {kh}x{kw}, "
            f"stride {stride}, pad {pad}"
        )
    x = input.data
    wt = weight.data
    cout_g = cout // groups
    out = np.zeros((n, cout, hout, wout), dtype=np.float64)
    for ni in range(n):
        for oc in range(cout):
            g = oc // cout_g
            for oh in range(hout):
                for ow in range(wout):
                    acc = 0.0
                    for ic in range(cin_g):
                        c = g * cin_g + ic
                        for ki in range(kh):
                            ih = oh * stride + ki - pad
                            if ih < 0 or ih >= h:
                                continue
                            for kj in range(kw):
                                iw = ow * stride + kj - pad
                                if iw < 0 or iw >= w:
                                    continue
                                acc += float(x[ni, c, ih, iw]) * float(wt[oc, ic, ki, kj])
                    if bias is not None:
                        acc += float(bias.data[oc])
                    out[ni, oc, oh, ow] = acc
    return Tensor(out.astype(input.data.dtype))


def resize_nearest_x2(input: Tensor) -> Tensor:
    """Replicate every pixel of an NCHW tensor into a 2x2 block."""
    if len(input.shape) != 4:
        raise ShapeError(f"resize_nearest_x2: need rank-4 input, got {input.shape}")
    return Tensor(input.data.repeat(2, axis=2).repeat(2, axis=3))
