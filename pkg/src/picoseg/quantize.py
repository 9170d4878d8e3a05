"""Static INT8 post-training quantization and integer inference.

Pipeline: ``fold_model`` absorbs every normalization into its adjacent
convolution (W' = gamma*W, b' = gamma*b + beta), producing a flat list
of conv / resize / concat ops over named activation edges.
``calibrate`` runs float forward passes recording per-edge min/max
(always widened to include 0 so zero padding stays exact).
``quantize_model`` then fixes:

* weights: symmetric per-output-channel int8, scale = max|w|/127,
  zero_point 0 (all-zero channels fall back to scale 1.0);
* activations: asymmetric per-tensor int8 over [min, max] mapped onto
  [-128, 127];
* biases: int32 at scale s_in * s_w (per channel).

Integer inference accumulates q_w * (q_x - zp_x) products; the math is
done in int64 and verified to fit int32, since a real accumulator would
be 32-bit and silent wrap-around must be an error.  Requantization to
the next edge uses a float multiplier s_in*s_w/s_out with half-to-even
rounding; ReLU is a clamp at the output zero point; nearest-neighbor
resize copies codes unchanged (its output edge inherits the input
edge's parameters); concat requantizes both inputs onto the shared
output edge.  Only the final head edge is dequantized to float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, DegenerateRangeError, FormatError, NumericError, ShapeError
from .fileio import model_config_from_kv, model_config_to_kv, tensor_from_bytes, tensor_to_bytes
from .model import Model, ModelConfig
from .tensor import Tensor, conv_out_size

INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1


# ------------------------------------------------------------- folded IR

@dataclass
class FConv:
    name: str
    in_edge: str
    out_edge: str
    stride: int
    pad: int
    groups: int
    relu: bool
    weight: np.ndarray  # float32 [cout, cin/groups, kh, kw]
    bias: np.ndarray    # float32 [cout]


@dataclass
class FResize:
    in_edge: str
    out_edge: str


@dataclass
class FConcat:
    in_a: str
    in_b: str
    out_edge: str


@dataclass
class FoldedModel:
    """Norm-free float IR; op list is in execution order."""

    config: ModelConfig
    ops: list
    input_edge: str = "input"

    @property
    def output_edge(self) -> str:
        return self.ops[-1].out_edge

    def edges(self) -> list[str]:
        names = [self.input_edge]
        for op in self.ops:
            names.append(op.out_edge)
        return names

    def forward(self, x: np.ndarray, record: dict | None = None) -> np.ndarray:
        env = {self.input_edge: x.astype(np.float32)}
        for op in self.ops:
            if isinstance(op, FConv):
                out = kernels.conv2d(env[op.in_edge], op.weight, op.bias,
                                     op.stride, op.pad, op.groups)
                if op.relu:
                    out = np.maximum(out, 0)
            elif isinstance(op, FResize):
                out = kernels.resize2x(env[op.in_edge])
            else:
                out = np.concatenate([env[op.in_a], env[op.in_b]], axis=1)
            env[op.out_edge] = out
        if record is not None:
            for name in self.edges():
                v = env[name]
                lo, hi = float(v.min()), float(v.max())
                old = record.get(name)
                if old is not None:
                    lo, hi = min(lo, old[0]), max(hi, old[1])
                record[name] = (lo, hi)
        return env[self.output_edge]

    def count_macs_hw(self, h: int, w: int) -> int:
        sizes = {self.input_edge: (h, w)}
        total = 0
        for op in self.ops:
            if isinstance(op, FConv):
                hi, wi = sizes[op.in_edge]
                k = op.weight.shape[2]
                ho = conv_out_size(hi, k, op.stride, op.pad)
                wo = conv_out_size(wi, k, op.stride, op.pad)
                total += k * k * op.weight.shape[1] * op.weight.shape[0] * ho * wo
                sizes[op.out_edge] = (ho, wo)
            elif isinstance(op, FResize):
                hi, wi = sizes[op.in_edge]
                sizes[op.out_edge] = (2 * hi, 2 * wi)
            else:
                sizes[op.out_edge] = sizes[op.in_a]
        return total


def _fold_cna(cna, name: str, in_edge: str, out_edge: str) -> FConv:
    conv = cna.conv
    w = conv.weight.value.data.astype(np.float64)
    b = conv.bias.value.data.astype(np.float64)
    if cna.norm is not None:
        g = cna.norm.gamma.value.data.astype(np.float64)
        beta = cna.norm.beta.value.data.astype(np.float64)
        w = w * g[:, None, None, None]
        b = b * g + beta
    return FConv(name, in_edge, out_edge, conv.stride, conv.pad, conv.groups,
                 relu=cna.act is not None,
                 weight=w.astype(np.float32), bias=b.astype(np.float32))


def fold_model(model: Model) -> FoldedModel:
    """Flatten the U-Net into conv/resize/concat ops with norms folded."""
    ops: list = []

    def ds(block, name, in_edge):
        ops.append(_fold_cna(block.dw, f"{name}.dw", in_edge, f"{name}.dw"))
        ops.append(_fold_cna(block.pw, f"{name}.pw", f"{name}.dw", f"{name}.pw"))
        return f"{name}.pw"

    edge = "input"
    ops.append(_fold_cna(model.stem, "stem", edge, "stem"))
    edge = "stem"
    skips = []
    for i in range(len(model.enc)):
        for b, blk in enumerate(model.enc[i]):
            edge = ds(blk, f"enc{i}.b{b}", edge)
        skips.append(edge)
        edge = ds(model.down[i], f"down{i}", edge)
    for b, blk in enumerate(model.bott):
        edge = ds(blk, f"bott.b{b}", edge)
    for i in reversed(range(len(model.up))):
        ops.append(FResize(edge, f"up{i}.rs"))
        ops.append(_fold_cna(model.up[i].proj, f"up{i}.proj", f"up{i}.rs", f"up{i}.proj"))
        ops.append(FConcat(skips[i], f"up{i}.proj", f"cat{i}"))
        edge = f"cat{i}"
        for b, blk in enumerate(model.dec[i]):
            edge = ds(blk, f"dec{i}.b{b}", edge)
    edge = ds(model.head_ds, "head.ds", edge)
    head = model.head_conv
    ops.append(FConv("head.conv", edge, "head.conv", head.stride, head.pad, head.groups,
                     relu=False,
                     weight=head.weight.value.data.astype(np.float32),
                     bias=head.bias.value.data.astype(np.float32)))
    return FoldedModel(model.config, ops)


# ------------------------------------------------------------ calibration

def calibrate(fmodel: FoldedModel, calib_crops: list) -> dict:
    """Per-edge running (min, max) over all calibration forward passes."""
    if not calib_crops:
        raise ConfigError("calibration needs at least one sample")
    record: dict = {}
    for crop in calib_crops:
        t = crop.data if isinstance(crop, Tensor) else np.asarray(crop)
        if t.ndim != 4 or t.shape[1] != 3:
            raise ShapeError(f"calibration crop must be [N,3,H,W], got {t.shape}")
        fmodel.forward(t, record)
    for name, (lo, hi) in record.items():
        if not (np.isfinite(lo) and np.isfinite(hi)):
            raise NumericError(f"non-finite calibration range on edge {name!r}")
    return record


# ----------------------------------------------------------- quantization

@dataclass(frozen=True)
class QuantParams:
    """Affine code map q = round(x/scale) + zero_point for one edge."""

    scale: float
    zero_point: int

    def quantize(self, x: np.ndarray) -> np.ndarray:
        q = np.rint(x / self.scale) + self.zero_point
        return np.clip(q, -128, 127).astype(np.int8)

    def dequantize(self, q: np.ndarray) -> np.ndarray:
        return ((q.astype(np.int64) - self.zero_point) * self.scale).astype(np.float32)


def activation_qparams(lo: float, hi: float, edge: str,
                       on_degenerate: str = "raise") -> QuantParams:
    """Asymmetric per-tensor params over [lo, hi] widened to include 0."""
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    if hi == lo:
        if on_degenerate == "raise":
            raise DegenerateRangeError(
                f"degenerate (zero-width) activation range on edge {edge!r}; "
                f"widen the range by an epsilon or pass on_degenerate='widen'"
            )
        return QuantParams(1.0, 0)
    # scales are stored on disk as float32; fix that precision here so a
    # freshly quantized model and a reloaded one compute identically
    scale = float(np.float32((hi - lo) / 255.0))
    zp = int(np.clip(np.rint(-128.0 - lo / scale), -128, 127))
    return QuantParams(scale, zp)


def quantize_weights(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric per-output-channel int8; returns (codes, scales)."""
    absmax = np.abs(w).max(axis=(1, 2, 3))
    scales = np.where(absmax > 0, absmax / 127.0, 1.0).astype(np.float64)
    q = np.clip(np.rint(w / scales[:, None, None, None]), -127, 127).astype(np.int8)
    return q, scales


@dataclass
class QConv:
    name: str
    in_edge: str
    out_edge: str
    stride: int
    pad: int
    groups: int
    relu: bool
    weight: np.ndarray    # int8 [cout, cin/groups, kh, kw]
    w_scale: np.ndarray   # float64 [cout]
    bias: np.ndarray      # int32 [cout], scale s_in * s_w


@dataclass
class QResize:
    in_edge: str
    out_edge: str


@dataclass
class QConcat:
    in_a: str
    in_b: str
    out_edge: str


@dataclass
class QuantizedModel:
    """Immutable integer network: ops in execution order + edge table."""

    config: ModelConfig
    edge_params: dict            # edge name -> QuantParams
    edge_order: list             # deterministic edge listing
    ops: list
    input_edge: str = "input"

    @property
    def output_edge(self) -> str:
        return self.ops[-1].out_edge

    def count_macs_hw(self, h: int, w: int) -> int:
        sizes = {self.input_edge: (h, w)}
        total = 0
        for op in self.ops:
            if isinstance(op, QConv):
                hi, wi = sizes[op.in_edge]
                k = op.weight.shape[2]
                ho = conv_out_size(hi, k, op.stride, op.pad)
                wo = conv_out_size(wi, k, op.stride, op.pad)
                total += k * k * op.weight.shape[1] * op.weight.shape[0] * ho * wo
                sizes[op.out_edge] = (ho, wo)
            elif isinstance(op, QResize):
                hi, wi = sizes[op.in_edge]
                sizes[op.out_edge] = (2 * hi, 2 * wi)
            else:
                sizes[op.out_edge] = sizes[op.in_a]
        return total


def quantize_model(fmodel: FoldedModel, ranges: dict,
                   on_degenerate: str = "raise") -> QuantizedModel:
    """Fix all quantization parameters from calibration ranges."""
    if on_degenerate not in ("raise", "widen"):
        raise ConfigError(f"on_degenerate must be 'raise' or 'widen', got {on_degenerate!r}")
    edge_params: dict = {}
    edge_order = fmodel.edges()
    for name in edge_order:
        if name not in ranges:
            raise ConfigError(f"no calibration range for edge {name!r}")
    # resize output edges inherit their input's params so code copying is exact
    resize_alias = {op.out_edge: op.in_edge for op in fmodel.ops if isinstance(op, FResize)}
    for name in edge_order:
        if name in resize_alias:
            continue
        lo, hi = ranges[name]
        edge_params[name] = activation_qparams(lo, hi, name, on_degenerate)
    for out, src in resize_alias.items():
        edge_params[out] = edge_params[src]

    ops: list = []
    for op in fmodel.ops:
        if isinstance(op, FConv):
            qw, ws = quantize_weights(op.weight.astype(np.float64))
            s_in = edge_params[op.in_edge].scale
            qb = np.rint(op.bias.astype(np.float64) / (s_in * ws))
            if np.any(qb > INT32_MAX) or np.any(qb < INT32_MIN):
                raise NumericError(f"{op.name}: bias does not fit int32 after scaling")
            ops.append(QConv(op.name, op.in_edge, op.out_edge, op.stride, op.pad,
                             op.groups, op.relu, qw, ws, qb.astype(np.int32)))
        elif isinstance(op, FResize):
            ops.append(QResize(op.in_edge, op.out_edge))
        else:
            ops.append(QConcat(op.in_a, op.in_b, op.out_edge))
    return QuantizedModel(fmodel.config, edge_params, edge_order, ops)


# -------------------------------------------------------------- inference

def _requant_concat(q: np.ndarray, src: QuantParams, dst: QuantParams) -> np.ndarray:
    if src.scale == dst.scale and src.zero_point == dst.zero_point:
        return q
    m = src.scale / dst.scale
    out = np.rint((q.astype(np.float64) - src.zero_point) * m) + dst.zero_point
    return np.clip(out, -128, 127).astype(np.int8)


def quantized_forward(qmodel: QuantizedModel, rgb_crop: Tensor,
                      check_overflow: bool = True) -> Tensor:
    """Integer inference; returns float32 logits from the head edge.

    All conv accumulation happens on int64 views of int32-ranged data;
    any value that would not fit a 32-bit accumulator raises instead of
    wrapping.
    """
    s = qmodel.config.input_size
    if rgb_crop.shape != (1, 3, s, s):
        raise ShapeError(f"quantized_forward expects (1,3,{s},{s}), got {rgb_crop.shape}")
    in_p = qmodel.edge_params[qmodel.input_edge]
    env = {qmodel.input_edge: in_p.quantize(rgb_crop.data.astype(np.float64))}
    for op in qmodel.ops:
        if isinstance(op, QConv):
            p_in = qmodel.edge_params[op.in_edge]
            p_out = qmodel.edge_params[op.out_edge]
            x = env[op.in_edge].astype(np.int64) - p_in.zero_point
            acc = kernels.conv2d(x, op.weight.astype(np.int64), None,
                                 op.stride, op.pad, op.groups)
            acc += op.bias.astype(np.int64)[None, :, None, None]
            if check_overflow and (acc.max() > INT32_MAX or acc.min() < INT32_MIN):
                raise NumericError(f"{op.name}: int32 accumulator overflow "
                                   f"(|acc| up to {max(acc.max(), -acc.min())})")
            mult = (p_in.scale * op.w_scale / p_out.scale)[None, :, None, None]
            q = np.rint(acc * mult) + p_out.zero_point
            q = np.clip(q, -128, 127).astype(np.int8)
            if op.relu:
                q = np.maximum(q, np.int8(p_out.zero_point))
            env[op.out_edge] = q
        elif isinstance(op, QResize):
            env[op.out_edge] = kernels.resize2x(env[op.in_edge])
        else:
            p_out = qmodel.edge_params[op.out_edge]
            a = _requant_concat(env[op.in_a], qmodel.edge_params[op.in_a], p_out)
            b = _requant_concat(env[op.in_b], qmodel.edge_params[op.in_b], p_out)
            env[op.out_edge] = np.concatenate([a, b], axis=1)
    out_p = qmodel.edge_params[qmodel.output_edge]
    return Tensor(out_p.dequantize(env[qmodel.output_edge]))


def count_macs_quantized(qmodel: QuantizedModel, input_shape) -> int:
    """Same counting rule as the float graph, applied to the folded ops."""
    if len(input_shape) != 4:
        raise ShapeError(f"count_macs_quantized: need rank-4 shape, got {input_shape}")
    return qmodel.count_macs_hw(input_shape[2], input_shape[3])


def quantized_payload_bytes(qmodel: QuantizedModel) -> int:
    """Counting law: 1 byte per int8 element + 4 per int32 element."""
    total = 0
    for op in qmodel.ops:
        if isinstance(op, QConv):
            total += op.weight.size + 4 * op.bias.size
    return total


# ------------------------------------------------------------ file format

_OP_CODES = {"conv": 0, "resize": 1, "concat": 2}


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def _unpack_str(buf: bytes, pos: int) -> tuple[str, int]:
    if len(buf) < pos + 2:
        raise FormatError(f"truncated string length at byte {pos}")
    (n,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    if len(buf) < pos + n:
        raise FormatError(f"truncated string at byte {pos}")
    return buf[pos : pos + n].decode("utf-8"), pos + n


def serialize_quantized(qmodel: QuantizedModel) -> bytes:
    cfg = model_config_to_kv(qmodel.config).encode("utf-8")
    parts = [struct.pack("<4sB", b"PQNT", 1), struct.pack("<I", len(cfg)), cfg]
    parts.append(struct.pack("<I", len(qmodel.edge_order)))
    for name in qmodel.edge_order:
        p = qmodel.edge_params[name]
        parts.append(_pack_str(name))
        parts.append(struct.pack("<fb", np.float32(p.scale), p.zero_point))
    parts.append(struct.pack("<I", len(qmodel.ops)))
    for op in qmodel.ops:
        if isinstance(op, QConv):
            parts.append(struct.pack("<B", _OP_CODES["conv"]))
            parts.append(_pack_str(op.name))
            parts.append(_pack_str(op.in_edge))
            parts.append(_pack_str(op.out_edge))
            parts.append(struct.pack("<BBHB", op.stride, op.pad, op.groups, int(op.relu)))
            parts.append(tensor_to_bytes(Tensor(op.weight)))
            parts.append(tensor_to_bytes(Tensor(op.w_scale.astype(np.float64))))
            parts.append(tensor_to_bytes(Tensor(op.bias)))
        elif isinstance(op, QResize):
            parts.append(struct.pack("<B", _OP_CODES["resize"]))
            parts.append(_pack_str(op.in_edge))
            parts.append(_pack_str(op.out_edge))
        else:
            parts.append(struct.pack("<B", _OP_CODES["concat"]))
            parts.append(_pack_str(op.in_a))
            parts.append(_pack_str(op.in_b))
            parts.append(_pack_str(op.out_edge))
    return b"".join(parts)


def deserialize_quantized(buf: bytes) -> QuantizedModel:
    if len(buf) < 5 or buf[:4] != b"PQNT":
        raise FormatError(f"bad quantized-model magic {buf[:4]!r} at byte 0")
    if buf[4] != 1:
        raise FormatError(f"unsupported quantized-model version {buf[4]} at byte 4")
    (cfg_len,) = struct.unpack_from("<I", buf, 5)
    pos = 9
    if len(buf) < pos + cfg_len:
        raise FormatError(f"truncated config block at byte {pos}")
    config = model_config_from_kv(buf[pos : pos + cfg_len].decode("utf-8"))
    pos += cfg_len
    (n_edges,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    edge_order, edge_params = [], {}
    for _ in range(n_edges):
        name, pos = _unpack_str(buf, pos)
        scale, zp = struct.unpack_from("<fb", buf, pos)
        pos += 5
        edge_order.append(name)
        edge_params[name] = QuantParams(float(np.float32(scale)), int(zp))
    (n_ops,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    ops: list = []
    for _ in range(n_ops):
        code = buf[pos]
        pos += 1
        if code == _OP_CODES["conv"]:
            name, pos = _unpack_str(buf, pos)
            in_edge, pos = _unpack_str(buf, pos)
            out_edge, pos = _unpack_str(buf, pos)
            stride, pad, groups, relu = struct.unpack_from("<BBHB", buf, pos)
            pos += 5
            w, pos = tensor_from_bytes(buf, pos)
            ws, pos = tensor_from_bytes(buf, pos)
            b, pos = tensor_from_bytes(buf, pos)
            ops.append(QConv(name, in_edge, out_edge, stride, pad, groups, bool(relu),
                             w.data, ws.data, b.data))
        elif code == _OP_CODES["resize"]:
            in_edge, pos = _unpack_str(buf, pos)
            out_edge, pos = _unpack_str(buf, pos)
            ops.append(QResize(in_edge, out_edge))
        elif code == _OP_CODES["concat"]:
            in_a, pos = _unpack_str(buf, pos)
            in_b, pos = _unpack_str(buf, pos)
            out_edge, pos = _unpack_str(buf, pos)
            ops.append(QConcat(in_a, in_b, out_edge))
        else:
            raise FormatError(f"unknown op code {code} at byte {pos - 1}")
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after ops (byte {pos})")
    return QuantizedModel(config, edge_params, edge_order, ops)


def save_quantized(qmodel: QuantizedModel, path: str) -> None:
    with open(path, "wb") as f:
        f.write(serialize_quantized(qmodel))


def load_quantized(path: str) -> QuantizedModel:
    with open(path, "rb") as f:
        return deserialize_quantized(f.read())
