"""Bit-exact on-disk formats: tensors, images, checkpoints, configs.

Everything is fixed little-endian so files written on any platform load
identically on any other.  ``save -> load -> save`` must be
byte-identical for every format here; the tests enforce it.

Tensor file ("PTSR"):
    magic "PTSR" | version u8=1 | dtype u8 | rank u8 | pad u8=0
    | dims rank*u32 LE | payload row-major LE
    dtype codes: 0=float32, 1=int8, 2=int32, 3=float64.

Checkpoint ("PCKP"):
    magic "PCKP" | version u8=1 | config_len u32 | config key=value text
    | n_records u32 | records of (name_len u16 | name utf-8 | PTSR bytes)

Images are binary PPM (P6) / PGM (P5), maxval 255 only; ASCII variants
are rejected.  Config files are UTF-8 "key = value" lines with "#"
comments and comma-separated lists.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataError, FormatError
from .model import Model, ModelConfig, build
from .tensor import Tensor

_DTYPE_CODE = {"float32": 0, "int8": 1, "int32": 2, "float64": 3}
_CODE_DTYPE = {v: k for k, v in _DTYPE_CODE.items()}
_LE = {"float32": "<f4", "int8": "<i1", "int32": "<i4", "float64": "<f8"}
_ITEMSIZE = {"float32": 4, "int8": 1, "int32": 4, "float64": 8}


# ---------------------------------------------------------------- tensors

def tensor_to_bytes(t: Tensor) -> bytes:
    head = struct.pack("<4sBBBB", b"PTSR", 1, _DTYPE_CODE[t.dtype], len(t.shape), 0)
    dims = struct.pack(f"<{len(t.shape)}I", *t.shape)
    return head + dims + np.ascontiguousarray(t.data).astype(_LE[t.dtype]).tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one embedded tensor; returns (tensor, offset past it)."""
    if len(buf) < offset + 8:
        raise FormatError(f"truncated tensor header at byte {offset}: "
                          f"need 8 bytes, have {len(buf) - offset}")
    magic, version, dcode, rank, pad = struct.unpack_from("<4sBBBB", buf, offset)
    if magic != b"PTSR":
        raise FormatError(f"bad magic {magic!r} at byte {offset}, expected b'PTSR'")
    if version != 1:
        raise FormatError(f"unsupported tensor version {version} at byte {offset + 4}")
    if dcode not in _CODE_DTYPE:
        raise FormatError(f"unknown dtype code {dcode} at byte {offset + 5}")
    if rank < 1:
        raise FormatError(f"rank must be >= 1, got {rank} at byte {offset + 6}")
    if pad != 0:
        raise FormatError(f"nonzero pad byte {pad} at byte {offset + 7}")
    dims_at = offset + 8
    if len(buf) < dims_at + 4 * rank:
        raise FormatError(f"truncated dims at byte {dims_at}: need {4 * rank} bytes, "
                          f"have {len(buf) - dims_at}")
    dims = struct.unpack_from(f"<{rank}I", buf, dims_at)
    if any(d == 0 for d in dims):
        raise FormatError(f"zero dimension in dims {dims} at byte {dims_at}")
    dtype = _CODE_DTYPE[dcode]
    count = 1
    for d in dims:
        count *= d
    nbytes = count * _ITEMSIZE[dtype]
    payload_at = dims_at + 4 * rank
    if len(buf) < payload_at + nbytes:
        raise FormatError(f"truncated payload at byte {payload_at}: expected "
                          f"{nbytes} bytes, have {len(buf) - payload_at}")
    arr = np.frombuffer(buf, dtype=_LE[dtype], count=count, offset=payload_at)
    arr = arr.reshape(dims).astype(dtype)
    return Tensor(arr), payload_at + nbytes


def save_tensor(t: Tensor, path: str) -> None:
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(t))


def load_tensor(path: str) -> Tensor:
    with open(path, "rb") as f:
        buf = f.read()
    t, end = tensor_from_bytes(buf, 0)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after payload "
                          f"(byte {end})")
    return t


# ----------------------------------------------------------------- images

def _read_pnm_header(buf: bytes, path: str, magic: bytes) -> tuple[int, int, int]:
    """Parse 'P6/P5 W H MAXVAL' with comments; returns (w, h, payload offset)."""
    if buf[:2] in (b"P3", b"P2"):
        raise FormatError(f"{path}: ASCII PNM ({buf[:2].decode()}) not supported, "
                          f"use binary {magic.decode()}")
    if buf[:2] != magic:
        raise FormatError(f"{path}: bad magic {buf[:2]!r} at byte 0, expected {magic!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(buf):
            raise FormatError(f"{path}: truncated header at byte {pos}")
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        elif c.isdigit():
            start = pos
            while pos < len(buf) and buf[pos : pos + 1].isdigit():
                pos += 1
            fields.append(int(buf[start:pos]))
        else:
            raise FormatError(f"{path}: unexpected byte {c!r} in header at byte {pos}")
    # exactly one whitespace byte separates maxval from the payload
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError(f"{path}: missing whitespace after maxval at byte {pos}")
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported, got {maxval}")
    if w < 1 or h < 1:
        raise FormatError(f"{path}: bad image size {w}x{h}")
    return w, h, pos


def load_ppm(path: str) -> Tensor:
    """Binary P6 to a float32 [1,3,H,W] tensor scaled to [0,1]."""
    with open(path, "rb") as f:
        buf = f.read()
    w, h, pos = _read_pnm_header(buf, path, b"P6")
    need = 3 * w * h
    if len(buf) - pos != need:
        raise FormatError(f"{path}: payload at byte {pos} expected {need} bytes, "
                          f"have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    arr = arr.reshape(h, w, 3).transpose(2, 0, 1)[None].astype(np.float32) / 255.0
    return Tensor(arr)


def load_pgm(path: str) -> Tensor:
    """Binary P5 mask with values {0,255} to a float32 {0,1} [1,1,H,W] tensor."""
    with open(path, "rb") as f:
        buf = f.read()
    w, h, pos = _read_pnm_header(buf, path, b"P5")
    need = w * h
    if len(buf) - pos != need:
        raise FormatError(f"{path}: payload at byte {pos} expected {need} bytes, "
                          f"have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    bad = (arr != 0) & (arr != 255)
    if bad.any():
        raise DataError(f"{path}: mask byte {int(np.argmax(bad)) + pos} is "
                        f"{int(arr[np.argmax(bad)])}, masks must be 0 or 255")
    arr = (arr.reshape(h, w)[None, None] // 255).astype(np.float32)
    return Tensor(arr)


def save_ppm(image: Tensor, path: str) -> None:
    """Float [1,3,H,W] in [0,1] to binary P6 (values rounded to bytes)."""
    if len(image.shape) != 4 or image.shape[0] != 1 or image.shape[1] != 3:
        raise DataError(f"save_ppm expects [1,3,H,W], got {image.shape}")
    v = image.data
    if v.min() < 0 or v.max() > 1:
        raise DataError("save_ppm: values must lie in [0,1]")
    b = np.rint(v[0].transpose(1, 2, 0) * 255).astype(np.uint8)
    h, w = b.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(b.tobytes())


def save_pgm(mask: Tensor, path: str) -> None:
    """Binary {0,1} [1,1,H,W] mask to binary P5 with values {0,255}."""
    if len(mask.shape) != 4 or mask.shape[0] != 1 or mask.shape[1] != 1:
        raise DataError(f"save_pgm expects [1,1,H,W], got {mask.shape}")
    v = mask.data
    if not np.all((v == 0) | (v == 1)):
        raise DataError("save_pgm: mask values must be 0 or 1")
    b = (v[0, 0] * 255).astype(np.uint8)
    h, w = b.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(b.tobytes())


# ------------------------------------------------------------ key=value

def parse_kv(text: str) -> dict[str, str]:
    """UTF-8 'key = value' lines; '#' starts a comment; blank lines skipped."""
    out: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {ln}: expected 'key = value', got {raw!r}")
        key, val = line.split("=", 1)
        key = key.strip()
        if not key:
            raise FormatError(f"line {ln}: empty key in {raw!r}")
        if key in out:
            raise FormatError(f"line {ln}: duplicate key {key!r}")
        out[key] = val.strip()
    return out


def format_kv(entries: dict) -> str:
    lines = []
    for key, val in entries.items():
        if isinstance(val, (list, tuple)):
            val = ",".join(str(v) for v in val)
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


def kv_int_list(value: str, key: str) -> list[int]:
    try:
        return [int(v.strip()) for v in value.split(",") if v.strip()]
    except ValueError:
        raise FormatError(f"key {key!r}: expected comma-separated ints, got {value!r}") from None


def model_config_to_kv(config: ModelConfig) -> str:
    return format_kv(config.to_dict())


def model_config_from_kv(text: str) -> ModelConfig:
    kv = parse_kv(text)
    d: dict = {}
    for key in ("input_size", "blocks_per_stage", "head_channels"):
        if key not in kv:
            raise FormatError(f"model config missing key {key!r}")
        try:
            d[key] = int(kv[key])
        except ValueError:
            raise FormatError(f"key {key!r}: expected int, got {kv[key]!r}") from None
    if "stage_channels" not in kv:
        raise FormatError("model config missing key 'stage_channels'")
    d["stage_channels"] = kv_int_list(kv["stage_channels"], "stage_channels")
    return ModelConfig.from_dict(d)


def load_model_config(path: str) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as f:
        return model_config_from_kv(f.read())


def save_model_config(config: ModelConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(model_config_to_kv(config))


# -------------------------------------------------------------- checkpoints

def checkpoint_to_bytes(model: Model) -> bytes:
    cfg = model_config_to_kv(model.config).encode("utf-8")
    parts = [struct.pack("<4sB", b"PCKP", 1), struct.pack("<I", len(cfg)), cfg]
    params = model.params()
    parts.append(struct.pack("<I", len(params)))
    for p in params:
        name = p.name.encode("utf-8")
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
        parts.append(tensor_to_bytes(p.value))
    return b"".join(parts)


def checkpoint_from_bytes(buf: bytes) -> Model:
    if len(buf) < 5 or buf[:4] != b"PCKP":
        raise FormatError(f"bad checkpoint magic {buf[:4]!r} at byte 0, expected b'PCKP'")
    if buf[4] != 1:
        raise FormatError(f"unsupported checkpoint version {buf[4]} at byte 4")
    (cfg_len,) = struct.unpack_from("<I", buf, 5)
    pos = 9
    if len(buf) < pos + cfg_len:
        raise FormatError(f"truncated config block at byte {pos}")
    config = model_config_from_kv(buf[pos : pos + cfg_len].decode("utf-8"))
    pos += cfg_len
    (n_records,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    model = build(config)
    by_name = {p.name: p for p in model.params()}
    seen = set()
    for _ in range(n_records):
        if len(buf) < pos + 2:
            raise FormatError(f"truncated record header at byte {pos}")
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        value, pos = tensor_from_bytes(buf, pos)
        if name not in by_name:
            raise FormatError(f"unknown parameter name {name!r} in checkpoint")
        p = by_name[name]
        if value.shape != p.value.shape or value.dtype != p.value.dtype:
            raise FormatError(f"parameter {name!r}: stored {value.dtype}{value.shape}, "
                              f"model expects {p.value.dtype}{p.value.shape}")
        p.value.data[...] = value.data
        seen.add(name)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after records (byte {pos})")
    missing = [n for n in by_name if n not in seen]
    if missing:
        raise FormatError(f"checkpoint missing parameters: {sorted(missing)[:5]}")
    return model


def save_checkpoint(model: Model, path: str) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_to_bytes(model))


def load_checkpoint(path: str) -> Model:
    with open(path, "rb") as f:
        return checkpoint_from_bytes(f.read())


def checkpoint_payload_bytes(path: str) -> int:
    """Sum of raw tensor payload bytes (excluding all headers and names)."""
    model = load_checkpoint(path)
    return sum(p.value.numel * _ITEMSIZE[p.value.dtype] for p in model.params())
