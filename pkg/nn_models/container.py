"""
Model and watermark files
=========================
Model file (all integers little-endian u32 unless noted)::

    "EWEM"  version  spec_len
    spec block (spec_len bytes):
        K  ndim  dims[ndim]  n_layers
        n_layers x 20-byte descriptor: u8 kind, u8 padding, u16 reserved, in, out, kernel, f32 rate
        n_snnl  snnl_index[n_snnl]
    weights: float32 arrays in layer order (weight, then bias), no per-array header
    optional: "WMRK"  length  watermark payload

Standalone watermark file: the watermark payload alone, which starts with "EWEW".

File size of a model without watermark is 12 + spec_len + 4 * param_count.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from common.errors import FormatError
from nn_models.models import LAYER_KINDS, LayerSpec, ModelSpec, model_from_arrays

MODEL_MAGIC = b"EWEM"
WATERMARK_MAGIC = b"EWEW"
SECTION_MAGIC = b"WMRK"
VERSION = 1
PADDINGS = ("valid", "same")


class _Reader:
    def __init__(self, buf, base=0):
        self.buf = buf
        self.pos = 0
        self.base = base

    @property
    def offset(self):
        return self.base + self.pos

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}: need {n} bytes, {len(self.buf) - self.pos} left",
                              self.offset)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    def u32(self, what):
        return self.unpack("<I", what)[0]

    def floats(self, count, what):
        return np.frombuffer(self.take(4 * count, what), dtype="<f4").astype(np.float32)

    def remaining(self):
        return len(self.buf) - self.pos


def encode_spec(spec):
    out = [struct.pack("<II", spec.num_classes, len(spec.input_shape))]
    out += [struct.pack("<I", d) for d in spec.input_shape]
    out.append(struct.pack("<I", len(spec.layers)))
    for layer in spec.layers:
        out.append(struct.pack(
            "<BBHIIIf", LAYER_KINDS.index(layer.kind), PADDINGS.index(layer.padding), 0,
            layer.in_features, layer.out_features, layer.kernel_size, layer.rate,
        ))
    out.append(struct.pack("<I", len(spec.snnl_layers)))
    out += [struct.pack("<I", i) for i in spec.snnl_layers]
    return b"".join(out)


def decode_spec(reader):
    k, ndim = reader.unpack("<II", "spec header")
    if ndim == 0 or ndim > 4:
        raise FormatError(f"implausible input rank {ndim}", reader.offset - 4)
    dims = reader.unpack(f"<{ndim}I", "input dims")
    n_layers = reader.u32("layer count")
    layers = []
    for _ in range(n_layers):
        at = reader.offset
        kind, pad, _, n_in, n_out, ksize, rate = reader.unpack("<BBHIIIf", "layer descriptor")
        if kind >= len(LAYER_KINDS) or pad >= len(PADDINGS):
            raise FormatError(f"unknown layer kind {kind} / padding {pad}", at)
        layers.append(LayerSpec(LAYER_KINDS[kind], n_in, n_out, ksize, PADDINGS[pad], float(rate)))
    n_snnl = reader.u32("snnl count")
    snnl = reader.unpack(f"<{n_snnl}I", "snnl indices")
    return ModelSpec(dims, layers, snnl, k)


def encode_model(model, watermark=None):
    spec_block = encode_spec(model.spec)
    parts = [MODEL_MAGIC, struct.pack("<II", VERSION, len(spec_block)), spec_block]
    for p in model.parameters():
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    if watermark is not None:
        payload = encode_watermark(watermark)
        parts += [SECTION_MAGIC, struct.pack("<I", len(payload)), payload]
    return b"".join(parts)


def decode_model(buf):
    """(Model, WatermarkSet or None) from the bytes of a model file."""
    reader = _Reader(buf)
    magic = reader.take(4, "magic")
    if magic != MODEL_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MODEL_MAGIC!r}", 0)
    version, spec_len = reader.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"unsupported model file version {version}", 4)
    spec_start = reader.offset
    spec = decode_spec(_Reader(reader.take(spec_len, "spec block"), base=spec_start))
    try:
        spec.validate()
    except ValueError as exc:
        raise FormatError(f"spec block describes an invalid model: {exc}", spec_start) from exc
    arrays = {}
    for name, shape in spec.param_shapes():
        arrays[name] = reader.floats(int(np.prod(shape)), name).reshape(shape)
    watermark = None
    if reader.remaining():
        at = reader.offset
        if reader.take(4, "section magic") != SECTION_MAGIC:
            raise FormatError("trailing bytes after weights are not a watermark section", at)
        length = reader.u32("section length")
        watermark = decode_watermark(reader.take(length, "watermark section"), base=reader.offset - length)
        if reader.remaining():
            raise FormatError(f"{reader.remaining()} unexpected trailing bytes", reader.offset)
    return model_from_arrays(spec, arrays), watermark


def save_model(path, model, watermark=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_model(model, watermark))
    return path


def load_model(path):
    """Model stored at ``path``; an embedded watermark section is ignored."""
    return load_model_with_watermark(path)[0]


def load_model_with_watermark(path):
    return decode_model(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# watermark payload
# ---------------------------------------------------------------------------

def encode_watermark(wm):
    inputs = np.ascontiguousarray(wm.inputs, dtype="<f4")
    pattern = np.ascontiguousarray(wm.trigger.pattern, dtype="<f4")
    mask = np.ascontiguousarray(wm.trigger.mask, dtype=np.uint8)
    row, col = wm.position
    parts = [
        WATERMARK_MAGIC,
        struct.pack("<IIiii", VERSION, wm.target_class, wm.source_class, row, col),
        struct.pack("<I", inputs.ndim), struct.pack(f"<{inputs.ndim}I", *inputs.shape), inputs.tobytes(),
        struct.pack("<II", *pattern.shape), pattern.tobytes(), mask.tobytes(),
        struct.pack("<B", 1 if wm.refined else 0),
    ]
    return b"".join(parts)


def decode_watermark(buf, base=0):
    from watermark.watermark_gen import Trigger, WatermarkSet

    reader = _Reader(buf, base)
    magic = reader.take(4, "watermark magic")
    if magic != WATERMARK_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {WATERMARK_MAGIC!r}", base)
    version, target, source, row, col = reader.unpack("<IIiii", "watermark header")
    if version != VERSION:
        raise FormatError(f"unsupported watermark version {version}", base + 4)
    ndim = reader.u32("input rank")
    if ndim == 0 or ndim > 4:
        raise FormatError(f"implausible input rank {ndim}", reader.offset - 4)
    shape = reader.unpack(f"<{ndim}I", "input shape")
    inputs = reader.floats(int(np.prod(shape)), "watermark inputs").reshape(shape)
    th, tw = reader.unpack("<II", "trigger shape")
    pattern = reader.floats(th * tw, "trigger pattern").reshape(th, tw)
    mask = np.frombuffer(reader.take(th * tw, "trigger mask"), dtype=np.uint8).reshape(th, tw).astype(bool)
    refined = bool(reader.unpack("<B", "refined flag")[0])
    if reader.remaining():
        raise FormatError(f"{reader.remaining()} unexpected trailing bytes in watermark payload", reader.offset)
    return WatermarkSet(inputs=inputs, target_class=target, source_class=source, position=(row, col),
                        trigger=Trigger(pattern, mask), refined=refined)


def save_watermark(path, wm):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_watermark(wm))
    return path


def load_watermark(path):
    """Watermark from a standalone file, or from the section of a model file."""
    buf = Path(path).read_bytes()
    if buf[:4] == MODEL_MAGIC:
        _, wm = decode_model(buf)
        if wm is None:
            raise FormatError("model file carries no watermark section", len(buf))
        return wm
    return decode_watermark(buf)
