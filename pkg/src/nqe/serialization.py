"""Binary artifact formats: the deployable weights file (bit-packed codes,
quantizer steps, shift exponents), the lowered integer-model file, activation
trace dumps for hardware cross-validation, and a plain npz checkpoint for the
real-valued decoder.

Every packed format carries a magic tag, a format version, and a SHA-256
digest of its payload; truncated, corrupted, or version-mismatched files are
rejected with a ValueError before any content is interpreted.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .activations import ReferencePosition
from .integer import IntegerModel, IntStep, _weight_codes
from .layers import BatchNormLayer
from .models import (
    Cbr,
    ConvTCbr,
    ModelConfig,
    Net,
    Purenet,
    PurenetConfig,
    RcBlock,
    Refinement,
    build_nqe,
    build_purenet,
)
from .normalization import BsnScale
from .quantizers import QuantizerSpec

WEIGHTS_MAGIC = b"NQEW"
LOWERED_MAGIC = b"NQEI"
TRACE_MAGIC = b"NQET"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sBB32s")  # magic, version, flags, payload digest
_FLAG_PROXIES = 1


# ---- primitive encoding ------------------------------------------------------


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def raw(self, data: bytes):
        self.parts.append(data)

    def pack(self, fmt: str, *values):
        self.parts.append(struct.pack("<" + fmt, *values))

    def string(self, text: str):
        data = text.encode("utf-8")
        self.pack("H", len(data))
        self.raw(data)

    def blob(self, data: bytes):
        self.pack("I", len(data))
        self.raw(data)

    def shape(self, shape: tuple[int, ...]):
        self.pack("B", len(shape))
        for d in shape:
            self.pack("I", d)

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError(f"truncated {self.what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals

    def string(self) -> str:
        return self.take(self.unpack("H")).decode("utf-8")

    def blob(self) -> bytes:
        return self.take(self.unpack("I"))

    def shape(self) -> tuple[int, ...]:
        ndim = self.unpack("B")
        return tuple(self.unpack("I") for _ in range(ndim))

    def done(self):
        if self.pos != len(self.data):
            raise ValueError(f"{self.what} carries trailing bytes")


def _pack_levels(codes: np.ndarray, bits: int, offset: int) -> bytes:
    """Integer codes -> little-endian bit-packed bytes, ``bits`` per value."""
    values = codes.reshape(-1).astype(np.int64) + offset
    if values.min() < 0 or values.max() >= (1 << bits):
        raise ValueError(f"codes do not fit {bits} bits at offset {offset}")
    shifts = np.arange(bits, dtype=np.uint8)
    planes = ((values[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(planes.reshape(-1), bitorder="little").tobytes()

def _unpack_levels(raw: bytes, bits: int, offset: int, count: int) -> np.ndarray:
    need = count * bits
    flat = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")
    if flat.size < need:
        raise ValueError("packed code block shorter than its declared shape")
    planes = flat[:need].reshape(count, bits).astype(np.int64)
    return (planes << np.arange(bits)).sum(axis=1) - offset


def _write_file(path, magic: bytes, payload: bytes, flags: int = 0) -> None:
    digest = hashlib.sha256(payload).digest()
    Path(path).write_bytes(_HEADER.pack(magic, FORMAT_VERSION, flags, digest) + payload)


def _read_file(path, magic: bytes, what: str) -> tuple[_Reader, int]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"truncated {what}")
    got_magic, version, flags, digest = _HEADER.unpack_from(data)
    if got_magic != magic:
        raise ValueError(f"not a {what} (bad magic)")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported {what} version {version}")
    payload = data[_HEADER.size :]
    if hashlib.sha256(payload).digest() != digest:
        raise ValueError(f"digest failure: {what} payload is corrupted")
    return _Reader(payload, what), flags


# ---- model config <-> json ---------------------------------------------------


def _config_to_json(cfg: ModelConfig) -> bytes:
    d = asdict(cfg)
    return json.dumps(d, sort_keys=True).encode("utf-8")


def _config_from_json(raw: bytes) -> ModelConfig:
    d = json.loads(raw.decode("utf-8"))
    if d.get("decoder") is not None:
        dec = dict(d["decoder"])
        dec["pu_channels"] = tuple(dec["pu_channels"])
        d["decoder"] = PurenetConfig(**dec)
    return ModelConfig(**d)


_CODE_BITS = {5: 3, 3: 2, 2: 1}
_CODE_OFFSET = {5: 2, 3: 1, 2: 0}  # binary packs (code+1)/2, handled below


def _pack_weight_codes(codes: np.ndarray, n_levels: int) -> bytes:
    if n_levels == 2:
        return _pack_levels((codes + 1) // 2, 1, 0)
    return _pack_levels(codes, _CODE_BITS[n_levels], _CODE_OFFSET[n_levels])


def _unpack_weight_codes(raw: bytes, n_levels: int, count: int) -> np.ndarray:
    if n_levels == 2:
        return 2 * _unpack_levels(raw, 1, 0, count) - 1
    return _unpack_levels(raw, _CODE_BITS[n_levels], _CODE_OFFSET[n_levels], count)


# ---- weights file ------------------------------------------------------------


def export_weights(model: Net, path, include_proxies: bool = False) -> None:
    """Write the deployable weights file: per-layer bit-packed level codes,
    quantizer steps, shift exponents, and the first-layer bias. With
    ``include_proxies`` the latent real weights ride along so training can
    resume from the file."""
    norm_layers = model.norm_layers()
    if any(l.bsn is None for _, l in norm_layers):
        raise ValueError("model still carries batch normalization; convert first")

    w = _Writer()
    w.blob(_config_to_json(model.config))

    quant = model.quantized_layers()
    w.pack("H", len(quant))
    for name, layer in quant:
        codes, _ = _weight_codes(layer)
        w.string(name)
        w.pack("B", layer.n_levels)
        w.shape(layer.w.data.shape)
        if layer.spec is not None:
            w.pack("B", 1)
            w.pack("dd", layer.spec.delta, layer.spec.tau)
        else:
            w.pack("B", 0)
        bias = getattr(layer, "b", None)
        if bias is not None:
            w.pack("B", 1)
            w.blob(np.ascontiguousarray(bias.data, dtype="<f8").tobytes())
        else:
            w.pack("B", 0)
        w.blob(_pack_weight_codes(codes, layer.n_levels))

    w.pack("H", len(norm_layers))
    for name, layer in norm_layers:
        w.string(name)
        w.pack("b", layer.bsn.shift_exp)

    if include_proxies:
        for _, layer in quant:
            w.raw(np.ascontiguousarray(layer.w.data, dtype="<f8").tobytes())

    _write_file(path, WEIGHTS_MAGIC, w.getvalue(),
                flags=_FLAG_PROXIES if include_proxies else 0)


def _proxy_from_codes(codes: np.ndarray, n_levels: int, spec) -> np.ndarray:
    """Real weights that re-quantize to exactly these codes under ``spec``.

    Uses the quantization-cell midpoints, which round back to the same level
    index by construction."""
    if n_levels == 2:
        return codes.astype(np.float64)
    return codes * (2.0 * spec.delta / (n_levels - 2))


def import_weights(path) -> Net:
    """Rebuild a model from a weights file; the result is bit-identical to the
    exported one under the quantized forward."""
    r, flags = _read_file(path, WEIGHTS_MAGIC, "weights file")
    model = build_nqe(_config_from_json(r.blob()))

    by_name = dict(model.quantized_layers())
    n_quant = r.unpack("H")
    if n_quant != len(by_name):
        raise ValueError("weights file does not match the topology (layer count)")
    order: list = []
    for _ in range(n_quant):
        name = r.string()
        n_levels = r.unpack("B")
        shape = r.shape()
        layer = by_name.get(name)
        if layer is None:
            raise ValueError(f"weights file names unknown layer {name!r}")
        if layer.w.data.shape != shape or layer.n_levels != n_levels:
            raise ValueError(f"topology mismatch at {name!r}")
        if r.unpack("B"):
            delta, tau = r.unpack("dd")
            layer.spec = QuantizerSpec(n_levels, delta, tau)
        else:
            layer.spec = None
        if r.unpack("B"):
            bias = np.frombuffer(r.blob(), dtype="<f8")
            if layer.b is None or bias.shape != layer.b.data.shape:
                raise ValueError(f"bias mismatch at {name!r}")
            layer.b.data = bias.astype(np.float64)
        count = int(np.prod(shape))
        codes = _unpack_weight_codes(r.blob(), n_levels, count).reshape(shape)
        layer.w.data = _proxy_from_codes(codes, n_levels, layer.spec)
        order.append(layer)

    norm_by_name = dict(model.norm_layers())
    n_norm = r.unpack("H")
    if n_norm != len(norm_by_name):
        raise ValueError("weights file does not match the topology (norm count)")
    for _ in range(n_norm):
        name = r.string()
        shift = r.unpack("b")
        if name not in norm_by_name:
            raise ValueError(f"weights file names unknown normalization {name!r}")
        norm_by_name[name].bsn = BsnScale(shift)

    if flags & _FLAG_PROXIES:
        for layer in order:
            n = layer.w.data.size
            raw = np.frombuffer(r.take(8 * n), dtype="<f8")
            layer.w.data = raw.reshape(layer.w.data.shape).astype(np.float64)
    r.done()
    return model


# ---- lowered-model file ------------------------------------------------------


def _step_code_bits(codes: np.ndarray) -> int:
    lo, hi = int(codes.min()), int(codes.max())
    if lo < -1 or hi > 1:
        return 3
    return 2 if (codes == 0).any() else 1


_STEP_OFFSET = {3: 2, 2: 1, 1: 0}


def save_lowered(im: IntegerModel, path) -> None:
    """Write the integer program: packed weight codes, per-step exponents and
    reference positions, widths, and the shift-routing decisions."""
    head = {
        "code_step": im.code_step,
        "input_hw": im.input_hw,
        "code_units": im.code_units,
        "num_classes": im.num_classes,
        "logit_exp": im.logit_exp,
        "bsn_decisions": [list(d) for d in im.bsn_decisions],
    }
    w = _Writer()
    w.blob(json.dumps(head, sort_keys=True).encode("utf-8"))
    w.pack("H", len(im.steps))
    for st in im.steps:
        w.string(st.name)
        w.string(st.kind)
        w.pack("BBHhhBBQ", st.stride, st.padding, st.groups,
               st.scale_exp, st.out_exp, st.thirds, st.width, st.bound)
        if st.ref is not None:
            w.pack("Bh", 1, st.ref.bias)
        else:
            w.pack("B", 0)
        if st.bias is not None:
            w.pack("B", 1)
            w.blob(np.ascontiguousarray(st.bias, dtype="<i8").tobytes())
        else:
            w.pack("B", 0)
        if st.codes is not None:
            bits = _step_code_bits(st.codes)
            w.pack("BB", 1, bits)
            w.shape(st.codes.shape)
            if bits == 1:
                w.blob(_pack_levels((st.codes + 1) // 2, 1, 0))
            else:
                w.blob(_pack_levels(st.codes, bits, _STEP_OFFSET[bits]))
        else:
            w.pack("B", 0)
    _write_file(path, LOWERED_MAGIC, w.getvalue())


def load_lowered(path) -> IntegerModel:
    r, _ = _read_file(path, LOWERED_MAGIC, "lowered-model file")
    head = json.loads(r.blob().decode("utf-8"))
    steps = []
    for _ in range(r.unpack("H")):
        name = r.string()
        kind = r.string()
        stride, padding, groups, scale_exp, out_exp, thirds, width, bound = \
            r.unpack("BBHhhBBQ")
        ref = ReferencePosition(r.unpack("h")) if r.unpack("B") else None
        bias = None
        if r.unpack("B"):
            bias = np.frombuffer(r.blob(), dtype="<i8").astype(np.int64)
        codes = None
        if r.unpack("B"):
            bits = r.unpack("B")
            shape = r.shape()
            count = int(np.prod(shape))
            if bits == 1:
                codes = 2 * _unpack_levels(r.blob(), 1, 0, count) - 1
            else:
                codes = _unpack_levels(r.blob(), bits, _STEP_OFFSET[bits], count)
            codes = codes.reshape(shape)
        steps.append(IntStep(
            name, kind, codes=codes, bias=bias, stride=stride, padding=padding,
            groups=groups, scale_exp=scale_exp, ref=ref, out_exp=out_exp,
            thirds=thirds, width=width, bound=bound,
        ))
    r.done()
    return IntegerModel(
        steps=tuple(steps),
        code_step=head["code_step"],
        input_hw=head["input_hw"],
        code_units=head["code_units"],
        num_classes=head["num_classes"],
        logit_exp=head["logit_exp"],
        bsn_decisions=tuple(tuple(d) for d in head["bsn_decisions"]),
    )


# ---- activation trace dump ---------------------------------------------------

# encodings: 0 raw int64; 1 two-bit codes (4 per byte, little-endian within
# the byte); 2 one-bit {0,1}; 3 one-bit {-1,+1}
_ENC_RAW, _ENC_CODE2, _ENC_BIT, _ENC_SIGN = 0, 1, 2, 3


def _trace_encoding(mantissas: np.ndarray, thirds: int) -> int:
    if mantissas.size == 0:
        return _ENC_RAW
    lo, hi = int(mantissas.min()), int(mantissas.max())
    if thirds and 0 <= lo and hi <= 3:
        return _ENC_CODE2  # the 2-bit activation alphabet, always 4 per byte
    if 0 <= lo and hi <= 1:
        return _ENC_BIT
    if lo >= -1 and hi <= 1 and not (mantissas == 0).any():
        return _ENC_SIGN
    if 0 <= lo and hi <= 3:
        return _ENC_CODE2
    return _ENC_RAW


def dump_trace(trace, path) -> None:
    """One record per executed step: name, exponent, thirds flag, and the
    integer mantissas, bit-packed where the alphabet allows."""
    w = _Writer()
    w.pack("H", len(trace))
    for name, exponent, thirds, mantissas in trace:
        enc = _trace_encoding(mantissas, thirds)
        w.string(name)
        w.pack("hBB", exponent, thirds, enc)
        w.shape(mantissas.shape)
        if enc == _ENC_CODE2:
            w.blob(_pack_levels(mantissas, 2, 0))
        elif enc == _ENC_BIT:
            w.blob(_pack_levels(mantissas, 1, 0))
        elif enc == _ENC_SIGN:
            w.blob(_pack_levels((mantissas + 1) // 2, 1, 0))
        else:
            w.blob(np.ascontiguousarray(mantissas, dtype="<i8").tobytes())
    _write_file(path, TRACE_MAGIC, w.getvalue())


def load_trace(path) -> tuple:
    r, _ = _read_file(path, TRACE_MAGIC, "trace dump")
    records = []
    for _ in range(r.unpack("H")):
        name = r.string()
        exponent, thirds, enc = r.unpack("hBB")
        shape = r.shape()
        count = int(np.prod(shape))
        raw = r.blob()
        if enc == _ENC_CODE2:
            m = _unpack_levels(raw, 2, 0, count)
        elif enc == _ENC_BIT:
            m = _unpack_levels(raw, 1, 0, count)
        elif enc == _ENC_SIGN:
            m = 2 * _unpack_levels(raw, 1, 0, count) - 1
        elif enc == _ENC_RAW:
            m = np.frombuffer(raw, dtype="<i8").astype(np.int64)
            if m.size != count:
                raise ValueError("trace record payload does not match its shape")
        else:
            raise ValueError(f"unknown trace encoding {enc}")
        records.append((name, exponent, thirds, m.reshape(shape)))
    r.done()
    return tuple(records)


# ---- decoder checkpoint (real-valued; plain npz) -----------------------------


def _named_arrays(obj, prefix: str):
    """Deterministic (key, array) walk over a decoder's parameters and
    normalization statistics."""
    if isinstance(obj, (Cbr, ConvTCbr)):
        yield f"{prefix}.w", obj.w.data
        yield from _named_arrays(obj.bn, f"{prefix}.bn")
    elif isinstance(obj, BatchNormLayer):
        st = obj.state
        yield f"{prefix}.gamma", st.gamma.data
        yield f"{prefix}.beta", st.beta.data
        yield f"{prefix}.moving_mean", st.moving_mean
        yield f"{prefix}.moving_var", st.moving_var
    elif isinstance(obj, RcBlock):
        yield from _named_arrays(obj.cbr1, f"{prefix}.cbr1")
        yield from _named_arrays(obj.cbr2, f"{prefix}.cbr2")
    elif isinstance(obj, Refinement):
        for i, b in enumerate(obj.blocks):
            yield from _named_arrays(b, f"{prefix}.block{i}")
        yield from _named_arrays(obj.up, f"{prefix}.up")
        yield from _named_arrays(obj.post, f"{prefix}.post")
        yield from _named_arrays(obj.gate_feat, f"{prefix}.gate_feat")
        yield f"{prefix}.gate_attn_w", obj.gate_attn_w.data
        yield from _named_arrays(obj.gate_attn_bn, f"{prefix}.gate_attn_bn")
        yield f"{prefix}.rgb_w", obj.rgb_w.data
    else:
        raise TypeError(f"no serialization walk for {type(obj).__name__}")


def _decoder_arrays(decoder: Purenet):
    for i, stage in enumerate(decoder.pu.stages):
        yield from _named_arrays(stage, f"pu{i}")
    if decoder.refine is not None:
        yield from _named_arrays(decoder.refine, "refine")
    else:
        yield from _named_arrays(decoder.tail_up, "tail_up")
        yield "tail_rgb", decoder.tail_rgb.data


def save_decoder(decoder: Purenet, path) -> None:
    """Checkpoint the real-valued decoder as an npz archive."""
    meta = {"config": asdict(decoder.cfg), "code_units": decoder.code_units}
    arrays = dict(_decoder_arrays(decoder))
    np.savez(path, __meta__=np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    ), **arrays)


def load_decoder(path) -> Purenet:
    with np.load(path, allow_pickle=False) as z:
        if "__meta__" not in z:
            raise ValueError("not a decoder checkpoint")
        meta = json.loads(bytes(z["__meta__"]).decode("utf-8"))
        dcfg = dict(meta["config"])
        dcfg["pu_channels"] = tuple(dcfg["pu_channels"])
        decoder = build_purenet(PurenetConfig(**dcfg), meta["code_units"])
        stored = {k: z[k] for k in z.files if k != "__meta__"}
    for key, target in _decoder_arrays(decoder):
        if key not in stored:
            raise ValueError(f"decoder checkpoint is missing {key!r}")
        arr = stored.pop(key)
        if arr.shape != target.shape:
            raise ValueError(f"decoder checkpoint shape mismatch at {key!r}")
        target[...] = arr
    if stored:
        raise ValueError(f"decoder checkpoint carries unknown arrays {sorted(stored)}")
    return decoder
