"""Binary checkpoint format.

Layout (all integers little-endian):

    magic  b"CTEG"
    u32    format version (currently 1)
    u32    config blob length, then that many bytes of UTF-8 key=value text
    u32    tensor count
    per tensor:
        u16  name length, name bytes (UTF-8)
        u8   rank
        u32  dims (rank of them)
        f32  data, little-endian, row-major
    zero or more trailing sections, each:
        4-byte tag, u32 payload length, payload

Known section tags: b"OPT1" (optimizer state with float64 moments and master
parameter copies, so resuming is exact), b"RNG1" (training stream seed and
position).  Unknown tags are rejected.  The average expression frame rides in
the tensor table under the reserved name "average_expression".
"""

import io
import struct

import numpy as np

from .config import ModelConfig, format_kv_text, parse_kv_text
from .model import CtegModel
from .rng import RngStream

MAGIC = b"CTEG"
FORMAT_VERSION = 1
AVG_TENSOR_NAME = "average_expression"


class CheckpointFormatError(ValueError):
    pass


class Checkpoint:
    def __init__(self, config, tensors, avg_expression,
                 optimizer_state=None, rng_state=None):
        self.version = FORMAT_VERSION
        self.config = config
        self.tensors = tensors          # name -> float ndarray
        self.avg_expression = np.asarray(avg_expression, dtype=np.float64)
        self.optimizer_state = optimizer_state
        self.rng_state = rng_state

    @classmethod
    def from_model(cls, model, avg_expression, optimizer=None, rng=None):
        tensors = {k: p.data.copy() for k, p in model.parameters().items()}
        return cls(model.cfg, tensors, avg_expression,
                   optimizer.state() if optimizer is not None else None,
                   rng.state() if rng is not None else None)

    def build_model(self):
        """Instantiate the model and load the stored weights into it."""
        model = CtegModel(self.config, RngStream(self.config.seed))
        params = model.parameters()
        missing = set(params) - set(self.tensors)
        extra = set(self.tensors) - set(params)
        if missing or extra:
            raise CheckpointFormatError(
                f"tensor names do not match the model: missing={sorted(missing)} "
                f"extra={sorted(extra)}")
        for k, p in params.items():
            if self.tensors[k].shape != p.data.shape:
                raise CheckpointFormatError(
                    f"tensor {k}: stored shape {self.tensors[k].shape} "
                    f"vs model shape {p.data.shape}")
            p.data[...] = self.tensors[k]
        return model


def _write_tensor(buf, name, arr):
    nb = name.encode("utf-8")
    buf.write(struct.pack("<H", len(nb)))
    buf.write(nb)
    arr = np.asarray(arr)
    buf.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<I", d))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _write_tensor64(buf, name, arr):
    nb = name.encode("utf-8")
    buf.write(struct.pack("<H", len(nb)))
    buf.write(nb)
    arr = np.asarray(arr)
    buf.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<I", d))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def read(self, n, what):
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(
                f"truncated file: needed {n} bytes for {what} at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self, what):
        return struct.unpack("<B", self.read(1, what))[0]

    def u16(self, what):
        return struct.unpack("<H", self.read(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.read(4, what))[0]

    def u64(self, what):
        return struct.unpack("<Q", self.read(8, what))[0]

    @property
    def remaining(self):
        return len(self.data) - self.pos


def _read_tensor(r, dtype):
    name = r.read(r.u16("tensor name length"), "tensor name").decode("utf-8")
    rank = r.u8("tensor rank")
    dims = tuple(r.u32("tensor dim") for _ in range(rank))
    count = int(np.prod(dims)) if dims else 1
    width = 4 if dtype == "<f4" else 8
    raw = r.read(count * width, f"tensor {name} data")
    arr = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(np.float64)
    return name, arr


def serialize(ckpt):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    blob = format_kv_text(ckpt.config.to_dict()).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)

    names = sorted(ckpt.tensors)
    buf.write(struct.pack("<I", len(names) + 1))
    for name in names:
        _write_tensor(buf, name, ckpt.tensors[name])
    _write_tensor(buf, AVG_TENSOR_NAME, ckpt.avg_expression)

    if ckpt.optimizer_state is not None:
        sec = io.BytesIO()
        st = ckpt.optimizer_state
        sec.write(struct.pack("<Q", st["t"]))
        sec.write(struct.pack("<I", len(names)))
        for name in names:
            _write_tensor64(sec, name, st["m"][name])
            _write_tensor64(sec, name, st["v"][name])
            _write_tensor64(sec, name, st["master"][name])
        payload = sec.getvalue()
        buf.write(b"OPT1")
        buf.write(struct.pack("<I", len(payload)))
        buf.write(payload)

    if ckpt.rng_state is not None:
        payload = struct.pack("<QQ", ckpt.rng_state["seed"], ckpt.rng_state["position"])
        buf.write(b"RNG1")
        buf.write(struct.pack("<I", len(payload)))
        buf.write(payload)

    return buf.getvalue()


def deserialize(data):
    r = _Reader(data)
    if r.read(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic: not a checkpoint file")
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported format version {version}")
    blob = r.read(r.u32("config length"), "config blob").decode("utf-8")
    config = ModelConfig.from_dict(parse_kv_text(blob))

    tensors = {}
    for _ in range(r.u32("tensor count")):
        name, arr = _read_tensor(r, "<f4")
        if name in tensors:
            raise CheckpointFormatError(f"duplicate tensor name {name!r}")
        tensors[name] = arr
    if AVG_TENSOR_NAME not in tensors:
        raise CheckpointFormatError(f"missing {AVG_TENSOR_NAME!r} tensor")
    avg = tensors.pop(AVG_TENSOR_NAME)

    optimizer_state = None
    rng_state = None
    while r.remaining > 0:
        tag = r.read(4, "section tag")
        payload = r.read(r.u32("section length"), f"section {tag!r}")
        if tag == b"OPT1":
            sr = _Reader(payload)
            t = sr.u64("optimizer step")
            n = sr.u32("optimizer tensor count")
            m, v, master = {}, {}, {}
            for _ in range(n):
                name, arr = _read_tensor(sr, "<f8")
                m[name] = arr
                name2, arr2 = _read_tensor(sr, "<f8")
                v[name2] = arr2
                name3, arr3 = _read_tensor(sr, "<f8")
                master[name3] = arr3
            optimizer_state = {"t": t, "m": m, "v": v, "master": master}
        elif tag == b"RNG1":
            sr = _Reader(payload)
            rng_state = {"seed": sr.u64("rng seed"), "position": sr.u64("rng position")}
        else:
            raise CheckpointFormatError(f"unknown section tag {tag!r}")

    return Checkpoint(config, tensors, avg, optimizer_state, rng_state)


def save_checkpoint(ckpt, path):
    data = serialize(ckpt)
    with open(path, "wb") as f:
        f.write(data)


def load_checkpoint(path):
    with open(path, "rb") as f:
        data = f.read()
    return deserialize(data)
