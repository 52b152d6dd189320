"""Genotype JSON files and little-endian binary checkpoints.

Checkpoint layout::

    b"BIONAS01" | u32 version | u32 n_tensors
    n_tensors x ( u16 name_len | name utf-8 | u8 dtype | u8 rank | rank x u64 dims | payload )
    u32 json_len | json (rng states, epoch, metadata)
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .supernet import Genotype

GENOTYPE_VERSION = 1
GENOTYPE_KEYS = {"version", "normal", "reduce", "init_channels", "layers"}

MAGIC = b"BIONAS01"
CHECKPOINT_VERSION = 1
MAX_RANK = 8
MAX_DIM = 1 << 40
DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<f4"), 3: np.dtype("<i8"), 4: np.dtype("u1"), 5: np.dtype("<i4")}
DTYPE_CODES = {dt: code for code, dt in DTYPES.items()}


class GenotypeFormatError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ----------------------------------------------------------------------------- genotypes


def genotype_to_json(g: Genotype) -> str:
    return json.dumps(g.to_dict(), indent=2) + "\n"


def genotype_from_json(text: str) -> Genotype:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GenotypeFormatError(f"malformed genotype JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise GenotypeFormatError("genotype JSON must be an object")
    unknown = sorted(set(d) - GENOTYPE_KEYS)
    if unknown:
        raise GenotypeFormatError(f"unknown genotype fields {unknown}")
    if d.get("version") != GENOTYPE_VERSION:
        raise GenotypeFormatError(f"unsupported genotype version {d.get('version')!r} "
                                  f"(this build reads version {GENOTYPE_VERSION})")
    missing = sorted({"normal", "reduce"} - set(d))
    if missing:
        raise GenotypeFormatError(f"genotype is missing {missing}")
    try:
        return Genotype.from_dict(d)
    except (ValueError, TypeError) as exc:
        raise GenotypeFormatError(str(exc)) from exc


def save_genotype(g: Genotype, path) -> None:
    Path(path).write_text(genotype_to_json(g))


def load_genotype(path) -> Genotype:
    return genotype_from_json(Path(path).read_text())


# ----------------------------------------------------------------------------- tensors


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in DTYPE_CODES:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        if arr.ndim > MAX_RANK:
            raise CheckpointError(f"tensor {name!r}: rank {arr.ndim} > {MAX_RANK}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, pos: int = 0):
        self.buf, self.pos = buf, pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint at byte offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_tensors(r: _Reader) -> dict[str, np.ndarray]:
    (count,) = r.unpack("<I")
    out = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, rank = r.unpack("<BB")
        if code not in DTYPES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
        if rank > MAX_RANK:
            raise CheckpointError(f"tensor {name!r}: rank {rank} > {MAX_RANK}")
        dims = r.unpack(f"<{rank}Q")
        size = 1
        for d in dims:
            if d > MAX_DIM:
                raise CheckpointError(f"tensor {name!r}: dim overflow ({d})")
            size *= d
        nbytes = size * DTYPES[code].itemsize
        if nbytes > len(r.buf) - r.pos:
            raise CheckpointError(f"tensor {name!r}: dim overflow, payload {nbytes} bytes exceeds file")
        out[name] = np.frombuffer(r.take(nbytes), dtype=DTYPES[code]).reshape(dims).copy()
    return out


def write_checkpoint_file(path, tensors: dict[str, np.ndarray], state: dict) -> None:
    blob = json.dumps(state, sort_keys=True).encode("utf-8")
    data = MAGIC + struct.pack("<I", CHECKPOINT_VERSION) + encode_tensors(tensors) + struct.pack("<I", len(blob)) + blob
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def read_checkpoint_file(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:len(MAGIC)]!r}")
    r = _Reader(buf, len(MAGIC))
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    tensors = decode_tensors(r)
    (jlen,) = r.unpack("<I")
    state = json.loads(r.take(jlen).decode("utf-8"))
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes")
    return tensors, state


# ----------------------------------------------------------------------------- model + trainer


def collect_state(model, trainer=None):
    tensors = {f"param/{n}": p.value for n, p in model.named_parameters()}
    tensors.update({f"buffer/{n}": b for n, b in model.named_buffers()})
    streams = {n: s for n, s in model.named_streams()}
    state = {"epoch": 0}
    if trainer is not None:
        tensors.update({f"momentum/{n}": v for n, v in trainer.opt.buffers.items()})
        streams.update(trainer.streams())
        state["epoch"] = trainer.epoch
        state["history"] = trainer.history
    state["rng"] = {n: s.get_state() for n, s in streams.items()}
    return tensors, state, streams


def save_checkpoint(path, model, trainer=None, meta: dict | None = None) -> None:
    tensors, state, _ = collect_state(model, trainer)
    if meta:
        state["meta"] = meta
    write_checkpoint_file(path, tensors, state)


def load_checkpoint(path, model, trainer=None) -> dict:
    """Restore parameters, buffers, momentum and rng streams in place; returns the JSON state."""
    tensors, state = read_checkpoint_file(path)
    current, _, streams = collect_state(model, trainer)
    expected = {k for k in current if not k.startswith("momentum/")}
    missing = sorted(expected - set(tensors))
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors {missing[:5]}")
    for name, arr in tensors.items():
        if name.startswith("momentum/"):
            if trainer is not None:
                trainer.opt.buffers[name[len("momentum/"):]] = arr.copy()
            continue
        if name not in current:
            raise CheckpointError(f"checkpoint tensor {name!r} has no counterpart in the model")
        dst = current[name]
        if dst.shape != arr.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != model {dst.shape}")
        dst[...] = arr
    for name, st in state.get("rng", {}).items():
        if trainer is None and name.startswith("trainer."):
            continue
        if name not in streams:
            raise CheckpointError(f"rng stream {name!r} has no counterpart")
        streams[name].set_state(st)
    if trainer is not None:
        trainer.epoch = int(state["epoch"])
        trainer.history = list(state.get("history", []))
    return state
