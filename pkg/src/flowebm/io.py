"""Persistent formats: binary checkpoints, chain dumps and CSV tables.

Checkpoint layout (all integers little-endian)::

    b"FEBM"  u32 version  u32 record_count
    record*: u16 name_len, name (UTF-8), u8 dtype, u8 rank,
             rank x u32 extents, payload

dtype 0 is float64 (row-major payload).  dtype 1 is a UTF-8 byte string
(rank 1, extent = byte length) and carries the ``__kind__`` tag and the
``__config__`` JSON echo.
"""

from __future__ import annotations

import csv
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from .diagnostics import ChainEnsemble
from .energy import EnergyModel, build_energy
from .flow import FlowModel

MAGIC = b"FEBM"
VERSION = 1
DTYPE_F64 = 0
DTYPE_UTF8 = 1
KIND_KEY = "__kind__"
CONFIG_KEY = "__config__"


class CheckpointError(ValueError):
    pass


class ChainFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    config: Dict
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    version: int = VERSION


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    records = [(KIND_KEY, ckpt.kind.encode("utf-8")), (CONFIG_KEY, json.dumps(ckpt.config, sort_keys=True).encode("utf-8"))]
    parts = [MAGIC, struct.pack("<II", ckpt.version, len(records) + len(ckpt.tensors))]
    for name, text in records:
        parts.append(_record_header(name, DTYPE_UTF8, (len(text),)))
        parts.append(text)
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        parts.append(_record_header(name, DTYPE_F64, arr.shape))
        parts.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    return b"".join(parts)


def _record_header(name: str, dtype: int, shape) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise CheckpointError(f"record name too long: {name[:40]}...")
    if len(shape) > 0xFF:
        raise CheckpointError(f"rank too large for {name}")
    return struct.pack("<H", len(raw)) + raw + struct.pack("<BB", dtype, len(shape)) + struct.pack(f"<{len(shape)}I", *shape)


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if raw[:4] != MAGIC:
        raise CheckpointError("bad magic: not a FEBM checkpoint")
    if len(raw) < 12:
        raise CheckpointError("truncated header")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    kind, config = None, None
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for i in range(count):
        name = f"#{i}"
        try:
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            if pos + nlen > len(raw):
                raise struct.error("name")
            name = raw[pos : pos + nlen].decode("utf-8")
            pos += nlen
            dtype, rank = struct.unpack_from("<BB", raw, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
        except struct.error:
            raise CheckpointError(f"truncated record {i} ({name})") from None
        size = int(np.prod(shape, dtype=np.int64))
        if dtype == DTYPE_F64:
            nbytes = 8 * size
        elif dtype == DTYPE_UTF8:
            nbytes = size
        else:
            raise CheckpointError(f"record {i} ({name}): unknown dtype code {dtype}")
        if pos + nbytes > len(raw):
            raise CheckpointError(f"truncated payload in record {i} ({name})")
        payload = raw[pos : pos + nbytes]
        pos += nbytes
        if dtype == DTYPE_UTF8:
            text = payload.decode("utf-8")
            if name == KIND_KEY:
                kind = text
            elif name == CONFIG_KEY:
                config = json.loads(text)
            else:
                raise CheckpointError(f"unexpected text record {name}")
        else:
            tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after last record")
    if kind is None or config is None:
        raise CheckpointError("checkpoint lacks kind/config records")
    return Checkpoint(kind=kind, config=config, tensors=tensors, version=version)


def model_checkpoint(model: Union[FlowModel, EnergyModel], extras: Optional[Mapping[str, np.ndarray]] = None) -> Checkpoint:
    if isinstance(model, FlowModel):
        kind, config = "flow", model.config()
    elif isinstance(model, EnergyModel):
        kind, config = f"energy:{model.kind}", model.config()
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    tensors = OrderedDict((name, p.data.copy()) for name, p in model.named_parameters())
    for name, arr in (extras or {}).items():
        tensors[f"extra.{name}"] = np.asarray(arr, dtype=np.float64)
    return Checkpoint(kind=kind, config=config, tensors=tensors)


def save_checkpoint(path, model, extras: Optional[Mapping[str, np.ndarray]] = None) -> None:
    Path(path).write_bytes(encode_checkpoint(model_checkpoint(model, extras)))


def read_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def checkpoint_extras(ckpt: Checkpoint) -> Dict[str, np.ndarray]:
    return {k[len("extra."):]: v for k, v in ckpt.tensors.items() if k.startswith("extra.")}


def load_into(model, ckpt: Union[Checkpoint, str, Path]) -> None:
    """Copy checkpoint tensors into ``model``; all names and shapes are checked first."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = read_checkpoint(ckpt)
    params = OrderedDict(model.named_parameters())
    stored = OrderedDict((k, v) for k, v in ckpt.tensors.items() if not k.startswith("extra."))
    missing = [k for k in params if k not in stored]
    unexpected = [k for k in stored if k not in params]
    if missing or unexpected:
        raise CheckpointError(f"parameter name mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
    for name, p in params.items():
        if stored[name].shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {stored[name].shape}, model {p.shape}")
    for name, p in params.items():
        p.data[...] = stored[name]
    if isinstance(model, FlowModel):
        model.mark_initialized()


def build_model(ckpt: Checkpoint):
    if ckpt.kind == "flow":
        cfg = ckpt.config
        model = FlowModel(cfg["dim"], cfg["depth"], cfg["width"], cfg.get("seed", 0))
    elif ckpt.kind.startswith("energy:"):
        model = build_energy(ckpt.config)
    else:
        raise CheckpointError(f"unknown model kind {ckpt.kind!r}")
    load_into(model, ckpt)
    return model


def load_checkpoint(path):
    """Rebuild the model stored at ``path`` (flow or energy network)."""
    return build_model(read_checkpoint(path))


# ---------------------------------------------------------------------------
# CSV


def fmt(v) -> str:
    """17 significant digits: enough to round-trip any float64."""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.17g" % float(v)


def chain_header(dim: int, space: str = "z") -> List[str]:
    return ["chain", "step", "accepted", "step_size", "energy"] + [f"{space}{k}" for k in range(dim)]


def dump_chains(path, ensemble: ChainEnsemble) -> int:
    """Write an ensemble as CSV; returns the number of data rows."""
    m, n, d = ensemble.positions.shape
    rows = 0
    with open(path, "w", newline="") as fh:
        fh.write(",".join(chain_header(d, ensemble.space)) + "\n")
        for i in range(m):
            for j in range(n):
                vals = [str(i), str(int(ensemble.steps[j])), "1" if ensemble.accepted[i, j] else "0",
                        fmt(ensemble.step_size[i, j]), fmt(ensemble.energy[i, j])]
                vals += [fmt(v) for v in ensemble.positions[i, j]]
                fh.write(",".join(vals) + "\n")
                rows += 1
    return rows


def load_chains(path, burn_in: int = 0) -> ChainEnsemble:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ChainFormatError("empty chain file") from None
        if len(header) < 6 or header[:5] != chain_header(0)[:5]:
            raise ChainFormatError(f"unexpected header {header[:6]}")
        space = header[5][0]
        d = len(header) - 5
        if header != chain_header(d, space):
            raise ChainFormatError(f"unexpected header {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ChainFormatError(f"ragged row at line {lineno}: {len(row)} fields, expected {len(header)}")
            rows.append(row)
    if not rows:
        raise ChainFormatError("chain file has no data rows")
    chain = np.array([int(r[0]) for r in rows])
    step = np.array([int(r[1]) for r in rows])
    acc = np.array([r[2] == "1" for r in rows])
    vals = np.array([[float(v) for v in r[3:]] for r in rows])
    ids = np.unique(chain)
    if not np.array_equal(ids, np.arange(len(ids))):
        raise ChainFormatError("chain ids must be 0..m-1")
    m = len(ids)
    if len(rows) % m:
        raise ChainFormatError("chains have unequal lengths")
    n = len(rows) // m
    order = np.lexsort((step, chain))
    chain, step, acc, vals = chain[order], step[order], acc[order], vals[order]
    steps = step.reshape(m, n)
    if not np.all(steps == steps[0]):
        raise ChainFormatError("chains were recorded at different steps")
    return ChainEnsemble(
        positions=vals[:, 2:].reshape(m, n, d),
        steps=steps[0],
        energy=vals[:, 1].reshape(m, n),
        accepted=acc.reshape(m, n),
        step_size=vals[:, 0].reshape(m, n),
        burn_in=burn_in,
        space=space,
    )


def write_table(path, columns: Mapping[str, Sequence]) -> None:
    """Write equal-length columns as CSV with exact float formatting."""
    names = list(columns)
    cols = [list(columns[k]) for k in names]
    lengths = {len(c) for c in cols}
    if len(lengths) > 1:
        raise ValueError(f"columns have different lengths: {sorted(lengths)}")
    with open(path, "w", newline="") as fh:
        fh.write(",".join(names) + "\n")
        for row in zip(*cols):
            fh.write(",".join(fmt(v) for v in row) + "\n")


def read_table(path) -> Dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = [row for row in reader]
    for lineno, row in enumerate(data, start=2):
        if len(row) != len(header):
            raise ValueError(f"ragged row at line {lineno} of {path}")
    arr = np.array(data, dtype=np.float64).reshape(len(data), len(header))
    return {name: arr[:, k] for k, name in enumerate(header)}
