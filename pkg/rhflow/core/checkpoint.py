"""
Framed binary checkpoints for grid and homogeneous runs.

Layout (all integers little-endian):

    header   4s magic b'RHFC' | u16 version | u8 kind (1 grid, 2 homogeneous) | u16 field count
    field    u16 name length | name (utf-8) | u8 dtype (1 float64, 2 int64, 3 bytes)
             | u8 ndim | u32 × ndim shape | raw data

Fields are written in name order. The 'meta' field holds sorted-key JSON with the
time, step counter, dt, coupling schedule, RNG state and the grid/target or
model description, so encode(decode(b)) == b for every valid file.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np

from ..utils.error_handler import CheckpointError
from .deturck import FlowState
from .grid_tensor import GridGeometry, TargetSpec
from .homogeneous import HomogeneousState, ModelFamily, ModelKind
from .trajectory import CouplingSchedule

logger = logging.getLogger(__name__)

MAGIC = b'RHFC'
VERSION = 1
KIND_CODES = {'grid': 1, 'homogeneous': 2}
_HEADER = struct.Struct('<4sHBH')
_DTYPES = {1: np.dtype('<f8'), 2: np.dtype('<i8')}
_BYTES = 3


@dataclass
class Checkpoint:
    kind: str
    meta: Dict[str, Any]
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def t(self) -> float:
        return self.meta['t']

    @property
    def step(self) -> int:
        return self.meta['step']

    @property
    def dt(self) -> float:
        return self.meta['dt']

    def schedule(self) -> CouplingSchedule:
        s = self.meta['schedule']
        return CouplingSchedule(s['kind'], tuple(s['times']), tuple(s['values']))

    def rng(self) -> np.random.Generator:
        rng = np.random.default_rng()
        if self.meta.get('rng') is not None:
            rng.bit_generator.state = self.meta['rng']
        return rng

    @classmethod
    def from_flow_state(cls, state: FlowState, schedule: CouplingSchedule, dt: float,
                        rng: Optional[np.random.Generator] = None) -> 'Checkpoint':
        meta = {
            't': float(state.t), 'step': int(state.step), 'dt': float(dt),
            'schedule': schedule.to_dict(),
            'rng': None if rng is None else rng.bit_generator.state,
            'geom': {'dim': state.geom.dim, 'nodes': state.geom.nodes, 'period': state.geom.period},
            'target': {'kind': state.target.kind, 'radius': state.target.radius,
                       'embedding_dim': state.target.embedding_dim},
        }
        arrays = {'g': state.g, 'phi': state.phi}
        if state.background is not None:
            arrays['background'] = state.background
        return cls('grid', meta, arrays)

    def to_flow_state(self) -> FlowState:
        if self.kind != 'grid':
            raise CheckpointError(f"checkpoint holds a {self.kind} state, not a grid state")
        geom = GridGeometry(**self.meta['geom'])
        target = TargetSpec(**self.meta['target'])
        return FlowState(self.t, self.arrays['g'], self.arrays['phi'], geom, target,
                         self.arrays.get('background'), self.step)

    @classmethod
    def from_hom_state(cls, state: HomogeneousState, model: ModelKind, schedule: CouplingSchedule,
                       dt: float, step: int, rng: Optional[np.random.Generator] = None) -> 'Checkpoint':
        meta = {
            't': float(state.t), 'step': int(step), 'dt': float(dt),
            'schedule': schedule.to_dict(),
            'rng': None if rng is None else rng.bit_generator.state,
            'model': {'family': model.family.value, 'normalized': model.normalized,
                      'flow': model.flow, 'base_volume': model.base_volume},
        }
        return cls('homogeneous', meta, {'scales': np.array([state.c, state.d], dtype=float)})

    def to_hom_state(self) -> Tuple[HomogeneousState, ModelKind]:
        if self.kind != 'homogeneous':
            raise CheckpointError(f"checkpoint holds a {self.kind} state, not a homogeneous state")
        m = self.meta['model']
        model = ModelKind(ModelFamily(m['family']), m['normalized'], m['flow'], m['base_volume'])
        schedule = self.schedule()
        c, d = (float(x) for x in self.arrays['scales'])
        return HomogeneousState(self.t, c, d, schedule(self.t), schedule.derivative(self.t)), model


def _encode_field(name: str, data: Any) -> bytes:
    key = name.encode('utf-8')
    if isinstance(data, bytes):
        code, shape, raw = _BYTES, (len(data),), data
    else:
        arr = np.asarray(data)
        if np.issubdtype(arr.dtype, np.floating):
            code = 1
        elif np.issubdtype(arr.dtype, np.integer):
            code = 2
        else:
            raise CheckpointError(f"field '{name}' has unsupported dtype {arr.dtype}")
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        shape, raw = arr.shape, arr.tobytes()
    head = struct.pack(f'<H{len(key)}sBB{len(shape)}I', len(key), key, code, len(shape), *shape)
    return head + raw


def encode(checkpoint: Checkpoint) -> bytes:
    if checkpoint.kind not in KIND_CODES:
        raise CheckpointError(f"unknown checkpoint kind '{checkpoint.kind}'")
    meta = json.dumps(checkpoint.meta, sort_keys=True, separators=(',', ':')).encode('utf-8')
    fields = dict(checkpoint.arrays)
    fields['meta'] = meta
    parts = [_HEADER.pack(MAGIC, VERSION, KIND_CODES[checkpoint.kind], len(fields))]
    parts.extend(_encode_field(name, fields[name]) for name in sorted(fields))
    return b''.join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def unpack(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.data):
            raise CheckpointError("truncated checkpoint", self.offset)
        values = struct.unpack_from(fmt, self.data, self.offset)
        self.offset += size
        return values

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointError("truncated checkpoint", self.offset)
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk


def decode(data: bytes) -> Checkpoint:
    if not data:
        raise CheckpointError("empty checkpoint file", 0)
    reader = _Reader(data)
    magic, version, kind_code, count = reader.unpack(_HEADER.format)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})", 4)
    kinds = {code: name for name, code in KIND_CODES.items()}
    if kind_code not in kinds:
        raise CheckpointError(f"unknown state kind {kind_code}", 6)

    arrays: Dict[str, np.ndarray] = {}
    meta_raw = None
    for _ in range(count):
        start = reader.offset
        (name_len,) = reader.unpack('<H')
        try:
            name = reader.take(name_len).decode('utf-8')
        except UnicodeDecodeError as e:
            raise CheckpointError("field name is not utf-8", start) from e
        code, ndim = reader.unpack('<BB')
        shape = reader.unpack(f'<{ndim}I')
        if code == _BYTES:
            if ndim != 1:
                raise CheckpointError(f"byte field '{name}' must be one-dimensional", start)
            value = reader.take(shape[0])
        elif code in _DTYPES:
            dtype = _DTYPES[code]
            count_items = int(np.prod(shape, dtype=np.int64))
            value = np.frombuffer(reader.take(count_items * dtype.itemsize), dtype=dtype).reshape(shape).copy()
        else:
            raise CheckpointError(f"unknown dtype code {code} in field '{name}'", start)
        if name == 'meta':
            meta_raw = value
        else:
            arrays[name] = value
    if reader.offset != len(data):
        raise CheckpointError(f"{len(data) - reader.offset} trailing bytes", reader.offset)
    if not isinstance(meta_raw, bytes):
        raise CheckpointError("missing meta field", reader.offset)
    try:
        meta = json.loads(meta_raw.decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"meta field is not valid JSON: {e}", reader.offset) from e
    return Checkpoint(kinds[kind_code], meta, arrays)


def save_checkpoint(checkpoint: Checkpoint, path: str) -> None:
    data = encode(checkpoint)
    tmp = f"{path}.tmp"
    with open(tmp, 'wb') as f:
        f.write(data)
    os.replace(tmp, path)
    logger.debug(f"Checkpoint at t={checkpoint.t:.6g} written to {path} ({len(data)} bytes)")


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, 'rb') as f:
        data = f.read()
    checkpoint = decode(data)
    logger.info(f"Loaded {checkpoint.kind} checkpoint from {path} at t={checkpoint.t:.6g}")
    return checkpoint
