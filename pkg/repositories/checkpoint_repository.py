'''
Checkpoint files: a flat table of named float64 tensors.

    magic      4 bytes  b'SOMA'
    version    u32
    count      u32
    per tensor
        name length  u32, then the utf-8 name
        ndim         u32, then ndim u64 dimensions
        dtype        u8 (1 = float64)
        payload      product(shape) little-endian f64 values
    crc32      u32 over every preceding byte

Every integer is little-endian.
'''
import logging
import math
import struct
import zlib
from typing import Mapping

import numpy as np

from repositories.storage import write_bytes
from soma.errors import CheckpointError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'SOMA'
CHECKPOINT_VERSION = 1
DTYPE_F64 = 1
MAX_NDIM = 8

_HEADER = struct.Struct('<4sII')
_U32 = struct.Struct('<I')
_U64 = struct.Struct('<Q')
_U8 = struct.Struct('<B')


def encode_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    '''
    Serialize tensors in the mapping's order.

    Parameters:
        tensors (Mapping[str, np.ndarray]): name to array, any real dtype

    Returns:
        bytes: the full file, crc32 trailer included
    '''
    out = bytearray(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.ndim > MAX_NDIM:
            raise CheckpointError(f'tensor {name} has {arr.ndim} dimensions, at most {MAX_NDIM} are supported')
        if not np.issubdtype(arr.dtype, np.number) or np.iscomplexobj(arr):
            raise CheckpointError(f'tensor {name} is not real-valued ({arr.dtype})')
        encoded = name.encode('utf-8')
        out += _U32.pack(len(encoded))
        out += encoded
        out += _U32.pack(arr.ndim)
        for dim in arr.shape:
            out += _U64.pack(dim)
        out += _U8.pack(DTYPE_F64)
        out += np.ascontiguousarray(arr, dtype='<f8').tobytes()
    out += _U32.pack(zlib.crc32(out))
    return bytes(out)


class _Reader:
    # bounds-checked cursor over the checksummed body
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CheckpointError(f'checkpoint truncated while reading {what}')
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: struct.Struct, what: str):
        return fmt.unpack(self.take(fmt.size, what))[0]


def decode_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    '''
    Parse a checkpoint produced by encode_checkpoint.

    The crc32 is checked before anything else is trusted. Duplicate names,
    unknown dtypes, a wrong version and trailing bytes are all rejected
    with CheckpointError.
    '''
    if len(data) < _HEADER.size + _U32.size:
        raise CheckpointError(f'checkpoint is only {len(data)} bytes long')
    body, trailer = data[:-_U32.size], data[-_U32.size:]
    expected = _U32.unpack(trailer)[0]
    actual = zlib.crc32(body)
    if actual != expected:
        raise CheckpointError(f'checkpoint crc mismatch (stored {expected:#010x}, computed {actual:#010x})')

    reader = _Reader(body)
    magic, version, count = _HEADER.unpack(reader.take(_HEADER.size, 'header'))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f'not a checkpoint (magic {magic!r})')
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f'unsupported checkpoint version {version}')

    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        name_len = reader.unpack(_U32, f'name length of tensor {i}')
        try:
            name = reader.take(name_len, f'name of tensor {i}').decode('utf-8')
        except UnicodeDecodeError:
            raise CheckpointError(f'name of tensor {i} is not valid utf-8') from None
        if name in tensors:
            raise CheckpointError(f'duplicate tensor name {name!r}')
        ndim = reader.unpack(_U32, f'ndim of {name}')
        if ndim > MAX_NDIM:
            raise CheckpointError(f'tensor {name} claims {ndim} dimensions')
        shape = tuple(reader.unpack(_U64, f'shape of {name}') for _ in range(ndim))
        dtype = reader.unpack(_U8, f'dtype of {name}')
        if dtype != DTYPE_F64:
            raise CheckpointError(f'tensor {name} has unknown dtype code {dtype}')
        size = math.prod(shape)
        payload = reader.take(size * 8, f'payload of {name}')
        tensors[name] = np.frombuffer(payload, dtype='<f8').astype(np.float64).reshape(shape)
    if reader.pos != len(body):
        raise CheckpointError(f'{len(body) - reader.pos} unexpected bytes after the tensor table')
    return tensors


def save_checkpoint(path: str, tensors: Mapping[str, np.ndarray]):
    data = encode_checkpoint(tensors)
    write_bytes(path, data)
    logger.debug('wrote %d tensors (%d bytes) to %s', len(tensors), len(data), path)


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f'cannot read checkpoint {path}: {e.strerror}') from None
    return decode_checkpoint(data)


def get_tensor(tensors: Mapping[str, np.ndarray], name: str) -> np.ndarray:
    if name not in tensors:
        raise CheckpointError(f'checkpoint has no tensor named {name!r} (have: {", ".join(tensors) or "none"})')
    return tensors[name]
