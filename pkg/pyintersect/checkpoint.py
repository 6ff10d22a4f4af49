"""Reading and writing Q-network checkpoints.

A checkpoint is a little-endian binary stream:

======================  =========================================================
Field                   Encoding
======================  =========================================================
magic                   8 bytes, ``PYINTQN\\n``
format version          uint16 (currently 1)
array count             uint16 (8)
leaky slope             float64
per array, in order     uint8 ndim, then ndim x uint32 dims
values, per array       float32, C order, arrays in the same order
======================  =========================================================

Arrays are stored in the order given by :data:`pyintersect.network.PARAM_NAMES`. Values are narrowed to float32 on
disk, so a network survives a save/load round trip exactly once it has been loaded from a checkpoint.
"""

import logging
import os
import struct
from typing import BinaryIO

import numpy as np

from pyintersect.network import PARAM_NAMES, PARAM_SHAPES, NetworkParams

logger = logging.getLogger(__name__)

MAGIC = b"PYINTQN\n"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sHHd")
_VALUE_DTYPE = np.dtype("<f4")


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    """The stream does not start with the checkpoint magic string."""
    pass


class UnsupportedVersionError(CheckpointError):
    """The checkpoint was written in a format version this code cannot read."""
    pass


class ShapeMismatchError(CheckpointError):
    """The checkpoint's arrays do not match the network architecture."""
    pass


class TruncatedCheckpointError(CheckpointError):
    """The stream ends before the checkpoint does."""
    pass


class CheckpointFileError(CheckpointError):
    """The checkpoint file cannot be opened or read."""
    pass


def save_params(params: NetworkParams) -> bytes:
    """Serialize a network to bytes."""
    arrays = params.arrays()
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(arrays), params.leaky_slope)]
    for a in arrays.values():
        parts.append(struct.pack(f"<B{a.ndim}I", a.ndim, *a.shape))
    for a in arrays.values():
        parts.append(np.ascontiguousarray(a, dtype=_VALUE_DTYPE).tobytes(order="C"))
    return b"".join(parts)


def _read(buf: memoryview, offset: int, n: int) -> tuple[memoryview, int]:
    if offset + n > len(buf):
        raise TruncatedCheckpointError(f"Checkpoint ends at byte {len(buf)}; expected at least {offset + n} bytes.")
    return buf[offset:offset + n], offset + n


def load_params(data: bytes) -> NetworkParams:
    """Deserialize a network written by :func:`save_params`.

    Nothing is returned unless the whole checkpoint is valid.
    """
    buf = memoryview(data)
    raw, offset = _read(buf, 0, _HEADER.size)
    magic, version, count, slope = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise BadMagicError(f"Not a checkpoint: expected magic {MAGIC!r}, found {bytes(magic)!r}.")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"Checkpoint format version {version} is not supported "
                                      f"(this version reads format {FORMAT_VERSION}).")
    if count != len(PARAM_NAMES):
        raise ShapeMismatchError(f"Checkpoint holds {count} arrays; the network has {len(PARAM_NAMES)}.")
    shapes = []
    for name in PARAM_NAMES:
        raw, offset = _read(buf, offset, 1)
        ndim = raw[0]
        raw, offset = _read(buf, offset, 4 * ndim)
        shape = struct.unpack(f"<{ndim}I", raw)
        if shape != PARAM_SHAPES[name]:
            raise ShapeMismatchError(f"Array {name} has shape {shape} in the checkpoint; expected "
                                     f"{PARAM_SHAPES[name]}.")
        shapes.append(shape)
    arrays = {}
    for name, shape in zip(PARAM_NAMES, shapes):
        n = int(np.prod(shape)) * _VALUE_DTYPE.itemsize
        raw, offset = _read(buf, offset, n)
        arrays[name] = np.frombuffer(raw, dtype=_VALUE_DTYPE).reshape(shape).astype(np.float64)
    if offset != len(buf):
        logger.warning(f"Ignoring {len(buf) - offset} trailing bytes after checkpoint.")
    if slope <= 0:
        raise CheckpointError(f"Checkpoint has invalid leaky slope {slope}.")
    return NetworkParams(**arrays, leaky_slope=slope)


def write_checkpoint(params: NetworkParams, fpath: str) -> str:
    """Write a checkpoint file, via a `.part` file renamed into place once complete.

    :return: The path written.
    """
    fpath_part = f"{fpath}.part"
    try:
        with open(fpath_part, "wb") as fd:
            fd.write(save_params(params))
        os.replace(fpath_part, fpath)
    except OSError as e:
        raise CheckpointFileError(f"Cannot write checkpoint {fpath}: {e.strerror or e}")
    logger.debug(f"Wrote checkpoint {fpath}.")
    return fpath


def read_checkpoint(fpath: str | BinaryIO) -> NetworkParams:
    """Read a checkpoint from a path or a binary file object."""
    if isinstance(fpath, str):
        try:
            with open(fpath, "rb") as fd:
                data = fd.read()
        except OSError as e:
            raise CheckpointFileError(f"Cannot read checkpoint {fpath}: {e.strerror or e}")
    else:
        data = fpath.read()
    logger.debug(f"Read {len(data)} checkpoint bytes from {fpath}.")
    return load_params(data)
