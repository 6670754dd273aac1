"""Named-tensor weight files (FPTW).

Copyright (C) 2024 fpt-plus Contributors

This program is free software: you can redistribute it and/or modify
it under the terms of the GNU General Public License as published by
the Free Software Foundation, either version 3 of the License, or
(at your option) any later version.

This program is distributed in the hope that it will be useful,
but WITHOUT ANY WARRANTY; without even the implied warranty of
MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
GNU General Public License for more details.

You should have received a copy of the GNU General Public License
along with this program.  If not, see <https://www.gnu.org/licenses/>.

Layout (all integers little-endian):
  magic "FPTW" | u32 version=1 | u32 count
  per entry: u32 name_len | name (UTF-8) | u8 dtype (0 = f32) | u8 rank
             | rank x u64 dims | f32 payload (C order)
"""

import logging
import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np

from .errors import DataError
from .tensor import DTYPE, Tensor


logger = logging.getLogger(__name__)

MAGIC = b"FPTW"
VERSION = 1
DTYPE_F32 = 0


def encode_weights(tensors: Dict[str, Union[Tensor, np.ndarray]]) -> bytes:
    """Serialize named tensors into FPTW bytes (entries in insertion order)."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        array = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=DTYPE)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", DTYPE_F32, array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_weights(blob: bytes) -> Dict[str, np.ndarray]:
    """Parse FPTW bytes.

    Raises:
        DataError: On bad magic, unsupported version or dtype, or truncation
    """
    if blob[:4] != MAGIC:
        raise DataError("not a weight file (bad magic)")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise DataError(f"unsupported weight file version {version}")
        offset = 12
        result: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            dtype_code, rank = struct.unpack_from("<BB", blob, offset)
            offset += 2
            if dtype_code != DTYPE_F32:
                raise DataError(f"unsupported dtype code {dtype_code} for {name}")
            shape = struct.unpack_from(f"<{rank}Q", blob, offset)
            offset += 8 * rank
            count_elems = int(np.prod(shape)) if rank else 1
            nbytes = 4 * count_elems
            if offset + nbytes > len(blob):
                raise DataError(f"weight file truncated inside {name}")
            result[name] = np.frombuffer(blob, dtype="<f4", count=count_elems,
                                         offset=offset).astype(DTYPE).reshape(shape)
            offset += nbytes
    except struct.error as e:
        raise DataError(f"weight file truncated: {e}") from e
    except UnicodeDecodeError as e:
        raise DataError(f"weight file holds a tensor name that is not UTF-8: {e}") from e
    return result


def save_weights(path: Union[str, Path], tensors: Dict[str, Union[Tensor, np.ndarray]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_weights(tensors))
    logger.info(f"Wrote {len(tensors)} tensors to {path}")


def load_weights(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """Read an FPTW file.

    Raises:
        DataError: If the file is missing or malformed
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read weight file {path}: {e}") from e
    tensors = decode_weights(blob)
    logger.debug(f"Loaded {len(tensors)} tensors from {path}")
    return tensors
