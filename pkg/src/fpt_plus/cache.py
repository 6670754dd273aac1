"""Preloaded backbone features (FPTC files).

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

The frozen backbone only ever sees the un-augmented high-resolution image,
so its selected keys and values can be computed once and read back every
epoch. Only the selected tokens are stored.

File Layout (little-endian):
---------------------------
  magic "FPTC" | u32 version=1
  fingerprint: u32 high_res, patch_size, lpm_layers, side_layers, d_model,
               heads | f64 token_ratio | u8 selection (0 important,
               1 random) | u8 class_token
  u32 record count
  index, per record: u32 id_len | id (UTF-8) | u64 offset | u64 length
  records, per record: u32 layer_count, then per layer:
      u32 layer_index | u32 n_sel | n_sel x u32 indices
      | keys f32 [H][n_sel][d_h] | values f32 [H][n_sel][d_h]

Offsets are absolute file positions.
"""

import logging
import os
import shutil
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .adapter import FptConfig, SelectedFeatures, extract_features, selection_count, stack_features
from .data import Dataset, load_high
from .errors import CacheLookupError, ConfigError, DataError, FptError
from .tensor import DTYPE, Tensor
from .vit import VisionTransformer


logger = logging.getLogger(__name__)

MAGIC = b"FPTC"
VERSION = 1
_FINGERPRINT = struct.Struct("<6Id2B")
_HEADER = struct.Struct("<4sI")


@dataclass(frozen=True)
class CacheFingerprint:
    """Every configuration value that changes which bytes get stored."""
    high_res: int
    patch_size: int
    lpm_layers: int
    side_layers: int
    d_model: int
    heads: int
    token_ratio: float
    selection: int
    class_token: int

    @classmethod
    def from_config(cls, cfg: FptConfig) -> "CacheFingerprint":
        return cls(
            high_res=cfg.lpm.image_size,
            patch_size=cfg.lpm.patch_size,
            lpm_layers=cfg.lpm.layers,
            side_layers=cfg.side_layers,
            d_model=cfg.lpm.dim,
            heads=cfg.lpm.heads,
            token_ratio=float(cfg.token_ratio),
            selection=0 if cfg.selection == "important" else 1,
            class_token=int(cfg.lpm.with_class_token),
        )

    def pack(self) -> bytes:
        return _FINGERPRINT.pack(
            self.high_res, self.patch_size, self.lpm_layers, self.side_layers,
            self.d_model, self.heads, self.token_ratio, self.selection, self.class_token,
        )

    @classmethod
    def unpack(cls, blob: bytes) -> "CacheFingerprint":
        return cls(*_FINGERPRINT.unpack(blob))

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def num_selected(self) -> int:
        grid = self.high_res // self.patch_size
        return selection_count(grid * grid, self.token_ratio)

    @property
    def layers(self) -> List[int]:
        start = self.lpm_layers - self.side_layers
        return [start + l for l in range(1, self.side_layers + 1)]


def encode_record(features: Sequence[SelectedFeatures]) -> bytes:
    chunks = [struct.pack("<I", len(features))]
    for f in features:
        chunks.append(struct.pack("<II", f.layer_index, f.indices.size))
        chunks.append(np.asarray(f.indices, dtype="<u4").tobytes())
        chunks.append(np.ascontiguousarray(f.keys.data, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(f.values.data, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_record(blob: bytes, fingerprint: CacheFingerprint, image_id: str = "") -> List[SelectedFeatures]:
    """Parse one record.

    Raises:
        DataError: If the record is truncated or disagrees with the fingerprint
    """
    heads, head_dim = fingerprint.heads, fingerprint.head_dim
    try:
        (layer_count,) = struct.unpack_from("<I", blob, 0)
        offset = 4
        features = []
        for _ in range(layer_count):
            layer_index, n_sel = struct.unpack_from("<II", blob, offset)
            offset += 8
            if n_sel != fingerprint.num_selected:
                raise DataError(f"{image_id}: layer {layer_index} stores {n_sel} tokens, "
                                f"expected {fingerprint.num_selected}")
            indices = np.frombuffer(blob, dtype="<u4", count=n_sel, offset=offset).astype(np.int64)
            offset += 4 * n_sel
            block = heads * n_sel * head_dim
            if offset + 8 * block > len(blob):
                raise DataError(f"{image_id}: record truncated in layer {layer_index}")
            keys = np.frombuffer(blob, dtype="<f4", count=block, offset=offset)
            offset += 4 * block
            values = np.frombuffer(blob, dtype="<f4", count=block, offset=offset)
            offset += 4 * block
            shape = (heads, n_sel, head_dim)
            features.append(SelectedFeatures(
                layer_index, indices,
                Tensor._wrap(keys.astype(DTYPE).reshape(shape)),
                Tensor._wrap(values.astype(DTYPE).reshape(shape)),
            ))
    except (struct.error, ValueError) as e:
        raise DataError(f"{image_id}: malformed cache record: {e}") from e
    return features


@dataclass
class PreloadResult:
    path: Path
    written: List[str] = field(default_factory=list)
    failures: List[Tuple[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def preload(dataset: Dataset, lpm: VisionTransformer, cfg: FptConfig, out_path: Union[str, Path],
            norm_mean: float = 0.5, norm_std: float = 0.5) -> PreloadResult:
    """Run the frozen backbone once per image and store the selected features.

    Images are processed one at a time in dataset order. An image that cannot
    be read is recorded in ``failures`` and skipped; the file is still
    written for the rest.

    Args:
        dataset: Images to process (every split)
        lpm: Frozen backbone
        cfg: Architecture; its fingerprint is written to the header
        out_path: Destination file
        norm_mean: Pixel normalization mean
        norm_std: Pixel normalization std

    Returns:
        PreloadResult with written ids and per-item failures
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fingerprint = CacheFingerprint.from_config(cfg)
    result = PreloadResult(out_path)
    index: List[Tuple[str, int, int]] = []
    seen = set()

    with tempfile.TemporaryFile(dir=out_path.parent) as body:
        position = 0
        for count, item in enumerate(dataset, start=1):
            if item.file in seen:
                result.failures.append((item.file, "duplicate image id"))
                continue
            seen.add(item.file)
            try:
                image = load_high(dataset.path(item), cfg.lpm.image_size, cfg.lpm.channels,
                                  norm_mean, norm_std)
                record = encode_record(extract_features(image, lpm, cfg, item.file))
            except FptError as e:
                logger.error(f"Preload failed for {item.file}: {e}")
                result.failures.append((item.file, str(e)))
                continue
            body.write(record)
            index.append((item.file, position, len(record)))
            position += len(record)
            result.written.append(item.file)
            if count % 50 == 0:
                logger.info(f"Preloaded {count}/{len(dataset)} images")

        index_size = sum(4 + len(image_id.encode("utf-8")) + 16 for image_id, _, _ in index)
        base = _HEADER.size + _FINGERPRINT.size + 4 + index_size
        tmp_path = out_path.with_name(out_path.name + ".part")
        with open(tmp_path, "wb") as out:
            out.write(_HEADER.pack(MAGIC, VERSION))
            out.write(fingerprint.pack())
            out.write(struct.pack("<I", len(index)))
            for image_id, offset, length in index:
                encoded = image_id.encode("utf-8")
                out.write(struct.pack("<I", len(encoded)) + encoded + struct.pack("<QQ", base + offset, length))
            body.seek(0)
            shutil.copyfileobj(body, out)
        os.replace(tmp_path, out_path)

    logger.info(f"Wrote {len(result.written)} records to {out_path} "
                f"({len(result.failures)} failed)")
    return result


class CacheFile:
    """Read access to a finalized FPTC file.

    Args:
        path: File path
        fingerprint: Header fingerprint
        index: Image id to (offset, length)
    """

    def __init__(self, path: Path, fingerprint: CacheFingerprint, index: Dict[str, Tuple[int, int]]):
        self.path = path
        self.fingerprint = fingerprint
        self.index = index

    @classmethod
    def open(cls, path: Union[str, Path], expected: Optional[CacheFingerprint] = None) -> "CacheFile":
        """Read header and index.

        Raises:
            DataError: If the file is unreadable or malformed
            ConfigError: If ``expected`` is given and differs from the stored fingerprint
        """
        path = Path(path)
        try:
            blob_size = path.stat().st_size
            with open(path, "rb") as f:
                magic, version = _HEADER.unpack(f.read(_HEADER.size))
                if magic != MAGIC:
                    raise DataError(f"{path}: not a feature cache (bad magic)")
                if version != VERSION:
                    raise DataError(f"{path}: unsupported cache version {version}")
                fingerprint = CacheFingerprint.unpack(f.read(_FINGERPRINT.size))
                (count,) = struct.unpack("<I", f.read(4))
                index = {}
                for _ in range(count):
                    (id_len,) = struct.unpack("<I", f.read(4))
                    image_id = f.read(id_len).decode("utf-8")
                    offset, length = struct.unpack("<QQ", f.read(16))
                    if offset + length > blob_size:
                        raise DataError(f"{path}: record {image_id} points past end of file")
                    index[image_id] = (offset, length)
        except OSError as e:
            raise DataError(f"cannot read cache {path}: {e}") from e
        except struct.error as e:
            raise DataError(f"{path}: truncated cache header: {e}") from e
        except UnicodeDecodeError as e:
            raise DataError(f"{path}: image id is not UTF-8: {e}") from e
        if expected is not None and expected.pack() != fingerprint.pack():
            raise ConfigError(
                f"{path}: cache was built for {fingerprint}, current configuration is {expected}"
            )
        return cls(path, fingerprint, index)

    @property
    def ids(self) -> List[str]:
        return list(self.index)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.index

    def __len__(self) -> int:
        return len(self.index)

    def load_record(self, image_id: str) -> List[SelectedFeatures]:
        """Features of one image, layers ascending.

        Raises:
            CacheLookupError: If ``image_id`` is not stored
        """
        if image_id not in self.index:
            raise CacheLookupError(f"image {image_id!r} is not in cache {self.path}")
        offset, length = self.index[image_id]
        with open(self.path, "rb") as f:
            f.seek(offset)
            blob = f.read(length)
        return decode_record(blob, self.fingerprint, image_id)

    def load_batch(self, image_ids: Sequence[str]) -> List[SelectedFeatures]:
        return stack_features([self.load_record(i) for i in image_ids])


def load_record(cache: CacheFile, image_id: str) -> List[SelectedFeatures]:
    return cache.load_record(image_id)
