"""Vision Transformer encoder used both as the frozen backbone and the side network.

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

Block Layout:
------------
Pre-norm transformer blocks:
    z' = MSA(LN(z)) + z
    out = MLP(LN(z')) + z'
with a fused qkv projection, GELU MLP and a learnable class token and 1-D
positional embedding added after the patch projection.

Parameter Naming:
----------------
Linear weights are stored as (in, out). Names follow the common
``blocks.{i}.attn.qkv.weight`` convention behind a model prefix
(``lpm/`` or ``side/``):

    patch_embed.proj.weight   (C*P*P, D)     patch vector is (c, row, col)
    patch_embed.proj.bias     (D,)
    cls_token                 (1, D)
    pos_embed                 (N_tokens, D)
    blocks.{i}.norm1.weight / .bias
    blocks.{i}.attn.qkv.weight (D, 3D) / .bias
    blocks.{i}.attn.proj.weight (D, D) / .bias
    blocks.{i}.norm2.weight / .bias
    blocks.{i}.mlp.fc1.weight (D, mlp_ratio*D) / .bias
    blocks.{i}.mlp.fc2.weight (mlp_ratio*D, D) / .bias

All shapes may carry leading batch axes; token matrices are (..., n, D).
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Optional, Tuple, Union

import numpy as np

from .errors import ContractError, DataError, DimensionError
from .tensor import (
    DTYPE, Tensor, broadcast_to, concat, gelu, layer_norm, matmul, no_grad,
    parameter, reshape, softmax_rows, swap_last, transpose,
)


logger = logging.getLogger(__name__)

ImageLike = Union[Tensor, np.ndarray]


@dataclass(frozen=True)
class ViTConfig:
    """Geometry of one Vision Transformer."""
    image_size: int = 512
    patch_size: int = 16
    layers: int = 12
    dim: int = 768
    heads: int = 12
    mlp_ratio: int = 4
    channels: int = 3
    with_class_token: bool = True
    positional: bool = True

    def __post_init__(self):
        for name in ("image_size", "patch_size", "layers", "dim", "heads", "mlp_ratio", "channels"):
            if getattr(self, name) < 1:
                raise DimensionError(f"{name} must be positive, got {getattr(self, name)}")
        if self.image_size % self.patch_size:
            raise DimensionError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.dim % self.heads:
            raise DimensionError(f"dim {self.dim} is not divisible by heads {self.heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def num_tokens(self) -> int:
        return self.num_patches + (1 if self.with_class_token else 0)

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size


PRESETS = {
    "vit-b/16": dict(patch_size=16, layers=12, dim=768, heads=12),
    "vit-l/16": dict(patch_size=16, layers=24, dim=1024, heads=16),
    "vit-b/8": dict(patch_size=8, layers=12, dim=768, heads=12),
}


def preset(name: str, image_size: int = 512) -> ViTConfig:
    """Named backbone geometry (``vit-b/16``, ``vit-l/16``, ``vit-b/8``)."""
    try:
        return ViTConfig(image_size=image_size, **PRESETS[name])
    except KeyError:
        raise ContractError(f"Unknown ViT preset: {name}") from None


@dataclass
class TokenSequence:
    """Activation matrix flowing between blocks; class token, when present, is index 0."""
    tokens: Tensor
    has_class_token: bool

    def __post_init__(self):
        if self.tokens.ndim < 2 or self.tokens.shape[-2] < 1:
            raise DimensionError(f"token sequence needs shape (..., n>=1, D), got {self.tokens.shape}")

    @property
    def length(self) -> int:
        return self.tokens.shape[-2]

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]

    @property
    def num_patches(self) -> int:
        return self.length - (1 if self.has_class_token else 0)


@dataclass
class LayerTap:
    """Attention map and per-head K/V captured inside one block (1-based layer index)."""
    layer_index: int
    attn: Tensor      # (..., H, n, n) post-softmax
    keys: Tensor      # (..., H, n, d_h)
    values: Tensor    # (..., H, n, d_h)


@dataclass
class BlockWeights:
    norm1_weight: Tensor
    norm1_bias: Tensor
    qkv_weight: Tensor
    qkv_bias: Tensor
    proj_weight: Tensor
    proj_bias: Tensor
    norm2_weight: Tensor
    norm2_bias: Tensor
    fc1_weight: Tensor
    fc1_bias: Tensor
    fc2_weight: Tensor
    fc2_bias: Tensor

    @classmethod
    def from_params(cls, params: Dict[str, Tensor], prefix: str) -> "BlockWeights":
        """Gather one block's tensors from ``params`` under ``prefix`` (e.g. ``lpm/blocks.3.``)."""
        return cls(**{slot: params[prefix + name] for slot, name in _BLOCK_SLOTS.items()})


_BLOCK_SLOTS = {
    "norm1_weight": "norm1.weight",
    "norm1_bias": "norm1.bias",
    "qkv_weight": "attn.qkv.weight",
    "qkv_bias": "attn.qkv.bias",
    "proj_weight": "attn.proj.weight",
    "proj_bias": "attn.proj.bias",
    "norm2_weight": "norm2.weight",
    "norm2_bias": "norm2.bias",
    "fc1_weight": "mlp.fc1.weight",
    "fc1_bias": "mlp.fc1.bias",
    "fc2_weight": "mlp.fc2.weight",
    "fc2_bias": "mlp.fc2.bias",
}


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, weight)
    return out + bias if bias is not None else out


def extract_patches(images: np.ndarray, patch_size: int) -> np.ndarray:
    """Cut (..., H, W, C) images into (..., N, C*P*P) channel-major patch vectors, row-major over the grid."""
    images = np.asarray(images, dtype=DTYPE)
    if images.ndim < 3:
        raise DimensionError(f"image needs shape (..., H, W, C), got {images.shape}")
    *lead, h, w, c = images.shape
    p = patch_size
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} is not divisible into {p}x{p} patches")
    gh, gw = h // p, w // p
    grid = images.reshape(*lead, gh, p, gw, p, c)
    k = len(lead)
    order = list(range(k)) + [k, k + 2, k + 4, k + 1, k + 3]
    return np.ascontiguousarray(grid.transpose(order)).reshape(*lead, gh * gw, c * p * p)


def _image_array(image: ImageLike) -> np.ndarray:
    return image.data if isinstance(image, Tensor) else np.asarray(image, dtype=DTYPE)


def patchify(image: ImageLike, cfg: ViTConfig, patch_weight: Tensor, patch_bias: Tensor,
             cls_token: Optional[Tensor] = None, pos_embed: Optional[Tensor] = None) -> TokenSequence:
    """Split into patches, project to D, prepend the class token and add positions.

    Args:
        image: (H, W, C) or (B, H, W, C) pixels at ``cfg.image_size``
        cfg: Geometry
        patch_weight: (C*P*P, D) projection
        patch_bias: (D,)
        cls_token: (1, D), required when ``cfg.with_class_token``
        pos_embed: (N_tokens, D), required when ``cfg.positional``

    Raises:
        DimensionError: If the image size or channel count does not match ``cfg``
    """
    pixels = _image_array(image)
    if pixels.shape[-3:] != (cfg.image_size, cfg.image_size, cfg.channels):
        raise DimensionError(
            f"expected image (..., {cfg.image_size}, {cfg.image_size}, {cfg.channels}), got {pixels.shape}"
        )
    patches = Tensor._wrap(extract_patches(pixels, cfg.patch_size))
    tokens = linear(patches, patch_weight, patch_bias)
    if cfg.with_class_token:
        lead = tokens.shape[:-2]
        cls = broadcast_to(cls_token, lead + (1, cfg.dim))
        tokens = concat([cls, tokens], axis=-2)
    if cfg.positional:
        tokens = tokens + pos_embed
    return TokenSequence(tokens, cfg.with_class_token)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., n, D) -> (..., H, n, D/H)."""
    *lead, n, d = x.shape
    k = len(lead)
    x = reshape(x, (*lead, n, heads, d // heads))
    return transpose(x, list(range(k)) + [k + 1, k, k + 2])


def merge_heads(x: Tensor) -> Tensor:
    """(..., H, n, d_h) -> (..., n, H*d_h)."""
    *lead, h, n, dh = x.shape
    k = len(lead)
    x = transpose(x, list(range(k)) + [k + 1, k, k + 2])
    return reshape(x, (*lead, n, h * dh))


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tuple[Tensor, Tensor]:
    """Scaled dot-product attention over (..., H, n, d_h); returns (output, weights)."""
    scores = matmul(q, swap_last(k)) * (1.0 / np.sqrt(q.shape[-1]))
    weights = softmax_rows(scores)
    return matmul(weights, v), weights


def msa(z: TokenSequence, w: BlockWeights, heads: int, record_tap: bool = False,
        layer_index: int = 0) -> Tuple[TokenSequence, Optional[LayerTap]]:
    """Multi-head self-attention sublayer (no norm, no residual)."""
    *lead, n, d = z.tokens.shape
    if w.qkv_weight.shape[0] != d:
        raise DimensionError(f"msa: tokens have dim {d}, qkv expects {w.qkv_weight.shape[0]}")
    k = len(lead)
    qkv = reshape(linear(z.tokens, w.qkv_weight, w.qkv_bias), (*lead, n, 3, heads, d // heads))
    qkv = transpose(qkv, [k + 1] + list(range(k)) + [k + 2, k, k + 3])
    q, key, value = qkv[0], qkv[1], qkv[2]
    out, weights = attention(q, key, value)
    out = linear(merge_heads(out), w.proj_weight, w.proj_bias)
    tap = LayerTap(layer_index, weights, key, value) if record_tap else None
    return TokenSequence(out, z.has_class_token), tap


def mlp(x: Tensor, w: BlockWeights) -> Tensor:
    return linear(gelu(linear(x, w.fc1_weight, w.fc1_bias)), w.fc2_weight, w.fc2_bias)


def vit_block(z: TokenSequence, w: BlockWeights, heads: int, record_tap: bool = False,
              layer_index: int = 0) -> Tuple[TokenSequence, Optional[LayerTap]]:
    """One pre-norm transformer block; the tap comes from the attention sublayer."""
    normed = TokenSequence(layer_norm(z.tokens, w.norm1_weight, w.norm1_bias), z.has_class_token)
    attn_out, tap = msa(normed, w, heads, record_tap=record_tap, layer_index=layer_index)
    mid = z.tokens + attn_out.tokens
    out = mid + mlp(layer_norm(mid, w.norm2_weight, w.norm2_bias), w)
    return TokenSequence(out, z.has_class_token), tap


class VisionTransformer:
    """Named parameters plus geometry for one ViT (no head, no final norm).

    Args:
        cfg: Geometry
        params: Full parameter names (with prefix) to tensors
        prefix: Name prefix, ``lpm/`` or ``side/``
    """

    def __init__(self, cfg: ViTConfig, params: Dict[str, Tensor], prefix: str):
        self.cfg = cfg
        self.prefix = prefix
        self.params = params

    @staticmethod
    def parameter_shapes(cfg: ViTConfig) -> Dict[str, Tuple[int, ...]]:
        """Unprefixed parameter names and shapes in canonical order."""
        d, hidden = cfg.dim, cfg.dim * cfg.mlp_ratio
        shapes: Dict[str, Tuple[int, ...]] = {
            "patch_embed.proj.weight": (cfg.patch_dim, d),
            "patch_embed.proj.bias": (d,),
        }
        if cfg.with_class_token:
            shapes["cls_token"] = (1, d)
        if cfg.positional:
            shapes["pos_embed"] = (cfg.num_tokens, d)
        block = {
            "norm1.weight": (d,), "norm1.bias": (d,),
            "attn.qkv.weight": (d, 3 * d), "attn.qkv.bias": (3 * d,),
            "attn.proj.weight": (d, d), "attn.proj.bias": (d,),
            "norm2.weight": (d,), "norm2.bias": (d,),
            "mlp.fc1.weight": (d, hidden), "mlp.fc1.bias": (hidden,),
            "mlp.fc2.weight": (hidden, d), "mlp.fc2.bias": (d,),
        }
        for i in range(cfg.layers):
            for name, shape in block.items():
                shapes[f"blocks.{i}.{name}"] = shape
        return shapes

    @classmethod
    def initialize(cls, cfg: ViTConfig, prefix: str, seed: int = 0) -> "VisionTransformer":
        """Seeded random weights: truncated normal for matrices and embeddings, ones/zeros for norms and biases."""
        params = {}
        for name, shape in cls.parameter_shapes(cfg).items():
            full = prefix + name
            if name.endswith(".bias"):
                init = "zeros"
            elif ".norm" in name or name.startswith("norm"):
                init = "ones"
            else:
                init = "trunc_normal"
            params[full] = parameter(shape, full, seed, init=init)
        return cls(cfg, params, prefix)

    @classmethod
    def from_weights(cls, cfg: ViTConfig, tensors: Dict[str, np.ndarray], prefix: str) -> "VisionTransformer":
        """Adopt loaded arrays; names must carry ``prefix``.

        Raises:
            DataError: If a required tensor is missing
            DimensionError: If a tensor has the wrong shape
        """
        params = {}
        for name, shape in cls.parameter_shapes(cfg).items():
            full = prefix + name
            if full not in tensors:
                raise DataError(f"weight file has no tensor {full}")
            value = tensors[full]
            if tuple(value.shape) != shape:
                raise DimensionError(f"{full}: expected shape {shape}, got {tuple(value.shape)}")
            params[full] = Tensor(value, requires_grad=True, name=full)
        return cls(cfg, params, prefix)

    def freeze(self) -> "VisionTransformer":
        for tensor in self.params.values():
            tensor.requires_grad = False
            tensor.zero_grad()
        return self

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.params)

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def block_weights(self, index: int) -> BlockWeights:
        """Weights of block ``index`` (0-based)."""
        return BlockWeights.from_params(self.params, f"{self.prefix}blocks.{index}.")

    def embed(self, image: ImageLike) -> TokenSequence:
        p = self.prefix
        return patchify(
            image, self.cfg,
            self.params[p + "patch_embed.proj.weight"], self.params[p + "patch_embed.proj.bias"],
            self.params.get(p + "cls_token"), self.params.get(p + "pos_embed"),
        )

    def forward(self, image: ImageLike) -> TokenSequence:
        z = self.embed(image)
        for i in range(self.cfg.layers):
            z, _ = vit_block(z, self.block_weights(i), self.cfg.heads)
        return z


def iter_taps(image_high: ImageLike, lpm: VisionTransformer,
              tap_layers: Iterable[int]) -> Iterator[LayerTap]:
    """Yield taps of the requested 1-based layers in ascending order, one at a time, without recording.

    Stops after the deepest requested layer.

    Raises:
        ContractError: If a requested layer is outside [1, L]
    """
    wanted = sorted(set(tap_layers))
    for layer in wanted:
        if not 1 <= layer <= lpm.cfg.layers:
            raise ContractError(f"tap layer {layer} outside [1, {lpm.cfg.layers}]")
    if not wanted:
        return
    # recording is switched off per block so the consumer runs normally between yields
    with no_grad():
        z = lpm.embed(image_high)
    for i in range(wanted[-1]):
        layer = i + 1
        with no_grad():
            z, tap = vit_block(z, lpm.block_weights(i), lpm.cfg.heads,
                               record_tap=layer in wanted, layer_index=layer)
        if tap is not None:
            yield tap


def lpm_forward(image_high: ImageLike, lpm: VisionTransformer,
                tap_layers: Iterable[int]) -> List[LayerTap]:
    """Frozen forward pass returning the requested layer taps.

    ``iter_taps`` stops after the deepest requested layer: deeper blocks
    cannot affect any tap and are not executed, so the taps are identical
    to those of a full pass through every block.
    """
    return list(iter_taps(image_high, lpm, tap_layers))
