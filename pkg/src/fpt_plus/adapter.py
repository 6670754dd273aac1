"""Side network with fine-grained prompts fused from a frozen backbone.

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

Data Flow:
---------
The frozen backbone (LPM, width D_M, depth L_M) sees the high-resolution
image. The side network (width D_S = D_M / k, depth L_S) sees a
down-sampled copy. Side layer l is paired with backbone layer
l' = L_M - L_S + l.

For each paired backbone layer, the patch tokens receiving the most
attention from the other tokens are kept (top token_ratio). Their per-head
keys and values are all the side network ever sees of the backbone.

Before side block l, a set of learnable prompts at width D_M queries those
keys and values:

    q   = LN_l(p_l)
    p_M = CrossAttn(q, K_sel, V_sel) + p_l      (heads mirror the backbone)
    p~  = f_out(p_M)                            (one projector for all layers)

p~ is appended after the side tokens, the block runs on the longer
sequence and the prompt slots are dropped again before the next layer.
"""

import logging
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, ContractError, DataError, DimensionError
from .tensor import (
    DTYPE, Tensor, broadcast_to, concat, layer_norm, no_grad, parameter, tensor_mean,
)
from .vit import (
    LayerTap, TokenSequence, ViTConfig, VisionTransformer, attention, iter_taps,
    linear, merge_heads, split_heads, vit_block,
)


logger = logging.getLogger(__name__)

SELECTION_STRATEGIES = ("important", "random")


@dataclass(frozen=True)
class FptConfig:
    """Architecture of the frozen backbone plus side network."""
    lpm: ViTConfig = field(default_factory=ViTConfig)
    side_layers: int = 6
    reduction: int = 8
    prompts: int = 16
    token_ratio: float = 0.2
    low_res: int = 128
    side_heads: int = 0
    num_classes: int = 2
    selection: str = "important"
    selection_seed: int = 0
    fusion: bool = True

    def __post_init__(self):
        if not 1 <= self.side_layers <= self.lpm.layers:
            raise ConfigError(
                f"side.layers must be in [1, lpm.layers={self.lpm.layers}], got {self.side_layers}"
            )
        if self.reduction < 1 or self.lpm.dim % self.reduction:
            raise ConfigError(f"lpm.dim {self.lpm.dim} is not divisible by side.reduction {self.reduction}")
        if self.side_heads < 0 or self.d_side % self.heads_side:
            raise ConfigError(f"side width {self.d_side} is not divisible by {self.heads_side} heads")
        if not 0.0 < self.token_ratio <= 1.0:
            raise ConfigError(f"side.token_ratio must be in (0, 1], got {self.token_ratio}")
        if self.prompts < 1:
            raise ConfigError(f"side.prompts must be positive, got {self.prompts}")
        if self.low_res < 1 or self.low_res % self.lpm.patch_size:
            raise ConfigError(
                f"side.low_res {self.low_res} is not divisible by patch size {self.lpm.patch_size}"
            )
        if self.num_classes < 2:
            raise ConfigError(f"data.classes must be at least 2, got {self.num_classes}")
        if self.selection not in SELECTION_STRATEGIES:
            raise ConfigError(f"side.selection must be one of {SELECTION_STRATEGIES}, got {self.selection!r}")

    @property
    def d_model(self) -> int:
        return self.lpm.dim

    @property
    def d_side(self) -> int:
        return self.lpm.dim // self.reduction

    @property
    def heads_side(self) -> int:
        return self.side_heads or self.lpm.heads

    @property
    def side_vit(self) -> ViTConfig:
        return ViTConfig(
            image_size=self.low_res,
            patch_size=self.lpm.patch_size,
            layers=self.side_layers,
            dim=self.d_side,
            heads=self.heads_side,
            mlp_ratio=self.lpm.mlp_ratio,
            channels=self.lpm.channels,
            with_class_token=self.lpm.with_class_token,
            positional=self.lpm.positional,
        )

    @property
    def fused_layers(self) -> List[int]:
        return [side_layer_map(self.lpm.layers, self.side_layers, l) for l in range(1, self.side_layers + 1)]

    @property
    def num_selected(self) -> int:
        return selection_count(self.lpm.num_patches, self.token_ratio)


def side_layer_map(l_m: int, l_s: int, l: int) -> int:
    """Backbone layer paired with side layer ``l`` (all 1-based)."""
    if not 1 <= l <= l_s <= l_m:
        raise ContractError(f"side layer {l} invalid for L_S={l_s}, L_M={l_m}")
    return l_m - l_s + l


def selection_count(n_patch: int, token_ratio: float) -> int:
    if n_patch < 1:
        raise ContractError("cannot select from an empty token set")
    if not 0.0 < token_ratio <= 1.0:
        raise ContractError(f"token_ratio must be in (0, 1], got {token_ratio}")
    return max(1, int(np.floor(token_ratio * n_patch + 1e-9)))


def importance_scores(attn: Union[Tensor, np.ndarray], class_token_present: bool) -> np.ndarray:
    """Average attention each patch token receives from the other tokens.

    Args:
        attn: (..., H, n, n) post-softmax attention
        class_token_present: Token 0 is a class token; its column is dropped, its row still votes

    Returns:
        (..., N_patch) float64 scores

    Raises:
        ContractError: If n < 2
    """
    a = np.asarray(attn.data if isinstance(attn, Tensor) else attn, dtype=np.float64)
    heads, n = a.shape[-3], a.shape[-1]
    if n < 2:
        raise ContractError(f"importance needs at least 2 tokens, got {n}")
    received = a.sum(axis=-2) - np.diagonal(a, axis1=-2, axis2=-1)
    scores = received.sum(axis=-2) / (heads * (n - 1))
    return scores[..., 1:] if class_token_present else scores


def select_important(scores: np.ndarray, token_ratio: float) -> np.ndarray:
    """Indices of the top-scoring tokens, ties to the lower index, sorted ascending."""
    scores = np.asarray(scores)
    if scores.ndim != 1 or scores.size == 0:
        raise ContractError(f"select_important needs a non-empty score vector, got shape {scores.shape}")
    count = selection_count(scores.size, token_ratio)
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:count]).astype(np.int64)


def select_random(n_patch: int, token_ratio: float,
                  seed: Union[int, Sequence[int], np.random.Generator]) -> np.ndarray:
    """Uniform selection without replacement, sorted ascending."""
    count = selection_count(n_patch, token_ratio)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return np.sort(rng.choice(n_patch, size=count, replace=False)).astype(np.int64)


@dataclass
class SelectedFeatures:
    """Kept keys and values of one backbone layer."""
    layer_index: int
    indices: np.ndarray   # (n_sel,) or (B, n_sel), patch-token numbering
    keys: Tensor          # (..., H, n_sel, d_h)
    values: Tensor        # (..., H, n_sel, d_h)

    def __post_init__(self):
        if self.keys.shape != self.values.shape:
            raise DimensionError(f"keys {self.keys.shape} and values {self.values.shape} differ")
        if self.indices.shape[-1] != self.keys.shape[-2]:
            raise DimensionError(
                f"{self.indices.shape[-1]} indices for {self.keys.shape[-2]} stored tokens"
            )


def gather_features(tap: LayerTap, indices: np.ndarray, class_token_present: bool) -> SelectedFeatures:
    """Copy the per-head K/V rows of the selected patch tokens out of a single-image tap."""
    if tap.keys.ndim != 3:
        raise DimensionError(f"gather_features expects an unbatched tap, got keys {tap.keys.shape}")
    positions = indices + (1 if class_token_present else 0)
    keys = Tensor._wrap(np.ascontiguousarray(tap.keys.data[:, positions, :]))
    values = Tensor._wrap(np.ascontiguousarray(tap.values.data[:, positions, :]))
    return SelectedFeatures(tap.layer_index, np.asarray(indices, dtype=np.int64), keys, values)


def random_selection_seed(selection_seed: int, image_id: str, layer_index: int) -> List[int]:
    return [int(selection_seed), zlib.crc32(image_id.encode("utf-8")), int(layer_index)]


def extract_features(image_high: np.ndarray, lpm: VisionTransformer, cfg: FptConfig,
                     image_id: str = "") -> List[SelectedFeatures]:
    """Run the frozen backbone on one image and keep the selected tokens of every paired layer.

    Args:
        image_high: (H, W, C) normalized pixels at the backbone resolution
        lpm: Frozen backbone
        cfg: Architecture (selection strategy and ratio)
        image_id: Stable id; keys the random-selection stream

    Returns:
        One SelectedFeatures per paired layer, ascending
    """
    if not cfg.fusion:
        return []
    pixels = image_high.data if isinstance(image_high, Tensor) else np.asarray(image_high)
    if pixels.ndim != 3:
        raise DimensionError(f"extract_features takes one (H, W, C) image, got {pixels.shape}")
    has_cls = cfg.lpm.with_class_token
    features = []
    for tap in iter_taps(pixels, lpm, cfg.fused_layers):
        if cfg.selection == "important":
            indices = select_important(importance_scores(tap.attn, has_cls), cfg.token_ratio)
        else:
            seed = random_selection_seed(cfg.selection_seed, image_id, tap.layer_index)
            indices = select_random(cfg.lpm.num_patches, cfg.token_ratio, seed)
        features.append(gather_features(tap, indices, has_cls))
        del tap
    return features


def stack_features(records: Sequence[Sequence[SelectedFeatures]]) -> List[SelectedFeatures]:
    """Batch per-image feature lists into one list with a leading batch axis."""
    if not records:
        raise ContractError("stack_features needs at least one record")
    stacked = []
    for per_layer in zip(*records):
        layer = per_layer[0].layer_index
        if any(f.layer_index != layer for f in per_layer):
            raise ContractError("records disagree on layer order")
        stacked.append(SelectedFeatures(
            layer,
            np.stack([f.indices for f in per_layer]),
            Tensor._wrap(np.stack([f.keys.data for f in per_layer])),
            Tensor._wrap(np.stack([f.values.data for f in per_layer])),
        ))
    return stacked


@dataclass
class PromptSet:
    """Independent (n_p, D_M) prompt matrix per fused layer."""
    prompts: List[Tensor]

    def __len__(self) -> int:
        return len(self.prompts)

    def __getitem__(self, index: int) -> Tensor:
        return self.prompts[index]


@dataclass
class OutProjector:
    """D_M -> D_S projection shared by every fusion module."""
    weight: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


def fuse(z_side: TokenSequence, prompts: Tensor, sel: SelectedFeatures, f_out: OutProjector,
         norm: Optional[Tuple[Tensor, Tensor]] = None,
         return_attention: bool = False):
    """Let the prompts read the selected backbone features and append them to the side tokens.

    Args:
        z_side: (..., n_S, D_S) side tokens
        prompts: (n_p, D_M) prompts of this layer
        sel: Selected keys/values, (..., H, n_sel, D_M/H)
        f_out: Shared projector
        norm: (gamma, beta) of the prompt layer norm; identity affine when omitted
        return_attention: Also return the (..., H, n_p, n_sel) cross-attention weights

    Returns:
        TokenSequence of length n_S + n_p (and the weights when requested)

    Raises:
        DimensionError: If the stored heads do not tile the prompt width
    """
    d_model = prompts.shape[-1]
    heads, head_dim = sel.keys.shape[-3], sel.keys.shape[-1]
    if heads * head_dim != d_model:
        raise DimensionError(
            f"fuse: {heads} heads of width {head_dim} do not tile prompt width {d_model}"
        )
    if norm is None:
        norm = (Tensor(np.ones(d_model, dtype=DTYPE)), Tensor(np.zeros(d_model, dtype=DTYPE)))
    q = split_heads(layer_norm(prompts, norm[0], norm[1]), heads)
    out, weights = attention(q, sel.keys, sel.values)
    fused = f_out(merge_heads(out) + prompts)
    lead = z_side.tokens.shape[:-2]
    if fused.shape[:-2] != lead:
        fused = broadcast_to(fused, lead + fused.shape[-2:])
    result = TokenSequence(concat([z_side.tokens, fused], axis=-2), z_side.has_class_token)
    if return_attention:
        return result, weights
    return result


@dataclass
class SideTrace:
    """Optional per-layer record of one side forward pass."""
    in_block_lengths: List[int] = field(default_factory=list)
    between_lengths: List[int] = field(default_factory=list)
    block_attn: List[np.ndarray] = field(default_factory=list)
    fusion_attn: List[np.ndarray] = field(default_factory=list)


PARAMETER_GROUPS = ("side_embed", "side_blocks", "prompts", "fusion_norm", "f_out", "head")


class SideNetwork:
    """Learnable part of the model; every tensor is named under ``side/``.

    Args:
        cfg: Architecture
        params: Full names to tensors
    """

    prefix = "side/"

    def __init__(self, cfg: FptConfig, params: Dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        vit_names = {self.prefix + n for n in VisionTransformer.parameter_shapes(cfg.side_vit)}
        self.backbone = VisionTransformer(
            cfg.side_vit, {n: t for n, t in params.items() if n in vit_names}, self.prefix
        )

    @classmethod
    def parameter_shapes(cls, cfg: FptConfig) -> Dict[str, Tuple[int, ...]]:
        p = cls.prefix
        shapes = {p + name: shape for name, shape in VisionTransformer.parameter_shapes(cfg.side_vit).items()}
        if cfg.fusion:
            for i in range(cfg.side_layers):
                shapes[f"{p}prompts.{i}"] = (cfg.prompts, cfg.d_model)
            for i in range(cfg.side_layers):
                shapes[f"{p}fusion.{i}.norm.weight"] = (cfg.d_model,)
                shapes[f"{p}fusion.{i}.norm.bias"] = (cfg.d_model,)
            shapes[p + "f_out.weight"] = (cfg.d_model, cfg.d_side)
            shapes[p + "f_out.bias"] = (cfg.d_side,)
        shapes[p + "norm.weight"] = (cfg.d_side,)
        shapes[p + "norm.bias"] = (cfg.d_side,)
        shapes[p + "head.weight"] = (cfg.d_side, cfg.num_classes)
        shapes[p + "head.bias"] = (cfg.num_classes,)
        return shapes

    @classmethod
    def initialize(cls, cfg: FptConfig, seed: int = 0) -> "SideNetwork":
        side = VisionTransformer.initialize(cfg.side_vit, cls.prefix, seed)
        params = dict(side.params)
        for name, shape in cls.parameter_shapes(cfg).items():
            if name in params:
                continue
            if name.endswith(".bias"):
                init = "zeros"
            elif "norm" in name:
                init = "ones"
            else:
                init = "trunc_normal"
            params[name] = parameter(shape, name, seed, init=init)
        return cls(cfg, params)

    @classmethod
    def from_weights(cls, cfg: FptConfig, tensors: Dict[str, np.ndarray]) -> "SideNetwork":
        """Adopt loaded arrays, checking names and shapes."""
        params = {}
        for name, shape in cls.parameter_shapes(cfg).items():
            if name not in tensors:
                raise DataError(f"weight file has no tensor {name}")
            if tuple(tensors[name].shape) != shape:
                raise DimensionError(f"{name}: expected shape {shape}, got {tuple(tensors[name].shape)}")
            params[name] = Tensor(tensors[name], requires_grad=True, name=name)
        return cls(cfg, params)

    # -- parameter views ---------------------------------------------------

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.params)

    @classmethod
    def group_of(cls, name: str) -> str:
        short = name[len(cls.prefix):]
        if short.startswith(("patch_embed.", "cls_token", "pos_embed")):
            return "side_embed"
        if short.startswith("blocks."):
            return "side_blocks"
        if short.startswith("prompts."):
            return "prompts"
        if short.startswith("fusion."):
            return "fusion_norm"
        if short.startswith("f_out."):
            return "f_out"
        return "head"

    def param_groups(self) -> Dict[str, List[str]]:
        """Parameter names by group."""
        groups: Dict[str, List[str]] = {g: [] for g in PARAMETER_GROUPS}
        for name in self.params:
            groups[self.group_of(name)].append(name)
        return groups

    @property
    def prompt_set(self) -> PromptSet:
        return PromptSet([self.params[f"{self.prefix}prompts.{i}"] for i in range(self.cfg.side_layers)])

    @property
    def out_projector(self) -> OutProjector:
        return OutProjector(self.params[self.prefix + "f_out.weight"], self.params[self.prefix + "f_out.bias"])

    def fusion_norm(self, index: int) -> Tuple[Tensor, Tensor]:
        p = f"{self.prefix}fusion.{index}.norm."
        return self.params[p + "weight"], self.params[p + "bias"]

    # -- forward -----------------------------------------------------------

    def check_features(self, features: Sequence[SelectedFeatures]) -> None:
        if not self.cfg.fusion:
            return
        if len(features) != self.cfg.side_layers:
            raise ContractError(f"expected {self.cfg.side_layers} feature records, got {len(features)}")
        got = [f.layer_index for f in features]
        if got != self.cfg.fused_layers:
            raise ContractError(f"feature layers {got} do not match paired layers {self.cfg.fused_layers}")

    def forward(self, image_low, features: Sequence[SelectedFeatures] = (),
                trace: Optional[SideTrace] = None) -> Tensor:
        """Logits for (H, W, C) or (B, H, W, C) low-resolution input."""
        self.check_features(features)
        cfg = self.cfg
        z = self.backbone.embed(image_low)
        n_side = z.length
        f_out = self.out_projector if cfg.fusion else None
        for i in range(cfg.side_layers):
            if cfg.fusion:
                fused = fuse(z, self.params[f"{self.prefix}prompts.{i}"], features[i], f_out,
                             norm=self.fusion_norm(i), return_attention=trace is not None)
                if trace is not None:
                    fused, weights = fused
                    trace.fusion_attn.append(weights.data.copy())
                z = fused
            if trace is not None:
                trace.in_block_lengths.append(z.length)
            z, tap = vit_block(z, self.backbone.block_weights(i), cfg.heads_side,
                               record_tap=trace is not None, layer_index=i + 1)
            if z.length != n_side:
                z = TokenSequence(z.tokens[..., :n_side, :], z.has_class_token)
            if trace is not None:
                trace.block_attn.append(tap.attn.data.copy())
                trace.between_lengths.append(z.length)
        if z.has_class_token:
            pooled = z.tokens[..., 0, :]
        else:
            pooled = tensor_mean(z.tokens, axis=-2)
        p = self.prefix
        pooled = layer_norm(pooled, self.params[p + "norm.weight"], self.params[p + "norm.bias"])
        return linear(pooled, self.params[p + "head.weight"], self.params[p + "head.bias"])

    __call__ = forward


def side_forward(image_low, features: Sequence[SelectedFeatures], side: SideNetwork) -> Tensor:
    return side.forward(image_low, features)


def prompt_attention_profile(side: SideNetwork, image_low,
                             features: Sequence[SelectedFeatures]) -> List[float]:
    """Mean attention mass side tokens place on the prompt slots, per side layer."""
    if not side.cfg.fusion:
        return [0.0] * side.cfg.side_layers
    trace = SideTrace()
    with no_grad():
        side.forward(image_low, features, trace=trace)
    n_side = trace.between_lengths[0]
    return [float(attn[..., :n_side, n_side:].sum(axis=-1).mean()) for attn in trace.block_attn]


class FptModel:
    """Frozen backbone plus side network.

    Args:
        cfg: Architecture
        lpm: Backbone; frozen on construction
        side: Side network
    """

    def __init__(self, cfg: FptConfig, lpm: VisionTransformer, side: SideNetwork):
        if lpm.cfg != cfg.lpm:
            raise ConfigError("backbone geometry does not match the lpm section")
        self.cfg = cfg
        self.lpm = lpm.freeze()
        self.side = side

    @classmethod
    def initialize(cls, cfg: FptConfig, seed: int = 0,
                   lpm: Optional[VisionTransformer] = None) -> "FptModel":
        if lpm is None:
            lpm = VisionTransformer.initialize(cfg.lpm, "lpm/", seed)
        return cls(cfg, lpm, SideNetwork.initialize(cfg, seed))

    def learnable_parameters(self) -> Dict[str, Tensor]:
        return {n: t for n, t in self.side.params.items() if t.requires_grad}

    def features(self, image_high, image_id: str = "") -> List[SelectedFeatures]:
        return extract_features(image_high, self.lpm, self.cfg, image_id)

    def logits(self, image_low, features: Sequence[SelectedFeatures]) -> Tensor:
        return self.side.forward(image_low, features)
