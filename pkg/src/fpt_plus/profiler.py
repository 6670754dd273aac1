"""Parameter and memory efficiency accounting plus token-selection rasters.

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

Efficiency Scores:
-----------------
    PPE = score * exp(-log10(r + 1))    r: learnable / total parameters
    PME = score * exp(-log10(m + 1))    m: peak memory / full fine-tuning peak

r and m are fractions, not percentages.

Memory:
------
Peaks come from the tensor ledger: the bytes of tensors, gradients and
pending backward buffers allocated during one optimization step, above
what was live before the step started.
"""

import csv
import gc
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from .adapter import (
    PARAMETER_GROUPS, FptConfig, SelectedFeatures, SideNetwork, extract_features, stack_features,
)
from .errors import ContractError
from .tensor import (
    Tensor, backward, layer_norm, ledger_snapshot, no_grad, parameter, reset_peak, tensor_mean,
)
from .train import AdamW, TrainConfig, cross_entropy
from .vit import ViTConfig, VisionTransformer, linear


logger = logging.getLogger(__name__)


def ppe(score: float, r: float) -> float:
    """Performance-parameter efficiency."""
    if score < 0 or r < 0:
        raise ContractError(f"ppe needs score >= 0 and r >= 0, got {score}, {r}")
    return score * math.exp(-math.log10(r + 1.0))


def pme(score: float, m: float) -> float:
    """Performance-memory efficiency."""
    if score < 0 or m < 0:
        raise ContractError(f"pme needs score >= 0 and m >= 0, got {score}, {m}")
    return score * math.exp(-math.log10(m + 1.0))


# -- parameters --------------------------------------------------------------

@dataclass
class ParamCensus:
    learnable: int
    total: int
    groups: Dict[str, int]

    @property
    def ratio(self) -> float:
        return self.learnable / self.total if self.total else 0.0


def _side_groups(cfg: FptConfig) -> Dict[str, int]:
    groups = {g: 0 for g in PARAMETER_GROUPS}
    for name, shape in SideNetwork.parameter_shapes(cfg).items():
        groups[SideNetwork.group_of(name)] += int(np.prod(shape))
    return groups


def config_census(cfg: FptConfig) -> ParamCensus:
    """Exact counts from the architecture alone, without allocating weights."""
    groups = _side_groups(cfg)
    learnable = sum(groups.values())
    groups["lpm"] = sum(int(np.prod(s)) for s in VisionTransformer.parameter_shapes(cfg.lpm).values())
    return ParamCensus(learnable, learnable + groups["lpm"], groups)


def param_census(model) -> ParamCensus:
    """Counts by enumerating the tensors of an assembled FptModel."""
    groups = {group: sum(model.side.params[n].size for n in names)
              for group, names in model.side.param_groups().items()}
    learnable = sum(t.size for t in model.side.params.values() if t.requires_grad)
    learnable += sum(t.size for t in model.lpm.params.values() if t.requires_grad)
    groups["lpm"] = model.lpm.param_count()
    return ParamCensus(learnable, sum(groups.values()), groups)


@dataclass
class EfficiencyReport:
    learnable_params: int
    total_params: int
    r: float
    peak_bytes_method: Optional[int]
    peak_bytes_full_ft: Optional[int]
    m: Optional[float]
    score: float
    ppe: float
    pme: Optional[float]


def efficiency_report(census: ParamCensus, score: float, peak_method: Optional[int] = None,
                      peak_full: Optional[int] = None) -> EfficiencyReport:
    m = peak_method / peak_full if peak_method is not None and peak_full else None
    return EfficiencyReport(
        census.learnable, census.total, census.ratio, peak_method, peak_full, m,
        score, ppe(score, census.ratio), None if m is None else pme(score, m),
    )


# -- memory ----------------------------------------------------------------

def measure_peak(run: Callable[[], object]) -> int:
    """Ledger peak above the pre-run live size while ``run`` executes."""
    gc.collect()
    live, _ = ledger_snapshot()
    reset_peak()
    run()
    _, peak = ledger_snapshot()
    return peak - live


def _labels(batch: int, classes: int) -> List[int]:
    return [i % classes for i in range(batch)]


def fpt_step(side: SideNetwork, images_low: np.ndarray, features: Sequence[Tuple[int, np.ndarray, np.ndarray, np.ndarray]],
             optimizer: AdamW, lr: float = 1e-3) -> Callable[[], None]:
    """One side-network step; cached features arrive as raw arrays and are wrapped inside the step."""
    labels = _labels(images_low.shape[0], side.cfg.num_classes)

    def run():
        feats = [SelectedFeatures(layer, idx, Tensor(k), Tensor(v)) for layer, idx, k, v in features]
        loss = cross_entropy(side.forward(images_low, feats), labels)
        backward(loss)
        optimizer.step(lr)
        optimizer.zero_grad()

    return run


def live_fpt_step(side: SideNetwork, lpm: VisionTransformer, images_high: np.ndarray,
                  images_low: np.ndarray, optimizer: AdamW, lr: float = 1e-3) -> Callable[[], None]:
    """One step with the frozen backbone run inside the step."""
    labels = _labels(images_low.shape[0], side.cfg.num_classes)

    def run():
        feats = stack_features([extract_features(img, lpm, side.cfg) for img in images_high]) if side.cfg.fusion else []
        loss = cross_entropy(side.forward(images_low, feats), labels)
        backward(loss)
        optimizer.step(lr)
        optimizer.zero_grad()

    return run


def inference_step(side: SideNetwork, images_low: np.ndarray,
                   features: Sequence[Tuple[int, np.ndarray, np.ndarray, np.ndarray]]) -> Callable[[], None]:
    def run():
        feats = [SelectedFeatures(layer, idx, Tensor(k), Tensor(v)) for layer, idx, k, v in features]
        with no_grad():
            side.forward(images_low, feats)

    return run


class ClassifierViT:
    """Backbone with a norm and linear head; used for the full fine-tuning and linear probe baselines."""

    def __init__(self, cfg: ViTConfig, num_classes: int, seed: int = 0, backbone: Optional[VisionTransformer] = None):
        self.vit = backbone or VisionTransformer.initialize(cfg, "lpm/", seed)
        self.head = {
            "head/norm.weight": parameter((cfg.dim,), "head/norm.weight", seed, init="ones"),
            "head/norm.bias": parameter((cfg.dim,), "head/norm.bias", seed, init="zeros"),
            "head/head.weight": parameter((cfg.dim, num_classes), "head/head.weight", seed),
            "head/head.bias": parameter((num_classes,), "head/head.bias", seed, init="zeros"),
        }

    def forward(self, images: np.ndarray) -> Tensor:
        z = self.vit.forward(images)
        pooled = z.tokens[..., 0, :] if z.has_class_token else tensor_mean(z.tokens, axis=-2)
        pooled = layer_norm(pooled, self.head["head/norm.weight"], self.head["head/norm.bias"])
        return linear(pooled, self.head["head/head.weight"], self.head["head/head.bias"])


def full_finetune_step(model: ClassifierViT, images_high: np.ndarray, optimizer: AdamW,
                       num_classes: int, lr: float = 1e-3) -> Callable[[], None]:
    labels = _labels(images_high.shape[0], num_classes)

    def run():
        loss = cross_entropy(model.forward(images_high), labels)
        backward(loss)
        optimizer.step(lr)
        optimizer.zero_grad()

    return run


def linear_probe_step(model: ClassifierViT, images_high: np.ndarray, optimizer: AdamW,
                      num_classes: int, lr: float = 1e-3) -> Callable[[], None]:
    """Frozen backbone under no_grad, trainable head on its final class token."""
    labels = _labels(images_high.shape[0], num_classes)

    def run():
        with no_grad():
            z = model.vit.forward(images_high)
            pooled = z.tokens[..., 0, :] if z.has_class_token else tensor_mean(z.tokens, axis=-2)
        del z
        normed = layer_norm(pooled, model.head["head/norm.weight"], model.head["head/norm.bias"])
        logits = linear(normed, model.head["head/head.weight"], model.head["head/head.bias"])
        backward(cross_entropy(logits, labels))
        optimizer.step(lr)
        optimizer.zero_grad()

    return run


def _random_images(rng: np.random.Generator, batch: int, size: int, channels: int) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(batch, size, size, channels)).astype(np.float32)


def _raw_features(lpm: VisionTransformer, cfg: FptConfig, images_high: np.ndarray):
    feats = stack_features([extract_features(img, lpm, cfg) for img in images_high])
    return [(f.layer_index, f.indices, f.keys.data.copy(), f.values.data.copy()) for f in feats]


def _optimizer(params: Dict[str, Tensor], seed: int) -> AdamW:
    optimizer = AdamW({n: p for n, p in params.items() if p.requires_grad}, TrainConfig(seed=seed))
    optimizer.init_state()
    return optimizer


def measure_fpt_peak(cfg: FptConfig, batch: int = 1, seed: int = 0,
                     lpm: Optional[VisionTransformer] = None) -> int:
    """Peak of one training step on preloaded features."""
    rng = np.random.default_rng(seed)
    lpm = (lpm or VisionTransformer.initialize(cfg.lpm, "lpm/", seed)).freeze()
    side = SideNetwork.initialize(cfg, seed)
    images_high = _random_images(rng, batch, cfg.lpm.image_size, cfg.lpm.channels)
    raw = _raw_features(lpm, cfg, images_high) if cfg.fusion else []
    images_low = _random_images(rng, batch, cfg.low_res, cfg.lpm.channels)
    return measure_peak(fpt_step(side, images_low, raw, _optimizer(side.params, seed)))


def measure_inference_peak(cfg: FptConfig, batch: int = 1, seed: int = 0,
                           lpm: Optional[VisionTransformer] = None) -> int:
    rng = np.random.default_rng(seed)
    lpm = (lpm or VisionTransformer.initialize(cfg.lpm, "lpm/", seed)).freeze()
    side = SideNetwork.initialize(cfg, seed)
    images_high = _random_images(rng, batch, cfg.lpm.image_size, cfg.lpm.channels)
    raw = _raw_features(lpm, cfg, images_high) if cfg.fusion else []
    images_low = _random_images(rng, batch, cfg.low_res, cfg.lpm.channels)
    return measure_peak(inference_step(side, images_low, raw))


def measure_full_finetune_peak(cfg: ViTConfig, num_classes: int = 2, batch: int = 1, seed: int = 0) -> int:
    model = ClassifierViT(cfg, num_classes, seed)
    params = {**model.vit.params, **model.head}
    images = _random_images(np.random.default_rng(seed), batch, cfg.image_size, cfg.channels)
    return measure_peak(full_finetune_step(model, images, _optimizer(params, seed), num_classes))


def measure_linear_probe_peak(cfg: ViTConfig, num_classes: int = 2, batch: int = 1, seed: int = 0) -> int:
    model = ClassifierViT(cfg, num_classes, seed)
    model.vit.freeze()
    images = _random_images(np.random.default_rng(seed), batch, cfg.image_size, cfg.channels)
    return measure_peak(linear_probe_step(model, images, _optimizer(model.head, seed), num_classes))


@dataclass
class AblationRow:
    name: str
    peak_bytes: int


def component_ablation(cfg: FptConfig, batch: int = 1, seed: int = 0) -> List[AblationRow]:
    """Step peaks as the components are added one at a time.

    Rows: side network alone; + fusion over every backbone token with a
    high-resolution side input and a live backbone pass; + asymmetric
    (low-resolution) side input; + important-token selection; + preloading.
    """
    rng = np.random.default_rng(seed)
    lpm = VisionTransformer.initialize(cfg.lpm, "lpm/", seed).freeze()
    images_high = _random_images(rng, batch, cfg.lpm.image_size, cfg.lpm.channels)
    images_low = _random_images(rng, batch, cfg.low_res, cfg.lpm.channels)
    high_as_low = images_high.copy()

    def live(variant: FptConfig, low: np.ndarray) -> int:
        side = SideNetwork.initialize(variant, seed)
        return measure_peak(live_fpt_step(side, lpm, images_high, low, _optimizer(side.params, seed)))

    rows = []
    side_only = replace(cfg, fusion=False)
    side = SideNetwork.initialize(side_only, seed)
    rows.append(AblationRow("side network", measure_peak(
        fpt_step(side, images_low, [], _optimizer(side.params, seed)))))
    rows.append(AblationRow("+ fusion (all tokens, symmetric input)",
                            live(replace(cfg, token_ratio=1.0, low_res=cfg.lpm.image_size), high_as_low)))
    rows.append(AblationRow("+ asymmetric input", live(replace(cfg, token_ratio=1.0), images_low)))
    rows.append(AblationRow("+ important tokens", live(cfg, images_low)))
    rows.append(AblationRow("+ preloading", measure_fpt_peak(cfg, batch, seed, lpm)))
    for row in rows:
        logger.debug(f"ablation {row.name}: {row.peak_bytes} bytes")
    return rows


# -- rasters ---------------------------------------------------------------

def selection_map_arrays(selected: SelectedFeatures, grid: int,
                         attention: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """(grid, grid) uint8 map and mask for one unbatched layer selection.

    Selected cells carry the prompt-attention mass they received (summed over
    heads and prompts, scaled so the maximum is 255); with no attention given
    every selected cell is 255. Other cells are 0.
    """
    indices = np.asarray(selected.indices)
    if indices.ndim != 1:
        raise ContractError("selection map needs an unbatched selection")
    if indices.size and indices.max() >= grid * grid:
        raise ContractError(f"index {indices.max()} outside a {grid}x{grid} grid")
    mask = np.zeros(grid * grid, dtype=np.uint8)
    mask[indices] = 255
    values = np.zeros(grid * grid, dtype=np.float64)
    if attention is None:
        values[indices] = 1.0
    else:
        mass = np.asarray(attention, dtype=np.float64)
        mass = mass.reshape(-1, mass.shape[-1]).sum(axis=0)
        if mass.shape[0] != indices.size:
            raise ContractError(f"attention covers {mass.shape[0]} tokens, selection has {indices.size}")
        peak = mass.max()
        values[indices] = mass / peak if peak > 0 else 1.0
    cells = np.rint(values * 255.0).astype(np.uint8)
    return cells.reshape(grid, grid), mask.reshape(grid, grid)


def export_selection_map(selected: SelectedFeatures, grid: int, out_path: Union[str, Path],
                         attention: Optional[np.ndarray] = None) -> Tuple[Path, Path]:
    """Write the attention map to ``out_path`` and the mask to ``<stem>_mask.pgm`` as binary PGM."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    cells, mask = selection_map_arrays(selected, grid, attention)
    mask_path = out_path.with_name(f"{out_path.stem}_mask.pgm")
    Image.fromarray(cells).save(out_path, format="PPM")
    Image.fromarray(mask).save(mask_path, format="PPM")
    logger.info(f"Wrote selection map {out_path} and mask {mask_path}")
    return out_path, mask_path


def write_prompt_profile(path: Union[str, Path], profile: Sequence[float]) -> None:
    """CSV ``side_layer,prompt_attention``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["side_layer", "prompt_attention"])
        for layer, value in enumerate(profile, start=1):
            writer.writerow([layer, f"{value:.6f}"])
