"""Loss, optimizer, schedule, AUC and the training loop for the side network.

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

Training Protocol:
-----------------
- AdamW with decoupled weight decay over the side-network parameters only
- cosine learning rate from lr_max to 0, updated every step
- cross-entropy on the class logits
- the side input is augmented, the backbone features come from a feature
  source (preloaded cache or a live frozen pass; both give identical values)
- after each epoch the validation split is scored by AUC and the best
  parameters are restored at the end of the run
"""

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import rankdata

from .adapter import FptConfig, SelectedFeatures, SideNetwork, extract_features, stack_features
from .cache import CacheFile, CacheFingerprint
from .data import Dataset, DatasetItem, load_high, load_low
from .errors import CacheLookupError, ConfigError, ContractError, NumericError, UndefinedMetricError
from .tensor import DTYPE, Tensor, backward, getitem, log_softmax_rows, no_grad, tensor_mean
from .vit import VisionTransformer


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr_max: float = 1e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be at least 1, got {self.batch_size}")
        if self.lr_max < 0:
            raise ConfigError(f"train.lr_max must not be negative, got {self.lr_max}")
        if self.weight_decay < 0:
            raise ConfigError(f"train.weight_decay must not be negative, got {self.weight_decay}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"train.beta1/beta2 must be in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise ConfigError(f"train.eps must be positive, got {self.eps}")


def cosine_lr(t: int, total: int, lr_max: float) -> float:
    """Cosine annealing from ``lr_max`` at t=0 to 0 at t=total."""
    if total < 1 or not 0 <= t <= total:
        raise ContractError(f"cosine_lr needs 0 <= t <= T and T >= 1, got t={t}, T={total}")
    return 0.5 * lr_max * (1.0 + math.cos(math.pi * t / total))


# -- optimizer -------------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    m: Dict[str, Tensor] = field(default_factory=dict)
    v: Dict[str, Tensor] = field(default_factory=dict)


def adamw_step(params: Dict[str, Tensor], grads: Dict[str, Optional[np.ndarray]],
               state: AdamWState, lr: float, cfg: TrainConfig) -> AdamWState:
    """One AdamW update in place.

    Decay is decoupled: theta <- theta * (1 - lr*wd), then the bias-corrected
    Adam step. Parameters without a gradient are left untouched.
    """
    state.step += 1
    correction1 = 1.0 - cfg.beta1 ** state.step
    correction2 = 1.0 - cfg.beta2 ** state.step
    b1, b2 = DTYPE(cfg.beta1), DTYPE(cfg.beta2)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = Tensor(np.zeros_like(p.data))
            state.v[name] = Tensor(np.zeros_like(p.data))
        m, v = state.m[name].data, state.v[name].data
        if lr and cfg.weight_decay:
            p.data *= DTYPE(1.0 - lr * cfg.weight_decay)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if lr:
            step = (m / DTYPE(correction1)) / (np.sqrt(v / DTYPE(correction2)) + DTYPE(cfg.eps))
            p.data -= DTYPE(lr) * step
    return state


class AdamW:
    """Stateful wrapper over ``adamw_step`` for a fixed parameter dict."""

    def __init__(self, params: Dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.state = AdamWState()

    def init_state(self) -> None:
        """Allocate both moment buffers up front."""
        for name, p in self.params.items():
            if name not in self.state.m:
                self.state.m[name] = Tensor(np.zeros_like(p.data))
                self.state.v[name] = Tensor(np.zeros_like(p.data))

    def step(self, lr: float) -> None:
        adamw_step(self.params, {n: p.grad for n, p in self.params.items()}, self.state, lr, self.cfg)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


# -- loss and metrics --------------------------------------------------------

def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``).

    Raises:
        ContractError: If a label is outside [0, C) or the count does not match the batch
    """
    labels = np.asarray(labels, dtype=np.int64)
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise ContractError(f"{labels.shape[0] if labels.ndim else 0} labels for a batch of {batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ContractError(f"labels must be in [0, {classes}), got {labels.tolist()}")
    picked = getitem(log_softmax_rows(logits), (np.arange(batch), labels))
    return -tensor_mean(picked)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted.astype(np.float64))
    return e / e.sum(axis=-1, keepdims=True)


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability that a random positive outranks a random negative; ties count one half.

    Raises:
        UndefinedMetricError: If only one class is present
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(labels).astype(bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUC needs both classes, got {n_pos} positive and {n_neg} negative")
    # mid-ranks are multiples of 1/2, so doubled ranks are exact integers
    doubled = np.rint(2.0 * rankdata(scores, method="average")).astype(np.int64)
    u_doubled = int(doubled[positive].sum()) - n_pos * (n_pos + 1)
    return u_doubled / (2 * n_pos * n_neg)


def macro_auc(probs: np.ndarray, labels: Sequence[int]) -> Tuple[float, List[float]]:
    """Class-1 AUC for two classes, otherwise the mean of one-vs-rest AUCs."""
    labels = np.asarray(labels, dtype=np.int64)
    if probs.shape[1] == 2:
        value = auc(probs[:, 1], labels == 1)
        return value, [1.0 - value, value]
    per_class = [auc(probs[:, c], labels == c) for c in range(probs.shape[1])]
    return float(np.mean(per_class)), per_class


@dataclass
class EvalResult:
    auc: float
    per_class_auc: List[float]
    loss: float
    scores: np.ndarray = field(repr=False, default=None)
    labels: np.ndarray = field(repr=False, default=None)


# -- feature sources ---------------------------------------------------------

class CachedFeatures:
    """Backbone features read from a preloaded cache."""

    def __init__(self, cache: CacheFile):
        self.cache = cache

    def check(self, cfg: FptConfig, items: Sequence[DatasetItem]) -> None:
        expected = CacheFingerprint.from_config(cfg)
        if expected.pack() != self.cache.fingerprint.pack():
            raise ConfigError(
                f"cache {self.cache.path} was built for {self.cache.fingerprint}, configuration is {expected}"
            )
        missing = [i.file for i in items if i.file not in self.cache]
        if missing:
            raise CacheLookupError(f"{len(missing)} images missing from cache, first: {missing[0]!r}")

    def batch(self, dataset: Dataset, items: Sequence[DatasetItem]) -> List[SelectedFeatures]:
        return self.cache.load_batch([i.file for i in items])


class LiveFeatures:
    """Backbone features computed on the fly, one image at a time."""

    def __init__(self, lpm: VisionTransformer, cfg: FptConfig, norm: Tuple[float, float] = (0.5, 0.5)):
        self.lpm = lpm
        self.cfg = cfg
        self.norm = norm

    def check(self, cfg: FptConfig, items: Sequence[DatasetItem]) -> None:
        if cfg != self.cfg:
            raise ConfigError("live feature source was built for a different configuration")

    def batch(self, dataset: Dataset, items: Sequence[DatasetItem]) -> List[SelectedFeatures]:
        records = []
        for item in items:
            image = load_high(dataset.path(item), self.cfg.lpm.image_size, self.cfg.lpm.channels, *self.norm)
            records.append(extract_features(image, self.lpm, self.cfg, item.file))
        return stack_features(records)


class NoFeatures:
    """Source for the side-only baseline."""

    def check(self, cfg: FptConfig, items: Sequence[DatasetItem]) -> None:
        if cfg.fusion:
            raise ConfigError("side.fusion is enabled but no feature source was given")

    def batch(self, dataset: Dataset, items: Sequence[DatasetItem]) -> List[SelectedFeatures]:
        return []


def low_batch(dataset: Dataset, items: Sequence[DatasetItem], cfg: FptConfig,
              rng: Optional[np.random.Generator] = None,
              norm: Tuple[float, float] = (0.5, 0.5)) -> np.ndarray:
    return np.stack([
        load_low(dataset.path(i), cfg.lpm.image_size, cfg.low_res, cfg.lpm.channels, rng, *norm)
        for i in items
    ])


def batches(items: Sequence[DatasetItem], size: int):
    for start in range(0, len(items), size):
        yield items[start:start + size]


# -- evaluation and training -------------------------------------------------

def evaluate(side: SideNetwork, dataset: Dataset, features, batch_size: int = 16,
             norm: Tuple[float, float] = (0.5, 0.5)) -> EvalResult:
    """Score every item of ``dataset`` without augmentation or recording.

    Raises:
        UndefinedMetricError: If a class is missing from ``dataset``
    """
    if len(dataset) == 0:
        raise UndefinedMetricError("cannot evaluate an empty split")
    logits, losses = [], []
    with no_grad():
        for chunk in batches(dataset.items, batch_size):
            out = side.forward(low_batch(dataset, chunk, side.cfg, None, norm), features.batch(dataset, chunk))
            losses.append(cross_entropy(out, [i.label for i in chunk]).item() * len(chunk))
            logits.append(out.data)
    probs = softmax_probs(np.concatenate(logits))
    labels = dataset.labels()
    value, per_class = macro_auc(probs, labels)
    return EvalResult(value, per_class, sum(losses) / len(dataset), probs, labels)


@dataclass
class MetricRow:
    epoch: int
    split: str
    loss: float
    auc: Optional[float]


@dataclass
class TrainResult:
    history: List[MetricRow]
    best_epoch: int
    best_val_auc: Optional[float]
    steps: int


def write_metrics(path: Union[str, Path], rows: Sequence[MetricRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "split", "loss", "auc"])
        for row in rows:
            writer.writerow([row.epoch, row.split, f"{row.loss:.6f}",
                             "" if row.auc is None else f"{row.auc:.6f}"])


def _optional_auc(probs: np.ndarray, labels: np.ndarray) -> Optional[float]:
    try:
        return macro_auc(probs, labels)[0]
    except UndefinedMetricError:
        return None


def train(side: SideNetwork, dataset: Dataset, features, cfg: TrainConfig,
          metrics_path: Optional[Union[str, Path]] = None,
          norm: Tuple[float, float] = (0.5, 0.5)) -> TrainResult:
    """Train ``side`` in place on the train split; keeps the best-by-validation parameters.

    Args:
        side: Side network (updated in place)
        dataset: Dataset with train (and optionally val) items
        features: CachedFeatures, LiveFeatures or NoFeatures
        cfg: Optimization settings
        metrics_path: Optional CSV log ``epoch,split,loss,auc``
        norm: Pixel normalization mean and std

    Returns:
        TrainResult with per-epoch metrics

    Raises:
        ConfigError: If the feature source does not match the architecture (before any step)
        NumericError: If the loss becomes non-finite
    """
    train_set, val_set = dataset.split("train"), dataset.split("val")
    if len(train_set) == 0:
        raise ContractError("dataset has no train items")
    features.check(side.cfg, train_set.items + val_set.items)

    params = {n: p for n, p in side.params.items() if p.requires_grad}
    optimizer = AdamW(params, cfg)
    shuffle_rng = np.random.default_rng(cfg.seed)
    augment_rng = np.random.default_rng([cfg.seed, 1]) if cfg.augment else None
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch

    history: List[MetricRow] = []
    best_auc: Optional[float] = None
    best_epoch = cfg.epochs
    best_state: Optional[Dict[str, np.ndarray]] = None
    step = 0

    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train_set))
        items = [train_set.items[i] for i in order]
        epoch_loss, logits, labels = 0.0, [], []
        for chunk in batches(items, cfg.batch_size):
            lr = cosine_lr(step, total, cfg.lr_max)
            chunk_labels = [i.label for i in chunk]
            out = side.forward(low_batch(train_set, chunk, side.cfg, augment_rng, norm),
                               features.batch(train_set, chunk))
            loss = cross_entropy(out, chunk_labels)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, step {step}")
            backward(loss)
            optimizer.step(lr)
            optimizer.zero_grad()
            logger.debug(f"epoch {epoch} step {step} lr {lr:.3e} loss {value:.4f}")
            epoch_loss += value * len(chunk)
            logits.append(out.data)
            labels.extend(chunk_labels)
            del out, loss
            step += 1

        train_loss = epoch_loss / len(train_set)
        train_auc = _optional_auc(softmax_probs(np.concatenate(logits)), np.asarray(labels))
        history.append(MetricRow(epoch, "train", train_loss, train_auc))
        message = f"Epoch {epoch}/{cfg.epochs}: train loss {train_loss:.4f}"

        if len(val_set):
            val = _evaluate_or_none(side, val_set, features, cfg.batch_size, norm)
            history.append(MetricRow(epoch, "val", val[0], val[1]))
            message += f", val loss {val[0]:.4f}"
            if val[1] is not None:
                message += f", val AUC {val[1]:.4f}"
                if best_auc is None or val[1] > best_auc:
                    best_auc, best_epoch = val[1], epoch
                    best_state = {n: p.data.copy() for n, p in params.items()}
        logger.info(message)

    if best_state is not None:
        for name, value in best_state.items():
            params[name].data[...] = value
        logger.info(f"Restored parameters of epoch {best_epoch} (val AUC {best_auc:.4f})")
    if metrics_path is not None:
        write_metrics(metrics_path, history)
    return TrainResult(history, best_epoch, best_auc, step)


def _evaluate_or_none(side, dataset, features, batch_size, norm) -> Tuple[float, Optional[float]]:
    try:
        result = evaluate(side, dataset, features, batch_size, norm)
        return result.loss, result.auc
    except UndefinedMetricError:
        with no_grad():
            total = 0.0
            for chunk in batches(dataset.items, batch_size):
                out = side.forward(low_batch(dataset, chunk, side.cfg, None, norm), features.batch(dataset, chunk))
                total += cross_entropy(out, [i.label for i in chunk]).item() * len(chunk)
        return total / len(dataset), None


@dataclass
class GridResult:
    points: List[Tuple[Dict[str, float], Optional[float]]]
    best_point: Dict[str, float]
    best_config: TrainConfig


def grid_search(fpt_cfg: FptConfig, base: TrainConfig, grid: Dict[str, Sequence], dataset: Dataset,
                features, norm: Tuple[float, float] = (0.5, 0.5)) -> GridResult:
    """Train one fresh side network per grid point and keep the best by validation AUC.

    Args:
        grid: ``train.<field>`` (or bare field) names to candidate values

    Raises:
        ConfigError: If a key is not a TrainConfig field
    """
    fields = set(TrainConfig.__dataclass_fields__)
    keys = []
    for key in grid:
        name = key.split(".", 1)[1] if key.startswith("train.") else key
        if name not in fields:
            raise ConfigError(f"sweep key {key!r} is not a train setting")
        keys.append(name)

    points = []
    best = None
    for values in itertools.product(*grid.values()):
        point = {k: type(getattr(base, k))(v) for k, v in zip(keys, values)}
        cfg = replace(base, **point)
        side = SideNetwork.initialize(fpt_cfg, seed=cfg.seed)
        result = train(side, dataset, features, cfg, norm=norm)
        logger.info(f"Sweep point {point}: best val AUC {result.best_val_auc}")
        points.append((point, result.best_val_auc))
        score = -1.0 if result.best_val_auc is None else result.best_val_auc
        if best is None or score > best[0]:
            best = (score, point, cfg)
    return GridResult(points, best[1], best[2])
