"""Training regimes: ConvNet fine-tuning, fingerprint DNN, RF, grid search, Y-scrambling, multi-task."""

from __future__ import annotations

import copy
import csv
import itertools
import json
import logging
import math
import time
import warnings
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .data import CuratedCompound, DatasetSplit
from .depict import AugmentPolicy, augment

log = logging.getLogger(__name__)

LEARNING_RATES = (0.1, 0.01, 0.005, 0.001, 0.0001)
DECAYS = (0.1, 0.6)
STEPS = (10, 25)
AUGMENTATIONS = (0, 1)
BATCHES = (4, 16, 32)

# val RMSE must drop by more than this to count as an improvement
IMPROVEMENT_TOL = 1e-6

ASSUMPTIONS = {
    "weight_decay": 0.0,
    "dnn_lr_policy": "constant lr0=0.01",
    "head_init": "torch default Linear init",
    "early_stop_signal": "epoch-end validation RMSE",
}


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, trace: "TrainingTrace | None" = None):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch
        self.trace = trace


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    decay: float = 0.1
    step: int = 10
    batch: int = 16
    augmentation: int = 0
    max_epochs: int = 600
    cycle: int = 200
    patience: int = 250
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.decay not in DECAYS:
            raise ValueError(f"decay must be one of {DECAYS}")
        if self.step not in STEPS:
            raise ValueError(f"step must be one of {STEPS}")
        if self.batch not in BATCHES:
            raise ValueError(f"batch must be one of {BATCHES}")
        if self.augmentation not in AUGMENTATIONS:
            raise ValueError("augmentation must be 0 or 1")
        if self.max_epochs < 1 or self.patience < 1 or self.cycle < 1:
            raise ValueError("max_epochs, patience and cycle must be positive")


@dataclass(frozen=True)
class DnnTrainConfig:
    lr0: float = 0.01
    max_epochs: int = 2000
    patience: int = 200
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_fraction: float = 0.15
    seed: int = 0

    def batch_size(self, n_train: int) -> int:
        return max(1, math.ceil(self.batch_fraction * n_train))


@dataclass(frozen=True)
class HyperparamGrid:
    lr0: tuple = LEARNING_RATES
    decay: tuple = DECAYS
    step: tuple = STEPS
    augmentation: tuple = AUGMENTATIONS
    batch: tuple = BATCHES

    def configs(self, base: TrainConfig | None = None) -> list[TrainConfig]:
        """All combinations, lr0 outermost and batch innermost."""
        base = base or TrainConfig()
        return [replace(base, lr0=lr, decay=d, step=s, augmentation=a, batch=b)
                for lr, d, s, a, b in itertools.product(self.lr0, self.decay, self.step, self.augmentation, self.batch)]

    def __len__(self):
        return len(self.lr0) * len(self.decay) * len(self.step) * len(self.augmentation) * len(self.batch)


@dataclass
class TrainingTrace:
    rows: list[dict] = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = -1
    best_val_rmse: float = math.inf
    wall_seconds: float = 0.0
    diverged_epoch: int | None = None

    @property
    def epochs(self) -> list[int]:
        return [r["epoch"] for r in self.rows]

    def column(self, name: str) -> list[float]:
        return [r[name] for r in self.rows]

    def write(self, run_dir: str | Path, metadata: dict | None = None) -> None:
        """``trace.csv`` (epoch,lr,train_loss,val_rmse) plus ``run.json``."""
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        with open(run_dir / "trace.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "lr", "train_loss", "val_rmse"])
            for r in self.rows:
                w.writerow([r["epoch"], repr(r["lr"]), repr(r["train_loss"]), repr(r["val_rmse"])])
        meta = {"stop_reason": self.stop_reason, "best_epoch": self.best_epoch,
                "best_val_rmse": self.best_val_rmse, "wall_seconds": self.wall_seconds,
                "diverged_epoch": self.diverged_epoch, "assumptions": ASSUMPTIONS}
        meta.update(metadata or {})
        (run_dir / "run.json").write_text(json.dumps(meta, indent=1, sort_keys=True, default=str))

    @classmethod
    def read(cls, run_dir: str | Path) -> "TrainingTrace":
        run_dir = Path(run_dir)
        meta = json.loads((run_dir / "run.json").read_text())
        with open(run_dir / "trace.csv", newline="") as fh:
            rows = [{"epoch": int(r["epoch"]), "lr": float(r["lr"]), "train_loss": float(r["train_loss"]),
                     "val_rmse": float(r["val_rmse"])} for r in csv.DictReader(fh)]
        return cls(rows, meta["stop_reason"], meta["best_epoch"], meta["best_val_rmse"],
                   meta["wall_seconds"], meta.get("diverged_epoch"))


def lr_at_epoch(config, epoch: int) -> float:
    """Step-annealed learning rate that resets to ``lr0`` at the start of every cycle."""
    if not 0 <= epoch < config.max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.max_epochs})")
    return config.lr0 * config.decay ** ((epoch % config.cycle) // config.step)


# -- losses and metrics ------------------------------------------------------------

def rmse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """RMSE over observed entries; NaN targets are treated as missing."""
    if pred.dim() == 1:
        pred = pred.unsqueeze(1)
    if target.dim() == 1:
        target = target.unsqueeze(1)
    mask = ~torch.isnan(target)
    diff = torch.where(mask, pred - torch.nan_to_num(target), torch.zeros_like(pred))
    return torch.sqrt((diff ** 2).sum() / mask.sum())


def per_task_rmse(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred, float).reshape(len(pred), -1)
    target = np.asarray(target, float).reshape(len(target), -1)
    out = np.full(target.shape[1], np.nan)
    for t in range(target.shape[1]):
        m = ~np.isnan(target[:, t])
        if m.any():
            out[t] = math.sqrt(np.mean((pred[m, t] - target[m, t]) ** 2))
    return out


# -- batch feeders ------------------------------------------------------------------

class ImageFeeder:
    """Turns uint8 (N, H, W, 3) images into float batches, augmenting training batches if enabled."""

    def __init__(self, images: np.ndarray, augment_images: bool = False):
        self.images = images
        self.policy = AugmentPolicy(enabled=bool(augment_images))

    def __len__(self):
        return len(self.images)

    def batch(self, idx: np.ndarray, rng: np.random.Generator | None = None) -> torch.Tensor:
        imgs = self.images[idx]
        if rng is not None and self.policy.enabled:
            imgs = np.stack([augment(im, self.policy, rng) for im in imgs])
        return torch.from_numpy(np.ascontiguousarray(imgs)).permute(0, 3, 1, 2).float().div_(255.0)


class ArrayFeeder:
    def __init__(self, x: np.ndarray):
        self.x = torch.as_tensor(np.asarray(x), dtype=torch.float32)

    def __len__(self):
        return len(self.x)

    def batch(self, idx: np.ndarray, rng=None) -> torch.Tensor:
        return self.x[torch.as_tensor(idx)]


def _as_targets(y) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(y, dtype=np.float32))
    return t.unsqueeze(1) if t.dim() == 1 else t


@torch.no_grad()
def predict(model: nn.Module, feeder, batch_size: int = 64) -> np.ndarray:
    model.eval()
    n = len(feeder)
    outs = [model(feeder.batch(np.arange(i, min(i + batch_size, n)))) for i in range(0, n, batch_size)]
    if not outs:
        return np.zeros((0, 1))
    return torch.cat(outs).double().numpy()


def _batches(perm: np.ndarray, batch_size: int) -> list[np.ndarray]:
    chunks = [perm[i:i + batch_size] for i in range(0, len(perm), batch_size)]
    # a lone trailing sample would break batch-norm statistics
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


@contextmanager
def deterministic_kernels(enabled: bool):
    if not enabled:
        yield
        return
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


def fit(model: nn.Module, train_feeder, train_y, val_feeder, val_y, *, lr_fn: Callable[[int], float],
        max_epochs: int, patience: int, batch_size: int, momentum: float = 0.9, weight_decay: float = 0.0,
        seed: int = 0, deterministic: bool = False, on_epoch: Callable[[dict], None] | None = None):
    """Shared SGD/Nesterov loop with RMSE loss, per-epoch validation and early stopping.

    Returns ``(model, trace)`` with the best-validation weights restored.
    """
    torch.manual_seed(seed)
    shuffle_rng = np.random.Generator(np.random.PCG64(seed))
    ytr, yva = _as_targets(train_y), _as_targets(val_y)
    opt = torch.optim.SGD(model.parameters(), lr=lr_fn(0), momentum=momentum, nesterov=True,
                          weight_decay=weight_decay)
    trace = TrainingTrace()
    best_state = None
    t0 = time.perf_counter()
    with deterministic_kernels(deterministic):
        for epoch in range(max_epochs):
            lr = lr_fn(epoch)
            for g in opt.param_groups:
                g["lr"] = lr
            model.train()
            aug_rng = np.random.Generator(np.random.PCG64([seed, epoch]))
            total, weight = 0.0, 0
            for idx in _batches(shuffle_rng.permutation(len(train_feeder)), batch_size):
                target = ytr[torch.as_tensor(idx)]
                n_obs = int((~torch.isnan(target)).sum())
                if n_obs == 0:
                    continue
                opt.zero_grad()
                loss = rmse_loss(model(train_feeder.batch(idx, aug_rng)), target)
                if not torch.isfinite(loss):
                    trace.diverged_epoch = epoch
                    trace.stop_reason = "diverged"
                    trace.wall_seconds = time.perf_counter() - t0
                    raise TrainingDiverged(epoch, trace)
                loss.backward()
                opt.step()
                total += loss.item() * n_obs
                weight += n_obs
            val_pred = predict(model, val_feeder)
            task_rmse = per_task_rmse(val_pred, yva.numpy())
            val_rmse = float(np.nanmean(task_rmse))
            if not math.isfinite(val_rmse):
                trace.diverged_epoch = epoch
                trace.stop_reason = "diverged"
                trace.wall_seconds = time.perf_counter() - t0
                raise TrainingDiverged(epoch, trace)
            row = {"epoch": epoch, "lr": lr, "train_loss": total / max(weight, 1), "val_rmse": val_rmse}
            if len(task_rmse) > 1:
                row["val_rmse_tasks"] = task_rmse.tolist()
            trace.rows.append(row)
            if on_epoch:
                on_epoch(row)
            if val_rmse < trace.best_val_rmse - IMPROVEMENT_TOL:
                trace.best_val_rmse, trace.best_epoch = val_rmse, epoch
                best_state = copy.deepcopy(model.state_dict())
            if epoch - trace.best_epoch >= patience:
                trace.stop_reason = "early_stop"
                break
        else:
            trace.stop_reason = "max_epochs"
    if best_state is not None:
        model.load_state_dict(best_state)
    trace.wall_seconds = time.perf_counter() - t0
    return model, trace


def train_image_model(model: nn.Module, train: tuple, val: tuple, config: TrainConfig,
                      deterministic: bool = False, on_epoch=None):
    """Fine-tune an image regressor. ``train``/``val`` are ``(uint8 images, labels)`` pairs."""
    (xtr, ytr), (xva, yva) = train, val
    return fit(model, ImageFeeder(xtr, config.augmentation), ytr, ImageFeeder(xva), yva,
               lr_fn=lambda e: lr_at_epoch(config, e), max_epochs=config.max_epochs,
               patience=config.patience, batch_size=config.batch, momentum=config.momentum,
               weight_decay=config.weight_decay, seed=config.seed, deterministic=deterministic,
               on_epoch=on_epoch)


def train_dnn(model: nn.Module, train: tuple, val: tuple, config: DnnTrainConfig = DnnTrainConfig(),
              deterministic: bool = False, on_epoch=None):
    (xtr, ytr), (xva, yva) = train, val
    return fit(model, ArrayFeeder(xtr), ytr, ArrayFeeder(xva), yva, lr_fn=lambda e: config.lr0,
               max_epochs=config.max_epochs, patience=config.patience, batch_size=config.batch_size(len(xtr)),
               momentum=config.momentum, weight_decay=config.weight_decay, seed=config.seed,
               deterministic=deterministic, on_epoch=on_epoch)


def train_rf(rf_model, train: tuple):
    """Fit on the training partition only; returns ``(model, wall_seconds)``."""
    x, y = train
    t0 = time.perf_counter()
    rf_model.fit(np.asarray(x), np.asarray(y, dtype=float).ravel())
    return rf_model, time.perf_counter() - t0


def train_multitask(model: nn.Module, train: tuple, val: tuple, config: TrainConfig, **kw):
    """Joint training with one output per task; NaN labels are masked out of loss and validation."""
    n_tasks = np.asarray(train[1]).shape[1]
    head = getattr(model, "head_spec", None)
    if head is not None and head.n_tasks != n_tasks:
        raise ValueError(f"model has {head.n_tasks} outputs but labels have {n_tasks} tasks")
    return train_image_model(model, train, val, config, **kw)


def multitask_labels(datasets: Sequence[Sequence[CuratedCompound]]) -> tuple[list[str], list[str], np.ndarray]:
    """Merge per-task data sets by compound id into (ids, structures, (N, T) labels with NaN gaps)."""
    ids: list[str] = []
    structures: dict[str, str] = {}
    labels: dict[str, list[float]] = {}
    for t, ds in enumerate(datasets):
        for c in ds:
            if c.compound_id not in labels:
                ids.append(c.compound_id)
                structures[c.compound_id] = c.structure
                labels[c.compound_id] = [math.nan] * len(datasets)
            labels[c.compound_id][t] = c.pic50
    keep = [i for i in ids if not all(math.isnan(v) for v in labels[i])]
    if len(keep) < len(ids):
        warnings.warn(f"excluded {len(ids) - len(keep)} compounds without any observed task")
    return keep, [structures[i] for i in keep], np.array([labels[i] for i in keep], dtype=float)


# -- grid search and controls ------------------------------------------------------------

def grid_search(fit_config: Callable[[TrainConfig], TrainingTrace], grid: HyperparamGrid = HyperparamGrid(),
                base: TrainConfig | None = None, configs: Sequence[TrainConfig] | None = None):
    """Train one model per configuration and pick the lowest best-validation RMSE.

    ``fit_config`` maps a config to its trace. Diverged runs score ``inf``;
    ties go to the earliest configuration in enumeration order.
    """
    configs = list(configs) if configs is not None else grid.configs(base)
    results = []
    for cfg in configs:
        try:
            trace = fit_config(cfg)
        except TrainingDiverged as exc:
            log.warning("config %s diverged at epoch %d", cfg, exc.epoch)
            trace = exc.trace or TrainingTrace(stop_reason="diverged", diverged_epoch=exc.epoch)
            trace.best_val_rmse = math.inf
        results.append((cfg, trace))
    scores = [t.best_val_rmse for _, t in results]
    best = int(np.argmin(scores))  # first occurrence on ties
    return results[best][0], results


def y_scramble(curated: Sequence[CuratedCompound], split: DatasetSplit, seed: int) -> list[CuratedCompound]:
    """Permute labels among training and validation compounds; test labels stay put."""
    pool = set(split.train_ids) | set(split.val_ids)
    positions = [i for i, c in enumerate(curated) if c.compound_id in pool]
    labels = np.array([curated[i].pic50 for i in positions])
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(len(positions))
    out = list(curated)
    for pos, lab in zip(positions, labels[perm]):
        c = out[pos]
        out[pos] = CuratedCompound(c.compound_id, c.structure, float(lab), c.target_id)
    return out


def config_dict(config) -> dict:
    return asdict(config)
