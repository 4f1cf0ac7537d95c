"""Mini-batch training loop with per-epoch history, model selection and resume.

Shuffling and dropout are re-seeded from ``(seed, epoch)`` at the start of
every epoch, so a run split across :func:`train` and :func:`resume` replays
the same step sequence as an uninterrupted run.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn

from .dataset import DatasetIndex, SplitIndex, load_image
from .errors import ConfigError, DatasetError, DivergenceError, TopologyError
from .models import (FreezePolicy, ModelSpec, describe, load_tensor_archive, model_from_spec,
                     save_tensor_archive)

logger = logging.getLogger(__name__)

DEFAULT_LR = {"baseline": 1e-3, "transfer": 1e-4}
HISTORY_HEADER = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float | None = None  # None -> per-kind default
    seed: int = 0
    model_kind: str = "baseline"
    freeze_policy: FreezePolicy = field(default_factory=FreezePolicy)
    early_stop_patience: int | None = None
    input_side: int = 224
    workers: int = 0

    def __post_init__(self):
        if self.model_kind not in DEFAULT_LR:
            raise ConfigError(f"unknown model kind {self.model_kind!r}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate is not None and not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1 or None")

    @property
    def lr(self) -> float:
        return self.learning_rate if self.learning_rate is not None else DEFAULT_LR[self.model_kind]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if isinstance(d.get("freeze_policy"), dict):
            d["freeze_policy"] = FreezePolicy(**d["freeze_policy"])
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float  # nan when the validation partition is empty
    val_acc: float


@dataclass
class TrainingHistory:
    records: list[EpochRecord] = field(default_factory=list)
    # epoch counts at which a resumed segment started
    boundaries: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(HISTORY_HEADER)
        for r in self.records:
            writer.writerow([r.epoch, *(repr(float(getattr(r, k))) for k in HISTORY_HEADER[1:])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, boundaries: Sequence[int] = ()) -> TrainingHistory:
        reader = csv.DictReader(io.StringIO(text))
        records = [EpochRecord(int(row["epoch"]), *(float(row[k]) for k in HISTORY_HEADER[1:]))
                   for row in reader]
        return cls(records, list(boundaries))


@dataclass
class Checkpoint:
    spec: ModelSpec
    state: dict[str, torch.Tensor]
    epoch: int
    config_hash: str
    metric: float | None
    optimizer_state: dict | None = None

    def model(self) -> nn.Module:
        model = model_from_spec(self.spec)
        model.load_state_dict(self.state)
        return model


class TrainResult(NamedTuple):
    checkpoint: Checkpoint  # best validation accuracy (earliest on ties); latest if no val data
    history: TrainingHistory
    final: Checkpoint  # state after the last completed epoch, resumable


class ImageCache:
    """Loads and memoizes preprocessed images for a dataset index.

    Pixels are held as uint8 and rescaled per batch; the result is
    bit-identical to calling :func:`load_image` directly.
    """

    def __init__(self, data: DatasetIndex, side: int, workers: int = 0):
        self.data = data
        self.side = side
        self.workers = workers
        self._cache: dict[int, np.ndarray] = {}

    def _load(self, i: int) -> np.ndarray:
        pixels = load_image(self.data.entries[i][0], self.side)
        return np.rint(pixels * np.float32(255.0)).astype(np.uint8)

    def preload(self, indices: Sequence[int]):
        missing = [i for i in indices if i not in self._cache]
        if not missing:
            return
        if self.workers > 1:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(self.workers) as pool:
                for i, arr in zip(missing, pool.map(self._load, missing)):
                    self._cache[i] = arr
        else:
            for i in missing:
                self._cache[i] = self._load(i)

    def batch(self, indices: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor]:
        self.preload(indices)
        arr = np.stack([self._cache[i] for i in indices]).astype(np.float32) / np.float32(255.0)
        x = torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()
        y = torch.tensor([self.data.entries[i][1] for i in indices], dtype=torch.long)
        return x, y


def _epoch_seed(seed: int, epoch: int) -> int:
    return (seed * 1_000_003 + epoch) % (2 ** 63)


def _snapshot(model, spec, optimizer, epoch, cfg, metric) -> Checkpoint:
    return Checkpoint(
        spec=spec,
        state={k: v.detach().clone() for k, v in model.state_dict().items()},
        epoch=epoch,
        config_hash=cfg.hash(),
        metric=metric,
        optimizer_state=copy.deepcopy(optimizer.state_dict()) if optimizer is not None else None,
    )


def make_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=cfg.lr)


def evaluate_partition(model, images: ImageCache, indices: Sequence[int],
                       batch_size: int = 32) -> tuple[float, float, np.ndarray]:
    """Mean loss, accuracy and softmax probabilities over ``indices`` in eval mode."""
    if len(indices) == 0:
        return math.nan, math.nan, np.zeros((0, model.num_classes))
    was_training = model.training
    model.eval()
    loss_sum = 0.0
    correct = 0
    probs = []
    try:
        with torch.no_grad():
            for start in range(0, len(indices), batch_size):
                x, y = images.batch(indices[start:start + batch_size])
                logits = model(x)
                loss_sum += nn.functional.cross_entropy(logits, y, reduction="sum").item()
                correct += int((logits.argmax(dim=1) == y).sum())
                probs.append(torch.softmax(logits, dim=1).numpy())
    finally:
        model.train(was_training)
    return loss_sum / len(indices), correct / len(indices), np.concatenate(probs)


def _check_inputs(model, split: SplitIndex, data: DatasetIndex, cfg: TrainConfig):
    if model.num_classes != data.num_classes:
        raise ConfigError(
            f"model outputs {model.num_classes} classes but the dataset has {data.num_classes}")
    if model.kind != cfg.model_kind:
        raise ConfigError(f"model kind {model.kind!r} does not match config {cfg.model_kind!r}")
    if model.input_side != cfg.input_side:
        raise ConfigError(
            f"model expects {model.input_side}px inputs but config says {cfg.input_side}px")
    n = len(data)
    for name in ("train", "val", "test"):
        if any(not 0 <= i < n for i in split.partition(name)):
            raise DatasetError(f"{name} partition references entries outside the index")
    if not split.train:
        raise DatasetError("train partition is empty")


def _run_epochs(model, spec, optimizer, split, data, cfg, images, history, best, start_epoch):
    train_idx = np.asarray(split.train, dtype=np.int64)
    val_idx = list(split.val)
    images.preload(list(split.train) + val_idx)
    loss_fn = nn.CrossEntropyLoss()

    epoch = start_epoch
    final_metric = best.metric
    for epoch in range(start_epoch + 1, start_epoch + cfg.epochs + 1):
        torch.manual_seed(_epoch_seed(cfg.seed, epoch))
        order = np.random.default_rng([cfg.seed, epoch]).permutation(train_idx).tolist()

        model.train()
        loss_sum = 0.0
        correct = 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            x, y = images.batch(order[start:start + cfg.batch_size])
            logits = model(x)
            loss = loss_fn(logits, y)
            if not torch.isfinite(loss):
                raise DivergenceError(epoch, b, loss.item())
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            loss_sum += loss.item() * len(y)
            correct += int((logits.detach().argmax(dim=1) == y).sum())

        train_loss = loss_sum / len(order)
        train_acc = correct / len(order)
        val_loss, val_acc, _ = evaluate_partition(model, images, val_idx, cfg.batch_size)
        history.records.append(EpochRecord(epoch, train_loss, train_acc, val_loss, val_acc))
        logger.info("epoch %d: loss %.4f acc %.4f val_loss %.4f val_acc %.4f",
                    epoch, train_loss, train_acc, val_loss, val_acc)

        if val_idx:
            final_metric = val_acc
            if best.metric is None or final_metric > best.metric:
                best = _snapshot(model, spec, None, epoch, cfg, final_metric)
        else:
            # no validation data: no selection, the latest weights are reported
            final_metric = None
            best = _snapshot(model, spec, None, epoch, cfg, None)

        if (val_idx and cfg.early_stop_patience is not None
                and epoch - best.epoch >= cfg.early_stop_patience):
            logger.info("early stop at epoch %d (best %d)", epoch, best.epoch)
            break

    final = _snapshot(model, spec, optimizer, epoch, cfg, final_metric)
    return TrainResult(best, history, final)


def train(model: nn.Module, split: SplitIndex, data: DatasetIndex, cfg: TrainConfig,
          images: ImageCache | None = None) -> TrainResult:
    """Train ``model`` in place for ``cfg.epochs`` epochs over ``split.train``.

    Raises :class:`DivergenceError` on a non-finite batch loss.
    """
    _check_inputs(model, split, data, cfg)
    images = images or ImageCache(data, cfg.input_side, cfg.workers)
    spec = describe(model)
    optimizer = make_optimizer(model, cfg)
    initial = _snapshot(model, spec, None, 0, cfg, None)
    result = _run_epochs(model, spec, optimizer, split, data, cfg, images,
                         TrainingHistory(), initial, 0)
    if cfg.epochs == 0:
        # nothing trained: the selected checkpoint is the initial one
        return TrainResult(initial, result.history, result.final)
    return result


def resume(previous: TrainResult, split: SplitIndex, data: DatasetIndex, cfg: TrainConfig,
           images: ImageCache | None = None) -> TrainResult:
    """Continue ``previous.final`` for another ``cfg.epochs`` epochs.

    Batch size and learning rate may change; the model topology may not.
    """
    last = previous.final
    spec = last.spec
    if spec.kind != cfg.model_kind or spec.input_side != cfg.input_side:
        raise TopologyError(
            f"checkpoint is a {spec.kind} model at {spec.input_side}px; "
            f"config asks for {cfg.model_kind} at {cfg.input_side}px")
    if spec.kind == "transfer" and spec.freeze_policy != cfg.freeze_policy:
        raise TopologyError(
            f"checkpoint freeze policy {spec.freeze_policy} differs from {cfg.freeze_policy}")

    model = model_from_spec(spec)
    model.load_state_dict(last.state)
    _check_inputs(model, split, data, cfg)
    optimizer = make_optimizer(model, cfg)
    if last.optimizer_state is not None:
        optimizer.load_state_dict(copy.deepcopy(last.optimizer_state))
    for group in optimizer.param_groups:
        group["lr"] = cfg.lr

    history = TrainingHistory(list(previous.history.records), list(previous.history.boundaries))
    if cfg.epochs == 0:
        return previous
    history.boundaries.append(last.epoch)
    images = images or ImageCache(data, cfg.input_side, cfg.workers)
    return _run_epochs(model, spec, optimizer, split, data, cfg, images,
                       history, previous.checkpoint, last.epoch)


# --- run directory I/O ----------------------------------------------------

def _optimizer_to_disk(state: dict, directory: Path) -> dict:
    tensors = {}
    plain = {}
    for idx, entry in state["state"].items():
        for key, value in entry.items():
            if torch.is_tensor(value):
                tensors[f"{idx}.{key}"] = value
            else:
                plain[f"{idx}.{key}"] = value
    manifest = save_tensor_archive(tensors, directory / "optimizer.bin")
    return {"tensors": manifest, "values": plain, "param_groups": state["param_groups"]}


def _optimizer_from_disk(doc: dict, directory: Path) -> dict:
    state: dict[int, dict] = {}
    tensors = load_tensor_archive(directory / "optimizer.bin", doc["tensors"])
    for name, value in [*tensors.items(), *doc["values"].items()]:
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = value
    groups = []
    for g in doc["param_groups"]:
        g = dict(g)
        if isinstance(g.get("betas"), list):
            g["betas"] = tuple(g["betas"])
        groups.append(g)
    return {"state": state, "param_groups": groups}


def save_checkpoint(ckpt: Checkpoint, directory: str | Path) -> Path:
    """Write ``model.json`` + ``weights.bin`` (and ``optimizer.bin`` if present)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = {
        "spec": ckpt.spec.to_dict(),
        "tensors": save_tensor_archive(ckpt.state, directory / "weights.bin"),
        "epoch": ckpt.epoch,
        "config_hash": ckpt.config_hash,
        "metric": ckpt.metric,
    }
    if ckpt.optimizer_state is not None:
        doc["optimizer"] = _optimizer_to_disk(ckpt.optimizer_state, directory)
    (directory / "model.json").write_text(json.dumps(doc, indent=2) + "\n")
    return directory


def load_checkpoint(directory: str | Path) -> Checkpoint:
    directory = Path(directory)
    doc = json.loads((directory / "model.json").read_text())
    opt = doc.get("optimizer")
    return Checkpoint(
        spec=ModelSpec.from_dict(doc["spec"]),
        state=load_tensor_archive(directory / "weights.bin", doc["tensors"]),
        epoch=int(doc["epoch"]),
        config_hash=doc["config_hash"],
        metric=doc["metric"],
        optimizer_state=_optimizer_from_disk(opt, directory) if opt else None,
    )


def save_run(result: TrainResult, run_dir: str | Path, cfg: TrainConfig,
             extra: dict | None = None) -> Path:
    """Persist a run: best checkpoint at the top level, resumable state under ``last/``."""
    run_dir = Path(run_dir)
    save_checkpoint(result.checkpoint, run_dir)
    save_checkpoint(result.final, run_dir / "last")
    (run_dir / "history.csv").write_text(result.history.to_csv())
    meta = {
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "best_epoch": result.checkpoint.epoch,
        "completed_epochs": result.final.epoch,
        "boundaries": result.history.boundaries,
        **(extra or {}),
    }
    (run_dir / "run.json").write_text(json.dumps(meta, indent=2) + "\n")
    return run_dir


def load_run(run_dir: str | Path) -> tuple[TrainResult, TrainConfig, dict]:
    run_dir = Path(run_dir)
    meta = json.loads((run_dir / "run.json").read_text())
    history = TrainingHistory.from_csv((run_dir / "history.csv").read_text(), meta["boundaries"])
    result = TrainResult(load_checkpoint(run_dir), history, load_checkpoint(run_dir / "last"))
    return result, TrainConfig.from_dict(meta["config"]), meta


def with_epochs(cfg: TrainConfig, epochs: int, **changes) -> TrainConfig:
    return replace(cfg, epochs=epochs, **changes)
