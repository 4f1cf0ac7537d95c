"""Baseline CNN and EfficientNet-B0 transfer model, plus their on-disk format."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn as nn
import torchvision

from .errors import ConfigError, ShapeError

BASELINE_CHANNELS = (32, 64, 128)
BASELINE_HIDDEN = 256
MIN_FINAL_SIDE = 4  # spatial side left after the last pooling stage

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

BACKBONES = {
    # backbone_id -> (torchvision constructor, feature width)
    "efficientnet_b0": (torchvision.models.efficientnet_b0, 1280),
}

FINE_TUNE = "fine_tune"
FEATURE_EXTRACT = "feature_extract"


@dataclass(frozen=True)
class FreezePolicy:
    mode: str = FINE_TUNE
    trainable_tail: int = 1

    def __post_init__(self):
        if self.mode not in (FINE_TUNE, FEATURE_EXTRACT):
            raise ConfigError(f"unknown freeze mode {self.mode!r}")
        if self.trainable_tail < 0:
            raise ConfigError("trainable_tail must be non-negative")
        if self.mode == FEATURE_EXTRACT and self.trainable_tail != 0:
            object.__setattr__(self, "trainable_tail", 0)

    @classmethod
    def feature_extract(cls) -> FreezePolicy:
        return cls(FEATURE_EXTRACT, 0)

    @classmethod
    def fine_tune(cls, trainable_tail: int = 1) -> FreezePolicy:
        return cls(FINE_TUNE, trainable_tail)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    type: str
    output_shape: tuple[int, ...]
    params: int
    trainable: bool


@dataclass
class ModelSpec:
    """Serializable architecture description.

    ``options`` holds the constructor arguments needed to rebuild the
    module (channel widths, hidden width, backbone id).
    """

    kind: str
    input_side: int
    num_classes: int
    layers: list[LayerSpec] = field(default_factory=list)
    backbone_id: str | None = None
    freeze_policy: FreezePolicy | None = None
    options: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [
            {**asdict(layer), "output_shape": list(layer.output_shape)} for layer in self.layers
        ]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        policy = d.get("freeze_policy")
        return cls(
            kind=d["kind"],
            input_side=int(d["input_side"]),
            num_classes=int(d["num_classes"]),
            layers=[LayerSpec(**{**layer, "output_shape": tuple(layer["output_shape"])})
                    for layer in d.get("layers", [])],
            backbone_id=d.get("backbone_id"),
            freeze_policy=FreezePolicy(**policy) if policy else None,
            options=dict(d.get("options", {})),
        )

    def topology(self) -> dict:
        """Fields that must agree for two checkpoints to share weights."""
        return {
            "kind": self.kind,
            "input_side": self.input_side,
            "num_classes": self.num_classes,
            "backbone_id": self.backbone_id,
            "freeze_policy": asdict(self.freeze_policy) if self.freeze_policy else None,
            "options": self.options,
        }


class BaselineCNN(nn.Module):
    """Conv -> BatchNorm -> ReLU -> MaxPool blocks, then two fully connected layers.

    ``forward`` returns logits; :func:`forward` applies the softmax.
    """

    kind = "baseline"

    def __init__(self, input_side=224, num_classes=4, channels=BASELINE_CHANNELS,
                 hidden=BASELINE_HIDDEN):
        super().__init__()
        self.input_side = input_side
        self.num_classes = num_classes
        self.channels = tuple(channels)
        self.hidden = hidden

        blocks = []
        in_ch = 3
        for out_ch in self.channels:
            blocks.append(nn.Sequential(
                nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1),
                nn.BatchNorm2d(out_ch),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ))
            in_ch = out_ch
        self.blocks = nn.Sequential(*blocks)
        final_side = input_side // 2 ** len(self.channels)
        self.flatten = nn.Flatten()
        self.fc = nn.Linear(in_ch * final_side * final_side, hidden)
        self.fc_relu = nn.ReLU(inplace=True)
        self.head = nn.Linear(hidden, num_classes)

    def forward(self, x):
        x = self.blocks(x)
        x = self.fc_relu(self.fc(self.flatten(x)))
        return self.head(x)

    def named_layers(self):
        for i, block in enumerate(self.blocks):
            conv, bn, relu, pool = block
            yield f"block{i}.conv", conv
            yield f"block{i}.bn", bn
            yield f"block{i}.relu", relu
            yield f"block{i}.pool", pool
        yield "flatten", self.flatten
        yield "fc", self.fc
        yield "fc_relu", self.fc_relu
        yield "head", self.head

    def options(self):
        return {"channels": list(self.channels), "hidden": self.hidden}


class Normalize(nn.Module):
    def __init__(self, mean, std):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean).view(1, -1, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(std).view(1, -1, 1, 1), persistent=False)

    def forward(self, x):
        return (x - self.mean) / self.std


class TransferNet(nn.Module):
    """Pretrained backbone features with a fresh classification head.

    Frozen backbone blocks are kept in eval mode even while the model
    trains, so their BatchNorm statistics never move.
    """

    kind = "transfer"

    def __init__(self, backbone_id="efficientnet_b0", num_classes=4, input_side=224,
                 policy: FreezePolicy | None = None, dropout=0.2):
        super().__init__()
        if backbone_id not in BACKBONES:
            raise ConfigError(f"unsupported backbone {backbone_id!r}")
        factory, width = BACKBONES[backbone_id]
        self.backbone_id = backbone_id
        self.input_side = input_side
        self.num_classes = num_classes
        self.policy = policy or FreezePolicy()
        self.dropout = dropout

        self.normalize = Normalize(IMAGENET_MEAN, IMAGENET_STD)
        self.features = factory(weights=None).features
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.flatten = nn.Flatten()
        self.head = nn.Sequential(nn.Dropout(dropout), nn.Linear(width, num_classes))
        self.apply_policy(self.policy)

    @property
    def blocks(self) -> list[nn.Module]:
        return list(self.features)

    def trainable_blocks(self) -> list[bool]:
        n = len(self.features)
        tail = 0 if self.policy.mode == FEATURE_EXTRACT else self.policy.trainable_tail
        if tail > n:
            raise ConfigError(f"trainable_tail={tail} exceeds the backbone's {n} blocks")
        return [i >= n - tail for i in range(n)]

    def apply_policy(self, policy: FreezePolicy):
        self.policy = policy
        for block, trainable in zip(self.features, self.trainable_blocks()):
            for p in block.parameters():
                p.requires_grad_(trainable)
        for p in self.head.parameters():
            p.requires_grad_(True)
        self.train(self.training)

    def train(self, mode=True):
        super().train(mode)
        for block, trainable in zip(self.features, self.trainable_blocks()):
            if not trainable:
                block.eval()
        return self

    def forward(self, x):
        x = self.features(self.normalize(x))
        return self.head(self.flatten(self.pool(x)))

    def named_layers(self):
        yield "normalize", self.normalize
        for i, block in enumerate(self.features):
            yield f"features.{i}", block
        yield "pool", self.pool
        yield "flatten", self.flatten
        yield "head", self.head

    def options(self):
        return {"dropout": self.dropout}


def _init_head(linear: nn.Linear, generator: torch.Generator | None = None):
    bound = 1.0 / math.sqrt(linear.in_features)
    with torch.no_grad():
        linear.weight.uniform_(-bound, bound, generator=generator)
        linear.bias.uniform_(-bound, bound, generator=generator)


def describe(model: nn.Module) -> ModelSpec:
    """Trace output shapes through ``model.named_layers()`` and build its spec."""
    shapes = {}
    hooks = [
        module.register_forward_hook(
            lambda _m, _inp, out, name=name: shapes.__setitem__(name, tuple(out.shape[1:])))
        for name, module in model.named_layers()
    ]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(torch.zeros(1, 3, model.input_side, model.input_side))
    finally:
        for h in hooks:
            h.remove()
        model.train(was_training)

    layers = []
    for name, module in model.named_layers():
        params = list(module.parameters())
        layers.append(LayerSpec(
            name=name,
            type=type(module).__name__,
            output_shape=shapes[name],
            params=sum(p.numel() for p in params),
            trainable=bool(params) and all(p.requires_grad for p in params),
        ))
    layers.append(LayerSpec("softmax", "Softmax", (model.num_classes,), 0, False))

    return ModelSpec(
        kind=model.kind,
        input_side=model.input_side,
        num_classes=model.num_classes,
        layers=layers,
        backbone_id=getattr(model, "backbone_id", None),
        freeze_policy=getattr(model, "policy", None),
        options=model.options(),
    )


def build_baseline_cnn(input_side: int = 224, num_classes: int = 4,
                       channels: Iterable[int] = BASELINE_CHANNELS,
                       hidden: int = BASELINE_HIDDEN, seed: int | None = None) -> BaselineCNN:
    """Construct the from-scratch CNN.

    The input must survive every 2x2 pooling with at least
    ``MIN_FINAL_SIDE`` pixels left, i.e. ``input_side >= 32`` for the
    default three blocks.
    """
    channels = tuple(channels)
    if num_classes < 2:
        raise ConfigError("num_classes must be at least 2")
    if not channels:
        raise ConfigError("at least one convolution block is required")
    final_side = input_side // 2 ** len(channels)
    if final_side < MIN_FINAL_SIDE:
        raise ConfigError(
            f"input side {input_side} collapses to {final_side} px after "
            f"{len(channels)} pooling stages; need at least {MIN_FINAL_SIDE * 2 ** len(channels)}")
    if seed is not None:
        torch.manual_seed(seed)
    return BaselineCNN(input_side, num_classes, channels, hidden)


def build_transfer_model(bundle, num_classes: int = 4, policy: FreezePolicy | None = None,
                         input_side: int = 224, seed: int = 0) -> TransferNet:
    """Load pretrained backbone weights, drop the original classifier, attach a new head.

    ``bundle`` is a :class:`fundusnet.weights.WeightBundle`.
    """
    if num_classes < 2:
        raise ConfigError("num_classes must be at least 2")
    factory, _ = BACKBONES[bundle.backbone_id]
    full = factory(weights=None)
    state = bundle.state_dict()
    try:
        full.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise ConfigError(f"weights are not compatible with {bundle.backbone_id}: {exc}") from exc

    model = TransferNet(bundle.backbone_id, num_classes, input_side, policy)
    model.features.load_state_dict(full.features.state_dict())
    _init_head(model.head[1], torch.Generator().manual_seed(seed))
    return model


def model_from_spec(spec: ModelSpec) -> nn.Module:
    """Rebuild an untrained module with the topology described by ``spec``."""
    if spec.kind == "baseline":
        return BaselineCNN(spec.input_side, spec.num_classes,
                           spec.options.get("channels", BASELINE_CHANNELS),
                           spec.options.get("hidden", BASELINE_HIDDEN))
    if spec.kind == "transfer":
        return TransferNet(spec.backbone_id, spec.num_classes, spec.input_side,
                           spec.freeze_policy, spec.options.get("dropout", 0.2))
    raise ConfigError(f"unknown model kind {spec.kind!r}")


def as_batch(batch, input_side: int) -> torch.Tensor:
    """Convert a batch to ``N x 3 x H x W`` float32.

    NumPy input is taken as ``N x H x W x 3`` (the layout :func:`load_image`
    produces); tensors are taken as already channel-first.
    """
    if isinstance(batch, np.ndarray):
        if batch.ndim == 3:
            batch = batch[None]
        if batch.ndim != 4 or batch.shape[1:] != (input_side, input_side, 3):
            raise ShapeError(
                f"expected batch of shape (N, {input_side}, {input_side}, 3), got {batch.shape}")
        return torch.from_numpy(np.ascontiguousarray(batch, dtype=np.float32)).permute(0, 3, 1, 2)
    batch = torch.as_tensor(batch, dtype=torch.float32)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != (3, input_side, input_side):
        raise ShapeError(
            f"expected batch of shape (N, 3, {input_side}, {input_side}), got {tuple(batch.shape)}")
    return batch


def forward(model: nn.Module, batch) -> np.ndarray:
    """Class probabilities for ``batch`` in inference mode, shape ``N x K``."""
    x = as_batch(batch, model.input_side)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            probs = torch.softmax(model(x), dim=1)
    finally:
        model.train(was_training)
    return probs.numpy()


def trainable_parameters(model: nn.Module) -> dict[str, nn.Parameter]:
    return {name: p for name, p in model.named_parameters() if p.requires_grad}


def count_trainable(model: nn.Module) -> int:
    return sum(p.numel() for p in trainable_parameters(model).values())


# --- flat tensor archive -------------------------------------------------

def save_tensor_archive(tensors: dict[str, torch.Tensor], path: str | Path) -> list[dict]:
    """Concatenate raw tensor bytes into ``path``; return the manifest."""
    manifest = []
    offset = 0
    with open(path, "wb") as fh:
        for name, tensor in tensors.items():
            arr = tensor.detach().cpu().contiguous().numpy()
            data = arr.tobytes()
            manifest.append({
                "name": name,
                "shape": list(arr.shape),
                "dtype": arr.dtype.str,
                "offset": offset,
                "nbytes": len(data),
            })
            fh.write(data)
            offset += len(data)
    return manifest


def load_tensor_archive(path: str | Path, manifest: list[dict]) -> dict[str, torch.Tensor]:
    blob = Path(path).read_bytes()
    tensors = {}
    for item in manifest:
        raw = blob[item["offset"]:item["offset"] + item["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(item["dtype"])).reshape(item["shape"])
        tensors[item["name"]] = torch.from_numpy(arr.copy())
    return tensors


def save_model(model: nn.Module, directory: str | Path, state: dict | None = None,
               extra: dict | None = None) -> Path:
    """Write ``model.json`` and ``weights.bin`` into ``directory``.

    ``state`` defaults to the model's current state dict.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = model.state_dict() if state is None else state
    manifest = save_tensor_archive(state, directory / "weights.bin")
    doc = {"spec": describe(model).to_dict(), "tensors": manifest, **(extra or {})}
    (directory / "model.json").write_text(json.dumps(doc, indent=2) + "\n")
    return directory


def load_model(directory: str | Path) -> tuple[nn.Module, dict]:
    """Rebuild the model saved by :func:`save_model`; returns ``(model, model.json doc)``."""
    directory = Path(directory)
    doc = json.loads((directory / "model.json").read_text())
    model = model_from_spec(ModelSpec.from_dict(doc["spec"]))
    model.load_state_dict(load_tensor_archive(directory / "weights.bin", doc["tensors"]))
    return model, doc
