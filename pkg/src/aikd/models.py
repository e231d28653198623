"""Classifier and critic construction, freezing, snapshots, and checkpoints.

Distillation runs juggle three copies of the same classifier: the trainable
student, a frozen fully-pretrained "superior" copy, and a frozen snapshot of
the student from the previous epoch. The critic is a small fully-connected
network that scores raw logit vectors.
"""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch
from torch import nn

__all__ = [
    "ARCHITECTURES",
    "ClassifierSpec",
    "CriticSpec",
    "ModelTriple",
    "build_classifier",
    "build_critic",
    "snapshot_previous",
    "freeze",
    "save_checkpoint",
    "load_checkpoint",
    "load_superior",
    "parameter_checksum",
]

ARCHITECTURES = (
    "resnet18",
    "resnet50",
    "preact_resnet18",
    "preact_resnet50",
    "densenet121",
    "tiny_cnn",
)

# Input sizes the named architectures are built for; tiny_cnn takes anything >= 8.
_CANONICAL_RESOLUTIONS = {
    "resnet18": (224,),
    "resnet50": (224,),
    "densenet121": (224,),
    "preact_resnet18": (32, 64),
    "preact_resnet50": (32, 64),
}


@dataclass(frozen=True)
class ClassifierSpec:
    architecture: str
    num_classes: int
    input_resolution: int

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.architecture == "tiny_cnn":
            if self.input_resolution < 8:
                raise ValueError("tiny_cnn needs input_resolution >= 8")
        elif self.input_resolution not in _CANONICAL_RESOLUTIONS[self.architecture]:
            raise ValueError(
                f"{self.architecture} expects resolution in "
                f"{_CANONICAL_RESOLUTIONS[self.architecture]}, got {self.input_resolution}"
            )


@dataclass(frozen=True)
class CriticSpec:
    input_dim: int
    hidden1: int = 64
    hidden2: int = 32
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.input_dim < 2:
            raise ValueError("input_dim must be at least 2")
        if self.leaky_slope <= 0.0:
            raise ValueError("leaky_slope must be positive")

    def parameter_count(self) -> int:
        """Exact trainable-parameter count of the critic this spec builds."""
        return (
            self.input_dim * self.hidden1
            + self.hidden1
            + 2 * self.hidden1  # batch-norm scale and shift
            + self.hidden1 * self.hidden2
            + self.hidden2
            + self.hidden2
            + 1
        )


@dataclass
class ModelTriple:
    """Student plus its two frozen teachers. ``superior`` is absent in presets
    that train without a pretrained model."""

    student: nn.Module
    superior: Optional[nn.Module]
    previous: nn.Module
    spec: Optional[ClassifierSpec] = field(repr=False, default=None)


class TinyCNN(nn.Module):
    """Three conv blocks and a linear head; small enough for CPU smoke runs."""

    def __init__(self, num_classes: int):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1),
            nn.BatchNorm2d(16),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1),
            nn.BatchNorm2d(32),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1),
            nn.BatchNorm2d(64),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
        )
        self.head = nn.Linear(64, num_classes)

    def forward(self, x):
        return self.head(self.features(x).flatten(1))


class PreActBlock(nn.Module):
    """Pre-activation residual block (BN-ReLU-conv ordering)."""

    def __init__(self, in_planes: int, planes: int, stride: int = 1):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_planes)
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=1, padding=1, bias=False)
        self.shortcut = None
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Conv2d(in_planes, planes, 1, stride=stride, bias=False)

    def forward(self, x):
        out = torch.relu(self.bn1(x))
        shortcut = self.shortcut(out) if self.shortcut is not None else x
        out = self.conv1(out)
        out = self.conv2(torch.relu(self.bn2(out)))
        return out + shortcut


class PreActBottleneck(nn.Module):
    """Pre-activation bottleneck block, expansion 4."""

    expansion = 4

    def __init__(self, in_planes: int, planes: int, stride: int = 1):
        super().__init__()
        out_planes = planes * self.expansion
        self.bn1 = nn.BatchNorm2d(in_planes)
        self.conv1 = nn.Conv2d(in_planes, planes, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn3 = nn.BatchNorm2d(planes)
        self.conv3 = nn.Conv2d(planes, out_planes, 1, bias=False)
        self.shortcut = None
        if stride != 1 or in_planes != out_planes:
            self.shortcut = nn.Conv2d(in_planes, out_planes, 1, stride=stride, bias=False)

    def forward(self, x):
        out = torch.relu(self.bn1(x))
        shortcut = self.shortcut(out) if self.shortcut is not None else x
        out = self.conv1(out)
        out = self.conv2(torch.relu(self.bn2(out)))
        out = self.conv3(torch.relu(self.bn3(out)))
        return out + shortcut


class PreActResNet(nn.Module):
    """CIFAR-style pre-activation ResNet (3x3 stem, no max-pool)."""

    def __init__(self, block, layers, num_classes: int):
        super().__init__()
        self.in_planes = 64
        self.conv1 = nn.Conv2d(3, 64, 3, stride=1, padding=1, bias=False)
        self.layer1 = self._make_layer(block, 64, layers[0], stride=1)
        self.layer2 = self._make_layer(block, 128, layers[1], stride=2)
        self.layer3 = self._make_layer(block, 256, layers[2], stride=2)
        self.layer4 = self._make_layer(block, 512, layers[3], stride=2)
        width = 512 * getattr(block, "expansion", 1)
        self.bn_final = nn.BatchNorm2d(width)
        self.head = nn.Linear(width, num_classes)

    def _make_layer(self, block, planes, count, stride):
        strides = [stride] + [1] * (count - 1)
        layers = []
        for s in strides:
            layers.append(block(self.in_planes, planes, s))
            self.in_planes = planes * getattr(block, "expansion", 1)
        return nn.Sequential(*layers)

    def forward(self, x):
        out = self.conv1(x)
        out = self.layer4(self.layer3(self.layer2(self.layer1(out))))
        out = torch.relu(self.bn_final(out))
        out = nn.functional.adaptive_avg_pool2d(out, 1).flatten(1)
        return self.head(out)


def build_classifier(spec: ClassifierSpec, seed: int) -> nn.Module:
    """Construct a classifier with seed-deterministic initial parameters."""
    torch.manual_seed(seed)
    if spec.architecture == "tiny_cnn":
        return TinyCNN(spec.num_classes)
    if spec.architecture == "preact_resnet18":
        return PreActResNet(PreActBlock, [2, 2, 2, 2], spec.num_classes)
    if spec.architecture == "preact_resnet50":
        return PreActResNet(PreActBottleneck, [3, 4, 6, 3], spec.num_classes)
    # Standard ImageNet-shape architectures come from torchvision, always
    # randomly initialized (weights=None): the superior model is trained from
    # scratch on the target dataset, never from external pretraining.
    import torchvision.models

    factory = getattr(torchvision.models, spec.architecture)
    return factory(weights=None, num_classes=spec.num_classes)


class LogitCritic(nn.Module):
    """Scores logit vectors: FC -> BatchNorm1d -> LeakyReLU -> FC -> scalar projection.

    The normalization layer runs on fixed statistics estimated from the first
    batch it sees (``warm_up_stats``), never on per-batch statistics: that
    keeps per-example input gradients well defined for the gradient penalty
    and keeps the critic's objective stationary between parameter updates.
    """

    def __init__(self, spec: CriticSpec):
        super().__init__()
        self.spec = spec
        self.fc1 = nn.Linear(spec.input_dim, spec.hidden1)
        self.bn = nn.BatchNorm1d(spec.hidden1)
        self.act = nn.LeakyReLU(spec.leaky_slope)
        self.fc2 = nn.Linear(spec.hidden1, spec.hidden2)
        self.proj = nn.Linear(spec.hidden2, 1)
        self.register_buffer("stats_ready", torch.tensor(False))

    def warm_up_stats(self, logits: torch.Tensor) -> None:
        """Set the normalization statistics from one reference batch, then freeze."""
        saved = self.bn.momentum
        self.bn.momentum = 1.0
        self.bn.train()
        with torch.no_grad():
            self.bn(self.fc1(logits))
        self.bn.momentum = saved
        self.stats_ready.fill_(True)
        self.eval()

    def forward(self, logits: torch.Tensor) -> torch.Tensor:
        if logits.ndim != 2 or logits.shape[1] != self.spec.input_dim:
            raise ValueError(
                f"critic expects (batch, {self.spec.input_dim}) logits, got {tuple(logits.shape)}"
            )
        out = self.act(self.bn(self.fc1(logits)))
        return self.proj(self.fc2(out)).squeeze(1)


def build_critic(spec: CriticSpec, seed: int) -> LogitCritic:
    torch.manual_seed(seed)
    return LogitCritic(spec)


def freeze(model: nn.Module) -> nn.Module:
    """Mark every parameter non-trainable and pin normalization to inference stats."""
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return model


def snapshot_previous(triple: ModelTriple) -> ModelTriple:
    """Replace ``previous`` with a frozen deep copy of the student's current state.

    Call exactly once per epoch boundary, after the epoch's last optimizer
    step; the student itself is untouched.
    """
    snapshot = copy.deepcopy(triple.student)
    freeze(snapshot)
    triple.previous = snapshot
    return triple


def parameter_checksum(model: nn.Module) -> str:
    """Order-stable SHA-256 over all parameters and buffers."""
    digest = hashlib.sha256()
    state = model.state_dict()
    for key in sorted(state):
        tensor = state[key].detach().cpu().contiguous()
        digest.update(key.encode())
        digest.update(str(tensor.dtype).encode())
        digest.update(str(tuple(tensor.shape)).encode())
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(
    path: Path,
    model: nn.Module,
    spec: ClassifierSpec,
    config_digest: str,
    epoch: int,
    val_accuracy: float,
    extra: Optional[dict] = None,
) -> None:
    """Write a single-archive checkpoint that round-trips bit-exactly.

    ``extra`` holds resume-only state (optimizers, snapshots); readers of the
    model checkpoint ignore it.
    """
    payload = {
        "state_dict": model.state_dict(),
        "spec": {
            "architecture": spec.architecture,
            "num_classes": spec.num_classes,
            "input_resolution": spec.input_resolution,
        },
        "config_digest": config_digest,
        "epoch": epoch,
        "val_accuracy": val_accuracy,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # corrupt or foreign file
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc
    for key in ("state_dict", "spec", "config_digest", "epoch", "val_accuracy"):
        if key not in payload:
            raise ValueError(f"checkpoint {path} missing field {key!r}")
    return payload


def load_superior(checkpoint_path: Path, spec: ClassifierSpec) -> nn.Module:
    """Load a phase-1 checkpoint as the frozen teacher; rejects spec mismatches."""
    payload = load_checkpoint(checkpoint_path)
    ckpt_spec = ClassifierSpec(**payload["spec"])
    if ckpt_spec != spec:
        raise ValueError(f"checkpoint spec {ckpt_spec} does not match requested {spec}")
    model = build_classifier(spec, seed=0)
    model.load_state_dict(payload["state_dict"])
    return freeze(model)
