"""Regression models: ImageNet backbones with replaced heads, the fingerprint DNN and the RF."""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torchvision
from sklearn.ensemble import RandomForestRegressor
from torch import nn

from .fingerprints import ALLOWED_NBITS

ASSET_DIR_ENV = "IMGQSAR_ASSET_DIR"
OFFLINE_ENV = "IMGQSAR_OFFLINE"

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

EXTENDED_WIDTHS = (4096, 1000, 200, 100)
HEAD_INIT = "torch-default-linear: U(-1/sqrt(fan_in), 1/sqrt(fan_in))"


@dataclass(frozen=True)
class _Arch:
    builder: str
    weights: str
    head_attr: str
    feature_dim: int


ARCHITECTURES = {
    "AlexNet": _Arch("alexnet", "AlexNet_Weights", "classifier", 9216),
    "DenseNet-201": _Arch("densenet201", "DenseNet201_Weights", "classifier", 1920),
    "ResNet-152": _Arch("resnet152", "ResNet152_Weights", "fc", 2048),
    "VGG-19-bn": _Arch("vgg19_bn", "VGG19_BN_Weights", "classifier", 25088),
}


class BuildError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    architecture: str
    pretrained: bool = True

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}; choose from {list(ARCHITECTURES)}")

    @property
    def weights_url(self) -> str:
        arch = ARCHITECTURES[self.architecture]
        return getattr(torchvision.models, arch.weights).IMAGENET1K_V1.url


@dataclass(frozen=True)
class HeadSpec:
    kind: str = "extended"
    n_tasks: int = 1
    dropout: float = 0.5

    def __post_init__(self):
        if self.kind not in ("vanilla", "extended"):
            raise ValueError(f"head kind must be 'vanilla' or 'extended', got {self.kind!r}")
        if self.n_tasks < 1:
            raise ValueError("n_tasks must be positive")

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return EXTENDED_WIDTHS if self.kind == "extended" else ()


@dataclass(frozen=True)
class DnnSpec:
    input_dim: int = 2048
    hidden_sizes: tuple[int, ...] = (60, 20, 10)
    dropout: float = 0.10

    def __post_init__(self):
        if self.input_dim not in ALLOWED_NBITS:
            raise BuildError(f"input_dim must be a fingerprint length {ALLOWED_NBITS}, got {self.input_dim}")
        if len(self.hidden_sizes) != 3:
            raise BuildError("the fingerprint DNN has exactly three hidden layers")


@dataclass(frozen=True)
class RfSpec:
    n_trees: int = 100

    def __post_init__(self):
        if self.n_trees != 100:
            raise ValueError("the RF baseline uses 100 trees")


# -- pretrained weight assets -----------------------------------------------------

class AssetStore:
    """Local store of pretrained weight files, verified against the sha256 prefix in their names."""

    def __init__(self, root: str | Path | None = None, offline: bool | None = None):
        self.root = Path(root or os.environ.get(ASSET_DIR_ENV, Path.home() / ".cache" / "imgqsar" / "assets"))
        if offline is None:
            offline = os.environ.get(OFFLINE_ENV, "0") not in ("", "0", "false")
        self.offline = offline

    def path(self, spec: BackboneSpec) -> Path:
        return self.root / spec.weights_url.rsplit("/", 1)[-1]

    @staticmethod
    def expected_prefix(path: Path) -> str:
        m = re.search(r"-([0-9a-f]{8,})\.pth$", path.name)
        if not m:
            raise BuildError(f"cannot derive checksum from asset name {path.name}")
        return m.group(1)

    def verify(self, path: Path) -> None:
        h = hashlib.sha256()
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
        digest, prefix = h.hexdigest(), self.expected_prefix(path)
        if not digest.startswith(prefix):
            raise BuildError(f"checksum mismatch for {path}: sha256 {digest[:16]}..., expected prefix {prefix}")

    def fetch(self, spec: BackboneSpec) -> Path:
        path = self.path(spec)
        if not path.exists():
            if self.offline:
                raise BuildError(f"weights asset {path.name} missing from {self.root} (offline mode)")
            self.root.mkdir(parents=True, exist_ok=True)
            try:
                torch.hub.download_url_to_file(spec.weights_url, str(path), progress=False)
            except Exception as exc:
                raise BuildError(f"could not download {spec.weights_url}: {exc}") from exc
        self.verify(path)
        return path


# -- image regressor --------------------------------------------------------------

def make_head(in_features: int, spec: HeadSpec) -> nn.Sequential:
    if spec.kind == "vanilla":
        return nn.Sequential(nn.Linear(in_features, spec.n_tasks))
    layers: list[nn.Module] = []
    width = in_features
    for h in spec.hidden_sizes:
        layers += [nn.Dropout(spec.dropout), nn.Linear(width, h), nn.ReLU(inplace=True)]
        width = h
    layers += [nn.Dropout(spec.dropout), nn.Linear(width, spec.n_tasks)]
    return nn.Sequential(*layers)


class ImageRegressor(nn.Module):
    """Pretrained convolutional trunk whose classifier block is replaced by a regression head.

    Expects float images in [0, 1], shape (B, 3, 224, 224); ImageNet
    normalization happens inside ``forward``.
    """

    def __init__(self, trunk: nn.Module, head: nn.Sequential, backbone: BackboneSpec, head_spec: HeadSpec):
        super().__init__()
        self.trunk = trunk
        self.head = head
        self.backbone_spec = backbone
        self.head_spec = head_spec
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return torch.flatten(self.trunk((x - self.mean) / self.std), 1)

    def forward(self, x):
        return self.head(self.features(x))

    def head_widths(self) -> list[int]:
        return [m.out_features for m in self.head if isinstance(m, nn.Linear)]

    def metadata(self) -> dict:
        return {"backbone": asdict(self.backbone_spec), "head": asdict(self.head_spec),
                "head_widths": self.head_widths(), "head_init": HEAD_INIT}


def build_image_regressor(backbone: BackboneSpec, head: HeadSpec, store: AssetStore | None = None) -> ImageRegressor:
    arch = ARCHITECTURES[backbone.architecture]
    trunk = getattr(torchvision.models, arch.builder)(weights=None)
    if backbone.pretrained:
        path = (store or AssetStore()).fetch(backbone)
        try:
            trunk.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
        except Exception as exc:
            raise BuildError(f"could not load weights {path}: {exc}") from exc
    old = getattr(trunk, arch.head_attr)
    in_features = old.in_features if isinstance(old, nn.Linear) else next(
        m.in_features for m in old.modules() if isinstance(m, nn.Linear))
    if in_features != arch.feature_dim:
        raise BuildError(f"{backbone.architecture}: classifier input {in_features} != {arch.feature_dim}")
    setattr(trunk, arch.head_attr, nn.Identity())
    model = ImageRegressor(trunk, make_head(in_features, head), backbone, head)
    for p in model.parameters():
        p.requires_grad_(True)
    return model


# -- fingerprint DNN and random forest ------------------------------------------------

class FingerprintDNN(nn.Sequential):
    def __init__(self, spec: DnnSpec):
        layers: list[nn.Module] = []
        width = spec.input_dim
        for h in spec.hidden_sizes:
            layers += [nn.Linear(width, h), nn.ReLU(), nn.Dropout(spec.dropout)]
            width = h
        layers.append(nn.Linear(width, 1))
        super().__init__(*layers)
        self.spec = spec

    def metadata(self) -> dict:
        return {"dnn": asdict(self.spec)}


def build_fp_dnn(spec: DnnSpec, fp_matrix=None) -> FingerprintDNN:
    if fp_matrix is not None and fp_matrix.nbits != spec.input_dim:
        raise BuildError(f"DNN input_dim {spec.input_dim} does not match fingerprint length {fp_matrix.nbits}")
    return FingerprintDNN(spec)


def build_rf(spec: RfSpec = RfSpec(), seed: int | None = 0, n_jobs: int | None = None) -> RandomForestRegressor:
    return RandomForestRegressor(n_estimators=spec.n_trees, random_state=seed, n_jobs=n_jobs)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_model(model: nn.Module, run_dir: str | Path, extra: dict | None = None) -> None:
    """One directory per run: ``weights.pt`` plus ``model.json``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), run_dir / "weights.pt")
    meta = model.metadata() if hasattr(model, "metadata") else {}
    meta.update(extra or {})
    (run_dir / "model.json").write_text(json.dumps(meta, indent=1, sort_keys=True, default=str))
