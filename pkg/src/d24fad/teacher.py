"""Frozen multi-scale teacher encoder."""
import hashlib
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigError, ShapeError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

WEIGHTS_SOURCES = ("imagenet_pretrained", "random_frozen", "file_path")


@dataclass
class FeaturePyramid:
    """Per-image multi-scale features, shallowest level first.

    ``levels[i]`` has shape ``(C_i, H_i, W_i)``.
    """
    levels: List[torch.Tensor]
    layer_ids: List[str]
    source: str = "teacher"

    def shapes(self):
        return [tuple(t.shape) for t in self.levels]

    def __post_init__(self):
        if not self.levels:
            raise ShapeError("a feature pyramid needs at least one level")
        if len(self.levels) != len(self.layer_ids):
            raise ShapeError(f"{len(self.levels)} levels but {len(self.layer_ids)} layer ids")
        if self.source not in ("teacher", "student"):
            raise ValueError(f"unknown pyramid source {self.source!r}")


@dataclass
class TeacherSpec:
    backbone_name: str = "tiny"
    layer_ids: List[str] = field(default_factory=lambda: ["stage1", "stage2", "stage3"])
    weights_source: str = "random_frozen"
    input_size: int = 32
    seed: int = 0
    weights_path: Optional[str] = None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def reference(cls):
        """WideResNet-50-2 tapped at its first three residual stages, 128 px input."""
        return cls(backbone_name="wide_resnet50_2", layer_ids=["layer1", "layer2", "layer3"],
                   weights_source="imagenet_pretrained", input_size=128)


class TinyBackbone(nn.Module):
    """Four-stage CNN used for tests and the synthetic benchmark.

    Stages 2-4 halve the resolution. With ``stem_stride=1`` a 32 px input
    gives 32, 16, 8 px maps for stage1-3. Stage outputs are taken before the
    activation (pre-activation residual layout), so tapped features are
    roughly zero-mean rather than all non-negative.
    """

    widths = (8, 16, 32, 64)

    def __init__(self, stem_stride=1):
        super().__init__()
        c1, c2, c3, c4 = self.widths
        self.stem = nn.Conv2d(3, c1, 3, stride=stem_stride, padding=1)
        self.stage1 = _preact_stage(c1, c1, 1)
        self.stage2 = _preact_stage(c1, c2, 2)
        self.stage3 = _preact_stage(c2, c3, 2)
        self.stage4 = _preact_stage(c3, c4, 2)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def stages(self):
        return [("stem", self.stem), ("stage1", self.stage1), ("stage2", self.stage2),
                ("stage3", self.stage3), ("stage4", self.stage4)]


def _preact_stage(cin, cout, stride):
    return nn.Sequential(nn.ReLU(), nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
                         nn.ReLU(), nn.Conv2d(cout, cout, 3, padding=1))


class _TorchvisionResNet(nn.Module):
    def __init__(self, arch):
        super().__init__()
        import torchvision.models as tvm
        net = getattr(tvm, arch)(weights=None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2, self.layer3, self.layer4 = net.layer1, net.layer2, net.layer3, net.layer4

    def stages(self):
        return [("stem", self.stem), ("layer1", self.layer1), ("layer2", self.layer2),
                ("layer3", self.layer3), ("layer4", self.layer4)]


BACKBONES = {
    "tiny": TinyBackbone,
    "tiny_s2": lambda: TinyBackbone(stem_stride=2),
    "resnet18": lambda: _TorchvisionResNet("resnet18"),
    "wide_resnet50_2": lambda: _TorchvisionResNet("wide_resnet50_2"),
}


def weights_dir() -> Path:
    env = os.environ.get("D24FAD_WEIGHTS_DIR")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "d24fad" / "weights"


class FrozenTeacher(nn.Module):
    """Runs the backbone up to the deepest tapped stage and returns the tapped maps.

    The module stays in eval mode and never tracks gradients for its weights.
    """

    def __init__(self, spec: TeacherSpec, backbone: nn.Module):
        super().__init__()
        self.spec = spec
        names = [n for n, _ in backbone.stages()]
        missing = [lid for lid in spec.layer_ids if lid not in names or lid == "stem"]
        if missing:
            raise ConfigError(f"backbone {spec.backbone_name!r} has no stage(s) {missing}; "
                              f"choose from {names[1:]}")
        order = [names.index(lid) for lid in spec.layer_ids]
        if order != sorted(order) or len(set(order)) != len(order):
            raise ConfigError(f"layer_ids must be distinct and ordered shallow to deep: {spec.layer_ids}")
        last = max(order)
        self.stage_names = names[: last + 1]
        self.body = nn.ModuleDict({n: m for n, m in backbone.stages()[: last + 1]})
        for p in self.parameters():
            p.requires_grad_(False)
        super().train(False)

    def train(self, mode=True):
        # frozen: always eval
        return super().train(False)

    @torch.no_grad()
    def forward(self, x):
        s = self.spec.input_size
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[-2:] != (s, s):
            raise ShapeError(f"teacher expects B x 3 x {s} x {s} input, got {tuple(x.shape)}")
        out = []
        for name in self.stage_names:
            x = self.body[name](x)
            if name in self.spec.layer_ids:
                out.append(x)
        return out

    def level_shapes(self):
        """(C, H, W) of every tapped level, found by a dry forward pass."""
        p = next(self.parameters())
        x = torch.zeros(1, 3, self.spec.input_size, self.spec.input_size, dtype=p.dtype)
        return [tuple(t.shape[1:]) for t in self(x)]

    @property
    def layer_ids(self):
        return list(self.spec.layer_ids)


def load_teacher(spec: TeacherSpec, dtype=torch.float32) -> FrozenTeacher:
    if spec.backbone_name not in BACKBONES:
        raise ConfigError(f"unknown backbone {spec.backbone_name!r}; known: {sorted(BACKBONES)}")
    if spec.weights_source not in WEIGHTS_SOURCES:
        raise ConfigError(f"weights_source must be one of {WEIGHTS_SOURCES}, got {spec.weights_source!r}")
    if spec.input_size < 1:
        raise ConfigError("input_size must be positive")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.seed)
        backbone = BACKBONES[spec.backbone_name]()
    if spec.weights_source != "random_frozen":
        if spec.weights_source == "file_path":
            if not spec.weights_path:
                raise ConfigError("weights_source=file_path needs weights_path")
            path = Path(spec.weights_path)
        else:
            path = weights_dir() / f"{spec.backbone_name}.pth"
        if not path.is_file():
            raise FileNotFoundError(f"teacher weights not found: {path}")
        state = torch.load(path, map_location="cpu", weights_only=True)
        _load_backbone_state(backbone, state)
    teacher = FrozenTeacher(spec, backbone).to(dtype)
    return teacher


def _load_backbone_state(backbone, state):
    # accept either our own key layout or a plain torchvision state_dict
    if isinstance(backbone, _TorchvisionResNet) and any(k.startswith("conv1.") for k in state):
        renamed = {}
        for k, v in state.items():
            if k.startswith("fc."):
                continue
            for src, dst in (("conv1.", "stem.0."), ("bn1.", "stem.1.")):
                if k.startswith(src):
                    k = dst + k[len(src):]
            renamed[k] = v
        state = renamed
    backbone.load_state_dict(state, strict=False)


def extract_pyramid(teacher: FrozenTeacher, batch: torch.Tensor) -> List[FeaturePyramid]:
    levels = teacher(batch)
    return [FeaturePyramid([lv[b] for lv in levels], teacher.layer_ids, "teacher")
            for b in range(batch.shape[0])]


def parameter_checksum(module: nn.Module) -> str:
    """sha256 over every parameter and buffer, in state_dict order."""
    h = hashlib.sha256()
    for k, v in module.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def preprocess_image(img: Image.Image, input_size: int, dtype=torch.float32) -> torch.Tensor:
    """8-bit RGB (grayscale replicated), bilinear resize, ImageNet standardization."""
    img = img.convert("RGB")
    if img.size != (input_size, input_size):
        img = img.resize((input_size, input_size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float64) / 255.0
    arr = (arr - np.array(IMAGENET_MEAN)) / np.array(IMAGENET_STD)
    return torch.from_numpy(arr.transpose(2, 0, 1).copy()).to(dtype)


def preprocess_batch(images: Sequence[Image.Image], input_size: int, dtype=torch.float32) -> torch.Tensor:
    return torch.stack([preprocess_image(im, input_size, dtype) for im in images])


def resize_map(m: torch.Tensor, size) -> torch.Tensor:
    """Bilinear resize of a (..., H, W) map."""
    lead = m.shape[:-2]
    x = m.reshape(-1, 1, *m.shape[-2:])
    x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    return x.reshape(*lead, *size)
