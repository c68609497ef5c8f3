"""Learnable student decoder: reverses the teacher's tapped stages."""
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import PreconditionError, ShapeError
from .teacher import FeaturePyramid, FrozenTeacher


@dataclass
class StudentSpec:
    layer_ids: List[str] = field(default_factory=list)
    channel_plan: List[int] = field(default_factory=list)
    upsample_factor: int = 2
    seed: int = 0
    blocks_per_stage: int = 1

    def to_dict(self):
        return asdict(self)


class ResBlock(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.conv1 = nn.Conv2d(c, c, 3, padding=1)
        self.conv2 = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class DecoderStage(nn.Module):
    def __init__(self, cin, cout, n_blocks):
        super().__init__()
        self.proj = nn.Conv2d(cin, cout, 3, padding=1)
        self.blocks = nn.Sequential(*[ResBlock(cout) for _ in range(n_blocks)])

    def forward(self, x):
        return self.blocks(F.relu(self.proj(x)))


class StudentDecoder(nn.Module):
    """Maps the deepest teacher level to a full pyramid.

    ``level_shapes`` are the teacher's (C, H, W) per level, shallowest first.
    The deepest stage keeps the input resolution; every shallower stage
    upsamples the previous output by ``upsample_factor`` first.
    """

    def __init__(self, spec: StudentSpec, level_shapes: Sequence[Sequence[int]]):
        super().__init__()
        level_shapes = [tuple(int(v) for v in s) for s in level_shapes]
        if [c for c, _, _ in level_shapes] != list(spec.channel_plan):
            raise ShapeError(f"channel_plan {spec.channel_plan} does not match teacher channels "
                             f"{[c for c, _, _ in level_shapes]}")
        if len(spec.layer_ids) != len(level_shapes):
            raise ShapeError("layer_ids and level_shapes differ in length")
        f = spec.upsample_factor
        for (_, h, w), (_, h2, w2) in zip(level_shapes[:-1], level_shapes[1:]):
            if (h, w) != (h2 * f, w2 * f):
                raise ShapeError(f"teacher levels {(h, w)} and {(h2, w2)} are not a x{f} step apart")
        self.spec = spec
        self.level_shapes = level_shapes
        chans = list(spec.channel_plan)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(spec.seed)
            # stages[0] is the deepest
            stages = [DecoderStage(chans[-1], chans[-1], spec.blocks_per_stage)]
            for i in range(len(chans) - 2, -1, -1):
                stages.append(DecoderStage(chans[i + 1], chans[i], spec.blocks_per_stage))
            self.stages = nn.ModuleList(stages)
            for m in self.modules():
                if isinstance(m, nn.Conv2d):
                    nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                    nn.init.zeros_(m.bias)
            for m in self.modules():
                if isinstance(m, ResBlock):
                    # keep the residual branch small at init
                    m.conv2.weight.data.mul_(0.1)

    @classmethod
    def for_teacher(cls, teacher: FrozenTeacher, seed=0, blocks_per_stage=1):
        shapes = teacher.level_shapes()
        spec = StudentSpec(layer_ids=teacher.layer_ids, channel_plan=[s[0] for s in shapes],
                           seed=seed, blocks_per_stage=blocks_per_stage)
        p = next(teacher.parameters())
        return cls(spec, shapes).to(p.dtype)

    def forward(self, deepest):
        expect = self.level_shapes[-1]
        if deepest.dim() != 4 or tuple(deepest.shape[1:]) != expect:
            raise ShapeError(f"student expects B x {expect} input, got {tuple(deepest.shape)}")
        outs = []
        x = deepest
        for j, stage in enumerate(self.stages):
            if j > 0:
                x = F.interpolate(x, scale_factor=self.spec.upsample_factor, mode="bilinear",
                                  align_corners=False)
            x = stage(x)
            outs.append(x)
        outs = outs[::-1]
        for o, s in zip(outs, self.level_shapes):
            if tuple(o.shape[1:]) != s:
                raise ShapeError(f"student level {tuple(o.shape[1:])} != teacher level {s}")
        return outs


def student_forward(student: StudentDecoder, deepest_teacher_feature: torch.Tensor) -> FeaturePyramid:
    """Single-item convenience wrapper; ``deepest_teacher_feature`` is (C, H, W)."""
    levels = student(deepest_teacher_feature.unsqueeze(0))
    return FeaturePyramid([lv[0] for lv in levels], list(student.spec.layer_ids), "student")


@dataclass
class SupportFeatureBank:
    """Student pyramids of the K support images, stacked: ``levels[i]`` is (K, C_i, H_i, W_i)."""
    levels: List[torch.Tensor]
    support_ids: List[str]

    def __post_init__(self):
        if not self.levels or self.levels[0].shape[0] == 0:
            raise PreconditionError("support bank is empty")
        k = self.levels[0].shape[0]
        if any(lv.shape[0] != k for lv in self.levels):
            raise ShapeError("support bank levels disagree on K")
        if len(self.support_ids) != k:
            raise ShapeError(f"{len(self.support_ids)} support ids for K={k}")

    @property
    def k(self):
        return self.levels[0].shape[0]

    def pyramids(self):
        return [FeaturePyramid([lv[k] for lv in self.levels], [str(i) for i in range(len(self.levels))],
                               "student") for k in range(self.k)]

    def permuted(self, perm):
        perm = list(perm)
        return SupportFeatureBank([lv[perm] for lv in self.levels], [self.support_ids[p] for p in perm])

    def detached(self):
        return SupportFeatureBank([lv.detach() for lv in self.levels], list(self.support_ids))


def support_forward(student: StudentDecoder, teacher: FrozenTeacher, support_images: torch.Tensor,
                    support_ids: Optional[Sequence[str]] = None) -> SupportFeatureBank:
    if support_images.dim() != 4 or support_images.shape[0] < 1:
        raise PreconditionError("support set must contain at least one image")
    deepest = teacher(support_images)[-1]
    levels = student(deepest)
    if support_ids is None:
        support_ids = [f"support_{k}" for k in range(support_images.shape[0])]
    return SupportFeatureBank(levels, list(support_ids))
