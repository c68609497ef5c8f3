"""Cosine distillation losses between feature pyramids.

Every loss accepts levels shaped (B, C, H, W) (a batch of queries) or a
single-image :class:`FeaturePyramid`; support banks are (K, C, H, W).
Losses are averaged over the query batch.
"""
import math
from dataclasses import asdict, dataclass
from typing import List, Sequence, Union

import torch

from .errors import ConfigError, NumericError, PreconditionError, ShapeError
from .student import SupportFeatureBank
from .teacher import FeaturePyramid

L2W_VARIANTS = ("scaled_dot", "gaussian", "embedded_gaussian", "concatenation")

Levels = Union[FeaturePyramid, Sequence[torch.Tensor]]


@dataclass
class LossConfig:
    lambda_weight: float = 0.1
    use_l2w: bool = True
    l2w_variant: str = "scaled_dot"
    epsilon: float = 1e-8
    use_ssd: bool = True
    stop_support_grad: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.lambda_weight) and self.lambda_weight >= 0):
            raise ConfigError(f"lambda_weight must be finite and >= 0, got {self.lambda_weight}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.l2w_variant not in L2W_VARIANTS:
            raise ConfigError(f"l2w_variant must be one of {L2W_VARIANTS}, got {self.l2w_variant!r}")

    def to_dict(self):
        return asdict(self)


def as_levels(p: Levels) -> List[torch.Tensor]:
    if isinstance(p, FeaturePyramid):
        return [lv.unsqueeze(0) for lv in p.levels]
    if isinstance(p, SupportFeatureBank):
        return list(p.levels)
    out = list(p)
    return [lv.unsqueeze(0) if lv.dim() == 3 else lv for lv in out]


def cosine_sim(a, b, eps=1e-8, dim=-1):
    """a.b / (|a| |b| + eps) along ``dim``."""
    a = torch.as_tensor(a, dtype=torch.float64) if not torch.is_tensor(a) else a
    b = torch.as_tensor(b, dtype=torch.float64) if not torch.is_tensor(b) else b
    num = (a * b).sum(dim)
    den = torch.linalg.vector_norm(a, dim=dim) * torch.linalg.vector_norm(b, dim=dim) + eps
    return num / den


def dissimilarity_map(a: torch.Tensor, b: torch.Tensor, eps=1e-8) -> torch.Tensor:
    """1 - cosine over the channel axis of two (B, C, H, W) maps -> (B, H, W)."""
    return 1.0 - cosine_sim(a, b, eps, dim=1)


def _check_pair(x, z):
    if len(x) != len(z):
        raise ShapeError(f"pyramids have {len(x)} and {len(z)} levels")
    for i, (a, b) in enumerate(zip(x, z)):
        if a.shape != b.shape:
            raise ShapeError(f"level {i}: {tuple(a.shape)} vs {tuple(b.shape)}")


def tsd_per_item(teacher_pyr: Levels, student_pyr: Levels, eps=1e-8) -> torch.Tensor:
    x, z = as_levels(teacher_pyr), as_levels(student_pyr)
    _check_pair(x, z)
    total = 0
    for a, b in zip(x, z):
        total = total + dissimilarity_map(a.detach(), b, eps).mean(dim=(-2, -1))
    return total


def tsd_loss(teacher_pyr: Levels, student_pyr: Levels, eps=1e-8) -> torch.Tensor:
    """Teacher-student term; the teacher side never receives gradient."""
    return tsd_per_item(teacher_pyr, student_pyr, eps).mean()


def _check_bank(bank, q):
    if len(bank) != len(q):
        raise ShapeError(f"support bank has {len(bank)} levels, query {len(q)}")
    if bank[0].shape[0] < 1:
        raise PreconditionError("support bank is empty")
    for i, (s, z) in enumerate(zip(bank, q)):
        if s.shape[1:] != z.shape[1:]:
            raise ShapeError(f"level {i}: support {tuple(s.shape[1:])} vs query {tuple(z.shape[1:])}")


def pairwise_dissimilarity(s: torch.Tensor, q: torch.Tensor, eps=1e-8) -> torch.Tensor:
    """Per-location 1 - cosine of every (query, support) pair: (K,C,H,W), (B,C,H,W) -> (B,K,H,W)."""
    num = torch.einsum("kchw,bchw->bkhw", s, q)
    ns = torch.linalg.vector_norm(s, dim=1)
    nq = torch.linalg.vector_norm(q, dim=1)
    return 1.0 - num / (nq[:, None] * ns[None] + eps)


def ssd_per_item(support_bank, query_pyr: Levels, eps=1e-8, stop_support_grad=False) -> torch.Tensor:
    bank, q = as_levels(support_bank), as_levels(query_pyr)
    _check_bank(bank, q)
    total = 0
    for s, z in zip(bank, q):
        if stop_support_grad:
            s = s.detach()
        total = total + pairwise_dissimilarity(s, z, eps).mean(dim=(-2, -1)).mean(dim=1)
    return total


def ssd_loss(support_bank, query_pyr: Levels, eps=1e-8, stop_support_grad=False) -> torch.Tensor:
    """Unweighted self-distillation: mean over supports of the per-level location-averaged 1 - cos."""
    return ssd_per_item(support_bank, query_pyr, eps, stop_support_grad).mean()


def _check_finite(name, v):
    t = torch.as_tensor(v)
    if not bool(torch.isfinite(t).all()):
        raise NumericError(f"non-finite {name} term: {t.detach().cpu().tolist()}", term=name)


def total_loss(cfg: LossConfig, tsd, ssd_or_l2w):
    """lambda * tsd + ssd (plain or learn-to-weight form)."""
    _check_finite("tsd", tsd)
    _check_finite("ssd_l2w" if cfg.use_l2w else "ssd", ssd_or_l2w)
    return cfg.lambda_weight * tsd + ssd_or_l2w
