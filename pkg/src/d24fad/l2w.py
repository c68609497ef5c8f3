"""Query-conditioned weighting of support features."""
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import torch
import torch.nn as nn

from .errors import ConfigError, NumericError
from .losses import L2W_VARIANTS, _check_bank, as_levels

LOGIT_CLAMP = 30.0


@dataclass
class SupportWeights:
    """``per_level[i]`` is (B, K): one probability vector over supports per query."""
    per_level: List[torch.Tensor]

    def for_query(self, b=0):
        return [w[b] for w in self.per_level]


def _identity_1x1(c, noise, gen, dtype):
    conv = nn.Conv2d(c, c, 1, bias=False)
    w = torch.eye(c, dtype=torch.float64)
    if noise:
        w = w + noise * torch.randn(c, c, generator=gen, dtype=torch.float64)
    conv.weight.data = w.reshape(c, c, 1, 1).to(dtype)
    return conv


class L2WParams(nn.Module):
    """Per-level projections for the weighting variants.

    ``phi`` (and ``theta`` when the variant needs it) are 1x1 convolutions
    initialised at identity plus ``init_noise`` Gaussian noise. The
    concatenation variant also owns a vector of length 2*C*H*W per level.
    """

    def __init__(self, level_shapes: Sequence[Sequence[int]], variant="scaled_dot", seed=0,
                 init_noise=0.01, dtype=torch.float32):
        super().__init__()
        if variant not in L2W_VARIANTS:
            raise ConfigError(f"l2w variant must be one of {L2W_VARIANTS}, got {variant!r}")
        self.variant = variant
        self.level_shapes = [tuple(int(v) for v in s) for s in level_shapes]
        gen = torch.Generator().manual_seed(seed)
        chans = [s[0] for s in self.level_shapes]
        # gaussian uses raw features; phi kept for a uniform parameter layout but unused
        self.phi = nn.ModuleList([_identity_1x1(c, init_noise, gen, dtype) for c in chans])
        if variant in ("embedded_gaussian", "concatenation"):
            self.theta = nn.ModuleList([_identity_1x1(c, init_noise, gen, dtype) for c in chans])
        else:
            self.theta = None
        if variant == "concatenation":
            vecs = []
            for c, h, w in self.level_shapes:
                d = c * h * w
                vecs.append(nn.Parameter((torch.randn(2 * d, generator=gen, dtype=torch.float64)
                                          / math.sqrt(2 * d)).to(dtype)))
            self.concat_weight_vector = nn.ParameterList(vecs)
        else:
            self.concat_weight_vector = None

    def logits(self, i, q, s):
        """Pre-softmax scores for level ``i``: q (B,C,H,W), s (K,C,H,W) -> (B,K)."""
        c = q.shape[1]
        B, K = q.shape[0], s.shape[0]
        v = self.variant
        if v == "scaled_dot":
            return q.reshape(B, -1) @ self.phi[i](s).reshape(K, -1).T / math.sqrt(c)
        if v == "gaussian":
            dot = q.reshape(B, -1) @ s.reshape(K, -1).T / math.sqrt(c)
            return torch.exp(dot.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
        tq = self.theta[i](q).reshape(B, -1)
        ps = self.phi[i](s).reshape(K, -1)
        if v == "embedded_gaussian":
            return torch.exp((tq @ ps.T / math.sqrt(c)).clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
        wv = self.concat_weight_vector[i]
        d = tq.shape[1]
        # w^T [theta(q), phi(s)] splits into a query part and a support part
        return torch.relu((tq @ wv[:d])[:, None] + (ps @ wv[d:])[None, :])


def compute_weights(params: L2WParams, query_pyr, support_bank) -> SupportWeights:
    q, bank = as_levels(query_pyr), as_levels(support_bank)
    _check_bank(bank, q)
    out = []
    for i, (z, s) in enumerate(zip(q, bank)):
        logits = params.logits(i, z, s)
        if not bool(torch.isfinite(logits).all()):
            raise NumericError(f"non-finite learn-to-weight logits at level {i}", term="l2w_logits")
        out.append(torch.softmax(logits, dim=1))
    return SupportWeights(out)


def weighted_support(weights: SupportWeights, support_bank) -> List[torch.Tensor]:
    """Convex combination of the supports per level and query -> list of (B, C, H, W)."""
    bank = as_levels(support_bank)
    return [torch.einsum("bk,kchw->bchw", w, s) for w, s in zip(weights.per_level, bank)]


def l2w_dissimilarity_maps(params: L2WParams, query_pyr, support_bank, eps=1e-8,
                           stop_support_grad=False):
    """Per-level (B, H, W) maps of 1 - cos(weighted support, query), plus the weights."""
    from .losses import dissimilarity_map
    q, bank = as_levels(query_pyr), as_levels(support_bank)
    if stop_support_grad:
        bank = [s.detach() for s in bank]
    weights = compute_weights(params, q, bank)
    ref = weighted_support(weights, bank)
    return [dissimilarity_map(r, z, eps) for r, z in zip(ref, q)], weights


def ssd_l2w_per_item(params, query_pyr, support_bank, eps=1e-8, stop_support_grad=False):
    maps, _ = l2w_dissimilarity_maps(params, query_pyr, support_bank, eps, stop_support_grad)
    return sum(m.mean(dim=(-2, -1)) for m in maps)


def ssd_l2w_loss(params: L2WParams, query_pyr, support_bank, eps=1e-8, stop_support_grad=False):
    return ssd_l2w_per_item(params, query_pyr, support_bank, eps, stop_support_grad).mean()


def export_weights(weights: SupportWeights, episode_id, path, support_ids: Sequence[str],
                   query_index=0, append=False):
    """Write one JSON line per pyramid level."""
    path = Path(path)
    lines = []
    for i, w in enumerate(weights.per_level):
        row = w[query_index].detach().cpu().double().tolist()
        if len(row) != len(support_ids):
            raise ValueError(f"{len(support_ids)} support ids for K={len(row)}")
        lines.append(json.dumps({"episode_id": episode_id, "level_index": i,
                                 "support_ids": list(support_ids), "weights": row}))
    with open(path, "a" if append else "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def read_weights(path):
    """Inverse of :func:`export_weights` -> (SupportWeights with B=1, records)."""
    records = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    records.sort(key=lambda r: r["level_index"])
    per_level = [torch.tensor([r["weights"]], dtype=torch.float64) for r in records]
    return SupportWeights(per_level), records
