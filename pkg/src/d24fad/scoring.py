"""Inference: anomaly maps and image scores for queries against a support set."""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image

from .episodes import ImageStore
from .errors import StateError
from .l2w import l2w_dissimilarity_maps
from .losses import LossConfig, pairwise_dissimilarity
from .student import SupportFeatureBank
from .teacher import resize_map
from .training import TrainingState, resume


@dataclass
class AnomalyMap:
    map: torch.Tensor                 # (H0, W0), non-negative
    image_score: float
    per_level_maps: List[torch.Tensor] = field(default_factory=list)
    weights: Optional[List[torch.Tensor]] = None   # per level, length K


class Scorer:
    """Scores queries with a trained student.

    Support banks are cached per ordered tuple of support paths, so repeated
    queries against one support set run the student on the supports once.
    """

    def __init__(self, state: TrainingState, score_reduce: str = "mean", allow_untrained: bool = False):
        if state.epoch == 0 and not allow_untrained:
            raise StateError("checkpoint has not been trained (epoch 0)")
        if score_reduce not in ("mean", "max"):
            raise ValueError(f"score_reduce must be mean or max, got {score_reduce!r}")
        self.state = state
        self.teacher = state.teacher
        self.student = state.student.eval()
        self.l2w = state.l2w.eval()
        self.loss_cfg: LossConfig = state.cfg.loss
        self.score_reduce = score_reduce
        self.store = ImageStore(self.teacher.spec.input_size, state.cfg.torch_dtype)
        self._banks: Dict[Tuple[str, ...], SupportFeatureBank] = {}

    @classmethod
    def from_checkpoint(cls, path, score_reduce="mean", allow_untrained=False):
        if not Path(path).is_file():
            raise StateError(f"checkpoint not found: {path}")
        return cls(resume(path), score_reduce, allow_untrained)

    @property
    def output_size(self):
        s = self.teacher.spec.input_size
        return (s, s)

    @torch.no_grad()
    def bank_from_tensors(self, images: torch.Tensor, ids: Sequence[str]) -> SupportFeatureBank:
        levels = self.student(self.teacher(images)[-1])
        return SupportFeatureBank(levels, list(ids))

    def bank(self, support_paths: Sequence[str]) -> SupportFeatureBank:
        key = tuple(str(p) for p in support_paths)
        if key not in self._banks:
            self._banks[key] = self.bank_from_tensors(self.store.batch(key), key)
        return self._banks[key]

    @torch.no_grad()
    def score_tensors(self, queries: torch.Tensor, bank: SupportFeatureBank) -> List[AnomalyMap]:
        z = self.student(self.teacher(queries)[-1])
        eps = self.loss_cfg.epsilon
        weights = None
        if self.loss_cfg.use_l2w:
            level_maps, w = l2w_dissimilarity_maps(self.l2w, z, bank, eps)
            weights = w.per_level
        else:
            level_maps = [pairwise_dissimilarity(s, q, eps).mean(dim=1) for s, q in zip(bank.levels, z)]
        level_maps = [m.clamp_min(0) for m in level_maps]
        up = torch.stack([resize_map(m, self.output_size) for m in level_maps]).mean(dim=0)
        out = []
        for b in range(queries.shape[0]):
            m = up[b]
            score = float(m.mean()) if self.score_reduce == "mean" else float(m.max())
            out.append(AnomalyMap(m, score, [lm[b] for lm in level_maps],
                                  [w[b] for w in weights] if weights is not None else None))
        return out

    def score_paths(self, query_paths: Sequence[str], support_paths: Sequence[str],
                    batch_size: int = 64) -> List[AnomalyMap]:
        bank = self.bank(support_paths)
        out = []
        for j in range(0, len(query_paths), batch_size):
            out += self.score_tensors(self.store.batch(query_paths[j:j + batch_size]), bank)
        return out

    @torch.no_grad()
    def pooled_embeddings(self, paths: Sequence[str]) -> torch.Tensor:
        """Spatial mean of the deepest student level -> (N, C_L)."""
        z = self.student(self.teacher(self.store.batch(paths))[-1])
        return z[-1].mean(dim=(-2, -1))


def score_query(checkpoint: Union[str, Path, TrainingState, Scorer], support_images: torch.Tensor,
                query_image: torch.Tensor, teacher=None) -> AnomalyMap:
    """One preprocessed query (3,S,S) against K preprocessed supports (K,3,S,S)."""
    if isinstance(checkpoint, Scorer):
        scorer = checkpoint
    elif isinstance(checkpoint, TrainingState):
        scorer = Scorer(checkpoint)
    else:
        if not Path(checkpoint).is_file():
            raise StateError(f"checkpoint not found: {checkpoint}")
        scorer = Scorer(resume(checkpoint, teacher))
    bank = scorer.bank_from_tensors(support_images, [f"support_{k}" for k in range(support_images.shape[0])])
    return scorer.score_tensors(query_image.unsqueeze(0), bank)[0]


def _normalize(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= 0:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def export_heatmap(amap: AnomalyMap, query_image: Union[Image.Image, str, Path], path, alpha=0.5):
    """Write ``path`` (overlay), ``<stem>_query.png`` and ``<stem>_map.png`` as PNG.

    The map is min-max normalized, resized to the query's size and colored
    with the ``jet`` colormap. Returns the three paths.
    """
    from matplotlib import colormaps

    m = amap.map.detach().cpu().double().numpy()
    if not np.isfinite(m).all():
        raise ValueError("anomaly map contains non-finite values")
    if not isinstance(query_image, Image.Image):
        query_image = Image.open(query_image)
    q = query_image.convert("RGB")
    w, h = q.size
    m = resize_map(torch.from_numpy(m), (h, w)).numpy()
    heat = (colormaps["jet"](_normalize(m))[..., :3] * 255).round().astype(np.uint8)
    qa = np.asarray(q, dtype=np.float64)
    overlay = np.round((1 - alpha) * qa + alpha * heat).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.with_suffix("")
    qpath, mpath = Path(f"{stem}_query.png"), Path(f"{stem}_map.png")
    Image.fromarray(overlay).save(path, format="PNG")
    q.save(qpath, format="PNG")
    Image.fromarray(heat).save(mpath, format="PNG")
    return path, qpath, mpath
