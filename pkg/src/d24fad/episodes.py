"""Task manifests, leave-one-out splits and episode construction."""
import json
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError, DataError, LayoutError
from .teacher import preprocess_image

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
LAYOUT = ("train/normal", "test/normal", "test/abnormal")


@dataclass(frozen=True)
class TaskManifest:
    task_id: str
    normal_train: Tuple[str, ...]
    normal_test: Tuple[str, ...]
    abnormal_test: Tuple[str, ...]
    modality: str = ""
    root: str = ""

    def __post_init__(self):
        sets = [set(self.normal_train), set(self.normal_test), set(self.abnormal_test)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise DataError(f"task {self.task_id}: split lists overlap")

    def counts(self):
        return len(self.normal_train), len(self.normal_test), len(self.abnormal_test)

    def to_dict(self, relative=True):
        d = asdict(self)
        if relative and self.root:
            for k in ("normal_train", "normal_test", "abnormal_test"):
                d[k] = [str(Path(p).relative_to(self.root)) for p in d[k]]
            d["root"] = ""
        else:
            for k in ("normal_train", "normal_test", "abnormal_test"):
                d[k] = list(d[k])
        return d


@dataclass
class Episode:
    query: str
    support: List[str]
    task_id: str
    role: str = "train"

    def __post_init__(self):
        if self.query in self.support:
            raise DataError(f"episode query {self.query} is also a support image")
        if not self.support:
            raise DataError("episode needs at least one support image")


def load_folder_dataset(root_path, task_id=None, modality="") -> TaskManifest:
    """Read ``train/normal``, ``test/normal`` and ``test/abnormal`` under ``root_path``."""
    root = Path(root_path).resolve()
    missing = [sub for sub in LAYOUT if not (root / sub).is_dir()]
    if missing:
        raise LayoutError(f"{root}: missing {missing}; expected subdirectories {list(LAYOUT)}")

    def listing(sub):
        return tuple(str(p) for p in sorted((root / sub).iterdir())
                     if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)

    return TaskManifest(task_id=task_id or root.name, normal_train=listing("train/normal"),
                        normal_test=listing("test/normal"), abnormal_test=listing("test/abnormal"),
                        modality=modality, root=str(root))


def load_benchmark(root_path, task_ids: Optional[Sequence[str]] = None) -> List[TaskManifest]:
    """Every task folder directly under ``root_path`` (sorted by name)."""
    root = Path(root_path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    if task_ids is None:
        task_ids = sorted(p.name for p in root.iterdir() if p.is_dir())
    return [load_folder_dataset(root / t, task_id=t) for t in task_ids]


def write_manifest_cache(manifest: TaskManifest, path=None):
    path = Path(path) if path else Path(manifest.root) / "task_manifest.json"
    path.write_text(json.dumps(manifest.to_dict(relative=True), indent=2, sort_keys=True) + "\n")
    return path


def read_manifest_cache(path) -> TaskManifest:
    path = Path(path)
    d = json.loads(path.read_text())
    root = path.parent.resolve()
    return TaskManifest(task_id=d["task_id"], modality=d.get("modality", ""), root=str(root),
                        **{k: tuple(str(root / p) for p in d[k])
                           for k in ("normal_train", "normal_test", "abnormal_test")})


def build_leave_one_out(manifests: Sequence[TaskManifest], held_out: str):
    ids = [m.task_id for m in manifests]
    if len(manifests) < 2:
        raise ConfigError(f"leave-one-out needs >= 2 tasks, got {len(manifests)}")
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate task ids: {ids}")
    if held_out not in ids:
        raise ConfigError(f"held-out task {held_out!r} not among {ids}")
    train = [m for m in manifests if m.task_id != held_out]
    test = manifests[ids.index(held_out)]
    return train, test


def _task_key(task_id):
    return zlib.crc32(task_id.encode())


def fixed_supports(task: TaskManifest, k: int, split_seed: int) -> List[str]:
    """First K of a seeded shuffle of the task's training normals."""
    if k < 1:
        raise ConfigError("K must be >= 1")
    pool = sorted(task.normal_train)
    if len(pool) < k + 1:
        raise DataError(f"task {task.task_id}: {len(pool)} training normals, need K+1={k + 1}")
    order = np.random.default_rng([split_seed, _task_key(task.task_id)]).permutation(len(pool))
    return [pool[i] for i in order[:k]]


def query_pool(task: TaskManifest, supports: Sequence[str]) -> List[str]:
    s = set(supports)
    return [p for p in sorted(task.normal_train) if p not in s]


def sample_train_episode(rng_seed: int, task: TaskManifest, k: int, draw_index: int = 0,
                         split_seed: Optional[int] = None) -> Episode:
    supports = fixed_supports(task, k, rng_seed if split_seed is None else split_seed)
    pool = query_pool(task, supports)
    rng = np.random.default_rng([rng_seed, draw_index, _task_key(task.task_id)])
    return Episode(query=pool[int(rng.integers(len(pool)))], support=supports, task_id=task.task_id)


@dataclass
class EpisodeBatch:
    task_id: str
    support: List[str]
    queries: List[str]


def epoch_batches(tasks: Sequence[TaskManifest], k: int, split_seed: int, seed: int, epoch: int,
                  batch_size: int, mixing: str = "per_task") -> List[List[EpisodeBatch]]:
    """All episodes of one epoch, grouped into optimizer steps.

    Every non-support training normal is a query exactly once per epoch.
    ``per_task`` steps hold one task each; ``mixed`` steps draw from a global
    shuffle and are split into per-task groups. Pure in (seed, split, epoch).
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    supports = {t.task_id: fixed_supports(t, k, split_seed) for t in tasks}
    if mixing == "per_task":
        steps = []
        for ti, t in enumerate(tasks):
            pool = query_pool(t, supports[t.task_id])
            order = np.random.default_rng([seed, epoch, ti]).permutation(len(pool))
            qs = [pool[i] for i in order]
            for j in range(0, len(qs), batch_size):
                steps.append([EpisodeBatch(t.task_id, supports[t.task_id], qs[j:j + batch_size])])
        perm = np.random.default_rng([seed, epoch]).permutation(len(steps))
        return [steps[i] for i in perm]
    if mixing == "mixed":
        items = [(t.task_id, q) for t in tasks for q in query_pool(t, supports[t.task_id])]
        perm = np.random.default_rng([seed, epoch]).permutation(len(items))
        items = [items[i] for i in perm]
        steps = []
        for j in range(0, len(items), batch_size):
            chunk = items[j:j + batch_size]
            groups: Dict[str, List[str]] = {}
            for tid, q in chunk:
                groups.setdefault(tid, []).append(q)
            steps.append([EpisodeBatch(tid, supports[tid], qs) for tid, qs in sorted(groups.items())])
        return steps
    raise ConfigError(f"unknown batch mixing {mixing!r}")


def support_pool(task: TaskManifest) -> List[str]:
    """Normals reserved for inference supports; never scored."""
    return sorted(task.normal_train)


def select_infer_support(task: TaskManifest, k: int, mode: str = "fixed", trial_seed: int = 0) -> List[str]:
    pool = support_pool(task)
    if k < 1:
        raise ConfigError("K must be >= 1")
    if len(pool) < k:
        raise DataError(f"task {task.task_id}: {len(pool)} reserved normals, need K={k}")
    if mode == "fixed":
        order = np.random.default_rng([0, _task_key(task.task_id)]).permutation(len(pool))
    elif mode == "random":
        order = np.random.default_rng([trial_seed, _task_key(task.task_id), 1]).permutation(len(pool))
    else:
        raise ConfigError(f"support mode must be fixed or random, got {mode!r}")
    return [pool[i] for i in order[:k]]


def eval_queries(task: TaskManifest, supports: Sequence[str]) -> List[Tuple[str, int]]:
    """Scored (path, label) pairs, label 1 = abnormal; supports are excluded."""
    s = set(supports)
    out = [(p, 0) for p in task.normal_test if p not in s]
    out += [(p, 1) for p in task.abnormal_test if p not in s]
    return out


class ImageStore:
    """Decodes and preprocesses images once, keyed by path."""

    def __init__(self, input_size: int, dtype=torch.float32):
        self.input_size = input_size
        self.dtype = dtype
        self._cache: Dict[str, torch.Tensor] = {}

    def get(self, path) -> torch.Tensor:
        path = str(path)
        t = self._cache.get(path)
        if t is None:
            with Image.open(path) as im:
                t = preprocess_image(im, self.input_size, self.dtype)
            self._cache[path] = t
        return t

    def batch(self, paths: Sequence[str]) -> torch.Tensor:
        return torch.stack([self.get(p) for p in paths])
