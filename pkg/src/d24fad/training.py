"""Episodic training loop, checkpoints and run manifests."""
import hashlib
import io
import json
import logging
import math
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch

from .episodes import ImageStore, TaskManifest, epoch_batches
from .errors import ConfigError, IncompatibleCheckpointError, NumericError, PreconditionError
from .l2w import L2WParams, ssd_l2w_per_item
from .losses import LossConfig, ssd_per_item, total_loss, tsd_per_item
from .student import StudentDecoder, StudentSpec, SupportFeatureBank
from .teacher import FrozenTeacher, TeacherSpec, load_teacher, parameter_checksum

log = logging.getLogger(__name__)

CKPT_FORMAT = "d24fad-checkpoint"
CKPT_VERSION = 1
DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainConfig:
    epochs: int = 70
    batch_size: int = 64
    learning_rate: float = 5e-3
    beta1: float = 0.5
    beta2: float = 0.999
    weight_decay: float = 1e-2
    cosine_decay: bool = True
    seed: int = 0
    split_seed: int = 0
    k: int = 4
    dtype: str = "float32"
    batch_mixing: str = "per_task"
    blocks_per_stage: int = 1
    l2w_init_noise: float = 0.01
    cache_teacher_features: bool = True
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        for name in ("learning_rate", "beta1", "beta2", "weight_decay"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"train.{name} must be finite")
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.k < 1:
            raise ConfigError("train.k must be >= 1")
        if self.dtype not in DTYPES:
            raise ConfigError(f"train.dtype must be one of {sorted(DTYPES)}")
        if not self.loss.use_ssd and self.loss.lambda_weight == 0:
            raise ConfigError("disabling both ssd and tsd leaves nothing to train")

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]

    def to_dict(self):
        return asdict(self)


def build_student(teacher: FrozenTeacher, cfg: TrainConfig) -> StudentDecoder:
    return StudentDecoder.for_teacher(teacher, seed=cfg.seed, blocks_per_stage=cfg.blocks_per_stage)


def build_l2w(teacher: FrozenTeacher, cfg: TrainConfig) -> L2WParams:
    return L2WParams(teacher.level_shapes(), cfg.loss.l2w_variant, seed=cfg.seed + 1,
                     init_noise=cfg.l2w_init_noise, dtype=cfg.torch_dtype)


class TeacherFeatures:
    """Teacher pyramids per image path. The teacher is frozen and inputs are
    not augmented, so each image is encoded once when caching is on."""

    def __init__(self, teacher: FrozenTeacher, store: ImageStore, cache=True):
        self.teacher = teacher
        self.store = store
        self.cache = cache
        self._feats: Dict[str, List[torch.Tensor]] = {}

    def __call__(self, paths: Sequence[str]) -> List[torch.Tensor]:
        if not self.cache:
            return self.teacher(self.store.batch(paths))
        todo = [p for p in dict.fromkeys(paths) if p not in self._feats]
        if todo:
            levels = self.teacher(self.store.batch(todo))
            for j, p in enumerate(todo):
                self._feats[p] = [lv[j] for lv in levels]
        n = len(self._feats[paths[0]])
        return [torch.stack([self._feats[p][i] for p in paths]) for i in range(n)]


def episode_losses(teacher_levels, student: StudentDecoder, l2w: L2WParams, loss_cfg: LossConfig,
                   support_teacher_levels=None, support_ids=None):
    """Per-query tsd and self-distillation terms for one task group."""
    z = student(teacher_levels[-1])
    b = z[0].shape[0]
    if loss_cfg.lambda_weight > 0:
        tsd = tsd_per_item(teacher_levels, z, loss_cfg.epsilon)
    else:
        tsd = z[0].new_zeros(b)
    if loss_cfg.use_ssd:
        s = student(support_teacher_levels[-1])
        bank = SupportFeatureBank(s, list(support_ids) if support_ids else [str(i) for i in range(s[0].shape[0])])
        if loss_cfg.use_l2w:
            ssd = ssd_l2w_per_item(l2w, z, bank, loss_cfg.epsilon, loss_cfg.stop_support_grad)
        else:
            ssd = ssd_per_item(bank, z, loss_cfg.epsilon, loss_cfg.stop_support_grad)
    else:
        ssd = z[0].new_zeros(b)
    return tsd, ssd


@dataclass
class TrainingState:
    cfg: TrainConfig
    teacher: FrozenTeacher
    student: StudentDecoder
    l2w: L2WParams
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    step: int = 0
    loss_trace: List[Dict[str, float]] = field(default_factory=list)
    teacher_checksum: str = ""
    split: Dict = field(default_factory=dict)
    # run-local generator for any stochastic step; saved and restored with
    # the checkpoint, independent of the process-wide torch RNG
    rng: torch.Generator = field(default_factory=torch.Generator)

    def trainable_parameters(self):
        return list(self.student.parameters()) + list(self.l2w.parameters())


def new_state(cfg: TrainConfig, teacher: FrozenTeacher, student=None, l2w=None, split=None) -> TrainingState:
    if any(p.requires_grad for p in teacher.parameters()):
        raise PreconditionError("teacher must be frozen")
    student = student if student is not None else build_student(teacher, cfg)
    l2w = l2w if l2w is not None else build_l2w(teacher, cfg)
    params = list(student.parameters()) + list(l2w.parameters())
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2),
                           weight_decay=cfg.weight_decay)
    return TrainingState(cfg, teacher, student, l2w, opt, teacher_checksum=parameter_checksum(teacher),
                         split=split or {}, rng=torch.Generator().manual_seed(cfg.seed))


def _lr_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if not cfg.cosine_decay or total_steps <= 1:
        return cfg.learning_rate
    return cfg.learning_rate * 0.5 * (1 + math.cos(math.pi * step / total_steps))


def run_epochs(state: TrainingState, tasks: Sequence[TaskManifest], until_epoch: Optional[int] = None,
               features: Optional[TeacherFeatures] = None, progress=None) -> TrainingState:
    """Train from ``state.epoch`` up to ``until_epoch`` (default: cfg.epochs)."""
    cfg = state.cfg
    if not tasks:
        raise PreconditionError("no training tasks")
    until = cfg.epochs if until_epoch is None else min(until_epoch, cfg.epochs)
    if features is None:
        features = TeacherFeatures(state.teacher, ImageStore(state.teacher.spec.input_size, cfg.torch_dtype),
                                   cfg.cache_teacher_features)
    steps_per_epoch = len(epoch_batches(tasks, cfg.k, cfg.split_seed, cfg.seed, 0, cfg.batch_size,
                                        cfg.batch_mixing))
    total_steps = steps_per_epoch * cfg.epochs
    state.student.train()
    state.l2w.train()
    prev_det = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        while state.epoch < until:
            e = state.epoch
            steps = epoch_batches(tasks, cfg.k, cfg.split_seed, cfg.seed, e, cfg.batch_size, cfg.batch_mixing)
            sums = {"total": 0.0, "tsd": 0.0, "ssd": 0.0}
            n_total = 0
            for si, groups in enumerate(steps):
                lr = _lr_at(cfg, state.step, total_steps)
                for g in state.optimizer.param_groups:
                    g["lr"] = lr
                n_step = sum(len(g.queries) for g in groups)
                loss = 0
                for g in groups:
                    tsd, ssd = episode_losses(features(g.queries), state.student, state.l2w, cfg.loss,
                                              features(g.support) if cfg.loss.use_ssd else None, g.support)
                    tsd_m, ssd_m = tsd.mean(), ssd.mean()
                    episode_id = f"epoch{e}/step{si}/{g.task_id}"
                    try:
                        part = total_loss(cfg.loss, tsd_m, ssd_m)
                    except NumericError as err:
                        raise NumericError(f"{err} in episode {episode_id}", term=err.term,
                                           episode_id=episode_id) from None
                    w = len(g.queries) / n_step
                    loss = loss + w * part
                    sums["tsd"] += float(tsd.detach().sum())
                    sums["ssd"] += float(ssd.detach().sum())
                    sums["total"] += float(part.detach()) * len(g.queries)
                n_total += n_step
                state.optimizer.zero_grad(set_to_none=True)
                loss.backward()
                state.optimizer.step()
                state.step += 1
            rec = {k: v / n_total for k, v in sums.items()}
            rec["epoch"] = e + 1
            state.loss_trace.append(rec)
            state.epoch += 1
            log.info("epoch %d/%d loss %.6f (tsd %.6f, ssd %.6f)", e + 1, cfg.epochs,
                     rec["total"], rec["tsd"], rec["ssd"])
            if progress:
                progress(rec)
    finally:
        torch.use_deterministic_algorithms(prev_det)
    state.student.eval()
    state.l2w.eval()
    if parameter_checksum(state.teacher) != state.teacher_checksum:
        raise RuntimeError("teacher parameters changed during training")
    return state


# -- checkpoints ---------------------------------------------------------------

def checkpoint_name(epoch: int) -> str:
    return f"student_ep{epoch}.ckpt"


def _atomic_write_bytes(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _canonical_payload(obj):
    """Fresh containers and interned strings, so pickle's memo (and thus the
    file bytes) depends only on content, not on which objects were aliased."""
    if isinstance(obj, dict):
        return {_canonical_payload(k): _canonical_payload(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_canonical_payload(v) for v in obj]
    if isinstance(obj, tuple):
        return tuple(_canonical_payload(v) for v in obj)
    if isinstance(obj, str):
        return sys.intern(str(obj))
    return obj


def checkpoint_bytes(state: TrainingState) -> bytes:
    payload = {
        "format": CKPT_FORMAT,
        "version": CKPT_VERSION,
        "epoch": state.epoch,
        "step": state.step,
        "train_config": state.cfg.to_dict(),
        "teacher_spec": state.teacher.spec.to_dict(),
        "student_spec": state.student.spec.to_dict(),
        "level_shapes": [list(s) for s in state.student.level_shapes],
        "student_state": state.student.state_dict(),
        "l2w_state": state.l2w.state_dict(),
        "optimizer_state": state.optimizer.state_dict(),
        "loss_trace": state.loss_trace,
        "teacher_checksum": state.teacher_checksum,
        "split": state.split,
        "rng_state": state.rng.get_state(),
    }
    buf = io.BytesIO()
    torch.save(_canonical_payload(payload), buf)
    return buf.getvalue()


def save_checkpoint(state: TrainingState, directory) -> Path:
    path = Path(directory) / checkpoint_name(state.epoch)
    _atomic_write_bytes(path, checkpoint_bytes(state))
    return path


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as err:
        raise IncompatibleCheckpointError(f"{path}: unreadable checkpoint ({type(err).__name__}: {err})") from None
    if not isinstance(payload, dict) or payload.get("format") != CKPT_FORMAT:
        raise IncompatibleCheckpointError(f"{path}: not a {CKPT_FORMAT} file")
    if payload.get("version") != CKPT_VERSION:
        raise IncompatibleCheckpointError(f"{path}: checkpoint version {payload.get('version')} "
                                          f"!= supported {CKPT_VERSION}")
    return payload


def resume(checkpoint_path, teacher: Optional[FrozenTeacher] = None) -> TrainingState:
    """Rebuild parameters, optimizer moments, epoch/step counters and RNG state."""
    payload = _read_checkpoint(checkpoint_path)
    cfg = TrainConfig(**payload["train_config"])
    tspec = TeacherSpec(**payload["teacher_spec"])
    if teacher is None:
        teacher = load_teacher(tspec, cfg.torch_dtype)
    elif teacher.spec.to_dict() != tspec.to_dict():
        raise IncompatibleCheckpointError("supplied teacher does not match the checkpoint's teacher spec")
    if parameter_checksum(teacher) != payload["teacher_checksum"]:
        raise IncompatibleCheckpointError("teacher weights differ from the ones used for training")
    sspec = StudentSpec(**payload["student_spec"])
    student = StudentDecoder(sspec, payload["level_shapes"]).to(cfg.torch_dtype)
    student.load_state_dict(payload["student_state"])
    l2w = L2WParams(payload["level_shapes"], cfg.loss.l2w_variant, seed=cfg.seed + 1,
                    init_noise=cfg.l2w_init_noise, dtype=cfg.torch_dtype)
    l2w.load_state_dict(payload["l2w_state"])
    state = new_state(cfg, teacher, student, l2w, split=payload["split"])
    state.optimizer.load_state_dict(payload["optimizer_state"])
    state.epoch = payload["epoch"]
    state.step = payload["step"]
    state.loss_trace = list(payload["loss_trace"])
    state.rng.set_state(payload["rng_state"])
    state.student.eval()
    state.l2w.eval()
    return state


# -- run manifest --------------------------------------------------------------

def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def manifest_checksum(manifest: dict) -> str:
    """sha256 of the manifest minus wall-clock fields and the checksum itself."""
    body = {k: v for k, v in manifest.items() if k not in ("wall_clock", "content_sha256")}
    return hashlib.sha256(_canonical(body).encode()).hexdigest()


def split_description(train_tasks: Sequence[TaskManifest], test_task: Optional[TaskManifest] = None):
    def desc(t):
        files = t.to_dict(relative=True)
        h = hashlib.sha256(_canonical([files["normal_train"], files["normal_test"],
                                       files["abnormal_test"]]).encode()).hexdigest()
        return {"task_id": t.task_id, "counts": list(t.counts()), "files_sha256": h}

    return {"train_tasks": [desc(t) for t in train_tasks],
            "held_out": desc(test_task) if test_task is not None else None}


def build_run_manifest(state: TrainingState, checkpoint_path: Path, config_snapshot: dict,
                       started: float, finished: float) -> dict:
    m = {
        "config": config_snapshot,
        "split": state.split,
        "teacher_checksum": state.teacher_checksum,
        "teacher_checksum_after": parameter_checksum(state.teacher),
        "loss_trace": state.loss_trace,
        "final_checkpoint": {"name": checkpoint_path.name, "sha256": file_sha256(checkpoint_path)},
        "wall_clock": {"started": started, "finished": finished, "seconds": round(finished - started, 3)},
    }
    m["content_sha256"] = manifest_checksum(m)
    return m


def write_json_atomic(obj, path) -> Path:
    path = Path(path)
    _atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())
    return path


def train(cfg: TrainConfig, train_tasks: Sequence[TaskManifest], teacher: FrozenTeacher,
          student: Optional[StudentDecoder] = None, l2w: Optional[L2WParams] = None,
          out_dir=None, test_task: Optional[TaskManifest] = None, config_snapshot: Optional[dict] = None,
          stop_after_epoch: Optional[int] = None, progress=None):
    """Train and (if ``out_dir``) write ``checkpoints/student_ep{N}.ckpt`` plus ``run_manifest.json``.

    Returns ``(state, checkpoint_path, manifest)``; paths are None without ``out_dir``.
    """
    if not train_tasks:
        raise PreconditionError("no training tasks")
    started = time.time()
    state = new_state(cfg, teacher, student, l2w, split=split_description(train_tasks, test_task))
    run_epochs(state, train_tasks, until_epoch=stop_after_epoch, progress=progress)
    return finalize_run(state, out_dir, config_snapshot or {"train": cfg.to_dict()}, started)


def finalize_run(state: TrainingState, out_dir, config_snapshot, started):
    if out_dir is None:
        return state, None, None
    out_dir = Path(out_dir)
    ckpt = save_checkpoint(state, out_dir / "checkpoints")
    manifest = build_run_manifest(state, ckpt, config_snapshot, started, time.time())
    write_json_atomic(manifest, out_dir / "checkpoints" / "run_manifest.json")
    return state, ckpt, manifest
