"""Procedural multi-task anomaly benchmark.

Each task fixes a palette and one (or ``modes``) pattern layouts. Every image
redraws the layout shifted by a small Gaussian jitter, with a random gain,
optional global illumination offset and additive noise. Abnormal images are
normal draws with one localized edit covering 1-10% of the pixels.
"""
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from PIL import Image

from .errors import ConfigError

FAMILIES = ("blobs", "stripes", "rings", "checker")
ANOMALY_OPS = ("patch_swap", "intensity_spot", "shape_insert")

MIN_AREA, MAX_AREA = 0.01, 0.10
# side of a swapped or inserted square, as a fraction of the image side
PATCH_SIDE = (0.2, 0.3)

DEFAULT_OPS = {
    "blobs": "shape_insert",
    "stripes": "patch_swap",
    "rings": "patch_swap",
    "checker": "shape_insert",
}


@dataclass
class SynthTaskSpec:
    task_id: str
    pattern_family: str
    anomaly_op: str
    image_size: int = 32
    train_normal: int = 60
    test_normal: int = 30
    test_abnormal: int = 30
    noise_level: float = 0.05
    jitter: float = 1.0
    illumination: float = 0.0
    modes: int = 1
    seed: int = 0

    def validate(self, min_train=2):
        if self.pattern_family not in FAMILIES:
            raise ConfigError(f"unknown pattern family {self.pattern_family!r}; choose from {FAMILIES}")
        if self.anomaly_op not in ANOMALY_OPS:
            raise ConfigError(f"unknown anomaly op {self.anomaly_op!r}; choose from {ANOMALY_OPS}")
        if self.image_size < 16:
            raise ConfigError("image_size must be >= 16")
        if self.train_normal < min_train:
            raise ConfigError(f"train_normal={self.train_normal} < required {min_train}")
        if self.test_normal < 1 or self.test_abnormal < 1:
            raise ConfigError("test_normal and test_abnormal must be >= 1")
        if not 0 <= self.noise_level < 1:
            raise ConfigError("noise_level must be in [0, 1)")
        if not 0 <= self.jitter <= self.image_size / 4:
            raise ConfigError("jitter must be in [0, image_size / 4]")
        if self.modes < 1:
            raise ConfigError("modes must be >= 1")


def _family_params(family, rng, size, modes=1):
    """Per-task constants: a palette and ``modes`` alternative layouts."""
    p = {"fg": rng.uniform(0.55, 0.95, 3), "bg": rng.uniform(0.05, 0.35, 3)}
    p["layouts"] = [_layout(family, rng, size) for _ in range(modes)]
    return p


def _layout(family, rng, size):
    p = {}
    if family == "blobs":
        n = int(rng.integers(4, 7))
        p.update(centers=rng.uniform(0.15 * size, 0.85 * size, (n, 2)), sigma=float(rng.uniform(1.8, 2.6)))
    elif family == "stripes":
        p.update(period=float(rng.uniform(5.0, 8.0)), angle=float(rng.uniform(0, np.pi)),
                 phase=float(rng.uniform(0, 2 * np.pi)))
    elif family == "rings":
        p.update(period=float(rng.uniform(4.0, 6.0)), center=size / 2 + rng.uniform(-size / 8, size / 8, 2),
                 phase=float(rng.uniform(0, 2 * np.pi)))
    elif family == "checker":
        cell = int(rng.integers(4, 7))
        p.update(cell=cell, offset=rng.uniform(0, 2 * cell, 2))
    return p


def _pattern(family, p, size, rng, jitter):
    """Single-channel intensity field in [0, 1]: the task layout shifted by a per-image
    Gaussian offset of ``jitter`` px (std)."""
    layouts = p["layouts"]
    p = layouts[int(rng.integers(len(layouts)))] if len(layouts) > 1 else layouts[0]
    dy, dx = rng.normal(0, jitter, 2) if jitter > 0 else (0.0, 0.0)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy, xx = yy - dy, xx - dx
    if family == "blobs":
        f = np.zeros((size, size))
        for cy, cx in p["centers"]:
            amp = rng.uniform(0.8, 1.0)
            f += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * p["sigma"] ** 2))
        return np.clip(f, 0, 1)
    if family == "stripes":
        a = p["angle"]
        t = xx * np.cos(a) + yy * np.sin(a)
        return 0.5 + 0.5 * np.sin(2 * np.pi * t / p["period"] + p["phase"])
    if family == "rings":
        cy, cx = p["center"]
        r = np.hypot(yy - cy, xx - cx)
        return 0.5 + 0.5 * np.cos(2 * np.pi * r / p["period"] + p["phase"])
    if family == "checker":
        oy, ox = p["offset"]
        c = p["cell"]
        # smoothed edges so sub-pixel jitter is visible
        sy = np.sin(np.pi * (yy + oy) / c)
        sx = np.sin(np.pi * (xx + ox) / c)
        return 0.5 + 0.5 * np.tanh(3 * sy * sx)
    raise ConfigError(f"unknown pattern family {family!r}")


def _render(field_, p, noise, rng):
    gain = rng.uniform(0.85, 1.15)
    img = p["bg"][None, None, :] + gain * field_[..., None] * (p["fg"] - p["bg"])[None, None, :]
    illum = p.get("illumination", 0.0)
    if illum > 0:
        # global brightness offset plus a per-channel color cast
        img = img + rng.uniform(-illum, illum) + rng.normal(0, illum / 2, 3)
    img = img + noise * rng.standard_normal(img.shape)
    return np.clip(img, 0, 1)


def _to_uint8(img):
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def _edit(op, img, family, p, size, noise, jitter, rng):
    """Apply one localized edit. Returns (edited image, bbox x0,y0,x1,y1)."""
    out = img.copy()
    if op == "intensity_spot":
        r = rng.uniform(0.10, 0.17) * size
        cy, cx = rng.uniform(r, size - r, 2)
        yy, xx = np.mgrid[0:size, 0:size]
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        mask = np.exp(-d2 / (2 * (r / 1.5) ** 2))
        mask[d2 > r * r] = 0
        shift = rng.choice([-1.0, 1.0]) * rng.uniform(0.6, 0.9)
        out = out + shift * mask[..., None]
        bbox = [int(max(cx - r, 0)), int(max(cy - r, 0)), int(min(cx + r + 1, size)), int(min(cy + r + 1, size))]
    elif op == "patch_swap":
        s = int(round(rng.uniform(*PATCH_SIDE) * size))
        y0, x0 = rng.integers(0, size - s + 1, 2)
        # patch from an independent draw of the same family, rotated to break the local structure
        donor = _render(_pattern(family, p, size, rng, jitter), p, noise, rng)
        y1, x1 = rng.integers(0, size - s + 1, 2)
        patch = np.rot90(donor[y1:y1 + s, x1:x1 + s], k=1)
        out[y0:y0 + s, x0:x0 + s] = patch
        bbox = [int(x0), int(y0), int(x0 + s), int(y0 + s)]
    elif op == "shape_insert":
        s = int(round(rng.uniform(*PATCH_SIDE) * size))
        y0, x0 = rng.integers(0, size - s + 1, 2)
        # contrasting colors in a 1 px checker: finer than any normal pattern
        c1 = np.clip(1.0 - 0.5 * (p["fg"] + p["bg"]) + rng.normal(0, 0.1, 3), 0, 1)
        c2 = 0.5 * (p["fg"] + p["bg"])
        yy, xx = np.mgrid[0:s, 0:s]
        kind = rng.integers(0, 3)
        if kind == 0:
            m = np.ones((s, s), bool)
        elif kind == 1:
            m = xx <= yy
        else:
            c = s // 2
            m = (np.abs(yy - c) <= max(1, s // 4)) | (np.abs(xx - c) <= max(1, s // 4))
        fine = ((yy + xx) % 2 == 0)[..., None]
        color = np.where(fine, c1, c2)
        region = out[y0:y0 + s, x0:x0 + s]
        region[m] = color[m]
        bbox = [int(x0), int(y0), int(x0 + s), int(y0 + s)]
    else:
        raise ConfigError(f"unknown anomaly op {op!r}")
    return np.clip(out, 0, 1), bbox


def changed_fraction(a: np.ndarray, b: np.ndarray) -> float:
    """Fraction of pixels where any channel differs."""
    return float(np.any(a != b, axis=-1).mean())


def _abnormal(op, family, p, size, noise, jitter, rng, max_tries=50):
    for _ in range(max_tries):
        base = _to_uint8(_render(_pattern(family, p, size, rng, jitter), p, noise, rng))
        edited, bbox = _edit(op, base.astype(np.float64) / 255.0, family, p, size, noise, jitter, rng)
        edited = _to_uint8(edited)
        frac = changed_fraction(base, edited)
        if MIN_AREA <= frac <= MAX_AREA:
            return base, edited, bbox, frac
    raise RuntimeError(f"could not place a {op} edit with area in [{MIN_AREA}, {MAX_AREA}]")


def generate_task(spec: SynthTaskSpec, out_root, min_train=2):
    """Write one task in the folder layout read by ``load_folder_dataset``."""
    from .episodes import load_folder_dataset

    spec.validate(min_train)
    root = Path(out_root) / spec.task_id
    dirs = {k: root / k for k in ("train/normal", "test/normal", "test/abnormal")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
        for old in d.glob("*.png"):
            old.unlink()
    rng = np.random.default_rng([spec.seed, FAMILIES.index(spec.pattern_family)])
    size, noise, jitter = spec.image_size, spec.noise_level, spec.jitter
    p = _family_params(spec.pattern_family, rng, size, spec.modes)
    p["illumination"] = spec.illumination

    def normal():
        return _to_uint8(_render(_pattern(spec.pattern_family, p, size, rng, jitter), p, noise, rng))

    for i in range(spec.train_normal):
        Image.fromarray(normal()).save(dirs["train/normal"] / f"{i:04d}.png")
    for i in range(spec.test_normal):
        Image.fromarray(normal()).save(dirs["test/normal"] / f"{i:04d}.png")
    truth = []
    for i in range(spec.test_abnormal):
        _, edited, bbox, frac = _abnormal(spec.anomaly_op, spec.pattern_family, p, size, noise, jitter, rng)
        name = f"{i:04d}.png"
        Image.fromarray(edited).save(dirs["test/abnormal"] / name)
        truth.append({"file": f"test/abnormal/{name}", "op": spec.anomaly_op, "bbox": bbox,
                      "changed_fraction": round(frac, 6)})
    with open(root / "ground_truth.jsonl", "w") as fh:
        for row in truth:
            fh.write(json.dumps(row) + "\n")
    with open(root / "synth_spec.json", "w") as fh:
        json.dump(asdict(spec), fh, indent=2, sort_keys=True)
    return load_folder_dataset(root, task_id=spec.task_id, modality=f"synthetic/{spec.pattern_family}")


def sample_pair(spec: SynthTaskSpec):
    """(normal base, abnormal edit, changed fraction) drawn with the task's constants, not written to disk."""
    rng = np.random.default_rng([spec.seed, FAMILIES.index(spec.pattern_family), 99])
    p = _family_params(spec.pattern_family, rng, spec.image_size, spec.modes)
    p["illumination"] = spec.illumination
    base, edited, _, frac = _abnormal(spec.anomaly_op, spec.pattern_family, p, spec.image_size,
                                      spec.noise_level, spec.jitter, rng)
    return base, edited, frac


def default_benchmark(seed=1, image_size=32, train_normal=60, test_normal=30, test_abnormal=30,
                      noise_level=0.03, jitter=1.0, illumination=0.1, modes=1,
                      ops: Optional[Dict[str, str]] = None) -> List[SynthTaskSpec]:
    ops = {**DEFAULT_OPS, **(ops or {})}
    return [SynthTaskSpec(task_id=f, pattern_family=f, anomaly_op=ops[f], image_size=image_size,
                          train_normal=train_normal, test_normal=test_normal,
                          test_abnormal=test_abnormal, noise_level=noise_level, jitter=jitter,
                          illumination=illumination, modes=modes, seed=seed)
            for f in FAMILIES]


def generate_benchmark(out_root, specs: List[SynthTaskSpec], min_train=2):
    ids = [s.task_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate task ids: {ids}")
    return [generate_task(s, out_root, min_train) for s in specs]


def family_correlation(out_root, task_ids, n=10):
    """Mean absolute Pearson correlation between grayscale images of different tasks."""
    imgs = {}
    for t in task_ids:
        files = sorted((Path(out_root) / t / "train/normal").glob("*.png"))[:n]
        imgs[t] = [np.asarray(Image.open(f).convert("L"), dtype=np.float64).ravel() for f in files]
    vals = []
    for a in range(len(task_ids)):
        for b in range(a + 1, len(task_ids)):
            for x in imgs[task_ids[a]]:
                for y in imgs[task_ids[b]]:
                    if x.std() > 0 and y.std() > 0:
                        vals.append(abs(np.corrcoef(x, y)[0, 1]))
    return float(np.mean(vals))
