"""AUROC, multi-trial evaluation and CSV exports."""
import csv
import json
import statistics
from bisect import bisect_left, bisect_right
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .episodes import TaskManifest, eval_queries, select_infer_support
from .errors import PreconditionError, UndefinedMetricError

LABELS = {"normal": 0, "abnormal": 1, 0: 0, 1: 1, False: 0, True: 1}


def _label(v):
    try:
        return LABELS[v]
    except (KeyError, TypeError):
        raise ValueError(f"label must be normal/abnormal or 0/1, got {v!r}") from None


def auroc_fraction(scores: Sequence[float], labels: Sequence) -> Fraction:
    """Mann-Whitney AUROC as an exact fraction; ties between classes count one half."""
    if len(scores) != len(labels):
        raise ValueError("scores and labels differ in length")
    lab = [_label(v) for v in labels]
    normals = sorted(float(s) for s, y in zip(scores, lab) if y == 0)
    abnormals = [float(s) for s, y in zip(scores, lab) if y == 1]
    if not normals or not abnormals:
        raise UndefinedMetricError("AUROC needs at least one normal and one abnormal score")
    twice = 0
    for a in abnormals:
        lo = bisect_left(normals, a)
        hi = bisect_right(normals, a)
        twice += 2 * lo + (hi - lo)
    return Fraction(twice, 2 * len(normals) * len(abnormals))


def auroc(scores: Sequence[float], labels: Sequence) -> float:
    return float(auroc_fraction(scores, labels))


@dataclass
class EvalReport:
    task_id: str
    k: int
    mode: str
    trials: List[dict] = field(default_factory=list)   # {"seed", "auroc"}
    mean_auroc: float = float("nan")
    std_auroc: float = float("nan")
    score_tables: List[str] = field(default_factory=list)

    def finalize(self):
        # exact-arithmetic statistics: identical trials give std exactly 0
        vals = [float(t["auroc"]) for t in self.trials]
        self.mean_auroc = statistics.fmean(vals)
        self.std_auroc = statistics.pstdev(vals)
        return self

    def to_dict(self):
        return asdict(self)

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def _rel(path, task: TaskManifest):
    if task.root:
        try:
            return str(Path(path).relative_to(task.root))
        except ValueError:
            pass
    return str(path)


def run_eval(scorer, task: TaskManifest, k: int, mode: str = "random", n_trials: int = 5,
             seeds: Optional[Sequence[int]] = None, out_dir=None, export_dir=None):
    """Score every test image of ``task`` once per trial and aggregate AUROC.

    Returns ``(report, rows)`` where ``rows[t]`` is the list of
    (relative path, score, label) of trial t. With ``out_dir`` the score
    tables are written there, and the distribution summaries go to
    ``export_dir`` (default: ``out_dir``).
    """
    if not task.normal_test or not task.abnormal_test:
        raise PreconditionError(f"task {task.task_id} needs normal and abnormal test images")
    seeds = list(range(n_trials)) if seeds is None else list(seeds)
    if len(seeds) != n_trials:
        raise ValueError(f"{len(seeds)} seeds for {n_trials} trials")
    report = EvalReport(task.task_id, k, mode)
    all_rows = []
    for t, seed in enumerate(seeds):
        supports = select_infer_support(task, k, mode, seed)
        queries = eval_queries(task, supports)
        if set(supports) & {p for p, _ in queries}:
            raise RuntimeError("support image among scored queries")
        maps = scorer.score_paths([p for p, _ in queries], supports)
        rows = [(_rel(p, task), m.image_score, y) for (p, y), m in zip(queries, maps)]
        report.trials.append({"seed": int(seed), "auroc": auroc([r[1] for r in rows], [r[2] for r in rows]),
                              "supports": [_rel(p, task) for p in supports]})
        all_rows.append(rows)
        if out_dir is not None:
            stem = f"{task.task_id}_k{k}_{mode}_trial{t}"
            table = write_score_table(rows, Path(out_dir) / f"scores_{stem}.csv")
            export_score_distribution([(s, y) for _, s, y in rows],
                                      Path(export_dir or out_dir) / f"distribution_{stem}.csv")
            report.score_tables.append(table.name)
    return report.finalize(), all_rows


def write_score_table(rows: Iterable[Tuple[str, float, int]], path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query_path", "score", "label"])
        for p, s, y in rows:
            w.writerow([p, repr(float(s)), "abnormal" if _label(y) else "normal"])
    return path


def quartile_summary(values: Sequence[float]) -> dict:
    v = np.sort(np.asarray(values, dtype=np.float64))
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"n": int(v.size), "min": float(v[0]), "q1": float(q1), "median": float(med),
            "q3": float(q3), "max": float(v[-1]), "iqr": float(q3 - q1)}


DIST_COLUMNS = ["row_type", "label", "score", "n", "min", "q1", "median", "q3", "max", "iqr"]


def export_score_distribution(scores_with_labels: Sequence[Tuple[float, object]], path):
    """Data rows (one per score) followed by one summary row per class present."""
    items = [(float(s), _label(y)) for s, y in scores_with_labels]
    if not items:
        raise PreconditionError("no scores to export")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DIST_COLUMNS)
        for s, y in items:
            w.writerow(["data", "abnormal" if y else "normal", repr(s)] + [""] * 7)
        for y, name in ((0, "normal"), (1, "abnormal")):
            vals = [s for s, yy in items if yy == y]
            if vals:
                q = quartile_summary(vals)
                w.writerow(["summary", name, ""] + [q["n"]] + [repr(q[c]) for c in DIST_COLUMNS[4:]])
    return path


def read_score_distribution(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def export_embeddings(scorer, images: Sequence[str], labels: Sequence, path, image_ids=None):
    """One CSV row per image: id, label, spatially pooled deepest student features."""
    emb = scorer.pooled_embeddings(list(images)).double().cpu().numpy()
    ids = list(image_ids) if image_ids is not None else [str(p) for p in images]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "label"] + [f"e{j}" for j in range(emb.shape[1])])
        for i, y, row in zip(ids, labels, emb):
            w.writerow([i, "abnormal" if _label(y) else "normal"] + [repr(float(v)) for v in row])
    return path
