"""``d24fad`` command line: synth, train, eval, score.

Exit codes: 0 ok, 2 configuration/data error, 3 I/O or state error, 4 numeric failure.
"""
import argparse
import logging
import sys
import time
from pathlib import Path

import torch

from . import config as cfgmod
from .episodes import build_leave_one_out, load_benchmark
from .errors import ConfigError, D24FADError, NumericError, StateError
from .l2w import export_weights, l2w_dissimilarity_maps
from .metrics import export_embeddings, run_eval
from .synth import ANOMALY_OPS, FAMILIES, SynthTaskSpec, family_correlation, generate_benchmark
from .teacher import load_teacher
from .training import finalize_run, resume, run_epochs, split_description, train, write_json_atomic

log = logging.getLogger("d24fad")

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


class _Flags:
    """Registers flags whose values override one config path."""

    def __init__(self, parser):
        self.parser = parser
        self.routes = []
        self.base = cfgmod.defaults()

    def add(self, flag, path, help, type=None, const=None, **kw):
        section, key = path.split(".")
        default = self.base[section][key]
        dest = flag.lstrip("-").replace("-", "_")
        if const is not None:
            self.parser.add_argument(flag, dest=dest, action="store_const", const=const, default=None,
                                     help=f"{help} (default: off)")
        else:
            self.parser.add_argument(flag, dest=dest, type=type, default=None,
                                     help=f"{help} (default: {default})", **kw)
        self.routes.append((dest, section, key))

    def overrides(self, ns) -> dict:
        out = {}
        for dest, section, key in self.routes:
            v = getattr(ns, dest)
            if v is not None:
                out.setdefault(section, {})[key] = v
        return out


def _csv(s):
    return [x for x in s.split(",") if x]


def _ints(s):
    return [int(x) for x in _csv(s)]


def _common(p, flags):
    p.add_argument("--config", default=None, help="YAML or JSON config file; flags override it (default: none)")
    flags.add("--out", "run.out", "run directory (synth: benchmark directory)")
    flags.add("--workers", "run.workers", "CPU threads for feature extraction and scoring", type=int)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress (default: off)")


def _model_flags(flags):
    flags.add("--data", "data.root", "benchmark root with one folder per task")
    flags.add("--holdout", "data.holdout", "held-out task id")
    flags.add("--backbone", "teacher.backbone_name", "teacher backbone")
    flags.add("--input-size", "teacher.input_size", "teacher input size in pixels", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="d24fad", description="Few-shot anomaly detection by dual distillation.")
    sub = parser.add_subparsers(dest="command", required=True)
    routes = {}

    p = sub.add_parser("synth", help="generate the synthetic benchmark")
    f = _Flags(p)
    _common(p, f)
    f.add("--seed", "synth.seed", "generator seed", type=int)
    f.add("--families", "synth.families", f"comma-separated subset of {','.join(FAMILIES)}", type=_csv)
    f.add("--image-size", "synth.image_size", "image side in pixels", type=int)
    f.add("--train-normal", "synth.train_normal", "normal training images per task", type=int)
    f.add("--test-normal", "synth.test_normal", "normal test images per task", type=int)
    f.add("--test-abnormal", "synth.test_abnormal", "abnormal test images per task", type=int)
    f.add("--noise", "synth.noise_level", "additive noise std", type=float)
    f.add("--jitter", "synth.jitter", "per-image layout jitter in pixels", type=float)
    f.add("--illumination", "synth.illumination", "per-image brightness/color cast strength", type=float)
    routes["synth"] = f

    p = sub.add_parser("train", help="train on every task except the held-out one")
    f = _Flags(p)
    _common(p, f)
    _model_flags(f)
    f.add("--seed", "train.seed", "training seed", type=int)
    f.add("--split-seed", "train.split_seed", "seed of the per-task fixed support split", type=int)
    f.add("--k", "train.k", "supports per episode", type=int)
    f.add("--epochs", "train.epochs", "training epochs", type=int)
    f.add("--batch-size", "train.batch_size", "queries per step", type=int)
    f.add("--lr", "train.learning_rate", "Adam learning rate", type=float)
    f.add("--weight-decay", "train.weight_decay", "Adam L2 weight decay", type=float)
    f.add("--dtype", "train.dtype", "float32 or float64")
    f.add("--lambda", "loss.lambda_weight", "weight of the teacher-student term", type=float)
    f.add("--l2w-variant", "loss.l2w_variant", "support weighting variant")
    f.add("--no-tsd", "loss.lambda_weight", "drop the teacher-student term (lambda 0)", const=0.0)
    f.add("--no-ssd", "loss.use_ssd", "drop the support self-distillation term", const=False)
    f.add("--no-l2w", "loss.use_l2w", "average supports uniformly instead of learned weights", const=False)
    p.add_argument("--resume", default=None, help="continue from this checkpoint (default: none)")
    routes["train"] = f

    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out task")
    f = _Flags(p)
    _common(p, f)
    _model_flags(f)
    p.add_argument("--checkpoint", default=None,
                   help="checkpoint file (default: newest in <out>/checkpoints)")
    f.add("--k", "eval.k", "supports per trial", type=int)
    f.add("--support-mode", "eval.support_mode", "fixed or random support selection", choices=("fixed", "random"))
    f.add("--trials", "eval.trials", "number of support trials", type=int)
    f.add("--seeds", "eval.seeds", "comma-separated trial seeds (None: 0..trials-1)", type=_ints)
    p.add_argument("--seed", type=int, default=None,
                   help="first trial seed; trials use seed, seed+1, ... (default: none)")
    f.add("--score-reduce", "eval.score_reduce", "image score from the map", choices=("mean", "max"))
    p.add_argument("--export-embeddings", action="store_true",
                   help="write pooled student embeddings of the test images (default: off)")
    p.add_argument("--export-weights", action="store_true",
                   help="write learned support weights of trial 0 (default: off)")
    routes["eval"] = f

    p = sub.add_parser("score", help="score one query image against a folder of normal supports")
    f = _Flags(p)
    _common(p, f)
    p.add_argument("query", help="query image path")
    p.add_argument("--checkpoint", required=True, help="checkpoint file (required)")
    p.add_argument("--support", required=True, help="folder of normal support images (required)")
    p.add_argument("--k", type=int, default=0,
                   help="use the first K support images in sorted order, 0 = all (default: 0)")
    f.add("--score-reduce", "eval.score_reduce", "image score from the map", choices=("mean", "max"))
    p.add_argument("--heatmap", default=None, help="write an overlay PNG here (default: none)")
    routes["score"] = f
    return parser, routes


def _effective(ns, flags):
    cfg = cfgmod.effective_config(ns.config, flags.overrides(ns))
    if ns.command == "eval" and ns.seed is not None:
        cfg["eval"]["seeds"] = list(range(ns.seed, ns.seed + cfg["eval"]["trials"]))
    torch.set_num_threads(max(1, int(cfg["run"]["workers"])))
    return cfg


def cmd_synth(cfg):
    s = cfg["synth"]
    bad = [x for x in s["families"] if x not in FAMILIES]
    if bad or not s["families"]:
        raise ConfigError(f"unknown pattern family {bad}; choose from {list(FAMILIES)}")
    for fam, op in s["ops"].items():
        if fam not in FAMILIES or op not in ANOMALY_OPS:
            raise ConfigError(f"bad anomaly op mapping {fam}: {op}")
    specs = [SynthTaskSpec(task_id=fam, pattern_family=fam, anomaly_op=s["ops"].get(fam, "patch_swap"),
                           image_size=s["image_size"], train_normal=s["train_normal"],
                           test_normal=s["test_normal"], test_abnormal=s["test_abnormal"],
                           noise_level=s["noise_level"], jitter=s["jitter"],
                           illumination=s["illumination"], seed=s["seed"])
             for fam in s["families"]]
    out = Path(cfg["run"]["out"])
    tasks = generate_benchmark(out, specs, min_train=cfg["train"]["k"] + 1)
    info = {"tasks": [t.task_id for t in tasks], "config": s}
    if len(tasks) > 1:
        info["mean_cross_family_correlation"] = family_correlation(out, [t.task_id for t in tasks])
    write_json_atomic(info, out / "benchmark.json")
    for t in tasks:
        print(f"{t.task_id}\t" + "\t".join(str(c) for c in t.counts()))
    return 0


def _split(cfg):
    holdout = cfg["data"]["holdout"]
    if not holdout:
        raise ConfigError("--holdout is required")
    tasks = load_benchmark(cfg["data"]["root"])
    return build_leave_one_out(tasks, holdout)


def cmd_train(cfg, ns):
    train_tasks, test_task = _split(cfg)
    out = Path(cfg["run"]["out"])
    progress = (lambda r: print(f"epoch {r['epoch']} loss {r['total']:.6f}", file=sys.stderr)) if ns.verbose else None
    if ns.resume:
        started = time.time()
        state = resume(ns.resume)
        if state.split != split_description(train_tasks, test_task):
            raise ConfigError("checkpoint was trained on a different split")
        run_epochs(state, train_tasks, progress=progress)
        state, ckpt, manifest = finalize_run(state, out, {**cfg, "resumed_from": Path(ns.resume).name}, started)
    else:
        tc = cfgmod.train_config(cfg)
        teacher = load_teacher(cfgmod.teacher_spec(cfg), tc.torch_dtype)
        state, ckpt, manifest = train(tc, train_tasks, teacher, out_dir=out, test_task=test_task,
                                      config_snapshot=cfg, progress=progress)
    print(ckpt)
    return 0


def _latest_checkpoint(out: Path) -> Path:
    found = sorted((out / "checkpoints").glob("student_ep*.ckpt"),
                   key=lambda p: int(p.stem.split("_ep")[-1]))
    if not found:
        raise StateError(f"no checkpoint under {out / 'checkpoints'}")
    return found[-1]


def cmd_eval(cfg, ns):
    from .scoring import Scorer

    out = Path(cfg["run"]["out"])
    ckpt = Path(ns.checkpoint) if ns.checkpoint else _latest_checkpoint(out)
    scorer = Scorer.from_checkpoint(ckpt, cfg["eval"]["score_reduce"])
    if not cfg["data"]["holdout"]:
        held = (scorer.state.split or {}).get("held_out")
        if held:
            cfg["data"]["holdout"] = held["task_id"]
    _, task = _split(cfg)
    ev = cfg["eval"]
    reports, exports = out / "reports", out / "exports"
    report, rows = run_eval(scorer, task, ev["k"], ev["support_mode"], ev["trials"], ev["seeds"],
                            out_dir=reports, export_dir=exports)
    body = report.to_dict()
    body["checkpoint"] = ckpt.name
    body["config"] = cfg
    path = write_json_atomic(body, reports / f"eval_{task.task_id}_k{ev['k']}_{ev['support_mode']}.json")
    if ns.export_embeddings:
        images = list(task.normal_test) + list(task.abnormal_test)
        labels = [0] * len(task.normal_test) + [1] * len(task.abnormal_test)
        ids = [str(Path(p).relative_to(task.root)) if task.root else str(p) for p in images]
        export_embeddings(scorer, images, labels, exports / f"embeddings_{task.task_id}.csv", ids)
    if ns.export_weights and scorer.loss_cfg.use_l2w:
        _export_trial_weights(scorer, task, report, exports / f"weights_{task.task_id}_trial0.jsonl")
    print(f"{task.task_id}\tmean_auroc {report.mean_auroc:.6f}\tstd {report.std_auroc:.6f}\t{path}")
    return 0


def _export_trial_weights(scorer, task, report, path):
    from .episodes import eval_queries

    supports = [str(Path(task.root) / s) if task.root else s for s in report.trials[0]["supports"]]
    bank = scorer.bank(supports)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("")
    for qp, _ in eval_queries(task, supports):
        with torch.no_grad():
            z = scorer.student(scorer.teacher(scorer.store.batch([qp]))[-1])
            _, w = l2w_dissimilarity_maps(scorer.l2w, z, bank, scorer.loss_cfg.epsilon)
        qid = str(Path(qp).relative_to(task.root)) if task.root else qp
        export_weights(w, qid, path, report.trials[0]["supports"], append=True)


def cmd_score(cfg, ns):
    from .scoring import Scorer, export_heatmap

    ckpt = Path(ns.checkpoint)
    if not ckpt.is_file():
        raise StateError(f"checkpoint not found: {ckpt}")
    query = Path(ns.query)
    if not query.is_file():
        raise FileNotFoundError(f"query image not found: {query}")
    sdir = Path(ns.support)
    if not sdir.is_dir():
        raise FileNotFoundError(f"support folder not found: {sdir}")
    supports = sorted(str(p) for p in sdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if ns.k < 0:
        raise ConfigError("--k must be >= 0")
    if ns.k:
        supports = supports[:ns.k]
    if not supports:
        raise ConfigError(f"no support images in {sdir}")
    scorer = Scorer.from_checkpoint(ckpt, cfg["eval"]["score_reduce"])
    amap = scorer.score_paths([str(query)], supports)[0]
    if ns.heatmap:
        export_heatmap(amap, query, ns.heatmap)
    print(repr(amap.image_score))
    return 0


def main(argv=None) -> int:
    parser, routes = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _effective(ns, routes[ns.command])
        if ns.command == "synth":
            return cmd_synth(cfg)
        if ns.command == "train":
            return cmd_train(cfg, ns)
        if ns.command == "eval":
            return cmd_eval(cfg, ns)
        return cmd_score(cfg, ns)
    except NumericError as err:
        print(f"error: {err}", file=sys.stderr)
        return 4
    except D24FADError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code
    except (FileNotFoundError, PermissionError, IsADirectoryError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except (TypeError, ValueError) as err:
        # bad value types from a config file end up here
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
