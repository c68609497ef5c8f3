import sys

import pytest
import torch

from d24fad.episodes import build_leave_one_out, load_benchmark
from d24fad.synth import default_benchmark, generate_benchmark
from d24fad.teacher import TeacherSpec, load_teacher
from d24fad.training import TrainConfig, train
from d24fad.losses import LossConfig


def rand_pyramid(shapes, gen, batch=None):
    """Random float64 levels; with ``batch`` each level gets a leading batch axis."""
    lead = () if batch is None else (batch,)
    return [torch.randn(*lead, *s, generator=gen, dtype=torch.float64) for s in shapes]


def nested(t):
    return t.tolist()


@pytest.fixture(scope="session")
def teacher64():
    return load_teacher(TeacherSpec(), torch.float64)


@pytest.fixture(scope="session")
def teacher32():
    return load_teacher(TeacherSpec())


@pytest.fixture(scope="session")
def small_bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    generate_benchmark(root, default_benchmark(seed=3, train_normal=12, test_normal=6, test_abnormal=6))
    return root


@pytest.fixture(scope="session")
def small_split(small_bench):
    return build_leave_one_out(load_benchmark(small_bench), "rings")


@pytest.fixture(scope="session")
def small_run(small_split, teacher32, tmp_path_factory):
    tr, te = small_split
    out = tmp_path_factory.mktemp("run")
    cfg = TrainConfig(epochs=2, batch_size=4, k=2, seed=0, loss=LossConfig())
    state, ckpt, manifest = train(cfg, tr, teacher32, out_dir=out, test_task=te)
    return state, ckpt, manifest


def fd_check(fn, tensor, coords, step=1e-5):
    """Central differences of scalar ``fn()`` w.r.t. ``tensor`` at flat ``coords``.

    Returns the worst relative error against ``tensor.grad`` (which the caller
    fills by backward beforehand). Relative error uses max(|a|, |b|, 1e-8).
    """
    flat = tensor.data.view(-1)
    grad = tensor.grad.reshape(-1)
    worst = 0.0
    for c in coords:
        orig = float(flat[c])
        flat[c] = orig + step
        up = float(fn())
        flat[c] = orig - step
        down = float(fn())
        flat[c] = orig
        num = (up - down) / (2 * step)
        ana = float(grad[c])
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-8))
    return worst


def pytest_terminal_summary(terminalreporter):
    acc = sys.modules.get("test_acceptance")
    if acc is None or not acc.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acc.RESULTS):
        terminalreporter.write_line(acc.RESULTS[n])
