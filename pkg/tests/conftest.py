from __future__ import annotations

import pytest
import torch
from hypothesis import HealthCheck, settings

from nardistill.distill import DistillConfig, distill
from nardistill.student import init_student_from_teacher
from nardistill.teacher import ModelConfig, Teacher, TeacherTrainConfig, train_teacher

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

torch.set_num_threads(1)


def small_cfg(kind: str = "TSP", seed: int = 0) -> ModelConfig:
    return ModelConfig(kind=kind, d_h=16, heads=2, layers=1, ff_dim=32, seed=seed)


@pytest.fixture(scope="session")
def tiny_models():
    """Briefly trained TSP-10 / CVRP-10 teachers and their students (kind -> (teacher, student))."""
    out = {}
    for kind in ("TSP", "CVRP"):
        cfg = TeacherTrainConfig(n=10, kind=kind, epochs=2, batches_per_epoch=15, batch_size=32,
                                 lr=1e-3, seed=5, eval_size=32, model=small_cfg(kind))
        teacher = train_teacher(cfg).model
        dcfg = DistillConfig(n=10, epochs=2, batches_per_epoch=15, batch_size=32, lr=1e-3, seed=5,
                             probe_size=32)
        student = distill(teacher, dcfg).student
        out[kind] = (teacher.eval(), student.eval())
    return out


@pytest.fixture
def untrained():
    def make(kind="TSP", seed=0):
        teacher = Teacher(small_cfg(kind, seed))
        return teacher, init_student_from_teacher(teacher, seed=seed)
    return make


def _builder():
    import importlib.util
    from pathlib import Path

    path = Path(__file__).resolve().parent.parent / "scripts" / "build_artifacts.py"
    spec = importlib.util.spec_from_file_location("build_artifacts", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


@pytest.fixture(scope="session")
def artifact():
    """Loader for the trained models in ``artifacts/``; missing ones are trained first."""
    from nardistill.harness import load_model

    builder = _builder()
    cache = {}

    def get(name):
        if name not in cache:
            path = builder.ROOT / f"{name}.ckpt"
            if not path.exists():
                if name in builder.STUDENTS:
                    get(builder.STUDENTS[name][0])
                builder.build(name)
            cache[name] = load_model(path).eval()
        return cache[name]

    get.manifest = lambda name: _manifest(builder.ROOT / f"{name}.ckpt")
    return get


def _manifest(path):
    from nardistill.diffmath import load_checkpoint

    return load_checkpoint(path)[0]


# acceptance summary ----------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and not detail:
        detail = str(rep.longrepr).strip().splitlines()[-1][:200]
    _CRITERIA[marker.args[0]] = ("PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        status, detail = _CRITERIA[k]
        terminalreporter.write_line(f"[{status}] criterion {k}: {detail}")
