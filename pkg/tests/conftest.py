from __future__ import annotations

import pytest

from ovmap import suites
from ovmap.config import PipelineConfig
from ovmap.scene_io import load_scene
from ovmap.synthetic import generate, write_generated


@pytest.fixture(scope="session")
def scene_dir(tmp_path_factory):
    """Render a suite scene once per session: ``scene_dir(name, spec) -> (path, GeneratedScene)``."""
    cache: dict[str, tuple] = {}

    def make(name: str, spec=None):
        if name not in cache:
            if spec is None:
                spec = suites.BUILTIN[name]()
            gen = generate(spec)
            path = tmp_path_factory.mktemp(name.replace(":", "_"))
            write_generated(gen, path)
            cache[name] = (path, gen)
        return cache[name]

    return make


@pytest.fixture(scope="session")
def one_box(scene_dir):
    path, gen = scene_dir("one-box")
    return load_scene(path, PipelineConfig()), gen, path


@pytest.fixture(scope="session")
def chair_table(scene_dir):
    return scene_dir("chair-table")


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, in criterion order."""
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {detail}")
