"""Shared fixtures.

Every :class:`CertifiedRegion` constructed while the suite runs is recorded so
that the soundness gate can re-check all of them at the end of the session.
Acceptance tests report one line each through ``record_criterion``; the lines
are printed in the terminal summary.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import pytest

from sgr.polynomial import Polynomial
from sgr.region import certify as _certify
from sgr.system import CertificationProblem, ExcludedBlock

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"

REGIONS: list = []
CRITERIA: dict[int, tuple[bool, str, float]] = {}

_orig_post_init = _certify.CertifiedRegion.__post_init__


def _recording_post_init(self):
    _orig_post_init(self)
    REGIONS.append(self)


_certify.CertifiedRegion.__post_init__ = _recording_post_init


def toy_problem(unsafe=(), field=("x2", "-x1 - x2"), W="x1^2 + x2^2") -> CertificationProblem:
    """Two-state closed loop ``y' = v, v' = -y - v`` with ``W = y^2 + v^2`` by default."""
    vf = tuple(Polynomial.parse(f, 2) for f in field)
    blocks = tuple(ExcludedBlock(tuple(Polynomial.parse(w, 2) for w in b), f"unsafe block {k + 1}")
                   for k, b in enumerate(unsafe))
    return CertificationProblem(2, vf, Polynomial.parse(W, 2), unsafe_blocks=blocks, names=("y", "v"),
                                label="toy")


def load_raw(name: str) -> dict:
    return json.loads((SCENARIOS / f"{name}.json").read_text(encoding="utf-8"))


@pytest.fixture(scope="session")
def region_cache():
    """Lazily certified shipped scenarios, shared across test modules."""
    from sgr.pipeline import certify_fixed
    from sgr.scenario import parse_scenario

    cache = {}

    def get(name):
        if name not in cache:
            cache[name] = certify_fixed(parse_scenario(SCENARIOS / f"{name}.json"))
        return cache[name]

    return get


@pytest.fixture
def record_criterion():
    """Store ``(passed, detail, seconds)`` for an acceptance criterion."""
    start = time.perf_counter()

    def record(number: int, passed: bool, detail: str):
        elapsed = time.perf_counter() - start
        CRITERIA[number] = (bool(passed), detail, elapsed)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} ({elapsed:.1f} s) {detail}")

    return record


@pytest.fixture(scope="session")
def rng_seed():
    return 20240611


def pytest_collection_modifyitems(session, config, items):
    # the soundness gate checks every region built by the other tests, so it runs last
    last = [it for it in items if it.get_closest_marker("runs_last")]
    rest = [it for it in items if not it.get_closest_marker("runs_last")]
    items[:] = rest + last


def pytest_configure(config):
    config.addinivalue_line("markers", "runs_last: moved to the end of the session")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        ok, detail, secs = CRITERIA[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'} ({secs:.1f} s) {detail}")


def unique_regions():
    seen = set()
    out = []
    for r in REGIONS:
        if r.problem is None:
            continue
        blocks = tuple(w.to_string() for b in r.problem.excluded_blocks for w in b.polys)
        key = (r.W.to_string(), round(r.c, 12), blocks, tuple(f.to_string() for f in r.problem.vector_field))
        if key not in seen:
            seen.add(key)
            out.append(r)
    return out


def assert_close(a, b, tol=1e-9):
    assert np.max(np.abs(np.asarray(a, float) - np.asarray(b, float))) <= tol
