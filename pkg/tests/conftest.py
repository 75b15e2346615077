from __future__ import annotations

import numpy as np
import pytest

from signsynth.core import PATCH_SIZE, SignIcon


def random_icon(rng: np.random.Generator, class_id: int = 0, h: int | None = None, w: int | None = None,
                alpha: str = "random") -> SignIcon:
    h = h or int(rng.integers(8, 80))
    w = w or int(rng.integers(8, 80))
    px = rng.random((h, w, 4)).astype(np.float32)
    if alpha == "binary":
        px[..., 3] = (px[..., 3] > 0.5).astype(np.float32)
    elif alpha == "opaque":
        px[..., 3] = 1.0
    elif alpha == "clear":
        px[..., 3] = 0.0
    return SignIcon(class_id, px)


def random_pixels(rng: np.random.Generator, size: int = PATCH_SIZE) -> np.ndarray:
    return rng.random((size, size, 3)).astype(np.float32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance summary

_VERDICTS: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py::test_criterion_" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        detail = dict(report.user_properties).get("detail", "")
        _VERDICTS[name] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_VERDICTS, key=lambda n: int(n.split("_")[2])):
        verdict, detail = _VERDICTS[name]
        terminalreporter.write_line(f"{verdict} {name}: {detail}")
