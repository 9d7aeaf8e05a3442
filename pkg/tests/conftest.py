from __future__ import annotations

import numpy as np
import pytest

from mangrovewatch.raster import GeoTransform, MultispectralScene, RasterGrid

# 10 m UTM zone 40N grid, the native resolution of the visible/NIR bands
T10 = GeoTransform(500_000.0, 2_700_000.0, 10.0, -10.0, "EPSG:32640")


def grid(values, nodata=None, transform=T10) -> RasterGrid:
    return RasterGrid(np.asarray(values), transform, nodata)


def scene(array, names=None, qa=None, timestamp=(2020, 1), scene_id="s", transform=T10, nodata=-9999.0):
    array = np.asarray(array, dtype=np.float64)
    names = names or [f"B{i + 1}" for i in range(array.shape[0])]
    qa_grid = None if qa is None else RasterGrid(np.asarray(qa), transform, None)
    return MultispectralScene.from_array(
        array, transform, names, nodata=nodata, qa=qa_grid, timestamp=timestamp, scene_id=scene_id
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ------------------------------------------------------------ acceptance report
#
# Tests marked ``@pytest.mark.acceptance(n, "title")`` get one PASS/FAIL line
# each in the terminal summary. Extra detail comes from record_property("detail", ...).

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    number, title = marker.args
    detail = dict(rep.user_properties).get("detail", "")
    _ACCEPTANCE[number] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[number]
        line = f"[{status}] criterion {number:2d}: {title}"
        terminalreporter.write_line(f"{line} | {detail}" if detail else line)
