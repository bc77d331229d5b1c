import json

import numpy as np
import pytest
from PIL import Image

TOY_POINTS = [
    [[10.0, 12.0], [40.5, 30.0]],
    [],
    [[63.0, 47.0]],
]
TOY_SIZE = (64, 48)  # (width, height)


def write_toy(root, points=TOY_POINTS, size=TOY_SIZE, name="cam0", roi=None):
    """Three-frame canonical-layout sequence with hand-authored heads."""
    d = root / name
    (d / "frames").mkdir(parents=True)
    w, h = size
    rng = np.random.default_rng(0)
    with open(d / "annotations.jsonl", "w") as fh:
        for i, pts in enumerate(points):
            fname = f"{i:06d}.png"
            Image.fromarray(rng.integers(0, 256, (h, w, 3), dtype=np.uint8)).save(d / "frames" / fname)
            fh.write(json.dumps({"frame": fname, "points": pts}) + "\n")
    if roi is not None:
        Image.fromarray(roi.astype(np.uint8) * 255).save(d / "roi.png")
    return d


@pytest.fixture
def toy_root(tmp_path):
    root = tmp_path / "toy"
    write_toy(root)
    return root


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion
# ---------------------------------------------------------------------------

_ACCEPTANCE: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    entry = _ACCEPTANCE.setdefault(n, {"title": title, "ok": True, "notes": []})
    if rep.failed:
        entry["ok"] = False
    if rep.when == "call":
        entry["notes"] += [str(v) for k, v in item.user_properties if k == "measured"]


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        e = _ACCEPTANCE[n]
        notes = "; ".join(e["notes"])
        tr.write_line(f"criterion {n:2d} {'PASS' if e['ok'] else 'FAIL'}  {e['title']}" + (f"  [{notes}]" if notes else ""))
