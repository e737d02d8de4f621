"""Acceptance matrix: runs ``eval-suite`` twice and checks every criterion."""

import json

import pytest

from conftest import acceptance_lines
from mergelock.cli import main

SEED = 20240501
CRITERIA = range(1, 12)


@pytest.fixture(scope="module")
def runs(tmp_path_factory, request):
    dirs = [tmp_path_factory.mktemp(f"suite{i}") for i in range(2)]
    codes = [main(["eval-suite", "--seed", str(SEED), "--out", str(d)]) for d in dirs]
    blobs = [(d / "summary.json").read_bytes() for d in dirs]
    timings = [json.loads((d / "timings.json").read_text()) for d in dirs]
    summary = json.loads(blobs[0])
    results = {c["number"]: c for c in summary["criteria"]}
    results[1]["details"]["seconds"] = timings[0]["1+2"]
    results[11] = {
        "name": "eval-suite determinism",
        "passed": blobs[0] == blobs[1],
        "details": {"bytes": len(blobs[0])},
    }
    results[1]["passed"] = results[1]["passed"] and timings[0]["1+2"] < 60.0
    lines = []
    for n in CRITERIA:
        r = results[n]
        lines.append(f"[{'PASS' if r['passed'] else 'FAIL'}] criterion {n}: {r['name']} {json.dumps(r['details'], sort_keys=True)}")
    print("\n" + "\n".join(lines))
    request.config.stash[acceptance_lines] = lines
    return {"codes": codes, "results": results}


@pytest.mark.parametrize("number", CRITERIA)
def test_criterion(runs, number):
    r = runs["results"][number]
    assert r["passed"], f"criterion {number} ({r['name']}) failed: {r['details']}"


def test_eval_suite_exit_code(runs):
    assert runs["codes"] == [0, 0]
