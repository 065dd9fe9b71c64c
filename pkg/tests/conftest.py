import json
import sys
from pathlib import Path

import pytest

TESTS = Path(__file__).parent
DATA = TESTS / "data"
sys.path.insert(0, str(TESTS))


def write_jsonl(path, records):
    path = Path(path)
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


@pytest.fixture
def golden():
    recs = [json.loads(l) for l in (DATA / "golden_fixture.jsonl").read_text().splitlines()]
    expected = json.loads((DATA / "golden_metrics.json").read_text())
    return recs, expected
