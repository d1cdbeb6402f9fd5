import json
import random
import string
from pathlib import Path

import pytest

from qlforge.extract import FixtureBackend, dedupe, extract_apis, filter_risky
from qlforge.gateway import LlmResponse, MockLlmClient, MockScript
from qlforge.pipeline import PipelineConfig
from qlforge.records import SourceLocation, make_record

FIXTURES = Path(__file__).resolve().parents[1] / "fixtures"


@pytest.fixture(scope="session")
def fixture_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def corpus_records():
    """The deduplicated, filtered records of the bundled demo project."""
    raw = extract_apis(FIXTURES / "demo_project", FixtureBackend())
    return dedupe(filter_risky(raw))


@pytest.fixture
def run_config(tmp_path):
    """Factory for a pipeline config rooted at the bundled fixture.

    Keyword overrides replace top-level config keys; out_dir always points
    into the test's tmp directory.
    """

    def make(out_name: str = "run", **overrides) -> PipelineConfig:
        data = json.loads((FIXTURES / "pipeline_config.json").read_text(encoding="utf-8"))
        data["out_dir"] = str(tmp_path / out_name)
        data.update(overrides)
        return PipelineConfig.from_dict(data, base_dir=FIXTURES)

    return make


def synthetic_records(count: int, rng: random.Random):
    """Plausible-looking records with varied snippet sizes, deterministic per rng."""
    records = []
    seen = set()
    while len(records) < count:
        package = "com." + "".join(rng.choices(string.ascii_lowercase, k=5))
        type_name = "".join(rng.choices(string.ascii_uppercase, k=1)) + "".join(
            rng.choices(string.ascii_lowercase, k=7)
        )
        method = "".join(rng.choices(string.ascii_lowercase, k=rng.randint(3, 12)))
        params = [(f"arg{i}", rng.choice(["String", "int", "Object"])) for i in range(rng.randint(0, 4))]
        key = (package, type_name, method, tuple(t for _, t in params))
        if key in seen:
            continue
        seen.add(key)
        snippet = "\n".join(
            "x = y.z(%d);" % line for line in range(rng.randint(1, 18))
        )
        records.append(
            make_record(
                package=package,
                type_name=type_name,
                method=method,
                params=params,
                return_type=rng.choice(["void", "String", "unknown"]),
                annotations=["Audited"] if rng.random() < 0.2 else [],
                snippet=snippet,
                first_seen=SourceLocation(f"src/{type_name}.java", rng.randint(1, 400)),
            )
        )
    return records


class CountingClient:
    """Wraps a client and tallies calls per stage."""

    def __init__(self, inner):
        self.inner = inner
        self.calls: list[str] = []

    def send(self, request):
        self.calls.append(request.stage)
        return self.inner.send(request)

    def count(self, stage: str) -> int:
        return sum(1 for s in self.calls if s == stage)


def scripted_client(entries, default="") -> MockLlmClient:
    """MockLlmClient from inline entry dicts (same shape as the JSONL lines)."""
    from qlforge.gateway import MockEntry

    return MockLlmClient(
        MockScript(
            [
                MockEntry(
                    stage=e.get("stage"),
                    contains=e.get("contains"),
                    response=e.get("response", ""),
                    once=bool(e.get("once", False)),
                )
                for e in entries
            ],
            default,
        )
    )


class StaticClient:
    """Always answers with the same text; counts calls."""

    def __init__(self, text: str):
        self.text = text
        self.calls = 0

    def send(self, request):
        self.calls += 1
        return LlmResponse(text=self.text, finish_reason="stop", usage={}, latency_s=0.0)
