from __future__ import annotations

import pathlib

import pytest

FIXTURES = pathlib.Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def fixtures_dir() -> pathlib.Path:
    return FIXTURES


@pytest.fixture(scope="session")
def enriched_timemap_text() -> str:
    return (FIXTURES / "enriched_timemap.cdxj").read_text(encoding="utf-8")


@pytest.fixture(scope="session")
def enriched_record_text() -> str:
    return (FIXTURES / "enriched_record.cdxj").read_text(encoding="utf-8")
