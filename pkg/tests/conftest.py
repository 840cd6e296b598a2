import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from helpers import SAMPLES  # noqa: E402


@pytest.fixture
def sample_infra_text():
    return (SAMPLES / "infra.fl").read_text(encoding="utf-8")


@pytest.fixture
def sample_pipeline_text():
    return (SAMPLES / "pipeline.fl").read_text(encoding="utf-8")
