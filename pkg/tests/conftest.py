import json

import numpy as np
import pytest

from scale_then_compress.config import settings
from scale_then_compress.formats import write_nvt1, write_ppm
from scale_then_compress.tensor import Image


@pytest.fixture(autouse=True)
def quiet_progress(monkeypatch):
    monkeypatch.setattr(settings, "show_progress", False, raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(20240131)


@pytest.fixture
def write_jsonl(tmp_path):
    def _write(name, rows):
        path = tmp_path / name
        path.write_text("".join(json.dumps(row) + "\n" for row in rows), encoding="utf-8")
        return path

    return _write


@pytest.fixture
def write_tensor(tmp_path):
    def _write(name, array):
        path = tmp_path / name
        write_nvt1(path, np.asarray(array))
        return path

    return _write


@pytest.fixture
def gray_ppm(tmp_path):
    def _write(name, height, width, value=0.5):
        path = tmp_path / name
        write_ppm(path, Image(np.full((height, width, 3), value)))
        return path

    return _write
