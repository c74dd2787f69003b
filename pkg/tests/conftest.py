import dataclasses
import json
import pathlib

import pytest

from sensorlqg import CostCache, load_config
from sensorlqg.model import SystemSpec, effort_mapping

REPO = pathlib.Path(__file__).resolve().parent.parent
PAPER_CONFIG = REPO / "configs" / "paper-2d.json"


def with_horizon(spec: SystemSpec, horizon: int) -> SystemSpec:
    return dataclasses.replace(spec, N=horizon)


def write_config(path: pathlib.Path, *, N: int = 8, Cs=None, mapping_kind="reciprocal") -> pathlib.Path:
    """Write a small 2-D config variant for CLI-level tests."""
    doc = {
        "A": [[0.7, 0.0], [0.7, 0.7]],
        "B": [[1.0], [0.0]],
        "Cr": [[1.0, 0.0]],
        "Cs": Cs if Cs is not None else [[0.0, 1.0]],
        "SigmaX0": [[1.0, 0.0], [0.0, 1.0]],
        "SigmaW": [[1.0, 0.0], [0.0, 1.0]],
        "SigmaVr": [[1.0]],
        "Q": [[1.0, 0.0], [0.0, 1.0]],
        "R": [[1.0]],
        "N": N,
        "effort_mapping": {"kind": mapping_kind, "params": {}},
    }
    path.write_text(json.dumps(doc, indent=1))
    return path


@pytest.fixture(scope="session")
def paper():
    spec, mapping = load_config(PAPER_CONFIG)
    return spec, mapping


@pytest.fixture(scope="session")
def paper_cache(paper):
    spec, mapping = paper
    return CostCache(spec, mapping)


@pytest.fixture(scope="session")
def paper_cache_n50(paper):
    spec, mapping = paper
    return CostCache(with_horizon(spec, 50), mapping)


@pytest.fixture(scope="session")
def cs_zero(paper):
    """Paper system with the strategic channel wired to nothing."""
    spec, mapping = paper
    return dataclasses.replace(spec, Cs=[[0.0, 0.0]]), mapping


@pytest.fixture(scope="session")
def scalar_spec():
    """Hand-checkable scalar system: A=B=C=Q=R=1, unit covariances."""
    spec = SystemSpec(
        A=[[1.0]], B=[[1.0]], Cr=[], Cs=[[1.0]], SigmaX0=[[1.0]],
        SigmaW=[[1.0]], SigmaVr=[], Q=[[1.0]], R=[[1.0]], N=1,
    )
    return spec, effort_mapping("reciprocal")
