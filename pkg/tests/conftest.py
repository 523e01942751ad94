"""Shared fixtures and helpers."""

from __future__ import annotations

import numpy as np
import pytest

from hiocc.voxel_grid import GridSpec, SemanticGrid


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def random_grid(
    rng: np.random.Generator,
    dims=(8, 8, 4),
    num_classes: int = 4,
    invalid_frac: float = 0.2,
    voxel_size: float = 0.2,
) -> SemanticGrid:
    spec = GridSpec(dims=dims, voxel_size=voxel_size)
    labels = rng.integers(0, num_classes, size=dims).astype(np.int32)
    valid = rng.random(dims) >= invalid_frac
    return SemanticGrid(spec=spec, labels=labels, num_classes=num_classes, valid=valid)
