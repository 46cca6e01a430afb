from __future__ import annotations

import json
from typing import Annotated, Any

import numpy as np
from numpy.typing import NDArray
from pydantic import AfterValidator
from pydantic import BaseModel as B_Model

FloatArray = NDArray[np.float64]


class BaseModel(B_Model):
    """BaseModel+dict duck typing"""

    def __str__(self) -> str:
        return json.dumps(self.model_dump(mode="json"), ensure_ascii=True)

    def __repr__(self) -> str:
        return self.__str__()

    def __getitem__(self, key: str) -> Any:
        return self.model_dump()[key]


def _check_rectangular(value: list[list[float]]) -> list[list[float]]:
    if not value or not value[0]:
        raise ValueError("matrix must have at least one row and one column")
    width = len(value[0])
    if any(len(row) != width for row in value):
        raise ValueError("matrix rows must all have the same length")
    if not np.all(np.isfinite(np.asarray(value, dtype=float))):
        raise ValueError("matrix entries must be finite")
    return value


def _check_vector(value: list[float]) -> list[float]:
    if not value:
        raise ValueError("vector must not be empty")
    if not np.all(np.isfinite(np.asarray(value, dtype=float))):
        raise ValueError("vector entries must be finite")
    return value


MatrixField = Annotated[list[list[float]], AfterValidator(_check_rectangular)]
"""Nested-list matrix as it appears in JSON files"""
VectorField = Annotated[list[float], AfterValidator(_check_vector)]


def as_vector(value: Any, name: str = "vector") -> FloatArray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 2 and 1 in arr.shape:
        arr = arr.reshape(-1)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    return arr


def as_matrix(value: Any, name: str = "matrix") -> FloatArray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be two-dimensional, got shape {arr.shape}")
    return arr


def is_symmetric_psd(matrix: FloatArray, rtol: float = 1e-10) -> bool:
    """Check symmetry and positive semidefiniteness relative to the matrix scale."""
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        return False
    scale = max(float(np.max(np.abs(matrix), initial=0.0)), 1.0)
    if np.max(np.abs(matrix - matrix.T), initial=0.0) > rtol * scale:
        return False
    eigvals = np.linalg.eigvalsh(0.5 * (matrix + matrix.T))
    return bool(eigvals.min() >= -rtol * scale)
