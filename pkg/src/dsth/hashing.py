"""Linear out-of-sample hash functions."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import read_matrix, write_matrix
from .linalg import solve_spd


@dataclass(frozen=True)
class HashModel:
    projection: np.ndarray  # d_x x L
    code_length: int
    eta: float

    def __post_init__(self):
        if self.code_length < 2:
            raise ValueError("code_length must be >= 2")
        if self.projection.shape[1] != self.code_length:
            raise ValueError("projection width does not match code_length")
        if not np.all(np.isfinite(self.projection)):
            raise ValueError("projection contains non-finite values")

    @property
    def dim(self) -> int:
        return self.projection.shape[0]


def learn_projection(x, z, eta: float = 100.0) -> HashModel:
    """Ridge regression ``H = (X X^T + eta I)^{-1} X Z^T`` from features to +-1 codes."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.shape[1] != z.shape[1]:
        raise ValueError(f"sample counts differ: X has {x.shape[1]}, Z has {z.shape[1]}")
    if eta <= 0:
        raise ValueError("eta must be positive")
    gram = x @ x.T
    gram[np.diag_indices_from(gram)] += eta
    h = solve_spd(gram, x @ z.T)
    return HashModel(projection=h, code_length=z.shape[0], eta=float(eta))


def encode(model: HashModel, v) -> np.ndarray:
    """Bits of one vector (length L) or of every column of a ``d_x x n`` matrix.

    Bit ``l`` is 1 iff ``(H^T v)_l >= 0``.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != model.dim:
        raise ValueError(f"expected vectors of dimension {model.dim}, got {v.shape[0]}")
    return (model.projection.T @ v >= 0).astype(np.uint8)


def save_hash_model(model: HashModel, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_matrix(model.projection, d / "projection.dmat")
    meta = {"code_length": model.code_length, "eta": model.eta}
    (d / "projection.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_hash_model(directory) -> HashModel:
    d = Path(directory)
    meta = json.loads((d / "projection.json").read_text())
    h = np.array(read_matrix(d / "projection.dmat"))
    return HashModel(projection=h, code_length=int(meta["code_length"]), eta=float(meta["eta"]))
