"""Linear state-space models ``y(k+1) = A(beta) y(k) + b(beta)`` and their export.

``A(beta) = A0 + beta A1 + beta^2 A2`` and likewise for the forcing vector,
so a model is assembled once and evaluated at any step size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import scipy.sparse as sp


def canonical_csr(mat, shape: tuple[int, int] | None = None) -> sp.csr_matrix:
    """CSR with summed duplicates, no stored zeros and sorted column indices."""
    out = sp.csr_matrix(mat, shape=shape, dtype=np.float64)
    out.sum_duplicates()
    out.eliminate_zeros()
    out.sort_indices()
    return out


def poly_eval(coeffs: Sequence, beta: float):
    """``c0 + beta c1 + beta^2 c2`` for scalars, arrays or sparse matrices."""
    out = coeffs[0]
    scale = 1.0
    for c in coeffs[1:]:
        scale *= beta
        out = out + scale * c
    return out


@dataclass
class OutputFunctional:
    """``out(k) = row . y(k) + constant(beta)``; the constant is quadratic in beta."""

    row: np.ndarray
    constant: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def constant_at(self, beta: float) -> float:
        c0, c1, c2 = self.constant
        return c0 + beta * c1 + beta * beta * c2

    def evaluate(self, y: np.ndarray, beta: float) -> np.ndarray:
        return y @ self.row + self.constant_at(beta)


@dataclass
class StateSpaceModel:
    variables: list
    A0: sp.csr_matrix
    A1: sp.csr_matrix
    A2: sp.csr_matrix
    f0: np.ndarray
    f1: np.ndarray
    f2: np.ndarray
    outputs: dict[str, OutputFunctional] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)
    initial: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.variables)
        for name in ("A0", "A1", "A2"):
            mat = canonical_csr(getattr(self, name), shape=(n, n))
            setattr(self, name, mat)
        for name in ("f0", "f1", "f2"):
            vec = np.asarray(getattr(self, name), dtype=np.float64)
            if vec.shape != (n,):
                raise ValueError(f"{name} has shape {vec.shape}, expected ({n},)")
            setattr(self, name, vec)
        if self.initial is not None:
            self.initial = np.asarray(self.initial, dtype=np.float64)
            if self.initial.shape != (n,):
                raise ValueError("initial state has the wrong dimension")

    @property
    def dim(self) -> int:
        return len(self.variables)

    def transition(self, beta: float) -> sp.csr_matrix:
        return canonical_csr(poly_eval((self.A0, self.A1, self.A2), beta))

    def forcing(self, beta: float) -> np.ndarray:
        return poly_eval((self.f0, self.f1, self.f2), beta)

    def add_output(self, name: str, output: OutputFunctional) -> None:
        row = np.asarray(output.row, dtype=np.float64)
        if row.shape != (self.dim,):
            raise ValueError(f"output {name!r} row has shape {row.shape}, expected ({self.dim},)")
        output.row = row
        output.constant = tuple(float(c) for c in output.constant)
        self.outputs[name] = output

    def index_of(self, label) -> int:
        text = str(label)
        for i, var in enumerate(self.variables):
            if str(var) == text:
                return i
        raise KeyError(text)

    def beta_degree(self) -> tuple[int, int]:
        """Highest beta power present in (A, b)."""
        a = max((d for d, m in enumerate((self.A0, self.A1, self.A2)) if m.nnz), default=0)
        f = max((d for d, v in enumerate((self.f0, self.f1, self.f2)) if np.any(v)), default=0)
        return a, f


def _triplets(mat: sp.csr_matrix) -> list[list]:
    coo = mat.tocoo()
    order = np.lexsort((coo.col, coo.row))
    return [[int(coo.row[i]), int(coo.col[i]), float(coo.data[i])] for i in order]


def model_to_dict(model: StateSpaceModel) -> dict:
    data = {
        "meta": model.meta,
        "variables": [str(v) for v in model.variables],
    }
    for name in ("A0", "A1", "A2"):
        data[name] = _triplets(getattr(model, name))
    for name in ("f0", "f1", "f2"):
        data[name] = [float(x) for x in getattr(model, name)]
    data["outputs"] = {
        name: {
            "row": [[int(i), float(out.row[i])] for i in np.flatnonzero(out.row)],
            "constant": [float(c) for c in out.constant],
        }
        for name, out in sorted(model.outputs.items())
    }
    data["initial"] = None if model.initial is None else [float(x) for x in model.initial]
    return data


def model_from_dict(data: dict) -> StateSpaceModel:
    n = len(data["variables"])

    def mat(trips):
        if not trips:
            return sp.csr_matrix((n, n))
        r, c, v = zip(*trips)
        return sp.csr_matrix((v, (r, c)), shape=(n, n))

    model = StateSpaceModel(
        list(data["variables"]),
        mat(data["A0"]), mat(data["A1"]), mat(data["A2"]),
        data["f0"], data["f1"], data["f2"],
        meta=dict(data["meta"]),
        initial=data.get("initial"),
    )
    for name, out in data["outputs"].items():
        row = np.zeros(n)
        for i, v in out["row"]:
            row[i] = v
        model.add_output(name, OutputFunctional(row, tuple(out["constant"])))
    return model


def save_model(model: StateSpaceModel, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=1)
        fh.write("\n")


def load_model(path: str | Path) -> StateSpaceModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
