"""Generalized symmetric eigenproblems for the three boundary modes."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    CountExceedsDimension,
    DegenerateBoundaryForm,
    NonDistinctEigenvalue,
    SolverNoConvergence,
)
from .mesh import BoundaryMode, Discretization

DENSE_LIMIT = 2000
GROUP_RTOL = 1e-9
# the value printed for the trace-normalized Robin constant
ASSERTED_LAMBDA_TILDE = 1.0


@dataclass(frozen=True)
class Spectrum:
    """Smallest eigenpairs of A v = lambda M v, M-orthonormal, ascending."""

    mode: BoundaryMode
    values: np.ndarray
    vectors: np.ndarray  # (dim, k), columns over the mode's free dofs
    free: np.ndarray
    residuals: np.ndarray

    @property
    def count(self) -> int:
        return len(self.values)

    @property
    def lambda1(self) -> float:
        return float(self.values[0])

    def groups(self) -> list:
        """Index lists of (numerically) equal eigenvalues, in order."""
        out = [[0]]
        for i in range(1, self.count):
            prev = self.values[out[-1][0]]
            if abs(self.values[i] - prev) <= GROUP_RTOL * max(abs(prev), 1e-300):
                out[-1].append(i)
            else:
                out.append([i])
        return out

    def distinct_values(self) -> np.ndarray:
        return np.array([self.values[g[0]] for g in self.groups()])

    def distinct_index(self, k: int) -> int:
        """1-based distinct-eigenvalue index of the 1-based eigenpair ``k``."""
        for idx, g in enumerate(self.groups(), start=1):
            if k - 1 in g:
                return idx
        raise IndexError(k)

    def to_json(self) -> str:
        rows = []
        for g in self.groups():
            for i in g:
                rows.append({"k": i + 1, "lambda": float(self.values[i]), "multiplicity": len(g)})
        return json.dumps(rows, indent=1)

    def write_vectors(self, path) -> None:
        """Binary dump: 16-byte header (magic, version, dim, count), then
        the eigenvectors as consecutive little-endian f64 blocks."""
        dim, k = self.vectors.shape
        with open(Path(path), "wb") as fh:
            fh.write(struct.pack("<4sIII", b"NCEV", 1, dim, k))
            fh.write(np.asarray(self.vectors.T, dtype="<f8").tobytes())


def read_vectors(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, _ver, dim, k = struct.unpack("<4sIII", raw[:16])
    if magic != b"NCEV":
        raise ValueError(f"{path}: not an eigenvector dump")
    return np.frombuffer(raw[16:], dtype="<f8").reshape(k, dim).T.copy()


def _normalize(vecs: np.ndarray, M) -> np.ndarray:
    out = np.empty_like(vecs)
    for i in range(vecs.shape[1]):
        v = vecs[:, i]
        v = v / np.sqrt(v @ (M @ v))
        j = np.argmax(np.abs(v))
        if v[j] < 0:
            v = -v
        out[:, i] = v
    return out


def _pencil_eigs(A, M, k: int):
    dim = A.shape[0]
    if dim <= DENSE_LIMIT:
        vals, vecs = la.eigh(A.toarray(), M.toarray(), subset_by_index=[0, k - 1])
    else:
        v0 = np.ones(dim) + 1e-3 * np.cos(np.arange(dim))
        try:
            vals, vecs = spla.eigsh(A, k=k, M=M, sigma=0.0, which="LM", v0=v0, tol=0.0)
        except spla.ArpackNoConvergence as exc:
            raise SolverNoConvergence(str(exc)) from exc
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
        # restore M-orthogonality inside clusters
        G = vecs.T @ (M @ vecs)
        L = np.linalg.cholesky(0.5 * (G + G.T))
        vecs = la.solve_triangular(L, vecs.T, lower=True).T
    return np.asarray(vals, dtype=float), np.asarray(vecs, dtype=float)


def solve_eigs(disc: Discretization, mode: BoundaryMode, K: int = 6,
               boundary_scale: float = 1.0) -> Spectrum:
    """The ``K`` smallest eigenpairs for ``mode``.

    Dirichlet works on the interior dofs with the stiffness form, Robin
    uses stiffness plus boundary mass, and Neumann uses the shifted
    operator -Delta + I, whose first eigenvalue is 1.
    """
    ops = disc.operators(mode, boundary_scale)
    if K < 1 or K > ops.dim:
        raise CountExceedsDimension(f"K={K} outside [1, {ops.dim}]")
    vals, vecs = _pencil_eigs(ops.A, ops.M, K)
    vecs = _normalize(vecs, ops.M)
    res = np.array([
        np.linalg.norm(ops.A @ vecs[:, i] - vals[i] * (ops.M @ vecs[:, i]))
        for i in range(K)
    ])
    scale = np.maximum(1.0, np.abs(vals)) * np.sqrt(disc.mesh_size ** -disc.dimension)
    if np.any(res > 1e-6 * scale):
        raise SolverNoConvergence(f"eigen-residuals too large: {res.max():.3e}")
    return Spectrum(mode, vals, vecs, ops.free, res)


def lambda_tilde(disc: Discretization) -> float:
    """Smallest value of (|grad u|^2 + |u|^2_dOmega) / |u|^2_dOmega.

    Interior dofs are eliminated by harmonic extension (Schur complement of
    K + B), leaving a definite pencil on the boundary nodes.
    """
    A = (disc.K + disc.B).tocsr()
    bnd = np.flatnonzero(disc.boundary_mask)
    inn = np.flatnonzero(~disc.boundary_mask)
    Bbb = disc.B[bnd][:, bnd].toarray()
    try:
        np.linalg.cholesky(Bbb)
    except np.linalg.LinAlgError as exc:
        raise DegenerateBoundaryForm("boundary mass is singular on boundary nodes") from exc
    Abb = A[bnd][:, bnd].toarray()
    if len(inn):
        Aib = A[inn][:, bnd].toarray()
        lu = spla.splu(A[inn][:, inn].tocsc())
        S = Abb - Aib.T @ lu.solve(Aib)
    else:
        S = Abb
    S = 0.5 * (S + S.T)
    vals = la.eigh(S, Bbb, eigvals_only=True, subset_by_index=[0, 0])
    return float(vals[0])


@dataclass(frozen=True)
class FountainFrame:
    """Eigenspace splitting used to seed and bound the multiplicity search."""

    j: int
    lam_j: float
    Y: np.ndarray  # eigenvectors with lambda <= lambda_j
    Y_prev: np.ndarray  # eigenvectors with lambda < lambda_j
    M: sp.csr_matrix
    mu: float
    k_tune: float
    rho: float
    xi: float

    @property
    def phi(self) -> np.ndarray:
        """Eigenvector attached to lambda_j (first of its cluster)."""
        return self.Y[:, self.Y_prev.shape[1]]

    def project_z(self, v: np.ndarray) -> np.ndarray:
        """M-orthogonal projection onto Z_j (complement of Y_{j-1})."""
        if self.Y_prev.shape[1] == 0:
            return v.copy()
        return v - self.Y_prev @ (self.Y_prev.T @ (self.M @ v))


def fountain_frame(spec: Spectrum, j: int, mu: float, k_tune: float,
                   M: Optional[sp.csr_matrix] = None) -> FountainFrame:
    """Frame for the 1-based eigen-index ``j`` (ties with j-1 are rejected)."""
    if j < 2:
        raise ValueError("j must be >= 2")
    if k_tune <= 1:
        raise ValueError("k_tune must exceed 1")
    if mu < 0:
        raise ValueError("mu must be non-negative")
    if j > spec.count:
        raise CountExceedsDimension(f"j={j} beyond the {spec.count} computed eigenpairs")
    lam_j = float(spec.values[j - 1])
    lam_prev = float(spec.values[j - 2])
    if abs(lam_j - lam_prev) <= GROUP_RTOL * abs(lam_j):
        raise NonDistinctEigenvalue(f"lambda_{j} = lambda_{j - 1} = {lam_j}")
    groups = spec.groups()
    gidx = spec.distinct_index(j) - 1
    if gidx == len(groups) - 1 and spec.count < len(spec.free):
        # the cluster of lambda_j may continue past the computed range
        raise CountExceedsDimension(f"compute more than {spec.count} eigenpairs to close the cluster of j={j}")
    upto = groups[gidx][-1] + 1
    if M is None:
        M = sp.identity(spec.vectors.shape[0], format="csr")
    return FountainFrame(
        j=j,
        lam_j=lam_j,
        Y=spec.vectors[:, :upto],
        Y_prev=spec.vectors[:, : j - 1],
        M=M,
        mu=float(mu),
        k_tune=float(k_tune),
        rho=float(np.sqrt(mu * lam_j)),
        xi=float(np.sqrt((k_tune - 1.0) / k_tune * mu * lam_j)),
    )
