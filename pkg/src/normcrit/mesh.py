"""Catalog domains and tensor-grid finite element assembly.

Domains are intervals, rectangles and boxes. The discrete space is the
conforming piecewise-multilinear space (P1 in 1D, Q1 in 2D/3D) on a uniform
tensor grid. Because both the basis and the domain factor over the axes,
every bilinear form is a sum of Kronecker products of the exact 1D element
matrices, which is what product Gauss quadrature would produce anyway.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import (
    CenterOutsideDomain,
    NonPositiveExtent,
    ResolutionTooSmall,
    UnsupportedDimension,
)

_KINDS = {1: "interval", 2: "rectangle", 3: "box"}


@dataclass(frozen=True)
class BoundaryMode:
    """Boundary operator selector (alpha, zeta, gamma).

    Legal combinations: (1,0,0) Dirichlet, (0,1,0) Neumann and (1,1,1)
    Robin with a nonlinear flux term.
    """

    alpha: int
    zeta: int
    gamma: int

    def __post_init__(self):
        if (self.alpha, self.zeta, self.gamma) not in _MODE_NAMES:
            raise ValueError(
                f"illegal boundary mode {(self.alpha, self.zeta, self.gamma)}; "
                "expected (1,0,0), (0,1,0) or (1,1,1)"
            )

    @property
    def name(self) -> str:
        return _MODE_NAMES[(self.alpha, self.zeta, self.gamma)]

    @property
    def is_dirichlet(self) -> bool:
        return self.name == "dirichlet"

    @property
    def is_neumann(self) -> bool:
        return self.name == "neumann"

    @property
    def is_robin(self) -> bool:
        return self.name == "robin"

    @classmethod
    def from_name(cls, name: str) -> "BoundaryMode":
        for key, value in _MODE_NAMES.items():
            if value == name.lower():
                return cls(*key)
        raise ValueError(f"unknown boundary mode {name!r}")

    def __str__(self):
        return self.name


_MODE_NAMES = {(1, 0, 0): "dirichlet", (0, 1, 0): "neumann", (1, 1, 1): "robin"}

DIRICHLET = BoundaryMode(1, 0, 0)
NEUMANN = BoundaryMode(0, 1, 0)
ROBIN = BoundaryMode(1, 1, 1)


@dataclass(frozen=True)
class DomainSpec:
    """Axis-aligned catalog domain given by per-axis ``(lo, hi)`` bounds."""

    bounds: tuple
    star_center: Optional[tuple] = None

    @property
    def dimension(self) -> int:
        return len(self.bounds)

    @property
    def kind(self) -> str:
        return _KINDS.get(self.dimension, "unsupported")

    @property
    def extents(self) -> np.ndarray:
        return np.array([hi - lo for lo, hi in self.bounds], dtype=float)

    @property
    def volume(self) -> float:
        return float(np.prod(self.extents))

    @property
    def boundary_measure(self) -> float:
        """|dOmega|; in 1D the boundary is two unit point atoms."""
        ext = self.extents
        if self.dimension == 1:
            return 2.0
        total = 0.0
        for d in range(self.dimension):
            total += 2.0 * float(np.prod(np.delete(ext, d)))
        return total

    @property
    def centroid(self) -> tuple:
        return tuple(0.5 * (lo + hi) for lo, hi in self.bounds)

    def contains_strictly(self, x) -> bool:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.shape != (self.dimension,):
            return False
        return all(lo < xi < hi for xi, (lo, hi) in zip(x, self.bounds))

    def scaled(self, factor: float) -> "DomainSpec":
        """The dilated domain factor * Omega (dilation about the origin)."""
        center = None
        if self.star_center is not None:
            center = tuple(factor * c for c in self.star_center)
        return DomainSpec(
            tuple((factor * lo, factor * hi) for lo, hi in self.bounds), center
        )

    def key(self) -> str:
        text = repr((self.bounds, self.star_center))
        return hashlib.sha1(text.encode()).hexdigest()[:16]


def Interval(a: float, b: float, star_center=None) -> DomainSpec:
    return DomainSpec(((float(a), float(b)),), star_center)


def Rectangle(ax, bx, ay, by, star_center=None) -> DomainSpec:
    return DomainSpec(((float(ax), float(bx)), (float(ay), float(by))), star_center)


def Box(ax, bx, ay, by, az, bz, star_center=None) -> DomainSpec:
    bounds = ((float(ax), float(bx)), (float(ay), float(by)), (float(az), float(bz)))
    return DomainSpec(bounds, star_center)


def build_domain(spec: DomainSpec) -> DomainSpec:
    """Validate ``spec`` and fill in the default star center (the centroid)."""
    if spec.dimension not in (1, 2, 3):
        raise UnsupportedDimension(f"dimension {spec.dimension} not in {{1, 2, 3}}")
    for lo, hi in spec.bounds:
        if not np.isfinite(lo) or not np.isfinite(hi) or hi - lo <= 0:
            raise NonPositiveExtent(f"extent ({lo}, {hi}) is not strictly positive")
    center = spec.star_center
    if center is None:
        center = spec.centroid
    center = tuple(float(c) for c in np.atleast_1d(center))
    if not DomainSpec(spec.bounds).contains_strictly(center):
        raise CenterOutsideDomain(f"star center {center} is not interior")
    return DomainSpec(tuple(spec.bounds), center)


# ---------------------------------------------------------------------------
# 1D building blocks


def _stiffness_1d(n: int, h: float) -> sp.csr_matrix:
    main = np.full(n + 1, 2.0 / h)
    main[0] = main[-1] = 1.0 / h
    off = np.full(n, -1.0 / h)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr")


def _mass_1d(n: int, h: float) -> sp.csr_matrix:
    main = np.full(n + 1, 4.0 * h / 6.0)
    main[0] = main[-1] = 2.0 * h / 6.0
    off = np.full(n, h / 6.0)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr")


def _end_selector(n: int, side: int) -> sp.csr_matrix:
    """(n+1)x(n+1) matrix with a single 1 at the lo (0) or hi (1) end."""
    i = 0 if side == 0 else n
    return sp.csr_matrix(([1.0], ([i], [i])), shape=(n + 1, n + 1))


def _end_row(n: int, side: int) -> sp.csr_matrix:
    i = 0 if side == 0 else n
    return sp.csr_matrix(([1.0], ([0], [i])), shape=(1, n + 1))


def _kron_all(mats: Sequence) -> sp.csr_matrix:
    return reduce(lambda a, b: sp.kron(a, b, format="csr"), mats).tocsr()


def gauss_1d(n: int, lo: float, h: float, nq: int):
    """Interpolation matrix and weights for nq-point Gauss on every element."""
    xi, wi = np.polynomial.legendre.leggauss(nq)
    t = 0.5 * (xi + 1.0)
    rows, cols, vals = [], [], []
    pts = np.empty(n * nq)
    for e in range(n):
        r = e * nq + np.arange(nq)
        rows += [r, r]
        cols += [np.full(nq, e), np.full(nq, e + 1)]
        vals += [1.0 - t, t]
        pts[r] = lo + h * (e + t)
    Q = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n * nq, n + 1),
    )
    w = np.tile(0.5 * h * wi, n)
    return Q, w, pts


@dataclass(frozen=True)
class Face:
    axis: int
    side: int  # 0 = lo, 1 = hi
    nodes: np.ndarray
    mass: sp.csr_matrix  # face mass matrix over ``nodes``


@dataclass
class Discretization:
    """Assembled tensor-grid discretization; treat as immutable."""

    domain: DomainSpec
    n: int
    axes: list
    nodes: np.ndarray
    elements: np.ndarray
    K: sp.csr_matrix
    M: sp.csr_matrix
    B: sp.csr_matrix
    P: np.ndarray
    h: tuple
    boundary_mask: np.ndarray
    faces: list = field(default_factory=list)

    @property
    def dimension(self) -> int:
        return self.domain.dimension

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def interior_mask(self) -> np.ndarray:
        return ~self.boundary_mask

    @property
    def mesh_size(self) -> float:
        return float(max(self.h))

    def free_dofs(self, mode: BoundaryMode) -> np.ndarray:
        if mode.is_dirichlet:
            return np.flatnonzero(~self.boundary_mask)
        return np.arange(self.n_nodes)

    def operators(self, mode: BoundaryMode, boundary_scale: float = 1.0) -> "Operators":
        """Reduced matrices for ``mode`` on its free dofs."""
        free = self.free_dofs(mode)
        A = self.K
        if mode.is_robin:
            A = A + boundary_scale * self.B
        if mode.is_neumann:
            A = A + self.M
        A = A.tocsr()[free][:, free].tocsr()
        M = self.M[free][:, free].tocsr()
        ones = np.ones(self.n_nodes)
        w = (self.M @ ones)[free]
        b = None
        if mode.is_robin:
            b = boundary_scale * (self.B @ ones)[free]
        return Operators(mode, free, A, M, w, b, self.n_nodes, 1.0 if mode.is_neumann else 0.0)

    def expand(self, u_free: np.ndarray, mode: BoundaryMode) -> np.ndarray:
        full = np.zeros(self.n_nodes)
        full[self.free_dofs(mode)] = u_free
        return full

    def quadrature(self, nq: int = 4):
        """(Q, w): values at interior Gauss points are ``Q @ u``, weights ``w``."""
        Qs, ws = [], []
        for (lo, _hi), h in zip(self.domain.bounds, self.h):
            Q, w, _ = gauss_1d(self.n, lo, h, nq)
            Qs.append(Q)
            ws.append(w)
        return _kron_all(Qs), reduce(np.kron, ws)

    def boundary_quadrature(self, nq: int = 4):
        """(Q, w) for Gauss quadrature over the whole boundary."""
        blocks, weights = [], []
        for axis in range(self.dimension):
            for side in (0, 1):
                Qs, ws = [], []
                for d, ((lo, _hi), h) in enumerate(zip(self.domain.bounds, self.h)):
                    if d == axis:
                        Qs.append(_end_row(self.n, side))
                        ws.append(np.ones(1))
                    else:
                        Q, w, _ = gauss_1d(self.n, lo, h, nq)
                        Qs.append(Q)
                        ws.append(w)
                blocks.append(_kron_all(Qs))
                weights.append(reduce(np.kron, ws))
        return sp.vstack(blocks).tocsr(), np.concatenate(weights)


@dataclass(frozen=True)
class Operators:
    """Mode-specific reduced system: quadratic form ``A``, mass ``M``,
    lumped interior weights ``w`` and lumped boundary weights ``b``."""

    mode: BoundaryMode
    free: np.ndarray
    A: sp.csr_matrix
    M: sp.csr_matrix
    w: np.ndarray
    b: Optional[np.ndarray]
    n_nodes: int
    builtin_shift: float  # 1 for the shifted Neumann operator -Delta + I

    @property
    def dim(self) -> int:
        return len(self.free)


def _grid_nodes(axes):
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def _grid_elements(n: int, dim: int) -> np.ndarray:
    idx = np.arange((n + 1) ** dim).reshape((n + 1,) * dim)
    corners = []
    for offs in np.ndindex(*(2,) * dim):
        sl = tuple(slice(o, o + n) for o in offs)
        corners.append(idx[sl].ravel())
    return np.column_stack(corners)


def _faces(domain: DomainSpec, n: int, m1d: list) -> list:
    dim = domain.dimension
    idx = np.arange((n + 1) ** dim).reshape((n + 1,) * dim)
    faces = []
    for axis in range(dim):
        for side in (0, 1):
            sl = [slice(None)] * dim
            sl[axis] = 0 if side == 0 else n
            nodes = idx[tuple(sl)].ravel()
            others = [m1d[d] for d in range(dim) if d != axis]
            mass = _kron_all(others) if others else sp.csr_matrix(np.ones((1, 1)))
            faces.append(Face(axis, side, nodes, mass))
    return faces


def pohozaev_weights(disc: Discretization, x0) -> np.ndarray:
    """Weights P with P.v ~ integral over dOmega of v (x - x0).n.

    On a face normal to axis d, (x - x0).n is the constant distance from x0
    to that face, so P is a distance-weighted boundary lumping.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if not disc.domain.contains_strictly(x0):
        raise CenterOutsideDomain(f"x0={tuple(x0)} is not interior to the domain")
    P = np.zeros(disc.n_nodes)
    for face in disc.faces:
        lo, hi = disc.domain.bounds[face.axis]
        dist = (x0[face.axis] - lo) if face.side == 0 else (hi - x0[face.axis])
        P[face.nodes] += dist * (face.mass @ np.ones(len(face.nodes)))
    return P


def face_distances(disc: Discretization, x0) -> list:
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    out = []
    for face in disc.faces:
        lo, hi = disc.domain.bounds[face.axis]
        out.append((x0[face.axis] - lo) if face.side == 0 else (hi - x0[face.axis]))
    return out


def assemble(domain: DomainSpec, n_per_axis: int, cache_dir=None) -> Discretization:
    """Assemble K, M, B and the Pohozaev weights on a uniform tensor grid."""
    n = int(n_per_axis)
    if n < 4:
        raise ResolutionTooSmall(f"n_per_axis={n} < 4")
    domain = build_domain(domain)
    if cache_dir is not None:
        path = cache_path(cache_dir, domain, n)
        if path.exists():
            return load_discretization(path, domain)

    dim = domain.dimension
    axes, hs, k1d, m1d = [], [], [], []
    for lo, hi in domain.bounds:
        h = (hi - lo) / n
        axes.append(np.linspace(lo, hi, n + 1))
        hs.append(h)
        k1d.append(_stiffness_1d(n, h))
        m1d.append(_mass_1d(n, h))

    K = None
    B = None
    for d in range(dim):
        kterm = _kron_all([k1d[j] if j == d else m1d[j] for j in range(dim)])
        ends = _end_selector(n, 0) + _end_selector(n, 1)
        bterm = _kron_all([ends if j == d else m1d[j] for j in range(dim)])
        K = kterm if K is None else K + kterm
        B = bterm if B is None else B + bterm
    M = _kron_all(m1d)

    nodes = _grid_nodes(axes)
    boundary = np.zeros(nodes.shape[0], dtype=bool)
    for d, (lo, hi) in enumerate(domain.bounds):
        boundary |= np.isclose(nodes[:, d], lo) | np.isclose(nodes[:, d], hi)

    disc = Discretization(
        domain=domain,
        n=n,
        axes=axes,
        nodes=nodes,
        elements=_grid_elements(n, dim),
        K=K.tocsr(),
        M=M.tocsr(),
        B=B.tocsr(),
        P=np.zeros(nodes.shape[0]),
        h=tuple(hs),
        boundary_mask=boundary,
        faces=_faces(domain, n, m1d),
    )
    disc.P = pohozaev_weights(disc, domain.star_center)
    if cache_dir is not None:
        save_discretization(cache_path(cache_dir, domain, n), disc)
    return disc


# ---------------------------------------------------------------------------
# binary cache: 16-byte header (magic, version, N, n) then little-endian f64

_MAGIC = b"NCDC"
_VERSION = 1


def cache_path(cache_dir, domain: DomainSpec, n: int) -> Path:
    return Path(cache_dir) / f"disc_{domain.key()}_{n}.bin"


def _csr_blocks(A: sp.csr_matrix):
    A = A.tocsr()
    return [np.array([A.nnz], dtype=float), A.data, A.indices.astype(float), A.indptr.astype(float)]


def save_discretization(path, disc: Discretization) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blocks = [np.asarray(disc.domain.bounds, dtype=float).ravel(), np.asarray(disc.domain.star_center, dtype=float)]
    for A in (disc.K, disc.M, disc.B):
        blocks += _csr_blocks(A)
    blocks.append(disc.P)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", _MAGIC, _VERSION, disc.dimension, disc.n))
        for blk in blocks:
            fh.write(np.asarray(blk, dtype="<f8").tobytes())


def load_discretization(path, domain: Optional[DomainSpec] = None) -> Discretization:
    raw = Path(path).read_bytes()
    magic, version, dim, n = struct.unpack("<4sIII", raw[:16])
    if magic != _MAGIC or version != _VERSION:
        raise ValueError(f"{path}: not a discretization cache file")
    data = np.frombuffer(raw[16:], dtype="<f8")
    pos = 0

    def take(k):
        nonlocal pos
        out = data[pos:pos + k]
        pos += k
        return out

    bounds = take(2 * dim).reshape(dim, 2)
    center = tuple(take(dim))
    size = (n + 1) ** dim
    mats = []
    for _ in range(3):
        nnz = int(take(1)[0])
        vals = take(nnz).copy()
        ind = take(nnz).astype(np.int64)
        ptr = take(size + 1).astype(np.int64)
        mats.append(sp.csr_matrix((vals, ind, ptr), shape=(size, size)))
    P = take(size).copy()
    if domain is None:
        domain = DomainSpec(tuple(tuple(b) for b in bounds), center)
    axes = [np.linspace(lo, hi, n + 1) for lo, hi in domain.bounds]
    hs = tuple((hi - lo) / n for lo, hi in domain.bounds)
    nodes = _grid_nodes(axes)
    boundary = np.zeros(size, dtype=bool)
    for d, (lo, hi) in enumerate(domain.bounds):
        boundary |= np.isclose(nodes[:, d], lo) | np.isclose(nodes[:, d], hi)
    m1d = [_mass_1d(n, h) for h in hs]
    return Discretization(
        domain=domain, n=n, axes=axes, nodes=nodes, elements=_grid_elements(n, dim),
        K=mats[0], M=mats[1], B=mats[2], P=P, h=hs, boundary_mask=boundary,
        faces=_faces(domain, n, m1d),
    )
