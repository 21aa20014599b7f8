"""Nonlinearities, the barrier penalty and the penalized energy.

The interior potential term is integrated with nodal (lumped) quadrature,
so with w = M 1 the discrete energy reads

    E_{r,mu}(u) = 1/2 u'Au - w.F(u) - b.G(u) - f_r(u'Mu / mu)

and its gradient and Hessian are exact derivatives of that expression.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import InvalidNonlinearity, MassAtOrAboveMu, SOutOfRange
from .mesh import BoundaryMode, Discretization, Operators


def critical_exponent(N: int) -> float:
    """Sobolev exponent 2* (infinite for N <= 2)."""
    return math.inf if N <= 2 else 2.0 * N / (N - 2)


def trace_exponent(N: int) -> float:
    """Trace exponent 2(N-1)/(N-2) (infinite for N <= 2)."""
    return math.inf if N <= 2 else 2.0 * (N - 1) / (N - 2)


# ---------------------------------------------------------------------------
# nonlinearity


@dataclass(frozen=True)
class Certificate:
    """Growth bound |f(t)| <= K2 |t| + Kp |t|^(p-1) and AR exponent q."""

    K2: float
    Kp: float
    p: float
    q: float
    verified: bool

    def as_dict(self) -> dict:
        return {"K2": self.K2, "Kp": self.Kp, "p": self.p, "q": self.q, "verified": self.verified}


@dataclass(frozen=True)
class NonlinearitySpec:
    """Power sum f(t) = sum a_i |t|^(p_i - 2) t.

    ``K2``/``Kp`` override the automatic growth certificate; an override is
    still sample-checked and reported as unverified if it fails.
    """

    terms: tuple
    role: str = "interior"
    odd: bool = True
    K2: Optional[float] = None
    Kp: Optional[float] = None

    def __post_init__(self):
        terms = tuple((float(a), float(p)) for a, p in self.terms)
        if self.role not in ("interior", "boundary"):
            raise InvalidNonlinearity(f"role must be interior or boundary, got {self.role!r}")
        for a, p in terms:
            if not (a >= 0 and np.isfinite(a)):
                raise InvalidNonlinearity(f"coefficient a={a} must be non-negative")
            if not (p > 2 and np.isfinite(p)):
                raise InvalidNonlinearity(f"exponent p={p} must exceed 2")
        object.__setattr__(self, "terms", terms)

    @classmethod
    def power(cls, a: float = 1.0, p: float = 4.0, **kw) -> "NonlinearitySpec":
        return cls(((a, p),), **kw)

    @property
    def active(self) -> tuple:
        return tuple((a, p) for a, p in self.terms if a > 0)

    @property
    def is_zero(self) -> bool:
        return not self.active

    @property
    def p(self) -> float:
        return max((p for _, p in self.terms), default=math.nan)

    @property
    def q(self) -> float:
        return min((p for _, p in self.terms), default=math.nan)

    def f(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        at = np.abs(t)
        for a, p in self.active:
            out = out + a * at ** (p - 2) * t
        return out

    def F(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        at = np.abs(t)
        for a, p in self.active:
            out = out + (a / p) * at ** p
        return out

    def fprime(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        at = np.abs(t)
        for a, p in self.active:
            out = out + a * (p - 1) * at ** (p - 2)
        return out

    def certificate(self) -> Certificate:
        """Growth constants, sample-checked on |t| in [1e-6, 1e6].

        Sub-maximal powers are absorbed via |t|^(p_i-1) <= |t| + |t|^(p-1),
        so K2 collects their coefficients and Kp all coefficients.
        """
        p = self.p
        if self.K2 is not None or self.Kp is not None:
            K2 = float(self.K2 or 0.0)
            Kp = float(self.Kp or 0.0)
        else:
            K2 = float(sum(a for a, pi in self.active if pi < p))
            Kp = float(sum(a for a, _ in self.active))
        t = np.logspace(-6, 6, 2001)
        bound = K2 * t + Kp * t ** (p - 1)
        ok = bool(np.all(np.abs(self.f(t)) <= bound * (1 + 1e-12)))
        return Certificate(K2, Kp, p, self.q, ok)

    def ar_check(self) -> bool:
        """0 <= q F(t) <= f(t) t on a dense sample."""
        t = np.concatenate([-np.logspace(-6, 6, 801), np.logspace(-6, 6, 801)])
        qF = self.q * self.F(t)
        ft = self.f(t) * t
        return bool(np.all(qF >= 0) and np.all(qF <= ft * (1 + 1e-12) + 1e-300))

    def as_dict(self) -> dict:
        return {
            "terms": [{"a": a, "p": p} for a, p in self.terms],
            "role": self.role,
            "odd": self.odd,
            "certificate": self.certificate().as_dict(),
        }


def eval_f(spec: NonlinearitySpec, t):
    """Pointwise (f(t), F(t))."""
    return spec.f(t), spec.F(t)


# ---------------------------------------------------------------------------
# penalty calculus


def penalty(s: float, r: float):
    """(f_r, f_r', f_r'', h_r) for f_r(s) = s^r / (1 - s)."""
    if not (0.0 <= s < 1.0):
        raise SOutOfRange(f"s={s} outside [0, 1)")
    if r <= 1:
        raise ValueError(f"penalty exponent r={r} must exceed 1")
    if s == 0.0:
        f2 = 2.0 if r == 2 else (math.inf if r < 2 else 0.0)
        return 0.0, 0.0, f2, 0.0
    d = 1.0 - s
    sr = s ** r
    fr = sr / d
    f1 = r * s ** (r - 1) / d + sr / d ** 2
    f2 = r * (r - 1) * s ** (r - 2) / d + 2 * r * s ** (r - 1) / d ** 2 + 2 * sr / d ** 3
    return fr, f1, f2, s * f1 - fr


def beta(t: float) -> float:
    """C^2 cutoff: identity on [0, inf), -1 on (-inf, -1], quintic between."""
    if t >= 0:
        return float(t)
    if t <= -1:
        return -1.0
    x = t + 1.0
    return -1.0 + x ** 3 * (6.0 - 8.0 * x + 3.0 * x ** 2)


# ---------------------------------------------------------------------------
# problem and energies


@dataclass(frozen=True)
class Tolerances:
    """Absolute or scaled tolerances; see field comments for scaling."""

    grad: float = 1e-10  # times (1 + |Au|_*)
    mass: float = 1e-8  # times mu
    resid: float = 1e-7
    distinct: float = 1e-4  # times sqrt(mu)
    lam: float = 1e-6  # times lambda_1
    pen: float = 1e-6
    drift: float = 1e-3  # times sqrt(mu)
    deficit: float = 1e-2

    @classmethod
    def from_dict(cls, d: dict) -> "Tolerances":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class EnergyBreakdown:
    quad: float
    psi: float
    pen: float
    mass: float
    total_penalized: float
    total_unpenalized: float
    outside: bool  # mass >= mu; total_penalized is +inf


@dataclass(frozen=True)
class PenalizedProblem:
    """Discrete E_{r,mu} for one boundary mode.

    ``shift`` adds shift * M to the quadratic form (multiplier moves by the
    same amount); the Neumann mode already carries the builtin shift 1.
    """

    disc: Discretization
    mode: BoundaryMode
    f: NonlinearitySpec
    mu: float
    r: float = 2.0
    g: Optional[NonlinearitySpec] = None
    tol: Tolerances = field(default_factory=Tolerances)
    shift: float = 0.0
    boundary_scale: float = 1.0
    ops: Operators = field(init=False, repr=False, compare=False)
    A: sp.csr_matrix = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"mu={self.mu} must be positive")
        if not self.r > 1:
            raise ValueError(f"r={self.r} must exceed 1")
        if self.mode.is_robin != (self.g is not None):
            raise InvalidNonlinearity("a boundary nonlinearity g is required in Robin mode and only there")
        if self.f.role != "interior" or (self.g is not None and self.g.role != "boundary"):
            raise InvalidNonlinearity("f must be an interior term and g a boundary term")
        ops = self.disc.operators(self.mode, self.boundary_scale)
        A = ops.A if self.shift == 0 else (ops.A + self.shift * ops.M).tocsr()
        object.__setattr__(self, "ops", ops)
        object.__setattr__(self, "A", A)

    def with_r(self, r: float) -> "PenalizedProblem":
        return PenalizedProblem(self.disc, self.mode, self.f, self.mu, r, self.g,
                                self.tol, self.shift, self.boundary_scale)

    def with_mu(self, mu: float) -> "PenalizedProblem":
        return PenalizedProblem(self.disc, self.mode, self.f, mu, self.r, self.g,
                                self.tol, self.shift, self.boundary_scale)

    @property
    def M(self) -> sp.csr_matrix:
        return self.ops.M

    @property
    def dim(self) -> int:
        return self.ops.dim

    @property
    def total_shift(self) -> float:
        """Operator multiplier minus PDE multiplier."""
        return self.ops.builtin_shift + self.shift

    def mass(self, u) -> float:
        return float(u @ (self.ops.M @ u))

    def dual_norm(self, v) -> float:
        """Lumped M^{-1} norm of a residual-type vector."""
        return float(np.sqrt(np.sum(v * v / self.ops.w)))

    def psi(self, u) -> float:
        val = float(self.ops.w @ self.f.F(u))
        if self.g is not None:
            val += float(self.ops.b @ self.g.F(u))
        return val

    def nonlinear_force(self, u) -> np.ndarray:
        out = self.ops.w * self.f.f(u)
        if self.g is not None:
            out = out + self.ops.b * self.g.f(u)
        return out

    def nonlinear_jacobian_diag(self, u) -> np.ndarray:
        out = self.ops.w * self.f.fprime(u)
        if self.g is not None:
            out = out + self.ops.b * self.g.fprime(u)
        return out

    def pde_residual(self, u, lam_operator: float) -> np.ndarray:
        return self.A @ u - lam_operator * (self.ops.M @ u) - self.nonlinear_force(u)


def energy(prob: PenalizedProblem, u) -> EnergyBreakdown:
    u = np.asarray(u, dtype=float)
    quad = 0.5 * float(u @ (prob.A @ u))
    psi = prob.psi(u)
    mass = prob.mass(u)
    s = mass / prob.mu
    if s >= 1.0:
        return EnergyBreakdown(quad, psi, math.inf, mass, math.inf, quad - psi, True)
    pen = penalty(s, prob.r)[0]
    return EnergyBreakdown(quad, psi, pen, mass, quad - psi - pen, quad - psi, False)


def penalized_value(prob: PenalizedProblem, u) -> float:
    """E_{r,mu}(u), +inf outside the open mass ball."""
    return energy(prob, u).total_penalized


def grad_energy(prob: PenalizedProblem, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    Mu = prob.M @ u
    s = float(u @ Mu) / prob.mu
    if s >= 1.0:
        raise MassAtOrAboveMu(f"mass/mu = {s} >= 1")
    f1 = penalty(s, prob.r)[1]
    return prob.A @ u - prob.nonlinear_force(u) - (2.0 / prob.mu) * f1 * Mu


@dataclass(frozen=True)
class HessianModel:
    """H = S - c v v' with S sparse symmetric and v = Mu."""

    S: sp.csc_matrix
    c: float
    v: np.ndarray

    def matvec(self, x):
        return self.S @ x - self.c * self.v * float(self.v @ x)


def hessian(prob: PenalizedProblem, u) -> HessianModel:
    u = np.asarray(u, dtype=float)
    Mu = prob.M @ u
    s = float(u @ Mu) / prob.mu
    if s >= 1.0:
        raise MassAtOrAboveMu(f"mass/mu = {s} >= 1")
    _, f1, f2, _ = penalty(s, prob.r)
    S = prob.A - sp.diags(prob.nonlinear_jacobian_diag(u)) - (2.0 / prob.mu) * f1 * prob.M
    return HessianModel(S.tocsc(), 4.0 * f2 / prob.mu ** 2, Mu)


def truncated_energy(prob: PenalizedProblem, u) -> float:
    e = energy(prob, u)
    if e.outside:
        return -1.0
    return beta(e.total_penalized)


def hypothesis_check(f: NonlinearitySpec, spec, mode: BoundaryMode, N: int,
                     g: Optional[NonlinearitySpec] = None,
                     lam_tilde: Optional[float] = None) -> dict:
    """Flags for the growth, monotonicity, superquadratic and AR hypotheses.

    ``spec`` is the spectrum of the same mode, so its first eigenvalue is
    lambda_1 (Dirichlet), lambda-hat (Robin) or the shifted Neumann value.
    """
    cert = f.certificate()
    lam1 = spec.lambda1
    flags = {
        "exponent_range": bool(f.p < critical_exponent(N)),
        "certificate_verified": cert.verified,
        # power sums: f(t)t >= 0, f(t)/|t| non-decreasing, F/t^2 -> inf
        "f2": True,
        "f3": not f.is_zero,
        "f4": f.ar_check() and not f.is_zero,
    }
    if mode.is_dirichlet:
        flags["f1"] = cert.K2 < lam1 and flags["exponent_range"] and cert.verified
    elif mode.is_neumann:
        flags["f1''"] = cert.K2 < lam1 and flags["exponent_range"] and cert.verified
    else:
        flags["f1'"] = cert.K2 < lam1 / 4.0 and flags["exponent_range"] and cert.verified
        if g is not None:
            gc = g.certificate()
            lt = 1.0 if lam_tilde is None else lam_tilde
            flags["g_exponent_range"] = bool(g.p < trace_exponent(N))
            flags["g1"] = gc.K2 < lt / 4.0 and flags["g_exponent_range"] and gc.verified
            flags["g2"] = g.ar_check() and not g.is_zero
    return flags
