"""Closed-form thresholds, embedding-constant estimates and solution checks."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import brentq, minimize

from .errors import (
    EmptyRecordSet,
    ExponentOutOfRange,
    HypothesisViolated,
    ModeUnsupported,
    NoSolutionsFound,
)
from .functionals import (
    NonlinearitySpec,
    PenalizedProblem,
    critical_exponent,
    trace_exponent,
)
from .mesh import DIRICHLET, Discretization, face_distances
from .solver import CriticalPointRecord, detect_constant
from .spectra import Spectrum, solve_eigs

GN_MODES = ("interior", "neumann", "sobolev-robin", "trace")


def beta_p(p: float, N: int) -> float:
    return N * (0.5 - 1.0 / p)


# ---------------------------------------------------------------------------
# embedding constants


@dataclass
class GNEstimate:
    """Discrete supremum of an embedding ratio; a lower bound of the constant."""

    p: float
    mode: str
    N: int
    beta: float
    C: float
    n: int
    maximizer: np.ndarray = field(repr=False)
    starts: int = 0
    lower_bound: bool = True

    def as_dict(self) -> dict:
        return {"p": self.p, "mode": self.mode, "N": self.N, "beta_p": self.beta,
                "C": self.C, "n": self.n, "starts": self.starts,
                "flag": "LOWER_BOUND" if self.lower_bound else "ESTIMATE"}


class _Ratio:
    """log of  |u|_p^p / (|u|_2^{(1-b)p} |u|_X^{bp})  and its gradient.

    The numerator is integrated with per-element Gauss quadrature (or the
    boundary rule in trace mode); ``X`` is the seminorm/norm of the mode.
    """

    def __init__(self, disc: Discretization, p: float, mode: str):
        self.p = p
        N = disc.dimension
        if mode == "interior":
            free = disc.free_dofs(DIRICHLET)
            X = disc.K
            self.b = beta_p(p, N)
        elif mode == "neumann":
            free = np.arange(disc.n_nodes)
            X = disc.K + disc.M
            self.b = beta_p(p, N)
        elif mode == "sobolev-robin":
            free = np.arange(disc.n_nodes)
            X = disc.K + disc.B
            self.b = 1.0
        elif mode == "trace":
            free = np.arange(disc.n_nodes)
            X = disc.K + disc.B
            self.b = 1.0
        else:
            raise ValueError(f"unknown embedding mode {mode!r}")
        if mode == "trace":
            Q, w = disc.boundary_quadrature(nq=max(4, int(math.ceil(p / 2)) + 2))
        else:
            Q, w = disc.quadrature(nq=max(4, int(math.ceil(p / 2)) + 2))
        self.Q = Q.tocsc()[:, free].tocsr()
        self.w = w
        self.X = X.tocsr()[free][:, free].tocsr()
        self.M = disc.M[free][:, free].tocsr()
        self.dim = len(free)

    def __call__(self, u):
        p, b = self.p, self.b
        v = self.Q @ u
        av = np.abs(v)
        num = float(self.w @ av ** p)
        Mu = self.M @ u
        Xu = self.X @ u
        m2 = float(u @ Mu)
        x2 = float(u @ Xu)
        if num <= 0 or m2 <= 0 or x2 <= 0:
            return -math.inf, np.zeros_like(u)
        val = math.log(num) - 0.5 * (1 - b) * p * math.log(m2) - 0.5 * b * p * math.log(x2)
        g = p * (self.Q.T @ (self.w * av ** (p - 2) * v)) / num
        g -= (1 - b) * p * Mu / m2 + b * p * Xu / x2
        return val, g


def estimate_gn_constant(disc: Discretization, p: float, mode: str = "interior",
                         starts: int = 20, seed: int = 0, maxiter: int = 3000) -> GNEstimate:
    """Maximize the embedding ratio by L-BFGS from the ground state plus
    ``starts`` smoothed random starts; the best value is reported."""
    N = disc.dimension
    if mode not in GN_MODES:
        raise ValueError(f"mode must be one of {GN_MODES}")
    limit = trace_exponent(N) if mode == "trace" else critical_exponent(N)
    if not (2.0 <= p < limit):
        raise ExponentOutOfRange(f"p={p} outside [2, {limit}) for N={N}, mode={mode}")
    ratio = _Ratio(disc, p, mode)
    bmode = {"interior": DIRICHLET}.get(mode)
    if bmode is None:
        from .mesh import NEUMANN, ROBIN
        bmode = NEUMANN if mode == "neumann" else ROBIN
    first = solve_eigs(disc, bmode, 1).vectors[:, 0]
    rng = np.random.default_rng(seed)
    # smooth random starts: a few resolvent sweeps of white noise
    lu = spla.splu((ratio.X + 10.0 * ratio.M).tocsc())
    inits = [first]
    for _ in range(starts):
        v = rng.standard_normal(ratio.dim)
        for _ in range(2):
            v = lu.solve(ratio.M @ v)
        inits.append(v)
    best_val, best_u = -math.inf, first
    for u0 in inits:
        u0 = u0 / math.sqrt(float(u0 @ (ratio.M @ u0)))
        res = minimize(lambda u: tuple(-x for x in ratio(u)), u0, jac=True, method="L-BFGS-B",
                       options={"maxiter": maxiter, "ftol": 1e-15, "gtol": 1e-12})
        val = -float(res.fun)
        if val > best_val:
            best_val, best_u = val, res.x / math.sqrt(float(res.x @ (ratio.M @ res.x)))
    return GNEstimate(p, mode, N, ratio.b, math.exp(best_val), disc.n, best_u, starts + 1)


def gn_ratio(disc: Discretization, p: float, mode: str, u) -> float:
    return math.exp(_Ratio(disc, p, mode)(np.asarray(u, dtype=float))[0])


# ---------------------------------------------------------------------------
# thresholds


def _check_growth(K2, Kp, lambda1):
    if not (0.0 <= K2 < lambda1):
        raise HypothesisViolated(f"need 0 <= K2 < lambda1, got K2={K2}, lambda1={lambda1}")
    if not Kp > 0:
        raise HypothesisViolated(f"need Kp > 0, got {Kp}")


def threshold_mu_star(K2, Kp, p, q, lambda1, N, M, C_pN) -> float:
    """Small-mass threshold; the supercritical branch uses the energy level M."""
    _check_growth(K2, Kp, lambda1)
    if not (2 < p < critical_exponent(N)):
        raise HypothesisViolated(f"p={p} outside (2, 2*)")
    if not q > 2 or not M > 0 or not C_pN > 0:
        raise HypothesisViolated("need q > 2, M > 0 and C > 0")
    e = 2.0 / (p - 2.0)
    if p <= 2.0 + 4.0 / N:
        return ((lambda1 - K2) / (Kp * C_pN)) ** e * lambda1 ** (-N / 2.0)
    X = 2.0 * q * M / (q - 2.0)
    return ((lambda1 - K2) / (Kp * C_pN * lambda1)) ** e * X ** (e - N / 2.0)


def threshold_mu_star_th3(K2, Kp, p, q, lambda1, N, C_pN) -> float:
    """The same threshold at the level M = lambda1 / 2."""
    return threshold_mu_star(K2, Kp, p, q, lambda1, N, lambda1 / 2.0, C_pN)


def mu0_exclusion_bound(K2, Kp, p, lambda1, N, C_pN) -> Optional[float]:
    """Mass below which no nontrivial lambda=0 solution exists (p <= 2+4/N).

    Returns None on the supercritical branch, where the bound depends on an
    a-priori radius that is not explicit.
    """
    _check_growth(K2, Kp, lambda1)
    if p > 2.0 + 4.0 / N:
        return None
    bp = beta_p(p, N) * p
    return ((lambda1 - K2) / (lambda1 * Kp * C_pN)) ** (2.0 / (p - 2.0)) * lambda1 ** (-(bp - 2.0) / (p - 2.0))


def threshold_mu_doublestar(K2, Kp, p, K2g, Kl, l, lhat, ltilde, q, M, C_pO, C_lO,
                            xtol: float = 1e-12) -> float:
    """Largest mu with Kp C X^{p-2} mu^{p-2} + Kl C' X^{l-2} mu^{l-2} < rhs.

    X = 2qM/(q-2) and rhs = 1 - K2/lhat - K2g/ltilde; exponents as printed.
    """
    if not (0.0 <= K2 < lhat / 4.0):
        raise HypothesisViolated(f"need 0 <= K2 < lhat/4, got K2={K2}, lhat={lhat}")
    if not (0.0 <= K2g < ltilde / 4.0):
        raise HypothesisViolated(f"need 0 <= K2g < ltilde/4, got K2g={K2g}, ltilde={ltilde}")
    if not (p > 2 and q > 2 and M > 0):
        raise HypothesisViolated("need p > 2, q > 2, M > 0")
    rhs = 1.0 - K2 / lhat - K2g / ltilde
    X = 2.0 * q * M / (q - 2.0)
    use_l = Kl > 0 and C_lO > 0
    if use_l and not l > 2:
        raise HypothesisViolated("need l > 2")

    def lhs(m):
        val = Kp * C_pO * (X * m) ** (p - 2.0)
        if use_l:
            val += Kl * C_lO * (X * m) ** (l - 2.0)
        return val

    if lhs(1.0) == 0.0:
        return math.inf
    lo, hi = 0.0, 1.0
    while lhs(hi) < rhs:
        lo, hi = hi, 2.0 * hi
    while lhs(lo) >= rhs and lo > 0:
        lo *= 0.5
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if lhs(mid) < rhs:
            lo = mid
        else:
            hi = mid
        if hi - lo <= xtol * max(hi, 1e-300):
            break
    return 0.5 * (lo + hi)


def required_lambda1(mu, q, N, C_pN, variant: str = "i", p: float = None, Kp: float = None,
                     a: float = None, p_low: float = None) -> float:
    """Largest first eigenvalue for which existence at mass ``mu`` is guaranteed.

    Variant "i": K2 = 0, 2+4/N < p < 2*, closed form.
    Variant "ii": |f(t)| <= a(|t|^{p_low-1} + |t|^{p-1}); solved from
    mu*(lambda) = mu with K2 = lambda/2.
    """
    if p is None:
        raise ValueError("p is required")
    if not (2.0 + 4.0 / N < p < critical_exponent(N)) or p == 2.0 + 4.0 / N:
        raise ExponentOutOfRange(f"p={p} must lie in (2+4/N, 2*)")
    if variant == "i":
        if Kp is None:
            raise ValueError("variant i needs Kp")
        den = 4.0 + 2.0 * N - N * p
        return (q - 2.0) / q * mu ** (2.0 * (p - 2.0) / den) * (Kp * C_pN) ** (4.0 / den)
    if variant != "ii":
        raise ValueError("variant must be 'i' or 'ii'")
    if a is None or p_low is None or not (2.0 + 4.0 / N < p_low < p):
        raise ExponentOutOfRange("variant ii needs a and 2+4/N < p_low < p")

    def mu_star(lam):
        K2 = lam / 2.0
        Kp_l = a + a * (lam / (2.0 * a)) ** ((p_low - p) / (p_low - 2.0))
        return threshold_mu_star_th3(K2, Kp_l, p, q, lam, N, C_pN)

    g = lambda lam: math.log(mu_star(lam)) - math.log(mu)
    lo = 1e-12
    if g(lo) <= 0:
        raise ExponentOutOfRange("no admissible eigenvalue found")
    hi = lo
    while g(hi) > 0:
        lo, hi = hi, hi * 2.0
        if hi > 1e300:
            return math.inf
    return brentq(g, lo, hi, xtol=1e-14 * hi, rtol=1e-14)


def multiplier_lower_bound(lambda1, q, N) -> Optional[float]:
    """Lower bound on the multiplier of a low-energy solution (N >= 3)."""
    if N < 3:
        return None
    s2 = critical_exponent(N)
    return 2.0 * lambda1 * (q - s2) / (s2 * (q - 2.0 - 4.0 / N))


def shift_threshold(K2, Kp, p, q, lambda1, N, C_pN) -> dict:
    """Shifted-norm threshold: s > 0 and mu*_s built from lambda1 + s."""
    if N < 3:
        raise HypothesisViolated("the shifted construction needs N >= 3")
    if not (q > 2.0 + 4.0 / N):
        raise HypothesisViolated("need q > 2 + 4/N")
    s_printed = multiplier_lower_bound(lambda1, q, N)
    s = -s_printed
    L = lambda1 + s
    if not (0.0 <= K2 < L) or not Kp > 0:
        raise HypothesisViolated("need 0 <= K2 < lambda1 + s and Kp > 0")
    e = 2.0 / (p - 2.0)
    mu_s = ((L - K2) / (Kp * C_pN)) ** e * (q / (q - 2.0)) ** (e - N / 2.0) * L ** (-N / 2.0)
    return {"s_printed": s_printed, "s": s, "mu_star_s": mu_s}


def fountain_lower_bound(mu, lam_j, K2, Kp, C_pN, p, N, k: float = None, r: float = None) -> float:
    """Lower bound for the j-th minimax level; finite (k, r) adds the exact terms."""
    bp = beta_p(p, N) * p
    if k is None:
        return mu * (lam_j - K2) / 2.0 - Kp * C_pN * mu ** (p / 2.0) * lam_j ** (bp / 2.0) / p
    t = (k - 1.0) / k
    return (t * mu * lam_j / 2.0 - t * K2 * mu / 2.0
            - t ** (p / 2.0) * Kp * C_pN * mu ** (p / 2.0) * lam_j ** (bp / 2.0) / p
            - (k * t ** r if r is not None else 0.0))


# ---------------------------------------------------------------------------
# lambda = 0 corroboration


@dataclass
class Mu0Scan:
    masses: list
    energies: list
    min_mass: Optional[float]
    exclusion_bound: Optional[float]
    consistent: bool

    def as_dict(self) -> dict:
        return {"masses": self.masses, "energies": self.energies, "min_mass": self.min_mass,
                "exclusion_bound": self.exclusion_bound, "consistent": self.consistent}


def _zero_multiplier_newton(A, w, f: NonlinearitySpec, u, iters: int = 100):
    def G(v):
        return A @ v - w * f.f(v)

    def merit(v):
        g = G(v)
        return 0.5 * float(np.sum(g * g / w))

    for _ in range(iters):
        g = G(u)
        if math.sqrt(float(np.sum(g * g / w))) <= 1e-11 * (1.0 + math.sqrt(float(np.sum((A @ u) ** 2 / w)))):
            return u
        J = (A - sp.diags(w * f.fprime(u))).tocsc()
        try:
            d = spla.splu(J).solve(-g)
        except RuntimeError:
            return None
        m0, alpha = merit(u), 1.0
        while alpha > 1e-10 and merit(u + alpha * d) > (1 - 1e-4 * alpha) * m0:
            alpha *= 0.5
        if alpha <= 1e-10:
            return None
        u = u + alpha * d
    return None


def threshold_mu0_scan(disc: Discretization, f: NonlinearitySpec, M: float, C_pN: float,
                       n_modes: int = 3, spectrum: Optional[Spectrum] = None) -> Mu0Scan:
    """Multi-start Newton for nontrivial solutions of -Lap u = f(u), u = 0 on
    the boundary; compares the smallest mass with energy <= M against the
    analytic small-mass exclusion bound."""
    if f.is_zero:
        raise NoSolutionsFound("f vanishes: the only solution is u = 0")
    ops = disc.operators(DIRICHLET)
    spec = spectrum or solve_eigs(disc, DIRICHLET, n_modes)
    A, w = ops.A, ops.w
    masses, energies = [], []
    found = []
    for k in range(min(n_modes, spec.count)):
        phi = spec.vectors[:, k]
        # amplitude balancing the quadratic and nonlinear terms along phi
        lam = spec.values[k]
        h = lambda c: lam * c - float(w @ (f.f(c * phi) * phi))
        hi = 1.0
        while h(hi) > 0 and hi < 1e12:
            hi *= 2.0
        if h(hi) > 0:
            continue
        c = brentq(h, 1e-12, hi) if h(1e-12) > 0 else hi
        for sign in (1.0, -1.0):
            u = _zero_multiplier_newton(A, w, f, sign * c * phi)
            if u is None or math.sqrt(float(u @ (ops.M @ u))) < 1e-8:
                continue
            if any(min(np.linalg.norm(u - v), np.linalg.norm(u + v)) < 1e-6 * np.linalg.norm(u) for v in found):
                continue
            found.append(u)
            energies.append(0.5 * float(u @ (A @ u)) - float(w @ f.F(u)))
            masses.append(float(u @ (ops.M @ u)))
    if not found:
        raise NoSolutionsFound("multi-start Newton found no nontrivial solution")
    cert = f.certificate()
    bound = mu0_exclusion_bound(cert.K2, cert.Kp, cert.p, spec.lambda1, disc.dimension, C_pN)
    admissible = [m for m, e in zip(masses, energies) if e <= M]
    min_mass = min(admissible) if admissible else None
    consistent = min_mass is None or bound is None or min_mass > bound
    return Mu0Scan(masses, energies, min_mass, bound, consistent)


# ---------------------------------------------------------------------------
# Pohozaev identity


def boundary_flux(disc: Discretization, u_full, lam: float, f: NonlinearitySpec,
                  method: str = "flux") -> np.ndarray:
    """Normal derivative at boundary nodes for a Dirichlet solution.

    ``flux``: consistent recovery from the residual of the discrete
    equation on boundary rows, solved against the boundary mass.
    ``one-sided``: difference quotient towards the first interior layer.
    """
    bnd = np.flatnonzero(disc.boundary_mask)
    if method == "flux":
        w = disc.M @ np.ones(disc.n_nodes)
        r = disc.K @ u_full - lam * (disc.M @ u_full) - w * f.f(u_full)
        Bbb = disc.B[bnd][:, bnd].tocsc()
        sigma = np.zeros(disc.n_nodes)
        sigma[bnd] = spla.spsolve(Bbb, r[bnd]) if disc.dimension > 1 else r[bnd]
        return sigma
    if method != "one-sided":
        raise ValueError("method must be 'flux' or 'one-sided'")
    sigma = np.zeros(disc.n_nodes)
    shape = (disc.n + 1,) * disc.dimension
    U = u_full.reshape(shape)
    S = sigma.reshape(shape)
    for face in disc.faces:
        sl_b = [slice(None)] * disc.dimension
        sl_i = [slice(None)] * disc.dimension
        sl_b[face.axis] = 0 if face.side == 0 else disc.n
        sl_i[face.axis] = 1 if face.side == 0 else disc.n - 1
        h = disc.h[face.axis]
        # outward normal derivative; u vanishes on the face
        val = -U[tuple(sl_i)] / h
        S[tuple(sl_b)] = np.where(np.abs(val) > np.abs(S[tuple(sl_b)]), val, S[tuple(sl_b)])
    return sigma


def pohozaev_residual(rec: CriticalPointRecord, disc: Discretization, f: NonlinearitySpec,
                      x0=None, method: str = "one-sided") -> float:
    """|(N-2)/(2N) |grad u|^2 + 1/(2N) int |du/dn|^2 (x-x0).n - lam/2 mass - Psi|."""
    if rec.mode != "dirichlet":
        raise ModeUnsupported("the Pohozaev check applies to the Dirichlet mode")
    N = disc.dimension
    x0 = disc.domain.star_center if x0 is None else x0
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if not disc.domain.contains_strictly(x0):
        from .errors import CenterOutsideDomain
        raise CenterOutsideDomain(f"x0={tuple(x0)} is not interior")
    u = np.zeros(disc.n_nodes)
    u[disc.free_dofs(DIRICHLET)] = rec.u
    if not np.any(u):
        return 0.0
    sigma = boundary_flux(disc, u, rec.lam, f, method)
    dists = face_distances(disc, x0)
    flux = 0.0
    for face, d in zip(disc.faces, dists):
        s = sigma[face.nodes]
        flux += d * float(s @ (face.mass @ s))
    w = disc.M @ np.ones(disc.n_nodes)
    grad2 = float(u @ (disc.K @ u))
    mass = float(u @ (disc.M @ u))
    psi = float(w @ f.F(u))
    return abs((N - 2) / (2 * N) * grad2 + flux / (2 * N) - rec.lam / 2 * mass - psi)


# ---------------------------------------------------------------------------
# verdicts and reports


def _check(name, value, lo=None, hi=None, info=False) -> dict:
    ok = True
    if lo is not None and not value >= lo:
        ok = False
    if hi is not None and not value <= hi:
        ok = False
    return {"name": name, "value": value, "lo": lo, "hi": hi, "passed": bool(ok), "informational": info}


def verify_solution(rec: CriticalPointRecord, prob: PenalizedProblem, spec: Spectrum,
                    k: int = 1) -> dict:
    """Mass, residual, multiplier range and energy-level checks for one record.

    ``spec`` is the spectrum of ``prob.mode``; ``k`` selects the energy bound
    mu lambda_k / 2 and the multiplier cap lambda_k (k = 1 for the
    mountain-pass solution).
    """
    tol = prob.tol
    u = np.asarray(rec.u, dtype=float)
    mass = prob.mass(u)
    res = prob.dual_norm(prob.pde_residual(u, rec.lam_operator))
    lam1 = spec.lambda1
    lam_tol = tol.lam * lam1
    if prob.mode.is_neumann:
        lam_lo, lam_hi = -1.0 - lam_tol, math.inf
    else:
        lam_lo, lam_hi = -lam_tol, float(spec.values[k - 1]) - prob.total_shift + lam_tol
    quad = 0.5 * float(u @ (prob.ops.A @ u))
    e_unpen = quad - prob.psi(u)
    level = prob.mu * float(spec.values[k - 1]) / 2.0
    checks = [
        _check("mass_error", abs(mass - prob.mu), hi=tol.mass * prob.mu),
        _check("pde_residual", res, hi=tol.resid),
        _check("lambda_range", rec.lam, lo=lam_lo, hi=lam_hi),
        _check("energy_level", e_unpen, hi=level + 1e-6),
    ]
    if prob.mode.is_neumann:
        checks.append(_check("constant_solution", float(detect_constant(rec)), info=True))
    required = [c for c in checks if not c["informational"]]
    return {"seed_id": rec.seed_id, "case": rec.case, "checks": checks,
            "passed": bool(rec.case == "MassAttained" and all(c["passed"] for c in required))}


def ground_state_report(records: Sequence[CriticalPointRecord], prob: PenalizedProblem,
                        spec: Spectrum, C_pN: Optional[float] = None) -> dict:
    """Pick the lowest-energy record with non-negative multiplier and run the
    N+ membership, multiplier bound and shift checks."""
    if not records:
        raise EmptyRecordSet("no records to report on")
    tol = prob.tol
    lam1 = spec.lambda1
    lam_tol = tol.lam * lam1
    N = prob.disc.dimension
    cert = prob.f.certificate()
    splus = [r for r in records if r.lam >= -lam_tol]
    out = {"S_plus_empty": not splus, "candidate": None}
    if not splus:
        return out
    best = min(splus, key=lambda r: r.energy_unpenalized)
    u = np.asarray(best.u)
    Kq = float(u @ (prob.ops.A @ u)) - prob.total_shift * prob.mass(u)
    dEu = Kq - float(u @ prob.nonlinear_force(u))
    out["candidate"] = best.seed_id
    out["energy"] = best.energy_unpenalized
    out["lambda"] = best.lam
    out["dE_u"] = dEu
    out["in_N_plus"] = bool(dEu >= -tol.resid)
    bound = multiplier_lower_bound(lam1, cert.q, N)
    out["multiplier_lower_bound"] = bound
    if bound is not None and best.energy_unpenalized <= prob.mu * lam1 / 2 + 1e-6:
        out["multiplier_bound_holds"] = bool(best.lam >= bound - lam_tol)
    if C_pN is not None and N >= 3 and cert.q > 2 + 4 / N:
        out.update(shift_threshold(cert.K2, cert.Kp, cert.p, cert.q, lam1, N, C_pN))
    return out


@dataclass
class CertificateReport:
    """Every constant carries a descriptive anchor tag."""

    entries: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    def add(self, key: str, value, anchor: str, estimate_based: bool = False) -> None:
        if isinstance(value, float) and not math.isfinite(value):
            value = None
        self.entries[key] = {"value": value, "anchor": anchor, "estimate_based": estimate_based}

    def value(self, key: str):
        return self.entries[key]["value"]

    def to_json(self) -> str:
        return json.dumps({"constants": self.entries, "flags": self.flags}, indent=1, sort_keys=True)
