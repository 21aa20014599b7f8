"""Critical points of the penalized energy and continuation in r.

A stage solve is a damped Newton iteration on grad E_{r,mu} = 0 with a
backtracking line search on the residual merit; states with mass >= mu are
rejected outright, so the iterate never leaves the open mass ball. After
the r-continuation a short Lagrange-Newton polish enforces the mass exactly
(the barrier alone would need r of order 1e9 for a 1e-8 mass error).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import minimize_scalar

from .errors import CollapsedToZero, FoundFewer, NoConverge, PreconditionError
from .functionals import (
    PenalizedProblem,
    energy,
    grad_energy,
    hessian,
    penalized_value,
    penalty,
)
from .spectra import FountainFrame, Spectrum, solve_eigs

log = logging.getLogger(__name__)

MASS_ATTAINED = "MassAttained"
MASS_DEFICIT = "MassDeficitLambdaZero"
NO_CONVERGE = "NoConverge"


@dataclass(frozen=True)
class ContinuationSchedule:
    r0: float = 2.0
    growth: float = 2.0
    r_max: float = 2.0 ** 14
    newton_budget: int = 80
    warm_start: bool = True

    def __post_init__(self):
        if not self.r0 > 1:
            raise ValueError("r0 must exceed 1")
        if not self.growth > 1:
            raise ValueError("growth factor must exceed 1")
        if self.r_max < self.r0:
            raise ValueError("r_max must be >= r0")
        if self.newton_budget < 1:
            raise ValueError("newton_budget must be positive")

    def values(self) -> list:
        out, r = [], float(self.r0)
        while r <= self.r_max * (1 + 1e-12):
            out.append(r)
            r *= self.growth
        return out


@dataclass
class CriticalPointRecord:
    """Result of a stage solve or of a full continuation.

    ``lam`` is the multiplier of -Lap u = lam u + f(u); ``lam_operator`` is
    the multiplier for the mode's quadratic form (they differ by the shift).
    For stage records ``lam_operator`` equals (2/mu) f_r'(mass/mu).
    """

    u: np.ndarray
    mode: str
    mu: float
    r_final: float
    lam: float
    lam_operator: float
    mass: float
    energy_unpenalized: float
    energy_penalized: float
    pde_residual: float
    grad_norm: float
    cerami_norm: float
    seed_id: str = "phi1"
    case: Optional[str] = None
    lineage: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    newton_iters: int = 0
    polish_jump: float = 0.0

    @property
    def converged(self) -> bool:
        return self.case == MASS_ATTAINED

    def summary(self) -> dict:
        keys = ("mode", "mu", "r_final", "lam", "lam_operator", "mass", "energy_unpenalized",
                "energy_penalized", "pde_residual", "grad_norm", "cerami_norm", "seed_id",
                "case", "lineage", "newton_iters", "polish_jump")
        out = {k: getattr(self, k) for k in keys}
        if not math.isfinite(out["energy_penalized"]):
            out["energy_penalized"] = None
        out["sign_changes"] = sign_changes(self.u)
        return out

    def to_dict(self) -> dict:
        out = self.summary()
        out["u"] = [float(x) for x in self.u]
        return out


def sign_changes(u: np.ndarray, rel: float = 1e-8) -> int:
    """Sign changes of a nodal vector, ignoring near-zero entries."""
    u = np.asarray(u)
    if u.size == 0:
        return 0
    big = u[np.abs(u) > rel * np.max(np.abs(u))]
    return int(np.count_nonzero(np.diff(np.sign(big)) != 0))


# ---------------------------------------------------------------------------
# deflation


@dataclass(frozen=True)
class Deflation:
    """eta(u) = prod_i (1 + mu/|u-u_i|^2)(1 + mu/|u+u_i|^2), M-norms."""

    known: tuple
    M: sp.csr_matrix
    mu: float

    def log_eta(self, u) -> float:
        val = 0.0
        for ui in self.known:
            for d in (u - ui, u + ui):
                val += math.log1p(self.mu / max(float(d @ (self.M @ d)), 1e-300))
        return val

    def grad_log_eta(self, u) -> np.ndarray:
        out = np.zeros_like(u)
        for ui in self.known:
            for d in (u - ui, u + ui):
                Md = self.M @ d
                d2 = max(float(d @ Md), 1e-300)
                out -= 2.0 * self.mu / (d2 * (d2 + self.mu)) * Md
        return out


# ---------------------------------------------------------------------------
# stage solve


def _newton_direction(H, G):
    """Solve (S - c v v') x = -G by Sherman-Morrison on a sparse LU of S."""
    lu = spla.splu(H.S)
    a = lu.solve(-G)
    if H.c == 0.0:
        return a
    b = lu.solve(H.v)
    den = 1.0 - H.c * float(H.v @ b)
    if abs(den) < 1e-14 * (1.0 + abs(H.c * float(H.v @ b))):
        raise RuntimeError("rank-one update is singular")
    return a + b * (H.c * float(H.v @ a) / den)


def _stage_record(prob: PenalizedProblem, u, seed_id, iters, lineage) -> CriticalPointRecord:
    e = energy(prob, u)
    s = e.mass / prob.mu
    lam_op = 2.0 / prob.mu * penalty(s, prob.r)[1]
    G = grad_energy(prob, u)
    gn = prob.dual_norm(G)
    norm_u = math.sqrt(max(float(u @ (prob.A @ u)), 0.0))
    res = prob.dual_norm(prob.pde_residual(u, lam_op))
    return CriticalPointRecord(
        u=u.copy(), mode=prob.mode.name, mu=prob.mu, r_final=prob.r,
        lam=lam_op - prob.total_shift, lam_operator=lam_op, mass=e.mass,
        energy_unpenalized=e.total_unpenalized, energy_penalized=e.total_penalized,
        pde_residual=res, grad_norm=gn, cerami_norm=(1.0 + norm_u) * gn,
        seed_id=seed_id, lineage=list(lineage), newton_iters=iters,
    )


def critical_point(prob: PenalizedProblem, seed, seed_id: str = "seed",
                   budget: int = 80, deflation: Optional[Deflation] = None) -> CriticalPointRecord:
    """Newton search for grad E_{r,mu} = 0 starting at ``seed``."""
    u = np.array(seed, dtype=float)
    if u.shape != (prob.dim,):
        raise PreconditionError(f"seed has shape {u.shape}, expected ({prob.dim},)")
    mass0 = prob.mass(u)
    if mass0 >= prob.mu:
        raise PreconditionError(f"seed mass {mass0} >= mu={prob.mu}")
    floor = 1e-10 * math.sqrt(prob.mu)
    if math.sqrt(mass0) <= floor:
        raise CollapsedToZero("seed is (numerically) zero")

    def merit(v):
        if prob.mass(v) >= prob.mu:
            return math.inf
        G = grad_energy(prob, v)
        val = 0.5 * float(np.sum(G * G / prob.ops.w))
        if deflation is not None:
            val *= math.exp(2.0 * deflation.log_eta(v))
        return val

    lineage = [] if deflation is None else [f"deflated:{len(deflation.known)}"]
    for it in range(budget + 1):
        G = grad_energy(prob, u)
        gn = prob.dual_norm(G)
        scale = 1.0 + prob.dual_norm(prob.A @ u)
        if gn <= prob.tol.grad * scale:
            if math.sqrt(prob.mass(u)) <= floor:
                raise CollapsedToZero("iteration collapsed onto u = 0")
            return _stage_record(prob, u, seed_id, it, lineage)
        if it == budget:
            break
        H = hessian(prob, u)
        phi0 = merit(u)
        directions = []
        try:
            d = _newton_direction(H, G)
            if deflation is not None:
                den = 1.0 - float(deflation.grad_log_eta(u) @ d)
                if abs(den) > 1e-12:
                    d = d / den
            directions.append(d)
        except RuntimeError:
            pass
        # steepest descent of the merit as fallback
        directions.append(-H.matvec(G / prob.ops.w))
        moved = False
        for d in directions:
            alpha = 1.0
            for _ in range(40):
                trial = u + alpha * d
                if merit(trial) <= (1.0 - 1e-4 * alpha) * phi0:
                    u = trial
                    moved = True
                    break
                alpha *= 0.5
            if moved:
                break
        if not moved:
            break
        if math.sqrt(prob.mass(u)) <= floor:
            raise CollapsedToZero("iteration collapsed onto u = 0")
    raise NoConverge(f"stage r={prob.r}: |grad|={gn:.3e} after {it} Newton steps")


# ---------------------------------------------------------------------------
# seeds


def line_max_amplitude(prob: PenalizedProblem, phi) -> float:
    """argmax over t in (0, t_wall) of E_{r,mu}(t phi)."""
    m = prob.mass(phi)
    if m <= 0:
        raise PreconditionError("seed direction has zero mass")
    t_wall = math.sqrt(prob.mu / m)
    res = minimize_scalar(lambda t: -penalized_value(prob, t * phi),
                          bounds=(0.0, t_wall * (1 - 1e-9)), method="bounded",
                          options={"xatol": 1e-10 * t_wall})
    return float(res.x)


def first_eigenvector(prob: PenalizedProblem, k: int = 1) -> tuple:
    spec = solve_eigs(prob.disc, prob.mode, k, prob.boundary_scale)
    return spec, spec.vectors[:, k - 1]


# ---------------------------------------------------------------------------
# constrained polish


def _polish(prob: PenalizedProblem, u, lam_op, iters: int = 30):
    """Newton on [Au - lam M u - W f(u); (mu - u'Mu)/2] = 0."""
    n = prob.dim
    M = prob.M
    for _ in range(iters):
        Mu = M @ u
        R = prob.pde_residual(u, lam_op)
        c = 0.5 * (prob.mu - float(u @ Mu))
        if prob.dual_norm(R) <= 1e-12 * (1.0 + prob.dual_norm(prob.A @ u)) and abs(c) <= 1e-14 * prob.mu:
            return u, lam_op, True
        J = prob.A - sp.diags(prob.nonlinear_jacobian_diag(u)) - lam_op * M
        Mu_col = sp.csc_matrix(Mu.reshape(-1, 1))
        Kb = sp.bmat([[J, -Mu_col], [-Mu_col.T, None]], format="csc")
        try:
            sol = spla.splu(Kb).solve(-np.concatenate([R, [c]]))
        except RuntimeError:
            return u, lam_op, False
        u = u + sol[:n]
        lam_op = lam_op + sol[n]
    Mu = M @ u
    ok = (prob.dual_norm(prob.pde_residual(u, lam_op)) <= 1e-10 * (1.0 + prob.dual_norm(prob.A @ u))
          and abs(prob.mu - float(u @ Mu)) <= 1e-12 * prob.mu)
    return u, lam_op, ok


def _finalize(prob: PenalizedProblem, stage: CriticalPointRecord, lam1: float) -> CriticalPointRecord:
    tol = prob.tol
    s = stage.mass / prob.mu
    if stage.lam_operator <= tol.lam * lam1 and 1.0 - s > tol.deficit:
        stage.case = MASS_DEFICIT
        return stage
    u, lam_op, ok = _polish(prob, stage.u, stage.lam_operator)
    jump = math.sqrt(max(prob.mass(u - stage.u), 0.0))
    if not ok or jump > 0.1 * math.sqrt(prob.mu):
        stage.case = NO_CONVERGE
        return stage
    e = energy(prob, u)
    norm_u = math.sqrt(max(float(u @ (prob.A @ u)), 0.0))
    R = prob.pde_residual(u, lam_op)
    # gradient of the unpenalized energy restricted to the mass sphere
    res = prob.dual_norm(R)
    rec = CriticalPointRecord(
        u=u, mode=prob.mode.name, mu=prob.mu, r_final=prob.r,
        lam=lam_op - prob.total_shift, lam_operator=lam_op, mass=e.mass,
        energy_unpenalized=e.total_unpenalized, energy_penalized=stage.energy_penalized,
        pde_residual=res, grad_norm=res, cerami_norm=(1.0 + norm_u) * res,
        seed_id=stage.seed_id, lineage=stage.lineage, trace=stage.trace,
        newton_iters=stage.newton_iters, polish_jump=jump,
    )
    mass_ok = abs(e.mass - prob.mu) <= tol.mass * prob.mu
    rec.case = MASS_ATTAINED if (mass_ok and res <= tol.resid) else NO_CONVERGE
    return rec


def continue_in_r(prob: PenalizedProblem, schedule: ContinuationSchedule = ContinuationSchedule(),
                  seed=None, seed_id: str = "phi1", lam1: Optional[float] = None,
                  deflation: Optional[Deflation] = None) -> CriticalPointRecord:
    """Run stage solves at r0 < r1 < ... and classify the limit.

    The first stage failing raises; a later failing stage ends the
    continuation early and the last good stage is classified.
    """
    rs = schedule.values()
    p0 = prob.with_r(rs[0])
    if seed is None or lam1 is None:
        spec, phi = first_eigenvector(p0)
        lam1 = spec.lambda1 if lam1 is None else lam1
        if seed is None:
            seed = line_max_amplitude(p0, phi) * phi
    seed = np.asarray(seed, dtype=float)
    trace = []
    stage = None
    u = seed
    for idx, r in enumerate(rs):
        pr = prob.with_r(r)
        start = u if (schedule.warm_start or stage is None) else seed
        if stage is not None and schedule.warm_start:
            # radial rescale onto the mountain-pass ridge of the new stage
            start = line_max_amplitude(pr, start) * start
        try:
            rec = critical_point(pr, start, seed_id, schedule.newton_budget, deflation)
        except (NoConverge, CollapsedToZero) as exc:
            if stage is None:
                raise
            log.info("continuation stopped at r=%g: %s", r, exc)
            break
        drift = math.inf if stage is None else math.sqrt(max(pr.mass(rec.u - stage.u), 0.0))
        trace.append({
            "stage": idx, "r": r, "energy": rec.energy_penalized,
            "energy_unpenalized": rec.energy_unpenalized, "mass": rec.mass,
            "lambda": rec.lam_operator, "grad_norm": rec.grad_norm,
            "newton_iters": rec.newton_iters, "seed_id": seed_id,
        })
        stage = rec
        u = rec.u
        pen = penalty(rec.mass / pr.mu, r)[0]
        if pen <= prob.tol.pen and drift <= prob.tol.drift * math.sqrt(prob.mu):
            break
    stage.trace = trace
    return _finalize(prob.with_r(stage.r_final), stage, lam1)


# ---------------------------------------------------------------------------
# multiplicity


def _distance(prob, a, b) -> float:
    return min(math.sqrt(prob.mass(a - b)), math.sqrt(prob.mass(a + b)))


def multiplicity(prob: PenalizedProblem, m: int, frames: Sequence[FountainFrame],
                 schedule: ContinuationSchedule = ContinuationSchedule(),
                 spectrum: Optional[Spectrum] = None) -> list:
    """Up to ``m`` distinct solutions: phi_1 seed, then deflated phi_{k_i} seeds."""
    if not prob.f.odd or (prob.g is not None and not prob.g.odd):
        raise PreconditionError("multiplicity requires odd nonlinearities")
    if m < 1:
        raise PreconditionError("m must be >= 1")
    if len(frames) < m - 1:
        raise PreconditionError(f"need {m - 1} frames, got {len(frames)}")
    if spectrum is None:
        kmax = max([f.j for f in frames[: m - 1]], default=1)
        spectrum = solve_eigs(prob.disc, prob.mode, min(kmax + 2, prob.dim), prob.boundary_scale)
    lam1 = spectrum.lambda1
    p0 = prob.with_r(schedule.r0)
    phi1 = spectrum.vectors[:, 0]
    records = []
    first = continue_in_r(prob, schedule, line_max_amplitude(p0, phi1) * phi1, "phi1", lam1)
    if first.case == MASS_ATTAINED:
        records.append(first)
    for frame in frames[: m - 1]:
        phi = frame.phi
        t_xi = frame.xi / math.sqrt(frame.lam_j)
        t = min(t_xi, line_max_amplitude(p0, phi))
        sid = f"phi{frame.j}"
        defl = Deflation(tuple(r.u for r in records), prob.M, prob.mu) if records else None
        try:
            rec = continue_in_r(prob, schedule, t * phi, sid, lam1, defl)
        except (NoConverge, CollapsedToZero) as exc:
            log.info("seed %s failed: %s", sid, exc)
            continue
        if rec.case != MASS_ATTAINED:
            continue
        rec.lineage = [r.seed_id for r in records]
        if all(_distance(prob, rec.u, r.u) >= prob.tol.distinct * math.sqrt(prob.mu) for r in records):
            records.append(rec)
    if len(records) < m:
        raise FoundFewer(len(records), records)
    return records


def detect_constant(rec: CriticalPointRecord, disc=None) -> bool:
    """Nodal variance <= 1e-10 mean^2 (u = 0 counts as constant).

    Only meaningful for Neumann records; Dirichlet/Robin records raise.
    """
    mode = getattr(rec, "mode", None)
    if mode is not None and str(mode) != "neumann":
        raise PreconditionError(f"constant detection applies to neumann records, not {mode}")
    u = np.asarray(rec.u if hasattr(rec, "u") else rec, dtype=float)
    mean = float(np.mean(u))
    var = float(np.var(u))
    if np.all(u == 0):
        return True
    return var <= 1e-10 * mean * mean
