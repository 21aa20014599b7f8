import math

import numpy as np
import pytest

from normcrit import DIRICHLET, NEUMANN, ROBIN, Interval, assemble
from normcrit.errors import CollapsedToZero, FoundFewer, PreconditionError
from normcrit.functionals import NonlinearitySpec, PenalizedProblem
from normcrit.solver import (
    MASS_ATTAINED,
    MASS_DEFICIT,
    ContinuationSchedule,
    Deflation,
    continue_in_r,
    critical_point,
    detect_constant,
    first_eigenvector,
    line_max_amplitude,
    multiplicity,
    sign_changes,
)
from normcrit.spectra import fountain_frame, solve_eigs

import oracles

CUBIC = NonlinearitySpec.power(1.0, 4.0)


@pytest.fixture(scope="module")
def interval():
    return assemble(Interval(0.0, 1.0), 128)


def test_schedule_values():
    assert ContinuationSchedule().values()[-1] == 2.0 ** 14
    assert ContinuationSchedule(r0=3, growth=3, r_max=27).values() == [3, 9, 27]
    with pytest.raises(ValueError):
        ContinuationSchedule(growth=1.0)


def test_sign_changes():
    assert sign_changes(np.array([1.0, 2.0, -1.0, 1e-12, -2.0, 3.0])) == 2
    assert sign_changes(np.zeros(0)) == 0


def test_stage_solve_is_critical(interval):
    prob = PenalizedProblem(interval, DIRICHLET, CUBIC, 0.05, 4.0)
    _, phi = first_eigenvector(prob)
    rec = critical_point(prob, line_max_amplitude(prob, phi) * phi)
    assert rec.grad_norm <= 1e-8
    assert rec.mass < prob.mu
    # stage multiplier equals (2/mu) f_r'(s)
    assert prob.dual_norm(prob.pde_residual(rec.u, rec.lam_operator)) <= 1e-8


def test_stage_preconditions(interval):
    prob = PenalizedProblem(interval, DIRICHLET, CUBIC, 0.05)
    with pytest.raises(PreconditionError):
        critical_point(prob, np.ones(3))
    with pytest.raises(PreconditionError):
        critical_point(prob, np.ones(prob.dim))
    with pytest.raises(CollapsedToZero):
        critical_point(prob, np.zeros(prob.dim))


def test_line_max_sits_on_ridge(interval):
    prob = PenalizedProblem(interval, DIRICHLET, CUBIC, 0.05, 4.0)
    _, phi = first_eigenvector(prob)
    t = line_max_amplitude(prob, phi)
    from normcrit.functionals import penalized_value

    vals = [penalized_value(prob, s * phi) for s in (0.99 * t, t, 1.01 * t)]
    assert vals[1] >= max(vals[0], vals[2])


def test_continuation_matches_independent_shooting():
    """Positive solution at fixed mass versus a shooting solve of the ODE."""
    from scipy.integrate import solve_ivp
    from scipy.optimize import brentq

    disc = assemble(Interval(0.0, 1.0), 512)
    mu = 0.05
    rec = continue_in_r(PenalizedProblem(disc, DIRICHLET, CUBIC, mu))
    assert rec.case == MASS_ATTAINED

    def shoot(lam, slope):
        rhs = lambda _x, y: [y[1], -lam * y[0] - y[0] ** 3, y[0] ** 2]
        return solve_ivp(rhs, (0, 1), [0, slope, 0], rtol=1e-11, atol=1e-13).y[:, -1]

    def slope_for(lam):
        hi = 1.0
        while shoot(lam, hi)[0] > 0:
            hi *= 2.0
        return brentq(lambda s: shoot(lam, s)[0], 1e-4, hi, xtol=1e-14)

    lam = brentq(lambda l: shoot(l, slope_for(l))[2] - mu, 8.0, math.pi ** 2 - 1e-6, xtol=1e-12)
    assert rec.lam == pytest.approx(lam, rel=2e-5)


def test_continuation_trace_and_record(interval):
    rec = continue_in_r(PenalizedProblem(interval, DIRICHLET, CUBIC, 0.05))
    assert rec.case == MASS_ATTAINED and rec.converged
    rs = [row["r"] for row in rec.trace]
    assert rs == sorted(rs) and rs[0] == 2.0
    d = rec.to_dict()
    assert len(d["u"]) == len(rec.u) and d["sign_changes"] == 0
    assert set(rec.trace[0]) >= {"stage", "r", "energy", "mass", "lambda", "grad_norm"}


def test_mass_deficit_classification():
    # large mass on (0, 1): the ascent ends on the lambda = 0 solution (mass 2 pi)
    disc = assemble(Interval(0.0, 1.0), 128)
    rec = continue_in_r(PenalizedProblem(disc, DIRICHLET, CUBIC, 12.0))
    assert rec.case == MASS_DEFICIT
    assert rec.mass == pytest.approx(2 * math.pi, rel=1e-3)


def test_neumann_constant_solution():
    disc = assemble(Interval(0.0, 1.0), 32)
    rec = continue_in_r(PenalizedProblem(disc, NEUMANN, CUBIC, 1.0))
    assert rec.lam == pytest.approx(-1.0, abs=1e-10)
    assert detect_constant(rec)


def test_detect_constant_precondition(interval):
    rec = continue_in_r(PenalizedProblem(interval, DIRICHLET, CUBIC, 0.05))
    with pytest.raises(PreconditionError):
        detect_constant(rec)
    assert detect_constant(np.full(5, 2.0)) and not detect_constant(np.arange(5.0))


def test_robin_solution_in_range():
    disc = assemble(Interval(0.0, 1.0), 128)
    g = NonlinearitySpec.power(1.0, 3.0, role="boundary")
    rec = continue_in_r(PenalizedProblem(disc, ROBIN, CUBIC, 0.05, g=g))
    lam_hat = solve_eigs(disc, ROBIN, 1).lambda1
    assert rec.case == MASS_ATTAINED and 0 <= rec.lam <= lam_hat


def test_deflation_gradient():
    disc = assemble(Interval(0.0, 1.0), 32)
    M = disc.operators(DIRICHLET).M
    rng = np.random.default_rng(0)
    known = (rng.standard_normal(31),)
    defl = Deflation(known, M, 0.1)
    u, d = rng.standard_normal(31), rng.standard_normal(31)
    fd = oracles.five_point_difference(defl.log_eta, u, d, 1e-4)
    assert fd == pytest.approx(float(defl.grad_log_eta(u) @ d), rel=1e-7)


def test_multiplicity_finds_nodal_family():
    disc = assemble(Interval(0.0, 1.0), 128)
    mu = 0.002
    prob = PenalizedProblem(disc, DIRICHLET, CUBIC, mu)
    spec = solve_eigs(disc, DIRICHLET, 5)
    frames = [fountain_frame(spec, j, mu, 100.0, M=prob.M) for j in (2, 3)]
    recs = multiplicity(prob, 3, frames, spectrum=spec)
    assert [sign_changes(r.u) for r in recs] == [0, 1, 2]
    assert recs[1].lineage == ["phi1"]


def test_multiplicity_preconditions(interval):
    even = NonlinearitySpec.power(1.0, 4.0, odd=False)
    prob = PenalizedProblem(interval, DIRICHLET, even, 0.01)
    with pytest.raises(PreconditionError):
        multiplicity(prob, 2, [])
    prob = PenalizedProblem(interval, DIRICHLET, CUBIC, 0.01)
    with pytest.raises(PreconditionError):
        multiplicity(prob, 0, [])
    with pytest.raises(PreconditionError):
        multiplicity(prob, 3, [])


def test_multiplicity_reports_found_fewer():
    disc = assemble(Interval(0.0, 1.0), 64)
    prob = PenalizedProblem(disc, DIRICHLET, CUBIC, 0.002)
    spec = solve_eigs(disc, DIRICHLET, 4)
    frame = fountain_frame(spec, 2, 0.002, 100.0, M=prob.M)
    # the same frame twice: the second seed deflates back onto a known branch or fails
    with pytest.raises(FoundFewer) as info:
        multiplicity(prob, 3, [frame, frame], spectrum=spec)
    assert info.value.count == len(info.value.records) == 2
