import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from normcrit import DIRICHLET, NEUMANN, Interval, Rectangle, assemble
from normcrit.certificates import (
    CertificateReport,
    beta_p,
    boundary_flux,
    estimate_gn_constant,
    fountain_lower_bound,
    gn_ratio,
    ground_state_report,
    multiplier_lower_bound,
    mu0_exclusion_bound,
    pohozaev_residual,
    required_lambda1,
    shift_threshold,
    threshold_mu0_scan,
    threshold_mu_doublestar,
    threshold_mu_star,
    threshold_mu_star_th3,
    verify_solution,
)
from normcrit.errors import (
    EmptyRecordSet,
    ExponentOutOfRange,
    HypothesisViolated,
    ModeUnsupported,
    NoSolutionsFound,
)
from normcrit.functionals import NonlinearitySpec, PenalizedProblem
from normcrit.solver import continue_in_r
from normcrit.spectra import solve_eigs

CUBIC = NonlinearitySpec.power(1.0, 4.0)
# sharp constant of |u|_4^4 <= C |u|_2^3 |u'|_2 on the line
GN_LINE_P4 = 1.0 / math.sqrt(3.0)


def test_beta_p():
    assert beta_p(4.0, 1) == 0.25
    assert beta_p(6.0, 3) == 1.0


def test_gn_estimate_approaches_sharp_line_constant():
    est = estimate_gn_constant(assemble(Interval(0, 1), 256), 4.0, starts=4)
    assert est.C <= GN_LINE_P4
    assert est.C == pytest.approx(GN_LINE_P4, rel=1e-3)
    assert est.as_dict()["flag"] == "LOWER_BOUND"
    disc = assemble(Interval(0, 1), 64)
    assert gn_ratio(disc, 4.0, "interior", np.sin(math.pi * disc.nodes[1:-1, 0])) <= est.C


def test_gn_p2_is_one():
    est = estimate_gn_constant(assemble(Interval(0, 1), 32), 2.0, starts=2)
    assert est.C == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("mode", ["neumann", "sobolev-robin", "trace"])
def test_gn_other_modes_positive(mode):
    est = estimate_gn_constant(assemble(Interval(0, 1), 32), 4.0, mode, starts=2)
    assert est.C > 0 and est.mode == mode


def test_gn_trace_1d_value():
    # in 1D the trace is two point values; sup of (u(0)^4+u(1)^4)/(|u'|^2+u(0)^2+u(1)^2)^2 is 1/2
    est = estimate_gn_constant(assemble(Interval(0, 1), 16), 4.0, "trace", starts=2)
    assert est.C == pytest.approx(0.5, rel=1e-6)


def test_gn_range_checks():
    disc = assemble(Rectangle(0, 1, 0, 1), 8)
    with pytest.raises(ExponentOutOfRange):
        estimate_gn_constant(disc, 1.5)
    with pytest.raises(ValueError):
        estimate_gn_constant(disc, 4.0, "mixed")


def test_unit_thresholds():
    assert threshold_mu_star(0.0, 1.0, 4.0, 4.0, 1.0, 1, 0.5, 1.0) == 1.0
    assert threshold_mu_doublestar(0.0, 1.0, 4.0, 0.0, 1.0, 4.0, 1.0, 1.0, 4.0, 0.25, 1.0, 1.0) == pytest.approx(
        2 ** -0.5, abs=1e-12)
    assert required_lambda1(1.0, 4.0, 1, 1.0, "i", p=8.0, Kp=1.0) == pytest.approx(0.5, abs=1e-12)


def test_doublestar_single_term_closed_form():
    K2, Kp, p, lhat, q, M, C = 0.2, 1.5, 5.0, 2.0, 4.0, 0.3, 0.7
    got = threshold_mu_doublestar(K2, Kp, p, 0.0, 0.0, 3.0, lhat, 1.0, q, M, C, 0.0)
    want = ((1 - K2 / lhat) / (Kp * C)) ** (1 / (p - 2)) * (q - 2) / (2 * q * M)
    assert got == pytest.approx(want, rel=1e-11)


def test_required_lambda1_three_dimensional_instance():
    assert required_lambda1(1.0, 4.0, 3, 1.0, "i", p=5.0, Kp=1.0) == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(ExponentOutOfRange):
        required_lambda1(1.0, 4.0, 3, 1.0, "i", p=2 + 4 / 3, Kp=1.0)


def test_supercritical_branch_uses_level():
    # p = 8 > 2 + 4/N in 1D: mu* depends on X = 2qM/(q-2)
    a = threshold_mu_star(0.0, 1.0, 8.0, 4.0, 1.0, 1, 0.25, 1.0)
    assert a == pytest.approx(1.0)
    assert threshold_mu_star_th3(0.0, 1.0, 8.0, 4.0, 1.0, 1, 1.0) == pytest.approx(2.0 ** (1 / 3 - 0.5))


def test_threshold_hypotheses():
    with pytest.raises(HypothesisViolated):
        threshold_mu_star(2.0, 1.0, 4.0, 4.0, 1.0, 1, 0.5, 1.0)
    with pytest.raises(HypothesisViolated):
        threshold_mu_star(0.0, 1.0, 7.0, 4.0, 1.0, 3, 0.5, 1.0)
    with pytest.raises(HypothesisViolated):
        threshold_mu_doublestar(0.5, 1.0, 4.0, 0.0, 1.0, 4.0, 1.0, 1.0, 4.0, 0.25, 1.0, 1.0)
    with pytest.raises(ExponentOutOfRange):
        required_lambda1(1.0, 4.0, 1, 1.0, "i", p=4.0, Kp=1.0)


def test_mu0_exclusion_bound_branches():
    assert mu0_exclusion_bound(0.0, 1.0, 4.0, 1.0, 1, 1.0) == threshold_mu_star_th3(0.0, 1.0, 4.0, 4.0, 1.0, 1, 1.0)
    assert mu0_exclusion_bound(0.0, 1.0, 8.0, 1.0, 1, 1.0) is None


def test_required_lambda1_variant_ii_inverts_threshold():
    lam = required_lambda1(0.5, 4.0, 1, 1.0, "ii", p=12.0, a=1.0, p_low=8.0)
    Kp = 1.0 + (lam / 2.0) ** ((8.0 - 12.0) / 6.0)
    assert threshold_mu_star_th3(lam / 2.0, Kp, 12.0, 4.0, lam, 1, 1.0) == pytest.approx(0.5, rel=1e-10)
    with pytest.raises(ExponentOutOfRange):
        required_lambda1(0.5, 4.0, 1, 1.0, "ii", p=12.0, a=1.0, p_low=3.0)


def test_multiplier_bound_and_shift():
    assert multiplier_lower_bound(1.0, 4.0, 2) is None
    assert multiplier_lower_bound(2.0, 4.0, 3) == pytest.approx(-2.0)
    sh = shift_threshold(0.0, 1.0, 4.0, 4.0, 2.0, 3, 1.0)
    assert sh["s"] == -sh["s_printed"] == pytest.approx(2.0)
    with pytest.raises(HypothesisViolated):
        shift_threshold(0.0, 1.0, 4.0, 4.0, 2.0, 2, 1.0)


def test_fountain_lower_bound_finite_k():
    base = fountain_lower_bound(0.01, 4.0, 0.0, 1.0, 1.0, 4.0, 1)
    assert base < 0.01 * 4.0 / 2
    # k (1 - 1/k)^r vanishes as r grows; then the bound tends to the k -> inf form
    tuned = fountain_lower_bound(0.01, 4.0, 0.0, 1.0, 1.0, 4.0, 1, k=1e3, r=1e5)
    assert tuned < base
    assert tuned == pytest.approx(base, rel=2e-3)


@settings(max_examples=60, deadline=None)
@given(kp=st.floats(0.1, 10), c=st.floats(0.1, 10), lam=st.floats(0.5, 50), p=st.floats(2.2, 5.9))
def test_mu_star_monotone_in_growth(kp, c, lam, p):
    a = threshold_mu_star_th3(0.0, kp, p, p, lam, 1, c)
    b = threshold_mu_star_th3(0.0, 1.1 * kp, p, p, lam, 1, c)
    assert b < a


def test_mu0_scan_consistent():
    disc = assemble(Interval(0, 1), 128)
    est = estimate_gn_constant(disc, 4.0, starts=2)
    scan = threshold_mu0_scan(disc, CUBIC, 20.0, est.C)
    assert scan.min_mass == pytest.approx(2 * math.pi, rel=1e-3)
    assert scan.consistent and scan.min_mass > scan.exclusion_bound
    with pytest.raises(NoSolutionsFound):
        threshold_mu0_scan(disc, NonlinearitySpec.power(0.0, 4.0), 1.0, est.C)


@pytest.fixture(scope="module")
def square_solutions():
    f = NonlinearitySpec.power(1.0, 6.0)
    out = {}
    for n in (16, 32):
        disc = assemble(Rectangle(-1, 1, -1, 1), n)
        out[n] = (disc, continue_in_r(PenalizedProblem(disc, DIRICHLET, f, 0.1)))
    return f, out


def test_pohozaev_residual_decays(square_solutions):
    f, sols = square_solutions
    for method in ("one-sided", "flux"):
        r16 = pohozaev_residual(sols[16][1], sols[16][0], f, method=method)
        r32 = pohozaev_residual(sols[32][1], sols[32][0], f, method=method)
        assert r16 / r32 > 3.0


def test_pohozaev_checks(square_solutions):
    f, sols = square_solutions
    disc, rec = sols[16]
    with pytest.raises(ValueError):
        boundary_flux(disc, disc.expand(rec.u, DIRICHLET), rec.lam, f, "spline")
    from normcrit.errors import CenterOutsideDomain

    with pytest.raises(CenterOutsideDomain):
        pohozaev_residual(rec, disc, f, x0=(2.0, 0.0))
    ndisc = assemble(Interval(0, 1), 16)
    nrec = continue_in_r(PenalizedProblem(ndisc, NEUMANN, CUBIC, 1.0))
    with pytest.raises(ModeUnsupported):
        pohozaev_residual(nrec, ndisc, CUBIC)


def test_verify_and_ground_state():
    disc = assemble(Interval(0, 1), 128)
    prob = PenalizedProblem(disc, DIRICHLET, CUBIC, 0.05)
    spec = solve_eigs(disc, DIRICHLET, 2)
    rec = continue_in_r(prob)
    v = verify_solution(rec, prob, spec)
    assert v["passed"] and {c["name"] for c in v["checks"]} >= {"mass_error", "pde_residual", "lambda_range"}
    bad = continue_in_r(prob)
    bad.u = bad.u * 1.01
    assert not verify_solution(bad, prob, spec)["passed"]
    gs = ground_state_report([rec], prob, spec)
    assert gs["candidate"] == "phi1" and gs["in_N_plus"]
    with pytest.raises(EmptyRecordSet):
        ground_state_report([], prob, spec)


def test_verify_neumann_reports_constant_flag():
    disc = assemble(Interval(0, 1), 32)
    prob = PenalizedProblem(disc, NEUMANN, CUBIC, 1.0)
    spec = solve_eigs(disc, NEUMANN, 1)
    v = verify_solution(continue_in_r(prob), prob, spec)
    const = [c for c in v["checks"] if c["name"] == "constant_solution"][0]
    assert v["passed"] and const["informational"] and const["value"] == 1.0


def test_report_json_is_sorted_and_finite():
    rep = CertificateReport()
    rep.add("b", math.inf, "anchor/b")
    rep.add("a", 1.0, "anchor/a", estimate_based=True)
    data = json.loads(rep.to_json())
    assert list(data["constants"]) == ["a", "b"]
    assert data["constants"]["b"]["value"] is None
    assert rep.value("a") == 1.0
