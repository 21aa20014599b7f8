"""Command-line driver: normcrit {solve,eigs,thresholds,multiplicity,verify,scan-mu}."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .certificates import (
    CertificateReport,
    estimate_gn_constant,
    fountain_lower_bound,
    ground_state_report,
    multiplier_lower_bound,
    mu0_exclusion_bound,
    pohozaev_residual,
    required_lambda1,
    shift_threshold,
    threshold_mu_doublestar,
    threshold_mu_star,
    threshold_mu_star_th3,
    verify_solution,
)
from .config import RunConfig, load_config
from .errors import ConfigInvalid, NormcritError, RunFailed
from .functionals import PenalizedProblem, hypothesis_check
from .mesh import DIRICHLET, ROBIN, assemble
from .solver import (
    MASS_ATTAINED,
    CriticalPointRecord,
    FoundFewer,
    continue_in_r,
    line_max_amplitude,
    multiplicity,
)
from .spectra import fountain_frame, lambda_tilde, solve_eigs

log = logging.getLogger("normcrit")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


# ---------------------------------------------------------------------------
# artifacts


def _clean(obj):
    """JSON-safe copy: non-finite floats become null, arrays become lists."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), indent=1, sort_keys=True) + "\n")


def write_report(out: Path, rep: CertificateReport) -> None:
    write_json(out / "certificate.json", {"constants": rep.entries, "flags": rep.flags})


def write_trace(path: Path, records) -> None:
    cols = ["seed_id", "stage", "r", "energy", "energy_unpenalized", "mass", "lambda",
            "grad_norm", "newton_iters"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for rec in records:
            for row in rec.trace:
                w.writerow([repr(float(row[c])) if isinstance(row[c], (float, np.floating)) else row[c] for c in cols])


def write_solution(out: Path, idx: int, rec: CriticalPointRecord, disc, mode) -> None:
    full = disc.expand(rec.u, mode)
    dim = disc.dimension
    csv_name = f"solution_{idx}.csv"
    with open(out / csv_name, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node"] + ["x", "y", "z"][:dim] + ["value"])
        for i in range(disc.n_nodes):
            w.writerow([i] + [repr(float(c)) for c in disc.nodes[i]] + [repr(float(full[i]))])
    lines = ["set datafile separator ','", f"set title 'solution {idx} ({rec.seed_id}, mu={rec.mu:g})'"]
    if dim == 1:
        lines += ["set xlabel 'x'", f"plot '{csv_name}' every ::1 using 2:3 with lines title 'u'"]
    elif dim == 2:
        lines += ["set pm3d map", f"splot '{csv_name}' every ::1 using 2:3:4 with pm3d title 'u'"]
    else:
        lines += [f"splot '{csv_name}' every ::1 using 2:3:4:5 with points palette title 'u'"]
    (out / f"plot_{idx}.gp").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# problem construction


def _need(cfg: RunConfig, *what):
    for w in what:
        if w == "domain" and cfg.domain is None:
            raise ConfigInvalid("this command needs a [domain] block")
        if w == "f" and cfg.f is None:
            raise ConfigInvalid("this command needs a [nonlinearity] block")
        if w == "mu" and cfg.mu is None:
            raise ConfigInvalid("this command needs mu (not [mu_scan])")


def build_problem(cfg: RunConfig, mu: float):
    disc = assemble(cfg.domain, cfg.n)
    prob = PenalizedProblem(disc, cfg.mode, cfg.f, mu, cfg.schedule.r0, cfg.g, cfg.tol,
                            boundary_scale=cfg.boundary_scale)
    return disc, prob


def _verdict_summary(verdicts) -> bool:
    return all(v["passed"] for v in verdicts)


# ---------------------------------------------------------------------------
# subcommands


def cmd_solve(cfg: RunConfig, out: Path) -> int:
    _need(cfg, "domain", "f", "mu")
    disc, prob = build_problem(cfg, cfg.mu)
    spec = solve_eigs(disc, cfg.mode, 1, cfg.boundary_scale)
    rec = continue_in_r(prob, cfg.schedule, lam1=spec.lambda1,
                        seed=line_max_amplitude(prob.with_r(cfg.schedule.r0), spec.vectors[:, 0]) * spec.vectors[:, 0])
    write_json(out / "records.json", [rec.to_dict()])
    write_trace(out / "trace.csv", [rec])
    write_solution(out, 0, rec, disc, cfg.mode)
    verdict = verify_solution(rec, prob, spec)
    rep = _base_report(cfg, disc, spec)
    rep.flags["verdicts"] = [verdict]
    write_report(out, rep)
    print(f"solve: case={rec.case} lambda={rec.lam:.12g} mass={rec.mass:.12g} "
          f"residual={rec.pde_residual:.3e} verdict={'pass' if verdict['passed'] else 'FAIL'}")
    return EXIT_OK if verdict["passed"] else EXIT_FAILED


def _base_report(cfg: RunConfig, disc, spec) -> CertificateReport:
    rep = CertificateReport()
    anchor = {"dirichlet": "first-eigenvalue/dirichlet", "neumann": "first-eigenvalue/shifted-neumann",
              "robin": "first-eigenvalue/robin"}[cfg.mode.name]
    rep.add("lambda1", spec.lambda1, anchor)
    if cfg.f is not None:
        rep.flags["certificate"] = cfg.f.certificate().as_dict()
        lt = lambda_tilde(disc) if cfg.mode.is_robin else None
        rep.flags["hypotheses"] = hypothesis_check(cfg.f, spec, cfg.mode, disc.dimension, cfg.g, lt)
    return rep


def cmd_eigs(cfg: RunConfig, out: Path) -> int:
    _need(cfg, "domain")
    disc = assemble(cfg.domain, cfg.n)
    spec = solve_eigs(disc, cfg.mode, cfg.spectrum_count, cfg.boundary_scale)
    (out / "spectrum.json").write_text(spec.to_json() + "\n")
    if cfg.dump_vectors:
        spec.write_vectors(out / "eigenvectors.bin")
    rep = CertificateReport()
    rep.add("lambda1", spec.lambda1, f"first-eigenvalue/{cfg.mode.name}")
    if cfg.mode.is_robin:
        rep.add("lambda_hat", spec.lambda1, "robin/first-eigenvalue")
    rep.add("lambda_tilde", lambda_tilde(disc), "robin/trace-normalized-infimum")
    rep.add("lambda_tilde_asserted", 1.0, "robin/trace-normalized-infimum/asserted")
    write_report(out, rep)
    for row in json.loads(spec.to_json()):
        print(f"k={row['k']} lambda={row['lambda']:.12g} multiplicity={row['multiplicity']}")
    return EXIT_OK


def _threshold_inputs(cfg: RunConfig) -> dict:
    """Merge explicit [thresholds] overrides with computed values."""
    th = dict(cfg.thresholds)
    need_compute = any(k not in th for k in ("lambda1", "C", "N"))
    if need_compute:
        _need(cfg, "domain")
    if cfg.domain is not None and need_compute:
        disc = assemble(cfg.domain, cfg.n)
        th.setdefault("N", disc.dimension)
        spec = solve_eigs(disc, DIRICHLET, 1)
        th.setdefault("lambda1", spec.lambda1)
        p = th.get("p", cfg.f.p if cfg.f else None)
        starts = int(cfg.gn.get("starts", 20))
        gdisc = assemble(cfg.domain, int(cfg.gn["n"])) if "n" in cfg.gn else disc
        if "C" not in th and p is not None:
            th["C"] = estimate_gn_constant(gdisc, p, "interior", starts, cfg.seed).C
            th["_C_estimated"] = True
        if cfg.mode.is_robin:
            rspec = solve_eigs(disc, ROBIN, 1, cfg.boundary_scale)
            th.setdefault("lambda_hat", rspec.lambda1)
            th.setdefault("lambda_tilde", lambda_tilde(disc))
            if "C_robin" not in th and p is not None:
                th["C_robin"] = estimate_gn_constant(gdisc, p, "sobolev-robin", starts, cfg.seed).C
            if "C_trace" not in th and cfg.g is not None:
                th["C_trace"] = estimate_gn_constant(gdisc, cfg.g.p, "trace", starts, cfg.seed).C
    if cfg.f is not None:
        cert = cfg.f.certificate()
        th.setdefault("K2", cert.K2)
        th.setdefault("Kp", cert.Kp)
        th.setdefault("p", cert.p)
        th.setdefault("q", cert.q)
    if cfg.g is not None:
        gc = cfg.g.certificate()
        th.setdefault("K2g", gc.K2)
        th.setdefault("Kl", gc.Kp)
        th.setdefault("l", gc.p)
    for key in ("lambda1", "C", "K2", "Kp", "p", "q", "N"):
        if key not in th:
            raise ConfigInvalid(f"thresholds: cannot determine {key!r}; give it in [thresholds]")
    th["N"] = int(th["N"])
    th.setdefault("M", th["lambda1"] / 2.0)
    return th


def compute_thresholds(cfg: RunConfig) -> CertificateReport:
    th = _threshold_inputs(cfg)
    est = bool(th.get("_C_estimated"))
    rep = CertificateReport()
    rep.flags["inputs"] = {k: v for k, v in th.items() if not k.startswith("_")}
    rep.add("lambda1", th["lambda1"], "first-eigenvalue/dirichlet")
    rep.add("C_pN", th["C"], "gagliardo-nirenberg", est)
    args = (th["K2"], th["Kp"], th["p"], th["q"], th["lambda1"], th["N"])

    def attempt(key, anchor, fn, *a, **kw):
        try:
            rep.add(key, fn(*a, **kw), anchor, est)
        except (NormcritError, ValueError) as exc:
            rep.add(key, None, anchor, est)
            rep.flags.setdefault("skipped", {})[key] = f"{type(exc).__name__}: {exc}"

    attempt("mu_star", "mass-threshold/level-M", threshold_mu_star, *args, th["M"], th["C"])
    attempt("mu_star_th3", "mass-threshold/level-half-lambda1", threshold_mu_star_th3, *args, th["C"])
    attempt("mu0_exclusion", "zero-multiplier-exclusion/subcritical-branch", mu0_exclusion_bound,
            th["K2"], th["Kp"], th["p"], th["lambda1"], th["N"], th["C"])
    rep.add("multiplier_lower_bound", multiplier_lower_bound(th["lambda1"], th["q"], th["N"]),
            "ground-state/multiplier-lower-bound")
    if th["N"] >= 3:
        try:
            sh = shift_threshold(*args, th["C"])
            rep.add("shift_s", sh["s"], "ground-state/shifted-norm")
            rep.add("shift_s_printed", sh["s_printed"], "ground-state/shifted-norm/printed-sign")
            rep.add("mu_star_s", sh["mu_star_s"], "ground-state/shifted-threshold", est)
        except NormcritError as exc:
            rep.flags.setdefault("skipped", {})["shift"] = f"{type(exc).__name__}: {exc}"
    mu = cfg.mu if cfg.mu is not None else None
    variant = str(th.get("variant", "i"))
    if mu is not None:
        kw = {"p": th["p"]}
        if variant == "i":
            kw["Kp"] = th["Kp"]
        else:
            kw.update(a=th.get("a"), p_low=th.get("p_low"))
        attempt("lambda_star", f"small-eigenvalue-domain/variant-{variant}", required_lambda1,
                mu, th["q"], th["N"], th["C"], variant, **kw)
    if "lambda_hat" in th:
        lt = th.get("lambda_tilde", 1.0)
        attempt("mu_doublestar", "robin/mass-threshold", threshold_mu_doublestar,
                th["K2"], th["Kp"], th["p"], th.get("K2g", 0.0), th.get("Kl", 0.0), th.get("l", 3.0),
                th["lambda_hat"], lt, th["q"], th.get("M", th["lambda_hat"] / 2.0),
                th.get("C_robin", th["C"]), th.get("C_trace", 0.0))
        rep.add("lambda_hat", th["lambda_hat"], "robin/first-eigenvalue")
        rep.add("lambda_tilde", lt, "robin/trace-normalized-infimum")
        rep.add("lambda_tilde_asserted", 1.0, "robin/trace-normalized-infimum/asserted")
    if cfg.multiplicity and mu is not None and cfg.domain is not None:
        disc = assemble(cfg.domain, cfg.n)
        frames = cfg.multiplicity.get("frames", [])
        spec = solve_eigs(disc, DIRICHLET, min(max(frames, default=1) + 2, disc.n_nodes))
        for j in frames:
            rep.add(f"fountain_lower_bound_j{j}",
                    fountain_lower_bound(mu, float(spec.values[j - 1]), th["K2"], th["Kp"], th["C"], th["p"], th["N"]),
                    "fountain/level-lower-bound", est)
            rep.add(f"fountain_upper_bound_j{j}", mu * float(spec.values[j - 1]) / 2.0, "fountain/level-upper-bound")
    return rep


def cmd_thresholds(cfg: RunConfig, out: Path) -> int:
    rep = compute_thresholds(cfg)
    write_report(out, rep)
    for k in sorted(rep.entries):
        print(f"{k} = {rep.entries[k]['value']}")
    return EXIT_OK


def cmd_multiplicity(cfg: RunConfig, out: Path) -> int:
    _need(cfg, "domain", "f", "mu")
    if not cfg.multiplicity:
        raise ConfigInvalid("multiplicity needs a [multiplicity] block")
    m = cfg.multiplicity["m"]
    js = cfg.multiplicity.get("frames", [])
    disc, prob = build_problem(cfg, cfg.mu)
    spec = solve_eigs(disc, cfg.mode, min(max(js, default=1) + 2, prob.dim), cfg.boundary_scale)
    frames = [fountain_frame(spec, j, cfg.mu, cfg.multiplicity["k_tune"], M=prob.M) for j in js]
    failed = None
    try:
        records = multiplicity(prob, m, frames, cfg.schedule, spec)
    except FoundFewer as exc:
        records, failed = exc.records, exc
    ks = [1] + js
    verdicts = [verify_solution(r, prob, spec, k=ks[i]) for i, r in enumerate(records)]
    write_json(out / "records.json", [r.to_dict() for r in records])
    write_trace(out / "trace.csv", records)
    for i, r in enumerate(records):
        write_solution(out, i, r, disc, cfg.mode)
    rep = _base_report(cfg, disc, spec)
    rep.flags["verdicts"] = verdicts
    rep.flags["found"] = len(records)
    write_report(out, rep)
    for r, v in zip(records, verdicts):
        print(f"{r.seed_id}: lambda={r.lam:.10g} energy={r.energy_unpenalized:.10g} "
              f"verdict={'pass' if v['passed'] else 'FAIL'}")
    if failed is not None:
        print(f"multiplicity: {failed}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK if _verdict_summary(verdicts) else EXIT_FAILED


def _record_from_dict(d: dict) -> CriticalPointRecord:
    keys = CriticalPointRecord.__dataclass_fields__
    kw = {k: d[k] for k in keys if k in d and k not in ("u", "trace")}
    kw["u"] = np.asarray(d["u"], dtype=float)
    if kw.get("energy_penalized") is None:
        kw["energy_penalized"] = math.inf
    return CriticalPointRecord(**kw)


def cmd_verify(cfg: RunConfig, out: Path) -> int:
    _need(cfg, "domain", "f", "mu")
    path = out / "records.json"
    if not path.exists():
        raise RunFailed(f"{path} not found; run solve or multiplicity first")
    records = [_record_from_dict(d) for d in json.loads(path.read_text())]
    disc, prob = build_problem(cfg, cfg.mu)
    js = cfg.multiplicity.get("frames", []) if cfg.multiplicity else []
    spec = solve_eigs(disc, cfg.mode, min(max(js, default=1) + 2, prob.dim), cfg.boundary_scale)
    ks = [1] + list(js)
    verdicts = []
    for i, rec in enumerate(records):
        if rec.u.shape != (prob.dim,):
            raise RunFailed("records do not match the configured discretization")
        verdicts.append(verify_solution(rec, prob, spec, k=ks[i] if i < len(ks) else 1))
    rep = _base_report(cfg, disc, spec)
    rep.flags["verdicts"] = verdicts
    if cfg.mode.is_dirichlet:
        rep.flags["pohozaev_residual"] = [pohozaev_residual(r, disc, cfg.f) for r in records]
        rep.flags["ground_state"] = ground_state_report(records, prob, spec)
    write_report(out, rep)
    ok = _verdict_summary(verdicts)
    print(f"verify: {sum(v['passed'] for v in verdicts)}/{len(verdicts)} records pass")
    return EXIT_OK if ok else EXIT_FAILED


def _scan_row(args):
    cfg, mu = args
    disc, prob = build_problem(cfg, mu)
    row = {"mu": mu, "converged": False, "lambda": None, "energy": None, "mass_error": None, "case": None}
    try:
        rec = continue_in_r(prob, cfg.schedule)
    except NormcritError as exc:
        row["case"] = type(exc).__name__
        return row, None
    row.update(converged=rec.case == MASS_ATTAINED, case=rec.case, energy=rec.energy_unpenalized,
               mass_error=abs(rec.mass - mu), **{"lambda": rec.lam})
    return row, rec.summary()


def cmd_scan_mu(cfg: RunConfig, out: Path, jobs: int = 1) -> int:
    _need(cfg, "domain", "f")
    grid = cfg.mu_grid()
    base = replace(cfg, mu=None)
    tasks = [(base, mu) for mu in grid]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_scan_row, tasks))
    else:
        results = [_scan_row(t) for t in tasks]
    cols = ["mu", "converged", "lambda", "energy", "mass_error", "case"]
    with open(out / "scan.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row, _ in results:
            w.writerow([repr(float(row[c])) if isinstance(row[c], (float, np.floating)) else row[c] for c in cols])
    write_json(out / "records.json", [s for _, s in results if s is not None])
    mu_star = None
    try:
        th_cfg = replace(cfg, mode=DIRICHLET, g=None) if cfg.mode.is_dirichlet else cfg
        if cfg.mode.is_dirichlet:
            rep = compute_thresholds(th_cfg)
            mu_star = rep.value("mu_star_th3")
            write_report(out, rep)
    except NormcritError as exc:
        log.info("no certificate threshold: %s", exc)
    attained = [row["mu"] for row, _ in results if row["converged"]]
    largest = max(attained) if attained else None
    print(f"scan-mu: largest mu with MassAttained = {largest}; certificate mu* = {mu_star}")
    if mu_star is not None:
        below = [row for row, _ in results if row["mu"] < mu_star]
        if not all(r["converged"] for r in below):
            return EXIT_FAILED
    return EXIT_OK


COMMANDS = ("solve", "eigs", "thresholds", "multiplicity", "verify", "scan-mu")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="normcrit", description=__doc__)
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="TOML run configuration")
    ap.add_argument("--out", help="output directory (overrides the config)")
    ap.add_argument("--jobs", type=int, default=1, help="parallel scan rows")
    ap.add_argument("--seed", type=int, help="RNG seed (overrides the config)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.jobs < 1:
            raise ConfigInvalid("--jobs must be >= 1")
        out = Path(args.out or cfg.output)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "scan-mu":
            if cfg.mu_scan is None and cfg.mu is None:
                raise ConfigInvalid("scan-mu needs mu or [mu_scan]")
            return cmd_scan_mu(cfg, out, args.jobs)
        if cfg.mu_scan is not None and args.command in ("solve", "multiplicity", "verify"):
            raise ConfigInvalid(f"{args.command} needs a single mu, not [mu_scan]")
        handler = {"solve": cmd_solve, "eigs": cmd_eigs, "thresholds": cmd_thresholds,
                   "multiplicity": cmd_multiplicity, "verify": cmd_verify}[args.command]
        return handler(cfg, out)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NormcritError, ValueError, OSError) as exc:
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
