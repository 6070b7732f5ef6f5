"""Command-line interface.

Subcommands cover the pipeline end to end: tabulate -> sample / generate ->
search-c0 / fit-ml -> fit-dp -> risk -> select -> report. Every stochastic
command requires a seed (flag or config file; explicit flags win) and all
outputs are byte-deterministic given the seed.

Exit codes: 0 ok, 2 input error, 3 degenerate input (e.g. no sample
uniques), 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import dpmcmc, loglinear, risk, selection, table as tbl
from .errors import DegenerateInputError, DPRiskError, InputError, NumericalError

__all__ = ["main"]


# -- small helpers -----------------------------------------------------------


def _to_builtin(x):
    if isinstance(x, dict):
        return {k: _to_builtin(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_to_builtin(v) for v in x]
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, np.ndarray):
        return [_to_builtin(v) for v in x.tolist()]
    return x


def _write_json(obj, path: str | Path) -> None:
    with Path(path).open("w") as fh:
        json.dump(_to_builtin(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_json(path: str | Path):
    try:
        with Path(path).open() as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise InputError(f"file not found: {path}")
    except json.JSONDecodeError as e:
        raise InputError(f"invalid JSON in {path}: {e}")


def _load_variables(path: str | Path) -> list[tbl.KeyVariable]:
    data = _load_json(path)
    if not isinstance(data, list) or not data:
        raise InputError(f"{path}: expected a nonempty JSON list of variables")
    out = []
    for v in data:
        try:
            out.append(tbl.KeyVariable(v["name"], tuple(v["levels"])))
        except (KeyError, TypeError):
            raise InputError(f"{path}: each variable needs 'name' and 'levels'")
    return out


def _load_structural_zeros(path: str | Path, shape: tuple[int, ...]) -> np.ndarray:
    """JSON list of per-variable index lists -> boolean mask."""
    data = _load_json(path)
    mask = np.zeros(int(np.prod(shape)), dtype=bool)
    for idx in data:
        try:
            mask[int(np.ravel_multi_index(tuple(int(i) for i in idx), shape))] = True
        except ValueError:
            raise InputError(f"structural-zero index {idx} out of range for shape {shape}")
    return mask


def _parse_base(text: str):
    """gamma:a,b or gaussian:mean0,var0,shape,scale (defaults when omitted)."""
    kind, _, rest = text.partition(":")
    args = [float(x) for x in rest.split(",") if x.strip()] if rest else []
    if kind == "gamma":
        if len(args) > 2:
            raise InputError("gamma base takes at most two parameters a,b")
        return dpmcmc.GammaBase(*args)
    if kind == "gaussian":
        if len(args) > 4:
            raise InputError("gaussian base takes at most four parameters")
        return dpmcmc.GaussianBase(*args)
    raise InputError(f"unknown base measure {text!r} (use gamma:.. or gaussian:..)")


def _sampler_config(args) -> dpmcmc.SamplerConfig:
    base_dict = {}
    if getattr(args, "config", None):
        cfg = _load_json(args.config)
        if not isinstance(cfg, dict):
            raise InputError(f"{args.config}: sampler config must be a JSON object")
        base_dict.update(cfg)
    draws_val = getattr(args, "draws_count", None)
    if draws_val is None:
        maybe = getattr(args, "draws", None)
        draws_val = maybe if isinstance(maybe, int) else None
    overrides = {
        "burn_in": getattr(args, "burn_in", None),
        "draws": draws_val,
        "thin": getattr(args, "thin", None),
        "epsilon": getattr(args, "epsilon", None),
        "seed": getattr(args, "seed", None),
    }
    for k, v in overrides.items():
        if v is not None:
            base_dict[k] = v
    if getattr(args, "empirical_bayes", False):
        base_dict["empirical_bayes"] = True
    if getattr(args, "parametric", False):
        base_dict["parametric"] = True
    if "seed" not in base_dict or base_dict["seed"] is None:
        raise InputError("a seed is required (via --seed or the config file)")
    try:
        return dpmcmc.SamplerConfig.from_dict(base_dict)
    except TypeError as e:
        raise InputError(f"bad sampler config: {e}")


def _require_seed(args) -> int:
    if args.seed is None:
        raise InputError("a seed is required for this command")
    return args.seed


def _fmt(x: float) -> str:
    return repr(float(x))


# -- subcommands --------------------------------------------------------------


def cmd_tabulate(args) -> int:
    variables = _load_variables(args.variables)
    sz = None
    if args.structural_zeros:
        shape = tuple(v.n_levels for v in variables)
        sz = _load_structural_zeros(args.structural_zeros, shape)
    t = tbl.tabulate_file(args.input, variables, pi=args.pi,
                          delimiter=args.delimiter, structural_zeros=sz)
    tbl.save_table(t, args.out)
    uniques = int(np.sum(t.f[t.active] == 1))
    print(f"K={t.n_cells} cells ({t.K} active), n={t.n}, sample uniques={uniques}")
    print(f"wrote {args.out}")
    return 0


def cmd_sample(args) -> int:
    pop = tbl.load_table(args.population)
    out = tbl.draw_sample(pop, args.pi, _require_seed(args))
    tbl.save_table(out, args.out)
    print(f"n={out.n} of N={out.N} (pi={args.pi})")
    print(f"wrote {args.out}")
    return 0


def cmd_generate(args) -> int:
    variables = _load_variables(args.variables)
    spec = loglinear.parse_shorthand(args.spec, variables)
    beta = np.asarray(_load_json(args.beta), dtype=float)
    base = _parse_base(args.base) if args.base else None
    sz = None
    if args.structural_zeros:
        shape = tuple(v.n_levels for v in variables)
        sz = _load_structural_zeros(args.structural_zeros, shape)
    t = tbl.generate_population(spec, beta, args.n_target, _require_seed(args),
                                random_effects=base, mass=args.mass,
                                structural_zeros=sz)
    tbl.save_table(t, args.out)
    print(f"N={t.N} over K={t.n_cells} cells ({t.K} active)")
    print(f"wrote {args.out}")
    return 0


def cmd_fit_ml(args) -> int:
    t = tbl.load_table(args.table)
    spec = loglinear.parse_shorthand(args.spec, list(t.variables))
    fit = loglinear.fit_ml(t, spec)
    out = {
        "spec": spec.shorthand(),
        "q": spec.q,
        "beta_hat": [float(b) for b in fit.beta_hat],
        "loglik": fit.loglik,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "grad_norm": fit.grad_norm,
        "message": fit.message,
    }
    _write_json(out, args.out)
    status = "converged" if fit.converged else f"NOT converged ({fit.message})"
    print(f"{spec.shorthand()}: loglik={fit.loglik:.4f}, {status}")
    if not fit.converged:
        raise NumericalError(f"ML fit did not converge: {fit.message}")
    return 0


def cmd_search_c0(args) -> int:
    t = tbl.load_table(args.table)
    grid = None
    if args.gamma_grid:
        grid = [float(x) for x in args.gamma_grid.split(",")]
    result = loglinear.c0_path_search(
        t, gamma_grid=grid, max_steps=args.max_steps,
        decomposability_check=not args.no_decomposability)
    _write_json(result.as_dict(), args.out)
    for step in result.steps:
        print(f"added {step.term[0]}*{step.term[1]} at gamma={step.gamma:.4g} "
              f"(C0={step.c0:.4f}, d={step.d})")
    print(f"path: {' -> '.join(s.shorthand() for s in result.candidate_specs)}")
    print(f"wrote {args.out}")
    return 0


def _run_chains(t, spec, base, cfg, n_chains: int):
    """Run n_chains independent chains (parallel processes where possible)
    and pool the draws in chain order. Returns (pooled, per_chain_diags)."""
    if n_chains <= 1:
        d = dpmcmc.run_chain(t, spec, base, cfg)
        return d, [d.diagnostics()]
    seeds = [int(s.generate_state(1)[0])
             for s in np.random.SeedSequence(cfg.seed).spawn(n_chains)]
    jobs = [dpmcmc.SamplerConfig.from_dict({**cfg.as_dict(), "seed": s})
            for s in seeds]
    results = [None] * n_chains
    try:
        import concurrent.futures as cf

        with cf.ProcessPoolExecutor(max_workers=min(n_chains, 4)) as pool:
            futs = {pool.submit(dpmcmc.run_chain, t, spec, base, job): i
                    for i, job in enumerate(jobs)}
            for fut in cf.as_completed(futs):
                results[futs[fut]] = fut.result()
    except (OSError, PermissionError):
        results = [dpmcmc.run_chain(t, spec, base, job) for job in jobs]
    return dpmcmc.pool_draws(results), [d.diagnostics() for d in results]


def cmd_fit_dp(args) -> int:
    t = tbl.load_table(args.table)
    spec = loglinear.parse_shorthand(args.spec, list(t.variables))
    base = _parse_base(args.base)
    cfg = _sampler_config(args)
    draws, per_chain = _run_chains(t, spec, base, cfg, args.chains)
    draws.save(args.out)
    if args.chains > 1:
        _write_json({"chains": per_chain}, f"{args.out}.chains.json")
    d = draws.diagnostics()
    print(f"H={d['H']} draws over K={d['K']} cells; "
          f"acceptance={d['acceptance_rate']:.3f}, "
          f"median clusters={d['c_trace']['median']:.1f}")
    print(f"wrote {args.out}.lam.npy")
    return 0


def _write_per_cell(report: risk.RiskReport, t: tbl.ContingencyTable, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([v.name for v in t.variables]
                   + ["tau1_star", "tau2_star", "tau1_sd", "tau2_sd"])
        for pc in report.per_cell:
            w.writerow(list(pc.cell) + [_fmt(pc.tau1_star), _fmt(pc.tau2_star),
                                        _fmt(pc.tau1_sd), _fmt(pc.tau2_sd)])


def _write_quantiles(report: risk.RiskReport, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["measure", "level", "value"])
        for name, qs in (("tau1", report.quantiles_sim["tau1"]),
                         ("tau2", report.quantiles_sim["tau2"])):
            for level in sorted(qs):
                w.writerow([name, _fmt(level), _fmt(qs[level])])


def cmd_risk(args) -> int:
    t = tbl.load_table(args.table)
    if args.draws:
        draws = dpmcmc.PosteriorDraws.load(args.draws)
        seed = _require_seed(args)
    else:
        if not (args.spec and args.base):
            raise InputError("risk needs either --draws or --spec plus --base")
        cfg = _sampler_config(args)
        base = _parse_base(args.base)
        spec = loglinear.parse_shorthand(args.spec, list(t.variables))
        draws, _ = _run_chains(t, spec, base, cfg, args.chains)
        seed = cfg.seed
    report = risk.build_risk_report(draws, t, seed=seed)
    _write_json(report.as_dict(), args.out_report)
    if args.out_cells:
        _write_per_cell(report, t, args.out_cells)
    if args.out_quantiles:
        _write_quantiles(report, args.out_quantiles)
    print(f"tau1*={report.tau1_star_hat:.2f}, tau2*={report.tau2_star_hat:.2f} "
          f"over {report.n_uniques} sample uniques")
    if report.true_tau1 is not None:
        print(f"true tau1={report.true_tau1}, tau2={report.true_tau2:.2f}")
    print(f"wrote {args.out_report}")
    return 0


def cmd_select(args) -> int:
    t = tbl.load_table(args.table)
    base = _parse_base(args.base)
    cfg = _sampler_config(args)
    c0_kwargs = {"max_steps": args.max_steps}
    if args.gamma_grid:
        c0_kwargs["gamma_grid"] = [float(x) for x in args.gamma_grid.split(",")]
    run = selection.run_two_stage(
        t, base, cfg, c0_kwargs=c0_kwargs, patience=args.patience,
        report_parametric=args.report_parametric)
    _write_json(run.as_dict(), args.out)
    print(f"chosen: {run.chosen}")
    print(f"stop reason: {run.stop_reason}")
    print(f"wrote {args.out}")
    return 0


def cmd_report(args) -> int:
    data = _load_json(args.selection)
    rows = data.get("scores", [])
    if not rows:
        raise InputError(f"{args.selection}: no scores to report")
    cols = ["spec", "tau1_star", "tau2_star", "C1", "WAIC_U",
            "rank_c1", "rank_waic_u", "rank_true_error", "near_tie"]
    header = ["model", "tau1", "tau2", "C1", "WAIC_U",
              "rk(C1)", "rk(WAIC)", "rk(err)", "~tie"]
    lines = ["  ".join(f"{h:>12s}" for h in header)]
    for row in rows:
        cells = []
        for c in cols:
            v = row.get(c)
            if v is None:
                cells.append(f"{'-':>12s}")
            elif isinstance(v, bool):
                cells.append(f"{('yes' if v else ''):>12s}")
            elif isinstance(v, float):
                cells.append(f"{v:>12.2f}")
            else:
                cells.append(f"{str(v):>12s}")
        lines.append("  ".join(cells))
    lines.append(f"chosen: {data.get('chosen')}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dprisk",
        description="Disclosure-risk estimation with DP log-linear mixed models")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("tabulate", help="cross-classify microdata into a table")
    t.add_argument("--input", required=True)
    t.add_argument("--variables", required=True, help="JSON list of {name, levels}")
    t.add_argument("--pi", type=float, default=1.0)
    t.add_argument("--delimiter", default=None)
    t.add_argument("--structural-zeros", default=None)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_tabulate)

    s = sub.add_parser("sample", help="draw a without-replacement sample")
    s.add_argument("--population", required=True)
    s.add_argument("--pi", type=float, required=True)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    g = sub.add_parser("generate", help="synthesize a population table")
    g.add_argument("--variables", required=True)
    g.add_argument("--spec", required=True)
    g.add_argument("--beta", required=True, help="JSON list of coefficients")
    g.add_argument("--base", default=None, help="random-effect law, e.g. gamma:1,0.1")
    g.add_argument("--mass", type=float, default=None)
    g.add_argument("--n-target", type=int, required=True)
    g.add_argument("--structural-zeros", default=None)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    fm = sub.add_parser("fit-ml", help="maximum-likelihood log-linear fit")
    fm.add_argument("--table", required=True)
    fm.add_argument("--spec", required=True)
    fm.add_argument("--out", required=True)
    fm.set_defaults(func=cmd_fit_ml)

    sc = sub.add_parser("search-c0", help="stage-one penalized path search")
    sc.add_argument("--table", required=True)
    sc.add_argument("--max-steps", type=int, default=4)
    sc.add_argument("--gamma-grid", default=None, help="comma-separated descending")
    sc.add_argument("--no-decomposability", action="store_true")
    sc.add_argument("--out", required=True)
    sc.set_defaults(func=cmd_search_c0)

    fd = sub.add_parser("fit-dp", help="run the DP mixed-model chain")
    fd.add_argument("--table", required=True)
    fd.add_argument("--spec", required=True)
    fd.add_argument("--base", required=True)
    fd.add_argument("--config", default=None, help="JSON mirroring SamplerConfig")
    fd.add_argument("--seed", type=int, default=None)
    fd.add_argument("--burn-in", type=int, default=None)
    fd.add_argument("--draws", type=int, default=None)
    fd.add_argument("--thin", type=int, default=None)
    fd.add_argument("--epsilon", type=float, default=None)
    fd.add_argument("--empirical-bayes", action="store_true")
    fd.add_argument("--parametric", action="store_true")
    fd.add_argument("--chains", type=int, default=1)
    fd.add_argument("--out", required=True, help="output prefix")
    fd.set_defaults(func=cmd_fit_dp)

    r = sub.add_parser("risk", help="risk report from draws or a fresh chain")
    r.add_argument("--table", required=True)
    r.add_argument("--draws", default=None, help="prefix written by fit-dp")
    r.add_argument("--spec", default=None)
    r.add_argument("--base", default=None)
    r.add_argument("--config", default=None)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--burn-in", type=int, default=None)
    r.add_argument("--draws-count", dest="draws_count", type=int, default=None)
    r.add_argument("--thin", type=int, default=None)
    r.add_argument("--epsilon", type=float, default=None)
    r.add_argument("--chains", type=int, default=1)
    r.add_argument("--out-report", required=True)
    r.add_argument("--out-cells", default=None)
    r.add_argument("--out-quantiles", default=None)
    r.set_defaults(func=cmd_risk)

    se = sub.add_parser("select", help="two-stage model selection")
    se.add_argument("--table", required=True)
    se.add_argument("--base", required=True)
    se.add_argument("--config", default=None)
    se.add_argument("--seed", type=int, default=None)
    se.add_argument("--burn-in", type=int, default=None)
    se.add_argument("--draws", type=int, default=None)
    se.add_argument("--thin", type=int, default=None)
    se.add_argument("--epsilon", type=float, default=None)
    se.add_argument("--max-steps", type=int, default=4)
    se.add_argument("--gamma-grid", default=None)
    se.add_argument("--patience", type=int, default=1)
    se.add_argument("--report-parametric", action="store_true")
    se.add_argument("--out", required=True)
    se.set_defaults(func=cmd_select)

    rp = sub.add_parser("report", help="render a selection report as text")
    rp.add_argument("--selection", required=True)
    rp.add_argument("--out", default=None)
    rp.set_defaults(func=cmd_report)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DegenerateInputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DPRiskError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
