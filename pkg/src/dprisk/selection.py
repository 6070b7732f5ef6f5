"""Predictive scoring of candidate models and the two-stage selection loop.

Stage one walks the penalized-likelihood path over two-way interactions
(see dprisk.loglinear); stage two attaches Dirichlet-process random effects
to each fixed-effects structure along the path, runs the chain, and scores
the posterior by C1: the log pointwise predictive density restricted to the
sample-unique cells. The search stops as soon as C1 declines along the
path. WAIC_U (C1 minus the summed posterior variance of the individual log
predictive terms) is computed for comparison reporting only; parametric
counterparts can be scored the same way but are never candidates.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .dpmcmc import PosteriorDraws, SamplerConfig, run_chain
from .errors import DegenerateInputError, DPRiskError, InputError
from .loglinear import C0PathResult, ModelSpec, c0_path_search, fit_ml
from .risk import global_risk_sim, global_risk_star, risk_quantiles
from .table import ContingencyTable

__all__ = [
    "ModelScore",
    "SelectionRun",
    "c1_score",
    "waic_u_score",
    "stop_index",
    "run_two_stage",
    "rank_models",
]


def stop_index(c1_values, patience: int = 1) -> int | None:
    """Index at which a path walk halts: the first position ending a run of
    `patience` consecutive strict C1 declines. None if the walk never stops."""
    declines = 0
    for i in range(1, len(c1_values)):
        if c1_values[i] < c1_values[i - 1]:
            declines += 1
            if declines >= patience:
                return i
        else:
            declines = 0
    return None

logger = logging.getLogger(__name__)


def _unique_log_terms(draws, table: ContingencyTable) -> np.ndarray:
    """H x U matrix of log Poisson(f_k = 1; pi * lambda) over unique cells."""
    lam = np.asarray(draws.lam if hasattr(draws, "lam") else draws, dtype=float)
    if lam.ndim != 2:
        raise InputError("draws must be an H x K matrix of rates")
    unique = table.f[table.active] == 1
    if lam.shape[1] != unique.shape[0]:
        raise InputError("draws are not aligned with the table's active cells")
    if not unique.any():
        raise DegenerateInputError(
            "C1 is undefined: the table has no sample uniques")
    rate = table.pi * lam[:, unique]
    return np.log(rate) - rate


def c1_score(draws, table: ContingencyTable) -> float:
    """Log pointwise predictive density over sample uniques:
    sum_k log[(1/H) sum_h p(f_k | lambda_k^{(h)})], via log-sum-exp."""
    logp = _unique_log_terms(draws, table)
    H = logp.shape[0]
    return float((logsumexp(logp, axis=0) - math.log(H)).sum())


def waic_u_score(draws, table: ContingencyTable) -> tuple[float, float]:
    """(WAIC_U, p_waic_u): C1 minus the per-cell posterior variances of the
    log predictive terms, summed over sample uniques."""
    logp = _unique_log_terms(draws, table)
    if logp.shape[0] < 2:
        raise InputError("WAIC_U needs at least 2 draws")
    c1 = float((logsumexp(logp, axis=0) - math.log(logp.shape[0])).sum())
    p_waic = float(logp.var(axis=0, ddof=1).sum())
    return c1 - p_waic, p_waic


@dataclass
class ModelScore:
    """Scores and risk estimates attached to one evaluated model."""

    spec_id: str
    c1: float
    waic_u: float
    p_waic_u: float
    tau1_star: float
    tau2_star: float
    tau1_sim: float
    tau2_sim: float
    quantiles_sim_tau1: dict[float, float]
    is_candidate: bool = True
    rank_c1: int | None = None
    rank_waic_u: int | None = None
    rank_true_error: int | None = None
    near_tie: bool = False
    true_error_tau1: float | None = None

    def as_dict(self) -> dict:
        return {
            "spec": self.spec_id,
            "C1": self.c1,
            "WAIC_U": self.waic_u,
            "p_waic_u": self.p_waic_u,
            "tau1_star": self.tau1_star,
            "tau2_star": self.tau2_star,
            "tau1_sim": self.tau1_sim,
            "tau2_sim": self.tau2_sim,
            "quantiles_sim_tau1": {str(k): v for k, v in self.quantiles_sim_tau1.items()},
            "is_candidate": self.is_candidate,
            "rank_c1": self.rank_c1,
            "rank_waic_u": self.rank_waic_u,
            "rank_true_error": self.rank_true_error,
            "near_tie": self.near_tie,
            "true_error_tau1": self.true_error_tau1,
        }


@dataclass
class SelectionRun:
    """Everything the two-stage procedure produced."""

    path: C0PathResult
    scores: list[ModelScore]
    chosen: str
    stop_reason: str
    seed: int
    draws_by_spec: dict[str, PosteriorDraws] = field(default_factory=dict, repr=False)

    def candidate_scores(self) -> list[ModelScore]:
        return [s for s in self.scores if s.is_candidate]

    def as_dict(self) -> dict:
        return {
            "path": self.path.as_dict(),
            "scores": [s.as_dict() for s in self.scores],
            "chosen": self.chosen,
            "stop_reason": self.stop_reason,
            "seed": self.seed,
        }


def _score_one(table, spec, base, config, beta_init, sim_seed) -> tuple[ModelScore, PosteriorDraws]:
    draws = run_chain(table, spec, base, config, beta_init=beta_init)
    c1 = c1_score(draws, table)
    if draws.H >= 2:
        waic_u, p_waic = waic_u_score(draws, table)
    else:
        waic_u, p_waic = math.nan, math.nan
    t1s, t2s, _, _ = global_risk_star(draws, table)
    t1, t2, tr1, _ = global_risk_sim(draws, table, seed=sim_seed)
    score = ModelScore(
        spec_id=spec.shorthand(),
        c1=c1,
        waic_u=waic_u,
        p_waic_u=p_waic,
        tau1_star=t1s,
        tau2_star=t2s,
        tau1_sim=t1,
        tau2_sim=t2,
        quantiles_sim_tau1=risk_quantiles(tr1),
        is_candidate=not config.parametric,
    )
    return score, draws


def run_two_stage(
    table: ContingencyTable,
    base,
    sampler_config: SamplerConfig,
    c0_kwargs: dict | None = None,
    patience: int = 1,
    report_parametric: bool = False,
    near_tie_threshold: float = 2.0,
    keep_draws: bool = False,
) -> SelectionRun:
    """Run the full two-stage selection.

    Stage one produces the nested fixed-effects specs (independence first);
    stage two evaluates them in path order with DP random effects attached,
    stopping after `patience` consecutive C1 declines. The chosen model
    maximizes C1 among the candidates actually evaluated. When
    report_parametric is set, each evaluated spec's infinite-mass
    counterpart is scored as well, flagged non-candidate. Chains are seeded
    deterministically from sampler_config.seed; a candidate whose chain
    fails is skipped with a warning.
    """
    if not np.any(table.f[table.active] == 1):
        raise DegenerateInputError("selection requires at least one sample unique")

    path = c0_path_search(table, **(c0_kwargs or {}))
    specs = path.candidate_specs

    seeds = np.random.SeedSequence(sampler_config.seed).spawn(2 * len(specs) + 1)

    def chain_seed(i: int) -> int:
        return int(seeds[i].generate_state(1)[0])

    scores: list[ModelScore] = []
    draws_by_spec: dict[str, PosteriorDraws] = {}
    evaluated: list[tuple[ModelSpec, ModelScore]] = []
    stop_reason = "path exhausted"

    for i, spec in enumerate(specs):
        fit = fit_ml(table, spec)
        beta_init = fit.beta_hat if fit.converged else None
        cfg = SamplerConfig.from_dict({**sampler_config.as_dict(),
                                       "seed": chain_seed(i)})
        try:
            score, draws = _score_one(table, spec, base, cfg, beta_init,
                                      sim_seed=chain_seed(i) + 1)
        except DPRiskError as e:
            logger.warning("candidate %s failed: %s", spec.shorthand(), e)
            continue
        scores.append(score)
        if keep_draws:
            draws_by_spec[score.spec_id] = draws
        evaluated.append((spec, score))

        if stop_index([s.c1 for _, s in evaluated], patience) is not None:
            stop_reason = "C1 declined"
            break

    if not scores:
        raise DPRiskError("every candidate chain failed")

    candidates = [s for s in scores if s.is_candidate]
    chosen = max(candidates, key=lambda s: s.c1).spec_id

    if report_parametric:
        for j, (spec, _) in enumerate(evaluated):
            cfg = SamplerConfig.from_dict({**sampler_config.as_dict(),
                                           "seed": chain_seed(len(specs) + j),
                                           "parametric": True})
            try:
                score, draws = _score_one(table, spec, base, cfg, None,
                                          sim_seed=chain_seed(len(specs) + j) + 1)
            except DPRiskError as e:
                logger.warning("parametric counterpart of %s failed: %s",
                               spec.shorthand(), e)
                continue
            score.spec_id = "P: " + score.spec_id
            scores.append(score)
            if keep_draws:
                draws_by_spec[score.spec_id] = draws

    truth = None
    if table.F is not None:
        from .table import true_risks

        truth = true_risks(table)
    if len(scores) >= 2:
        rank_models(scores, truth=truth, near_tie_threshold=near_tie_threshold)

    return SelectionRun(path=path, scores=scores, chosen=chosen,
                        stop_reason=stop_reason, seed=sampler_config.seed,
                        draws_by_spec=draws_by_spec)


def rank_models(
    scores: list[ModelScore],
    truth: tuple[float, float] | None = None,
    near_tie_threshold: float = 2.0,
) -> list[dict]:
    """Fill rank fields (C1 and WAIC_U descending; |true tau1 error|
    ascending when the true risks are supplied) and return table rows.
    Ties break by spec id; models within `near_tie_threshold` of the best
    C1 are flagged as near ties."""
    if len(scores) < 2:
        raise InputError("ranking needs at least two models")

    by_c1 = sorted(scores, key=lambda s: (-s.c1, s.spec_id))
    for r, s in enumerate(by_c1, start=1):
        s.rank_c1 = r
    by_waic = sorted(scores, key=lambda s: (-s.waic_u, s.spec_id))
    for r, s in enumerate(by_waic, start=1):
        s.rank_waic_u = r
    if truth is not None:
        tau1_true = float(truth[0])
        for s in scores:
            s.true_error_tau1 = s.tau1_star - tau1_true
        by_err = sorted(scores, key=lambda s: (abs(s.true_error_tau1), s.spec_id))
        for r, s in enumerate(by_err, start=1):
            s.rank_true_error = r

    best_c1 = max(s.c1 for s in scores)
    for s in scores:
        s.near_tie = (s.c1 != best_c1) and (best_c1 - s.c1) <= near_tie_threshold

    rows = []
    for s in sorted(scores, key=lambda x: x.rank_c1):
        row = {"spec": s.spec_id, "tau1": s.tau1_star, "tau2": s.tau2_star,
               "C1": s.c1, "WAIC_U": s.waic_u, "rank_C1": s.rank_c1,
               "rank_WAIC_U": s.rank_waic_u, "candidate": s.is_candidate,
               "near_tie": s.near_tie}
        if truth is not None:
            row["error_tau1"] = s.true_error_tau1
            row["rank_error"] = s.rank_true_error
        rows.append(row)
    return rows
